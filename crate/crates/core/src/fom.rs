//! Full-order model: implicit Euler time stepping for the primal, adjoint
//! and linearized systems, the discrete objective and gradient, box
//! projection, and synthetic noisy-data generation.

use std::collections::HashMap;
use std::hash::Hasher;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fem::{
    assemble_coupling, assemble_diffusion_affine, assemble_mass,
    assemble_reaction_affine, assemble_stiffness, AffineOperator, Mesh, PdeKind, SparseChol,
    SparseOperator,
};

/// Inner product carried by the parameter space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSpace {
    L2,
    H1,
}

/// DoF coefficients of a parameter trajectory: one column per time step, or
/// a single column for stationary fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterField {
    coeffs: DMatrix<f64>,
    stationary: bool,
}

impl ParameterField {
    pub fn stationary(coeffs: DVector<f64>) -> Self {
        let n = coeffs.len();
        Self {
            coeffs: DMatrix::from_column_slice(n, 1, coeffs.as_slice()),
            stationary: true,
        }
    }

    pub fn transient(coeffs: DMatrix<f64>) -> Self {
        Self {
            coeffs,
            stationary: false,
        }
    }

    pub fn constant(n_dofs: usize, value: f64) -> Self {
        Self {
            coeffs: DMatrix::from_element(n_dofs, 1, value),
            stationary: true,
        }
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.coeffs
    }

    pub fn n_dofs(&self) -> usize {
        self.coeffs.nrows()
    }

    /// Column for time step k in 1..=K (stationary fields broadcast).
    pub fn column(&self, k: usize) -> DVector<f64> {
        if self.stationary {
            self.coeffs.column(0).into_owned()
        } else {
            self.coeffs.column(k - 1).into_owned()
        }
    }

    pub fn min_entry(&self) -> f64 {
        self.coeffs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_entry(&self) -> f64 {
        self.coeffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Entrywise membership in [lo, hi].
    pub fn in_box(&self, lo: f64, hi: f64) -> bool {
        self.coeffs.iter().all(|&v| v >= lo && v <= hi)
    }

    pub fn add(&self, shift: &ParameterField) -> ParameterField {
        assert_eq!(self.stationary, shift.stationary);
        Self {
            coeffs: &self.coeffs + &shift.coeffs,
            stationary: self.stationary,
        }
    }

    /// Replicates a stationary field across K columns.
    pub fn broadcast(&self, n_steps: usize) -> ParameterField {
        if !self.stationary {
            return self.clone();
        }
        let col = self.coeffs.column(0);
        let mut m = DMatrix::zeros(self.n_dofs(), n_steps);
        for k in 0..n_steps {
            m.set_column(k, &col);
        }
        Self {
            coeffs: m,
            stationary: false,
        }
    }
}

/// Role of a state trajectory. Primal kinds satisfy u^0 = 0 implicitly,
/// adjoint kinds p^{K+1} = 0; neither endpoint is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Primal,
    Adjoint,
    LinearizedPrimal,
    LinearizedAdjoint,
}

/// DoF coefficients of a state or adjoint trajectory, one column per step.
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    coeffs: DMatrix<f64>,
    kind: TrajectoryKind,
}

impl StateTrajectory {
    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn kind(&self) -> TrajectoryKind {
        self.kind
    }

    pub fn column(&self, k: usize) -> DVector<f64> {
        self.coeffs.column(k - 1).into_owned()
    }

    pub fn n_steps(&self) -> usize {
        self.coeffs.ncols()
    }
}

/// Observation trajectory on the output space.
#[derive(Debug, Clone)]
pub struct Observation {
    coeffs: DMatrix<f64>,
}

impl Observation {
    pub fn new(coeffs: DMatrix<f64>) -> Result<Self> {
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteObjective);
        }
        Ok(Self { coeffs })
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn column(&self, k: usize) -> DVector<f64> {
        self.coeffs.column(k - 1).into_owned()
    }
}

/// Right-hand side trajectory, stored as assembled dual vectors with
/// boundary rows zeroed.
#[derive(Debug, Clone)]
enum Source {
    Constant(DVector<f64>),
    PerStep(DMatrix<f64>),
}

impl Source {
    fn column(&self, k: usize) -> DVector<f64> {
        match self {
            Source::Constant(v) => v.clone(),
            Source::PerStep(m) => m.column(k - 1).into_owned(),
        }
    }
}

/// Nodal description of the forcing term f.
pub enum SourceSpec {
    /// f identically one (the benchmark setting).
    ConstantOne,
    /// f given by a stationary nodal field.
    ConstantField(DVector<f64>),
    /// f given per time step as nodal fields (one column per step).
    PerStepFields(DMatrix<f64>),
}

/// The discretized parabolic problem: mesh, operators, inner products, time
/// grid, box bounds, and the observation setup with ||C|| = 1.
pub struct FomProblem {
    mesh: Mesh,
    kind: PdeKind,
    q_space: ParamSpace,
    affine: AffineOperator,
    source: Source,
    n_steps: usize,
    dt: f64,
    lower: f64,
    upper: f64,
    m_h: SparseOperator,
    m_sys: SparseOperator,
    m_v: SparseOperator,
    m_q: SparseOperator,
    obs_norm: f64,
    mq_chol: OnceLock<Arc<SparseChol>>,
    mv_chol: OnceLock<Arc<SparseChol>>,
    step_cache: Mutex<HashMap<u64, Vec<(Vec<u64>, Arc<SparseChol>)>>>,
    solve_count: AtomicUsize,
}

/// Box bounds of the admissible set from the benchmark setup.
pub const DEFAULT_LOWER_BOUND: f64 = 1e-3;
pub const DEFAULT_UPPER_BOUND: f64 = 1e3;

/// Background / regularization center value.
pub const BACKGROUND_VALUE: f64 = 3.0;

impl FomProblem {
    /// Builds the problem with the benchmark source f = 1 and T = 1.
    pub fn new(
        mesh: Mesh,
        kind: PdeKind,
        q_space: ParamSpace,
        n_steps: usize,
        bounds: (f64, f64),
    ) -> Result<Self> {
        Self::with_source(mesh, kind, q_space, n_steps, bounds, SourceSpec::ConstantOne)
    }

    pub fn with_source(
        mesh: Mesh,
        kind: PdeKind,
        q_space: ParamSpace,
        n_steps: usize,
        bounds: (f64, f64),
        source: SourceSpec,
    ) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("n_steps must be positive".into()));
        }
        if !(bounds.0 > 0.0 && bounds.0 < bounds.1) {
            return Err(Error::Config(format!(
                "invalid box bounds ({}, {})",
                bounds.0, bounds.1
            )));
        }
        let m_h = assemble_mass(&mesh);
        let stiff = assemble_stiffness(&mesh, None)?;
        let m_v = m_h.add(&stiff);
        let m_q = match q_space {
            ParamSpace::L2 => m_h.clone(),
            ParamSpace::H1 => m_v.clone(),
        };
        // Mass with boundary rows/columns zeroed: pairs with the identity
        // rows carried by the constrained affine operator.
        let m_sys = {
            let n = mesh.n_nodes();
            let mut coo = nalgebra_sparse::CooMatrix::new(n, n);
            for (i, j, v) in m_h.csr().triplet_iter() {
                if !mesh.is_boundary(i) && !mesh.is_boundary(j) {
                    coo.push(i, j, *v);
                }
            }
            SparseOperator::from_coo(&coo, true)
        };
        let affine = match kind {
            PdeKind::Reaction => assemble_reaction_affine(&mesh),
            PdeKind::Diffusion => assemble_diffusion_affine(&mesh),
        };
        let constrain = |mesh: &Mesh, mut v: DVector<f64>| {
            for i in 0..mesh.n_nodes() {
                if mesh.is_boundary(i) {
                    v[i] = 0.0;
                }
            }
            v
        };
        let source = match source {
            SourceSpec::ConstantOne => {
                let ones = DVector::from_element(mesh.n_nodes(), 1.0);
                Source::Constant(constrain(&mesh, m_h.apply(&ones)))
            }
            SourceSpec::ConstantField(f) => {
                if f.len() != mesh.n_nodes() {
                    return Err(Error::DimensionMismatch {
                        expected: mesh.n_nodes(),
                        got: f.len(),
                        context: "source field",
                    });
                }
                Source::Constant(constrain(&mesh, m_h.apply(&f)))
            }
            SourceSpec::PerStepFields(f) => {
                if f.nrows() != mesh.n_nodes() || f.ncols() != n_steps {
                    return Err(Error::DimensionMismatch {
                        expected: mesh.n_nodes() * n_steps,
                        got: f.nrows() * f.ncols(),
                        context: "per-step source fields",
                    });
                }
                let mut cols = DMatrix::zeros(mesh.n_nodes(), n_steps);
                for k in 0..n_steps {
                    let col = constrain(&mesh, m_h.apply(&f.column(k).into_owned()));
                    cols.set_column(k, &col);
                }
                Source::PerStep(cols)
            }
        };
        Ok(Self {
            dt: 1.0 / n_steps as f64,
            n_steps,
            lower: bounds.0,
            upper: bounds.1,
            affine,
            source,
            m_h,
            m_sys,
            m_v,
            m_q,
            q_space,
            kind,
            mesh,
            obs_norm: 1.0,
            mq_chol: OnceLock::new(),
            mv_chol: OnceLock::new(),
            step_cache: Mutex::new(HashMap::new()),
            solve_count: AtomicUsize::new(0),
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn kind(&self) -> PdeKind {
        self.kind
    }

    pub fn q_space(&self) -> ParamSpace {
        self.q_space
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    pub fn n_state_dofs(&self) -> usize {
        self.mesh.n_nodes()
    }

    pub fn n_param_dofs(&self) -> usize {
        self.mesh.n_nodes()
    }

    /// L2 Gram matrix over all nodes.
    pub fn mass(&self) -> &SparseOperator {
        &self.m_h
    }

    /// Boundary-constrained mass matrix driving the time derivative.
    pub fn mass_constrained(&self) -> &SparseOperator {
        &self.m_sys
    }

    /// V (H1) Gram matrix.
    pub fn v_product(&self) -> &SparseOperator {
        &self.m_v
    }

    /// Q Gram matrix.
    pub fn q_product(&self) -> &SparseOperator {
        &self.m_q
    }

    pub fn affine(&self) -> &AffineOperator {
        &self.affine
    }

    /// Observation norm bound ||C||.
    pub fn observation_norm(&self) -> f64 {
        self.obs_norm
    }

    /// Applies the observation operator (the V -> H embedding) to a state
    /// trajectory. Swapping the observation means replacing this map and
    /// `obs_gram` consistently.
    pub fn observe(&self, u: &StateTrajectory) -> Observation {
        Observation {
            coeffs: u.coeffs.clone(),
        }
    }

    /// Gram matrix of the observation space functional (C_h on V_h).
    pub fn obs_gram(&self) -> &SparseOperator {
        &self.m_h
    }

    /// Assembled source columns L^k (boundary rows zeroed), one per step.
    pub fn source_columns(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.mesh.n_nodes(), self.n_steps);
        for k in 1..=self.n_steps {
            out.set_column(k - 1, &self.source.column(k));
        }
        out
    }

    pub fn mq_cholesky(&self) -> Arc<SparseChol> {
        Arc::clone(self.mq_chol.get_or_init(|| {
            Arc::new(self.m_q.cholesky().expect("Q Gram matrix is SPD"))
        }))
    }

    pub fn mv_cholesky(&self) -> Arc<SparseChol> {
        Arc::clone(self.mv_chol.get_or_init(|| {
            Arc::new(self.m_v.cholesky().expect("V Gram matrix is SPD"))
        }))
    }

    /// Number of full-order trajectory solves performed so far.
    pub fn fom_solve_count(&self) -> usize {
        self.solve_count.load(Ordering::Relaxed)
    }

    fn bump_solve_count(&self) {
        self.solve_count.fetch_add(1, Ordering::Relaxed);
    }

    fn constrain_vec(&self, mut v: DVector<f64>) -> DVector<f64> {
        for i in 0..self.mesh.n_nodes() {
            if self.mesh.is_boundary(i) {
                v[i] = 0.0;
            }
        }
        v
    }

    /// Factorization of the step matrix M_sys/dt + A(q^k), cached by the
    /// parameter column so stationary fields share one factorization.
    pub fn step_factorization(&self, q_col: &DVector<f64>) -> Result<Arc<SparseChol>> {
        let key = {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            for v in q_col.iter() {
                h.write_u64(v.to_bits());
            }
            h.finish()
        };
        let bits: Vec<u64> = q_col.iter().map(|v| v.to_bits()).collect();
        {
            let cache = self.step_cache.lock().unwrap();
            if let Some(bucket) = cache.get(&key) {
                if let Some((_, f)) = bucket.iter().find(|(b, _)| *b == bits) {
                    return Ok(Arc::clone(f));
                }
            }
        }
        let a = self.affine.evaluate(q_col)?;
        let system = self.m_sys.scaled(1.0 / self.dt).add(&a);
        let fact = Arc::new(system.cholesky()?);
        let mut cache = self.step_cache.lock().unwrap();
        if cache.len() > 256 {
            cache.clear();
        }
        cache.entry(key).or_default().push((bits, Arc::clone(&fact)));
        Ok(fact)
    }

    fn march_forward(
        &self,
        q: &ParameterField,
        forcing: &mut dyn FnMut(usize) -> DVector<f64>,
        initial: Option<&DVector<f64>>,
    ) -> Result<DMatrix<f64>> {
        self.bump_solve_count();
        let n = self.mesh.n_nodes();
        let mut out = DMatrix::zeros(n, self.n_steps);
        let mut prev = initial.cloned().unwrap_or_else(|| DVector::zeros(n));
        let scale = 1.0 / self.dt;
        for k in 1..=self.n_steps {
            let fact = self.step_factorization(&q.column(k))?;
            let rhs = forcing(k) + self.m_sys.apply(&prev) * scale;
            let u = fact.solve_vec(&rhs);
            out.set_column(k - 1, &u);
            prev = u;
        }
        Ok(out)
    }

    fn march_backward(
        &self,
        q: &ParameterField,
        forcing: &mut dyn FnMut(usize) -> DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        self.bump_solve_count();
        let n = self.mesh.n_nodes();
        let mut out = DMatrix::zeros(n, self.n_steps);
        let mut next = DVector::zeros(n);
        let scale = 1.0 / self.dt;
        for k in (1..=self.n_steps).rev() {
            // A is symmetric, so the forward factorization solves A^T too.
            let fact = self.step_factorization(&q.column(k))?;
            let rhs = forcing(k) + self.m_sys.apply(&next) * scale;
            let p = fact.solve_vec(&rhs);
            out.set_column(k - 1, &p);
            next = p;
        }
        Ok(out)
    }

    /// Discrete state equation: (1/dt) M (u^k - u^{k-1}) + A(q^k) u^k = L^k.
    pub fn solve_primal(&self, q: &ParameterField) -> Result<StateTrajectory> {
        let source = self.source.clone();
        let coeffs = self.march_forward(q, &mut |k| source.column(k), None)?;
        Ok(StateTrajectory {
            coeffs,
            kind: TrajectoryKind::Primal,
        })
    }

    /// Forward solve with explicit initial value, used for energy estimates.
    pub(crate) fn solve_primal_from(
        &self,
        q: &ParameterField,
        initial: &DVector<f64>,
        zero_source: bool,
    ) -> Result<StateTrajectory> {
        let source = self.source.clone();
        let n = self.mesh.n_nodes();
        let coeffs = self.march_forward(
            q,
            &mut |k| {
                if zero_source {
                    DVector::zeros(n)
                } else {
                    source.column(k)
                }
            },
            Some(initial),
        )?;
        Ok(StateTrajectory {
            coeffs,
            kind: TrajectoryKind::Primal,
        })
    }

    /// Backward adjoint recursion with terminal condition p^{K+1} = 0.
    pub fn solve_adjoint(
        &self,
        q: &ParameterField,
        u: &StateTrajectory,
        data: &Observation,
    ) -> Result<StateTrajectory> {
        let coeffs = self.march_backward(q, &mut |k| {
            let diff = data.column(k) - u.column(k);
            self.constrain_vec(self.m_h.apply(&diff))
        })?;
        Ok(StateTrajectory {
            coeffs,
            kind: TrajectoryKind::Adjoint,
        })
    }

    /// Assembles the coupling operators B(u^k) for every time step.
    pub fn coupling_operators(&self, u: &StateTrajectory) -> Result<Vec<SparseOperator>> {
        (1..=self.n_steps)
            .map(|k| assemble_coupling(&self.mesh, self.kind, &u.column(k)))
            .collect()
    }

    /// Linearized state: (1/dt) M (w^k - w^{k-1}) + A(q^k) w^k = -B(u^k) d^k.
    pub fn solve_linearized_primal(
        &self,
        q: &ParameterField,
        u: &StateTrajectory,
        d: &ParameterField,
    ) -> Result<StateTrajectory> {
        let couplings = self.coupling_operators(u)?;
        self.solve_linearized_primal_with(q, &couplings, d)
    }

    /// Same as `solve_linearized_primal` with precomputed couplings.
    pub fn solve_linearized_primal_with(
        &self,
        q: &ParameterField,
        couplings: &[SparseOperator],
        d: &ParameterField,
    ) -> Result<StateTrajectory> {
        let coeffs = self.march_forward(q, &mut |k| -couplings[k - 1].apply(&d.column(k)), None)?;
        Ok(StateTrajectory {
            coeffs,
            kind: TrajectoryKind::LinearizedPrimal,
        })
    }

    /// Linearized adjoint with right-hand side C(y - u - w) per step.
    pub fn solve_linearized_adjoint(
        &self,
        q: &ParameterField,
        u: &StateTrajectory,
        w: &StateTrajectory,
        data: &Observation,
    ) -> Result<StateTrajectory> {
        let coeffs = self.march_backward(q, &mut |k| {
            let diff = data.column(k) - u.column(k) - w.column(k);
            self.constrain_vec(self.m_h.apply(&diff))
        })?;
        Ok(StateTrajectory {
            coeffs,
            kind: TrajectoryKind::LinearizedAdjoint,
        })
    }

    /// c1 constant of the quadratic objective expansion.
    pub fn objective_constant(&self, data: &Observation) -> f64 {
        let mut acc = 0.0;
        for k in 1..=self.n_steps {
            let y = data.column(k);
            acc += 0.5 * self.m_h.quadratic(&y, &y);
        }
        self.dt * acc
    }

    /// Discrete objective through the quadratic expansion.
    pub fn objective(&self, q: &ParameterField, data: &Observation) -> Result<f64> {
        let (j, _) = self.objective_with_state(q, data)?;
        Ok(j)
    }

    pub fn objective_with_state(
        &self,
        q: &ParameterField,
        data: &Observation,
    ) -> Result<(f64, StateTrajectory)> {
        let u = self.solve_primal(q)?;
        let j = self.objective_from_state(&u, data);
        if !j.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        Ok((j, u))
    }

    pub fn objective_from_state(&self, u: &StateTrajectory, data: &Observation) -> f64 {
        let mut acc = 0.0;
        for k in 1..=self.n_steps {
            let uk = u.column(k);
            let yk = data.column(k);
            acc += 0.5 * self.m_h.quadratic(&uk, &uk) - self.m_h.quadratic(&uk, &yk);
        }
        self.objective_constant(data) + self.dt * acc
    }

    /// Direct misfit formula (dt/2) sum ||u^k - y^k||^2; cross-check route.
    pub fn objective_direct(&self, q: &ParameterField, data: &Observation) -> Result<f64> {
        let u = self.solve_primal(q)?;
        let mut acc = 0.0;
        for k in 1..=self.n_steps {
            let diff = u.column(k) - data.column(k);
            acc += 0.5 * self.m_h.quadratic(&diff, &diff);
        }
        Ok(self.dt * acc)
    }

    /// Riesz gradient of the objective in (Q_h, M_Q).
    pub fn gradient(&self, q: &ParameterField, data: &Observation) -> Result<ParameterField> {
        let u = self.solve_primal(q)?;
        let p = self.solve_adjoint(q, &u, data)?;
        self.gradient_from_states(q, &u, &p)
    }

    /// Gradient from precomputed primal and adjoint states.
    pub fn gradient_from_states(
        &self,
        q: &ParameterField,
        u: &StateTrajectory,
        p: &StateTrajectory,
    ) -> Result<ParameterField> {
        let chol = self.mq_cholesky();
        let n = self.n_param_dofs();
        if q.is_stationary() {
            let mut acc = DVector::zeros(n);
            for k in 1..=self.n_steps {
                let b = assemble_coupling(&self.mesh, self.kind, &u.column(k))?;
                acc += b.transpose().apply(&p.column(k));
            }
            Ok(ParameterField::stationary(chol.solve_vec(&(acc * self.dt))))
        } else {
            let mut g = DMatrix::zeros(n, self.n_steps);
            for k in 1..=self.n_steps {
                let b = assemble_coupling(&self.mesh, self.kind, &u.column(k))?;
                g.set_column(k - 1, &chol.solve_vec(&b.transpose().apply(&p.column(k))));
            }
            Ok(ParameterField::transient(g))
        }
    }

    /// Componentwise clamp onto the admissible box.
    pub fn project_box(&self, q: &ParameterField) -> ParameterField {
        let mut out = q.clone();
        for v in out.coeffs.iter_mut() {
            *v = v.clamp(self.lower, self.upper);
        }
        out
    }

    /// Inner product on the parameter space: plain Q product for stationary
    /// fields, dt-weighted Bochner product for trajectories.
    pub fn param_inner(&self, a: &ParameterField, b: &ParameterField) -> f64 {
        assert_eq!(a.is_stationary(), b.is_stationary());
        if a.is_stationary() {
            self.m_q
                .quadratic(&a.coeffs.column(0).into_owned(), &b.coeffs.column(0).into_owned())
        } else {
            let mut acc = 0.0;
            for k in 1..=self.n_steps {
                acc += self.m_q.quadratic(&a.column(k), &b.column(k));
            }
            self.dt * acc
        }
    }

    pub fn param_norm(&self, a: &ParameterField) -> f64 {
        self.param_inner(a, a).max(0.0).sqrt()
    }

    /// dt-weighted V-norm of a trajectory given by columns.
    pub fn trajectory_v_norm(&self, m: &DMatrix<f64>) -> f64 {
        let mut acc = 0.0;
        for k in 0..m.ncols() {
            let c = m.column(k).into_owned();
            acc += self.m_v.quadratic(&c, &c);
        }
        (self.dt * acc).max(0.0).sqrt()
    }

    /// Synthetic data: observe the exact solution and add uniform noise
    /// scaled to the requested level in the V-weighted trajectory norm.
    pub fn make_noisy_data(
        &self,
        q_exact: &ParameterField,
        delta: f64,
        seed: u64,
    ) -> Result<Observation> {
        let u = self.solve_primal(q_exact)?;
        let clean = self.observe(&u);
        if delta == 0.0 {
            return Ok(clean);
        }
        let n = self.mesh.n_nodes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new_inclusive(-1.0, 1.0);
        for _attempt in 0..4 {
            let noise = DMatrix::from_fn(n, self.n_steps, |_, _| dist.sample(&mut rng));
            let norm = self.trajectory_v_norm(&noise);
            if norm > 0.0 {
                return Observation::new(clean.coeffs() + noise * (delta / norm));
            }
        }
        Err(Error::DegenerateNoise)
    }

    /// Coercivity constant of A(q): 1 for reaction forms, the essential
    /// infimum (nodal minimum across all steps) for diffusion forms.
    pub fn coercivity_constant(&self, q: &ParameterField) -> Result<f64> {
        let a = match self.kind {
            PdeKind::Reaction => 1.0,
            PdeKind::Diffusion => q.min_entry(),
        };
        if a <= 0.0 {
            return Err(Error::NonpositiveCoercivity(a));
        }
        Ok(a)
    }
}

/// Exact benchmark parameter fields.
///
/// Runs 1/3 are reaction fields built from two Gaussian bumps over the
/// background, runs 2/4 diffusion fields built from indicator sets; runs 3
/// and 4 modulate the bumps with sin(pi t).
pub fn exact_parameter(run_id: u32, mesh: &Mesh, n_steps: usize) -> Result<ParameterField> {
    let bumps = |x: f64, y: f64| -> f64 {
        let g = |sx: f64, sy: f64| {
            let ex = (sx - 0.5) / 0.1;
            let ey = (sy - 0.5) / 0.1;
            (1.0 / (0.02 * std::f64::consts::PI)) * (-0.5 * (ex * ex + ey * ey)).exp()
        };
        g(2.0 * x, 2.0 * y) + g(0.8 * x, 0.8 * y)
    };
    let indicator = |x: f64, y: f64| -> f64 {
        let in_omega1 = {
            let band_left = (5.0 / 30.0..=9.0 / 30.0).contains(&x)
                && (3.0 / 30.0..=27.0 / 30.0).contains(&y);
            let band_bottom = (9.0 / 30.0..=27.0 / 30.0).contains(&x)
                && (3.0 / 30.0..=7.0 / 30.0).contains(&y);
            let band_top = (9.0 / 30.0..=27.0 / 30.0).contains(&x)
                && (23.0 / 30.0..=27.0 / 30.0).contains(&y);
            band_left || band_bottom || band_top
        };
        let in_omega2 = {
            let dx = x - 18.0 / 30.0;
            let dy = y - 15.0 / 30.0;
            (dx * dx + dy * dy).sqrt() < 4.0 / 30.0
        };
        (if in_omega1 { 2.0 } else { 0.0 }) - (if in_omega2 { 2.0 } else { 0.0 })
    };
    match run_id {
        1 => Ok(ParameterField::stationary(
            mesh.interpolate(|x, y| BACKGROUND_VALUE + bumps(x, y)),
        )),
        2 => Ok(ParameterField::stationary(
            mesh.interpolate(|x, y| BACKGROUND_VALUE + indicator(x, y)),
        )),
        3 | 4 => {
            let dt = 1.0 / n_steps as f64;
            let n = mesh.n_nodes();
            let mut m = DMatrix::zeros(n, n_steps);
            for k in 1..=n_steps {
                let t = k as f64 * dt;
                let s = (std::f64::consts::PI * t).sin();
                let col = if run_id == 3 {
                    mesh.interpolate(|x, y| BACKGROUND_VALUE + s * bumps(x, y))
                } else {
                    mesh.interpolate(|x, y| BACKGROUND_VALUE + s * indicator(x, y))
                };
                m.set_column(k - 1, &col);
            }
            Ok(ParameterField::transient(m))
        }
        other => Err(Error::UnknownRun(other)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn problem(kind: PdeKind, nc: usize, steps: usize) -> FomProblem {
        FomProblem::new(
            Mesh::build(nc).unwrap(),
            kind,
            ParamSpace::L2,
            steps,
            (DEFAULT_LOWER_BOUND, DEFAULT_UPPER_BOUND),
        )
        .unwrap()
    }

    fn random_field(p: &FomProblem, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> ParameterField {
        ParameterField::stationary(DVector::from_fn(p.n_param_dofs(), |_, _| {
            rng.gen_range(lo..hi)
        }))
    }

    /// Dense per-step LU oracle for the forward recursion.
    fn dense_forward_oracle(
        p: &FomProblem,
        q: &ParameterField,
        forcing: impl Fn(usize) -> DVector<f64>,
    ) -> DMatrix<f64> {
        let n = p.n_state_dofs();
        let mut out = DMatrix::zeros(n, p.n_steps());
        let mut prev = DVector::zeros(n);
        for k in 1..=p.n_steps() {
            let a = p.affine().evaluate(&q.column(k)).unwrap().to_dense();
            let sys = p.mass_constrained().to_dense() / p.dt() + a;
            let rhs = forcing(k) + p.mass_constrained().to_dense() * &prev / p.dt();
            let sol = sys.lu().solve(&rhs).unwrap();
            out.set_column(k - 1, &sol);
            prev = sol;
        }
        out
    }

    #[test]
    fn zero_source_gives_zero_state() {
        let p = FomProblem::with_source(
            Mesh::build(3).unwrap(),
            PdeKind::Reaction,
            ParamSpace::L2,
            4,
            (1e-3, 1e3),
            SourceSpec::ConstantField(DVector::zeros(16)),
        )
        .unwrap();
        let q = ParameterField::constant(16, 3.0);
        let u = p.solve_primal(&q).unwrap();
        assert!(u.coeffs().abs().max() < 1e-15);
    }

    #[test]
    fn primal_matches_dense_oracle() {
        let p = problem(PdeKind::Reaction, 3, 4);
        let q = ParameterField::constant(p.n_param_dofs(), 3.0);
        let u = p.solve_primal(&q).unwrap();
        let source = {
            let ones = DVector::from_element(p.n_state_dofs(), 1.0);
            let mut v = p.mass().apply(&ones);
            for i in 0..p.n_state_dofs() {
                if p.mesh().is_boundary(i) {
                    v[i] = 0.0;
                }
            }
            v
        };
        let oracle = dense_forward_oracle(&p, &q, |_| source.clone());
        assert!((u.coeffs() - oracle).abs().max() < 1e-11);
    }

    #[test]
    fn primal_monotone_toward_steady_state() {
        let p = problem(PdeKind::Reaction, 4, 30);
        let q = ParameterField::constant(p.n_param_dofs(), 3.0);
        let u = p.solve_primal(&q).unwrap();
        let mh = p.mass();
        let mut last = 0.0;
        for k in 1..=p.n_steps() {
            let c = u.column(k);
            let norm = mh.quadratic(&c, &c).sqrt();
            assert!(norm >= last - 1e-14, "step {k}: {norm} < {last}");
            last = norm;
        }
        // steady state A(q) u = L
        let a = p.affine().evaluate(&q.column(1)).unwrap();
        let ones = DVector::from_element(p.n_state_dofs(), 1.0);
        let mut rhs = p.mass().apply(&ones);
        for i in 0..p.n_state_dofs() {
            if p.mesh().is_boundary(i) {
                rhs[i] = 0.0;
            }
        }
        let steady = a.cholesky().unwrap().solve_vec(&rhs);
        let u_last = u.column(p.n_steps());
        let rel = (&u_last - &steady).norm() / steady.norm();
        assert!(rel < 0.05, "relative distance to steady state {rel}");
    }

    #[test]
    fn adjoint_zero_for_exact_fit() {
        let p = problem(PdeKind::Reaction, 3, 4);
        let q = ParameterField::constant(p.n_param_dofs(), 3.0);
        let u = p.solve_primal(&q).unwrap();
        let data = p.observe(&u);
        let padj = p.solve_adjoint(&q, &u, &data).unwrap();
        assert!(padj.coeffs().abs().max() < 1e-14);
    }

    #[test]
    fn adjoint_matches_dense_oracle() {
        let p = problem(PdeKind::Diffusion, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_field(&p, &mut rng, 1.0, 4.0);
        let u = p.solve_primal(&q).unwrap();
        let data = Observation::new(DMatrix::from_fn(p.n_state_dofs(), p.n_steps(), |_, _| {
            rng.gen_range(-1.0..1.0)
        }))
        .unwrap();
        let padj = p.solve_adjoint(&q, &u, &data).unwrap();

        // dense backward recursion
        let n = p.n_state_dofs();
        let mut next = DVector::zeros(n);
        let mut oracle = DMatrix::zeros(n, p.n_steps());
        for k in (1..=p.n_steps()).rev() {
            let a = p.affine().evaluate(&q.column(k)).unwrap().to_dense();
            let sys = p.mass_constrained().to_dense() / p.dt() + a.transpose();
            let mut f = p.mass().apply(&(data.column(k) - u.column(k)));
            for i in 0..n {
                if p.mesh().is_boundary(i) {
                    f[i] = 0.0;
                }
            }
            let rhs = f + p.mass_constrained().to_dense() * &next / p.dt();
            let sol = sys.lu().solve(&rhs).unwrap();
            oracle.set_column(k - 1, &sol);
            next = sol;
        }
        assert!((padj.coeffs() - oracle).abs().max() < 1e-11);
    }

    #[test]
    fn adjoint_identity_holds() {
        // sum_k <forcing^k, w^k> = -sum_k <B(u^k) d^k, p^k>
        let p = problem(PdeKind::Reaction, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_field(&p, &mut rng, 1.0, 4.0);
        let u = p.solve_primal(&q).unwrap();
        let data = Observation::new(DMatrix::from_fn(p.n_state_dofs(), p.n_steps(), |_, _| {
            rng.gen_range(-0.5..0.5)
        }))
        .unwrap();
        let padj = p.solve_adjoint(&q, &u, &data).unwrap();
        let d = random_field(&p, &mut rng, -1.0, 1.0);
        let w = p.solve_linearized_primal(&q, &u, &d).unwrap();

        let mut lhs = 0.0;
        let mut rhs = 0.0;
        let couplings = p.coupling_operators(&u).unwrap();
        for k in 1..=p.n_steps() {
            let mut f = p.mass().apply(&(data.column(k) - u.column(k)));
            for i in 0..p.n_state_dofs() {
                if p.mesh().is_boundary(i) {
                    f[i] = 0.0;
                }
            }
            lhs += f.dot(&w.column(k));
            rhs += couplings[k - 1].apply(&d.column(k)).dot(&padj.column(k));
        }
        let scale = lhs.abs().max(rhs.abs()).max(1e-30);
        assert!((lhs + rhs).abs() / scale < 1e-10, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn linearized_primal_zero_direction() {
        let p = problem(PdeKind::Reaction, 3, 4);
        let q = ParameterField::constant(p.n_param_dofs(), 3.0);
        let u = p.solve_primal(&q).unwrap();
        let d = ParameterField::constant(p.n_param_dofs(), 0.0);
        let w = p.solve_linearized_primal(&q, &u, &d).unwrap();
        assert!(w.coeffs().abs().max() < 1e-15);
    }

    #[test]
    fn linearized_primal_taylor_consistency() {
        let p = problem(PdeKind::Reaction, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_field(&p, &mut rng, 2.0, 4.0);
        let d = random_field(&p, &mut rng, -1.0, 1.0);
        let u = p.solve_primal(&q).unwrap();
        let w = p.solve_linearized_primal(&q, &u, &d).unwrap();
        let mut errs = Vec::new();
        for eps in [1e-2, 1e-3, 1e-4] {
            let mut shifted = q.clone();
            *shifted.coeffs_mut() += d.coeffs() * eps;
            let u_eps = p.solve_primal(&shifted).unwrap();
            let resid = u_eps.coeffs() - u.coeffs() - w.coeffs() * eps;
            errs.push((resid.abs().max(), eps));
        }
        for ((e, eps), (e_next, eps_next)) in errs.iter().zip(errs.iter().skip(1)) {
            let rate = (e / e_next).log10() / (eps / eps_next).log10();
            assert!(rate > 1.7, "O(eps^2) remainder expected, rate {rate}");
        }
    }

    #[test]
    fn linearized_adjoint_zero_for_exact_fit() {
        let p = problem(PdeKind::Reaction, 3, 4);
        let q = ParameterField::constant(p.n_param_dofs(), 3.0);
        let u = p.solve_primal(&q).unwrap();
        let data = p.observe(&u);
        let w = StateTrajectory {
            coeffs: DMatrix::zeros(p.n_state_dofs(), p.n_steps()),
            kind: TrajectoryKind::LinearizedPrimal,
        };
        let pt = p.solve_linearized_adjoint(&q, &u, &w, &data).unwrap();
        assert!(pt.coeffs().abs().max() < 1e-14);
    }

    #[test]
    fn objective_expansion_matches_direct() {
        let p = problem(PdeKind::Diffusion, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_field(&p, &mut rng, 1.0, 4.0);
        let data = Observation::new(DMatrix::from_fn(p.n_state_dofs(), p.n_steps(), |_, _| {
            rng.gen_range(-0.4..0.4)
        }))
        .unwrap();
        let j1 = p.objective(&q, &data).unwrap();
        let j2 = p.objective_direct(&q, &data).unwrap();
        assert!((j1 - j2).abs() <= 1e-12 * j2.abs().max(1.0));
    }

    #[test]
    fn objective_zero_at_exact_fit_and_quadratic() {
        let p = problem(PdeKind::Reaction, 3, 4);
        let q = ParameterField::constant(p.n_param_dofs(), 3.0);
        let data = p.make_noisy_data(&q, 0.0, 0).unwrap();
        assert!(p.objective(&q, &data).unwrap() <= 1e-20);

        // doubling the misfit vector quadruples J: compare u against data
        // and against data shifted twice as far.
        let u = p.solve_primal(&q).unwrap();
        let shift = DMatrix::from_element(p.n_state_dofs(), p.n_steps(), 0.01);
        let d1 = Observation::new(u.coeffs() + &shift).unwrap();
        let d2 = Observation::new(u.coeffs() + &shift * 2.0).unwrap();
        let j1 = p.objective_from_state(&u, &d1);
        let j2 = p.objective_from_state(&u, &d2);
        assert!((j2 - 4.0 * j1).abs() < 1e-12 * j2.abs());
    }

    #[test]
    fn gradient_zero_at_exact_fit() {
        let p = problem(PdeKind::Reaction, 3, 4);
        let q = ParameterField::constant(p.n_param_dofs(), 3.0);
        let data = p.make_noisy_data(&q, 0.0, 0).unwrap();
        let g = p.gradient(&q, &data).unwrap();
        assert!(p.param_norm(&g) <= 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for kind in [PdeKind::Reaction, PdeKind::Diffusion] {
            for stationary in [true, false] {
                let p = problem(kind, 4, 5);
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let (q, e) = if stationary {
                    (
                        random_field(&p, &mut rng, 2.0, 4.0),
                        random_field(&p, &mut rng, -1.0, 1.0),
                    )
                } else {
                    let f = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
                        ParameterField::transient(DMatrix::from_fn(
                            p.n_param_dofs(),
                            p.n_steps(),
                            |_, _| rng.gen_range(lo..hi),
                        ))
                    };
                    (f(&mut rng, 2.0, 4.0), f(&mut rng, -1.0, 1.0))
                };
                let data =
                    Observation::new(DMatrix::from_fn(p.n_state_dofs(), p.n_steps(), |_, _| {
                        rng.gen_range(-0.3..0.3)
                    }))
                    .unwrap();
                let g = p.gradient(&q, &data).unwrap();
                let dir = p.param_inner(&g, &e);
                let eps = 1e-5;
                let mut qp = q.clone();
                *qp.coeffs_mut() += e.coeffs() * eps;
                let mut qm = q.clone();
                *qm.coeffs_mut() -= e.coeffs() * eps;
                let fd = (p.objective(&qp, &data).unwrap() - p.objective(&qm, &data).unwrap())
                    / (2.0 * eps);
                let rel = (dir - fd).abs() / fd.abs().max(1e-12);
                assert!(rel <= 1e-4, "kind {kind:?} stationary {stationary}: rel {rel}");
            }
        }
    }

    #[test]
    fn stationary_and_broadcast_paths_agree() {
        let p = problem(PdeKind::Reaction, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q_s = random_field(&p, &mut rng, 1.5, 4.0);
        let q_t = q_s.broadcast(p.n_steps());
        let data = Observation::new(DMatrix::from_fn(p.n_state_dofs(), p.n_steps(), |_, _| {
            rng.gen_range(-0.3..0.3)
        }))
        .unwrap();
        let u_s = p.solve_primal(&q_s).unwrap();
        let u_t = p.solve_primal(&q_t).unwrap();
        assert!((u_s.coeffs() - u_t.coeffs()).abs().max() < 1e-12);
        let j_s = p.objective(&q_s, &data).unwrap();
        let j_t = p.objective(&q_t, &data).unwrap();
        assert!((j_s - j_t).abs() < 1e-12 * j_s.abs().max(1.0));
        let g_s = p.gradient(&q_s, &data).unwrap();
        let g_t = p.gradient(&q_t, &data).unwrap();
        let mut summed = DVector::zeros(p.n_param_dofs());
        for k in 1..=p.n_steps() {
            summed += g_t.column(k) * p.dt();
        }
        assert!((summed - g_s.coeffs().column(0)).abs().max() < 1e-12);
    }

    #[test]
    fn source_superposition() {
        let mesh = Mesh::build(3).unwrap();
        let n = mesh.n_nodes();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let f1 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let f2 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let build = |f: DVector<f64>| {
            FomProblem::with_source(
                mesh.clone(),
                PdeKind::Reaction,
                ParamSpace::L2,
                4,
                (1e-3, 1e3),
                SourceSpec::ConstantField(f),
            )
            .unwrap()
        };
        let q = ParameterField::constant(n, 3.0);
        let u1 = build(f1.clone()).solve_primal(&q).unwrap();
        let u2 = build(f2.clone()).solve_primal(&q).unwrap();
        let u12 = build(f1 + f2).solve_primal(&q).unwrap();
        assert!((u12.coeffs() - u1.coeffs() - u2.coeffs()).abs().max() < 1e-12);
    }

    #[test]
    fn implicit_euler_energy_decay() {
        let p = problem(PdeKind::Reaction, 4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let q = random_field(&p, &mut rng, 1.0, 5.0);
        let mut u0 = DVector::from_fn(p.n_state_dofs(), |_, _| rng.gen_range(-1.0..1.0));
        for i in 0..p.n_state_dofs() {
            if p.mesh().is_boundary(i) {
                u0[i] = 0.0;
            }
        }
        let u = p.solve_primal_from(&q, &u0, true).unwrap();
        let mh = p.mass();
        let mut last = mh.quadratic(&u0, &u0).sqrt();
        for k in 1..=p.n_steps() {
            let c = u.column(k);
            let norm = mh.quadratic(&c, &c).sqrt();
            assert!(norm <= last + 1e-14);
            last = norm;
        }
    }

    #[test]
    fn project_box_clamps() {
        let p = problem(PdeKind::Reaction, 3, 4);
        let inside = ParameterField::constant(p.n_param_dofs(), 2.0);
        assert_eq!(p.project_box(&inside).coeffs(), inside.coeffs());
        let mut wild = inside.clone();
        wild.coeffs_mut()[(0, 0)] = -5.0;
        wild.coeffs_mut()[(1, 0)] = 1e6;
        let proj = p.project_box(&wild);
        assert_eq!(proj.coeffs()[(0, 0)], 1e-3);
        assert_eq!(proj.coeffs()[(1, 0)], 1e3);
        // idempotent
        assert_eq!(p.project_box(&proj).coeffs(), proj.coeffs());
    }

    #[test]
    fn noisy_data_hits_requested_level() {
        let p = problem(PdeKind::Reaction, 4, 6);
        let q = exact_parameter(1, p.mesh(), p.n_steps()).unwrap();
        let delta = 1e-5;
        let data = p.make_noisy_data(&q, delta, 7).unwrap();
        let clean = p.observe(&p.solve_primal(&q).unwrap());
        let norm = p.trajectory_v_norm(&(data.coeffs() - clean.coeffs()));
        assert!((norm - delta).abs() <= 1e-12 * delta);
        // determinism
        let again = p.make_noisy_data(&q, delta, 7).unwrap();
        assert_eq!(data.coeffs(), again.coeffs());
        // zero noise
        let exact = p.make_noisy_data(&q, 0.0, 7).unwrap();
        assert_eq!(exact.coeffs(), clean.coeffs());
    }

    #[test]
    fn exact_parameters_match_formulas() {
        let mesh4 = Mesh::build(4).unwrap();
        // Run 1 at x = (0.25, 0.25): first Gaussian peaks (2x-0.5 = 0)
        let q1 = exact_parameter(1, &mesh4, 1).unwrap();
        let idx = mesh4.nodes_per_side() + 1; // node (0.25, 0.25)
        let peak1 = 1.0 / (0.02 * std::f64::consts::PI);
        let g2 = {
            // second Gaussian at (0.25, 0.25): (0.8*0.25 - 0.5)/0.1 = -3
            let e: f64 = -0.5 * (9.0 + 9.0);
            peak1 * e.exp()
        };
        assert!((q1.coeffs()[(idx, 0)] - (3.0 + peak1 + g2)).abs() < 1e-12);

        // Run 2 at x = (0.6, 0.5), inside the ball: 3 - 2 = 1
        let mesh30 = Mesh::build(30).unwrap();
        let q2 = exact_parameter(2, &mesh30, 1).unwrap();
        let idx2 = {
            let nps = mesh30.nodes_per_side();
            15 * nps + 18
        };
        assert_eq!(q2.coeffs()[(idx2, 0)], 1.0);

        // Run 3 endpoints: final column is the plain background
        let q3 = exact_parameter(3, &mesh30, 10).unwrap();
        let last = q3.coeffs().column(9);
        assert!(last.iter().all(|&v| (v - 3.0).abs() < 1e-12));

        assert!(exact_parameter(5, &mesh30, 1).is_err());
    }

    #[test]
    fn coercivity_rules() {
        let pr = problem(PdeKind::Reaction, 3, 4);
        let q = ParameterField::constant(pr.n_param_dofs(), 42.0);
        assert_eq!(pr.coercivity_constant(&q).unwrap(), 1.0);

        let pd = problem(PdeKind::Diffusion, 3, 4);
        let q3 = ParameterField::constant(pd.n_param_dofs(), 3.0);
        assert_eq!(pd.coercivity_constant(&q3).unwrap(), 3.0);
        let mesh30 = Mesh::build(30).unwrap();
        let pd30 = FomProblem::new(mesh30, PdeKind::Diffusion, ParamSpace::H1, 4, (1e-3, 1e3))
            .unwrap();
        let q_run2 = exact_parameter(2, pd30.mesh(), 4).unwrap();
        assert_eq!(pd30.coercivity_constant(&q_run2).unwrap(), 1.0);

        let bad = ParameterField::constant(pd.n_param_dofs(), -1.0);
        assert!(pd.coercivity_constant(&bad).is_err());
    }

    #[test]
    fn solve_counter_counts_marches() {
        let p = problem(PdeKind::Reaction, 3, 4);
        let q = ParameterField::constant(p.n_param_dofs(), 3.0);
        let before = p.fom_solve_count();
        let u = p.solve_primal(&q).unwrap();
        let data = p.observe(&u);
        let _ = p.solve_adjoint(&q, &u, &data).unwrap();
        assert_eq!(p.fom_solve_count(), before + 2);
    }
}
