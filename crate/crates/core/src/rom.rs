//! Combined parameter and state reduced-basis model: projected operators,
//! reduced primal/adjoint/linearized solves, reduced objective and gradient,
//! lift/restrict maps, the cheap feasibility certificate, and the reduced
//! Tikhonov subproblem.

use std::collections::HashMap;
use std::hash::Hasher;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fom::{FomProblem, Observation, ParameterField};
use crate::reduction::orthonormality_defect;
use crate::subproblem::LinearizedModel;

/// M-orthonormal basis matrix (full dimension x n).
pub struct ReducedBasis {
    mat: DMatrix<f64>,
}

impl ReducedBasis {
    /// Wraps a basis after validating M-orthonormality (rejected beyond
    /// 1e-8 max deviation).
    pub fn new(mat: DMatrix<f64>, m: &crate::fem::SparseOperator) -> Result<Self> {
        let defect = orthonormality_defect(&mat, m);
        if defect > 1e-8 {
            return Err(Error::BasisNotOrthonormal(defect));
        }
        Ok(Self { mat })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn n_modes(&self) -> usize {
        self.mat.ncols()
    }

    pub fn lift(&self, coords: &DVector<f64>) -> DVector<f64> {
        &self.mat * coords
    }

    pub fn lift_mat(&self, coords: &DMatrix<f64>) -> DMatrix<f64> {
        &self.mat * coords
    }
}

struct DenseLu {
    lu: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DenseLu {
    fn solve(&self, rhs: &DVector<f64>, step: usize) -> Result<DVector<f64>> {
        self.lu
            .solve(rhs)
            .ok_or(Error::SingularReducedSystem { step })
    }
}

/// Reduced-order model obtained by Galerkin projection onto the given
/// parameter and state bases. Immutable between enrichments; the
/// factorization cache is keyed by reduced parameter columns.
pub struct RomModel<'a> {
    problem: &'a FomProblem,
    basis_q: ReducedBasis,
    basis_v: ReducedBasis,
    /// Euclidean row norms of the parameter basis (feasibility slack).
    q_row_norms: DVector<f64>,
    a0_r: DMatrix<f64>,
    a_comp_r: Vec<DMatrix<f64>>,
    m_h_r: DMatrix<f64>,
    /// Objective Gram and data term (full observation products).
    c_r: DMatrix<f64>,
    cy_r: DMatrix<f64>,
    /// Adjoint right-hand-side Gram and data term (boundary rows zeroed).
    d_r: DMatrix<f64>,
    dy_r: DMatrix<f64>,
    l_r: DMatrix<f64>,
    c1: f64,
    q_center_r: DVector<f64>,
    lu_cache: Mutex<HashMap<u64, Vec<(Vec<u64>, Arc<DenseLu>)>>>,
}

impl<'a> RomModel<'a> {
    /// Projects all full-order objects onto the bases. Offline cost scales
    /// with the number of parameter modes times the sparse operator size.
    pub fn project(
        problem: &'a FomProblem,
        basis_q: DMatrix<f64>,
        basis_v: DMatrix<f64>,
        data: &Observation,
        q_center: &ParameterField,
    ) -> Result<Self> {
        let basis_q = ReducedBasis::new(basis_q, problem.q_product())?;
        let basis_v = ReducedBasis::new(basis_v, problem.v_product())?;
        let psi_v = basis_v.matrix();
        let psi_q = basis_q.matrix();
        let n_steps = problem.n_steps();
        let mesh = problem.mesh();

        let symmetrize = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;

        let a0_r = symmetrize(psi_v.transpose() * problem.affine().constant_part().apply_mat(psi_v));
        let mut a_comp_r = Vec::with_capacity(psi_q.ncols());
        for j in 0..psi_q.ncols() {
            let coeff = DVector::from_column_slice(psi_q.column(j).as_slice());
            let weighted = problem.affine().weighted_part(&coeff)?;
            a_comp_r.push(symmetrize(psi_v.transpose() * weighted.apply_mat(psi_v)));
        }
        let m_h_r = symmetrize(psi_v.transpose() * problem.mass_constrained().apply_mat(psi_v));
        let c_r = symmetrize(psi_v.transpose() * problem.obs_gram().apply_mat(psi_v));

        // row-constrained observation Gram for adjoint right-hand sides
        let mut mh_rows = problem.obs_gram().apply_mat(psi_v);
        for i in 0..mesh.n_nodes() {
            if mesh.is_boundary(i) {
                mh_rows.row_mut(i).fill(0.0);
            }
        }
        let d_r = psi_v.transpose() * mh_rows;

        let mut cy_r = DMatrix::zeros(psi_v.ncols(), n_steps);
        let mut dy_r = DMatrix::zeros(psi_v.ncols(), n_steps);
        let mut l_r = DMatrix::zeros(psi_v.ncols(), n_steps);
        for k in 1..=n_steps {
            let y = data.column(k);
            let my = problem.obs_gram().apply(&y);
            cy_r.set_column(k - 1, &(psi_v.transpose() * &my));
            let mut my_c = my;
            for i in 0..mesh.n_nodes() {
                if mesh.is_boundary(i) {
                    my_c[i] = 0.0;
                }
            }
            dy_r.set_column(k - 1, &(psi_v.transpose() * &my_c));
        }
        {
            // reuse the primal source columns through a probe solve-free path
            let src = problem.source_columns();
            for k in 1..=n_steps {
                l_r.set_column(k - 1, &(psi_v.transpose() * &src.column(k - 1).into_owned()));
            }
        }
        let c1 = problem.objective_constant(data);
        let q_center_col = q_center.coeffs().column(0).into_owned();
        let q_center_r = psi_q.transpose() * problem.q_product().apply(&q_center_col);
        let q_row_norms = DVector::from_fn(psi_q.nrows(), |i, _| psi_q.row(i).norm());

        Ok(Self {
            problem,
            basis_q,
            basis_v,
            q_row_norms,
            a0_r,
            a_comp_r,
            m_h_r,
            c_r,
            cy_r,
            d_r,
            dy_r,
            l_r,
            c1,
            q_center_r,
            lu_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn problem(&self) -> &FomProblem {
        self.problem
    }

    pub fn n_q(&self) -> usize {
        self.basis_q.n_modes()
    }

    pub fn n_v(&self) -> usize {
        self.basis_v.n_modes()
    }

    pub fn basis_q(&self) -> &ReducedBasis {
        &self.basis_q
    }

    pub fn basis_v(&self) -> &ReducedBasis {
        &self.basis_v
    }

    pub fn q_center_coords(&self) -> &DVector<f64> {
        &self.q_center_r
    }

    /// Assembled reduced operator A_r(q_r) = A_r(0) + sum_j q_j A_r(psi_j).
    pub fn a_r(&self, q_col: &DVector<f64>) -> DMatrix<f64> {
        let mut a = self.a0_r.clone();
        for (j, comp) in self.a_comp_r.iter().enumerate() {
            if q_col[j] != 0.0 {
                a += comp * q_col[j];
            }
        }
        a
    }

    fn step_lu(&self, q_col: &DVector<f64>, step: usize) -> Result<Arc<DenseLu>> {
        let bits: Vec<u64> = q_col.iter().map(|v| v.to_bits()).collect();
        let key = {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            for b in &bits {
                h.write_u64(*b);
            }
            h.finish()
        };
        {
            let cache = self.lu_cache.lock().unwrap();
            if let Some(bucket) = cache.get(&key) {
                if let Some((_, lu)) = bucket.iter().find(|(b, _)| *b == bits) {
                    return Ok(Arc::clone(lu));
                }
            }
        }
        let sys = &self.m_h_r / self.problem.dt() + self.a_r(q_col);
        let lu = nalgebra::linalg::LU::new(sys);
        // LU::new never fails; singularities surface at solve time
        let entry = Arc::new(DenseLu { lu });
        let _ = step;
        let mut cache = self.lu_cache.lock().unwrap();
        if cache.len() > 128 {
            cache.clear();
        }
        cache.entry(key).or_default().push((bits, Arc::clone(&entry)));
        Ok(entry)
    }

    fn forward(
        &self,
        q_r: &ParameterField,
        mut rhs: impl FnMut(usize, &DVector<f64>) -> DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let n = self.n_v();
        let k_max = self.problem.n_steps();
        let mut out = DMatrix::zeros(n, k_max);
        let mut prev = DVector::zeros(n);
        for k in 1..=k_max {
            let lu = self.step_lu(&q_r.column(k), k)?;
            let b = rhs(k, &prev) + (&self.m_h_r * &prev) / self.problem.dt();
            let u = lu.solve(&b, k)?;
            out.set_column(k - 1, &u);
            prev = u;
        }
        Ok(out)
    }

    fn backward(
        &self,
        q_r: &ParameterField,
        mut rhs: impl FnMut(usize) -> DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let n = self.n_v();
        let k_max = self.problem.n_steps();
        let mut out = DMatrix::zeros(n, k_max);
        let mut next = DVector::zeros(n);
        for k in (1..=k_max).rev() {
            // reduced operators are symmetrized, so the transpose system
            // shares the factorization
            let lu = self.step_lu(&q_r.column(k), k)?;
            let b = rhs(k) + (&self.m_h_r * &next) / self.problem.dt();
            let p = lu.solve(&b, k)?;
            out.set_column(k - 1, &p);
            next = p;
        }
        Ok(out)
    }

    /// Reduced primal trajectory (n_V x K).
    pub fn solve_primal_r(&self, q_r: &ParameterField) -> Result<DMatrix<f64>> {
        self.forward(q_r, |k, _| self.l_r.column(k - 1).into_owned())
    }

    /// Reduced adjoint trajectory.
    pub fn solve_adjoint_r(&self, q_r: &ParameterField, u_r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.backward(q_r, |k| {
            self.dy_r.column(k - 1).into_owned() - &self.d_r * u_r.column(k - 1).into_owned()
        })
    }

    /// Reduced coupling B_r(u_r^k): column j equals A_r(psi_j) u_r^k.
    pub fn coupling_r(&self, u_col: &DVector<f64>) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n_v(), self.n_q());
        for (j, comp) in self.a_comp_r.iter().enumerate() {
            b.set_column(j, &(comp * u_col));
        }
        b
    }

    /// Reduced linearized state for shift d_r given precomputed couplings.
    pub fn solve_linearized_primal_r(
        &self,
        q_r: &ParameterField,
        couplings: &[DMatrix<f64>],
        d_r: &ParameterField,
    ) -> Result<DMatrix<f64>> {
        self.forward(q_r, |k, _| -(&couplings[k - 1] * d_r.column(k)))
    }

    /// Reduced linearized adjoint for linearized state w_r.
    pub fn solve_linearized_adjoint_r(
        &self,
        q_r: &ParameterField,
        u_r: &DMatrix<f64>,
        w_r: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        self.backward(q_r, |k| {
            self.dy_r.column(k - 1).into_owned()
                - &self.d_r * (u_r.column(k - 1) + w_r.column(k - 1))
        })
    }

    pub fn objective_r_from_state(&self, u_r: &DMatrix<f64>) -> f64 {
        let mut acc = 0.0;
        for k in 0..u_r.ncols() {
            let u = u_r.column(k);
            acc += 0.5 * (&self.c_r * u).dot(&u) - self.cy_r.column(k).dot(&u);
        }
        self.c1 + self.problem.dt() * acc
    }

    /// Reduced objective; requires no full-order computations.
    pub fn objective_r(&self, q_r: &ParameterField) -> Result<f64> {
        Ok(self.objective_r_from_state(&self.solve_primal_r(q_r)?))
    }

    /// Reduced gradient in reduced coordinates (identity Gram).
    pub fn gradient_r(&self, q_r: &ParameterField) -> Result<ParameterField> {
        let u_r = self.solve_primal_r(q_r)?;
        let p_r = self.solve_adjoint_r(q_r, &u_r)?;
        Ok(self.gradient_r_from_states(q_r, &u_r, &p_r))
    }

    pub fn gradient_r_from_states(
        &self,
        q_r: &ParameterField,
        u_r: &DMatrix<f64>,
        p_r: &DMatrix<f64>,
    ) -> ParameterField {
        let k_max = self.problem.n_steps();
        if q_r.is_stationary() {
            let mut acc = DVector::zeros(self.n_q());
            for k in 1..=k_max {
                let b = self.coupling_r(&u_r.column(k - 1).into_owned());
                acc += b.transpose() * p_r.column(k - 1);
            }
            ParameterField::stationary(acc * self.problem.dt())
        } else {
            let mut g = DMatrix::zeros(self.n_q(), k_max);
            for k in 1..=k_max {
                let b = self.coupling_r(&u_r.column(k - 1).into_owned());
                g.set_column(k - 1, &(b.transpose() * p_r.column(k - 1)));
            }
            ParameterField::transient(g)
        }
    }

    /// Lifts reduced parameter coordinates to the full space.
    pub fn lift_param(&self, q_r: &ParameterField) -> ParameterField {
        let lifted = self.basis_q.lift_mat(q_r.coeffs());
        if q_r.is_stationary() {
            ParameterField::stationary(DVector::from_column_slice(lifted.column(0).as_slice()))
        } else {
            ParameterField::transient(lifted)
        }
    }

    /// Restriction (M_Q-orthogonal projection coefficients) of a full field.
    pub fn restrict_param(&self, q: &ParameterField) -> ParameterField {
        let weighted = self.problem.q_product().apply_mat(q.coeffs());
        let coords = self.basis_q.matrix().transpose() * weighted;
        if q.is_stationary() {
            ParameterField::stationary(DVector::from_column_slice(coords.column(0).as_slice()))
        } else {
            ParameterField::transient(coords)
        }
    }

    pub fn lift_state(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.basis_v.lift_mat(m)
    }

    /// Per-step feasibility slacks eps^k of the lifted parameter: within a
    /// Euclidean coordinate ball of this radius every shift stays in the
    /// box.
    pub fn feasibility_slack(&self, q_r: &ParameterField) -> Vec<f64> {
        let (lo, hi) = self.problem.bounds();
        let lifted = self.lift_param(q_r);
        let cols = lifted.coeffs().ncols();
        let mut slack = Vec::with_capacity(cols);
        for k in 0..cols {
            let col = lifted.coeffs().column(k);
            let mut eps = f64::INFINITY;
            for i in 0..col.len() {
                let rn = self.q_row_norms[i];
                if rn > 0.0 {
                    eps = eps.min((hi - col[i]) / rn).min((col[i] - lo) / rn);
                }
            }
            slack.push(eps.max(0.0));
        }
        slack
    }

    /// Sound sufficient feasibility test: certified only when every shift
    /// column fits inside its slack ball.
    pub fn cheap_feasibility(&self, slack: &[f64], d_r: &ParameterField) -> bool {
        (0..d_r.coeffs().ncols()).all(|k| d_r.coeffs().column(k).norm() <= slack[k])
    }

    /// Lift, clamp, restrict. Returns the restricted field, the largest
    /// per-column out-of-span defect in the M_Q norm, and the clamped full
    /// field itself.
    pub fn project_box_r(&self, q_r: &ParameterField) -> (ParameterField, f64, ParameterField) {
        let lifted = self.lift_param(q_r);
        let clamped = self.problem.project_box(&lifted);
        if clamped.coeffs() == lifted.coeffs() {
            return (q_r.clone(), 0.0, clamped);
        }
        let restricted = self.restrict_param(&clamped);
        let relift = self.basis_q.lift_mat(restricted.coeffs());
        let mut defect: f64 = 0.0;
        for k in 0..relift.ncols() {
            let diff = DVector::from_column_slice(
                (clamped.coeffs().column(k) - relift.column(k)).as_slice(),
            );
            let d = self.problem.q_product().quadratic(&diff, &diff).max(0.0).sqrt();
            defect = defect.max(d);
        }
        (restricted, defect, clamped)
    }
}

/// Reduced linearized Tikhonov subproblem at a fixed reduced iterate.
pub struct RomSubproblem<'a, 'b> {
    rom: &'b RomModel<'a>,
    q_r: ParameterField,
    u_r: DMatrix<f64>,
    couplings: Vec<DMatrix<f64>>,
    obj_shift: DMatrix<f64>,
    center_obj: f64,
    reg_shift: DMatrix<f64>,
    center_norm: f64,
    slack: Vec<f64>,
}

impl<'a, 'b> RomSubproblem<'a, 'b> {
    pub fn new(rom: &'b RomModel<'a>, q_r: ParameterField) -> Result<Self> {
        let u_r = rom.solve_primal_r(&q_r)?;
        Self::from_state(rom, q_r, u_r)
    }

    pub fn from_state(rom: &'b RomModel<'a>, q_r: ParameterField, u_r: DMatrix<f64>) -> Result<Self> {
        let k_max = rom.problem.n_steps();
        let couplings: Vec<DMatrix<f64>> = (0..k_max)
            .map(|k| rom.coupling_r(&u_r.column(k).into_owned()))
            .collect();
        let mut obj_shift = DMatrix::zeros(rom.n_v(), k_max);
        for k in 0..k_max {
            obj_shift.set_column(
                k,
                &(rom.cy_r.column(k).into_owned() - &rom.c_r * u_r.column(k).into_owned()),
            );
        }
        let center_obj = rom.objective_r_from_state(&u_r);
        let cols = q_r.coeffs().ncols();
        let mut reg_shift = DMatrix::zeros(rom.n_q(), cols);
        for k in 0..cols {
            reg_shift.set_column(k, &(&rom.q_center_r - q_r.coeffs().column(k).into_owned()));
        }
        let center_norm = q_r.coeffs().norm();
        let slack = rom.feasibility_slack(&q_r);
        Ok(Self {
            rom,
            u_r,
            couplings,
            obj_shift,
            center_obj,
            reg_shift,
            center_norm,
            slack,
            q_r,
        })
    }

    pub fn reduced_state(&self) -> &DMatrix<f64> {
        &self.u_r
    }

    pub fn linearization_point(&self) -> &ParameterField {
        &self.q_r
    }

    fn wrap(&self, d: &DMatrix<f64>) -> ParameterField {
        if self.q_r.is_stationary() {
            ParameterField::stationary(DVector::from_column_slice(d.column(0).as_slice()))
        } else {
            ParameterField::transient(d.clone())
        }
    }

    fn misfit_from_lin_state(&self, w: &DMatrix<f64>) -> f64 {
        let mut acc = 0.0;
        for k in 0..w.ncols() {
            let wk = w.column(k);
            acc += 0.5 * (&self.rom.c_r * wk).dot(&wk) - self.obj_shift.column(k).dot(&wk);
        }
        self.center_obj + self.rom.problem.dt() * acc
    }
}

impl LinearizedModel for RomSubproblem<'_, '_> {
    fn n_param_dofs(&self) -> usize {
        self.rom.n_q()
    }

    fn n_param_cols(&self) -> usize {
        self.q_r.coeffs().ncols()
    }

    fn is_stationary(&self) -> bool {
        self.q_r.is_stationary()
    }

    fn center_objective(&self) -> f64 {
        self.center_obj
    }

    fn reg_center_shift(&self) -> &DMatrix<f64> {
        &self.reg_shift
    }

    fn lin_misfit(&self, d: &DMatrix<f64>) -> Result<f64> {
        let w = self
            .rom
            .solve_linearized_primal_r(&self.q_r, &self.couplings, &self.wrap(d))?;
        Ok(self.misfit_from_lin_state(&w))
    }

    fn lin_misfit_grad(&self, d: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let w = self
            .rom
            .solve_linearized_primal_r(&self.q_r, &self.couplings, &self.wrap(d))?;
        let misfit = self.misfit_from_lin_state(&w);
        let pt = self
            .rom
            .solve_linearized_adjoint_r(&self.q_r, &self.u_r, &w)?;
        let k_max = self.rom.problem.n_steps();
        let grad = if self.is_stationary() {
            let mut acc = DVector::zeros(self.rom.n_q());
            for k in 0..k_max {
                acc += self.couplings[k].transpose() * pt.column(k);
            }
            DMatrix::from_column_slice(
                self.rom.n_q(),
                1,
                (acc * self.rom.problem.dt()).as_slice(),
            )
        } else {
            let mut g = DMatrix::zeros(self.rom.n_q(), k_max);
            for k in 0..k_max {
                g.set_column(k, &(self.couplings[k].transpose() * pt.column(k)));
            }
            g
        };
        Ok((misfit, grad))
    }

    fn project_shift(&self, d: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
        let shifted = self.wrap(&(self.q_r.coeffs() + d));
        if self.rom.cheap_feasibility(&self.slack, &self.wrap(d)) {
            return (d.clone(), 0.0);
        }
        let (projected, defect, _) = self.rom.project_box_r(&shifted);
        (projected.coeffs() - self.q_r.coeffs(), defect)
    }

    fn q_inner(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        // reduced Gram matrices are identities
        let dot = a.dot(b);
        if self.is_stationary() {
            dot
        } else {
            self.rom.problem.dt() * dot
        }
    }

    fn center_norm(&self) -> f64 {
        self.center_norm
    }
}
