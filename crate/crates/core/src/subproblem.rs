//! Linearized Tikhonov subproblems solved by projected gradient descent
//! with Barzilai-Borwein step sizes, and the regularization-parameter
//! bracketing loop shared by the full-order and trust-region drivers.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::fem::SparseOperator;
use crate::fom::{FomProblem, Observation, ParameterField, StateTrajectory};

/// Model handle for one linearized subproblem: minimize over shifts d
///
///   misfit(d) + alpha/2 ||d - reg_center_shift||^2   s.t.  q + d admissible,
///
/// where misfit(d) = 1/2 ||F(q) + F'(q) d - y||^2 in the model's norms.
/// Implemented by the full-order subproblem below and the reduced one in
/// `rom`.
pub trait LinearizedModel {
    fn n_param_dofs(&self) -> usize;
    fn n_param_cols(&self) -> usize;
    fn is_stationary(&self) -> bool;

    /// Objective value J(q) at the linearization point.
    fn center_objective(&self) -> f64;

    /// q_center - q in model coordinates.
    fn reg_center_shift(&self) -> &DMatrix<f64>;

    /// Misfit part of the linearized objective.
    fn lin_misfit(&self, d: &DMatrix<f64>) -> Result<f64>;

    /// Misfit and its Riesz gradient with respect to `q_inner`.
    fn lin_misfit_grad(&self, d: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)>;

    /// Projection onto {d : q + d admissible}. The second component is the
    /// out-of-span defect incurred by the projection (always 0 for
    /// full-order models).
    fn project_shift(&self, d: &DMatrix<f64>) -> (DMatrix<f64>, f64);

    /// Q(^K) inner product in model coordinates (dt-weighted for
    /// trajectories, plain for stationary fields).
    fn q_inner(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64;

    /// Norm scale used by the relative defect tolerance.
    fn center_norm(&self) -> f64;

    fn q_norm(&self, a: &DMatrix<f64>) -> f64 {
        self.q_inner(a, a).max(0.0).sqrt()
    }

    fn zero_shift(&self) -> DMatrix<f64> {
        DMatrix::zeros(self.n_param_dofs(), self.n_param_cols())
    }
}

/// alpha/2-weighted regularizer value 1/2 ||d - center_shift||^2.
pub fn regularizer<M: LinearizedModel + ?Sized>(model: &M, d: &DMatrix<f64>) -> f64 {
    let diff = d - model.reg_center_shift();
    0.5 * model.q_inner(&diff, &diff)
}

/// Full linearized objective misfit(d) + alpha * regularizer(d).
pub fn linearized_objective<M: LinearizedModel + ?Sized>(
    model: &M,
    d: &DMatrix<f64>,
    alpha: f64,
) -> Result<f64> {
    Ok(model.lin_misfit(d)? + alpha * regularizer(model, d))
}

/// Riesz gradient of the full linearized objective.
pub fn linearized_gradient<M: LinearizedModel + ?Sized>(
    model: &M,
    d: &DMatrix<f64>,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    let (_, mut g) = model.lin_misfit_grad(d)?;
    g += (d - model.reg_center_shift()) * alpha;
    Ok(g)
}

/// Stopping rules for the projected gradient descent.
#[derive(Debug, Clone)]
pub struct PgdSettings {
    pub max_iterations: usize,
    /// Relative first-order optimality tolerance.
    pub tolerance: f64,
    /// Number of consecutive constant objective values that stop the loop.
    pub stagnation_window: usize,
    pub stagnation_tol: f64,
    /// Window length of the nonmonotone descent safeguard.
    pub safeguard_history: usize,
    pub safeguard_coeff: f64,
    /// Relative bound on projection defects (reduced models only).
    pub defect_tolerance: f64,
}

impl Default for PgdSettings {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            tolerance: 1e-8,
            stagnation_window: 5,
            stagnation_tol: 1e-16,
            safeguard_history: 5,
            safeguard_coeff: 1e-12,
            defect_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgdStop {
    Optimal,
    MaxIterations,
    Stagnation,
}

#[derive(Debug, Clone)]
pub struct PgdDiagnostics {
    pub iterations: usize,
    pub stop: PgdStop,
    pub final_optimality: f64,
    pub objective: f64,
    pub defect_events: usize,
}

fn optimality<M: LinearizedModel + ?Sized>(model: &M, d: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
    let (proj, _) = model.project_shift(&(d - g));
    model.q_norm(&(d - proj))
}

/// Projected gradient descent with alternating BB1/BB2 step sizes and a
/// nonmonotone safeguard. Every accepted iterate satisfies the box; the
/// optional guard can veto candidate iterates, which halves the step.
pub fn solve_pgd<M: LinearizedModel + ?Sized>(
    model: &M,
    alpha: f64,
    settings: &PgdSettings,
    d0: &DMatrix<f64>,
    guard: Option<&dyn Fn(&DMatrix<f64>) -> bool>,
) -> Result<(DMatrix<f64>, PgdDiagnostics)> {
    let center_shift = model.reg_center_shift();
    let defect_scale = settings.defect_tolerance * model.center_norm().max(1.0);

    let (mut d, _) = model.project_shift(d0);
    let (mis, mis_g) = model.lin_misfit_grad(&d)?;
    let mut j = mis + alpha * regularizer(model, &d);
    let mut g = mis_g + (&d - center_shift) * alpha;

    let opt0 = optimality(model, &d, &g);
    let tol = settings.tolerance * opt0.max(1.0);
    let mut opt = opt0;

    let mut hist: VecDeque<f64> = VecDeque::with_capacity(settings.safeguard_history);
    hist.push_back(j);

    let mut step = 1.0 / model.q_norm(&g).max(1e-30);
    let mut stagnant = 0usize;
    let mut defect_events = 0usize;
    let mut use_bb1 = true;

    let mut diagnostics = PgdDiagnostics {
        iterations: 0,
        stop: PgdStop::MaxIterations,
        final_optimality: opt,
        objective: j,
        defect_events: 0,
    };

    for it in 0..settings.max_iterations {
        if opt <= tol {
            diagnostics.stop = PgdStop::Optimal;
            diagnostics.iterations = it;
            break;
        }
        diagnostics.iterations = it + 1;

        let j_ref = hist.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut cand;
        let mut j_cand;
        let mut halvings = 0usize;
        loop {
            let (proj, defect) = model.project_shift(&(&d - &g * step));
            cand = proj;
            let diff = &cand - &d;
            let step_norm2 = model.q_inner(&diff, &diff);
            j_cand = model.lin_misfit(&cand)? + alpha * regularizer(model, &cand);
            let descent_ok = j_cand <= j_ref - settings.safeguard_coeff * step_norm2;
            let defect_ok = defect <= defect_scale;
            let guard_ok = guard.map_or(true, |f| f(&cand));
            if !defect_ok {
                defect_events += 1;
            }
            if (descent_ok && defect_ok && guard_ok) || halvings >= 60 || step_norm2 == 0.0 {
                break;
            }
            step *= 0.5;
            halvings += 1;
        }

        let (mis_new, mis_g_new) = model.lin_misfit_grad(&cand)?;
        let j_new = mis_new + alpha * regularizer(model, &cand);
        let g_new = mis_g_new + (&cand - center_shift) * alpha;

        // BB step from the accepted displacement
        let sd = &cand - &d;
        let sg = &g_new - &g;
        let ss = model.q_inner(&sd, &sd);
        let sy = model.q_inner(&sd, &sg);
        let yy = model.q_inner(&sg, &sg);
        let bb = if use_bb1 {
            if sy > 0.0 { ss / sy } else { f64::NAN }
        } else if yy > 0.0 {
            sy / yy
        } else {
            f64::NAN
        };
        use_bb1 = !use_bb1;
        if bb.is_finite() && bb > 0.0 {
            step = bb.clamp(1e-14, 1e14);
        }

        if (j_new - j).abs() <= settings.stagnation_tol * j.abs().max(1.0) {
            stagnant += 1;
        } else {
            stagnant = 0;
        }

        d = cand;
        let _ = j_cand;
        j = j_new;
        g = g_new;
        if hist.len() == settings.safeguard_history {
            hist.pop_front();
        }
        hist.push_back(j);
        opt = optimality(model, &d, &g);

        if stagnant >= settings.stagnation_window {
            diagnostics.stop = PgdStop::Stagnation;
            break;
        }
    }

    diagnostics.final_optimality = opt;
    diagnostics.objective = j;
    diagnostics.defect_events = defect_events;
    Ok((d, diagnostics))
}

/// Bracketing rule for the Tikhonov weight.
#[derive(Debug, Clone)]
pub struct AlphaSettings {
    pub theta: f64,
    pub big_theta: f64,
    /// Smallest alpha the halving branch may pass (1e-14).
    pub floor: f64,
    pub max_trials: usize,
}

impl Default for AlphaSettings {
    fn default() -> Self {
        Self {
            theta: 0.4,
            big_theta: 1.95,
            floor: 1e-14,
            max_trials: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegulatedStep {
    pub direction: DMatrix<f64>,
    pub alpha: f64,
    /// 2 * misfit part of the linearized objective at the returned step.
    pub lin_misfit_times2: f64,
    pub hit_floor: bool,
    pub side_flip: bool,
    pub subproblem_solves: usize,
    pub pgd_iterations: usize,
    pub alpha_trace: Vec<f64>,
}

/// Runs the doubling/halving loop on alpha until the bracket
/// theta J(q) <= 2 misfit(d) <= Theta J(q) holds, the floor is reached, or
/// continuing would revisit a previous alpha (side flip).
pub fn regulate_alpha<M: LinearizedModel + ?Sized>(
    model: &M,
    alpha0: f64,
    alpha_settings: &AlphaSettings,
    pgd_settings: &PgdSettings,
    guard: Option<&dyn Fn(&DMatrix<f64>) -> bool>,
) -> Result<RegulatedStep> {
    let j_center = model.center_objective();
    let lo = alpha_settings.theta * j_center;
    let hi = alpha_settings.big_theta * j_center;

    let mut alpha = alpha0;
    let mut warm = model.zero_shift();
    let mut visited: Vec<f64> = Vec::new();
    let mut best: Option<(f64, DMatrix<f64>, f64, f64)> = None; // (dist, d, alpha, two_jt)
    let mut trace = Vec::new();
    let mut pgd_iterations = 0usize;

    for trial in 1..=alpha_settings.max_trials {
        let (d, diag) = solve_pgd(model, alpha, pgd_settings, &warm, guard)?;
        pgd_iterations += diag.iterations;
        trace.push(alpha);
        let two_jt = 2.0 * (diag.objective - alpha * regularizer(model, &d));

        let dist = if two_jt < lo {
            lo - two_jt
        } else if two_jt > hi {
            two_jt - hi
        } else {
            0.0
        };
        if best.as_ref().map_or(true, |(b, ..)| dist < *b) {
            best = Some((dist, d.clone(), alpha, two_jt));
        }

        if dist == 0.0 {
            return Ok(RegulatedStep {
                direction: d,
                alpha,
                lin_misfit_times2: two_jt,
                hit_floor: false,
                side_flip: false,
                subproblem_solves: trial,
                pgd_iterations,
                alpha_trace: trace,
            });
        }

        if two_jt > hi && alpha <= alpha_settings.floor {
            return Ok(RegulatedStep {
                direction: d,
                alpha,
                lin_misfit_times2: two_jt,
                hit_floor: true,
                side_flip: false,
                subproblem_solves: trial,
                pgd_iterations,
                alpha_trace: trace,
            });
        }

        let next = if two_jt < lo { alpha * 2.0 } else { alpha * 0.5 };
        if visited.iter().any(|&a| a == next) {
            // Doubling and halving would oscillate; take the trial whose
            // doubled misfit lies closest to the bracket.
            let (_, d_best, a_best, t_best) = best.unwrap();
            return Ok(RegulatedStep {
                direction: d_best,
                alpha: a_best,
                lin_misfit_times2: t_best,
                hit_floor: false,
                side_flip: true,
                subproblem_solves: trial,
                pgd_iterations,
                alpha_trace: trace,
            });
        }
        visited.push(alpha);
        alpha = next;
        warm = d;
    }

    let (_, d_best, a_best, t_best) = best.expect("at least one trial ran");
    Ok(RegulatedStep {
        direction: d_best,
        alpha: a_best,
        lin_misfit_times2: t_best,
        hit_floor: false,
        side_flip: true,
        subproblem_solves: alpha_settings.max_trials,
        pgd_iterations,
        alpha_trace: trace,
    })
}

/// Full-order linearized subproblem at a fixed iterate q: holds the primal
/// state, per-step coupling operators and data shifts so repeated PGD
/// evaluations only pay for the linearized solves.
pub struct FomSubproblem<'a> {
    problem: &'a FomProblem,
    q: ParameterField,
    u: StateTrajectory,
    couplings: Vec<SparseOperator>,
    couplings_t: Vec<SparseOperator>,
    data: Observation,
    center_obj: f64,
    reg_shift: DMatrix<f64>,
    center_norm: f64,
}

impl<'a> FomSubproblem<'a> {
    pub fn new(
        problem: &'a FomProblem,
        q: ParameterField,
        data: &Observation,
        q_center: &ParameterField,
    ) -> Result<Self> {
        let u = problem.solve_primal(&q)?;
        Self::from_state(problem, q, u, data, q_center)
    }

    /// Builds the subproblem from an already computed primal state.
    pub fn from_state(
        problem: &'a FomProblem,
        q: ParameterField,
        u: StateTrajectory,
        data: &Observation,
        q_center: &ParameterField,
    ) -> Result<Self> {
        assert_eq!(q.is_stationary(), q_center.is_stationary());
        let couplings = problem.coupling_operators(&u)?;
        let couplings_t = couplings.iter().map(|b| b.transpose()).collect();
        let center_obj = problem.objective_from_state(&u, data);
        let reg_shift = q_center.coeffs() - q.coeffs();
        let center_norm = problem.param_norm(&q);
        Ok(Self {
            problem,
            u,
            couplings,
            couplings_t,
            data: data.clone(),
            center_obj,
            reg_shift,
            center_norm,
            q,
        })
    }

    pub fn state(&self) -> &StateTrajectory {
        &self.u
    }

    pub fn linearization_point(&self) -> &ParameterField {
        &self.q
    }

    fn wrap(&self, d: &DMatrix<f64>) -> ParameterField {
        if self.q.is_stationary() {
            ParameterField::stationary(DVector::from_column_slice(d.column(0).as_slice()))
        } else {
            ParameterField::transient(d.clone())
        }
    }

    fn misfit_from_lin_state(&self, w: &StateTrajectory) -> f64 {
        let mh = self.problem.obs_gram();
        let mut acc = 0.0;
        for k in 1..=self.problem.n_steps() {
            let wk = w.column(k);
            let shift = self.data.column(k) - self.u.column(k);
            acc += 0.5 * mh.quadratic(&wk, &wk) - mh.quadratic(&wk, &shift);
        }
        self.center_obj + self.problem.dt() * acc
    }
}

impl LinearizedModel for FomSubproblem<'_> {
    fn n_param_dofs(&self) -> usize {
        self.problem.n_param_dofs()
    }

    fn n_param_cols(&self) -> usize {
        if self.q.is_stationary() {
            1
        } else {
            self.problem.n_steps()
        }
    }

    fn is_stationary(&self) -> bool {
        self.q.is_stationary()
    }

    fn center_objective(&self) -> f64 {
        self.center_obj
    }

    fn reg_center_shift(&self) -> &DMatrix<f64> {
        &self.reg_shift
    }

    fn lin_misfit(&self, d: &DMatrix<f64>) -> Result<f64> {
        let w = self
            .problem
            .solve_linearized_primal_with(&self.q, &self.couplings, &self.wrap(d))?;
        Ok(self.misfit_from_lin_state(&w))
    }

    fn lin_misfit_grad(&self, d: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let w = self
            .problem
            .solve_linearized_primal_with(&self.q, &self.couplings, &self.wrap(d))?;
        let misfit = self.misfit_from_lin_state(&w);
        let pt = self
            .problem
            .solve_linearized_adjoint(&self.q, &self.u, &w, &self.data)?;
        let chol = self.problem.mq_cholesky();
        let n = self.n_param_dofs();
        let grad = if self.is_stationary() {
            let mut acc = DVector::zeros(n);
            for k in 1..=self.problem.n_steps() {
                acc += self.couplings_t[k - 1].apply(&pt.column(k));
            }
            // the gradient carries -B^T p_lin; the adjoint right-hand side
            // already flips the sign of the misfit, giving +B^T here
            let g = chol.solve_vec(&(acc * self.problem.dt()));
            DMatrix::from_column_slice(n, 1, g.as_slice())
        } else {
            let mut g = DMatrix::zeros(n, self.problem.n_steps());
            for k in 1..=self.problem.n_steps() {
                let col = chol.solve_vec(&self.couplings_t[k - 1].apply(&pt.column(k)));
                g.set_column(k - 1, &col);
            }
            g
        };
        Ok((misfit, grad))
    }

    fn project_shift(&self, d: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
        let (lo, hi) = self.problem.bounds();
        let mut out = d.clone();
        for (o, q) in out.iter_mut().zip(self.q.coeffs().iter()) {
            *o = (*q + *o).clamp(lo, hi) - *q;
        }
        (out, 0.0)
    }

    fn q_inner(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let mq = self.problem.q_product();
        if self.is_stationary() {
            let av = DVector::from_column_slice(a.column(0).as_slice());
            let bv = DVector::from_column_slice(b.column(0).as_slice());
            mq.quadratic(&av, &bv)
        } else {
            let mut acc = 0.0;
            for k in 0..a.ncols() {
                let av = DVector::from_column_slice(a.column(k).as_slice());
                let bv = DVector::from_column_slice(b.column(k).as_slice());
                acc += mq.quadratic(&av, &bv);
            }
            self.problem.dt() * acc
        }
    }

    fn center_norm(&self) -> f64 {
        self.center_norm
    }
}
