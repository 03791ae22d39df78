//! Full-order iteratively regularized Gauss-Newton driver: outer loop with
//! discrepancy-principle termination and per-iterate regularization
//! bracketing.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::fom::{FomProblem, Observation, ParameterField};
use crate::subproblem::{
    regulate_alpha, AlphaSettings, FomSubproblem, PgdSettings,
};

#[derive(Debug, Clone)]
pub struct IrgnmSettings {
    pub delta: f64,
    pub tau: f64,
    pub theta: f64,
    pub big_theta: f64,
    pub alpha0: f64,
    /// Regularization center (and conventional initial guess).
    pub q_center: ParameterField,
    /// Safety cap on outer iterations.
    pub max_outer: usize,
    pub pgd: PgdSettings,
}

impl IrgnmSettings {
    /// Benchmark parameters: tau = 3.5, theta = 0.4, Theta = 1.95,
    /// alpha0 = 1e-5, cap 100.
    pub fn benchmark(delta: f64, q_center: ParameterField) -> Self {
        Self {
            delta,
            tau: 3.5,
            theta: 0.4,
            big_theta: 1.95,
            alpha0: 1e-5,
            q_center,
            max_outer: 100,
            pgd: PgdSettings::default(),
        }
    }

    pub fn alpha_settings(&self) -> AlphaSettings {
        AlphaSettings {
            theta: self.theta,
            big_theta: self.big_theta,
            ..AlphaSettings::default()
        }
    }

    pub fn discrepancy_threshold(&self) -> f64 {
        0.5 * (self.tau * self.delta).powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// The discrepancy principle fired.
    Discrepancy,
    /// The safety cap on outer iterations was reached.
    SafetyCap,
}

/// One history row per outer event; row 0 describes the initial iterate.
#[derive(Debug, Clone)]
pub struct IrgnmRecord {
    pub iterate: usize,
    pub objective: f64,
    pub alpha: f64,
    /// Total PGD iterations spent on the step leading to this iterate.
    pub inner_iterations: usize,
    pub cumulative_fom_solves: usize,
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct IrgnmResult {
    pub parameter: ParameterField,
    pub history: Vec<IrgnmRecord>,
    pub termination: Termination,
    pub outer_iterations: usize,
    pub fom_solves: usize,
    pub wall_time_s: f64,
}

/// Runs the full-order IRGNM from `q0` until the discrepancy principle
/// J(q) <= (tau delta)^2 / 2 fires or the safety cap is reached.
pub fn run_fom_irgnm(
    problem: &FomProblem,
    data: &Observation,
    settings: &IrgnmSettings,
    q0: &ParameterField,
) -> Result<IrgnmResult> {
    let start = Instant::now();
    let solves_at_start = problem.fom_solve_count();
    let threshold = settings.discrepancy_threshold();
    let alpha_settings = settings.alpha_settings();

    let mut q = problem.project_box(q0);
    let mut alpha = settings.alpha0;
    let mut history = Vec::new();
    let mut termination = Termination::SafetyCap;
    let mut outer = 0usize;

    for i in 0..=settings.max_outer {
        let (j, u) = problem.objective_with_state(&q, data)?;
        if !j.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        if i == 0 {
            history.push(IrgnmRecord {
                iterate: 0,
                objective: j,
                alpha,
                inner_iterations: 0,
                cumulative_fom_solves: problem.fom_solve_count() - solves_at_start,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
        }
        if j <= threshold {
            termination = Termination::Discrepancy;
            outer = i;
            break;
        }
        if i == settings.max_outer {
            outer = i;
            break;
        }

        let sub = FomSubproblem::from_state(problem, q.clone(), u, data, &settings.q_center)?;
        let step = regulate_alpha(&sub, alpha, &alpha_settings, &settings.pgd, None)?;
        alpha = step.alpha;
        let mut next = q.clone();
        *next.coeffs_mut() += &step.direction;
        q = next;

        let j_next = problem.objective(&q, data)?;
        history.push(IrgnmRecord {
            iterate: i + 1,
            objective: j_next,
            alpha,
            inner_iterations: step.pgd_iterations,
            cumulative_fom_solves: problem.fom_solve_count() - solves_at_start,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }

    Ok(IrgnmResult {
        parameter: q,
        history,
        termination,
        outer_iterations: outer,
        fom_solves: problem.fom_solve_count() - solves_at_start,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{Mesh, PdeKind};
    use crate::fom::{exact_parameter, ParamSpace, BACKGROUND_VALUE};

    fn desk_run1(nc: usize, steps: usize, delta: f64) -> (FomProblem, Observation) {
        let p = FomProblem::new(
            Mesh::build(nc).unwrap(),
            PdeKind::Reaction,
            ParamSpace::L2,
            steps,
            (1e-3, 1e3),
        )
        .unwrap();
        let q_exact = exact_parameter(1, p.mesh(), steps).unwrap();
        let data = p.make_noisy_data(&q_exact, delta, 11).unwrap();
        (p, data)
    }

    #[test]
    fn huge_delta_finishes_immediately() {
        let (p, data) = desk_run1(4, 4, 1e-4);
        let center = ParameterField::constant(p.n_param_dofs(), BACKGROUND_VALUE);
        let settings = IrgnmSettings::benchmark(1e3, center.clone());
        let res = run_fom_irgnm(&p, &data, &settings, &center).unwrap();
        assert_eq!(res.termination, Termination::Discrepancy);
        assert_eq!(res.outer_iterations, 0);
        assert_eq!(res.history.len(), 1);
    }

    #[test]
    fn desk_instance_converges_monotonically() {
        let (p, data) = desk_run1(8, 6, 1e-4);
        let center = ParameterField::constant(p.n_param_dofs(), BACKGROUND_VALUE);
        let settings = IrgnmSettings::benchmark(1e-4, center.clone());
        let res = run_fom_irgnm(&p, &data, &settings, &center).unwrap();
        assert_eq!(res.termination, Termination::Discrepancy);
        assert!(res.parameter.in_box(1e-3, 1e3));
        // strictly decreasing objective trace, re-evaluated independently
        for w in res.history.windows(2) {
            assert!(w[1].objective < w[0].objective);
        }
        let j_final = p.objective(&res.parameter, &data).unwrap();
        assert!(j_final <= settings.discrepancy_threshold());
        assert!(
            (j_final - res.history.last().unwrap().objective).abs()
                <= 1e-12 * j_final.max(1e-30)
        );
    }

    #[test]
    fn larger_delta_stops_no_later() {
        let (p, data) = desk_run1(6, 5, 1e-4);
        let center = ParameterField::constant(p.n_param_dofs(), BACKGROUND_VALUE);
        let mut stops = Vec::new();
        for delta in [1e-4, 3e-4, 1e-3] {
            let settings = IrgnmSettings::benchmark(delta, center.clone());
            let res = run_fom_irgnm(&p, &data, &settings, &center).unwrap();
            assert_eq!(res.termination, Termination::Discrepancy);
            stops.push(res.outer_iterations);
        }
        assert!(stops[0] >= stops[1] && stops[1] >= stops[2], "{stops:?}");
    }
}
