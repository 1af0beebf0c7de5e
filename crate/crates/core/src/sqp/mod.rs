//! Elastic active-set SQP for smooth NLPs with equality constraints, general
//! inequalities, and warm starting.
//!
//! Each iteration solves a convex QP (constant Gauss-Newton Hessian of the
//! objective plus a small regularization, linearized constraints) with a
//! working-set method; infeasible subproblems fall back to an l1-elastic
//! relaxation. Globalization is a backtracking line search on an l1 merit
//! function whose penalty exceeds the current multiplier norm.

pub mod qp;

use serde::{Deserialize, Serialize};

use crate::nlp::NlpProblem;
use crate::numerics::DVec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct SqpSettings {
    /// Convergence tolerance on stationarity and feasibility.
    pub tol_sqp: f64,
    /// Working-set tolerance of the QP subproblems (also the activity
    /// threshold reported in the solve).
    pub tol_qp: f64,
    pub max_iterations: usize,
    /// Base Hessian regularization, scaled by `1 + |grad|_inf` per iteration.
    pub hessian_regularization: f64,
    pub elastic_penalty: f64,
    /// Backtracking factor of the line search.
    pub ls_backtrack: f64,
    /// Armijo constant.
    pub ls_armijo: f64,
    /// Smallest accepted step length before the solve counts as diverged.
    pub ls_min_step: f64,
    /// Emit a line-oriented iteration trace on stderr.
    pub trace: bool,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            tol_sqp: 1e-7,
            tol_qp: 1.49e-8,
            max_iterations: 300,
            hessian_regularization: 1e-8,
            elastic_penalty: qp::ELASTIC_PENALTY_DEFAULT,
            ls_backtrack: 0.5,
            ls_armijo: 1e-4,
            ls_min_step: 1e-12,
            trace: false,
        }
    }
}

impl SqpSettings {
    pub fn with_tolerances(tol_sqp: f64, tol_qp: f64) -> Self {
        Self {
            tol_sqp,
            tol_qp,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> bool {
        0.0 < self.tol_qp && self.tol_qp <= self.tol_sqp && self.tol_sqp < 1.0
    }
}

/// Primal/dual seed for a solve, remapped by the caller to the target
/// problem's dimensions.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub primal: Option<DVec>,
    pub equality_multipliers: Option<DVec>,
    pub inequality_multipliers: Option<DVec>,
    pub active_guess: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub primal: DVec,
    pub equality_multipliers: DVec,
    pub inequality_multipliers: DVec,
    pub objective_value: f64,
    /// Stationarity infinity norm at the final iterate.
    pub kkt_residual_inf: f64,
    /// Constraint violation infinity norm (equalities and violated bounds).
    pub feasibility_inf: f64,
    /// Largest `|mu_i c_i|` over the inequalities.
    pub complementarity_inf: f64,
    /// Inequality rows with residual at most `tol_qp`.
    pub active_set: Vec<usize>,
    pub iterations: usize,
    /// Merit value after each accepted step (index 0 is the initial point).
    pub merit_history: Vec<f64>,
    /// True if any QP subproblem needed the elastic relaxation.
    pub used_elastic: bool,
}

/// Infinity norms of (stationarity, feasibility, complementarity) of the
/// problem's own KKT system at `(x, lambda, mu)`.
pub fn kkt_residual(
    problem: &NlpProblem,
    x: &DVec,
    eq_mult: &DVec,
    ineq_mult: &DVec,
) -> (f64, f64, f64) {
    let (_, grad) = problem.objective(x);
    let (ce, je) = problem.equalities(x);
    let (ci, ji) = problem.inequalities(x);
    kkt_residual_parts(&grad, &ce, &je, &ci, &ji, eq_mult, ineq_mult)
}

#[allow(clippy::too_many_arguments)]
fn kkt_residual_parts(
    grad: &DVec,
    ce: &DVec,
    je: &crate::numerics::DMat,
    ci: &DVec,
    ji: &crate::numerics::DMat,
    eq_mult: &DVec,
    ineq_mult: &DVec,
) -> (f64, f64, f64) {
    let mut stat = grad.clone();
    if ce.len() > 0 {
        stat -= je.transpose() * eq_mult;
    }
    if ci.len() > 0 {
        stat -= ji.transpose() * ineq_mult;
    }
    let stat_inf = if stat.is_empty() { 0.0 } else { stat.amax() };
    let mut feas = if ce.is_empty() { 0.0 } else { ce.amax() };
    let mut compl = 0.0f64;
    for i in 0..ci.len() {
        feas = feas.max(-ci[i].min(0.0));
        compl = compl.max((ineq_mult[i] * ci[i]).abs());
    }
    (stat_inf, feas, compl)
}

fn constraint_violation_l1(ce: &DVec, ci: &DVec) -> f64 {
    let mut v = 0.0;
    for r in ce.iter() {
        v += r.abs();
    }
    for r in ci.iter() {
        v += (-r).max(0.0);
    }
    v
}

/// Solves the NLP to first-order optimality.
pub fn solve(problem: &NlpProblem, settings: &SqpSettings, warm: Option<&WarmStart>) -> SolveReport {
    assert!(settings.validate(), "invalid SQP settings");
    let dim = problem.dim();
    let n_eq = problem.n_eq();
    let n_in = problem.n_ineq();

    let mut x = warm
        .and_then(|w| w.primal.clone())
        .unwrap_or_else(|| problem.initial_point.clone());
    assert_eq!(x.len(), dim);
    let mut lam = warm
        .and_then(|w| w.equality_multipliers.clone())
        .filter(|v| v.len() == n_eq)
        .unwrap_or_else(|| DVec::zeros(n_eq));
    let mut mu = warm
        .and_then(|w| w.inequality_multipliers.clone())
        .filter(|v| v.len() == n_in)
        .unwrap_or_else(|| DVec::zeros(n_in))
        .map(|v| v.max(0.0));
    let mut working: Vec<usize> = warm
        .map(|w| w.active_guess.iter().copied().filter(|&i| i < n_in).collect())
        .unwrap_or_default();

    let mut nu: f64 = 1.0;
    let mut merit_history = Vec::new();
    let mut used_elastic = false;
    let mut iterations = 0usize;

    let make_report = |status: SolveStatus,
                       x: &DVec,
                       lam: &DVec,
                       mu: &DVec,
                       stat: f64,
                       feas: f64,
                       compl: f64,
                       ci: &DVec,
                       iterations: usize,
                       merit_history: Vec<f64>,
                       used_elastic: bool,
                       tol_qp: f64,
                       objective: f64| SolveReport {
        status,
        primal: x.clone(),
        equality_multipliers: lam.clone(),
        inequality_multipliers: mu.clone(),
        objective_value: objective,
        kkt_residual_inf: stat,
        feasibility_inf: feas,
        complementarity_inf: compl,
        active_set: (0..ci.len()).filter(|&i| ci[i] <= tol_qp).collect(),
        iterations,
        merit_history,
        used_elastic,
    };

    loop {
        let (f, grad) = problem.objective(&x);
        let (ce, je) = problem.equalities(&x);
        let (ci, ji) = problem.inequalities(&x);
        if !f.is_finite()
            || !grad.iter().all(|v| v.is_finite())
            || !ce.iter().all(|v| v.is_finite())
            || !ci.iter().all(|v| v.is_finite())
        {
            return make_report(
                SolveStatus::Diverged,
                &x,
                &lam,
                &mu,
                f64::INFINITY,
                f64::INFINITY,
                f64::INFINITY,
                &ci,
                iterations,
                merit_history,
                used_elastic,
                settings.tol_qp,
                f,
            );
        }

        let (stat, feas, compl) =
            kkt_residual_parts(&grad, &ce, &je, &ci, &ji, &lam, &mu);
        let sign_ok = mu.iter().all(|&m| m >= -settings.tol_qp);
        if stat <= settings.tol_sqp
            && feas <= settings.tol_sqp
            && compl <= settings.tol_qp.max(settings.tol_sqp * settings.tol_sqp)
            && sign_ok
        {
            if merit_history.is_empty() {
                merit_history.push(f + nu * constraint_violation_l1(&ce, &ci));
            }
            return make_report(
                SolveStatus::Converged,
                &x,
                &lam,
                &mu,
                stat,
                feas,
                compl,
                &ci,
                iterations,
                merit_history,
                used_elastic,
                settings.tol_qp,
                f,
            );
        }
        if iterations >= settings.max_iterations {
            return make_report(
                SolveStatus::MaxIter,
                &x,
                &lam,
                &mu,
                stat,
                feas,
                compl,
                &ci,
                iterations,
                merit_history,
                used_elastic,
                settings.tol_qp,
                f,
            );
        }

        // convex QP model at x
        let reg = settings.hessian_regularization * (1.0 + grad.amax());
        let mut h = problem.hessian().clone();
        for i in 0..dim {
            h[(i, i)] += reg;
        }
        let subproblem = qp::QpProblem {
            h: &h,
            grad: &grad,
            a_eq: &je,
            c_eq: &ce,
            a_in: &ji,
            c_in: &ci,
        };
        let qp_sol = match qp::solve_qp(&subproblem, &working, settings.tol_qp) {
            Ok(sol) => sol,
            Err(_) => {
                return make_report(
                    SolveStatus::Diverged,
                    &x,
                    &lam,
                    &mu,
                    stat,
                    feas,
                    compl,
                    &ci,
                    iterations,
                    merit_history,
                    used_elastic,
                    settings.tol_qp,
                    f,
                );
            }
        };
        used_elastic |= qp_sol.elastic;

        // check optimality with the fresh multipliers before stepping
        let (stat_new, _, compl_new) =
            kkt_residual_parts(&grad, &ce, &je, &ci, &ji, &qp_sol.eq_mult, &qp_sol.ineq_mult);
        if stat_new <= settings.tol_sqp
            && feas <= settings.tol_sqp
            && compl_new <= settings.tol_qp.max(settings.tol_sqp * settings.tol_sqp)
        {
            lam = qp_sol.eq_mult;
            mu = qp_sol.ineq_mult;
            if merit_history.is_empty() {
                merit_history.push(f + nu * constraint_violation_l1(&ce, &ci));
            }
            return make_report(
                SolveStatus::Converged,
                &x,
                &lam,
                &mu,
                stat_new,
                feas,
                compl_new,
                &ci,
                iterations,
                merit_history,
                used_elastic,
                settings.tol_qp,
                f,
            );
        }

        // merit penalty dominates the multipliers
        let mult_inf = qp_sol
            .eq_mult
            .amax()
            .max(if n_in > 0 { qp_sol.ineq_mult.amax() } else { 0.0 });
        nu = nu.max(1.5 * mult_inf + 1e-6);

        let viol0 = constraint_violation_l1(&ce, &ci);
        let phi0 = f + nu * viol0;
        if merit_history.is_empty() {
            merit_history.push(phi0);
        }
        let descent = grad.dot(&qp_sol.step) - nu * viol0;

        // backtracking line search on the l1 merit function
        let mut alpha = 1.0f64;
        let mut accepted = None;
        while alpha >= settings.ls_min_step {
            let x_trial = &x + &qp_sol.step * alpha;
            let (f_t, _) = problem.objective(&x_trial);
            let (ce_t, _) = problem.equalities(&x_trial);
            let (ci_t, _) = problem.inequalities(&x_trial);
            if f_t.is_finite()
                && ce_t.iter().all(|v| v.is_finite())
                && ci_t.iter().all(|v| v.is_finite())
            {
                let phi_t = f_t + nu * constraint_violation_l1(&ce_t, &ci_t);
                if phi_t <= phi0 + settings.ls_armijo * alpha * descent.min(0.0) {
                    accepted = Some((x_trial, phi_t, f_t));
                    break;
                }
            }
            alpha *= settings.ls_backtrack;
        }
        let Some((x_next, phi_next, _)) = accepted else {
            return make_report(
                SolveStatus::Diverged,
                &x,
                &lam,
                &mu,
                stat,
                feas,
                compl,
                &ci,
                iterations,
                merit_history,
                used_elastic,
                settings.tol_qp,
                f,
            );
        };

        if settings.trace {
            eprintln!(
                "sqp it={iterations} f={f:.6e} merit={phi0:.6e} step={alpha:.3e} \
                 kkt=({stat:.2e},{feas:.2e},{compl:.2e}) active={}",
                qp_sol.working.len()
            );
        }

        x = x_next;
        lam = qp_sol.eq_mult;
        mu = qp_sol.ineq_mult;
        working = qp_sol.working;
        merit_history.push(phi_next);
        iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::{IneqLabel, NlpProblem, StageTag, VariableLayout};
    use crate::numerics::{DMat, DVec};

    fn plain_problem(
        dim: usize,
        n_eq: usize,
        ineq: usize,
        x0: Vec<f64>,
        objective: impl Fn(&DVec) -> (f64, DVec) + Send + Sync + 'static,
        hessian: DMat,
        equalities: impl Fn(&DVec) -> (DVec, DMat) + Send + Sync + 'static,
        inequalities: impl Fn(&DVec) -> (DVec, DMat) + Send + Sync + 'static,
    ) -> NlpProblem {
        NlpProblem::from_parts(
            VariableLayout::Plain { dim },
            StageTag::External("test".into()),
            DVec::from_vec(x0),
            (0..ineq).map(|index| IneqLabel::SlackBound { index }).collect(),
            n_eq,
            hessian,
            Box::new(objective),
            Box::new(equalities),
            Box::new(inequalities),
        )
    }

    #[test]
    fn unconstrained_quadratic_converges_immediately_at_optimum() {
        let a = [1.5, -2.0];
        let p = plain_problem(
            2,
            0,
            0,
            vec![1.5, -2.0],
            move |x| {
                let d = DVec::from_vec(vec![x[0] - a[0], x[1] - a[1]]);
                (0.5 * d.norm_squared(), d)
            },
            DMat::identity(2, 2),
            |_| (DVec::zeros(0), DMat::zeros(0, 2)),
            |_| (DVec::zeros(0), DMat::zeros(0, 2)),
        );
        let report = solve(&p, &SqpSettings::default(), None);
        assert_eq!(report.status, SolveStatus::Converged);
        assert_eq!(report.iterations, 0);
        let (s, f, c) = kkt_residual(
            &p,
            &report.primal,
            &report.equality_multipliers,
            &report.inequality_multipliers,
        );
        assert!(s == 0.0 && f == 0.0 && c == 0.0);
    }

    #[test]
    fn equality_constrained_quadratic() {
        // min 1/2 |x|^2 s.t. x0 + x1 = 2 -> (1, 1)
        let p = plain_problem(
            2,
            1,
            0,
            vec![5.0, -3.0],
            |x| (0.5 * x.norm_squared(), x.clone()),
            DMat::identity(2, 2),
            |x| {
                (
                    DVec::from_vec(vec![x[0] + x[1] - 2.0]),
                    DMat::from_row_slice(1, 2, &[1.0, 1.0]),
                )
            },
            |_| (DVec::zeros(0), DMat::zeros(0, 2)),
        );
        let report = solve(&p, &SqpSettings::default(), None);
        assert_eq!(report.status, SolveStatus::Converged);
        assert!((report.primal[0] - 1.0).abs() < 1e-8);
        assert!((report.primal[1] - 1.0).abs() < 1e-8);
        assert!((report.equality_multipliers[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn bound_constrained_quadratic_activates_the_bound() {
        // min 1/2 |x - (2, 0)|^2 s.t. 1 - x0 >= 0
        let p = plain_problem(
            2,
            0,
            1,
            vec![0.0, 0.0],
            |x| {
                let d = DVec::from_vec(vec![x[0] - 2.0, x[1]]);
                (0.5 * d.norm_squared(), d)
            },
            DMat::identity(2, 2),
            |_| (DVec::zeros(0), DMat::zeros(0, 2)),
            |x| {
                (
                    DVec::from_vec(vec![1.0 - x[0]]),
                    DMat::from_row_slice(1, 2, &[-1.0, 0.0]),
                )
            },
        );
        let report = solve(&p, &SqpSettings::default(), None);
        assert_eq!(report.status, SolveStatus::Converged);
        assert!((report.primal[0] - 1.0).abs() < 1e-8);
        assert_eq!(report.active_set, vec![0]);
        assert!((report.inequality_multipliers[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn nonlinear_rod_equation_from_cold_start() {
        // minimize 0 s.t. x1 = 0, x2^3 + x2 - 40 = 0 (the nonlinear rod in
        // minimal irreducible form); started at x2 = 1
        let p = plain_problem(
            2,
            2,
            0,
            vec![0.0, 1.0],
            |_| (0.0, DVec::zeros(2)),
            DMat::identity(2, 2),
            |x| {
                (
                    DVec::from_vec(vec![x[0], x[1].powi(3) + x[1] - 40.0]),
                    DMat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0 * x[1] * x[1] + 1.0]),
                )
            },
            |_| (DVec::zeros(0), DMat::zeros(0, 2)),
        );
        let report = solve(&p, &SqpSettings::default(), None);
        assert_eq!(report.status, SolveStatus::Converged);
        assert!((report.primal[1] - 3.3225).abs() < 1e-3);
    }

    #[test]
    fn merit_history_is_nonincreasing() {
        let p = plain_problem(
            2,
            1,
            0,
            vec![4.0, 4.0],
            |x| (0.5 * x.norm_squared(), x.clone()),
            DMat::identity(2, 2),
            |x| {
                (
                    DVec::from_vec(vec![x[0] * x[0] + x[1] - 3.0]),
                    DMat::from_row_slice(1, 2, &[2.0 * x[0], 1.0]),
                )
            },
            |_| (DVec::zeros(0), DMat::zeros(0, 2)),
        );
        let report = solve(&p, &SqpSettings::default(), None);
        assert_eq!(report.status, SolveStatus::Converged);
        for w in report.merit_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn warm_started_resolve_finishes_in_two_iterations() {
        let build = || {
            plain_problem(
                2,
                1,
                0,
                vec![4.0, 4.0],
                |x| (0.5 * x.norm_squared(), x.clone()),
                DMat::identity(2, 2),
                |x| {
                    (
                        DVec::from_vec(vec![x[0] * x[0] + x[1] - 3.0]),
                        DMat::from_row_slice(1, 2, &[2.0 * x[0], 1.0]),
                    )
                },
                |_| (DVec::zeros(0), DMat::zeros(0, 2)),
            )
        };
        let p = build();
        let first = solve(&p, &SqpSettings::default(), None);
        assert_eq!(first.status, SolveStatus::Converged);
        let warm = WarmStart {
            primal: Some(first.primal.clone()),
            equality_multipliers: Some(first.equality_multipliers.clone()),
            inequality_multipliers: Some(first.inequality_multipliers.clone()),
            active_guess: first.active_set.clone(),
        };
        let again = solve(&build(), &SqpSettings::default(), Some(&warm));
        assert_eq!(again.status, SolveStatus::Converged);
        assert!(again.iterations <= 2);
    }

    #[test]
    fn infeasible_problem_diverges_or_hits_max_iter() {
        // x^2 + 1 = 0 has no solution
        let p = plain_problem(
            1,
            1,
            0,
            vec![1.0],
            |_| (0.0, DVec::zeros(1)),
            DMat::identity(1, 1),
            |x| {
                (
                    DVec::from_vec(vec![x[0] * x[0] + 1.0]),
                    DMat::from_row_slice(1, 1, &[2.0 * x[0]]),
                )
            },
            |_| (DVec::zeros(0), DMat::zeros(0, 1)),
        );
        let mut settings = SqpSettings::default();
        settings.max_iterations = 60;
        let report = solve(&p, &settings, None);
        assert_ne!(report.status, SolveStatus::Converged);
    }
}
