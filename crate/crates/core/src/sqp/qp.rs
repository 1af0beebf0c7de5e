//! Convex QP subproblems: a bordered KKT factorization (faer LU) for the
//! equality block, a working-set loop over the few inequality rows via a
//! dense Schur complement, and an l1-elastic fallback for infeasible
//! subproblems.

use faer::linalg::solvers::Solve;

use crate::numerics::{DMat, DVec};
use crate::{Error, Result};

/// `min 1/2 d^T H d + g^T d` subject to `A_eq d + c_eq = 0` and
/// `A_in d + c_in >= 0`.
pub struct QpProblem<'a> {
    pub h: &'a DMat,
    pub grad: &'a DVec,
    pub a_eq: &'a DMat,
    pub c_eq: &'a DVec,
    pub a_in: &'a DMat,
    pub c_in: &'a DVec,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub step: DVec,
    pub eq_mult: DVec,
    /// Nonnegative; zero off the final working set.
    pub ineq_mult: DVec,
    pub working: Vec<usize>,
    pub elastic: bool,
}

/// LU factorization of `[[H, A^T], [A, -delta I]]` with iterative refinement
/// against the unregularized system.
struct KktSolver {
    lu: faer::linalg::solvers::PartialPivLu<f64>,
    k0: faer::Mat<f64>,
    n: usize,
}

impl KktSolver {
    fn factor(h: &DMat, a_eq: &DMat) -> Result<Self> {
        let (dim, n_eq) = (h.nrows(), a_eq.nrows());
        let n = dim + n_eq;
        let mut k0 = faer::Mat::<f64>::zeros(n, n);
        for j in 0..dim {
            for i in 0..dim {
                let v = h[(i, j)];
                if v != 0.0 {
                    k0[(i, j)] = v;
                }
            }
        }
        for r in 0..n_eq {
            for c in 0..dim {
                let v = a_eq[(r, c)];
                if v != 0.0 {
                    k0[(dim + r, c)] = v;
                    k0[(c, dim + r)] = v;
                }
            }
        }
        let scale = h.amax().max(a_eq.amax()).max(1.0);
        for delta in [0.0, 1e-12, 1e-10, 1e-8] {
            let mut k = k0.clone();
            if delta > 0.0 {
                let d = delta * scale;
                for i in 0..dim {
                    k[(i, i)] += d;
                }
                for i in dim..n {
                    k[(i, i)] -= d;
                }
            }
            let lu = k.partial_piv_lu();
            let solver = Self { lu, k0: k0.clone(), n };
            // probe solve quality against the unregularized system
            let probe = DVec::from_fn(n, |i, _| 1.0 + (i % 7) as f64);
            let z = solver.solve(&probe);
            let mut res: f64 = 0.0;
            for i in 0..n {
                let mut kz = 0.0;
                for j in 0..n {
                    kz += solver.k0[(i, j)] * z[j];
                }
                res = res.max((kz - probe[i]).abs());
            }
            if z.iter().all(|v| v.is_finite()) && res <= 1e-8 * probe.amax().max(1.0) {
                return Ok(solver);
            }
        }
        Err(Error::DegenerateConstraints(
            "KKT matrix is numerically singular".into(),
        ))
    }

    /// Solve against the unregularized KKT matrix with one refinement step.
    fn solve(&self, rhs: &DVec) -> DVec {
        let b = faer::Mat::<f64>::from_fn(self.n, 1, |i, _| rhs[i]);
        let mut z = self.lu.solve(&b);
        // one step of iterative refinement
        let r = &b - &self.k0 * &z;
        let dz = self.lu.solve(&r);
        z += &dz;
        DVec::from_fn(self.n, |i, _| z[(i, 0)])
    }
}

/// Primal-feasibility-driven working-set loop on the bordered KKT system.
pub fn solve_qp(qp: &QpProblem, warm_working: &[usize], tol: f64) -> Result<QpSolution> {
    match solve_qp_inner(qp, warm_working, tol) {
        Ok(sol) => Ok(sol),
        Err(_) => solve_qp_elastic(qp, warm_working, tol),
    }
}

fn solve_qp_inner(qp: &QpProblem, warm_working: &[usize], tol: f64) -> Result<QpSolution> {
    let dim = qp.h.nrows();
    let n_eq = qp.a_eq.nrows();
    let n_in = qp.a_in.nrows();
    let kkt = KktSolver::factor(qp.h, qp.a_eq)?;

    // base solution: K [d; -lambda] = [-g; -c_eq]
    let mut rhs0 = DVec::zeros(dim + n_eq);
    for i in 0..dim {
        rhs0[i] = -qp.grad[i];
    }
    for i in 0..n_eq {
        rhs0[dim + i] = -qp.c_eq[i];
    }
    let z0 = kkt.solve(&rhs0);

    // border columns, cached per inequality row
    let mut border: Vec<Option<DVec>> = vec![None; n_in];
    let mut border_col = |w: usize| -> DVec {
        if border[w].is_none() {
            let mut rhs = DVec::zeros(dim + n_eq);
            for c in 0..dim {
                rhs[c] = qp.a_in[(w, c)];
            }
            border[w] = Some(kkt.solve(&rhs));
        }
        border[w].clone().unwrap()
    };

    let mut working: Vec<usize> = warm_working
        .iter()
        .copied()
        .filter(|&w| w < n_in)
        .collect();
    working.sort_unstable();
    working.dedup();

    let mut add_count = vec![0usize; n_in];
    let max_pivots = 20 + 4 * n_in;

    for _ in 0..max_pivots {
        // Schur system over the working set
        let nw = working.len();
        let mut mu_w = DVec::zeros(nw);
        if nw > 0 {
            let cols: Vec<DVec> = working.iter().map(|&w| border_col(w)).collect();
            let mut s = DMat::zeros(nw, nw);
            let mut rhs = DVec::zeros(nw);
            for (r, &v) in working.iter().enumerate() {
                let mut av_d0 = 0.0;
                for c in 0..dim {
                    av_d0 += qp.a_in[(v, c)] * z0[c];
                }
                rhs[r] = -(qp.c_in[v] + av_d0);
                for (cidx, col) in cols.iter().enumerate() {
                    let mut av_dw = 0.0;
                    for c in 0..dim {
                        av_dw += qp.a_in[(v, c)] * col[c];
                    }
                    s[(r, cidx)] = av_dw;
                }
            }
            match s.lu().solve(&rhs) {
                Some(sol) => mu_w = sol,
                None => {
                    // dependent working row; drop the newest and retry
                    working.pop();
                    continue;
                }
            }
        }

        // most negative multiplier leaves the working set
        if nw > 0 {
            let (mut worst, mut worst_idx) = (0.0f64, usize::MAX);
            for (k, &m) in mu_w.iter().enumerate() {
                if m < worst {
                    worst = m;
                    worst_idx = k;
                }
            }
            if worst < -tol {
                working.remove(worst_idx);
                continue;
            }
        }

        // assemble the candidate step
        let mut z = z0.clone();
        for (k, &w) in working.iter().enumerate() {
            let col = border_col(w);
            z.axpy(mu_w[k], &col, 1.0);
        }
        let step = z.rows(0, dim).into_owned();

        // most violated non-working row enters
        let mut worst = -tol;
        let mut entering = None;
        for i in 0..n_in {
            if working.contains(&i) {
                continue;
            }
            let mut v = qp.c_in[i];
            for c in 0..dim {
                v += qp.a_in[(i, c)] * step[c];
            }
            if v < worst {
                worst = v;
                entering = Some(i);
            }
        }
        if let Some(i) = entering {
            add_count[i] += 1;
            if add_count[i] > 3 {
                return Err(Error::Evaluation("QP working-set cycling".into()));
            }
            working.push(i);
            continue;
        }

        // optimal
        let mut eq_mult = DVec::zeros(n_eq);
        for i in 0..n_eq {
            eq_mult[i] = -z[dim + i];
        }
        let mut ineq_mult = DVec::zeros(n_in);
        for (k, &w) in working.iter().enumerate() {
            ineq_mult[w] = mu_w[k].max(0.0);
        }
        return Ok(QpSolution {
            step,
            eq_mult,
            ineq_mult,
            working,
            elastic: false,
        });
    }
    Err(Error::Evaluation("QP working-set iteration limit".into()))
}

/// l1 relaxation of the inequality rows: slack variables `w >= 0` with cost
/// `rho * sum w` keep the subproblem feasible.
fn solve_qp_elastic(qp: &QpProblem, warm_working: &[usize], tol: f64) -> Result<QpSolution> {
    let dim = qp.h.nrows();
    let n_eq = qp.a_eq.nrows();
    let n_in = qp.a_in.nrows();
    if n_in == 0 {
        return Err(Error::Evaluation(
            "inequality-free QP failed; no elastic relaxation applies".into(),
        ));
    }
    let rho = ELASTIC_PENALTY_DEFAULT;
    let dim_x = dim + n_in;

    let mut h = DMat::zeros(dim_x, dim_x);
    h.view_mut((0, 0), (dim, dim)).copy_from(qp.h);
    for i in dim..dim_x {
        h[(i, i)] = 1.0;
    }
    let mut grad = DVec::zeros(dim_x);
    grad.rows_mut(0, dim).copy_from(qp.grad);
    for i in dim..dim_x {
        grad[i] = rho;
    }
    let mut a_eq = DMat::zeros(n_eq, dim_x);
    a_eq.view_mut((0, 0), (n_eq, dim)).copy_from(qp.a_eq);

    // relaxed rows a_i d + w_i + c_i >= 0, plus bounds w >= 0
    let mut a_in = DMat::zeros(2 * n_in, dim_x);
    let mut c_in = DVec::zeros(2 * n_in);
    for i in 0..n_in {
        for c in 0..dim {
            a_in[(i, c)] = qp.a_in[(i, c)];
        }
        a_in[(i, dim + i)] = 1.0;
        c_in[i] = qp.c_in[i];
        a_in[(n_in + i, dim + i)] = 1.0;
    }

    let relaxed = QpProblem {
        h: &h,
        grad: &grad,
        a_eq: &a_eq,
        c_eq: qp.c_eq,
        a_in: &a_in,
        c_in: &c_in,
    };
    let sol = solve_qp_inner(&relaxed, warm_working, tol)?;
    let step = sol.step.rows(0, dim).into_owned();
    let mut ineq_mult = DVec::zeros(n_in);
    for &w in &sol.working {
        if w < n_in {
            ineq_mult[w] = sol.ineq_mult[w];
        }
    }
    Ok(QpSolution {
        step,
        eq_mult: sol.eq_mult,
        ineq_mult,
        working: sol.working.into_iter().filter(|&w| w < n_in).collect(),
        elastic: true,
    })
}

pub(crate) const ELASTIC_PENALTY_DEFAULT: f64 = 1e3;

/// Independent KKT check of a QP solution: returns the infinity norms of
/// stationarity, constraint violation, and complementarity.
pub fn verify_qp_kkt(qp: &QpProblem, sol: &QpSolution) -> (f64, f64, f64) {
    let stat = qp.h * &sol.step + qp.grad
        - qp.a_eq.transpose() * &sol.eq_mult
        - qp.a_in.transpose() * &sol.ineq_mult;
    let stat_inf = if stat.is_empty() { 0.0 } else { stat.amax() };

    let eq_res = qp.a_eq * &sol.step + qp.c_eq;
    let mut feas = if eq_res.is_empty() { 0.0 } else { eq_res.amax() };
    let in_res = qp.a_in * &sol.step + qp.c_in;
    let mut compl = 0.0f64;
    for i in 0..in_res.len() {
        feas = feas.max(-in_res[i].min(0.0));
        compl = compl.max((sol.ineq_mult[i] * in_res[i]).abs());
    }
    (stat_inf, feas, compl)
}
