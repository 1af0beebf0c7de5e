//! Dense linear-algebra utilities shared by all modules: rank estimation,
//! orthonormal nullspace extraction, and a finite-difference Jacobian used as
//! the derivative oracle throughout the test suites.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub type DMat = DMatrix<f64>;
pub type DVec = DVector<f64>;

/// Default relative threshold for singular-value rank decisions.
pub const RANK_REL_TOL: f64 = 1e-10;

/// Default central-difference step on unit-scaled variables.
pub const FD_STEP: f64 = 1e-6;

/// Outcome of a singular-value rank estimate.
#[derive(Debug, Clone)]
pub struct RankReport {
    pub estimated_rank: usize,
    /// Singular values sorted nonincreasing.
    pub singular_values: Vec<f64>,
    /// Relative threshold: values above `tolerance * max_singular_value` count.
    pub tolerance: f64,
}

fn all_finite(m: &DMat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Estimates the rank of `m` from its singular values with a relative cutoff.
pub fn rank_estimate(m: &DMat, rel_tol: f64) -> Result<RankReport> {
    if m.is_empty() {
        return Err(Error::InvalidInput("rank_estimate: empty matrix".into()));
    }
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::InvalidInput(format!(
            "rank_estimate: rel_tol {rel_tol} outside (0, 1)"
        )));
    }
    if !all_finite(m) {
        return Err(Error::NonFiniteInput);
    }
    let mut sv: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    let cutoff = rel_tol * sv[0];
    let estimated_rank = sv.iter().take_while(|&&s| s > cutoff).count();
    Ok(RankReport {
        estimated_rank,
        singular_values: sv,
        tolerance: rel_tol,
    })
}

/// Householder QR of `a` (rows >= cols) with the full square Q accumulated.
///
/// Returns `(q, r)` with `q` orthogonal `rows x rows` and `r` upper triangular
/// in its leading `cols` columns, `a = q * r`.
pub fn householder_qr_full(a: &DMat) -> (DMat, DMat) {
    let (k, m) = a.shape();
    assert!(k >= m, "householder_qr_full expects rows >= cols");
    let mut r = a.clone();
    // Reflector vectors; an empty vector marks a skipped (already zero) column.
    let mut vs: Vec<DVec> = Vec::with_capacity(m);

    for j in 0..m {
        let norm_x = r.view((j, j), (k - j, 1)).norm();
        if norm_x <= f64::MIN_POSITIVE {
            vs.push(DVec::zeros(0));
            continue;
        }
        let mut v = DVec::zeros(k);
        let alpha = -r[(j, j)].signum() * norm_x;
        v[j] = r[(j, j)] - alpha;
        for i in (j + 1)..k {
            v[i] = r[(i, j)];
        }
        let vn2 = v.norm_squared();
        if vn2 <= f64::MIN_POSITIVE {
            vs.push(DVec::zeros(0));
            continue;
        }
        for c in j..m {
            let mut col = r.column_mut(c);
            let w = 2.0 * v.dot(&col) / vn2;
            col.axpy(-w, &v, 1.0);
        }
        vs.push(v);
    }

    let mut q = DMat::identity(k, k);
    for j in (0..m).rev() {
        let v = &vs[j];
        if v.is_empty() {
            continue;
        }
        let vn2 = v.norm_squared();
        for c in 0..k {
            let mut col = q.column_mut(c);
            let w = 2.0 * v.dot(&col) / vn2;
            col.axpy(-w, v, 1.0);
        }
    }
    (q, r)
}

/// Orthonormal basis of the nullspace of a full-row-rank matrix.
///
/// For `m` of shape `r x k` the result `n` has shape `k x (k - r)` and
/// satisfies `m * n = 0` and `n^T n = I`. A constraint-free input (zero rows)
/// yields the `k x k` identity.
pub fn orthonormal_nullspace(m: &DMat) -> Result<DMat> {
    let (rows, cols) = m.shape();
    if rows == 0 {
        return Ok(DMat::identity(cols, cols));
    }
    if !all_finite(m) {
        return Err(Error::NonFiniteInput);
    }
    if rows > cols {
        return Err(Error::DegenerateConstraints(format!(
            "{rows} constraints in {cols} variables cannot have full row rank"
        )));
    }
    let (q, r) = householder_qr_full(&m.transpose());
    let mut diag_max: f64 = 0.0;
    for j in 0..rows {
        diag_max = diag_max.max(r[(j, j)].abs());
    }
    for j in 0..rows {
        if r[(j, j)].abs() <= RANK_REL_TOL * diag_max {
            return Err(Error::DegenerateConstraints(format!(
                "row rank deficiency detected at pivot {j}"
            )));
        }
    }
    Ok(q.columns(rows, cols - rows).into_owned())
}

/// Central-difference Jacobian of `f` at `x` with step `h`:
/// entry `(i, j) = (f_i(x + h e_j) - f_i(x - h e_j)) / (2 h)`.
pub fn fd_jacobian<F>(f: F, x: &DVec, h: f64) -> Result<DMat>
where
    F: Fn(&DVec) -> DVec,
{
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("fd_jacobian: step {h} <= 0")));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let f0 = f(x);
    if !f0.iter().all(|v| v.is_finite()) {
        return Err(Error::Evaluation("fd_jacobian: f(x) is non-finite".into()));
    }
    let (m, n) = (f0.len(), x.len());
    let mut jac = DMat::zeros(m, n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for j in 0..n {
        xp[j] = x[j] + h;
        xm[j] = x[j] - h;
        let fp = f(&xp);
        let fm = f(&xm);
        if !fp.iter().all(|v| v.is_finite()) || !fm.iter().all(|v| v.is_finite()) {
            return Err(Error::Evaluation(format!(
                "fd_jacobian: non-finite perturbation at column {j}"
            )));
        }
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
        xp[j] = x[j];
        xm[j] = x[j];
    }
    Ok(jac)
}

/// Relative infinity-norm discrepancy `|a - b|_inf / (1 + |b|_inf)`.
pub fn rel_inf_diff(a: &DMat, b: &DMat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = (a - b).amax();
    let scale = if b.is_empty() { 0.0 } else { b.amax() };
    diff / (1.0 + scale)
}

/// Deterministic splitmix64 stream; used where tests and diagnostics need
/// reproducible pseudo-random data without pulling in an RNG dependency.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[-1, 1)`.
    pub fn next_symmetric(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_of_identity() {
        let r = rank_estimate(&DMat::identity(3, 3), 1e-10).unwrap();
        assert_eq!(r.estimated_rank, 3);
        assert_eq!(r.singular_values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn rank_of_duplicated_rows() {
        let m = DMat::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        let r = rank_estimate(&m, 1e-10).unwrap();
        assert_eq!(r.estimated_rank, 1);
    }

    #[test]
    fn rank_rejects_non_finite() {
        let m = DMat::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(matches!(
            rank_estimate(&m, 1e-10),
            Err(Error::NonFiniteInput)
        ));
    }

    #[test]
    fn rank_of_printed_rod_jacobian() {
        // The 4x6 system Jacobian of the linear rod example, as displayed.
        let m = DMat::from_row_slice(
            4,
            6,
            &[
                1.0, 0.0, 0.0, 0.0, 0.0, 0.0, //
                -1.0, 1.0, -1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, 0.0, -1.0,
            ],
        );
        assert_eq!(rank_estimate(&m, 1e-10).unwrap().estimated_rank, 4);
    }

    #[test]
    fn nullspace_of_single_row() {
        let m = DMat::from_row_slice(1, 2, &[1.0, 0.0]);
        let n = orthonormal_nullspace(&m).unwrap();
        assert_eq!(n.shape(), (2, 1));
        assert!(n[(0, 0)].abs() < 1e-14);
        assert!((n[(1, 0)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn nullspace_of_no_constraints_is_identity() {
        let m = DMat::zeros(0, 4);
        let n = orthonormal_nullspace(&m).unwrap();
        assert_eq!(n, DMat::identity(4, 4));
    }

    #[test]
    fn nullspace_postconditions_on_random_wide_matrix() {
        let mut rng = SplitMix64::new(7);
        let m = DMat::from_fn(6, 12, |_, _| rng.next_symmetric());
        let n = orthonormal_nullspace(&m).unwrap();
        assert_eq!(n.shape(), (12, 6));
        assert!((&m * &n).amax() <= 1e-12 * m.amax().max(1.0));
        assert!((n.transpose() * &n - DMat::identity(6, 6)).amax() <= 1e-12);
    }

    #[test]
    fn nullspace_rejects_rank_deficient() {
        let m = DMat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(matches!(
            orthonormal_nullspace(&m),
            Err(Error::DegenerateConstraints(_))
        ));
    }

    #[test]
    fn fd_jacobian_of_identity_map() {
        let x = DVec::from_vec(vec![0.3, -1.2, 4.0]);
        let j = fd_jacobian(|v| v.clone(), &x, 1e-6).unwrap();
        assert!((j - DMat::identity(3, 3)).amax() <= 1e-9);
    }

    #[test]
    fn fd_jacobian_of_square() {
        let x = DVec::from_vec(vec![3.0]);
        let j = fd_jacobian(|v| DVec::from_vec(vec![v[0] * v[0]]), &x, 1e-5).unwrap();
        assert!((j[(0, 0)] - 6.0).abs() <= 1e-8);
    }

    #[test]
    fn fd_jacobian_propagates_non_finite() {
        let x = DVec::from_vec(vec![0.0]);
        let res = fd_jacobian(|v| DVec::from_vec(vec![1.0 / v[0]]), &x, 1e-6);
        assert!(matches!(res, Err(Error::Evaluation(_))));
    }
}
