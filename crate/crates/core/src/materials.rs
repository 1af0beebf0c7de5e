//! Voigt-notation packing, the two benchmark constitutive laws with their
//! Jacobians, and composition of the system-level constitutive residual.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::numerics::{DMat, DVec};
use crate::{Error, Result};

/// Number of Voigt components per tensor dimension `d = 1, 2, 3`.
pub const VOIGT_LEN: [usize; 3] = [1, 3, 6];

/// Packs a symmetric `d x d` tensor into a Voigt vector.
///
/// Orderings: `d = 1`: `(e11)`; `d = 2`: `(e11, e22, e21)`;
/// `d = 3`: `(e11, e22, e33, e32, e31, e21)`. No shear scaling is applied.
pub fn voigt_pack(e: &DMat) -> Result<DVec> {
    let d = e.nrows();
    if e.ncols() != d || !(1..=3).contains(&d) {
        return Err(Error::InvalidInput(format!(
            "voigt_pack: expected square tensor of dimension 1..3, got {}x{}",
            e.nrows(),
            e.ncols()
        )));
    }
    let scale = e.amax().max(1.0);
    for i in 0..d {
        for j in (i + 1)..d {
            if (e[(i, j)] - e[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::InvalidInput(format!(
                    "voigt_pack: tensor not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let v = match d {
        1 => vec![e[(0, 0)]],
        2 => vec![e[(0, 0)], e[(1, 1)], e[(1, 0)]],
        _ => vec![
            e[(0, 0)],
            e[(1, 1)],
            e[(2, 2)],
            e[(2, 1)],
            e[(2, 0)],
            e[(1, 0)],
        ],
    };
    Ok(DVec::from_vec(v))
}

/// Inverse of [`voigt_pack`]; the tensor dimension is inferred from the length.
pub fn voigt_unpack(v: &DVec) -> Result<DMat> {
    match v.len() {
        1 => Ok(DMat::from_row_slice(1, 1, &[v[0]])),
        3 => Ok(DMat::from_row_slice(2, 2, &[v[0], v[2], v[2], v[1]])),
        6 => Ok(DMat::from_row_slice(
            3,
            3,
            &[
                v[0], v[5], v[4], //
                v[5], v[1], v[3], //
                v[4], v[3], v[2],
            ],
        )),
        n => Err(Error::InvalidInput(format!(
            "voigt_unpack: length {n} is not a Voigt vector length"
        ))),
    }
}

/// A constitutive law on one evaluation point: residual `g(e, s)` with the
/// partial Jacobians `G1 = dg/de` and `G2 = dg/ds`.
pub trait ConstitutiveLaw: Send + Sync {
    /// Strain/stress vector length at one evaluation point.
    fn point_dim(&self) -> usize;
    fn residual(&self, e: &[f64], s: &[f64]) -> DVec;
    fn jacobians(&self, e: &[f64], s: &[f64]) -> (DMat, DMat);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaterialKind {
    /// `g(e, s) = s - A e - (1/3) A e^3` (explicit stress, componentwise cube).
    SymmetricExplicit,
    /// `g(e, s) = e - A^-1 s - 0.0075 A^-1 s^2` (implicit stress).
    AsymmetricImplicit,
}

/// Diagonal stiffness of the benchmark laws: shear, shear, axial in N and
/// the three moment stiffnesses in N m^2.
pub const BENCHMARK_STIFFNESS: [f64; 6] = [75.0, 75.0, 100.0, 100.0, 100.0, 200.0];

/// One of the two built-in six-component beam material laws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialLaw {
    pub kind: MaterialKind,
    /// Diagonal of the positive 6x6 stiffness matrix `A`.
    pub a_diag: [f64; 6],
}

impl MaterialLaw {
    pub fn new(kind: MaterialKind, a_diag: [f64; 6]) -> Result<Self> {
        if a_diag.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::InvalidInput(
                "material stiffness diagonal must be positive".into(),
            ));
        }
        Ok(Self { kind, a_diag })
    }

    pub fn symmetric() -> Self {
        Self {
            kind: MaterialKind::SymmetricExplicit,
            a_diag: BENCHMARK_STIFFNESS,
        }
    }

    pub fn asymmetric() -> Self {
        Self {
            kind: MaterialKind::AsymmetricImplicit,
            a_diag: BENCHMARK_STIFFNESS,
        }
    }

    /// Solves `g(e, s) = 0` for the stress at a given strain.
    ///
    /// Explicit for the symmetric law; for the asymmetric law the componentwise
    /// quadratic is solved on the branch through the origin.
    pub fn stress_for_strain(&self, e: &[f64]) -> DVec {
        assert_eq!(e.len(), 6);
        let mut s = DVec::zeros(6);
        for i in 0..6 {
            let a = self.a_diag[i];
            match self.kind {
                MaterialKind::SymmetricExplicit => {
                    s[i] = a * e[i] + a * e[i].powi(3) / 3.0;
                }
                MaterialKind::AsymmetricImplicit => {
                    // 0.0075 s^2 + s - a e = 0, root continuous at e = 0
                    let disc = (1.0 + 0.03 * a * e[i]).max(0.0);
                    s[i] = (-1.0 + disc.sqrt()) / 0.015;
                }
            }
        }
        s
    }
}

impl ConstitutiveLaw for MaterialLaw {
    fn point_dim(&self) -> usize {
        6
    }

    fn residual(&self, e: &[f64], s: &[f64]) -> DVec {
        debug_assert_eq!(e.len(), 6);
        debug_assert_eq!(s.len(), 6);
        let mut g = DVec::zeros(6);
        for i in 0..6 {
            let a = self.a_diag[i];
            g[i] = match self.kind {
                MaterialKind::SymmetricExplicit => s[i] - a * e[i] - a * e[i].powi(3) / 3.0,
                MaterialKind::AsymmetricImplicit => e[i] - s[i] / a - 0.0075 * s[i] * s[i] / a,
            };
        }
        g
    }

    fn jacobians(&self, e: &[f64], s: &[f64]) -> (DMat, DMat) {
        let mut g1 = DMat::zeros(6, 6);
        let mut g2 = DMat::zeros(6, 6);
        for i in 0..6 {
            let a = self.a_diag[i];
            match self.kind {
                MaterialKind::SymmetricExplicit => {
                    g1[(i, i)] = -a * (1.0 + e[i] * e[i]);
                    g2[(i, i)] = 1.0;
                }
                MaterialKind::AsymmetricImplicit => {
                    g1[(i, i)] = 1.0;
                    g2[(i, i)] = -(1.0 + 0.015 * s[i]) / a;
                }
            }
        }
        (g1, g2)
    }
}

/// System-level constitutive residual: one law per evaluation point, stacked
/// in point order. Each built-in law carries an identity Jacobian block, so
/// the stacked Jacobian `[G1 G2]` has full row rank.
#[derive(Clone)]
pub struct SystemLaw {
    laws: Vec<Arc<dyn ConstitutiveLaw>>,
    assignment: Vec<usize>,
    offsets: Vec<usize>,
    n_e: usize,
}

impl SystemLaw {
    pub fn new(laws: Vec<Arc<dyn ConstitutiveLaw>>, assignment: Vec<usize>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(assignment.len() + 1);
        let mut n_e = 0;
        offsets.push(0);
        for (point, &law_idx) in assignment.iter().enumerate() {
            let law = laws.get(law_idx).ok_or_else(|| {
                Error::Config(format!(
                    "point {point} assigned to missing material {law_idx}"
                ))
            })?;
            n_e += law.point_dim();
            offsets.push(n_e);
        }
        Ok(Self {
            laws,
            assignment,
            offsets,
            n_e,
        })
    }

    /// Every point gets the same law.
    pub fn uniform(law: Arc<dyn ConstitutiveLaw>, n_points: usize) -> Self {
        Self::new(vec![law], vec![0; n_points]).expect("uniform assignment is consistent")
    }

    pub fn n_e(&self) -> usize {
        self.n_e
    }

    pub fn n_points(&self) -> usize {
        self.assignment.len()
    }

    pub fn residual(&self, e_sys: &DVec, s_sys: &DVec) -> DVec {
        assert_eq!(e_sys.len(), self.n_e);
        assert_eq!(s_sys.len(), self.n_e);
        let mut g = DVec::zeros(self.n_e);
        for (point, &law_idx) in self.assignment.iter().enumerate() {
            let (lo, hi) = (self.offsets[point], self.offsets[point + 1]);
            let gp = self.laws[law_idx].residual(&e_sys.as_slice()[lo..hi], &s_sys.as_slice()[lo..hi]);
            g.rows_mut(lo, hi - lo).copy_from(&gp);
        }
        g
    }

    /// Block-diagonal `(G1, G2)` of the stacked residual.
    pub fn jacobians(&self, e_sys: &DVec, s_sys: &DVec) -> (DMat, DMat) {
        let mut g1 = DMat::zeros(self.n_e, self.n_e);
        let mut g2 = DMat::zeros(self.n_e, self.n_e);
        for (point, &law_idx) in self.assignment.iter().enumerate() {
            let (lo, hi) = (self.offsets[point], self.offsets[point + 1]);
            let (b1, b2) = self.laws[law_idx]
                .jacobians(&e_sys.as_slice()[lo..hi], &s_sys.as_slice()[lo..hi]);
            g1.view_mut((lo, lo), (hi - lo, hi - lo)).copy_from(&b1);
            g2.view_mut((lo, lo), (hi - lo, hi - lo)).copy_from(&b2);
        }
        (g1, g2)
    }
}

/// Passive container for per-material strain-stress data sets; the overall
/// set is the cartesian product over evaluation points.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MaterialDataSet {
    pub material_id: String,
    /// Each point is a pair `[e, s]` of equally sized Voigt vectors.
    pub points: Vec<[Vec<f64>; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct DataSetSpec {
    pub materials: Vec<MaterialDataSet>,
}

impl DataSetSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let materials: Vec<MaterialDataSet> = serde_json::from_str(text)?;
        let spec = Self { materials };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.materials)?)
    }

    pub fn validate(&self) -> Result<()> {
        for mat in &self.materials {
            let mut dim = None;
            for (k, [e, s]) in mat.points.iter().enumerate() {
                if e.len() != s.len() || !VOIGT_LEN.contains(&e.len()) {
                    return Err(Error::InvalidInput(format!(
                        "data set {}: point {k} has lengths {}/{}",
                        mat.material_id,
                        e.len(),
                        s.len()
                    )));
                }
                match dim {
                    None => dim = Some(e.len()),
                    Some(d) if d != e.len() => {
                        return Err(Error::InvalidInput(format!(
                            "data set {}: mixed point dimensions",
                            mat.material_id
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// Builds the matrix `A` of a law as a dense 6x6 diagonal.
pub fn stiffness_matrix(law: &MaterialLaw) -> DMat {
    DMatrix::from_diagonal(&DVec::from_row_slice(&law.a_diag))
}
