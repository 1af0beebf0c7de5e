//! Geometrically exact beam on a circular reference arc: configuration
//! vector, kinematic constraints with their analytic nullspace, discrete
//! strain measures with exact Jacobians, nodal forces, and the geometric
//! contact constraints.
//!
//! Conventions: the reference arc lies in the horizontal x-y plane, the
//! vertical axis is z (third position component, the loading direction), and
//! node blocks are `(position, d1, d2, d3)` of 12 coordinates each. Both end
//! nodes are fully fixed.

use nalgebra::Vector3;

use crate::numerics::{self, DMat, DVec, RankReport, SplitMix64};
use crate::{Error, Result};

/// Coordinates per node: position plus three directors.
pub const NODE_DIM: usize = 12;
/// Strain components per element: three translational, three rotational.
pub const STRAINS_PER_ELEMENT: usize = 6;

/// Reference geometry of the circular-arc beam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamGeometry {
    /// Total arc length in meters.
    pub arc_length: f64,
    /// Number of uniform two-node elements.
    pub n_elements: usize,
    /// Swept angle of the reference arc in radians.
    pub arc_fraction: f64,
}

impl Default for BeamGeometry {
    fn default() -> Self {
        Self {
            arc_length: 1.0,
            n_elements: 20,
            arc_fraction: std::f64::consts::FRAC_PI_2,
        }
    }
}

impl BeamGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.n_elements < 1 {
            return Err(Error::InvalidInput("n_elements must be >= 1".into()));
        }
        if !(self.arc_length > 0.0) || !(self.arc_fraction > 0.0) {
            return Err(Error::InvalidInput(
                "arc_length and arc_fraction must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.n_elements + 1
    }

    /// Element length in the arc-length parameter.
    pub fn element_length(&self) -> f64 {
        self.arc_length / self.n_elements as f64
    }

    pub fn radius(&self) -> f64 {
        self.arc_length / self.arc_fraction
    }
}

/// Full coordinate vector of nodal `(position, d1, d2, d3)` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration(pub DVec);

impl Configuration {
    pub fn n_nodes(&self) -> usize {
        self.0.len() / NODE_DIM
    }

    pub fn position(&self, node: usize) -> Vector3<f64> {
        self.block(node, 0)
    }

    /// Director `k` in `1..=3` at `node`.
    pub fn director(&self, node: usize, k: usize) -> Vector3<f64> {
        debug_assert!((1..=3).contains(&k));
        self.block(node, 3 * k)
    }

    fn block(&self, node: usize, offset: usize) -> Vector3<f64> {
        let base = NODE_DIM * node + offset;
        Vector3::new(self.0[base], self.0[base + 1], self.0[base + 2])
    }
}

/// Per-element reference strain offsets making `e(q_ref) = 0` exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStrains {
    /// `(Gamma0, K0)` stacked as six values per element.
    pub per_element: Vec<[f64; 6]>,
}

/// Lower bounds on the vertical coordinate of selected inner nodes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ContactSpec {
    entries: Vec<(usize, f64)>,
}

impl ContactSpec {
    pub fn new(entries: Vec<(usize, f64)>, geometry: &BeamGeometry) -> Result<Self> {
        let last = geometry.n_nodes() - 1;
        let mut prev = None;
        for &(node, _) in &entries {
            if node == 0 || node >= last {
                return Err(Error::InvalidInput(format!(
                    "contact node {node} is boundary-fixed"
                )));
            }
            if let Some(p) = prev {
                if node <= p {
                    return Err(Error::InvalidInput(
                        "contact nodes must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(node);
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self { entries: vec![] }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn node(&self, entry: usize) -> usize {
        self.entries[entry].0
    }

    pub fn lower_bound(&self, entry: usize) -> f64 {
        self.entries[entry].1
    }
}

/// Nodal force vectors with a scalar amplification factor.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ForceProfile {
    /// Base force per node in Newtons.
    pub nodal: Vec<[f64; 3]>,
    /// Amplification `gamma`; the effective load is `gamma * nodal`.
    pub gamma: f64,
}

impl ForceProfile {
    pub fn zero(n_nodes: usize) -> Self {
        Self {
            nodal: vec![[0.0; 3]; n_nodes],
            gamma: 1.0,
        }
    }

    pub fn validate(&self, geometry: &BeamGeometry) -> Result<()> {
        if self.nodal.len() != geometry.n_nodes() {
            return Err(Error::InvalidInput(format!(
                "force profile has {} nodes, beam has {}",
                self.nodal.len(),
                geometry.n_nodes()
            )));
        }
        let last = geometry.n_nodes() - 1;
        for (i, f) in self.nodal.iter().enumerate() {
            if (i == 0 || i == last) && f.iter().any(|&c| c != 0.0) {
                return Err(Error::InvalidInput(format!(
                    "force at fixed boundary node {i} must be zero"
                )));
            }
        }
        Ok(())
    }

    /// Assembles the amplified load vector of length `n_q`.
    pub fn assemble(&self, n_q: usize) -> DVec {
        let mut f = DVec::zeros(n_q);
        for (i, fi) in self.nodal.iter().enumerate() {
            for k in 0..3 {
                f[NODE_DIM * i + k] = self.gamma * fi[k];
            }
        }
        f
    }
}

/// Minimal evaluation interface needed by the rank diagnostics, implemented
/// by the beam and by the rod examples.
pub trait KinematicModel {
    fn n_q(&self) -> usize;
    fn dof(&self) -> usize;
    fn nullspace_at(&self, q: &DVec) -> DMat;
    fn strain_jacobian_at(&self, q: &DVec) -> DMat;
}

/// The assembled beam model: geometry plus the stress-free reference state.
#[derive(Debug, Clone)]
pub struct Beam {
    geometry: BeamGeometry,
    q_ref: Configuration,
    ref_strains: ReferenceStrains,
}

/// Builds the reference configuration on the circular arc and the strain
/// offsets that zero every discrete strain component there.
pub fn build_reference(geometry: &BeamGeometry) -> Result<(Configuration, ReferenceStrains)> {
    geometry.validate()?;
    let n_nodes = geometry.n_nodes();
    let radius = geometry.radius();
    let dtheta = geometry.arc_fraction / geometry.n_elements as f64;

    let mut q = DVec::zeros(NODE_DIM * n_nodes);
    for i in 0..n_nodes {
        let theta = i as f64 * dtheta;
        let (sin, cos) = theta.sin_cos();
        let base = NODE_DIM * i;
        // position on the arc, starting at the origin
        q[base] = radius * sin;
        q[base + 1] = radius * (1.0 - cos);
        q[base + 2] = 0.0;
        // d1 = d2 x d3, d2 = vertical axis, d3 = unit tangent
        q[base + 3] = -sin;
        q[base + 4] = cos;
        q[base + 5] = 0.0;
        q[base + 6] = 0.0;
        q[base + 7] = 0.0;
        q[base + 8] = 1.0;
        q[base + 9] = cos;
        q[base + 10] = sin;
        q[base + 11] = 0.0;
    }
    let config = Configuration(q);
    let mut per_element = Vec::with_capacity(geometry.n_elements);
    for elem in 0..geometry.n_elements {
        per_element.push(raw_element_strains(&config, elem, geometry.element_length()));
    }
    Ok((config, ReferenceStrains { per_element }))
}

/// Raw (un-offset) strain components of one element.
fn raw_element_strains(q: &Configuration, elem: usize, ell: f64) -> [f64; 6] {
    let (a, b) = (elem, elem + 1);
    let x_prime = (q.position(b) - q.position(a)) / ell;
    let d_mid = [
        (q.director(a, 1) + q.director(b, 1)) * 0.5,
        (q.director(a, 2) + q.director(b, 2)) * 0.5,
        (q.director(a, 3) + q.director(b, 3)) * 0.5,
    ];
    let d_prime = [
        (q.director(b, 1) - q.director(a, 1)) / ell,
        (q.director(b, 2) - q.director(a, 2)) / ell,
        (q.director(b, 3) - q.director(a, 3)) / ell,
    ];
    let mut out = [0.0; 6];
    for i in 0..3 {
        out[i] = x_prime.dot(&d_mid[i]);
    }
    // rotational strains, cyclic (i, j, k)
    for i in 0..3 {
        let j = (i + 1) % 3;
        let k = (i + 2) % 3;
        out[3 + i] = 0.5 * (d_prime[j].dot(&d_mid[k]) - d_prime[k].dot(&d_mid[j]));
    }
    out
}

impl Beam {
    pub fn new(geometry: BeamGeometry) -> Result<Self> {
        let (q_ref, ref_strains) = build_reference(&geometry)?;
        Ok(Self {
            geometry,
            q_ref,
            ref_strains,
        })
    }

    pub fn geometry(&self) -> &BeamGeometry {
        &self.geometry
    }

    pub fn reference(&self) -> &Configuration {
        &self.q_ref
    }

    pub fn reference_strains(&self) -> &ReferenceStrains {
        &self.ref_strains
    }

    pub fn n_nodes(&self) -> usize {
        self.geometry.n_nodes()
    }

    pub fn n_q(&self) -> usize {
        NODE_DIM * self.n_nodes()
    }

    /// Number of kinematic constraints: two fully fixed end nodes plus six
    /// orthonormality conditions per inner node.
    pub fn m(&self) -> usize {
        2 * NODE_DIM + 6 * self.inner_nodes()
    }

    /// Degrees of freedom `n = n_q - m`.
    pub fn dof(&self) -> usize {
        self.n_q() - self.m()
    }

    pub fn n_e(&self) -> usize {
        STRAINS_PER_ELEMENT * self.geometry.n_elements
    }

    fn inner_nodes(&self) -> usize {
        self.n_nodes() - 2
    }

    fn check_len(&self, q: &DVec) {
        assert_eq!(q.len(), self.n_q(), "configuration length mismatch");
    }

    /// Kinematic residual: boundary fixings of both end nodes first, then six
    /// orthonormality residuals per inner node in ascending node order.
    pub fn kinematic_constraints(&self, q: &DVec) -> DVec {
        self.check_len(q);
        let cfg = Configuration(q.clone());
        let mut h = DVec::zeros(self.m());
        let last = self.n_nodes() - 1;
        for (slot, node) in [0usize, last].into_iter().enumerate() {
            for k in 0..NODE_DIM {
                h[NODE_DIM * slot + k] = q[NODE_DIM * node + k] - self.q_ref.0[NODE_DIM * node + k];
            }
        }
        let mut row = 2 * NODE_DIM;
        for node in 1..last {
            let d1 = cfg.director(node, 1);
            let d2 = cfg.director(node, 2);
            let d3 = cfg.director(node, 3);
            h[row] = d1.norm_squared() - 1.0;
            h[row + 1] = d2.norm_squared() - 1.0;
            h[row + 2] = d3.norm_squared() - 1.0;
            h[row + 3] = d1.dot(&d2);
            h[row + 4] = d2.dot(&d3);
            h[row + 5] = d3.dot(&d1);
            row += 6;
        }
        h
    }

    /// Analytic Jacobian `H(q)` of the kinematic residual.
    pub fn kinematic_jacobian(&self, q: &DVec) -> DMat {
        self.check_len(q);
        let cfg = Configuration(q.clone());
        let mut jac = DMat::zeros(self.m(), self.n_q());
        let last = self.n_nodes() - 1;
        for (slot, node) in [0usize, last].into_iter().enumerate() {
            for k in 0..NODE_DIM {
                jac[(NODE_DIM * slot + k, NODE_DIM * node + k)] = 1.0;
            }
        }
        let mut row = 2 * NODE_DIM;
        for node in 1..last {
            let d = [cfg.director(node, 1), cfg.director(node, 2), cfg.director(node, 3)];
            let col = |k: usize| NODE_DIM * node + 3 * (k + 1);
            for i in 0..3 {
                for t in 0..3 {
                    jac[(row + i, col(i) + t)] = 2.0 * d[i][t];
                }
            }
            // (d1.d2, d2.d3, d3.d1)
            for (r, (a, b)) in [(0, 1), (1, 2), (2, 0)].into_iter().enumerate() {
                for t in 0..3 {
                    jac[(row + 3 + r, col(a) + t)] = d[b][t];
                    jac[(row + 3 + r, col(b) + t)] = d[a][t];
                }
            }
            row += 6;
        }
        jac
    }

    /// Block-diagonal tangent basis: fixed nodes contribute no columns, each
    /// inner node contributes three free translations and three director
    /// rotations `delta d_i = delta theta x d_i`.
    ///
    /// Satisfies `H(q) N(q) = 0` identically in `q`; columns are independent
    /// whenever the directors span space.
    pub fn nullspace(&self, q: &DVec) -> DMat {
        self.check_len(q);
        let cfg = Configuration(q.clone());
        let mut n = DMat::zeros(self.n_q(), self.dof());
        for (idx, node) in (1..self.n_nodes() - 1).enumerate() {
            let base_row = NODE_DIM * node;
            let base_col = 6 * idx;
            for t in 0..3 {
                n[(base_row + t, base_col + t)] = 1.0;
            }
            for k in 1..=3 {
                let d = cfg.director(node, k);
                // -skew(d): column c is e_c x d
                let rows = base_row + 3 * k;
                n[(rows, base_col + 4)] = d[2];
                n[(rows, base_col + 5)] = -d[1];
                n[(rows + 1, base_col + 3)] = -d[2];
                n[(rows + 1, base_col + 5)] = d[0];
                n[(rows + 2, base_col + 3)] = d[1];
                n[(rows + 2, base_col + 4)] = -d[0];
            }
        }
        n
    }

    /// [`Beam::nullspace`] with the feasibility precondition checked.
    pub fn analytic_nullspace(&self, q: &DVec) -> Result<DMat> {
        let h = self.kinematic_constraints(q);
        let viol = h.amax();
        if viol > 1e-8 {
            return Err(Error::TangentBasis(format!(
                "configuration violates kinematic constraints by {viol:.3e}"
            )));
        }
        Ok(self.nullspace(q))
    }

    /// Discrete strain vector, six components per element in the order
    /// `(Gamma1, Gamma2, Gamma3, K1, K2, K3)`.
    pub fn strains(&self, q: &DVec) -> DVec {
        self.check_len(q);
        let cfg = Configuration(q.clone());
        let ell = self.geometry.element_length();
        let mut e = DVec::zeros(self.n_e());
        for elem in 0..self.geometry.n_elements {
            let raw = raw_element_strains(&cfg, elem, ell);
            let off = &self.ref_strains.per_element[elem];
            for c in 0..6 {
                e[STRAINS_PER_ELEMENT * elem + c] = raw[c] - off[c];
            }
        }
        e
    }

    /// Analytic strain Jacobian `B(q) = e'(q)`.
    pub fn strain_jacobian(&self, q: &DVec) -> DMat {
        self.check_len(q);
        let cfg = Configuration(q.clone());
        let ell = self.geometry.element_length();
        let mut b = DMat::zeros(self.n_e(), self.n_q());
        for elem in 0..self.geometry.n_elements {
            let (na, nb) = (elem, elem + 1);
            let x_prime = (cfg.position(nb) - cfg.position(na)) / ell;
            let d_mid = [
                (cfg.director(na, 1) + cfg.director(nb, 1)) * 0.5,
                (cfg.director(na, 2) + cfg.director(nb, 2)) * 0.5,
                (cfg.director(na, 3) + cfg.director(nb, 3)) * 0.5,
            ];
            let d_prime = [
                (cfg.director(nb, 1) - cfg.director(na, 1)) / ell,
                (cfg.director(nb, 2) - cfg.director(na, 2)) / ell,
                (cfg.director(nb, 3) - cfg.director(na, 3)) / ell,
            ];
            let pos = |node: usize| NODE_DIM * node;
            let dir = |node: usize, k: usize| NODE_DIM * node + 3 * (k + 1);

            for i in 0..3 {
                let row = STRAINS_PER_ELEMENT * elem + i;
                for t in 0..3 {
                    b[(row, pos(na) + t)] = -d_mid[i][t] / ell;
                    b[(row, pos(nb) + t)] = d_mid[i][t] / ell;
                    b[(row, dir(na, i) + t)] = 0.5 * x_prime[t];
                    b[(row, dir(nb, i) + t)] = 0.5 * x_prime[t];
                }
            }
            for i in 0..3 {
                let j = (i + 1) % 3;
                let k = (i + 2) % 3;
                let row = STRAINS_PER_ELEMENT * elem + 3 + i;
                for t in 0..3 {
                    b[(row, dir(na, j) + t)] = -0.5 * d_mid[k][t] / ell - 0.25 * d_prime[k][t];
                    b[(row, dir(nb, j) + t)] = 0.5 * d_mid[k][t] / ell - 0.25 * d_prime[k][t];
                    b[(row, dir(na, k) + t)] = 0.25 * d_prime[j][t] + 0.5 * d_mid[j][t] / ell;
                    b[(row, dir(nb, k) + t)] = 0.25 * d_prime[j][t] - 0.5 * d_mid[j][t] / ell;
                }
            }
        }
        b
    }

    /// Constant Hessian of `q -> B(q)^T s` for fixed stresses `s`. The strains
    /// are quadratic in `q`, so this matrix does not depend on `q`.
    pub fn bts_q_derivative(&self, s: &DVec) -> DMat {
        assert_eq!(s.len(), self.n_e());
        let ell = self.geometry.element_length();
        let mut m = DMat::zeros(self.n_q(), self.n_q());
        let mut add_cross = |r: usize, c: usize, w: f64| {
            for t in 0..3 {
                m[(r + t, c + t)] += w;
                m[(c + t, r + t)] += w;
            }
        };
        for elem in 0..self.geometry.n_elements {
            let (na, nb) = (elem, elem + 1);
            let pos = |node: usize| NODE_DIM * node;
            let dir = |node: usize, k: usize| NODE_DIM * node + 3 * (k + 1);
            for i in 0..3 {
                let w = s[STRAINS_PER_ELEMENT * elem + i] / (2.0 * ell);
                add_cross(pos(nb), dir(na, i), w);
                add_cross(pos(nb), dir(nb, i), w);
                add_cross(pos(na), dir(na, i), -w);
                add_cross(pos(na), dir(nb, i), -w);
            }
            for i in 0..3 {
                let j = (i + 1) % 3;
                let k = (i + 2) % 3;
                let w = s[STRAINS_PER_ELEMENT * elem + 3 + i] / (2.0 * ell);
                add_cross(dir(nb, j), dir(na, k), w);
                add_cross(dir(na, j), dir(nb, k), -w);
            }
        }
        m
    }

    /// Derivative `W(q, a)` of `q -> N(q)^T a` for fixed `a`; constant in `q`
    /// because the nullspace is linear in the directors.
    pub fn ntr_q_derivative(&self, a: &DVec) -> DMat {
        assert_eq!(a.len(), self.n_q());
        let mut w = DMat::zeros(self.dof(), self.n_q());
        for (idx, node) in (1..self.n_nodes() - 1).enumerate() {
            for k in 1..=3 {
                let base = NODE_DIM * node + 3 * k;
                let av = Vector3::new(a[base], a[base + 1], a[base + 2]);
                // rotation rows: d/dd_k of (d_k x a_k) = -skew(a_k)
                let row = 6 * idx + 3;
                w[(row, base + 1)] = av[2];
                w[(row, base + 2)] = -av[1];
                w[(row + 1, base)] = -av[2];
                w[(row + 1, base + 2)] = av[0];
                w[(row + 2, base)] = av[1];
                w[(row + 2, base + 1)] = -av[0];
            }
        }
        w
    }

    /// One-point quadrature weight of the internal-force operator. The
    /// strain measures are per unit arc length, so each element contributes
    /// `l_e * B_el^T s_el` to the nodal force balance.
    pub fn quadrature_weight(&self) -> f64 {
        self.geometry.element_length()
    }

    /// Contact residual `c(q)` and its constant selector Jacobian `C`.
    pub fn contact_constraints(&self, q: &DVec, spec: &ContactSpec) -> (DVec, DMat) {
        self.check_len(q);
        let mut c = DVec::zeros(spec.len());
        let mut jac = DMat::zeros(spec.len(), self.n_q());
        for (row, &(node, lb)) in spec.entries().iter().enumerate() {
            c[row] = q[NODE_DIM * node + 2] - lb;
            jac[(row, NODE_DIM * node + 2)] = 1.0;
        }
        (c, jac)
    }

    /// Reduced static residual `N(q)^T (B(q)^T s - f - C(q)^T xi)` with the
    /// quadrature-weighted internal-force operator.
    ///
    /// `xi` must have one entry per contact-spec row; pass an empty spec and
    /// zero-length `xi` for the unconstrained case.
    pub fn equilibrium_residual(
        &self,
        q: &DVec,
        s: &DVec,
        force: &ForceProfile,
        xi: &DVec,
        contact: &ContactSpec,
    ) -> DVec {
        assert_eq!(xi.len(), contact.len(), "xi length must match contact spec");
        let n = self.nullspace(q);
        let b = self.strain_jacobian(q);
        let mut residual =
            b.transpose() * s * self.quadrature_weight() - force.assemble(self.n_q());
        for (row, &(node, _)) in contact.entries().iter().enumerate() {
            residual[NODE_DIM * node + 2] -= xi[row];
        }
        n.transpose() * residual
    }

    /// Deterministic kinematically feasible perturbation of the reference:
    /// inner-node positions are shifted and director triads rotated exactly.
    pub fn feasible_perturbation(&self, seed: u64, pos_amp: f64, rot_amp: f64) -> DVec {
        let mut rng = SplitMix64::new(seed);
        let mut q = self.q_ref.0.clone();
        for node in 1..self.n_nodes() - 1 {
            let base = NODE_DIM * node;
            for t in 0..3 {
                q[base + t] += pos_amp * rng.next_symmetric();
            }
            let axis = Vector3::new(
                rng.next_symmetric(),
                rng.next_symmetric(),
                rng.next_symmetric(),
            ) * rot_amp;
            let rot = nalgebra::Rotation3::from_scaled_axis(axis);
            for k in 1..=3 {
                let d = rot * self.q_ref.block(node, 3 * k);
                for t in 0..3 {
                    q[base + 3 * k + t] = d[t];
                }
            }
        }
        q
    }
}

impl KinematicModel for Beam {
    fn n_q(&self) -> usize {
        Beam::n_q(self)
    }

    fn dof(&self) -> usize {
        Beam::dof(self)
    }

    fn nullspace_at(&self, q: &DVec) -> DMat {
        self.nullspace(q)
    }

    fn strain_jacobian_at(&self, q: &DVec) -> DMat {
        self.strain_jacobian(q)
    }
}

/// Assembles the full-rank condition block row `[D(q, s) N(q)  N(q)^T B(q)^T]`
/// with `D = N^T d_q(B^T s) + W(q, B^T s - f)` and reports its rank.
///
/// Both q-derivative terms are formed by directional central differences;
/// this is a diagnostic, not a solver path.
pub fn rank_conditions<M: KinematicModel>(
    model: &M,
    q: &DVec,
    s: &DVec,
    f: &DVec,
) -> Result<RankReport> {
    let n_q = model.n_q();
    let dof = model.dof();
    assert_eq!(q.len(), n_q);
    assert_eq!(f.len(), n_q);
    let h = crate::numerics::FD_STEP;

    let bts = |qq: &DVec| model.strain_jacobian_at(qq).transpose() * s;
    let d_bts = numerics::fd_jacobian(bts, q, h)?;

    let a = bts(q) - f;
    let ntr = |qq: &DVec| model.nullspace_at(qq).transpose() * &a;
    let w = numerics::fd_jacobian(ntr, q, h)?;

    let n_basis = model.nullspace_at(q);
    let d = n_basis.transpose() * d_bts + w;
    let dn = &d * &n_basis;
    let ntbt = n_basis.transpose() * model.strain_jacobian_at(q).transpose();

    let n_e = ntbt.ncols();
    let mut block = DMat::zeros(dof, dof + n_e);
    block.view_mut((0, 0), (dof, dof)).copy_from(&dn);
    block.view_mut((0, dof), (dof, n_e)).copy_from(&ntbt);
    numerics::rank_estimate(&block, numerics::RANK_REL_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd_jacobian;

    fn small_beam() -> Beam {
        Beam::new(BeamGeometry {
            n_elements: 4,
            ..BeamGeometry::default()
        })
        .unwrap()
    }

    #[test]
    fn reference_starts_at_origin_with_zero_strains() {
        let beam = Beam::new(BeamGeometry::default()).unwrap();
        let q0 = beam.reference().0.clone();
        assert_eq!(beam.reference().position(0), Vector3::zeros());
        let e = beam.strains(&q0);
        assert_eq!(e.len(), 120);
        assert!(e.amax() < 1e-14);
        assert!(beam.kinematic_constraints(&q0).amax() < 1e-14);
    }

    #[test]
    fn reference_chord_length_matches_circle_geometry() {
        let beam = Beam::new(BeamGeometry::default()).unwrap();
        let r = 2.0 / std::f64::consts::PI;
        let expected = 2.0 * r * (std::f64::consts::PI / 80.0).sin();
        let q = beam.reference();
        for i in 0..beam.n_nodes() - 1 {
            let chord = (q.position(i + 1) - q.position(i)).norm();
            assert!((chord - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn default_dimension_bookkeeping() {
        let beam = Beam::new(BeamGeometry::default()).unwrap();
        assert_eq!(beam.n_q(), 252);
        assert_eq!(beam.m(), 138);
        assert_eq!(beam.dof(), 114);
        assert_eq!(beam.n_e(), 120);
        let h = beam.kinematic_constraints(&beam.reference().0);
        assert_eq!(h.len(), 138);
    }

    #[test]
    fn scaled_director_residual() {
        let beam = Beam::new(BeamGeometry::default()).unwrap();
        let mut q = beam.reference().0.clone();
        // double d1 of inner node 3: |d1|^2 - 1 = 3
        let node = 3;
        for t in 0..3 {
            q[NODE_DIM * node + 3 + t] *= 2.0;
        }
        let h = beam.kinematic_constraints(&q);
        let row = 2 * NODE_DIM + 6 * (node - 1);
        assert!((h[row] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn kinematic_jacobian_matches_fd() {
        let beam = small_beam();
        let q = beam.feasible_perturbation(42, 0.05, 0.3);
        let jac = beam.kinematic_jacobian(&q);
        let fd = fd_jacobian(|qq| beam.kinematic_constraints(qq), &q, 1e-6).unwrap();
        assert!((jac - &fd).amax() <= 1e-6 * (1.0 + fd.amax()));
    }

    #[test]
    fn nullspace_annihilates_constraints() {
        let beam = Beam::new(BeamGeometry::default()).unwrap();
        let q0 = beam.reference().0.clone();
        let n = beam.analytic_nullspace(&q0).unwrap();
        let h = beam.kinematic_jacobian(&q0);
        assert!((h * &n).amax() < 1e-12);
        assert_eq!(
            crate::numerics::rank_estimate(&n, 1e-10).unwrap().estimated_rank,
            114
        );
        // perturbed feasible state
        let q = beam.feasible_perturbation(7, 0.05, 0.4);
        let n = beam.analytic_nullspace(&q).unwrap();
        assert!((beam.kinematic_jacobian(&q) * &n).amax() < 1e-10);
    }

    #[test]
    fn nullspace_rejects_infeasible_configuration() {
        let beam = small_beam();
        let mut q = beam.reference().0.clone();
        q[NODE_DIM + 3] += 0.2; // stretch an inner director
        assert!(matches!(
            beam.analytic_nullspace(&q),
            Err(Error::TangentBasis(_))
        ));
    }

    #[test]
    fn single_node_rotation_block_pattern() {
        // one inner node with identity directors: rotation columns follow
        // the -skew(e_k) pattern and H N = 0
        let beam = Beam::new(BeamGeometry {
            n_elements: 2,
            ..BeamGeometry::default()
        })
        .unwrap();
        let mut q = beam.reference().0.clone();
        let base = NODE_DIM;
        for t in 0..9 {
            q[base + 3 + t] = 0.0;
        }
        q[base + 3] = 1.0;
        q[base + 7] = 1.0;
        q[base + 11] = 1.0;
        let n = beam.nullspace(&q);
        // delta d1 = delta theta x e1: column e3 gives e2, column e2 gives -e3
        assert_eq!(n[(base + 4, 5)], 1.0);
        assert_eq!(n[(base + 5, 4)], -1.0);
        let h = beam.kinematic_jacobian(&q);
        assert!((h * &n).amax() < 1e-14);
    }

    #[test]
    fn strains_are_translation_invariant() {
        let beam = small_beam();
        let q = beam.feasible_perturbation(3, 0.1, 0.5);
        let e0 = beam.strains(&q);
        let mut shifted = q.clone();
        for node in 0..beam.n_nodes() {
            shifted[NODE_DIM * node] += 0.3;
            shifted[NODE_DIM * node + 1] -= 0.1;
            shifted[NODE_DIM * node + 2] += 0.2;
        }
        let e1 = beam.strains(&shifted);
        assert!((e0 - e1).amax() < 1e-12);
    }

    #[test]
    fn strain_jacobian_matches_fd_and_is_local() {
        let beam = small_beam();
        for seed in [1, 2, 3] {
            let q = beam.feasible_perturbation(seed, 0.08, 0.4);
            let b = beam.strain_jacobian(&q);
            let fd = fd_jacobian(|qq| beam.strains(qq), &q, 1e-6).unwrap();
            assert!((b - &fd).amax() <= 1e-6 * (1.0 + fd.amax()));
        }
        // locality: rows of element 0 touch only nodes 0 and 1
        let b = beam.strain_jacobian(&beam.reference().0);
        for row in 0..STRAINS_PER_ELEMENT {
            let mut nz_cols = 0;
            for col in 0..beam.n_q() {
                if b[(row, col)] != 0.0 {
                    assert!(col < 2 * NODE_DIM);
                }
            }
            for col in 0..2 * NODE_DIM {
                if b[(row, col)] != 0.0 {
                    nz_cols += 1;
                }
            }
            assert!(nz_cols <= 24);
        }
    }

    #[test]
    fn bts_hessian_matches_fd() {
        let beam = small_beam();
        let mut rng = SplitMix64::new(17);
        let s = DVec::from_fn(beam.n_e(), |_, _| 10.0 * rng.next_symmetric());
        let q = beam.feasible_perturbation(5, 0.1, 0.4);
        let m = beam.bts_q_derivative(&s);
        let fd = fd_jacobian(
            |qq| beam.strain_jacobian(qq).transpose() * &s,
            &q,
            1e-6,
        )
        .unwrap();
        assert!((m - &fd).amax() <= 1e-6 * (1.0 + fd.amax()));
    }

    #[test]
    fn ntr_derivative_matches_fd() {
        let beam = small_beam();
        let mut rng = SplitMix64::new(19);
        let a = DVec::from_fn(beam.n_q(), |_, _| 5.0 * rng.next_symmetric());
        let q = beam.feasible_perturbation(9, 0.1, 0.4);
        let w = beam.ntr_q_derivative(&a);
        let fd = fd_jacobian(|qq| beam.nullspace(qq).transpose() * &a, &q, 1e-6).unwrap();
        assert!((w - &fd).amax() <= 1e-6 * (1.0 + fd.amax()));
    }

    #[test]
    fn contact_residual_at_reference() {
        let beam = Beam::new(BeamGeometry::default()).unwrap();
        let tip = ContactSpec::new(vec![(10, -0.1)], beam.geometry()).unwrap();
        let (c, jac) = beam.contact_constraints(&beam.reference().0, &tip);
        assert_eq!(c.len(), 1);
        assert!((c[0] - 0.1).abs() < 1e-15);
        assert_eq!(jac[(0, NODE_DIM * 10 + 2)], 1.0);

        let plane = ContactSpec::new(
            (4..=16).map(|n| (n, -0.05)).collect(),
            beam.geometry(),
        )
        .unwrap();
        let (c, jac) = beam.contact_constraints(&beam.reference().0, &plane);
        assert_eq!(c.len(), 13);
        for row in 0..13 {
            assert_eq!(jac.row(row).iter().filter(|&&v| v != 0.0).count(), 1);
        }
    }

    #[test]
    fn contact_rows_are_linear_in_vertical_translation() {
        let beam = Beam::new(BeamGeometry::default()).unwrap();
        let spec = ContactSpec::new(vec![(5, -0.2), (9, -0.1)], beam.geometry()).unwrap();
        let q = beam.feasible_perturbation(13, 0.1, 0.3);
        let (c0, _) = beam.contact_constraints(&q, &spec);
        let t = 0.37;
        let mut shifted = q.clone();
        for node in 0..beam.n_nodes() {
            shifted[NODE_DIM * node + 2] += t;
        }
        let (c1, _) = beam.contact_constraints(&shifted, &spec);
        for row in 0..spec.len() {
            assert!((c1[row] - c0[row] - t).abs() < 1e-14);
        }
    }

    #[test]
    fn contact_spec_rejects_boundary_and_unsorted_nodes() {
        let g = BeamGeometry::default();
        assert!(ContactSpec::new(vec![(0, -0.1)], &g).is_err());
        assert!(ContactSpec::new(vec![(20, -0.1)], &g).is_err());
        assert!(ContactSpec::new(vec![(9, -0.1), (5, -0.1)], &g).is_err());
    }

    #[test]
    fn equilibrium_residual_shapes_and_reference_values() {
        let beam = Beam::new(BeamGeometry::default()).unwrap();
        let q0 = beam.reference().0.clone();
        let zero_force = ForceProfile::zero(beam.n_nodes());
        let s = DVec::zeros(beam.n_e());
        let r = beam.equilibrium_residual(&q0, &s, &zero_force, &DVec::zeros(0), &ContactSpec::empty());
        assert_eq!(r.len(), 114);
        assert!(r.amax() < 1e-14);

        // unit tip force only excites the node-10 tangent block
        let tip = ContactSpec::new(vec![(10, -0.1)], beam.geometry()).unwrap();
        let xi = DVec::from_vec(vec![1.0]);
        let r = beam.equilibrium_residual(&q0, &s, &zero_force, &xi, &tip);
        let block = 6 * 9; // node 10 is the 10th inner node
        for i in 0..r.len() {
            if i < block || i >= block + 6 {
                assert!(r[i].abs() < 1e-14, "row {i} should be zero");
            }
        }
        assert!(r.rows(block, 6).amax() > 0.9);
    }

    #[test]
    fn force_profile_validation() {
        let g = BeamGeometry::default();
        let mut p = ForceProfile::zero(g.n_nodes());
        p.nodal[0] = [0.0, 0.0, -1.0];
        assert!(p.validate(&g).is_err());
        let mut p = ForceProfile::zero(g.n_nodes());
        p.nodal[10] = [0.0, 0.0, -6.0];
        assert!(p.validate(&g).is_ok());
        let f = p.assemble(g.n_nodes() * NODE_DIM);
        assert_eq!(f[NODE_DIM * 10 + 2], -6.0);
    }

    #[test]
    fn rank_conditions_at_reference() {
        let beam = small_beam();
        let q0 = beam.reference().0.clone();
        let s = DVec::zeros(beam.n_e());
        let f = DVec::zeros(beam.n_q());
        let report = rank_conditions(&beam, &q0, &s, &f).unwrap();
        assert_eq!(report.estimated_rank, beam.dof());
    }
}
