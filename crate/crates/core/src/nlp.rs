//! Assembly of the optimization problems: the stage NLPs of the quick-shot
//! heuristic, the three l1-robust reformulations, and MPCC verification.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::beam::{Beam, ContactSpec, ForceProfile, NODE_DIM};
use crate::materials::SystemLaw;
use crate::numerics::{DMat, DVec};
use crate::{Error, Result};

/// Which l1-robust reformulation a problem encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustVariant {
    /// Perturb the manifold arguments: `g(e - z_e, s - z_s) = 0`.
    ArgL1,
    /// Relax the manifold residual: `g(e, s) = z`.
    ResidualL1,
    /// Relax every constraint: `Phi_d = y`, `g = z`.
    FullL1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StageTag {
    Stage(u8),
    Robust(RobustVariant),
    External(String),
}

/// Contiguous variable slices of one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VariableLayout {
    /// `(q, e, s, ehat, shat, xi)`; `xi_entries` lists the included
    /// contact-spec rows (empty in stage 0).
    Stage {
        n_q: usize,
        n_e: usize,
        xi_entries: Vec<usize>,
    },
    /// `(q, e, s, slacks)` of an l1 reformulation; slack block sizes are
    /// determined by the variant.
    Robust {
        n_q: usize,
        n_e: usize,
        n_phid: usize,
        variant: RobustVariant,
    },
    /// Unstructured variable vector (test problems).
    Plain { dim: usize },
}

impl VariableLayout {
    pub fn dim(&self) -> usize {
        match self {
            Self::Stage {
                n_q,
                n_e,
                xi_entries,
            } => n_q + 4 * n_e + xi_entries.len(),
            Self::Robust {
                n_q,
                n_e,
                n_phid,
                variant,
            } => {
                n_q + 2 * n_e
                    + match variant {
                        RobustVariant::ArgL1 => 4 * n_e,
                        RobustVariant::ResidualL1 => 2 * n_e,
                        RobustVariant::FullL1 => 2 * n_phid + 2 * n_e,
                    }
            }
            Self::Plain { dim } => *dim,
        }
    }

    pub fn q_range(&self) -> std::ops::Range<usize> {
        match self {
            Self::Stage { n_q, .. } | Self::Robust { n_q, .. } => 0..*n_q,
            Self::Plain { dim } => 0..*dim,
        }
    }

    pub fn e_range(&self) -> std::ops::Range<usize> {
        match self {
            Self::Stage { n_q, n_e, .. } | Self::Robust { n_q, n_e, .. } => *n_q..n_q + n_e,
            Self::Plain { .. } => 0..0,
        }
    }

    pub fn s_range(&self) -> std::ops::Range<usize> {
        match self {
            Self::Stage { n_q, n_e, .. } | Self::Robust { n_q, n_e, .. } => {
                n_q + n_e..n_q + 2 * n_e
            }
            Self::Plain { .. } => 0..0,
        }
    }

    pub fn ehat_range(&self) -> Option<std::ops::Range<usize>> {
        match self {
            Self::Stage { n_q, n_e, .. } => Some(n_q + 2 * n_e..n_q + 3 * n_e),
            _ => None,
        }
    }

    pub fn shat_range(&self) -> Option<std::ops::Range<usize>> {
        match self {
            Self::Stage { n_q, n_e, .. } => Some(n_q + 3 * n_e..n_q + 4 * n_e),
            _ => None,
        }
    }

    pub fn xi_range(&self) -> std::ops::Range<usize> {
        match self {
            Self::Stage {
                n_q,
                n_e,
                xi_entries,
            } => n_q + 4 * n_e..n_q + 4 * n_e + xi_entries.len(),
            _ => 0..0,
        }
    }

    pub fn xi_entries(&self) -> &[usize] {
        match self {
            Self::Stage { xi_entries, .. } => xi_entries,
            _ => &[],
        }
    }

    /// Slack block of a robust layout.
    pub fn slack_range(&self) -> std::ops::Range<usize> {
        match self {
            Self::Robust { n_q, n_e, .. } => n_q + 2 * n_e..self.dim(),
            _ => 0..0,
        }
    }
}

/// Symmetric positive definite energy-norm weight `C` with its inverse.
#[derive(Debug, Clone)]
pub struct ProximityWeights {
    c: DMat,
    c_inv: DMat,
    diag: Option<DVec>,
}

impl ProximityWeights {
    pub fn new(c: DMat) -> Result<Self> {
        if c.nrows() != c.ncols() {
            return Err(Error::InvalidInput("weight matrix must be square".into()));
        }
        let chol = c
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidInput("weight matrix must be positive definite".into()))?;
        let c_inv = chol.inverse();
        let mut diag = Some(DVec::from_fn(c.nrows(), |i, _| c[(i, i)]));
        'outer: for i in 0..c.nrows() {
            for j in 0..c.ncols() {
                if i != j && c[(i, j)] != 0.0 {
                    diag = None;
                    break 'outer;
                }
            }
        }
        Ok(Self { c, c_inv, diag })
    }

    pub fn diagonal(d: &DVec) -> Result<Self> {
        if d.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidInput("weights must be positive".into()));
        }
        let c = DMat::from_diagonal(d);
        let c_inv = DMat::from_diagonal(&d.map(|v| 1.0 / v));
        Ok(Self {
            c,
            c_inv,
            diag: Some(d.clone()),
        })
    }

    /// Per-element replication of the material stiffness diagonal.
    pub fn block_replicated(a_diag: &[f64; 6], n_elements: usize) -> Self {
        let d = DVec::from_fn(6 * n_elements, |i, _| a_diag[i % 6]);
        Self::diagonal(&d).expect("stiffness diagonal is positive")
    }

    pub fn c(&self) -> &DMat {
        &self.c
    }

    pub fn c_inv(&self) -> &DMat {
        &self.c_inv
    }

    /// Diagonal of `C` when `C` is diagonal (needed by the arg-l1 variant).
    pub fn diag(&self) -> Option<&DVec> {
        self.diag.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }
}

/// Inequality-row provenance, used by the stage driver to read active sets
/// and multipliers out of solver reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IneqLabel {
    Contact { entry: usize, node: usize },
    XiBound { entry: usize, node: usize },
    SlackBound { index: usize },
}

type ObjectiveFn = Box<dyn Fn(&DVec) -> (f64, DVec) + Send + Sync>;
type ConstraintFn = Box<dyn Fn(&DVec) -> (DVec, DMat) + Send + Sync>;

/// One smooth NLP: objective with gradient and constant model Hessian,
/// equality and inequality residuals with Jacobians, and an initial point.
pub struct NlpProblem {
    pub layout: VariableLayout,
    pub stage: StageTag,
    pub initial_point: DVec,
    pub ineq_labels: Vec<IneqLabel>,
    n_eq: usize,
    hessian: DMat,
    objective: ObjectiveFn,
    equalities: ConstraintFn,
    inequalities: ConstraintFn,
}

impl NlpProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        layout: VariableLayout,
        stage: StageTag,
        initial_point: DVec,
        ineq_labels: Vec<IneqLabel>,
        n_eq: usize,
        hessian: DMat,
        objective: ObjectiveFn,
        equalities: ConstraintFn,
        inequalities: ConstraintFn,
    ) -> Self {
        assert_eq!(initial_point.len(), layout.dim());
        assert_eq!(hessian.nrows(), layout.dim());
        Self {
            layout,
            stage,
            initial_point,
            ineq_labels,
            n_eq,
            hessian,
            objective,
            equalities,
            inequalities,
        }
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_eq(&self) -> usize {
        self.n_eq
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq_labels.len()
    }

    pub fn objective(&self, x: &DVec) -> (f64, DVec) {
        (self.objective)(x)
    }

    pub fn equalities(&self, x: &DVec) -> (DVec, DMat) {
        (self.equalities)(x)
    }

    pub fn inequalities(&self, x: &DVec) -> (DVec, DMat) {
        (self.inequalities)(x)
    }

    pub fn hessian(&self) -> &DMat {
        &self.hessian
    }

    /// Diagnostic problem dump: layout, dimensions, stage tag, and a dense
    /// Jacobian sparsity summary at the initial point.
    pub fn dump_summary(&self) -> serde_json::Value {
        let (_, je) = self.equalities(&self.initial_point);
        let nnz = je.iter().filter(|&&v| v != 0.0).count();
        serde_json::json!({
            "stage": self.stage,
            "layout": self.layout,
            "variables": self.dim(),
            "equalities": self.n_eq,
            "inequalities": self.n_ineq(),
            "equality_jacobian": {
                "rows": je.nrows(),
                "cols": je.ncols(),
                "nnz": nnz,
                "fill": nnz as f64 / (je.nrows() * je.ncols()).max(1) as f64,
            },
        })
    }
}

/// Energy-norm proximity objective
/// `1/2 |e - ehat|^2_C + 1/2 |s - shat|^2_{C^-1}` with gradient; zero in the
/// `q` and `xi` slices.
pub fn proximity_objective(
    layout: &VariableLayout,
    weights: &ProximityWeights,
    x: &DVec,
) -> (f64, DVec) {
    let e = x.rows(layout.e_range().start, layout.e_range().len());
    let s = x.rows(layout.s_range().start, layout.s_range().len());
    let eh_range = layout
        .ehat_range()
        .expect("proximity objective needs (ehat, shat)");
    let sh_range = layout
        .shat_range()
        .expect("proximity objective needs (ehat, shat)");
    let ehat = x.rows(eh_range.start, eh_range.len());
    let shat = x.rows(sh_range.start, sh_range.len());

    let de = e - ehat;
    let ds = s - shat;
    let cde = weights.c() * &de;
    let cids = weights.c_inv() * &ds;
    let value = 0.5 * de.dot(&cde) + 0.5 * ds.dot(&cids);

    let mut grad = DVec::zeros(layout.dim());
    grad.rows_mut(layout.e_range().start, de.len()).copy_from(&cde);
    grad.rows_mut(eh_range.start, de.len()).copy_from(&(-&cde));
    grad.rows_mut(layout.s_range().start, ds.len()).copy_from(&cids);
    grad.rows_mut(sh_range.start, ds.len()).copy_from(&(-&cids));
    (value, grad)
}

/// Constant Gauss-Newton Hessian of [`proximity_objective`].
pub fn proximity_hessian(layout: &VariableLayout, weights: &ProximityWeights) -> DMat {
    let mut h = DMat::zeros(layout.dim(), layout.dim());
    let n_e = layout.e_range().len();
    let (e0, s0) = (layout.e_range().start, layout.s_range().start);
    let eh0 = layout.ehat_range().expect("stage layout").start;
    let sh0 = layout.shat_range().expect("stage layout").start;
    for i in 0..n_e {
        for j in 0..n_e {
            let c = weights.c()[(i, j)];
            let ci = weights.c_inv()[(i, j)];
            if c != 0.0 {
                h[(e0 + i, e0 + j)] += c;
                h[(eh0 + i, eh0 + j)] += c;
                h[(e0 + i, eh0 + j)] -= c;
                h[(eh0 + i, e0 + j)] -= c;
            }
            if ci != 0.0 {
                h[(s0 + i, s0 + j)] += ci;
                h[(sh0 + i, sh0 + j)] += ci;
                h[(s0 + i, sh0 + j)] -= ci;
                h[(sh0 + i, s0 + j)] -= ci;
            }
        }
    }
    h
}

/// The beam problem bundle: model, constitutive system, contact bounds,
/// load profile, and proximity weights.
#[derive(Clone)]
pub struct BeamAssembly {
    pub beam: Beam,
    pub law: SystemLaw,
    pub contact: ContactSpec,
    pub force: ForceProfile,
    pub weights: ProximityWeights,
}

impl BeamAssembly {
    pub fn new(
        beam: Beam,
        law: SystemLaw,
        contact: ContactSpec,
        force: ForceProfile,
        weights: ProximityWeights,
    ) -> Result<Self> {
        if law.n_e() != beam.n_e() {
            return Err(Error::Config(format!(
                "constitutive system covers {} components, beam has {}",
                law.n_e(),
                beam.n_e()
            )));
        }
        if weights.dim() != beam.n_e() {
            return Err(Error::Config(format!(
                "weight matrix dimension {} does not match n_e = {}",
                weights.dim(),
                beam.n_e()
            )));
        }
        force.validate(beam.geometry())?;
        Ok(Self {
            beam,
            law,
            contact,
            force,
            weights,
        })
    }

    pub fn n_variables_stage0(&self) -> usize {
        self.beam.n_q() + 4 * self.beam.n_e()
    }

    pub fn n_equalities(&self) -> usize {
        self.beam.m() + self.beam.n_e() + self.beam.dof() + self.beam.n_e()
    }

    fn stage_layout(&self, xi_entries: Vec<usize>) -> VariableLayout {
        VariableLayout::Stage {
            n_q: self.beam.n_q(),
            n_e: self.beam.n_e(),
            xi_entries,
        }
    }

    /// Residual of the full equality system `(h, e(q) - e, equilibrium,
    /// g(ehat, shat))` with the contact forces `xi_full` (one per spec row).
    pub fn system_residual(&self, x: &DVec, layout: &VariableLayout, xi_full: &DVec) -> DVec {
        let beam = &self.beam;
        let q = x.rows(0, beam.n_q()).into_owned();
        let e = x.rows(layout.e_range().start, beam.n_e());
        let s = x.rows(layout.s_range().start, beam.n_e()).into_owned();
        let ehat = x
            .rows(layout.ehat_range().expect("stage layout").start, beam.n_e())
            .into_owned();
        let shat = x
            .rows(layout.shat_range().expect("stage layout").start, beam.n_e())
            .into_owned();

        let h = beam.kinematic_constraints(&q);
        let compat = beam.strains(&q) - e;
        let equil = beam.equilibrium_residual(&q, &s, &self.force, xi_full, &self.contact);
        let g = self.law.residual(&ehat, &shat);

        let mut out = DVec::zeros(self.n_equalities());
        let mut row = 0;
        for block in [&h, &compat, &equil, &g] {
            out.rows_mut(row, block.len()).copy_from(block);
            row += block.len();
        }
        out
    }

    /// Expands the `xi` slice of a stage solution into one value per
    /// contact-spec row (absent components are zero).
    pub fn expand_xi(&self, x: &DVec, layout: &VariableLayout) -> DVec {
        let mut xi = DVec::zeros(self.contact.len());
        let range = layout.xi_range();
        for (k, &entry) in layout.xi_entries().iter().enumerate() {
            xi[entry] = x[range.start + k];
        }
        xi
    }

    /// First-order MPCC check of a stage solution.
    pub fn verify_mpcc(
        &self,
        x: &DVec,
        layout: &VariableLayout,
        tol: &MpccTolerances,
    ) -> MpccVerdict {
        let xi = self.expand_xi(x, layout);
        let (objective_value, _) = proximity_objective(layout, &self.weights, x);
        let residual = self.system_residual(x, layout, &xi);
        let q = x.rows(0, self.beam.n_q()).into_owned();
        let (c, _) = self.beam.contact_constraints(&q, &self.contact);

        let bound_violation = c.iter().fold(0.0f64, |acc, &v| acc.max(-v.min(0.0)));
        let xi_violation = xi.iter().fold(0.0f64, |acc, &v| acc.max(-v.min(0.0)));
        let feasibility_inf_norm = residual.amax().max(bound_violation).max(xi_violation);
        let complementarity_product = c.dot(&xi);
        let signs_ok = bound_violation <= tol.tol_feas && xi_violation <= tol.tol_feas;
        let valid = objective_value <= tol.tol_obj
            && feasibility_inf_norm <= tol.tol_feas
            && complementarity_product.abs() <= tol.tol_comp
            && signs_ok;
        MpccVerdict {
            objective_value,
            feasibility_inf_norm,
            bound_violation_inf: bound_violation,
            complementarity_product,
            signs_ok,
            valid,
            contact_values: c.iter().copied().collect(),
            xi_values: xi.iter().copied().collect(),
        }
    }
}

/// Tolerances of the MPCC validity check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MpccTolerances {
    pub tol_obj: f64,
    pub tol_comp: f64,
    pub tol_feas: f64,
}

impl Default for MpccTolerances {
    fn default() -> Self {
        Self {
            tol_obj: 1e-6,
            tol_comp: 1e-6,
            tol_feas: 1e-7,
        }
    }
}

/// Machine-checkable verdict on a candidate MPCC solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpccVerdict {
    pub objective_value: f64,
    /// Infinity norm over equality residuals and violated bounds.
    pub feasibility_inf_norm: f64,
    /// Violation of `c(q) >= 0` alone (the bound-violation measure).
    pub bound_violation_inf: f64,
    /// Signed `c(q)^T xi`.
    pub complementarity_product: f64,
    pub signs_ok: bool,
    pub valid: bool,
    pub contact_values: Vec<f64>,
    pub xi_values: Vec<f64>,
}

/// Warm-start seed carried between stages: the predecessor's solution and
/// its layout, used to remap slices.
pub struct StageSeed<'a> {
    pub x: &'a DVec,
    pub layout: &'a VariableLayout,
}

fn map_initial_point(
    layout: &VariableLayout,
    assembly: &BeamAssembly,
    seed: Option<&StageSeed>,
    new_xi_value: f64,
) -> DVec {
    let mut x0 = DVec::zeros(layout.dim());
    match seed {
        Some(seed) => {
            let core = assembly.beam.n_q() + 4 * assembly.beam.n_e();
            for k in 0..core {
                x0[k] = seed.x[k];
            }
            let old_entries = seed.layout.xi_entries();
            let old_range = seed.layout.xi_range();
            let new_range = layout.xi_range();
            for (k, entry) in layout.xi_entries().iter().enumerate() {
                x0[new_range.start + k] = match old_entries.iter().position(|e| e == entry) {
                    Some(pos) => seed.x[old_range.start + pos],
                    None => new_xi_value,
                };
            }
        }
        None => {
            x0.rows_mut(0, assembly.beam.n_q())
                .copy_from(&assembly.beam.reference().0);
            let new_range = layout.xi_range();
            for k in 0..layout.xi_entries().len() {
                x0[new_range.start + k] = new_xi_value;
            }
        }
    }
    x0
}

/// Builds the NLP of one quick-shot stage.
///
/// Stage 0 has no `xi` variables and keeps every contact row as an
/// inequality. Stage 1 turns the active rows into equalities with `xi_A >= 0`
/// (components outside `A` are omitted entirely). Stage 2 relaxes `c_A = 0`
/// back to an inequality, stage 3 adds the remaining `xi` components.
pub fn build_stage(
    assembly: &Arc<BeamAssembly>,
    stage: u8,
    active_entries: &[usize],
    seed: Option<StageSeed>,
) -> Result<NlpProblem> {
    if stage > 3 {
        return Err(Error::InvalidInput(format!("stage {stage} out of range")));
    }
    let n_c = assembly.contact.len();
    let mut active: Vec<usize> = active_entries.to_vec();
    active.sort_unstable();
    active.dedup();
    if active.iter().any(|&e| e >= n_c) {
        return Err(Error::InvalidInput("active entry out of range".into()));
    }
    if stage == 1 && active.is_empty() {
        return Err(Error::Logic(
            "stage 1 requires a nonempty active set; no contact was detected".into(),
        ));
    }

    let xi_entries: Vec<usize> = match stage {
        0 => vec![],
        1 | 2 => active.clone(),
        _ => (0..n_c).collect(),
    };
    let layout = assembly.stage_layout(xi_entries.clone());
    let xi_init = if stage == 1 { 1.0 } else { 0.0 };
    let initial_point = map_initial_point(&layout, assembly, seed.as_ref(), xi_init);

    // Equality rows: (h, compatibility, equilibrium, g) plus c_A in stage 1.
    let eq_contact: Vec<usize> = if stage == 1 { active.clone() } else { vec![] };
    let n_eq = assembly.n_equalities() + eq_contact.len();

    // Inequality rows: contact rows not promoted to equalities, then xi bounds.
    let ineq_contact: Vec<usize> = match stage {
        1 => (0..n_c).filter(|e| !active.contains(e)).collect(),
        _ => (0..n_c).collect(),
    };
    let mut ineq_labels = Vec::new();
    for &entry in &ineq_contact {
        ineq_labels.push(IneqLabel::Contact {
            entry,
            node: assembly.contact.node(entry),
        });
    }
    for &entry in &xi_entries {
        ineq_labels.push(IneqLabel::XiBound {
            entry,
            node: assembly.contact.node(entry),
        });
    }

    let hessian = proximity_hessian(&layout, &assembly.weights);

    let asm = assembly.clone();
    let lay = layout.clone();
    let objective: ObjectiveFn =
        Box::new(move |x: &DVec| proximity_objective(&lay, &asm.weights, x));

    let asm = assembly.clone();
    let lay = layout.clone();
    let eq_rows_contact = eq_contact.clone();
    let equalities: ConstraintFn =
        Box::new(move |x: &DVec| stage_equalities(&asm, &lay, &eq_rows_contact, x));

    let asm = assembly.clone();
    let lay = layout.clone();
    let ineq_rows = ineq_contact.clone();
    let inequalities: ConstraintFn =
        Box::new(move |x: &DVec| stage_inequalities(&asm, &lay, &ineq_rows, x));

    Ok(NlpProblem::from_parts(
        layout,
        StageTag::Stage(stage),
        initial_point,
        ineq_labels,
        n_eq,
        hessian,
        objective,
        equalities,
        inequalities,
    ))
}

fn stage_equalities(
    assembly: &BeamAssembly,
    layout: &VariableLayout,
    eq_contact: &[usize],
    x: &DVec,
) -> (DVec, DMat) {
    let beam = &assembly.beam;
    let (n_q, n_e, dof, m) = (beam.n_q(), beam.n_e(), beam.dof(), beam.m());
    let dim = layout.dim();
    let n_eq = m + n_e + dof + n_e + eq_contact.len();

    let q = x.rows(0, n_q).into_owned();
    let e = x.rows(layout.e_range().start, n_e).into_owned();
    let s = x.rows(layout.s_range().start, n_e).into_owned();
    let ehat = x
        .rows(layout.ehat_range().expect("stage layout").start, n_e)
        .into_owned();
    let shat = x
        .rows(layout.shat_range().expect("stage layout").start, n_e)
        .into_owned();
    let xi_range = layout.xi_range();
    let xi_entries = layout.xi_entries();

    let nullspace = beam.nullspace(&q);
    let b = beam.strain_jacobian(&q);
    let h_jac = beam.kinematic_jacobian(&q);
    let (g1, g2) = assembly.law.jacobians(&ehat, &shat);

    let w = beam.quadrature_weight();
    let h = beam.kinematic_constraints(&q);
    let compat = beam.strains(&q) - &e;
    let mut unreduced = b.transpose() * &s * w - assembly.force.assemble(n_q);
    for (k, &entry) in xi_entries.iter().enumerate() {
        let node = assembly.contact.node(entry);
        unreduced[NODE_DIM * node + 2] -= x[xi_range.start + k];
    }
    let equil = nullspace.transpose() * &unreduced;
    let g = assembly.law.residual(&ehat, &shat);

    let mut res = DVec::zeros(n_eq);
    let mut jac = DMat::zeros(n_eq, dim);

    // h rows
    res.rows_mut(0, m).copy_from(&h);
    jac.view_mut((0, 0), (m, n_q)).copy_from(&h_jac);

    // compatibility rows
    let r0 = m;
    res.rows_mut(r0, n_e).copy_from(&compat);
    jac.view_mut((r0, 0), (n_e, n_q)).copy_from(&b);
    for i in 0..n_e {
        jac[(r0 + i, layout.e_range().start + i)] = -1.0;
    }

    // equilibrium rows
    let r1 = m + n_e;
    res.rows_mut(r1, dof).copy_from(&equil);
    let dq = nullspace.transpose() * beam.bts_q_derivative(&(&s * w))
        + beam.ntr_q_derivative(&unreduced);
    jac.view_mut((r1, 0), (dof, n_q)).copy_from(&dq);
    let ntbt = nullspace.transpose() * b.transpose() * w;
    jac.view_mut((r1, layout.s_range().start), (dof, n_e))
        .copy_from(&ntbt);
    for (k, &entry) in xi_entries.iter().enumerate() {
        let node = assembly.contact.node(entry);
        // column of -N^T C^T for this contact row
        for r in 0..dof {
            jac[(r1 + r, xi_range.start + k)] = -nullspace[(NODE_DIM * node + 2, r)];
        }
    }

    // constitutive rows
    let r2 = m + n_e + dof;
    res.rows_mut(r2, n_e).copy_from(&g);
    jac.view_mut(
        (r2, layout.ehat_range().expect("stage layout").start),
        (n_e, n_e),
    )
    .copy_from(&g1);
    jac.view_mut(
        (r2, layout.shat_range().expect("stage layout").start),
        (n_e, n_e),
    )
    .copy_from(&g2);

    // promoted contact equalities (stage 1)
    let r3 = r2 + n_e;
    for (row, &entry) in eq_contact.iter().enumerate() {
        let node = assembly.contact.node(entry);
        res[r3 + row] = q[NODE_DIM * node + 2] - assembly.contact.lower_bound(entry);
        jac[(r3 + row, NODE_DIM * node + 2)] = 1.0;
    }

    (res, jac)
}

fn stage_inequalities(
    assembly: &BeamAssembly,
    layout: &VariableLayout,
    ineq_contact: &[usize],
    x: &DVec,
) -> (DVec, DMat) {
    let n_rows = ineq_contact.len() + layout.xi_entries().len();
    let mut res = DVec::zeros(n_rows);
    let mut jac = DMat::zeros(n_rows, layout.dim());
    for (row, &entry) in ineq_contact.iter().enumerate() {
        let node = assembly.contact.node(entry);
        res[row] = x[NODE_DIM * node + 2] - assembly.contact.lower_bound(entry);
        jac[(row, NODE_DIM * node + 2)] = 1.0;
    }
    let xi_range = layout.xi_range();
    for k in 0..layout.xi_entries().len() {
        let row = ineq_contact.len() + k;
        res[row] = x[xi_range.start + k];
        jac[(row, xi_range.start + k)] = 1.0;
    }
    (res, jac)
}

/// Builds one of the l1-robust reformulations as a smooth NLP with
/// nonnegative slack pairs. Contact rows, when present in the assembly, are
/// kept as plain inequalities (no contact force variables).
pub fn build_robust(
    assembly: &Arc<BeamAssembly>,
    variant: RobustVariant,
    w_y: Option<DVec>,
    w_z: Option<DVec>,
) -> Result<NlpProblem> {
    let beam = &assembly.beam;
    let (n_q, n_e, dof, m) = (beam.n_q(), beam.n_e(), beam.dof(), beam.m());
    let n_phid = m + n_e + dof;

    let wz = match w_z {
        Some(w) => {
            if w.len() != n_e || w.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::InvalidInput(
                    "w_z must be a positive vector of length n_e".into(),
                ));
            }
            w
        }
        None => DVec::from_element(n_e, 1.0),
    };
    let wy = match w_y {
        Some(w) => {
            if w.len() != n_phid || w.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::InvalidInput(
                    "w_y must be a positive vector of length m + n_e + n".into(),
                ));
            }
            w
        }
        None => DVec::from_element(n_phid, 1.0),
    };

    let layout = VariableLayout::Robust {
        n_q,
        n_e,
        n_phid,
        variant,
    };
    let dim = layout.dim();

    let slack_range = layout.slack_range();
    let mut cost = DVec::zeros(dim);
    match variant {
        RobustVariant::ArgL1 => {
            let cd = assembly.weights.diag().ok_or_else(|| {
                Error::InvalidInput("arg-l1 robustification needs a diagonal weight matrix".into())
            })?;
            for i in 0..n_e {
                let we = cd[i].sqrt();
                let ws = (1.0 / cd[i]).sqrt();
                cost[slack_range.start + i] = we;
                cost[slack_range.start + n_e + i] = we;
                cost[slack_range.start + 2 * n_e + i] = ws;
                cost[slack_range.start + 3 * n_e + i] = ws;
            }
        }
        RobustVariant::ResidualL1 => {
            for i in 0..n_e {
                cost[slack_range.start + i] = wz[i];
                cost[slack_range.start + n_e + i] = wz[i];
            }
        }
        RobustVariant::FullL1 => {
            for i in 0..n_phid {
                cost[slack_range.start + i] = wy[i];
                cost[slack_range.start + n_phid + i] = wy[i];
            }
            for i in 0..n_e {
                cost[slack_range.start + 2 * n_phid + i] = wz[i];
                cost[slack_range.start + 2 * n_phid + n_e + i] = wz[i];
            }
        }
    }

    let n_eq = n_phid + n_e;

    let mut ineq_labels: Vec<IneqLabel> = (0..slack_range.len())
        .map(|index| IneqLabel::SlackBound { index })
        .collect();
    for entry in 0..assembly.contact.len() {
        ineq_labels.push(IneqLabel::Contact {
            entry,
            node: assembly.contact.node(entry),
        });
    }

    let mut initial_point = DVec::zeros(dim);
    initial_point
        .rows_mut(0, n_q)
        .copy_from(&beam.reference().0);

    // Unit curvature keeps the QP subproblems of the linear-objective
    // reformulations well scaled.
    let hessian = DMat::identity(dim, dim);

    let cost_for_obj = cost.clone();
    let objective: ObjectiveFn =
        Box::new(move |x: &DVec| (cost_for_obj.dot(x), cost_for_obj.clone()));

    let asm = assembly.clone();
    let lay = layout.clone();
    let equalities: ConstraintFn = Box::new(move |x: &DVec| robust_equalities(&asm, &lay, x));

    let asm = assembly.clone();
    let lay = layout.clone();
    let inequalities: ConstraintFn = Box::new(move |x: &DVec| robust_inequalities(&asm, &lay, x));

    Ok(NlpProblem::from_parts(
        layout,
        StageTag::Robust(variant),
        initial_point,
        ineq_labels,
        n_eq,
        hessian,
        objective,
        equalities,
        inequalities,
    ))
}

fn robust_equalities(assembly: &BeamAssembly, layout: &VariableLayout, x: &DVec) -> (DVec, DMat) {
    let beam = &assembly.beam;
    let (n_q, n_e, dof, m) = (beam.n_q(), beam.n_e(), beam.dof(), beam.m());
    let n_phid = m + n_e + dof;
    let variant = match layout {
        VariableLayout::Robust { variant, .. } => *variant,
        _ => unreachable!("robust closure uses a robust layout"),
    };
    let dim = layout.dim();
    let slack = layout.slack_range().start;

    let q = x.rows(0, n_q).into_owned();
    let e = x.rows(layout.e_range().start, n_e).into_owned();
    let s = x.rows(layout.s_range().start, n_e).into_owned();

    let nullspace = beam.nullspace(&q);
    let b = beam.strain_jacobian(&q);
    let h_jac = beam.kinematic_jacobian(&q);

    let w = beam.quadrature_weight();
    let h = beam.kinematic_constraints(&q);
    let compat = beam.strains(&q) - &e;
    let unreduced = b.transpose() * &s * w - assembly.force.assemble(n_q);
    let equil = nullspace.transpose() * &unreduced;

    let n_eq = n_phid + n_e;
    let mut res = DVec::zeros(n_eq);
    let mut jac = DMat::zeros(n_eq, dim);

    // Phi_d rows
    res.rows_mut(0, m).copy_from(&h);
    jac.view_mut((0, 0), (m, n_q)).copy_from(&h_jac);
    res.rows_mut(m, n_e).copy_from(&compat);
    jac.view_mut((m, 0), (n_e, n_q)).copy_from(&b);
    for i in 0..n_e {
        jac[(m + i, layout.e_range().start + i)] = -1.0;
    }
    res.rows_mut(m + n_e, dof).copy_from(&equil);
    let dq = nullspace.transpose() * beam.bts_q_derivative(&(&s * w))
        + beam.ntr_q_derivative(&unreduced);
    jac.view_mut((m + n_e, 0), (dof, n_q)).copy_from(&dq);
    let ntbt = nullspace.transpose() * b.transpose() * w;
    jac.view_mut((m + n_e, layout.s_range().start), (dof, n_e))
        .copy_from(&ntbt);

    match variant {
        RobustVariant::ArgL1 => {
            // g(e - z_e, s - z_s) = 0 with z = z+ - z-
            let ze = x.rows(slack, n_e) - x.rows(slack + n_e, n_e);
            let zs = x.rows(slack + 2 * n_e, n_e) - x.rows(slack + 3 * n_e, n_e);
            let earg = &e - ze;
            let sarg = &s - zs;
            let g = assembly.law.residual(&earg, &sarg);
            let (g1, g2) = assembly.law.jacobians(&earg, &sarg);
            res.rows_mut(n_phid, n_e).copy_from(&g);
            jac.view_mut((n_phid, layout.e_range().start), (n_e, n_e))
                .copy_from(&g1);
            jac.view_mut((n_phid, layout.s_range().start), (n_e, n_e))
                .copy_from(&g2);
            jac.view_mut((n_phid, slack), (n_e, n_e)).copy_from(&(-&g1));
            jac.view_mut((n_phid, slack + n_e), (n_e, n_e)).copy_from(&g1);
            jac.view_mut((n_phid, slack + 2 * n_e), (n_e, n_e))
                .copy_from(&(-&g2));
            jac.view_mut((n_phid, slack + 3 * n_e), (n_e, n_e))
                .copy_from(&g2);
        }
        RobustVariant::ResidualL1 => {
            // g(e, s) - z+ + z- = 0
            let g = assembly.law.residual(&e, &s);
            let (g1, g2) = assembly.law.jacobians(&e, &s);
            for i in 0..n_e {
                res[n_phid + i] = g[i] - x[slack + i] + x[slack + n_e + i];
                jac[(n_phid + i, slack + i)] = -1.0;
                jac[(n_phid + i, slack + n_e + i)] = 1.0;
            }
            jac.view_mut((n_phid, layout.e_range().start), (n_e, n_e))
                .copy_from(&g1);
            jac.view_mut((n_phid, layout.s_range().start), (n_e, n_e))
                .copy_from(&g2);
        }
        RobustVariant::FullL1 => {
            // Phi_d = y and g = z; adjust the Phi_d rows in place.
            let g = assembly.law.residual(&e, &s);
            let (g1, g2) = assembly.law.jacobians(&e, &s);
            for i in 0..n_phid {
                res[i] -= x[slack + i] - x[slack + n_phid + i];
                jac[(i, slack + i)] = -1.0;
                jac[(i, slack + n_phid + i)] = 1.0;
            }
            let z0 = slack + 2 * n_phid;
            for i in 0..n_e {
                res[n_phid + i] = g[i] - x[z0 + i] + x[z0 + n_e + i];
                jac[(n_phid + i, z0 + i)] = -1.0;
                jac[(n_phid + i, z0 + n_e + i)] = 1.0;
            }
            jac.view_mut((n_phid, layout.e_range().start), (n_e, n_e))
                .copy_from(&g1);
            jac.view_mut((n_phid, layout.s_range().start), (n_e, n_e))
                .copy_from(&g2);
        }
    }

    (res, jac)
}

fn robust_inequalities(assembly: &BeamAssembly, layout: &VariableLayout, x: &DVec) -> (DVec, DMat) {
    let slack_range = layout.slack_range();
    let n_slack = slack_range.len();
    let n_c = assembly.contact.len();
    let mut res = DVec::zeros(n_slack + n_c);
    let mut jac = DMat::zeros(n_slack + n_c, layout.dim());
    for k in 0..n_slack {
        res[k] = x[slack_range.start + k];
        jac[(k, slack_range.start + k)] = 1.0;
    }
    for entry in 0..n_c {
        let node = assembly.contact.node(entry);
        res[n_slack + entry] = x[NODE_DIM * node + 2] - assembly.contact.lower_bound(entry);
        jac[(n_slack + entry, NODE_DIM * node + 2)] = 1.0;
    }
    (res, jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam::BeamGeometry;
    use crate::materials::MaterialLaw;
    use crate::numerics::{fd_jacobian, SplitMix64};

    fn assembly(n_elements: usize, contact: bool) -> Arc<BeamAssembly> {
        let beam = Beam::new(BeamGeometry {
            n_elements,
            ..BeamGeometry::default()
        })
        .unwrap();
        let law = MaterialLaw::symmetric();
        let system = SystemLaw::uniform(Arc::new(law.clone()), n_elements);
        let weights = ProximityWeights::block_replicated(&law.a_diag, n_elements);
        let geometry = *beam.geometry();
        let contact = if contact {
            let node = (n_elements / 2).max(1);
            ContactSpec::new(vec![(node, -0.1)], &geometry).unwrap()
        } else {
            ContactSpec::empty()
        };
        let mut force = ForceProfile::zero(beam.n_nodes());
        let mid = beam.n_nodes() / 2;
        force.nodal[mid] = [0.0, 0.0, -2.0];
        Arc::new(BeamAssembly::new(beam, system, contact, force, weights).unwrap())
    }

    #[test]
    fn stage0_default_dimensions() {
        let beam = Beam::new(BeamGeometry::default()).unwrap();
        let law = MaterialLaw::symmetric();
        let system = SystemLaw::uniform(Arc::new(law.clone()), 20);
        let weights = ProximityWeights::block_replicated(&law.a_diag, 20);
        let contact = ContactSpec::new(vec![(10, -0.1)], beam.geometry()).unwrap();
        let mut force = ForceProfile::zero(21);
        for (node, mag) in (7..=13).zip([2.0, 4.0, 6.0, 6.0, 6.0, 4.0, 2.0]) {
            force.nodal[node] = [0.0, 0.0, -mag];
        }
        let asm = Arc::new(BeamAssembly::new(beam, system, contact, force, weights).unwrap());
        let p = build_stage(&asm, 0, &[], None).unwrap();
        assert_eq!(p.dim(), 732);
        assert_eq!(p.n_eq(), 492);
        assert_eq!(p.n_ineq(), 1);

        // cold start: every block vanishes except equilibrium under load
        let (res, _) = p.equalities(&p.initial_point);
        assert!(res.rows(0, 138).amax() < 1e-14);
        assert!(res.rows(138, 120).amax() < 1e-14);
        assert!(res.rows(372, 120).amax() < 1e-14);
        assert!(res.rows(258, 114).amax() > 1.0);
    }

    #[test]
    fn stage1_promotes_active_rows() {
        let asm = assembly(6, true);
        let p = build_stage(&asm, 1, &[0], None).unwrap();
        assert_eq!(p.layout.xi_entries(), &[0]);
        assert_eq!(p.n_eq(), asm.n_equalities() + 1);
        // the single contact row is promoted; only the xi bound remains
        assert_eq!(p.n_ineq(), 1);
        assert!(matches!(p.ineq_labels[0], IneqLabel::XiBound { .. }));
        let range = p.layout.xi_range();
        assert_eq!(p.initial_point[range.start], 1.0);
    }

    #[test]
    fn stage1_rejects_empty_active_set() {
        let asm = assembly(6, true);
        assert!(matches!(
            build_stage(&asm, 1, &[], None),
            Err(Error::Logic(_))
        ));
    }

    #[test]
    fn stage2_and_3_keep_all_contact_rows_as_inequalities() {
        let asm = assembly(6, true);
        let p2 = build_stage(&asm, 2, &[0], None).unwrap();
        assert_eq!(p2.n_eq(), asm.n_equalities());
        assert_eq!(p2.n_ineq(), 2); // contact row + xi bound
        let p3 = build_stage(&asm, 3, &[0], None).unwrap();
        assert_eq!(p3.layout.xi_entries().len(), asm.contact.len());
        assert_eq!(p3.n_ineq(), 2);
    }

    #[test]
    fn objective_examples() {
        let asm = assembly(4, false);
        let p = build_stage(&asm, 0, &[], None).unwrap();
        // e = ehat, s = shat at the initial point
        let (v, g) = p.objective(&p.initial_point);
        assert_eq!(v, 0.0);
        assert_eq!(g.amax(), 0.0);

        // C = diag(A ...): a unit offset in one e component costs C_ii / 2
        let mut x = p.initial_point.clone();
        let e0 = p.layout.e_range().start;
        x[e0 + 2] = 1.0;
        let (v, g) = p.objective(&x);
        assert!((v - 0.5 * 100.0).abs() < 1e-12);
        assert_eq!(g.rows(0, asm.beam.n_q()).amax(), 0.0);
    }

    #[test]
    fn objective_gradient_and_hessian_match_fd() {
        let asm = assembly(3, false);
        let p = build_stage(&asm, 0, &[], None).unwrap();
        let mut rng = SplitMix64::new(4);
        let x = DVec::from_fn(p.dim(), |_, _| 0.3 * rng.next_symmetric());
        let (_, grad) = p.objective(&x);
        let fd = fd_jacobian(|xx| DVec::from_vec(vec![p.objective(xx).0]), &x, 1e-6).unwrap();
        for k in 0..p.dim() {
            assert!((grad[k] - fd[(0, k)]).abs() <= 1e-6 * (1.0 + fd.amax()));
        }
        // hessian * dx == grad(x + dx) - grad(x) for the quadratic objective
        let dx = DVec::from_fn(p.dim(), |_, _| 0.1 * rng.next_symmetric());
        let (_, g1) = p.objective(&(&x + &dx));
        let lhs = p.hessian() * &dx;
        assert!((lhs - (g1 - grad)).amax() < 1e-9);
    }

    #[test]
    fn stage_equality_jacobians_match_fd() {
        let asm = assembly(3, true);
        for stage in [0u8, 1, 2, 3] {
            let p = build_stage(&asm, stage, &[0], None).unwrap();
            let mut rng = SplitMix64::new(100 + stage as u64);
            let mut x = p.initial_point.clone();
            for k in 0..x.len() {
                x[k] += 0.05 * rng.next_symmetric();
            }
            let (_, jac) = p.equalities(&x);
            let fd = fd_jacobian(|xx| p.equalities(xx).0, &x, 1e-6).unwrap();
            let diff = (jac - &fd).amax();
            assert!(
                diff <= 1e-6 * (1.0 + fd.amax()),
                "stage {stage}: jacobian mismatch {diff:.3e}"
            );
        }
    }

    #[test]
    fn robust_jacobians_match_fd() {
        let asm = assembly(2, false);
        for variant in [
            RobustVariant::ArgL1,
            RobustVariant::ResidualL1,
            RobustVariant::FullL1,
        ] {
            let p = build_robust(&asm, variant, None, None).unwrap();
            let mut rng = SplitMix64::new(7);
            let mut x = p.initial_point.clone();
            for k in 0..x.len() {
                x[k] += 0.05 * rng.next_symmetric();
            }
            let (_, jac) = p.equalities(&x);
            let fd = fd_jacobian(|xx| p.equalities(xx).0, &x, 1e-6).unwrap();
            assert!(
                (jac - &fd).amax() <= 1e-6 * (1.0 + fd.amax()),
                "variant {variant:?}"
            );
        }
    }

    #[test]
    fn robust_objective_is_zero_on_slack_free_points() {
        let asm = assembly(2, false);
        for variant in [
            RobustVariant::ArgL1,
            RobustVariant::ResidualL1,
            RobustVariant::FullL1,
        ] {
            let p = build_robust(&asm, variant, None, None).unwrap();
            let (v, _) = p.objective(&p.initial_point);
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn verify_mpcc_no_contact_branch() {
        let asm = assembly(4, true);
        let p = build_stage(&asm, 0, &[], None).unwrap();
        // the stress-free reference with zero load satisfies everything
        let mut relaxed = (*asm).clone();
        relaxed.force = ForceProfile::zero(asm.beam.n_nodes());
        let verdict = relaxed.verify_mpcc(&p.initial_point, &p.layout, &MpccTolerances::default());
        assert!(verdict.valid);
        assert_eq!(verdict.complementarity_product, 0.0);
        assert!(verdict.signs_ok);
        // under load the same point violates equilibrium
        let verdict = asm.verify_mpcc(&p.initial_point, &p.layout, &MpccTolerances::default());
        assert!(!verdict.valid);
        assert!(verdict.feasibility_inf_norm > 1e-3);
    }

    #[test]
    fn warm_start_remaps_xi_components() {
        let asm = assembly(8, true);
        let p1 = build_stage(&asm, 1, &[0], None).unwrap();
        let mut x1 = p1.initial_point.clone();
        let r1 = p1.layout.xi_range();
        x1[r1.start] = 42.0;
        let p3 = build_stage(
            &asm,
            3,
            &[0],
            Some(StageSeed {
                x: &x1,
                layout: &p1.layout,
            }),
        )
        .unwrap();
        let r3 = p3.layout.xi_range();
        assert_eq!(p3.initial_point[r3.start], 42.0);
    }

    #[test]
    fn dump_summary_reports_dimensions() {
        let asm = assembly(3, true);
        let p = build_stage(&asm, 0, &[], None).unwrap();
        let dump = p.dump_summary();
        assert_eq!(dump["variables"], serde_json::json!(p.dim()));
        assert_eq!(dump["equalities"], serde_json::json!(p.n_eq()));
        assert!(dump["equality_jacobian"]["nnz"].as_u64().unwrap() > 0);
    }
}
