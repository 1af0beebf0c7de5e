//! Manual probe of the tip benchmark: stage 0 then stage 1.

use std::sync::Arc;

use ddcm_core::beam::{Beam, BeamGeometry, ContactSpec, ForceProfile};
use ddcm_core::materials::{MaterialLaw, SystemLaw};
use ddcm_core::nlp::{build_stage, BeamAssembly, ProximityWeights, StageSeed};
use ddcm_core::sqp::{solve, SqpSettings};

fn main() {
    let gamma: f64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(2.0);
    let beam = Beam::new(BeamGeometry::default()).unwrap();
    let law = MaterialLaw::symmetric();
    let system = SystemLaw::uniform(Arc::new(law.clone()), 20);
    let weights = ProximityWeights::block_replicated(&law.a_diag, 20);
    let contact = ContactSpec::new(vec![(10, -0.1)], beam.geometry()).unwrap();
    let mut force = ForceProfile::zero(21);
    for (node, mag) in (7..=13).zip([2.0, 4.0, 6.0, 6.0, 6.0, 4.0, 2.0]) {
        force.nodal[node] = [0.0, 0.0, -mag];
    }
    force.gamma = gamma;
    let asm = Arc::new(BeamAssembly::new(beam, system, contact, force, weights).unwrap());

    let mut settings = SqpSettings::default();
    settings.trace = true;

    let t0 = std::time::Instant::now();
    let p0 = build_stage(&asm, 0, &[], None).unwrap();
    let r0 = solve(&p0, &settings, None);
    println!(
        "stage0: status {:?} f {:.3e} feas {:.3e} iters {} active {:?} ({:.2?})",
        r0.status,
        r0.objective_value,
        r0.feasibility_inf,
        r0.iterations,
        r0.active_set,
        t0.elapsed()
    );
    let q10z = r0.primal[12 * 10 + 2];
    println!("node 10 z at stage0 solution: {q10z:.6}");

    let (c, _) = asm
        .beam
        .contact_constraints(&r0.primal.rows(0, 252).into_owned(), &asm.contact);
    println!("contact residual c = {:?}", c.as_slice());

    if c[0] <= settings.tol_qp {
        let t1 = std::time::Instant::now();
        let p1 = build_stage(
            &asm,
            1,
            &[0],
            Some(StageSeed {
                x: &r0.primal,
                layout: &p0.layout,
            }),
        )
        .unwrap();
        let r1 = solve(&p1, &settings, None);
        let xi = r1.primal[p1.layout.xi_range().start];
        println!(
            "stage1: status {:?} f {:.3e} feas {:.3e} iters {} xi {:.8} ({:.2?})",
            r1.status,
            r1.objective_value,
            r1.feasibility_inf,
            r1.iterations,
            xi,
            t1.elapsed()
        );
    }
}
