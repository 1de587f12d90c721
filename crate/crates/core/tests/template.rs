//! The b_ref template of the default dataset does not depend on the accumulation order.

use eddycorr::simulator::SimulationConfig;
use eddycorr::translator::build_template;

#[test]
fn default_template_matches_a_reversed_accumulation() {
    let sim = SimulationConfig::default().generate(11).unwrap();
    let d = &sim.dataset;
    let template = build_template(d, 2000.0).unwrap();
    let idx = d.table.shell_indices(2000.0).unwrap();
    assert_eq!(idx.len(), 60);
    let mut acc = vec![0.0f32; template.len()];
    for &i in idx.iter().rev() {
        for (a, &x) in acc.iter_mut().zip(d.volumes[i].data()) {
            *a += x;
        }
    }
    let worst = acc
        .iter()
        .zip(template.data())
        .map(|(a, &t)| (a / 60.0 - t).abs())
        .fold(0.0f32, f32::max);
    assert!(worst < 1e-5, "{worst}");
}
