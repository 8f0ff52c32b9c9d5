//! The tape-based model against a loop transcription on three-atom clusters
//! with every parameter randomized.

mod support;

use spinconv::model::Variant;
use support::{loop_forward, randomized, tiny_config, trimers};

#[test]
fn energy_centric_forward_matches_loops() {
    for seed in 0..3 {
        let model = randomized(tiny_config(Variant::EnergyCentric), seed);
        for s in trimers(seed) {
            let (e_loop, _) = loop_forward(&model, &s);
            let e = model.energy(&s).unwrap();
            assert!((e - e_loop).abs() < 1e-12, "{e} vs {e_loop}");
        }
    }
}

#[test]
fn force_block_matches_loops() {
    for seed in 0..3 {
        let model = randomized(tiny_config(Variant::ForceCentric), 10 + seed);
        for s in trimers(seed) {
            let (e_loop, f_loop) = loop_forward(&model, &s);
            let p = model.force_block_forces(&s).unwrap();
            assert!((p.energy - e_loop).abs() < 1e-12, "{} vs {e_loop}", p.energy);
            for (a, b) in p.forces.iter().flatten().zip(f_loop.iter().flatten()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
