use proptest::prelude::*;
use spinconv::config::RunConfig;
use spinconv::data::{Dataset, OracleParams, Split, StructureRecord};
use spinconv::geometry::{edge_frame, project_to_sphere, AtomicSystem, Vec3};
use spinconv::model::{Model, ModelConfig, Prediction, Variant};
use spinconv::relax::{adwt, relax, RelaxConfig};
use spinconv::spherical::{bilinear_corners, spin_convolution, Activation, GridShape, SphericalGrid, SpinFilter};
use spinconv::train::{loss, metrics, plateau_lr};

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    [-range..range, -range..range, -range..range]
}

/// Clusters of 2 to 6 atoms with no pair closer than 1 Å.
fn cluster() -> impl Strategy<Value = AtomicSystem> {
    (2usize..=6)
        .prop_flat_map(|n| (prop::collection::vec(vec3(2.5), n), prop::collection::vec(prop::bool::ANY, n)))
        .prop_filter_map("atoms overlap", |(pos, heavy)| {
            let z = heavy.iter().map(|&h| if h { 6 } else { 1 }).collect();
            AtomicSystem::new(pos, z).ok().filter(|s| s.min_distance() > 1.0)
        })
}

fn small_model(variant: Variant) -> Model {
    Model::new(ModelConfig {
        message_dim: 4,
        hidden_dim: 8,
        experts: 2,
        layers: 2,
        phi_cells: 6,
        theta_cells: 8,
        num_basis: 16,
        norm_groups: 2,
        variant,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn scatter(shape: GridShape, points: &[(f64, f64, Vec<f64>)], shift: f64) -> SphericalGrid {
    let proj: Vec<(f64, f64, &[f64])> =
        points.iter().map(|(p, t, h)| (*p, (t + shift).rem_euclid(std::f64::consts::TAU), h.as_slice())).collect();
    SphericalGrid::scatter(shape, points[0].2.len(), &proj).unwrap()
}

fn points(m: usize) -> impl Strategy<Value = Vec<(f64, f64, Vec<f64>)>> {
    prop::collection::vec((0.0..std::f64::consts::PI, 0.0..std::f64::consts::TAU, prop::collection::vec(-1.0..1.0, m)), 1..10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_non_negative_and_zero_only_when_exact(
        e in -50.0..50.0f64, de in -1.0..1.0f64,
        f in prop::collection::vec(vec3(3.0), 1..8), df in vec3(0.5),
        we in 0.0..10.0f64, wf in 0.01..200.0f64,
    ) {
        prop_assert_eq!(loss(e, &f, e, &f, we, wf).unwrap(), 0.0);
        let mut g = f.clone();
        g[0] = [g[0][0] + df[0], g[0][1] + df[1], g[0][2] + df[2]];
        let l = loss(e + de, &g, e, &f, we, wf).unwrap();
        prop_assert!(l >= 0.0);
        if df.iter().any(|&x| x != 0.0) {
            prop_assert!(l > 0.0);
        }
    }

    #[test]
    fn plateau_rate_never_rises(history in prop::collection::vec(0.0..10.0f64, 0..40), patience in 1usize..5) {
        let mut prev = 1e-3;
        for k in 0..=history.len() {
            let lr = plateau_lr(&history[..k], 1e-3, 0.8, patience);
            prop_assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn metrics_stay_in_range(
        f in prop::collection::vec(vec3(2.0), 1..6), g in prop::collection::vec(vec3(2.0), 6), e in -5.0..5.0f64,
    ) {
        let record = StructureRecord {
            positions: (0..f.len()).map(|i| [2.0 * i as f64, 0.0, 0.0]).collect(),
            numbers: vec![1; f.len()],
            energy: e,
            forces: f.clone(),
            split: Split::Id,
        };
        let pred = Prediction { energy: -e, forces: g[..f.len()].to_vec() };
        let m = metrics(&[pred], &[record]).unwrap();
        prop_assert!((-1.0..=1.0).contains(&m.force_cosine));
        prop_assert!((0.0..=1.0).contains(&m.efwt));
        prop_assert!(m.force_mae >= 0.0 && m.energy_mae >= 0.0);
    }

    #[test]
    fn adwt_lies_in_the_unit_interval(s in cluster(), noise in prop::collection::vec(vec3(0.6), 6)) {
        let mut moved = s.clone();
        for (x, d) in moved.positions.iter_mut().zip(&noise) {
            for k in 0..3 {
                x[k] += d[k];
            }
        }
        let a = adwt(&[moved], &[s.clone()]).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(adwt(&[s.clone()], &[s]).unwrap(), 1.0);
    }

    #[test]
    fn bilinear_weights_sum_to_one(phi in 0.0..=std::f64::consts::PI, theta in 0.0..std::f64::consts::TAU, p in 2usize..10, t in 2usize..20) {
        let c = bilinear_corners(GridShape { phi_cells: p, theta_cells: t }, phi, theta);
        let total: f64 = c.as_slice().iter().map(|c| c.weight()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(c.as_slice().iter().all(|c| c.weight() >= 0.0));
    }

    #[test]
    fn whole_cell_roll_is_exact(pts in points(3), k in 1usize..16, w in prop::collection::vec(-1.0..1.0f64, 4 * 8 * 16 * 3)) {
        let shape = GridShape { phi_cells: 8, theta_cells: 16 };
        let filter = SpinFilter::new(shape, 3, 4, w, vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let grid = scatter(shape, &pts, 0.0);
        let a = spin_convolution(&grid, &filter, Activation::Swish).unwrap();
        let b = spin_convolution(&grid.rolled(k), &filter, Activation::Swish).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn energy_ignores_translation_and_relabeling(s in cluster(), shift in vec3(30.0), seed in any::<u64>()) {
        let model = small_model(Variant::EnergyCentric);
        let e = model.energy(&s).unwrap();
        prop_assert!((model.energy(&s.translated(shift)).unwrap() - e).abs() < 1e-10);
        let mut perm: Vec<usize> = (0..s.len()).collect();
        perm.rotate_left((seed % s.len() as u64) as usize);
        perm.swap(0, s.len() - 1);
        prop_assert!((model.energy(&s.permuted(&perm)).unwrap() - e).abs() < 1e-10);
    }

    #[test]
    fn continuous_roll_changes_output_by_under_five_percent(
        s in cluster(), shift in 0.0..std::f64::consts::TAU, theta in prop::sample::select(vec![12usize, 16, 24]),
    ) {
        // Real neighborhoods: first-layer messages and filters of a fresh model.
        let cfg = ModelConfig { theta_cells: theta, ..ModelConfig::default() };
        let model = Model::new(cfg.clone()).unwrap();
        let (graph, msgs) = model.messages(&s).unwrap();
        let m = cfg.message_dim;
        let filter = SpinFilter::new(
            cfg.grid(),
            m,
            cfg.hidden_dim,
            model.params().by_name("layer0.conv.filters").unwrap().data().to_vec(),
            model.params().by_name("layer0.conv.bias").unwrap().data().to_vec(),
        ).unwrap();
        for e in &graph.edges {
            let frame = edge_frame(e.unit).unwrap();
            let pts: Vec<(f64, f64, Vec<f64>)> = graph.incoming[e.source]
                .iter()
                .map(|&k| {
                    let n = &graph.edges[k];
                    let (phi, theta) =
                        if n.source == e.target { (std::f64::consts::PI, 0.0) } else { project_to_sphere(&frame, n.unit) };
                    (phi, theta, msgs[0].data()[k * m..(k + 1) * m].to_vec())
                })
                .collect();
            if pts.is_empty() {
                continue;
            }
            let a = spin_convolution(&scatter(cfg.grid(), &pts, 0.0), &filter, Activation::Swish).unwrap();
            let b = spin_convolution(&scatter(cfg.grid(), &pts, shift), &filter, Activation::Swish).unwrap();
            let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let size: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(diff < 0.05 * size, "{diff} vs {size} at {theta} cells");
        }
    }

    #[test]
    fn gradient_forces_sum_to_zero(s in cluster()) {
        let p = small_model(Variant::EnergyCentric).energy_and_gradient_forces(&s).unwrap();
        for k in 0..3 {
            prop_assert!(p.forces.iter().map(|f| f[k]).sum::<f64>().abs() < 1e-8);
        }
    }

    #[test]
    fn relaxation_steps_respect_the_cap(s in cluster(), cap in 0.01..0.1f64) {
        let cfg = RelaxConfig { max_iterations: 20, max_displacement: cap, ..RelaxConfig::default() };
        let t = relax(&s, &mut OracleParams::default().provider(), &cfg).unwrap();
        for w in t.frames.windows(2) {
            for (a, b) in w[0].positions.iter().zip(&w[1].positions) {
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                prop_assert!(d <= cap * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn dataset_text_round_trips_bitwise(s in cluster(), e in -1e3..1e3f64, f in prop::collection::vec(vec3(10.0), 6)) {
        let record = StructureRecord {
            positions: s.positions.clone(),
            numbers: s.numbers.clone(),
            energy: e,
            forces: f[..s.len()].to_vec(),
            split: if e > 0.0 { Split::Id } else { Split::Ood },
        };
        let ds = Dataset::new(vec![record]);
        let back = Dataset::from_jsonl(&ds.to_jsonl()).unwrap();
        prop_assert_eq!(back.records, ds.records);
    }

    #[test]
    fn numeric_overrides_reach_the_config(lr in 1e-6..1.0f64, steps in 1usize..100_000) {
        let cfg = RunConfig::from_json_with_overrides(
            "{}",
            &[format!("train.learning_rate={lr:?}"), format!("train.max_steps={steps}")],
        ).unwrap();
        prop_assert_eq!(cfg.train.learning_rate, lr);
        prop_assert_eq!(cfg.train.max_steps, steps);
    }
}
