use super::*;
use crate::data::{compute_stats, generate_dataset, partition, GenerateConfig, OracleParams, Split};
use crate::model::ModelConfig;

fn record(energy: f64, forces: Vec<Vec3>) -> StructureRecord {
    let positions = (0..forces.len()).map(|i| [2.0 * i as f64, 0.0, 0.0]).collect();
    StructureRecord { positions, numbers: vec![1; forces.len()], energy, forces, split: Split::Id }
}

fn tiny_model(variant: Variant) -> Model {
    Model::new(ModelConfig {
        message_dim: 4,
        layers: 1,
        hidden_dim: 8,
        experts: 2,
        phi_cells: 4,
        theta_cells: 6,
        num_basis: 16,
        norm_groups: 2,
        rotation_samples: 1,
        variant,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn tiny_data(n: usize) -> Vec<StructureRecord> {
    let cfg = GenerateConfig { structures: n, min_atoms: 3, max_atoms: 5, seed: 21, ..GenerateConfig::default() };
    generate_dataset(&cfg, &OracleParams::default()).unwrap()
}

#[test]
fn loss_examples() {
    let f = vec![[0.1, -0.2, 0.3], [0.0, 0.5, -0.5]];
    assert_eq!(loss(-3.0, &f, -3.0, &f, 1.0, 100.0).unwrap(), 0.0);
    assert_eq!(loss(-2.0, &f, -3.0, &f, 1.0, 100.0).unwrap(), 1.0);
    let l = loss(1.0, &[[0.3, 0.0, 0.4]], 1.0, &[[0.0; 3]], 1.0, 100.0).unwrap();
    assert!((l - 100.0 * 0.7 / 3.0).abs() < 1e-12, "{l}");
    assert!(loss(0.0, &f, 0.0, &f[..1], 1.0, 1.0).is_err());
}

#[test]
fn amsgrad_matches_reference_loop() {
    // Minimize (x - 3)^2 from x = 0 with a straightforward scalar transcription.
    let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
    let mut opt = AmsGrad::new(&[1], b1, b2, eps);
    let mut x = [0.0];
    let (mut rx, mut m, mut v, mut vhat) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for t in 1..=200 {
        let g = 2.0 * (x[0] - 3.0);
        opt.step(&mut [&mut x[..]], &[&[g][..]], lr);
        let rg = 2.0 * (rx - 3.0);
        m = b1 * m + (1.0 - b1) * rg;
        v = b2 * v + (1.0 - b2) * rg * rg;
        vhat = vhat.max(v);
        let mhat = m / (1.0 - b1.powi(t));
        let denom = (vhat / (1.0 - b2.powi(t))).sqrt() + eps;
        rx -= lr * mhat / denom;
        assert!((x[0] - rx).abs() < 1e-12, "step {t}: {} vs {rx}", x[0]);
    }
    assert!((x[0] - 3.0).abs() < 0.05);
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut opt = AmsGrad::new(&[3], 0.9, 0.999, 1e-8);
    let mut p = [1.0, -2.0, 0.5];
    for _ in 0..5 {
        opt.step(&mut [&mut p[..]], &[&[0.0; 3][..]], 0.1);
    }
    assert_eq!(p, [1.0, -2.0, 0.5]);
}

#[test]
fn plateau_schedule_examples() {
    assert_eq!(plateau_lr(&[5.0, 4.0, 3.0, 2.0, 1.0], 1e-3, 0.8, 3), 1e-3);
    assert_eq!(plateau_lr(&[1.0; 4], 1e-3, 0.8, 3), 1e-3 * 0.8);
    assert_eq!(plateau_lr(&[1.0; 3], 1e-3, 0.8, 3), 1e-3);
    assert!((plateau_lr(&[1.0; 7], 1e-3, 0.8, 3) - 1e-3 * 0.64).abs() < 1e-18);
    // Improvement resets the count.
    assert_eq!(plateau_lr(&[1.0, 1.0, 1.0, 0.5, 0.6, 0.6], 1.0, 0.8, 3), 1.0);
}

#[test]
fn perfect_and_negated_predictions() {
    let targets = vec![record(-1.0, vec![[0.1, 0.2, -0.3], [-0.4, 0.0, 0.2]]), record(-2.0, vec![[1.0, 0.0, 0.0]])];
    let exact: Vec<Prediction> =
        targets.iter().map(|r| Prediction { energy: r.energy, forces: r.forces.clone() }).collect();
    let m = metrics(&exact, &targets).unwrap();
    assert_eq!((m.energy_mae, m.force_mae, m.efwt), (0.0, 0.0, 1.0));
    assert!((m.force_cosine - 1.0).abs() < 1e-15);
    let negated: Vec<Prediction> = targets
        .iter()
        .map(|r| Prediction { energy: r.energy, forces: r.forces.iter().map(|f| [-f[0], -f[1], -f[2]]).collect() })
        .collect();
    let m = metrics(&negated, &targets).unwrap();
    assert!((m.force_cosine + 1.0).abs() < 1e-15);
    assert_eq!(m.efwt, 0.0);
    assert!(metrics(&[], &[]).is_err());
}

#[test]
fn efwt_uses_both_thresholds() {
    let t = vec![record(0.0, vec![[0.0; 3]])];
    let p = |e: f64, f: f64| vec![Prediction { energy: e, forces: vec![[f, 0.0, 0.0]] }];
    assert_eq!(metrics(&p(0.019, 0.029), &t).unwrap().efwt, 1.0);
    assert_eq!(metrics(&p(0.021, 0.0), &t).unwrap().efwt, 0.0);
    assert_eq!(metrics(&p(0.0, -0.031), &t).unwrap().efwt, 0.0);
    // Zero-length vectors contribute zero cosine.
    assert_eq!(metrics(&p(0.0, 0.0), &t).unwrap().force_cosine, 0.0);
}

#[test]
fn median_baseline_matches_brute_force() {
    let records = tiny_data(60);
    let stats = compute_stats(&records);
    let p = partition(&records);
    let preds: Vec<Prediction> = p.test.iter().map(|r| median_baseline(&stats, r)).collect();
    let m = metrics(&preds, &p.test).unwrap();

    // Independent recomputation from sorted training values.
    let mut e: Vec<f64> = p.train.iter().map(|r| r.energy).collect();
    let mut f: Vec<f64> = p.train.iter().flat_map(|r| r.forces.iter().flatten().copied()).collect();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    f.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = |v: &[f64]| if v.len() % 2 == 1 { v[v.len() / 2] } else { (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0 };
    let (me, mf) = (med(&e), med(&f));
    let mut e_err = 0.0;
    let mut f_err = 0.0;
    let mut comps = 0;
    for r in &p.test {
        e_err += (r.energy - me).abs();
        for c in r.forces.iter().flatten() {
            f_err += (c - mf).abs();
            comps += 1;
        }
    }
    assert!((m.energy_mae - e_err / p.test.len() as f64).abs() < 1e-12);
    assert!((m.force_mae - f_err / comps as f64).abs() < 1e-12);
}

/// Central difference of the loss along one parameter entry.
fn numeric_param_derivative(
    model: &Model,
    name: &str,
    index: usize,
    loss_of: &dyn Fn(&Model) -> f64,
) -> f64 {
    let h = 1e-6;
    let mut plus = model.clone();
    let mut minus = model.clone();
    let id = model.params().id(name).unwrap();
    plus.params_mut().get_mut(id).data_mut()[index] += h;
    minus.params_mut().get_mut(id).data_mut()[index] -= h;
    (loss_of(&plus) - loss_of(&minus)) / (2.0 * h)
}

#[test]
fn force_centric_gradient_matches_differences() {
    let model = tiny_model(Variant::ForceCentric);
    let rec = &tiny_data(1)[0];
    let q = random_rotation(&mut ChaCha8Rng::seed_from_u64(4));
    let g = force_centric_gradient(&model, rec, &q, 1.0, 10.0).unwrap();
    let loss_of = |m: &Model| force_centric_gradient(m, rec, &q, 1.0, 10.0).unwrap().loss;
    for (name, index) in [("force.embed_out.out.w", 3), ("layer0.conv.filters", 17), ("energy.out.w", 1)] {
        let id = model.params().id(name).unwrap();
        let pos = model.params().ids().position(|x| x == id).unwrap();
        let analytic = g.grads[pos].data()[index];
        let numeric = numeric_param_derivative(&model, name, index, &loss_of);
        assert!((analytic - numeric).abs() < 1e-5 * (1.0 + numeric.abs()), "{name}: {analytic} vs {numeric}");
    }
}

#[test]
fn energy_centric_gradient_matches_differences() {
    let model = tiny_model(Variant::EnergyCentric);
    let rec = &tiny_data(1)[0];
    let g = energy_centric_gradient(&model, rec, 1.0, 10.0, 1e-5).unwrap();
    let loss_of = |m: &Model| {
        let p = m.energy_and_gradient_forces(&rec.system()).unwrap();
        loss(p.energy, &p.forces, rec.energy, &rec.forces, 1.0, 10.0).unwrap()
    };
    assert!((g.loss - loss_of(&model)).abs() < 1e-12);
    for (name, index) in [("layer0.embed_out.out.w", 5), ("init.dist.lin.w", 2), ("energy.out.w", 0)] {
        let id = model.params().id(name).unwrap();
        let pos = model.params().ids().position(|x| x == id).unwrap();
        let analytic = g.grads[pos].data()[index];
        let numeric = numeric_param_derivative(&model, name, index, &loss_of);
        assert!((analytic - numeric).abs() < 1e-4 * (1.0 + numeric.abs()), "{name}: {analytic} vs {numeric}");
    }
}

fn tiny_trainer(seed: u64, steps: usize) -> Trainer {
    let p = partition(&tiny_data(60));
    let cfg = TrainConfig {
        batch_size: 2,
        max_steps: steps,
        val_interval: 10,
        val_structures: 4,
        learning_rate: 3e-3,
        seed,
        ..TrainConfig::default()
    };
    Trainer::new(tiny_model(Variant::ForceCentric), cfg, p.train, p.val).unwrap()
}

#[test]
fn fixed_seed_runs_are_identical() {
    let mut a = tiny_trainer(3, 25);
    let mut b = tiny_trainer(3, 25);
    a.run(None, |_| {}).unwrap();
    b.run(None, |_| {}).unwrap();
    assert_eq!(a.losses(), b.losses());
    assert_eq!(a.metrics_csv(), b.metrics_csv());
    assert_eq!(a.metrics_csv().lines().count(), 4);
}

#[test]
fn smoothed_training_loss_decreases() {
    let mut t = tiny_trainer(5, 500);
    t.run(None, |_| {}).unwrap();
    let l = t.losses();
    let window = |r: std::ops::Range<usize>| l[r.clone()].iter().sum::<f64>() / r.len() as f64;
    let means: Vec<f64> = (0..5).map(|k| window(k * 100..(k + 1) * 100)).collect();
    assert!(means[4] < means[0], "{means:?}");
    assert!(means.windows(2).filter(|w| w[1] < w[0]).count() >= 3, "{means:?}");
}

#[test]
fn bad_configs_are_rejected() {
    assert!(TrainConfig { decay_factor: 1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { force_weight: -1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!(TrainConfig { force_only: true, ..TrainConfig::default() }.effective_energy_weight(), 0.0);
}
