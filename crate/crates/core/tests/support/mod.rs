//! A direct loop transcription of the forward pass, sharing no code with the
//! tape-based model.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinconv::autodiff::Tensor;
use spinconv::geometry::AtomicSystem;
use spinconv::model::{Model, ModelConfig, Variant};

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn len(a: V3) -> f64 {
    dot(a, a).sqrt()
}
fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

struct P<'a>(&'a Model);

impl P<'_> {
    fn get(&self, name: &str) -> &Tensor {
        self.0.params().by_name(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    /// `x W + b` with `W` stored `[in, out]`.
    fn linear(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let w = self.get(&format!("{name}.w"));
        let b = self.get(&format!("{name}.b"));
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        assert_eq!(x.len(), n_in);
        (0..n_out).map(|o| b.data()[o] + (0..n_in).map(|i| x[i] * w.data()[i * n_out + o]).sum::<f64>()).collect()
    }

    fn embed(&self, name: &str, x: &[f64], species: &[f64], experts: usize) -> Vec<f64> {
        let v = self.linear(&format!("{name}.values"), x);
        let hidden: Vec<f64> = self.linear(&format!("{name}.mix1"), species).into_iter().map(swish).collect();
        let logits = self.linear(&format!("{name}.mix2"), &hidden);
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = ex.iter().sum();
        let d = v.len() / experts;
        let mixed: Vec<f64> =
            (0..d).map(|k| swish((0..experts).map(|b| v[k * experts + b] * ex[b] / z).sum::<f64>())).collect();
        self.linear(&format!("{name}.out"), &mixed)
    }

    fn dist(&self, name: &str, d: f64, pair: usize, cfg: &ModelConfig) -> Vec<f64> {
        let gain = self.get(&format!("{name}.gain")).data()[pair];
        let offset = self.get(&format!("{name}.offset")).data()[pair];
        let spacing = cfg.cutoff / (cfg.num_basis - 1) as f64;
        let sigma = 3.0 * spacing;
        let z = gain * d + offset;
        let basis: Vec<f64> =
            (0..cfg.num_basis).map(|i| (-(z - i as f64 * spacing).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
        self.linear(&format!("{name}.lin"), &basis)
    }

    /// Spin convolution of one grid `[Φ][Θ][M]`, then group norm and affine.
    fn conv(&self, name: &str, grid: &[Vec<Vec<f64>>], cfg: &ModelConfig) -> Vec<f64> {
        let w = self.get(&format!("{name}.filters")).data();
        let bias = self.get(&format!("{name}.bias")).data();
        let (p, t, m, d) = (cfg.phi_cells, cfg.theta_cells, cfg.message_dim, cfg.hidden_dim);
        let mut pooled = vec![0.0; d];
        for (k, out) in pooled.iter_mut().enumerate() {
            for shift in 0..t {
                let mut acc = bias[k];
                for row in 0..p {
                    for col in 0..t {
                        for c in 0..m {
                            acc += grid[row][(col + shift) % t][c] * w[((k * p + row) * t + col) * m + c];
                        }
                    }
                }
                *out += swish(acc) / t as f64;
            }
        }
        let gamma = self.get(&format!("{name}.gamma")).data();
        let beta = self.get(&format!("{name}.beta")).data();
        let size = d / cfg.norm_groups;
        let mut out = vec![0.0; d];
        for g in 0..cfg.norm_groups {
            let chunk = &pooled[g * size..(g + 1) * size];
            let mean = chunk.iter().sum::<f64>() / size as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / size as f64;
            for i in 0..size {
                let k = g * size + i;
                out[k] = gamma[k] * (pooled[k] - mean) / (var + cfg.norm_eps).sqrt() + beta[k];
            }
        }
        out
    }
}

fn swish(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Inclination and azimuth of `dir` in the frame whose z-axis is `axis`.
fn angles(axis: V3, dir: V3) -> (f64, f64) {
    let r = if axis[2].abs() > 0.999 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let ra = dot(r, axis);
    let w = [r[0] - ra * axis[0], r[1] - ra * axis[1], r[2] - ra * axis[2]];
    let wl = len(w);
    let e1 = [w[0] / wl, w[1] / wl, w[2] / wl];
    let e2 = cross(axis, e1);
    let (x, y, z) = (dot(e1, dir), dot(e2, dir), dot(axis, dir));
    let rho = (x * x + y * y).sqrt();
    let phi = rho.atan2(z);
    if rho < 1e-12 {
        return (phi, 0.0);
    }
    let mut theta = y.atan2(x);
    if theta < 0.0 {
        theta += 2.0 * PI;
    }
    (phi, theta)
}

/// Bilinear deposit with pole rows spread evenly over their columns.
fn deposit(grid: &mut [Vec<Vec<f64>>], phi: f64, theta: f64, h: &[f64]) {
    let p = grid.len();
    let t = grid[0].len();
    let fp = phi / (PI / (p - 1) as f64);
    let r0 = (fp.floor() as usize).min(p - 2);
    let a = fp - r0 as f64;
    let ft = theta / (2.0 * PI / t as f64);
    let c0 = ft.floor() as usize % t;
    let b = ft - ft.floor();
    for (row, rw) in [(r0, 1.0 - a), (r0 + 1, a)] {
        if row == 0 || row == p - 1 {
            for col in 0..t {
                for (g, v) in grid[row][col].iter_mut().zip(h) {
                    *g += rw / t as f64 * v;
                }
            }
        } else {
            for (col, cw) in [(c0, 1.0 - b), ((c0 + 1) % t, b)] {
                for (g, v) in grid[row][col].iter_mut().zip(h) {
                    *g += rw * cw * v;
                }
            }
        }
    }
}

fn one_hot(k: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| (i == k) as u8 as f64).collect()
}

/// Energy and raw force-block output computed edge by edge.
pub fn loop_forward(model: &Model, system: &AtomicSystem) -> (f64, Vec<V3>) {
    let cfg = model.config();
    let p = P(model);
    let n = system.len();
    let s_count = cfg.species.len();
    let kind: Vec<usize> =
        system.numbers.iter().map(|z| cfg.species.iter().position(|s| s == z).unwrap()).collect();
    // Every ordered pair inside the cutoff is an edge (s, t).
    let mut edges = Vec::new();
    for t in 0..n {
        for s in 0..n {
            let d = len(sub(system.positions[s], system.positions[t]));
            if s != t && d < cfg.cutoff {
                edges.push((s, t));
            }
        }
    }
    let unit = |s: usize, t: usize| {
        let v = sub(system.positions[s], system.positions[t]);
        let l = len(v);
        [v[0] / l, v[1] / l, v[2] / l]
    };
    let dist = |s: usize, t: usize| len(sub(system.positions[s], system.positions[t]));
    let pair_oh = |s: usize, t: usize| [one_hot(kind[s], s_count), one_hot(kind[t], s_count)].concat();
    let pair_idx = |s: usize, t: usize| kind[s] * s_count + kind[t];
    let mut h: Vec<Vec<f64>> = edges
        .iter()
        .map(|&(s, t)| {
            let x = p.dist("init.dist", dist(s, t), pair_idx(s, t), cfg);
            p.embed("init.embed", &x, &pair_oh(s, t), cfg.experts)
        })
        .collect();
    let empty_grid = || vec![vec![vec![0.0; cfg.message_dim]; cfg.theta_cells]; cfg.phi_cells];
    for k in 0..cfg.layers {
        let mut next = h.clone();
        for (e, &(s, t)) in edges.iter().enumerate() {
            let mut grid = empty_grid();
            for (e2, &(s2, t2)) in edges.iter().enumerate() {
                if t2 != s {
                    continue;
                }
                let (phi, theta) = if s2 == t { (PI, 0.0) } else { angles(unit(s, t), unit(s2, t2)) };
                deposit(&mut grid, phi, theta, &h[e2]);
            }
            let c = p.conv(&format!("layer{k}.conv"), &grid, cfg);
            let a = p.embed(&format!("layer{k}.embed_in"), &c, &pair_oh(s, t), cfg.experts);
            let b = p.dist(&format!("layer{k}.dist"), dist(s, t), pair_idx(s, t), cfg);
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let delta = p.embed(&format!("layer{k}.embed_out"), &sum, &pair_oh(s, t), cfg.experts);
            for (x, d) in next[e].iter_mut().zip(delta) {
                *x += d;
            }
        }
        h = next;
    }
    let mut energy = 0.0;
    for atom in 0..n {
        let mut node = vec![0.0; cfg.message_dim];
        for (e, &(_, t)) in edges.iter().enumerate() {
            if t == atom {
                for (x, v) in node.iter_mut().zip(&h[e]) {
                    *x += v;
                }
            }
        }
        energy += p.embed("energy", &node, &one_hot(kind[atom], s_count), cfg.experts)[0];
    }
    let mut forces = vec![[0.0; 3]; n];
    if cfg.variant == Variant::ForceCentric {
        for atom in 0..n {
            for axis in 0..3 {
                let mut a = [0.0; 3];
                a[axis] = 1.0;
                let mut grid = empty_grid();
                for (e, &(s, t)) in edges.iter().enumerate() {
                    if t == atom {
                        let (phi, theta) = angles(a, unit(s, t));
                        deposit(&mut grid, phi, theta, &h[e]);
                    }
                }
                let c = p.conv("force.conv", &grid, cfg);
                let sp = one_hot(kind[atom], s_count);
                let x = p.embed("force.embed_in", &c, &sp, cfg.experts);
                forces[atom][axis] = p.embed("force.embed_out", &x, &sp, cfg.experts)[0];
            }
        }
    }
    (energy, forces)
}

pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        message_dim: 2,
        hidden_dim: 2,
        experts: 1,
        phi_cells: 4,
        theta_cells: 4,
        layers: 2,
        norm_groups: 1,
        num_basis: 16,
        variant,
        seed: 3,
        ..ModelConfig::default()
    }
}

pub fn randomized(cfg: ModelConfig, seed: u64) -> Model {
    let mut model = Model::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params().names().map(String::from).collect();
    for name in names {
        let t = model.params().by_name(&name).unwrap();
        let data = t.data().iter().map(|_| rng.gen_range(-0.8..0.8)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        model.params_mut().set(&name, value).unwrap();
    }
    model
}

pub fn trimers(seed: u64) -> Vec<AtomicSystem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        // Collinear: every incoming direction sits on a pole.
        AtomicSystem::new(vec![[0.0; 3], [1.4, 0.0, 0.0], [2.9, 0.0, 0.0]], vec![1, 6, 1]).unwrap(),
        // Bond along z, exercising the frame-axis switch.
        AtomicSystem::new(vec![[0.0; 3], [0.0, 0.0, 1.6], [1.1, 0.3, 0.2]], vec![6, 6, 1]).unwrap(),
    ];
    while out.len() < 8 {
        let pos: Vec<V3> =
            (0..3).map(|_| [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)]).collect();
        let z = (0..3).map(|_| if rng.gen_bool(0.5) { 1 } else { 6 }).collect();
        if let Ok(s) = AtomicSystem::new(pos, z) {
            if s.min_distance() > 0.8 {
                out.push(s);
            }
        }
    }
    out
}
