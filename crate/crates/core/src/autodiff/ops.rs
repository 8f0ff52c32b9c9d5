use std::f64::consts::PI;
use std::sync::Arc;

use super::{AutodiffError, Result, Tensor, Var};
use crate::geometry::{cross, dot, frame_axes, roll_reference, scale, sub, Vec3, POLE_EPS};
use crate::spherical::{bilinear_corners, sigmoid, Corner, GridShape};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Swish(Var),
    SoftmaxRows(Var),
    GroupNorm { x: Var, groups: usize, eps: f64 },
    Gaussian { z: Var, means: Arc<[f64]>, sigma: f64 },
    GatherRows { x: Var, index: Arc<[usize]> },
    SegmentSum { x: Var, segment: Arc<[usize]>, count: usize },
    ConcatCols(Var, Var),
    Reshape { x: Var, shape: Vec<usize> },
    SumAll(Var),
    SumAxis { x: Var, axis: usize, mean: bool },
    CircularShift { x: Var, axis: usize, shift: usize },
    L1Mean(Var, Var),
    Mixture { values: Var, weights: Var },
    PairDiff { x: Var, source: Arc<[usize]>, target: Arc<[usize]> },
    RowNorm(Var),
    NormalizeRows(Var),
    PolarAngles { axes: Var, dirs: Var, antipodal: Arc<[bool]> },
    BilinearScatter { values: Var, angles: Var, grid: Arc<[usize]>, grids: usize, shape: GridShape },
    SpinCorrelate { grid: Var, filters: Var },
    ScatterCorrelate {
        values: Var,
        angles: Var,
        filters: Var,
        rows: Arc<[usize]>,
        grid: Arc<[usize]>,
        grids: usize,
        shape: GridShape,
    },
}

fn err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::shape(op, detail)
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(err(op, format!("expected rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(err(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_index(op: &'static str, index: &[usize], bound: usize) -> Result<()> {
    if let Some(&bad) = index.iter().find(|&&i| i >= bound) {
        return Err(err(op, format!("index {bad} out of range for {bound} rows")));
    }
    Ok(())
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn vec3(s: &[f64]) -> Vec3 {
    [s[0], s[1], s[2]]
}

fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Forward projection for one item: `(φ, θ, local direction)`.
fn project(u: Vec3, v: Vec3) -> (f64, f64, Vec3) {
    let (e1, e2, _) = frame_axes(u);
    let local = [dot(e1, v), dot(e2, v), dot(u, v)];
    let (phi, theta) = crate::geometry::polar_angles(local);
    (phi, theta, local)
}

/// Filters `[D, Φ, Θ, M]` transposed to `[Φ, Θ, M, D]`.
fn transpose_filters(w: &[f64], d: usize, cells_m: usize) -> Vec<f64> {
    let mut t = vec![0.0; w.len()];
    for k in 0..d {
        for c in 0..cells_m {
            t[c * d + k] = w[k * cells_m + c];
        }
    }
    t
}

fn untranspose_filters(t: &[f64], d: usize, cells_m: usize) -> Vec<f64> {
    let mut w = vec![0.0; t.len()];
    for k in 0..d {
        for c in 0..cells_m {
            w[k * cells_m + c] = t[c * d + k];
        }
    }
    w
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b)
            | ConcatCols(a, b) | L1Mean(a, b) => vec![*a, *b],
            Scale(a, _) | Swish(a) | SoftmaxRows(a) | SumAll(a) | RowNorm(a) | NormalizeRows(a) => vec![*a],
            GroupNorm { x, .. }
            | GatherRows { x, .. }
            | SegmentSum { x, .. }
            | Reshape { x, .. }
            | SumAxis { x, .. }
            | CircularShift { x, .. }
            | PairDiff { x, .. } => vec![*x],
            Gaussian { z, .. } => vec![*z],
            Mixture { values, weights } => vec![*values, *weights],
            PolarAngles { axes, dirs, .. } => vec![*axes, *dirs],
            BilinearScatter { values, angles, .. } => vec![*values, *angles],
            SpinCorrelate { grid, filters } => vec![*grid, *filters],
            ScatterCorrelate { values, angles, filters, .. } => vec![*values, *angles, *filters],
        }
    }

    pub(crate) fn eval(&self, x: &[&Tensor]) -> Result<Tensor> {
        use Op::*;
        match self {
            Leaf => unreachable!("leaves are never evaluated"),
            MatMul(..) => {
                let (a, b) = (x[0], x[1]);
                expect_rank("matmul", a, 2)?;
                expect_rank("matmul", b, 2)?;
                let (n, k) = (a.shape()[0], a.shape()[1]);
                let (k2, m) = (b.shape()[0], b.shape()[1]);
                if k != k2 {
                    return Err(err("matmul", format!("inner dimensions differ: [{n}, {k}] x [{k2}, {m}]")));
                }
                let mut out = vec![0.0; n * m];
                let (ad, bd) = (a.data(), b.data());
                for i in 0..n {
                    let orow = &mut out[i * m..(i + 1) * m];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av != 0.0 {
                            axpy(av, &bd[p * m..(p + 1) * m], orow);
                        }
                    }
                }
                Ok(Tensor::from_parts(vec![n, m], out))
            }
            Add(..) | Sub(..) | Mul(..) => {
                let name = match self {
                    Add(..) => "add",
                    Sub(..) => "sub",
                    _ => "mul",
                };
                same_shape(name, x[0], x[1])?;
                let f: fn(f64, f64) -> f64 = match self {
                    Add(..) => |a, b| a + b,
                    Sub(..) => |a, b| a - b,
                    _ => |a, b| a * b,
                };
                let data = x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| f(a, b)).collect();
                Ok(Tensor::from_parts(x[0].shape().to_vec(), data))
            }
            AddRow(..) | MulRow(..) => {
                let name = if matches!(self, AddRow(..)) { "add_row" } else { "mul_row" };
                let (a, r) = (x[0], x[1]);
                if a.row_len() != r.len() || r.rank() != 1 {
                    return Err(err(name, format!("cannot broadcast {:?} over rows of {:?}", r.shape(), a.shape())));
                }
                let w = r.len();
                let add = matches!(self, AddRow(..));
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if add { v + r.data()[i % w] } else { v * r.data()[i % w] })
                    .collect();
                Ok(Tensor::from_parts(a.shape().to_vec(), data))
            }
            Scale(_, c) => Ok(x[0].map(|v| v * c)),
            Swish(_) => Ok(x[0].map(|v| v * sigmoid(v))),
            SoftmaxRows(_) => {
                let a = x[0];
                expect_rank("softmax_rows", a, 2)?;
                let mut out = a.clone();
                for i in 0..a.rows() {
                    let row = out.row_mut(i);
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        total += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= total;
                    }
                }
                Ok(out)
            }
            GroupNorm { groups, eps, .. } => {
                let a = x[0];
                expect_rank("group_norm", a, 2)?;
                let c = a.shape()[1];
                if *groups == 0 || !c.is_multiple_of(*groups) {
                    return Err(err("group_norm", format!("{c} channels do not split into {groups} groups")));
                }
                let k = c / groups;
                let mut out = a.clone();
                for chunk in out.data_mut().chunks_mut(k) {
                    let mean = chunk.iter().sum::<f64>() / k as f64;
                    let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    for v in chunk.iter_mut() {
                        *v = (*v - mean) * rstd;
                    }
                }
                Ok(out)
            }
            Gaussian { means, sigma, .. } => {
                let z = x[0];
                expect_rank("gaussian", z, 1)?;
                let nb = means.len();
                let inv = 1.0 / (2.0 * sigma * sigma);
                let mut out = Vec::with_capacity(z.len() * nb);
                for &zv in z.data() {
                    out.extend(means.iter().map(|&mu| (-(zv - mu) * (zv - mu) * inv).exp()));
                }
                Ok(Tensor::from_parts(vec![z.len(), nb], out))
            }
            GatherRows { index, .. } => {
                let a = x[0];
                if a.rank() == 0 {
                    return Err(err("gather_rows", "cannot gather rows of a scalar".into()));
                }
                check_index("gather_rows", index, a.rows())?;
                let mut data = Vec::with_capacity(index.len() * a.row_len());
                for &i in index.iter() {
                    data.extend_from_slice(a.row(i));
                }
                let mut shape = a.shape().to_vec();
                shape[0] = index.len();
                Ok(Tensor::from_parts(shape, data))
            }
            SegmentSum { segment, count, .. } => {
                let a = x[0];
                if a.rank() == 0 || segment.len() != a.rows() {
                    return Err(err(
                        "segment_sum",
                        format!("{} segment ids for input of shape {:?}", segment.len(), a.shape()),
                    ));
                }
                check_index("segment_sum", segment, *count)?;
                let mut shape = a.shape().to_vec();
                shape[0] = *count;
                let mut out = Tensor::zeros(&shape);
                for (i, &s) in segment.iter().enumerate() {
                    let src = a.row(i);
                    for (o, v) in out.row_mut(s).iter_mut().zip(src) {
                        *o += v;
                    }
                }
                Ok(out)
            }
            ConcatCols(..) => {
                let (a, b) = (x[0], x[1]);
                expect_rank("concat_cols", a, 2)?;
                expect_rank("concat_cols", b, 2)?;
                if a.rows() != b.rows() {
                    return Err(err("concat_cols", format!("row counts differ: {:?} and {:?}", a.shape(), b.shape())));
                }
                let mut data = Vec::with_capacity(a.len() + b.len());
                for i in 0..a.rows() {
                    data.extend_from_slice(a.row(i));
                    data.extend_from_slice(b.row(i));
                }
                Ok(Tensor::from_parts(vec![a.rows(), a.shape()[1] + b.shape()[1]], data))
            }
            Reshape { shape, .. } => x[0].clone().reshaped(shape.clone()),
            SumAll(_) => Ok(Tensor::scalar(x[0].data().iter().sum())),
            SumAxis { axis, mean, .. } => {
                let a = x[0];
                if *axis >= a.rank() {
                    return Err(err("sum_axis", format!("axis {axis} out of range for {:?}", a.shape())));
                }
                let (outer, len, inner) = axis_split(a.shape(), *axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &a.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                if *mean {
                    for v in &mut out {
                        *v /= len as f64;
                    }
                }
                let mut shape = a.shape().to_vec();
                shape.remove(*axis);
                Ok(Tensor::from_parts(shape, out))
            }
            CircularShift { axis, shift, .. } => {
                let a = x[0];
                if *axis >= a.rank() {
                    return Err(err("circular_shift", format!("axis {axis} out of range for {:?}", a.shape())));
                }
                let (outer, len, inner) = axis_split(a.shape(), *axis);
                let mut out = vec![0.0; a.len()];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = (l + shift) % len;
                        out[(o * len + dst) * inner..(o * len + dst + 1) * inner]
                            .copy_from_slice(&a.data()[(o * len + l) * inner..(o * len + l + 1) * inner]);
                    }
                }
                Ok(Tensor::from_parts(a.shape().to_vec(), out))
            }
            L1Mean(..) => {
                same_shape("l1_mean", x[0], x[1])?;
                if x[0].is_empty() {
                    return Ok(Tensor::scalar(0.0));
                }
                let s: f64 = x[0].data().iter().zip(x[1].data()).map(|(a, b)| (a - b).abs()).sum();
                Ok(Tensor::scalar(s / x[0].len() as f64))
            }
            Mixture { .. } => {
                let (v, w) = (x[0], x[1]);
                expect_rank("mixture", v, 2)?;
                expect_rank("mixture", w, 2)?;
                let (n, b) = (w.shape()[0], w.shape()[1]);
                if v.shape()[0] != n || b == 0 || v.shape()[1] % b != 0 {
                    return Err(err("mixture", format!("values {:?} do not match weights {:?}", v.shape(), w.shape())));
                }
                let d = v.shape()[1] / b;
                let mut out = vec![0.0; n * d];
                for e in 0..n {
                    let wr = w.row(e);
                    let vr = v.row(e);
                    for k in 0..d {
                        out[e * d + k] = (0..b).map(|j| vr[k * b + j] * wr[j]).sum();
                    }
                }
                Ok(Tensor::from_parts(vec![n, d], out))
            }
            PairDiff { source, target, .. } => {
                let a = x[0];
                expect_rank("pair_diff", a, 2)?;
                if source.len() != target.len() {
                    return Err(err("pair_diff", "source and target lists differ in length".into()));
                }
                check_index("pair_diff", source, a.rows())?;
                check_index("pair_diff", target, a.rows())?;
                let w = a.row_len();
                let mut data = Vec::with_capacity(source.len() * w);
                for (&s, &t) in source.iter().zip(target.iter()) {
                    data.extend(a.row(s).iter().zip(a.row(t)).map(|(p, q)| p - q));
                }
                Ok(Tensor::from_parts(vec![source.len(), w], data))
            }
            RowNorm(_) => {
                let a = x[0];
                expect_rank("row_norm", a, 2)?;
                let data = (0..a.rows()).map(|i| a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
                Ok(Tensor::from_parts(vec![a.rows()], data))
            }
            NormalizeRows(_) => {
                let a = x[0];
                expect_rank("normalize_rows", a, 2)?;
                let mut out = a.clone();
                for i in 0..a.rows() {
                    let row = out.row_mut(i);
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n == 0.0 {
                        return Err(AutodiffError::NonFinite { context: format!("normalize_rows: row {i} is zero") });
                    }
                    for v in row.iter_mut() {
                        *v /= n;
                    }
                }
                Ok(out)
            }
            PolarAngles { antipodal, .. } => {
                let (u, v) = (x[0], x[1]);
                same_shape("polar_angles", u, v)?;
                if u.rank() != 2 || u.shape()[1] != 3 || antipodal.len() != u.rows() {
                    return Err(err(
                        "polar_angles",
                        format!("expected [N, 3] inputs and N flags, got {:?} and {} flags", u.shape(), antipodal.len()),
                    ));
                }
                let mut out = Vec::with_capacity(2 * u.rows());
                for i in 0..u.rows() {
                    if antipodal[i] {
                        out.extend_from_slice(&[PI, 0.0]);
                    } else {
                        let (phi, theta, _) = project(vec3(u.row(i)), vec3(v.row(i)));
                        out.extend_from_slice(&[phi, theta]);
                    }
                }
                Ok(Tensor::from_parts(vec![u.rows(), 2], out))
            }
            BilinearScatter { grid, grids, shape, .. } => {
                let (vals, ang) = (x[0], x[1]);
                expect_rank("bilinear_scatter", vals, 2)?;
                let (n, m) = (vals.rows(), vals.shape()[1]);
                if ang.shape() != [n, 2] || grid.len() != n {
                    return Err(err(
                        "bilinear_scatter",
                        format!("{n} values need [N, 2] angles and N grid ids, got {:?} and {}", ang.shape(), grid.len()),
                    ));
                }
                check_index("bilinear_scatter", grid, *grids)?;
                let (p, t) = (shape.phi_cells, shape.theta_cells);
                let per_grid = p * t * m;
                let mut out = vec![0.0; grids * per_grid];
                for i in 0..n {
                    let a = ang.row(i);
                    let h = vals.row(i);
                    let base = grid[i] * per_grid;
                    for c in bilinear_corners(*shape, a[0], a[1]).as_slice() {
                        match *c {
                            Corner::Cell { row, col, weight, .. } => {
                                let o = base + (row * t + col) * m;
                                axpy(weight, h, &mut out[o..o + m]);
                            }
                            Corner::Ring { row, weight, .. } => {
                                for col in 0..t {
                                    let o = base + (row * t + col) * m;
                                    axpy(weight / t as f64, h, &mut out[o..o + m]);
                                }
                            }
                        }
                    }
                }
                Ok(Tensor::from_parts(vec![*grids, p, t, m], out))
            }
            SpinCorrelate { .. } => {
                let (g, w) = (x[0], x[1]);
                expect_rank("spin_correlate", g, 4)?;
                expect_rank("spin_correlate", w, 4)?;
                if g.shape()[1..] != w.shape()[1..] {
                    return Err(err(
                        "spin_correlate",
                        format!("grid {:?} and filters {:?} must share Φ×Θ×M", g.shape(), w.shape()),
                    ));
                }
                let (ng, p, t, m) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
                let d = w.shape()[0];
                let mut out = vec![0.0; ng * t * d];
                for gi in 0..ng {
                    let gd = g.row(gi);
                    for j in 0..t {
                        for k in 0..d {
                            let wd = w.row(k);
                            let mut acc = 0.0;
                            for r in 0..p {
                                for c in 0..t {
                                    let go = (r * t + (c + j) % t) * m;
                                    let wo = (r * t + c) * m;
                                    acc += gd[go..go + m].iter().zip(&wd[wo..wo + m]).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                            out[(gi * t + j) * d + k] = acc;
                        }
                    }
                }
                Ok(Tensor::from_parts(vec![ng, t, d], out))
            }
            ScatterCorrelate { rows, grid, grids, shape, .. } => {
                let (vals, ang, w) = (x[0], x[1], x[2]);
                expect_rank("scatter_correlate", vals, 2)?;
                expect_rank("scatter_correlate", w, 4)?;
                let m = vals.shape()[1];
                let (p, t) = (shape.phi_cells, shape.theta_cells);
                if w.shape()[1..] != [p, t, m] {
                    return Err(err(
                        "scatter_correlate",
                        format!("filters {:?} do not match grid {p}x{t}x{m}", w.shape()),
                    ));
                }
                let n = rows.len();
                if ang.shape() != [n, 2] || grid.len() != n {
                    return Err(err(
                        "scatter_correlate",
                        format!("{n} items need [N, 2] angles and N grid ids, got {:?} and {}", ang.shape(), grid.len()),
                    ));
                }
                check_index("scatter_correlate", rows, vals.rows())?;
                check_index("scatter_correlate", grid, *grids)?;
                let d = w.shape()[0];
                let wt = transpose_filters(w.data(), d, p * t * m);
                let ring = ring_sums(&wt, p, t, m, d);
                let mut out = vec![0.0; grids * t * d];
                let mut tmp = vec![0.0; d];
                for i in 0..n {
                    let h = vals.row(rows[i]);
                    let a = ang.row(i);
                    let ob = grid[i] * t * d;
                    for c in bilinear_corners(*shape, a[0], a[1]).as_slice() {
                        match *c {
                            Corner::Cell { row, col, weight, .. } => {
                                for j in 0..t {
                                    let l = (col + t - j) % t;
                                    let wb = (row * t + l) * m * d;
                                    let o = &mut out[ob + j * d..ob + (j + 1) * d];
                                    for (mi, hv) in h.iter().enumerate() {
                                        axpy(weight * hv, &wt[wb + mi * d..wb + (mi + 1) * d], o);
                                    }
                                }
                            }
                            Corner::Ring { row, weight, .. } => {
                                tmp.iter_mut().for_each(|v| *v = 0.0);
                                let rb = ring_row(row, p) * m * d;
                                for (mi, hv) in h.iter().enumerate() {
                                    axpy(weight * hv / t as f64, &ring[rb + mi * d..rb + (mi + 1) * d], &mut tmp);
                                }
                                for j in 0..t {
                                    axpy(1.0, &tmp, &mut out[ob + j * d..ob + (j + 1) * d]);
                                }
                            }
                        }
                    }
                }
                Ok(Tensor::from_parts(vec![*grids, t, d], out))
            }
        }
    }

    /// Gradients for each of `self.inputs()`, given the upstream gradient `g`.
    pub(crate) fn backward(&self, x: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(..) => {
                let (a, b) = (x[0], x[1]);
                let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let (ad, bd, gd) = (a.data(), b.data(), g.data());
                let mut ga = vec![0.0; n * k];
                let mut gb = vec![0.0; k * m];
                for i in 0..n {
                    let grow = &gd[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &bd[p * m..(p + 1) * m];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(u, v)| u * v).sum();
                        let av = ad[i * k + p];
                        if av != 0.0 {
                            axpy(av, grow, &mut gb[p * m..(p + 1) * m]);
                        }
                    }
                }
                vec![Tensor::from_parts(vec![n, k], ga), Tensor::from_parts(vec![k, m], gb)]
            }
            Add(..) => vec![g.clone(), g.clone()],
            Sub(..) => vec![g.clone(), g.map(|v| -v)],
            Mul(..) => {
                let ga = g.data().iter().zip(x[1].data()).map(|(u, v)| u * v).collect();
                let gb = g.data().iter().zip(x[0].data()).map(|(u, v)| u * v).collect();
                vec![Tensor::from_parts(g.shape().to_vec(), ga), Tensor::from_parts(g.shape().to_vec(), gb)]
            }
            AddRow(..) => {
                let w = x[1].len();
                let mut gr = vec![0.0; w];
                for (i, v) in g.data().iter().enumerate() {
                    gr[i % w] += v;
                }
                vec![g.clone(), Tensor::from_parts(x[1].shape().to_vec(), gr)]
            }
            MulRow(..) => {
                let (a, r) = (x[0], x[1]);
                let w = r.len();
                let mut gr = vec![0.0; w];
                let mut ga = vec![0.0; a.len()];
                for (i, gv) in g.data().iter().enumerate() {
                    gr[i % w] += gv * a.data()[i];
                    ga[i] = gv * r.data()[i % w];
                }
                vec![Tensor::from_parts(a.shape().to_vec(), ga), Tensor::from_parts(r.shape().to_vec(), gr)]
            }
            Scale(_, c) => vec![g.map(|v| v * c)],
            Swish(_) => {
                let data = x[0]
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * (s + v * s * (1.0 - s))
                    })
                    .collect();
                vec![Tensor::from_parts(g.shape().to_vec(), data)]
            }
            SoftmaxRows(_) => {
                let mut ga = g.clone();
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let dotp: f64 = g.row(i).iter().zip(y).map(|(a, b)| a * b).sum();
                    for (gv, yv) in ga.row_mut(i).iter_mut().zip(y) {
                        *gv = yv * (*gv - dotp);
                    }
                }
                vec![ga]
            }
            GroupNorm { groups, eps, .. } => {
                let a = x[0];
                let k = a.shape()[1] / groups;
                let mut ga = vec![0.0; a.len()];
                for ((xs, gs), dst) in a.data().chunks(k).zip(g.data().chunks(k)).zip(ga.chunks_mut(k)) {
                    let mean = xs.iter().sum::<f64>() / k as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let gmean = gs.iter().sum::<f64>() / k as f64;
                    let gx = xs.iter().zip(gs).map(|(v, gv)| gv * (v - mean) * rstd).sum::<f64>() / k as f64;
                    for ((d, v), gv) in dst.iter_mut().zip(xs).zip(gs) {
                        let xhat = (v - mean) * rstd;
                        *d = rstd * (gv - gmean - xhat * gx);
                    }
                }
                vec![Tensor::from_parts(a.shape().to_vec(), ga)]
            }
            Gaussian { means, sigma, .. } => {
                let z = x[0];
                let nb = means.len();
                let s2 = sigma * sigma;
                let data = (0..z.len())
                    .map(|i| {
                        (0..nb)
                            .map(|j| {
                                let y = out.data()[i * nb + j];
                                -g.data()[i * nb + j] * y * (z.data()[i] - means[j]) / s2
                            })
                            .sum()
                    })
                    .collect();
                vec![Tensor::from_parts(z.shape().to_vec(), data)]
            }
            GatherRows { index, .. } => {
                let mut ga = Tensor::zeros(x[0].shape());
                for (r, &i) in index.iter().enumerate() {
                    let src = g.row(r);
                    for (d, v) in ga.row_mut(i).iter_mut().zip(src) {
                        *d += v;
                    }
                }
                vec![ga]
            }
            SegmentSum { segment, .. } => {
                let mut ga = Tensor::zeros(x[0].shape());
                for (i, &s) in segment.iter().enumerate() {
                    ga.row_mut(i).copy_from_slice(g.row(s));
                }
                vec![ga]
            }
            ConcatCols(..) => {
                let (p, q) = (x[0].shape()[1], x[1].shape()[1]);
                let n = x[0].rows();
                let mut ga = Vec::with_capacity(n * p);
                let mut gb = Vec::with_capacity(n * q);
                for i in 0..n {
                    let r = g.row(i);
                    ga.extend_from_slice(&r[..p]);
                    gb.extend_from_slice(&r[p..]);
                }
                vec![Tensor::from_parts(vec![n, p], ga), Tensor::from_parts(vec![n, q], gb)]
            }
            Reshape { .. } => vec![Tensor::from_parts(x[0].shape().to_vec(), g.data().to_vec())],
            SumAll(_) => vec![Tensor::filled(x[0].shape(), g.item())],
            SumAxis { axis, mean, .. } => {
                let a = x[0];
                let (outer, len, inner) = axis_split(a.shape(), *axis);
                let factor = if *mean { 1.0 / len as f64 } else { 1.0 };
                let mut ga = vec![0.0; a.len()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] = g.data()[o * inner + i] * factor;
                        }
                    }
                }
                vec![Tensor::from_parts(a.shape().to_vec(), ga)]
            }
            CircularShift { axis, shift, .. } => {
                let a = x[0];
                let (outer, len, inner) = axis_split(a.shape(), *axis);
                let mut ga = vec![0.0; a.len()];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = (l + shift) % len;
                        ga[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g.data()[(o * len + dst) * inner..(o * len + dst + 1) * inner]);
                    }
                }
                vec![Tensor::from_parts(a.shape().to_vec(), ga)]
            }
            L1Mean(..) => {
                let n = x[0].len().max(1) as f64;
                let gv = g.item();
                let ga: Vec<f64> = x[0]
                    .data()
                    .iter()
                    .zip(x[1].data())
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            gv / n
                        } else if d < 0.0 {
                            -gv / n
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![Tensor::from_parts(x[0].shape().to_vec(), ga), Tensor::from_parts(x[1].shape().to_vec(), gb)]
            }
            Mixture { .. } => {
                let (v, w) = (x[0], x[1]);
                let (n, b) = (w.shape()[0], w.shape()[1]);
                let d = v.shape()[1] / b;
                let mut gv = vec![0.0; v.len()];
                let mut gw = vec![0.0; w.len()];
                for e in 0..n {
                    let (vr, wr, gr) = (v.row(e), w.row(e), g.row(e));
                    for k in 0..d {
                        for j in 0..b {
                            gv[e * d * b + k * b + j] = gr[k] * wr[j];
                            gw[e * b + j] += gr[k] * vr[k * b + j];
                        }
                    }
                }
                vec![Tensor::from_parts(v.shape().to_vec(), gv), Tensor::from_parts(w.shape().to_vec(), gw)]
            }
            PairDiff { source, target, .. } => {
                let mut ga = Tensor::zeros(x[0].shape());
                for (e, (&s, &t)) in source.iter().zip(target.iter()).enumerate() {
                    let r = g.row(e).to_vec();
                    for (d, v) in ga.row_mut(s).iter_mut().zip(&r) {
                        *d += v;
                    }
                    for (d, v) in ga.row_mut(t).iter_mut().zip(&r) {
                        *d -= v;
                    }
                }
                vec![ga]
            }
            RowNorm(_) => {
                let a = x[0];
                let mut ga = a.clone();
                for i in 0..a.rows() {
                    let n = out.data()[i];
                    let gv = g.data()[i];
                    for v in ga.row_mut(i).iter_mut() {
                        *v = if n > 0.0 { gv * *v / n } else { 0.0 };
                    }
                }
                vec![ga]
            }
            NormalizeRows(_) => {
                let a = x[0];
                let mut ga = g.clone();
                for i in 0..a.rows() {
                    let n = a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let y = out.row(i);
                    let yg: f64 = y.iter().zip(g.row(i)).map(|(p, q)| p * q).sum();
                    for (d, yv) in ga.row_mut(i).iter_mut().zip(y) {
                        *d = (*d - yv * yg) / n;
                    }
                }
                vec![ga]
            }
            PolarAngles { antipodal, .. } => {
                let (u_all, v_all) = (x[0], x[1]);
                let mut gu = Tensor::zeros(u_all.shape());
                let mut gv = Tensor::zeros(v_all.shape());
                for i in 0..u_all.rows() {
                    if antipodal[i] {
                        continue;
                    }
                    let (u, v) = (vec3(u_all.row(i)), vec3(v_all.row(i)));
                    let (gphi, gtheta) = (g.row(i)[0], g.row(i)[1]);
                    let (du, dv) = polar_backward(u, v, gphi, gtheta);
                    gu.row_mut(i).copy_from_slice(&du);
                    gv.row_mut(i).copy_from_slice(&dv);
                }
                vec![gu, gv]
            }
            BilinearScatter { grid, shape, .. } => {
                let (vals, ang) = (x[0], x[1]);
                let (n, m) = (vals.rows(), vals.shape()[1]);
                let (p, t) = (shape.phi_cells, shape.theta_cells);
                let per_grid = p * t * m;
                let mut gvals = Tensor::zeros(vals.shape());
                let mut gang = Tensor::zeros(ang.shape());
                let gd = g.data();
                let mut acc = vec![0.0; m];
                for i in 0..n {
                    let a = ang.row(i);
                    let h = vals.row(i).to_vec();
                    let base = grid[i] * per_grid;
                    let (mut dphi, mut dtheta) = (0.0, 0.0);
                    let gvi = gvals.row_mut(i);
                    for c in bilinear_corners(*shape, a[0], a[1]).as_slice() {
                        acc.iter_mut().for_each(|v| *v = 0.0);
                        match *c {
                            Corner::Cell { row, col, .. } => {
                                let o = base + (row * t + col) * m;
                                acc.copy_from_slice(&gd[o..o + m]);
                            }
                            Corner::Ring { row, .. } => {
                                for col in 0..t {
                                    let o = base + (row * t + col) * m;
                                    axpy(1.0 / t as f64, &gd[o..o + m], &mut acc);
                                }
                            }
                        }
                        let hg: f64 = h.iter().zip(&acc).map(|(a, b)| a * b).sum();
                        axpy(c.weight(), &acc, gvi);
                        match *c {
                            Corner::Cell { d_phi, d_theta, .. } => {
                                dphi += d_phi * hg;
                                dtheta += d_theta * hg;
                            }
                            Corner::Ring { d_phi, .. } => dphi += d_phi * hg,
                        }
                    }
                    gang.row_mut(i).copy_from_slice(&[dphi, dtheta]);
                }
                vec![gvals, gang]
            }
            SpinCorrelate { .. } => {
                let (gr, w) = (x[0], x[1]);
                let (ng, p, t, m) = (gr.shape()[0], gr.shape()[1], gr.shape()[2], gr.shape()[3]);
                let d = w.shape()[0];
                let mut ggrid = Tensor::zeros(gr.shape());
                let mut gw = Tensor::zeros(w.shape());
                for gi in 0..ng {
                    for j in 0..t {
                        for k in 0..d {
                            let gv = g.data()[(gi * t + j) * d + k];
                            if gv == 0.0 {
                                continue;
                            }
                            for r in 0..p {
                                for c in 0..t {
                                    let go = gi * p * t * m + (r * t + (c + j) % t) * m;
                                    let wo = k * p * t * m + (r * t + c) * m;
                                    for mi in 0..m {
                                        ggrid.data_mut()[go + mi] += gv * w.data()[wo + mi];
                                        gw.data_mut()[wo + mi] += gv * gr.data()[go + mi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![ggrid, gw]
            }
            ScatterCorrelate { rows, grid, grids, shape, .. } => {
                let (vals, ang, w) = (x[0], x[1], x[2]);
                let m = vals.shape()[1];
                let (p, t) = (shape.phi_cells, shape.theta_cells);
                let d = w.shape()[0];
                let wt = transpose_filters(w.data(), d, p * t * m);
                let ring = ring_sums(&wt, p, t, m, d);
                let gd = g.data();
                // Column sums of the upstream gradient, used by pole rings.
                let mut gsum = vec![0.0; grids * d];
                for gi in 0..*grids {
                    for j in 0..t {
                        let src = &gd[(gi * t + j) * d..(gi * t + j + 1) * d];
                        axpy(1.0, src, &mut gsum[gi * d..(gi + 1) * d]);
                    }
                }
                let mut gvals = Tensor::zeros(vals.shape());
                let mut gang = Tensor::zeros(ang.shape());
                let mut gwt = vec![0.0; wt.len()];
                let mut gring = vec![0.0; ring.len()];
                let mut acc = vec![0.0; m];
                for i in 0..rows.len() {
                    let h = vals.row(rows[i]).to_vec();
                    let a = ang.row(i);
                    let ob = grid[i] * t * d;
                    let (mut dphi, mut dtheta) = (0.0, 0.0);
                    for c in bilinear_corners(*shape, a[0], a[1]).as_slice() {
                        acc.iter_mut().for_each(|v| *v = 0.0);
                        let weight = c.weight();
                        match *c {
                            Corner::Cell { row, col, .. } => {
                                for j in 0..t {
                                    let l = (col + t - j) % t;
                                    let wb = (row * t + l) * m * d;
                                    let go = &gd[ob + j * d..ob + (j + 1) * d];
                                    for mi in 0..m {
                                        let wrow = &wt[wb + mi * d..wb + (mi + 1) * d];
                                        acc[mi] += wrow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                                        axpy(weight * h[mi], go, &mut gwt[wb + mi * d..wb + (mi + 1) * d]);
                                    }
                                }
                            }
                            Corner::Ring { row, .. } => {
                                let rb = ring_row(row, p) * m * d;
                                let s = &gsum[grid[i] * d..(grid[i] + 1) * d];
                                for mi in 0..m {
                                    let rrow = &ring[rb + mi * d..rb + (mi + 1) * d];
                                    acc[mi] = rrow.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / t as f64;
                                    axpy(weight * h[mi] / t as f64, s, &mut gring[rb + mi * d..rb + (mi + 1) * d]);
                                }
                            }
                        }
                        let hg: f64 = h.iter().zip(&acc).map(|(a, b)| a * b).sum();
                        axpy(weight, &acc, gvals.row_mut(rows[i]));
                        match *c {
                            Corner::Cell { d_phi, d_theta, .. } => {
                                dphi += d_phi * hg;
                                dtheta += d_theta * hg;
                            }
                            Corner::Ring { d_phi, .. } => dphi += d_phi * hg,
                        }
                    }
                    let ga = gang.row_mut(i);
                    ga[0] += dphi;
                    ga[1] += dtheta;
                }
                // Each ring weight is the sum of its row's columns.
                for (ri, row) in [0, p - 1].into_iter().enumerate() {
                    let src = &gring[ri * m * d..(ri + 1) * m * d];
                    for col in 0..t {
                        let wb = (row * t + col) * m * d;
                        axpy(1.0, src, &mut gwt[wb..wb + m * d]);
                    }
                }
                let gw = untranspose_filters(&gwt, d, p * t * m);
                vec![gvals, gang, Tensor::from_parts(w.shape().to_vec(), gw)]
            }
        }
    }
}

/// Index of a pole row in the `[2][M][D]` ring-sum table.
fn ring_row(row: usize, p: usize) -> usize {
    if row == 0 {
        0
    } else {
        debug_assert_eq!(row, p - 1);
        1
    }
}

/// Column sums of the transposed filters over the two pole rows, `[2][M][D]`.
fn ring_sums(wt: &[f64], p: usize, t: usize, m: usize, d: usize) -> Vec<f64> {
    let mut ring = vec![0.0; 2 * m * d];
    for (ri, row) in [0, p - 1].into_iter().enumerate() {
        for col in 0..t {
            let wb = (row * t + col) * m * d;
            axpy(1.0, &wt[wb..wb + m * d], &mut ring[ri * m * d..(ri + 1) * m * d]);
        }
    }
    ring
}

/// Reverse pass of the per-edge frame projection for one item.
fn polar_backward(u: Vec3, v: Vec3, gphi: f64, gtheta: f64) -> (Vec3, Vec3) {
    let r = roll_reference(u);
    let (e1, e2, wn) = frame_axes(u);
    let (_, _, local) = project(u, v);
    let [lx, ly, lz] = local;
    let rho2 = lx * lx + ly * ly;
    let rho = rho2.sqrt();
    if rho < POLE_EPS {
        return ([0.0; 3], [0.0; 3]);
    }
    let r2 = rho2 + lz * lz;
    let gl = [
        gphi * lz * lx / (rho * r2) - gtheta * ly / rho2,
        gphi * lz * ly / (rho * r2) + gtheta * lx / rho2,
        -gphi * rho / r2,
    ];
    let gv = add3(add3(scale(e1, gl[0]), scale(e2, gl[1])), scale(u, gl[2]));
    let g_e2 = scale(v, gl[1]);
    let mut g_e1 = scale(v, gl[0]);
    let mut g_u = scale(v, gl[2]);
    // e2 = u × e1
    g_u = add3(g_u, cross(e1, g_e2));
    g_e1 = add3(g_e1, cross(g_e2, u));
    // e1 = w / |w|
    let g_w = scale(sub(g_e1, scale(e1, dot(g_e1, e1))), 1.0 / wn);
    // w = r - (r·u) u
    g_u = sub(g_u, add3(scale(g_w, dot(r, u)), scale(r, dot(g_w, u))));
    (g_u, gv)
}
