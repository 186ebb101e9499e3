//! Frozen-feature evaluation: pooled feature extraction, a linear probe,
//! local-shape probing with the consistency network, and point-set distances.
//!
//! The linear probe is L2-regularized multinomial logistic regression on
//! standardized features, fitted by accelerated full-batch gradient descent
//! with the regularization strength chosen on a validation split.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{gemm, Mode, Tensor};
use crate::config::Config;
use crate::consistency::ConsInput;
use crate::data::{derive_seed, Dataset};
use crate::encoder::{CloudGeometry, LayerId};
use crate::error::{Error, Result};
use crate::geom::{dist, Point, PointCloud, Region};
use crate::loss::PointDisc;

/// Clouds encoded per forward pass during feature extraction.
const EXTRACT_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub lambdas: Vec<f64>,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub probe_samples: usize,
    pub probe_top_k: usize,
    pub probe_layer: LayerId,
    pub probes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lambdas: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0],
            max_iters: 5000,
            grad_tol: 1e-6,
            probe_samples: 5000,
            probe_top_k: 100,
            probe_layer: LayerId::L2,
            probes: 20,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let cfg = EvalConfig {
            lambdas: c.f64_list("eval.lambdas"),
            max_iters: c.usize("eval.max_iters"),
            grad_tol: c.f64("eval.grad_tol"),
            probe_samples: c.usize("eval.probe_samples"),
            probe_top_k: c.usize("eval.probe_top_k"),
            probe_layer: c.get("eval.probe_layer").parse()?,
            probes: c.usize("eval.probes"),
            seed: c.u64("eval.seed"),
        };
        if cfg.lambdas.iter().any(|l| *l < 0.0) {
            return Err(Error::Config("eval.lambdas must be >= 0".into()));
        }
        if cfg.probe_top_k == 0 || cfg.probe_top_k > cfg.probe_samples {
            return Err(Error::Config("eval.probe_top_k must lie in [1, eval.probe_samples]".into()));
        }
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// features

/// Channel-wise maxima of every layer's adapted features, concatenated in
/// layer order: one `4·D` row per geometry.
fn pooled_features(model: &PointDisc, geoms: &[CloudGeometry]) -> Result<Vec<Vec<f64>>> {
    let (encoded, _) = model.encoder.forward(geoms, Mode::Eval)?;
    let d = model.encoder.spec.adapt_dim;
    let mut out = vec![Vec::with_capacity(4 * d); geoms.len()];
    for layer in LayerId::ALL {
        let enc = encoded.layer(layer);
        for (b, row) in out.iter_mut().enumerate() {
            let mut max = vec![f64::NEG_INFINITY; d];
            for r in 0..enc.rows_per_cloud {
                for (m, v) in max.iter_mut().zip(enc.adapted.row(b * enc.rows_per_cloud + r)) {
                    *m = m.max(*v);
                }
            }
            row.extend(max);
        }
    }
    Ok(out)
}

pub fn extract_features(model: &PointDisc, cloud: &PointCloud) -> Result<Vec<f64>> {
    let geom = model.encoder.geometry(&cloud.points)?;
    Ok(pooled_features(model, std::slice::from_ref(&geom))?.remove(0))
}

/// Features of every cloud as an `M × 4D` matrix.
pub fn extract_dataset(model: &PointDisc, ds: &Dataset) -> Result<Tensor> {
    let d = 4 * model.encoder.spec.adapt_dim;
    let mut data = Vec::with_capacity(ds.clouds.len() * d);
    for chunk in ds.clouds.chunks(EXTRACT_CHUNK) {
        let geoms = chunk
            .iter()
            .map(|c| model.encoder.geometry(&c.points))
            .collect::<Result<Vec<_>>>()?;
        for row in pooled_features(model, &geoms)? {
            data.extend(row);
        }
    }
    Tensor::matrix(ds.clouds.len(), d, data)
}

// ---------------------------------------------------------------------------
// linear probe

/// Labeled feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub x: Tensor,
    pub y: Vec<u32>,
}

impl Labeled {
    pub fn new(x: Tensor, y: Vec<u32>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::invalid(format!("{} feature rows vs {} labels", x.rows(), y.len())));
        }
        if !x.all_finite() {
            return Err(Error::Numeric("non-finite feature values".into()));
        }
        Ok(Labeled { x, y })
    }
}

/// A fitted multinomial logistic model `softmax(x·W + b)` over standardized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Logistic {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub lambda: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

fn standardizer(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows() as f64, x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in 0..x.rows() {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let scale = var.iter().map(|v| if v.sqrt() > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    (mean, scale)
}

fn standardize(x: &Tensor, mean: &[f64], scale: &[f64]) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for ((v, m), s) in out.row_mut(r).iter_mut().zip(mean).zip(scale) {
            *v = (*v - m) * s;
        }
    }
    out
}

/// Objective `(1/n) Σ CE + (λ/2)‖W‖²` and its gradient over the flat
/// parameter vector `[W (d×c), b (c)]`.
fn logistic_objective(x: &Tensor, y: &[u32], c: usize, lambda: f64, theta: &[f64], grad: &mut [f64]) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    let (w, b) = theta.split_at(d * c);
    let mut logits = vec![0.0; n * c];
    for r in 0..n {
        logits[r * c..(r + 1) * c].copy_from_slice(b);
    }
    gemm(n, d, c, x.data(), false, w, false, &mut logits, 1.0);
    let mut loss = 0.0;
    for r in 0..n {
        let row = &mut logits[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let t = y[r] as usize;
        loss += (sum.ln() - (row[t].ln())) / n as f64;
        for v in row.iter_mut() {
            *v /= sum * n as f64;
        }
        row[t] -= 1.0 / n as f64;
    }
    let (gw, gb) = grad.split_at_mut(d * c);
    gemm(d, n, c, x.data(), true, &logits, false, gw, 0.0);
    gb.fill(0.0);
    for r in 0..n {
        for (g, v) in gb.iter_mut().zip(&logits[r * c..(r + 1) * c]) {
            *g += v;
        }
    }
    let mut reg = 0.0;
    for (g, wv) in gw.iter_mut().zip(w) {
        *g += lambda * wv;
        reg += wv * wv;
    }
    loss + 0.5 * lambda * reg
}

/// Largest eigenvalue of `XᵀX / n` by power iteration.
fn gram_spectral_bound(x: &Tensor) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut xv = vec![0.0; n];
    let mut est = 0.0;
    for _ in 0..50 {
        gemm(n, d, 1, x.data(), false, &v, false, &mut xv, 0.0);
        let mut next = vec![0.0; d];
        gemm(d, n, 1, x.data(), true, &xv, false, &mut next, 0.0);
        let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        est = norm / n as f64;
        v = next.into_iter().map(|a| a / norm).collect();
    }
    // power iteration approaches from below
    est * 1.05
}

fn class_count(y: &[u32]) -> usize {
    y.iter().map(|&v| v as usize + 1).max().unwrap_or(0)
}

/// Fits the probe for one `lambda`, starting from `init` (zeros when `None`).
pub fn fit_logistic(
    train: &Labeled,
    classes: usize,
    lambda: f64,
    init: Option<&[f64]>,
    max_iters: usize,
    grad_tol: f64,
) -> Result<Logistic> {
    let distinct = {
        let mut seen: Vec<u32> = train.y.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    };
    if distinct < 2 {
        return Err(Error::invalid("linear probe needs at least two classes in the training set"));
    }
    if train.y.iter().any(|&v| v as usize >= classes) {
        return Err(Error::invalid("label outside the class range"));
    }
    let (mean, scale) = standardizer(&train.x);
    let x = standardize(&train.x, &mean, &scale);
    let d = x.cols();
    let dim = d * classes + classes;
    // softmax cross-entropy curvature is at most 1/2 of the input Gram bound
    let lipschitz = 0.5 * (gram_spectral_bound(&x) + 1.0) + lambda;
    let step = 1.0 / lipschitz;
    let mut theta = match init {
        Some(t) if t.len() == dim => t.to_vec(),
        Some(t) => {
            return Err(Error::invalid(format!("initial parameters have {} entries, expected {dim}", t.len())))
        }
        None => vec![0.0; dim],
    };
    let mut prev = theta.clone();
    let mut look = theta.clone();
    let mut grad = vec![0.0; dim];
    let mut momentum = 1.0f64;
    let mut objective = logistic_objective(&x, &train.y, classes, lambda, &theta, &mut grad);
    let mut grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let mut iterations = 0;
    while iterations < max_iters && grad_norm > grad_tol {
        iterations += 1;
        logistic_objective(&x, &train.y, classes, lambda, &look, &mut grad);
        prev.copy_from_slice(&theta);
        for i in 0..dim {
            theta[i] = look[i] - step * grad[i];
        }
        let next_obj = logistic_objective(&x, &train.y, classes, lambda, &theta, &mut grad);
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        if next_obj > objective {
            // adaptive restart: drop the momentum and take a plain step
            momentum = 1.0;
            look.copy_from_slice(&prev);
            theta.copy_from_slice(&prev);
            logistic_objective(&x, &train.y, classes, lambda, &theta, &mut grad);
            for i in 0..dim {
                theta[i] -= step * grad[i];
            }
            objective = logistic_objective(&x, &train.y, classes, lambda, &theta, &mut grad);
            look.copy_from_slice(&theta);
        } else {
            let beta = (momentum - 1.0) / next_momentum;
            for i in 0..dim {
                look[i] = theta[i] + beta * (theta[i] - prev[i]);
            }
            momentum = next_momentum;
            objective = next_obj;
        }
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    }
    if !objective.is_finite() {
        return Err(Error::Numeric(format!("probe objective diverged at lambda {lambda}")));
    }
    let (w, b) = theta.split_at(d * classes);
    Ok(Logistic {
        mean,
        scale,
        weight: Tensor::matrix(d, classes, w.to_vec())?,
        bias: b.to_vec(),
        lambda,
        objective,
        grad_norm,
        iterations,
    })
}

impl Logistic {
    pub fn decision(&self, x: &Tensor) -> Tensor {
        let xs = standardize(x, &self.mean, &self.scale);
        let c = self.bias.len();
        let mut out = Tensor::zeros(&[x.rows(), c]);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm(x.rows(), x.cols(), c, xs.data(), false, self.weight.data(), false, out.data_mut(), 1.0);
        out
    }

    pub fn predict(&self, x: &Tensor) -> Vec<u32> {
        let s = self.decision(x);
        (0..s.rows())
            .map(|r| {
                let row = s.row(r);
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect()
    }

    pub fn accuracy(&self, data: &Labeled) -> f64 {
        if data.y.is_empty() {
            return 0.0;
        }
        let hits = self.predict(&data.x).iter().zip(&data.y).filter(|(a, b)| a == b).count();
        hits as f64 / data.y.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub test_accuracy: f64,
    pub lambda: f64,
    /// `(λ, validation accuracy)` for every grid value.
    pub val_accuracy: Vec<(f64, f64)>,
    pub train_accuracy: f64,
}

/// Fits one probe per λ, keeps the best on `val` (ties go to the larger λ)
/// and reports its accuracy on `test`.
pub fn linear_probe(train: &Labeled, val: &Labeled, test: &Labeled, cfg: &EvalConfig) -> Result<ProbeReport> {
    if cfg.lambdas.is_empty() {
        return Err(Error::invalid("empty lambda grid"));
    }
    let classes = class_count(&train.y).max(class_count(&val.y)).max(class_count(&test.y));
    let mut best: Option<(f64, Logistic)> = None;
    let mut val_accuracy = Vec::with_capacity(cfg.lambdas.len());
    for &lambda in &cfg.lambdas {
        let model = fit_logistic(train, classes, lambda, None, cfg.max_iters, cfg.grad_tol)?;
        let acc = model.accuracy(val);
        val_accuracy.push((lambda, acc));
        let better = match &best {
            None => true,
            Some((a, m)) => acc > *a || (acc == *a && lambda > m.lambda),
        };
        if better {
            best = Some((acc, model));
        }
    }
    let (_, model) = best.expect("non-empty grid");
    Ok(ProbeReport {
        test_accuracy: model.accuracy(test),
        lambda: model.lambda,
        val_accuracy,
        train_accuracy: model.accuracy(train),
    })
}

// ---------------------------------------------------------------------------
// distances

/// Mean over `a` of the distance to the nearest point of `b`.
pub fn mean_nn_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("nearest-neighbor distance needs two non-empty sets"));
    }
    let total: f64 = a
        .iter()
        .map(|p| b.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(total / a.len() as f64)
}

/// Mean of both directed nearest-neighbor distances.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    Ok(0.5 * (mean_nn_distance(a, b)? + mean_nn_distance(b, a)?))
}

// ---------------------------------------------------------------------------
// shape probe

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub layer: LayerId,
    pub centroid: Point,
    /// Input cloud in canonical order.
    pub cloud: Vec<Point>,
    pub region: Vec<Point>,
    pub samples: Vec<(Point, f64)>,
    /// Highest-scoring samples, best first.
    pub top_k: Vec<(Point, f64)>,
    pub top_k_dist: f64,
    pub control_dist: f64,
}

fn uniform_cube(n: usize, rng: &mut impl Rng) -> Vec<Point> {
    (0..n).map(|_| [0; 3].map(|_| rng.random_range(-1.0..=1.0))).collect()
}

/// Scores uniform points in `[-1, 1]³` against one feature of `cloud` and
/// measures how close the best of them lie to that feature's region.
pub fn shape_probe(
    model: &PointDisc,
    cloud: &PointCloud,
    layer: LayerId,
    centroid_index: usize,
    n_samples: usize,
    top_k: usize,
    seed: u64,
) -> Result<ProbeResult> {
    let spec = &model.encoder.spec;
    if centroid_index >= spec.rows(layer) {
        return Err(Error::invalid(format!(
            "centroid index {centroid_index} out of range for {} {layer} rows",
            spec.rows(layer)
        )));
    }
    if top_k == 0 || top_k > n_samples {
        return Err(Error::invalid(format!("top_k {top_k} must lie in [1, {n_samples}]")));
    }
    let geom = model.encoder.geometry(&cloud.points)?;
    let (encoded, _) = model.encoder.forward(std::slice::from_ref(&geom), Mode::Eval)?;
    let z = encoded.layer(layer).adapted.row(centroid_index).to_vec();
    let centroid = geom.centroids(layer)[centroid_index];
    let region = match layer {
        LayerId::Global => geom.points.clone(),
        l => Region::query_or_nearest(&geom.points, centroid, spec.receptive_radius(l)).points(&geom.points),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = uniform_cube(n_samples, &mut rng);
    let input = ConsInput::grouped(
        Tensor::matrix(1, z.len(), z)?,
        Tensor::matrix(n_samples, 3, points.iter().flatten().copied().collect())?,
        vec![0; n_samples],
    )?;
    let (scores, _) = model.cons.net(layer).forward(&input, Mode::Eval)?;
    let samples: Vec<(Point, f64)> = points.into_iter().zip(scores.into_data()).collect();
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.sort_by(|&a, &b| samples[b].1.total_cmp(&samples[a].1).then(a.cmp(&b)));
    let top: Vec<(Point, f64)> = order[..top_k].iter().map(|&i| samples[i]).collect();
    let top_points: Vec<Point> = top.iter().map(|(p, _)| *p).collect();
    let mut control_rng = ChaCha8Rng::seed_from_u64(seed);
    control_rng.set_stream(1);
    let control = uniform_cube(top_k, &mut control_rng);
    Ok(ProbeResult {
        layer,
        centroid,
        top_k_dist: mean_nn_distance(&top_points, &region)?,
        control_dist: mean_nn_distance(&control, &region)?,
        cloud: geom.points,
        region,
        samples,
        top_k: top,
    })
}

/// `cfg.probes` probes at `cfg.probe_layer`: probe `i` queries a random
/// centroid of cloud `i mod M`.
pub fn run_probes(model: &PointDisc, ds: &Dataset, cfg: &EvalConfig) -> Result<Vec<ProbeResult>> {
    if ds.clouds.is_empty() {
        return Err(Error::invalid("shape probing needs at least one cloud"));
    }
    let rows = model.encoder.spec.rows(cfg.probe_layer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.probes)
        .map(|i| {
            let cloud = &ds.clouds[i % ds.clouds.len()];
            let centroid = rng.random_range(0..rows);
            let seed = derive_seed(cfg.seed, i as u64 + 1);
            shape_probe(model, cloud, cfg.probe_layer, centroid, cfg.probe_samples, cfg.probe_top_k, seed)
        })
        .collect()
}

pub fn write_probe_csv(path: &Path, config: &Config, results: &[ProbeResult]) -> Result<()> {
    let mut out = config.comment_block();
    out.push_str("probe_id,layer,top_k_dist,control_dist\n");
    for (i, r) in results.iter().enumerate() {
        writeln!(out, "{i},{},{},{}", r.layer, r.top_k_dist, r.control_dist).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// PLY export

const GRAY: [u8; 3] = [128, 128, 128];
const GREEN: [u8; 3] = [0, 200, 0];
const RED: [u8; 3] = [220, 0, 0];

/// One vertex of an exported probe: position, color and score.
pub type PlyVertex = (Point, [u8; 3], f64);

/// ASCII PLY with the cloud (gray), the region (green) and the top-k points
/// (red, scored). Cloud and region vertices carry a score of 0.
pub fn export_probe_ply(result: &ProbeResult, path: &Path) -> Result<()> {
    if result.region.is_empty() {
        return Err(Error::invalid("probe region is empty"));
    }
    let count = result.cloud.len() + result.region.len() + result.top_k.len();
    let mut out = String::new();
    writeln!(out, "ply\nformat ascii 1.0\ncomment probe layer {}", result.layer).expect("string write");
    writeln!(
        out,
        "element vertex {count}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nproperty float score\nend_header"
    )
    .expect("string write");
    let rows = result
        .cloud
        .iter()
        .map(|p| (p, GRAY, 0.0))
        .chain(result.region.iter().map(|p| (p, GREEN, 0.0)))
        .chain(result.top_k.iter().map(|(p, s)| (p, RED, *s)));
    for (p, c, s) in rows {
        writeln!(out, "{} {} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2], s).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads the vertices of an ASCII PLY written by [`export_probe_ply`].
pub fn read_probe_ply(text: &str) -> Result<Vec<PlyVertex>> {
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, msg: &str| Error::Parse {
        line: line + 1,
        msg: msg.to_string(),
    };
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(0, "missing `ply` magic")),
    }
    let mut count = None;
    for (i, line) in lines.by_ref() {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] if *fmt != "ascii" => return Err(parse_err(i, "only ASCII PLY is supported")),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| parse_err(i, "bad vertex count"))?),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| parse_err(0, "no vertex element"))?;
    let mut out = Vec::with_capacity(count);
    for (i, line) in lines.by_ref().take(count) {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 7 {
            return Err(parse_err(i, "vertex needs 7 properties"));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| parse_err(i, "bad number"));
        let u = |s: &str| s.parse::<u8>().map_err(|_| parse_err(i, "bad color"));
        out.push(([f(t[0])?, f(t[1])?, f(t[2])?], [u(t[3])?, u(t[4])?, u(t[5])?], f(t[6])?));
    }
    if out.len() != count {
        return Err(parse_err(text.lines().count(), "fewer vertices than declared"));
    }
    Ok(out)
}
