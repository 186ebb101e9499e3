//! Set-abstraction encoder and per-layer adaptation heads.
//!
//! Three single-scale set-abstraction levels (FPS centroids, ball-query
//! groups, shared per-point MLP, max pooling) followed by a global level that
//! pools all level-3 centroids into one feature. Each level's features are
//! then mapped by its own adaptation MLP into a shared `D`-dimensional,
//! unit-norm space.
//!
//! Grouping depends only on coordinates, so it is computed once per cloud
//! ([`CloudGeometry`]) and reused across forward passes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::blocks::{
    group_max_pool, group_max_pool_backward, l2_normalize, l2_normalize_backward, relu,
    relu_backward, scoped, BatchNorm, Linear, Mode, Module, NormTape, Tensor, Visitor,
};
use crate::error::{Error, Result};
use crate::geom::{ball_query, canonical_order, farthest_point_sample, Point, PointCloud};

/// Radius covering the whole `[-1, 1]³` cube from any point inside it.
pub const GLOBAL_RADIUS: f64 = 2.0 * 1.732_050_807_568_877_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    L1,
    L2,
    L3,
    Global,
}

impl LayerId {
    pub const ALL: [LayerId; 4] = [LayerId::L1, LayerId::L2, LayerId::L3, LayerId::Global];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerId::L1 => "l1",
            LayerId::L2 => "l2",
            LayerId::L3 => "l3",
            LayerId::Global => "global",
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "l1" => Ok(LayerId::L1),
            "l2" => Ok(LayerId::L2),
            "l3" => Ok(LayerId::L3),
            "global" => Ok(LayerId::Global),
            other => Err(Error::invalid(format!("unknown layer `{other}`"))),
        }
    }
}

/// One set-abstraction level.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub centroids: usize,
    pub radius: f64,
    pub max_neighbors: usize,
    pub mlp: Vec<usize>,
}

impl LayerSpec {
    pub fn out_channels(&self) -> usize {
        self.mlp.last().copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub n_points: usize,
    pub levels: [LayerSpec; 3],
    pub global_mlp: Vec<usize>,
    pub adapt_hidden: usize,
    pub adapt_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            n_points: 512,
            levels: [
                LayerSpec {
                    centroids: 128,
                    radius: 0.25,
                    max_neighbors: 32,
                    mlp: vec![32, 32, 64],
                },
                LayerSpec {
                    centroids: 32,
                    radius: 0.5,
                    max_neighbors: 32,
                    mlp: vec![64, 64, 128],
                },
                LayerSpec {
                    centroids: 8,
                    radius: 0.8,
                    max_neighbors: 16,
                    mlp: vec![128, 128, 256],
                },
            ],
            global_mlp: vec![256, 256],
            adapt_hidden: 256,
            adapt_dim: 256,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let l = &self.levels;
        if l.iter().any(|s| s.mlp.is_empty() || s.mlp.contains(&0)) || self.global_mlp.is_empty() {
            return Err(Error::invalid("every encoder MLP needs at least one non-zero width"));
        }
        if l.iter().any(|s| s.max_neighbors == 0 || !(s.radius > 0.0)) {
            return Err(Error::invalid("grouping radius and neighbor count must be positive"));
        }
        if !(l[0].radius < l[1].radius && l[1].radius < l[2].radius) {
            return Err(Error::invalid("grouping radii must strictly increase with depth"));
        }
        if !(self.n_points >= l[0].centroids
            && l[0].centroids > l[1].centroids
            && l[1].centroids > l[2].centroids
            && l[2].centroids >= 1)
        {
            return Err(Error::invalid(
                "centroid counts must strictly decrease with depth and fit in the input",
            ));
        }
        if self.adapt_hidden == 0 || self.adapt_dim == 0 {
            return Err(Error::invalid("adaptation widths must be positive"));
        }
        Ok(())
    }

    /// Centroid count of a layer; the global layer has one.
    pub fn rows(&self, layer: LayerId) -> usize {
        match layer {
            LayerId::Global => 1,
            l => self.levels[l.index()].centroids,
        }
    }

    pub fn channels(&self, layer: LayerId) -> usize {
        match layer {
            LayerId::Global => *self.global_mlp.last().expect("validated"),
            l => self.levels[l.index()].out_channels(),
        }
    }

    pub fn receptive_radius(&self, layer: LayerId) -> f64 {
        match layer {
            LayerId::Global => GLOBAL_RADIUS,
            l => self.levels[l.index()].radius,
        }
    }

    /// Every width multiplied by `factor`; grouping is unchanged.
    pub fn scaled(&self, factor: usize) -> EncoderSpec {
        let mut s = self.clone();
        for l in &mut s.levels {
            l.mlp.iter_mut().for_each(|w| *w *= factor);
        }
        s.global_mlp.iter_mut().for_each(|w| *w *= factor);
        s.adapt_hidden *= factor;
        s.adapt_dim *= factor;
        s
    }
}

// ---------------------------------------------------------------------------

/// Stack of linear → batch norm → ReLU stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub stages: Vec<(Linear, BatchNorm)>,
}

#[derive(Clone, Debug)]
pub struct MlpTape {
    inputs: Vec<Tensor>,
    norms: Vec<NormTape>,
    pre_act: Vec<Tensor>,
}

impl MlpTape {
    fn push_pattern(&self, out: &mut Vec<u32>) {
        for a in &self.pre_act {
            out.extend(a.data().iter().map(|v| u32::from(*v > 0.0)));
        }
    }
}

impl Mlp {
    pub fn new(input: usize, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut fan_in = input;
        let stages = widths
            .iter()
            .map(|&w| {
                let stage = (Linear::new(fan_in, w, rng), BatchNorm::new(w));
                fan_in = w;
                stage
            })
            .collect();
        Mlp { stages }
    }

    pub fn in_dim(&self) -> usize {
        self.stages[0].0.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.stages.last().expect("non-empty MLP").0.out_dim()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, MlpTape)> {
        let mut tape = MlpTape {
            inputs: Vec::with_capacity(self.stages.len()),
            norms: Vec::with_capacity(self.stages.len()),
            pre_act: Vec::with_capacity(self.stages.len()),
        };
        let mut h = x.clone();
        for (lin, bn) in &self.stages {
            let z = lin.forward(&h)?;
            let (a, nt) = bn.forward(&z, mode)?;
            let out = relu(&a);
            tape.inputs.push(h);
            tape.norms.push(nt);
            tape.pre_act.push(a);
            h = out;
        }
        Ok((h, tape))
    }

    pub fn backward(&mut self, tape: &MlpTape, grad_out: &Tensor, want_input: bool) -> Option<Tensor> {
        let mut g = grad_out.clone();
        for (i, (lin, bn)) in self.stages.iter_mut().enumerate().rev() {
            let ga = relu_backward(&tape.pre_act[i], &g);
            let gz = bn.backward(&tape.norms[i], &ga);
            {
                let gi = lin.backward(&tape.inputs[i], &gz, i > 0 || want_input)?;
                g = gi
            }
        }
        Some(g)
    }

    pub fn commit(&mut self, tape: &MlpTape) {
        for ((_, bn), nt) in self.stages.iter_mut().zip(&tape.norms) {
            bn.commit(nt);
        }
    }
}

impl Module for Mlp {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        for (i, (lin, bn)) in self.stages.iter_mut().enumerate() {
            lin.visit(&scoped(prefix, &format!("{i}.linear")), v);
            bn.visit(&scoped(prefix, &format!("{i}.bn")), v);
        }
    }
}

// ---------------------------------------------------------------------------

/// Grouping of one set-abstraction level for one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelGeometry {
    pub centroids: Vec<Point>,
    /// `centroids × max_neighbors` indices into the previous level's points.
    pub groups: Vec<usize>,
}

/// Coordinate-only structure of one cloud through the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGeometry {
    /// Input points in canonical (lexicographic) order.
    pub points: Vec<Point>,
    pub levels: Vec<LevelGeometry>,
}

impl CloudGeometry {
    pub fn centroids(&self, layer: LayerId) -> &[Point] {
        const ORIGIN: [Point; 1] = [[0.0; 3]];
        match layer {
            LayerId::Global => &ORIGIN,
            l => &self.levels[l.index()].centroids,
        }
    }
}

pub fn cloud_geometry(spec: &EncoderSpec, points: &[Point]) -> Result<CloudGeometry> {
    if points.len() < spec.levels[0].centroids {
        return Err(Error::invalid(format!(
            "encoder needs at least {} points, cloud has {}",
            spec.levels[0].centroids,
            points.len()
        )));
    }
    let canonical = canonical_order(points);
    let mut levels: Vec<LevelGeometry> = Vec::with_capacity(3);
    for ls in &spec.levels {
        let prev: &[Point] = levels.last().map_or(&canonical, |l| &l.centroids);
        let picks = farthest_point_sample(prev, ls.centroids)?;
        let centroids: Vec<Point> = picks.iter().map(|&i| prev[i]).collect();
        let mut groups = Vec::with_capacity(ls.centroids * ls.max_neighbors);
        for c in &centroids {
            groups.extend(ball_query(prev, c, ls.radius, ls.max_neighbors));
        }
        levels.push(LevelGeometry { centroids, groups });
    }
    Ok(CloudGeometry {
        points: canonical,
        levels,
    })
}

/// Encoder output `F₁ˡ` for one layer of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    pub layer: LayerId,
    pub centroids: Vec<Point>,
    pub features: Tensor,
    pub receptive_radius: f64,
}

/// Adapted features `F₂ˡ`: unit-norm rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedFeatures {
    pub layer: LayerId,
    pub features: Tensor,
}

/// One layer of a batch forward pass; rows are grouped cloud by cloud.
#[derive(Clone, Debug)]
pub struct EncodedLayer {
    pub layer: LayerId,
    pub rows_per_cloud: usize,
    pub features: Tensor,
    pub adapted: Tensor,
}

#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub layers: Vec<EncodedLayer>,
}

impl EncodedBatch {
    pub fn layer(&self, layer: LayerId) -> &EncodedLayer {
        &self.layers[layer.index()]
    }
}

#[derive(Clone, Debug)]
struct LevelTape {
    mlp: MlpTape,
    argmax: Vec<u32>,
    members: usize,
    prev_rows: usize,
    /// Source row (into the previous level's batch features) of each grouped row.
    sources: Vec<usize>,
}

#[derive(Clone, Debug)]
struct AdaptTape {
    mlp: MlpTape,
    normalized: Tensor,
    norms: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EncoderTape {
    levels: Vec<LevelTape>,
    adapt: Vec<AdaptTape>,
}

impl EncoderTape {
    /// Piecewise-linear state of the pass: every ReLU sign and pooling winner.
    pub fn pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        self.push_pattern(&mut out);
        out
    }

    pub(crate) fn push_pattern(&self, out: &mut Vec<u32>) {
        for l in &self.levels {
            l.mlp.push_pattern(out);
            out.extend(&l.argmax);
        }
        for a in &self.adapt {
            a.mlp.push_pattern(out);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub levels: Vec<Mlp>,
    pub global: Mlp,
    pub adapters: Vec<Mlp>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut prev = 0;
        let mut levels = Vec::with_capacity(3);
        for ls in &spec.levels {
            levels.push(Mlp::new(3 + prev, &ls.mlp, rng));
            prev = ls.out_channels();
        }
        let global = Mlp::new(3 + prev, &spec.global_mlp, rng);
        let adapters = LayerId::ALL
            .iter()
            .map(|&l| Mlp::new(spec.channels(l), &[spec.adapt_hidden, spec.adapt_dim], rng))
            .collect();
        Ok(Encoder {
            spec,
            levels,
            global,
            adapters,
        })
    }

    pub fn geometry(&self, points: &[Point]) -> Result<CloudGeometry> {
        cloud_geometry(&self.spec, points)
    }

    /// Builds the grouped input rows `[neighbor − centroid, neighbor features]`.
    fn grouped_input(
        &self,
        geoms: &[CloudGeometry],
        level: Option<usize>,
        prev_feats: Option<&Tensor>,
    ) -> (Tensor, Vec<usize>, usize) {
        let c_prev = prev_feats.map_or(0, |t| t.cols());
        let width = 3 + c_prev;
        let mut rows = Vec::new();
        let mut sources = Vec::new();
        let mut members = 0;
        for (b, g) in geoms.iter().enumerate() {
            let (prev_pts, prev_count): (&[Point], usize) = match level {
                Some(0) => (&g.points, g.points.len()),
                Some(i) => (&g.levels[i - 1].centroids, g.levels[i - 1].centroids.len()),
                None => (&g.levels[2].centroids, g.levels[2].centroids.len()),
            };
            let base = b * prev_count;
            let mut push = |idx: usize, center: &Point| {
                let p = prev_pts[idx];
                rows.extend_from_slice(&[p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
                if let Some(f) = prev_feats {
                    rows.extend_from_slice(f.row(base + idx));
                }
                sources.push(base + idx);
            };
            match level {
                Some(i) => {
                    let lg = &g.levels[i];
                    members = self.spec.levels[i].max_neighbors;
                    for (j, c) in lg.centroids.iter().enumerate() {
                        for &idx in &lg.groups[j * members..(j + 1) * members] {
                            push(idx, c);
                        }
                    }
                }
                None => {
                    members = prev_count;
                    for idx in 0..prev_count {
                        push(idx, &[0.0; 3]);
                    }
                }
            }
        }
        let n = sources.len();
        let t = Tensor::matrix(n, width, rows).expect("grouped rows are rectangular");
        (t, sources, members)
    }

    /// Batch forward through all levels and adaptation heads.
    pub fn forward(&self, geoms: &[CloudGeometry], mode: Mode) -> Result<(EncodedBatch, EncoderTape)> {
        if geoms.is_empty() {
            return Err(Error::invalid("cannot encode an empty batch"));
        }
        let mut features: Vec<Tensor> = Vec::with_capacity(4);
        let mut level_tapes = Vec::with_capacity(4);
        for i in 0..4 {
            let level = (i < 3).then_some(i);
            let (x, sources, members) = self.grouped_input(geoms, level, features.last());
            let mlp = if i < 3 { &self.levels[i] } else { &self.global };
            let (h, mlp_tape) = mlp.forward(&x, mode)?;
            let (pooled, argmax) = group_max_pool(&h, members)?;
            level_tapes.push(LevelTape {
                mlp: mlp_tape,
                argmax,
                members,
                prev_rows: features.last().map_or(0, |t| t.rows()),
                sources,
            });
            features.push(pooled);
        }
        let mut layers = Vec::with_capacity(4);
        let mut adapt_tapes = Vec::with_capacity(4);
        for (layer, f) in LayerId::ALL.into_iter().zip(features) {
            let (h, mlp_tape) = self.adapters[layer.index()].forward(&f, mode)?;
            let (normalized, norms) = l2_normalize(&h);
            layers.push(EncodedLayer {
                layer,
                rows_per_cloud: self.spec.rows(layer),
                features: f,
                adapted: normalized.clone(),
            });
            adapt_tapes.push(AdaptTape {
                mlp: mlp_tape,
                normalized,
                norms,
            });
        }
        Ok((
            EncodedBatch { layers },
            EncoderTape {
                levels: level_tapes,
                adapt: adapt_tapes,
            },
        ))
    }

    /// Backpropagates gradients w.r.t. the adapted features of every layer
    /// (`None` for layers without loss terms) into all encoder parameters.
    pub fn backward(&mut self, tape: &EncoderTape, grad_adapted: &[Option<Tensor>]) {
        let mut grad_features: Vec<Option<Tensor>> = vec![None; 4];
        for (i, g) in grad_adapted.iter().enumerate() {
            if let Some(g) = g {
                let at = &tape.adapt[i];
                let gh = l2_normalize_backward(&at.normalized, &at.norms, g);
                grad_features[i] = self.adapters[i].backward(&at.mlp, &gh, true);
            }
        }
        // global → l3 → l2 → l1
        for i in (0..4).rev() {
            let Some(g) = grad_features[i].take() else {
                continue;
            };
            let lt = &tape.levels[i];
            let gh = group_max_pool_backward(&lt.argmax, lt.members, &g);
            let mlp = if i < 3 { &mut self.levels[i] } else { &mut self.global };
            let gx = mlp.backward(&lt.mlp, &gh, i > 0);
            if let Some(gx) = gx {
                let mut gprev = Tensor::zeros(&[lt.prev_rows, gx.cols() - 3]);
                for (r, &src) in lt.sources.iter().enumerate() {
                    let dst = gprev.row_mut(src);
                    for (d, v) in dst.iter_mut().zip(&gx.row(r)[3..]) {
                        *d += v;
                    }
                }
                match &mut grad_features[i - 1] {
                    Some(acc) => acc.add_assign(&gprev),
                    slot => *slot = Some(gprev),
                }
            }
        }
    }

    pub fn commit(&mut self, tape: &EncoderTape) {
        for (mlp, lt) in self.levels.iter_mut().zip(&tape.levels) {
            mlp.commit(&lt.mlp);
        }
        self.global.commit(&tape.levels[3].mlp);
        for (mlp, at) in self.adapters.iter_mut().zip(&tape.adapt) {
            mlp.commit(&at.mlp);
        }
    }

    /// Encoder features `F₁ˡ` of a single cloud for all four layers.
    pub fn encode(&self, cloud: &PointCloud, mode: Mode) -> Result<Vec<LayerFeatures>> {
        let geom = self.geometry(&cloud.points)?;
        let (batch, _) = self.forward(std::slice::from_ref(&geom), mode)?;
        Ok(batch
            .layers
            .into_iter()
            .map(|l| LayerFeatures {
                layer: l.layer,
                centroids: geom.centroids(l.layer).to_vec(),
                features: l.features,
                receptive_radius: self.spec.receptive_radius(l.layer),
            })
            .collect())
    }

    /// Adaptation head of one layer: two linear → BN → ReLU stages, then
    /// row-wise L2 normalization.
    pub fn adapt(&self, lf: &LayerFeatures, mode: Mode) -> Result<AdaptedFeatures> {
        let (h, _) = self.adapters[lf.layer.index()].forward(&lf.features, mode)?;
        Ok(AdaptedFeatures {
            layer: lf.layer,
            features: l2_normalize(&h).0,
        })
    }
}

impl Module for Encoder {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        for (i, mlp) in self.levels.iter_mut().enumerate() {
            mlp.visit(&scoped(prefix, &format!("sa{}", i + 1)), v);
        }
        self.global.visit(&scoped(prefix, "sa_global"), v);
        for (layer, mlp) in LayerId::ALL.iter().zip(self.adapters.iter_mut()) {
            mlp.visit(&scoped(prefix, &format!("adapt_{layer}")), v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{check_module_params, for_each_param, grad_check};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Point = [0; 3].map(|_| rng.random_range(-1.0..1.0));
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
                v.map(|c| c / norm)
            })
            .collect()
    }

    fn small_spec() -> EncoderSpec {
        EncoderSpec {
            n_points: 64,
            levels: [
                LayerSpec {
                    centroids: 16,
                    radius: 0.4,
                    max_neighbors: 8,
                    mlp: vec![8, 8],
                },
                LayerSpec {
                    centroids: 8,
                    radius: 0.8,
                    max_neighbors: 4,
                    mlp: vec![8, 12],
                },
                LayerSpec {
                    centroids: 4,
                    radius: 1.2,
                    max_neighbors: 4,
                    mlp: vec![12, 16],
                },
            ],
            global_mlp: vec![16, 16],
            adapt_hidden: 10,
            adapt_dim: 6,
        }
    }

    #[test]
    fn default_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(EncoderSpec::default(), &mut rng).unwrap();
        let cloud = PointCloud::new(sphere(512, 2), None, "s").unwrap();
        let feats = enc.encode(&cloud, Mode::Eval).unwrap();
        let shapes: Vec<&[usize]> = feats.iter().map(|f| f.features.shape()).collect();
        assert_eq!(shapes, vec![&[128, 64][..], &[32, 128], &[8, 256], &[1, 256]]);
        assert_eq!(feats[0].centroids.len(), 128);
        assert_eq!(feats[1].receptive_radius, 0.5);
        // eval mode on fresh statistics: an isolated centroid has an all-zero
        // group and maps to the zero vector; every other row is unit norm
        for lf in &feats {
            let adapted = enc.adapt(lf, Mode::Eval).unwrap();
            assert_eq!(adapted.features.cols(), 256);
            for r in 0..adapted.features.rows() {
                let n: f64 = adapted.features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6 || n == 0.0);
            }
        }
        let geoms: Vec<CloudGeometry> = (0..2).map(|s| enc.geometry(&sphere(512, 30 + s)).unwrap()).collect();
        let (batch, _) = enc.forward(&geoms, Mode::Train).unwrap();
        for l in &batch.layers {
            assert_eq!(l.adapted.rows(), 2 * l.rows_per_cloud);
            for r in 0..l.adapted.rows() {
                let n: f64 = l.adapted.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6, "{} row {r}: {n}", l.layer);
            }
        }
        let again = enc.encode(&cloud, Mode::Eval).unwrap();
        assert_eq!(feats, again);
    }

    #[test]
    fn spec_validation() {
        let mut s = EncoderSpec::default();
        s.levels[1].radius = 0.2;
        assert!(s.validate().is_err());
        let mut s = EncoderSpec::default();
        s.levels[2].centroids = 64;
        assert!(s.validate().is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(EncoderSpec::default(), &mut rng).unwrap();
        assert!(enc.geometry(&sphere(100, 1)).is_err());
    }

    #[test]
    fn doubling_widths_changes_only_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = small_spec().scaled(2);
        let enc = Encoder::new(spec, &mut rng).unwrap();
        let cloud = PointCloud::new(sphere(64, 3), None, "s").unwrap();
        let feats = enc.encode(&cloud, Mode::Eval).unwrap();
        let cols: Vec<usize> = feats.iter().map(|f| f.features.cols()).collect();
        assert_eq!(cols, vec![16, 24, 32, 32]);
        assert_eq!(enc.adapt(&feats[3], Mode::Eval).unwrap().features.cols(), 12);
    }

    #[test]
    fn global_feature_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(small_spec(), &mut rng).unwrap();
        let pts = sphere(64, 5);
        let base = enc.encode(&PointCloud::new(pts.clone(), None, "a").unwrap(), Mode::Eval).unwrap();
        for _ in 0..5 {
            let mut p = pts.clone();
            p.shuffle(&mut rng);
            let other = enc.encode(&PointCloud::new(p, None, "b").unwrap(), Mode::Eval).unwrap();
            assert_eq!(other[3].features, base[3].features);
        }
    }

    #[test]
    fn duplicated_points_share_grouped_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(small_spec(), &mut rng).unwrap();
        let half = sphere(32, 6);
        let doubled: Vec<Point> = half.iter().flat_map(|p| [*p, *p]).collect();
        let geom = enc.geometry(&doubled).unwrap();
        // canonical order puts each duplicate pair side by side
        for pair in geom.points.chunks(2) {
            assert_eq!(pair[0], pair[1]);
        }
        let (x, _, _) = enc.grouped_input(std::slice::from_ref(&geom), Some(0), None);
        for (r, &src) in geom.levels[0].groups.iter().enumerate() {
            let c = geom.levels[0].centroids[r / 8];
            let p = geom.points[src];
            assert_eq!(x.row(r), &[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
    }

    #[test]
    fn centroids_have_input_points_in_receptive_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(EncoderSpec::default(), &mut rng).unwrap();
        let geom = enc.geometry(&sphere(512, 8)).unwrap();
        for layer in [LayerId::L1, LayerId::L2, LayerId::L3] {
            let r = enc.spec.receptive_radius(layer);
            for c in geom.centroids(layer) {
                assert!(geom.points.iter().any(|p| crate::geom::dist(p, c) <= r));
            }
        }
    }

    fn projected_loss(enc: &Encoder, geoms: &[CloudGeometry], proj: &[Tensor]) -> f64 {
        let (out, _) = enc.forward(geoms, Mode::Train).unwrap();
        out.layers
            .iter()
            .zip(proj)
            .map(|(l, p)| l.adapted.data().iter().zip(p.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    #[test]
    fn encoder_and_adapter_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut enc = Encoder::new(small_spec(), &mut rng).unwrap();
        let geoms: Vec<CloudGeometry> = (0..4).map(|s| enc.geometry(&sphere(64, 20 + s)).unwrap()).collect();
        let (out, tape) = enc.forward(&geoms, Mode::Train).unwrap();
        let proj: Vec<Tensor> = out
            .layers
            .iter()
            .map(|l| Tensor::uniform(l.adapted.shape(), 1.0, &mut rng))
            .collect();
        enc.zero_grad();
        enc.backward(&tape, &proj.iter().cloned().map(Some).collect::<Vec<_>>());
        let rep = check_module_params(&mut enc, |e| projected_loss(e, &geoms, &proj), 8, &mut rng, 1e-4);
        assert!(rep.pass, "{rep:?}");
        let mut grads = 0;
        for_each_param(&mut enc, |_, p| grads += p.grad.data().iter().filter(|g| **g != 0.0).count());
        assert!(grads > 0);
    }

    #[test]
    fn adapt_gradcheck_over_inputs() {
        // end to end through one adaptation head, w.r.t. its input features
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut mlp = Mlp::new(5, &[7, 4], &mut rng);
        let x = Tensor::uniform(&[6, 5], 1.0, &mut rng);
        let proj = Tensor::uniform(&[6, 4], 1.0, &mut rng);
        let f = |m: &Mlp, x: &Tensor| {
            let (h, _) = m.forward(x, Mode::Train).unwrap();
            let (y, _) = l2_normalize(&h);
            y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (h, tape) = mlp.forward(&x, Mode::Train).unwrap();
        let (y, norms) = l2_normalize(&h);
        let gh = l2_normalize_backward(&y, &norms, &proj);
        let gx = mlp.backward(&tape, &gh, true).unwrap();
        let rep = grad_check(
            |v| f(&mlp, &Tensor::matrix(6, 5, v.to_vec()).unwrap()),
            x.data(),
            gx.data(),
            None,
            1e-5,
        );
        assert!(rep.pass, "{rep:?}");
    }
}
