//! Discrimination groups and the point discrimination loss.
//!
//! A group pairs one adapted feature `z_j` with `K` positives drawn from its
//! local region and `T` negatives made by perturbing region points. The
//! consistency network scores every pair; each positive is classified against
//! the group's negatives with a temperature-scaled cross-entropy.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::blocks::{softmax_cross_entropy, Mode, Module, Tensor, Visitor};
use crate::consistency::{ConsBank, ConsInput, ConsSpec, ConsTape};
use crate::encoder::{CloudGeometry, Encoder, EncoderSpec, EncoderTape, LayerId};
use crate::error::{Error, Result};
use crate::geom::{sample_negatives, sample_positives, NoiseSpec, Point, Region};

/// Attempts at finding a non-empty region before giving up on a group.
pub const REGION_RETRIES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(Error::invalid(format!("unknown reduction `{other}`"))),
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        })
    }
}

/// How groups are spread over the configured layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerChoice {
    /// Each group picks its layer uniformly at random.
    Uniform,
    /// Groups cycle through the layers, giving each an equal quota.
    Quota,
}

impl FromStr for LayerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(LayerChoice::Uniform),
            "quota" => Ok(LayerChoice::Quota),
            other => Err(Error::invalid(format!("unknown layer choice `{other}`"))),
        }
    }
}

impl fmt::Display for LayerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerChoice::Uniform => "uniform",
            LayerChoice::Quota => "quota",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub k: usize,
    pub t: usize,
    pub groups_per_cloud: usize,
    pub layers: Vec<LayerId>,
    pub reduction: Reduction,
    pub noise: NoiseSpec,
    pub positives_with_replacement: bool,
    pub z_with_replacement: bool,
    pub layer_choice: LayerChoice,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            k: 1,
            t: 10,
            groups_per_cloud: 64,
            layers: LayerId::ALL.to_vec(),
            reduction: Reduction::Mean,
            noise: NoiseSpec::default(),
            positives_with_replacement: true,
            z_with_replacement: true,
            layer_choice: LayerChoice::Uniform,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.k == 0 || self.t == 0 {
            return Err(Error::invalid("K and T must both be at least 1"));
        }
        if self.groups_per_cloud == 0 {
            return Err(Error::invalid("groups_per_cloud must be at least 1"));
        }
        if self.layers.is_empty() {
            return Err(Error::invalid("at least one layer must carry the loss"));
        }
        self.noise.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminationGroup {
    pub layer: LayerId,
    /// Index of the cloud within its batch.
    pub cloud: usize,
    /// Row of `z_j` among the layer's rows for that cloud.
    pub row: usize,
    pub region: Region,
    pub positives: Vec<Point>,
    pub negatives: Vec<Point>,
}

/// Counters from group construction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupStats {
    pub empty_region_retries: usize,
    pub negative_fallbacks: usize,
}

impl GroupStats {
    pub fn add(&mut self, other: GroupStats) {
        self.empty_region_retries += other.empty_region_retries;
        self.negative_fallbacks += other.negative_fallbacks;
    }
}

/// Draws rows either independently or from a reshuffled deck.
struct RowPicker {
    rows: usize,
    with_replacement: bool,
    deck: Vec<usize>,
}

impl RowPicker {
    fn new(rows: usize, with_replacement: bool) -> Self {
        RowPicker {
            rows,
            with_replacement,
            deck: Vec::new(),
        }
    }

    fn pick(&mut self, rng: &mut impl Rng) -> usize {
        if self.with_replacement {
            return rng.random_range(0..self.rows);
        }
        if self.deck.is_empty() {
            self.deck = (0..self.rows).collect();
            self.deck.shuffle(rng);
        }
        self.deck.pop().expect("refilled deck")
    }
}

/// Samples `cfg.groups_per_cloud` groups for one cloud.
pub fn build_groups(
    spec: &EncoderSpec,
    geom: &CloudGeometry,
    cloud: usize,
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<DiscriminationGroup>, GroupStats)> {
    cfg.validate()?;
    let points = &geom.points;
    let mut pickers: Vec<RowPicker> = LayerId::ALL
        .iter()
        .map(|&l| RowPicker::new(spec.rows(l), cfg.z_with_replacement))
        .collect();
    let mut stats = GroupStats::default();
    let mut groups = Vec::with_capacity(cfg.groups_per_cloud);
    for g in 0..cfg.groups_per_cloud {
        let layer = match cfg.layer_choice {
            LayerChoice::Uniform => cfg.layers[rng.random_range(0..cfg.layers.len())],
            LayerChoice::Quota => cfg.layers[g % cfg.layers.len()],
        };
        let mut found = None;
        for _ in 0..REGION_RETRIES {
            let row = pickers[layer.index()].pick(rng);
            let region = match layer {
                LayerId::Global => Region {
                    center: [0.0; 3],
                    radius: spec.receptive_radius(layer),
                    member_indices: (0..points.len()).collect(),
                },
                l => Region::query(points, geom.centroids(l)[row], spec.receptive_radius(l)),
            };
            if !region.is_empty() {
                found = Some((row, region));
                break;
            }
            stats.empty_region_retries += 1;
        }
        let Some((row, region)) = found else {
            return Err(Error::invalid(format!(
                "no non-empty {layer} region after {REGION_RETRIES} attempts"
            )));
        };
        let members = region.points(points);
        let positives = sample_positives(points, &region, cfg.k, cfg.positives_with_replacement, rng)?;
        let neg = sample_negatives(&members, &cfg.noise, cfg.t, &members, rng)?;
        stats.negative_fallbacks += neg.fallbacks;
        groups.push(DiscriminationGroup {
            layer,
            cloud,
            row,
            region,
            positives,
            negatives: neg.points,
        });
    }
    Ok((groups, stats))
}

/// Loss of one feature and its gradients w.r.t. the positive and negative scores.
#[derive(Clone, Debug, PartialEq)]
pub struct PointLoss {
    pub value: f64,
    pub grad_pos: Vec<f64>,
    pub grad_neg: Vec<f64>,
}

/// Mean over positives of the cross-entropy of `[s⁺ᵢ, s⁻₁…s⁻_T] / τ` with the
/// positive as target.
pub fn point_loss(pos: &[f64], neg: &[f64], tau: f64) -> Result<PointLoss> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be > 0, got {tau}")));
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("point loss needs at least one positive and one negative"));
    }
    let k = pos.len() as f64;
    let mut out = PointLoss {
        value: 0.0,
        grad_pos: vec![0.0; pos.len()],
        grad_neg: vec![0.0; neg.len()],
    };
    let mut logits = vec![0.0; 1 + neg.len()];
    for (i, s) in pos.iter().enumerate() {
        logits[0] = s / tau;
        for (l, n) in logits[1..].iter_mut().zip(neg) {
            *l = n / tau;
        }
        let (ce, g) = softmax_cross_entropy(&logits, 0)?;
        out.value += ce / k;
        out.grad_pos[i] = g[0] / (k * tau);
        for (acc, gv) in out.grad_neg.iter_mut().zip(&g[1..]) {
            *acc += gv / (k * tau);
        }
    }
    Ok(out)
}

/// Encoder plus consistency networks: everything the loss trains.
#[derive(Clone, Debug, PartialEq)]
pub struct PointDisc {
    pub encoder: Encoder,
    pub cons: ConsBank,
}

impl PointDisc {
    pub fn new(enc: EncoderSpec, cons: ConsSpec, shared: bool, rng: &mut impl Rng) -> Result<Self> {
        if cons.feature_dim != enc.adapt_dim {
            return Err(Error::invalid(format!(
                "consistency feature width {} differs from adapted width {}",
                cons.feature_dim, enc.adapt_dim
            )));
        }
        let encoder = Encoder::new(enc, rng)?;
        let cons = ConsBank::new(cons, shared, rng);
        Ok(PointDisc { encoder, cons })
    }

    pub fn commit(&mut self, tape: &BatchTape) {
        self.encoder.commit(&tape.encoder);
        for (net, slot) in self.cons.nets.iter_mut().zip(&tape.cons) {
            if let Some(ct) = slot {
                net.commit(&ct.tape);
            }
        }
    }
}

impl Module for PointDisc {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.encoder.visit(&crate::blocks::scoped(prefix, "encoder"), v);
        self.cons.visit(&crate::blocks::scoped(prefix, "cons"), v);
    }
}

#[derive(Clone, Debug)]
struct ConsBatch {
    input: ConsInput,
    tape: ConsTape,
    /// `(layer, batch row)` of each feature row in `input.z`.
    sources: Vec<(LayerId, usize)>,
    grad_scores: Tensor,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct BatchTape {
    encoder: EncoderTape,
    cons: Vec<Option<ConsBatch>>,
    adapted_rows: [usize; 4],
}

impl BatchTape {
    /// Piecewise-linear state of the whole pass, for kink-aware gradient checks.
    pub fn pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        self.encoder.push_pattern(&mut out);
        for c in self.cons.iter().flatten() {
            c.tape.push_pattern(&mut out);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// Mean point loss of the groups on each layer (`None` without groups).
    pub per_layer: [Option<f64>; 4],
    pub groups: usize,
}

/// Forward pass of the point discrimination loss over a batch of clouds.
/// The returned tape holds the score gradients; [`batch_backward`] pushes
/// them into every parameter.
pub fn batch_loss(
    model: &PointDisc,
    geoms: &[CloudGeometry],
    groups: &[DiscriminationGroup],
    cfg: &LossConfig,
    mode: Mode,
) -> Result<(LossValue, BatchTape)> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(Error::invalid("batch has no discrimination groups"));
    }
    let (encoded, enc_tape) = model.encoder.forward(geoms, mode)?;
    let weight = match cfg.reduction {
        Reduction::Mean => 1.0 / groups.len() as f64,
        Reduction::Sum => 1.0,
    };
    let mut value = LossValue {
        loss: 0.0,
        per_layer: [None; 4],
        groups: groups.len(),
    };
    let mut layer_sum = [0.0; 4];
    let mut layer_count = [0usize; 4];
    let mut cons = vec![None; model.cons.nets.len()];
    let mut adapted_rows = [0; 4];
    for l in LayerId::ALL {
        adapted_rows[l.index()] = encoded.layer(l).adapted.rows();
    }

    for (net_idx, slot) in cons.iter_mut().enumerate() {
        let mine: Vec<&DiscriminationGroup> = groups
            .iter()
            .filter(|g| model.cons.index(g.layer) == net_idx)
            .collect();
        if mine.is_empty() {
            continue;
        }
        let d = model.encoder.spec.adapt_dim;
        let per = mine[0].positives.len() + mine[0].negatives.len();
        let mut z = Vec::with_capacity(mine.len() * d);
        let mut p = Vec::with_capacity(mine.len() * per * 3);
        let mut owner = Vec::with_capacity(mine.len() * per);
        let mut sources = Vec::with_capacity(mine.len());
        for (gi, g) in mine.iter().enumerate() {
            if g.positives.len() + g.negatives.len() != per {
                return Err(Error::invalid("groups differ in positive or negative counts"));
            }
            let enc = encoded.layer(g.layer);
            let row = g.cloud * enc.rows_per_cloud + g.row;
            if g.cloud >= geoms.len() || g.row >= enc.rows_per_cloud {
                return Err(Error::invalid(format!("group refers to missing {} row", g.layer)));
            }
            z.extend_from_slice(enc.adapted.row(row));
            for q in g.positives.iter().chain(&g.negatives) {
                p.extend_from_slice(q);
                owner.push(gi);
            }
            sources.push((g.layer, row));
        }
        let input = ConsInput::grouped(
            Tensor::matrix(mine.len(), d, z)?,
            Tensor::matrix(owner.len(), 3, p)?,
            owner,
        )?;
        let (scores, tape) = model.cons.nets[net_idx].forward(&input, mode)?;
        let mut grad_scores = Tensor::zeros(scores.shape());
        for (gi, g) in mine.iter().enumerate() {
            let s = &scores.data()[gi * per..(gi + 1) * per];
            let k = g.positives.len();
            let pl = point_loss(&s[..k], &s[k..], cfg.tau)?;
            value.loss += weight * pl.value;
            layer_sum[g.layer.index()] += pl.value;
            layer_count[g.layer.index()] += 1;
            let gs = &mut grad_scores.data_mut()[gi * per..(gi + 1) * per];
            for (dst, v) in gs.iter_mut().zip(pl.grad_pos.iter().chain(&pl.grad_neg)) {
                *dst = weight * v;
            }
        }
        *slot = Some(ConsBatch {
            input,
            tape,
            sources,
            grad_scores,
        });
    }
    if !value.loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {}", value.loss)));
    }
    for i in 0..4 {
        if layer_count[i] > 0 {
            value.per_layer[i] = Some(layer_sum[i] / layer_count[i] as f64);
        }
    }
    Ok((
        value,
        BatchTape {
            encoder: enc_tape,
            cons,
            adapted_rows,
        },
    ))
}

/// Accumulates gradients of the loss recorded in `tape` into `model`.
pub fn batch_backward(model: &mut PointDisc, tape: &BatchTape) {
    let d = model.encoder.spec.adapt_dim;
    let mut grad_adapted: Vec<Option<Tensor>> = vec![None; 4];
    for (net, slot) in model.cons.nets.iter_mut().zip(&tape.cons) {
        let Some(cb) = slot else { continue };
        let (dz, _) = net.backward(&cb.input, &cb.tape, &cb.grad_scores);
        for (gi, &(layer, row)) in cb.sources.iter().enumerate() {
            let acc = grad_adapted[layer.index()]
                .get_or_insert_with(|| Tensor::zeros(&[tape.adapted_rows[layer.index()], d]));
            for (a, v) in acc.row_mut(row).iter_mut().zip(dz.row(gi)) {
                *a += v;
            }
        }
    }
    model.encoder.backward(&tape.encoder, &grad_adapted);
}
