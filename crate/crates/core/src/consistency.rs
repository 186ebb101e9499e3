//! Point consistency network `Cons(z, p) → score`.
//!
//! The input code is `ẑ = [p, z]`. An entry linear map lifts it to the hidden
//! width, a pre-activation residual block (CBN → ReLU → linear, twice, plus an
//! identity skip) follows, and a final CBN → ReLU → linear produces one score
//! per row. Each CBN site normalizes with shared batch statistics and applies
//! a per-row scale `γ(ẑ)` and shift `β(ẑ)`, each produced by its own linear
//! map of `ẑ`.
//!
//! Many points are scored against the same feature, so inputs are given as a
//! set of features plus points that each name their owning feature
//! ([`ConsInput`]). Every map of `ẑ` is split into a point part and a feature
//! part, and the feature part is computed once per feature.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::blocks::{
    cbn, cbn_backward, gemm, relu, relu_backward, scoped, BatchNorm, Linear, Mode, Module,
    NormTape, Param, Tensor, Visitor,
};
use crate::encoder::LayerId;
use crate::error::{Error, Result};

/// Normalization used at every site of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Conditional batch normalization with `γ(ẑ)`, `β(ẑ)`.
    Cbn,
    /// Plain batch normalization without affine parameters.
    Bn,
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cbn" => Ok(NormKind::Cbn),
            "bn" => Ok(NormKind::Bn),
            other => Err(Error::invalid(format!("unknown normalization `{other}`"))),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Cbn => "cbn",
            NormKind::Bn => "bn",
        })
    }
}

/// Shape of the `ẑ → γ` and `ẑ → β` maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionerKind {
    /// One linear layer each.
    Single,
    /// Linear → ReLU → linear each.
    Stacked,
}

impl FromStr for ConditionerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(ConditionerKind::Single),
            "stacked" => Ok(ConditionerKind::Stacked),
            other => Err(Error::invalid(format!("unknown conditioner `{other}`"))),
        }
    }
}

impl fmt::Display for ConditionerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditionerKind::Single => "single",
            ConditionerKind::Stacked => "stacked",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsSpec {
    pub feature_dim: usize,
    pub hidden: usize,
    pub norm: NormKind,
    pub conditioner: ConditionerKind,
}

impl Default for ConsSpec {
    fn default() -> Self {
        ConsSpec {
            feature_dim: 256,
            hidden: 256,
            norm: NormKind::Cbn,
            conditioner: ConditionerKind::Single,
        }
    }
}

/// Features `z` (one row per feature) and query points `p`, each point
/// paired with the feature at `owner[r]`.
#[derive(Clone, Debug)]
pub struct ConsInput {
    pub z: Tensor,
    pub p: Tensor,
    pub owner: Vec<usize>,
}

impl ConsInput {
    pub fn grouped(z: Tensor, p: Tensor, owner: Vec<usize>) -> Result<Self> {
        if p.cols() != 3 || p.rows() != owner.len() {
            return Err(Error::invalid(format!(
                "points {:?} do not match {} owners",
                p.shape(),
                owner.len()
            )));
        }
        if owner.iter().any(|&o| o >= z.rows()) {
            return Err(Error::invalid("point owner out of range"));
        }
        if !p.all_finite() || !z.all_finite() {
            return Err(Error::invalid("consistency input has non-finite values"));
        }
        Ok(ConsInput { z, p, owner })
    }

    /// Row-aligned pairs `(z_r, p_r)`.
    pub fn pairs(z: Tensor, p: Tensor) -> Result<Self> {
        if z.rows() != p.rows() {
            return Err(Error::invalid(format!(
                "{} features vs {} points",
                z.rows(),
                p.rows()
            )));
        }
        let owner = (0..z.rows()).collect();
        Self::grouped(z, p, owner)
    }

    pub fn rows(&self) -> usize {
        self.p.rows()
    }
}

/// Linear map of `ẑ = [p, z]`; weight rows 0..3 act on `p`, the rest on `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondLinear {
    pub weight: Param,
    pub bias: Param,
}

impl CondLinear {
    pub fn new(feature_dim: usize, out: usize, rng: &mut impl Rng) -> Self {
        let lin = Linear::new(3 + feature_dim, out, rng);
        CondLinear {
            weight: lin.weight,
            bias: lin.bias,
        }
    }

    /// Zero weights and a constant bias: outputs `value` for any input.
    pub fn constant(feature_dim: usize, out: usize, value: f64) -> Self {
        CondLinear {
            weight: Param::new(Tensor::zeros(&[3 + feature_dim, out])),
            bias: Param::new(Tensor::filled(&[out], value)),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn feature_dim(&self) -> usize {
        self.weight.value.shape()[0] - 3
    }

    pub fn forward(&self, input: &ConsInput) -> Result<Tensor> {
        let (d, out) = (self.feature_dim(), self.out_dim());
        if input.z.cols() != d {
            return Err(Error::invalid(format!(
                "conditioning expects {d}-dim features, got {}",
                input.z.cols()
            )));
        }
        let w = self.weight.value.data();
        let g = input.z.rows();
        let mut zpart = vec![0.0; g * out];
        gemm(g, d, out, input.z.data(), false, &w[3 * out..], false, &mut zpart, 0.0);
        let mut y = Tensor::zeros(&[input.rows(), out]);
        let b = self.bias.value.data();
        for (r, &o) in input.owner.iter().enumerate() {
            let p = input.p.row(r);
            let zr = &zpart[o * out..(o + 1) * out];
            let row = y.row_mut(r);
            for j in 0..out {
                row[j] = b[j] + zr[j] + p[0] * w[j] + p[1] * w[out + j] + p[2] * w[2 * out + j];
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients; returns `(∂z, ∂p)`.
    pub fn backward(&mut self, input: &ConsInput, grad_out: &Tensor) -> (Tensor, Tensor) {
        let (d, out) = (self.feature_dim(), self.out_dim());
        let g = input.z.rows();
        let mut per_feature = vec![0.0; g * out];
        for (r, &o) in input.owner.iter().enumerate() {
            for (s, v) in per_feature[o * out..(o + 1) * out].iter_mut().zip(grad_out.row(r)) {
                *s += v;
            }
        }
        {
            let gw = self.weight.grad.data_mut();
            gemm(d, g, out, input.z.data(), true, &per_feature, false, &mut gw[3 * out..], 1.0);
            for r in 0..input.rows() {
                let p = input.p.row(r);
                let go = grad_out.row(r);
                for k in 0..3 {
                    let row = &mut gw[k * out..(k + 1) * out];
                    for (a, v) in row.iter_mut().zip(go) {
                        *a += p[k] * v;
                    }
                }
            }
        }
        let gb = self.bias.grad.data_mut();
        for r in 0..input.rows() {
            for (a, v) in gb.iter_mut().zip(grad_out.row(r)) {
                *a += v;
            }
        }
        let w = self.weight.value.data();
        let mut dz = Tensor::zeros(&[g, d]);
        gemm(g, out, d, &per_feature, false, &w[3 * out..], true, dz.data_mut(), 0.0);
        let mut dp = Tensor::zeros(&[input.rows(), 3]);
        for r in 0..input.rows() {
            let go = grad_out.row(r);
            let dst = dp.row_mut(r);
            for (k, v) in dst.iter_mut().enumerate() {
                *v = w[k * out..(k + 1) * out].iter().zip(go).map(|(a, b)| a * b).sum();
            }
        }
        (dz, dp)
    }
}

impl Module for CondLinear {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        v.param(&scoped(prefix, "weight"), &mut self.weight);
        v.param(&scoped(prefix, "bias"), &mut self.bias);
    }
}

/// One `ẑ → γ` or `ẑ → β` map.
#[derive(Clone, Debug, PartialEq)]
pub struct CondMap {
    pub first: CondLinear,
    pub second: Option<Linear>,
}

#[derive(Clone, Debug)]
struct CondMapTape {
    hidden_pre: Tensor,
    hidden: Tensor,
}

impl CondMap {
    /// A map whose output starts at `value` for every input.
    fn new(kind: ConditionerKind, d: usize, c: usize, value: f64, rng: &mut impl Rng) -> Self {
        match kind {
            ConditionerKind::Single => CondMap {
                first: CondLinear::constant(d, c, value),
                second: None,
            },
            ConditionerKind::Stacked => CondMap {
                first: CondLinear::new(d, c, rng),
                second: Some(Linear {
                    weight: Param::new(Tensor::zeros(&[c, c])),
                    bias: Param::new(Tensor::filled(&[c], value)),
                }),
            },
        }
    }

    fn forward(&self, input: &ConsInput) -> Result<(Tensor, Option<CondMapTape>)> {
        let h = self.first.forward(input)?;
        match &self.second {
            None => Ok((h, None)),
            Some(lin) => {
                let hidden = relu(&h);
                let out = lin.forward(&hidden)?;
                Ok((
                    out,
                    Some(CondMapTape {
                        hidden_pre: h,
                        hidden,
                    }),
                ))
            }
        }
    }

    fn backward(&mut self, input: &ConsInput, tape: Option<&CondMapTape>, grad: &Tensor) -> (Tensor, Tensor) {
        match (&mut self.second, tape) {
            (Some(lin), Some(t)) => {
                let gh = lin.backward(&t.hidden, grad, true).expect("input gradient");
                let gpre = relu_backward(&t.hidden_pre, &gh);
                self.first.backward(input, &gpre)
            }
            _ => self.first.backward(input, grad),
        }
    }
}

impl Module for CondMap {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.first.visit(&scoped(prefix, "fc0"), v);
        if let Some(lin) = &mut self.second {
            lin.visit(&scoped(prefix, "fc1"), v);
        }
    }
}

/// One normalization site: batch statistics plus, for CBN, the conditioner.
#[derive(Clone, Debug, PartialEq)]
pub struct NormSite {
    pub norm: BatchNorm,
    pub gamma: Option<CondMap>,
    pub beta: Option<CondMap>,
}

#[derive(Clone, Debug)]
struct SiteTape {
    norm: NormTape,
    gamma: Option<Tensor>,
    gamma_tape: Option<CondMapTape>,
    beta_tape: Option<CondMapTape>,
}

impl NormSite {
    fn new(spec: &ConsSpec, rng: &mut impl Rng) -> Self {
        let (d, c) = (spec.feature_dim, spec.hidden);
        match spec.norm {
            NormKind::Cbn => NormSite {
                norm: BatchNorm::without_affine(c),
                gamma: Some(CondMap::new(spec.conditioner, d, c, 1.0, rng)),
                beta: Some(CondMap::new(spec.conditioner, d, c, 0.0, rng)),
            },
            NormKind::Bn => NormSite {
                norm: BatchNorm::without_affine(c),
                gamma: None,
                beta: None,
            },
        }
    }

    /// Per-row `(γ(ẑ), β(ẑ))`; `None` for a plain normalization site.
    pub fn condition(&self, input: &ConsInput) -> Result<Option<(Tensor, Tensor)>> {
        match (&self.gamma, &self.beta) {
            (Some(g), Some(b)) => Ok(Some((g.forward(input)?.0, b.forward(input)?.0))),
            _ => Ok(None),
        }
    }

    fn forward(&self, input: &ConsInput, x: &Tensor, mode: Mode) -> Result<(Tensor, SiteTape)> {
        match (&self.gamma, &self.beta) {
            (Some(gm), Some(bm)) => {
                let (gamma, gamma_tape) = gm.forward(input)?;
                let (beta, beta_tape) = bm.forward(input)?;
                let (y, norm) = cbn(&self.norm, x, &gamma, &beta, mode)?;
                Ok((
                    y,
                    SiteTape {
                        norm,
                        gamma: Some(gamma),
                        gamma_tape,
                        beta_tape,
                    },
                ))
            }
            _ => {
                let (y, norm) = self.norm.forward(x, mode)?;
                Ok((
                    y,
                    SiteTape {
                        norm,
                        gamma: None,
                        gamma_tape: None,
                        beta_tape: None,
                    },
                ))
            }
        }
    }

    /// Returns `(∂x, ∂z, ∂p)`; the latter two are `None` without a conditioner.
    fn backward(
        &mut self,
        input: &ConsInput,
        tape: &SiteTape,
        grad: &Tensor,
    ) -> (Tensor, Option<(Tensor, Tensor)>) {
        match (&mut self.gamma, &mut self.beta, &tape.gamma) {
            (Some(gm), Some(bm), Some(gamma)) => {
                let g = cbn_backward(&tape.norm, gamma, grad);
                let (mut dz, mut dp) = gm.backward(input, tape.gamma_tape.as_ref(), &g.gamma);
                let (dz2, dp2) = bm.backward(input, tape.beta_tape.as_ref(), &g.beta);
                dz.add_assign(&dz2);
                dp.add_assign(&dp2);
                (g.input, Some((dz, dp)))
            }
            _ => (self.norm.backward(&tape.norm, grad), None),
        }
    }
}

impl Module for NormSite {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.norm.visit(&scoped(prefix, "bn"), v);
        if let Some(g) = &mut self.gamma {
            g.visit(&scoped(prefix, "gamma"), v);
        }
        if let Some(b) = &mut self.beta {
            b.visit(&scoped(prefix, "beta"), v);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsNet {
    pub spec: ConsSpec,
    pub entry: CondLinear,
    /// Two sites inside the residual block, one before the head.
    pub sites: Vec<NormSite>,
    pub block: Vec<Linear>,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct ConsTape {
    sites: Vec<SiteTape>,
    pre_act: Vec<Tensor>,
    act: Vec<Tensor>,
}

impl ConsTape {
    /// Piecewise-linear state of the pass: every ReLU sign.
    pub fn pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        self.push_pattern(&mut out);
        out
    }

    pub(crate) fn push_pattern(&self, out: &mut Vec<u32>) {
        let signs = |t: &Tensor, out: &mut Vec<u32>| out.extend(t.data().iter().map(|v| u32::from(*v > 0.0)));
        for a in &self.pre_act {
            signs(a, out);
        }
        for site in &self.sites {
            for m in [&site.gamma_tape, &site.beta_tape].into_iter().flatten() {
                signs(&m.hidden_pre, out);
            }
        }
    }
}

impl ConsNet {
    pub fn new(spec: ConsSpec, rng: &mut impl Rng) -> Self {
        let (d, c) = (spec.feature_dim, spec.hidden);
        let entry = CondLinear::new(d, c, rng);
        let sites = (0..3).map(|_| NormSite::new(&spec, rng)).collect();
        let block = (0..2).map(|_| Linear::new(c, c, rng)).collect();
        let head = Linear::new(c, 1, rng);
        ConsNet {
            spec,
            entry,
            sites,
            block,
            head,
        }
    }

    /// Scores of every input row, shape `rows × 1`.
    pub fn forward(&self, input: &ConsInput, mode: Mode) -> Result<(Tensor, ConsTape)> {
        if mode == Mode::Train && input.rows() < 2 {
            return Err(Error::invalid(format!(
                "consistency network needs a batch of at least 2 in train mode, got {}",
                input.rows()
            )));
        }
        let mut tape = ConsTape {
            sites: Vec::with_capacity(3),
            pre_act: Vec::with_capacity(3),
            act: Vec::with_capacity(3),
        };
        let h0 = self.entry.forward(input)?;
        let mut h = h0.clone();
        for (site, lin) in self.sites.iter().zip(&self.block) {
            let (a, st) = site.forward(input, &h, mode)?;
            let r = relu(&a);
            h = lin.forward(&r)?;
            tape.sites.push(st);
            tape.pre_act.push(a);
            tape.act.push(r);
        }
        h.add_assign(&h0);
        let (a, st) = self.sites[2].forward(input, &h, mode)?;
        let r = relu(&a);
        let score = self.head.forward(&r)?;
        tape.sites.push(st);
        tape.pre_act.push(a);
        tape.act.push(r);
        Ok((score, tape))
    }

    /// Accumulates parameter gradients; returns `(∂z, ∂p)`.
    pub fn backward(&mut self, input: &ConsInput, tape: &ConsTape, grad_scores: &Tensor) -> (Tensor, Tensor) {
        let mut dz = Tensor::zeros(input.z.shape());
        let mut dp = Tensor::zeros(input.p.shape());
        let mut absorb = |cond: Option<(Tensor, Tensor)>| {
            if let Some((z, p)) = cond {
                dz.add_assign(&z);
                dp.add_assign(&p);
            }
        };
        let gr = self.head.backward(&tape.act[2], grad_scores, true).expect("input gradient");
        let ga = relu_backward(&tape.pre_act[2], &gr);
        let (g_sum, cond) = self.sites[2].backward(input, &tape.sites[2], &ga);
        absorb(cond);
        // residual: the sum feeds both the skip and the block output
        let mut g = g_sum.clone();
        for i in (0..2).rev() {
            let gr = self.block[i].backward(&tape.act[i], &g, true).expect("input gradient");
            let ga = relu_backward(&tape.pre_act[i], &gr);
            let (gh, cond) = self.sites[i].backward(input, &tape.sites[i], &ga);
            absorb(cond);
            g = gh;
        }
        g.add_assign(&g_sum);
        let (z, p) = self.entry.backward(input, &g);
        dz.add_assign(&z);
        dp.add_assign(&p);
        (dz, dp)
    }

    pub fn commit(&mut self, tape: &ConsTape) {
        for (site, st) in self.sites.iter_mut().zip(&tape.sites) {
            site.norm.commit(&st.norm);
        }
    }

    /// Convenience scoring of row-aligned `(z, p)` pairs.
    pub fn score(&self, z: &Tensor, p: &Tensor, mode: Mode) -> Result<Vec<f64>> {
        let input = ConsInput::pairs(z.clone(), p.clone())?;
        Ok(self.forward(&input, mode)?.0.into_data())
    }
}

impl Module for ConsNet {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.entry.visit(&scoped(prefix, "entry"), v);
        for (i, site) in self.sites.iter_mut().enumerate() {
            site.visit(&scoped(prefix, &format!("norm{i}")), v);
        }
        for (i, lin) in self.block.iter_mut().enumerate() {
            lin.visit(&scoped(prefix, &format!("fc{i}")), v);
        }
        self.head.visit(&scoped(prefix, "head"), v);
    }
}

/// One consistency network per layer, or a single one shared by all layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsBank {
    pub shared: bool,
    pub nets: Vec<ConsNet>,
}

impl ConsBank {
    pub fn new(spec: ConsSpec, shared: bool, rng: &mut impl Rng) -> Self {
        let count = if shared { 1 } else { LayerId::ALL.len() };
        let nets = (0..count).map(|_| ConsNet::new(spec.clone(), rng)).collect();
        ConsBank { shared, nets }
    }

    pub fn index(&self, layer: LayerId) -> usize {
        if self.shared {
            0
        } else {
            layer.index()
        }
    }

    pub fn net(&self, layer: LayerId) -> &ConsNet {
        &self.nets[self.index(layer)]
    }
}

impl Module for ConsBank {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        if self.shared {
            self.nets[0].visit(&scoped(prefix, "shared"), v);
        } else {
            for (layer, net) in LayerId::ALL.iter().zip(self.nets.iter_mut()) {
                net.visit(&scoped(prefix, layer.name()), v);
            }
        }
    }
}
