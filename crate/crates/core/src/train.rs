//! Adam, the learning-rate schedule, the pretraining loop and `.pdck`
//! checkpoints.
//!
//! Randomness flows from one master ChaCha8 stream seeded by `train.seed`.
//! Each epoch draws one word from it; that word seeds the epoch's shuffle and,
//! on separate streams, every batch's group sampling. Checkpointing the master
//! stream position therefore makes a resumed run replay the uninterrupted one.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "PDCK"  u32 version  string config  u64 epoch
//! [u8; 32] rng seed  u64 rng stream  u128 rng word position  u64 adam step
//! u32 tensors × (string name, u32 rank, rank × u64 dims, f64 data)
//! ```
//! where `string` is a `u32` byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Mode, Module, Param, Tensor, Visitor};
use crate::codec::{put_string, put_u32, put_u64, ByteReader};
use crate::config::Config;
use crate::data::{derive_seed, Dataset};
use crate::encoder::CloudGeometry;
use crate::error::{Error, Result};
use crate::loss::{batch_backward, batch_loss, build_groups, GroupStats, LossConfig, PointDisc};

pub const PDCK_MAGIC: &[u8; 4] = b"PDCK";
pub const PDCK_VERSION: u32 = 1;
const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_finetune: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub lr_floor: f64,
    pub adam: AdamHyper,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 100,
            lr: 0.001,
            lr_finetune: 0.0005,
            decay_factor: 0.7,
            decay_every: 10,
            lr_floor: 1e-5,
            adam: AdamHyper::default(),
            seed: 0,
            checkpoint_every: 10,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let cfg = TrainConfig {
            batch_size: c.usize("train.batch_size"),
            epochs: c.usize("train.epochs"),
            lr: c.f64("train.lr"),
            lr_finetune: c.f64("train.lr_finetune"),
            decay_factor: c.f64("train.decay_factor"),
            decay_every: c.usize("train.decay_every"),
            lr_floor: c.f64("train.lr_floor"),
            adam: AdamHyper {
                beta1: c.f64("train.beta1"),
                beta2: c.f64("train.beta2"),
                eps: c.f64("train.eps"),
                weight_decay: c.f64("train.weight_decay"),
            },
            seed: c.u64("train.seed"),
            checkpoint_every: c.usize("train.checkpoint_every"),
            loss: c.loss_config()?,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_finetune", self.lr_finetune),
            ("lr_floor", self.lr_floor),
            ("eps", self.adam.eps),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.adam.weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be >= 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2 for batch statistics"));
        }
        if self.decay_every == 0 {
            return Err(Error::invalid("decay_every must be at least 1"));
        }
        self.loss.validate()
    }
}

/// Learning rate for a zero-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let periods = (epoch / cfg.decay_every) as i32;
    (cfg.lr * cfg.decay_factor.powi(periods)).max(cfg.lr_floor)
}

/// Adam moments, one pair per parameter tensor in visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new<M: Module + ?Sized>(model: &mut M, hyper: AdamHyper) -> Self {
        let mut m = Vec::new();
        crate::blocks::for_each_param(model, |_, p| m.push(Tensor::zeros(p.value.shape())));
        let v = m.clone();
        Adam { hyper, step: 0, m, v }
    }
}

/// One bias-corrected Adam update from the gradients held in `model`.
pub fn adam_step<M: Module + ?Sized>(model: &mut M, state: &mut Adam, lr: f64) {
    state.step += 1;
    let h = state.hyper;
    let c1 = 1.0 - h.beta1.powi(state.step as i32);
    let c2 = 1.0 - h.beta2.powi(state.step as i32);
    let mut k = 0;
    crate::blocks::for_each_param(model, |_, p| {
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        let (w, g) = (p.value.data_mut(), p.grad.data());
        for i in 0..w.len() {
            let gi = g[i] + h.weight_decay * w[i];
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            w[i] -= lr * mhat / (vhat.sqrt() + h.eps);
        }
        k += 1;
    });
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved configuration text.
    pub config: String,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: RngState,
    pub adam_step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

struct Collect<'a> {
    out: &'a mut Vec<(String, Tensor)>,
}

impl Visitor for Collect<'_> {
    fn param(&mut self, name: &str, p: &mut Param) {
        self.out.push((name.to_string(), p.value.clone()));
    }

    fn buffer(&mut self, name: &str, b: &mut Tensor) {
        self.out.push((name.to_string(), b.clone()));
    }
}

struct Restore<'a> {
    table: &'a mut BTreeMap<String, Tensor>,
    error: Option<Error>,
}

impl Restore<'_> {
    fn fill(&mut self, name: &str, dst: &mut Tensor) {
        if self.error.is_some() {
            return;
        }
        match self.table.remove(name) {
            None => self.error = Some(Error::Format(format!("checkpoint lacks tensor `{name}`"))),
            Some(t) if t.shape() != dst.shape() => {
                self.error = Some(Error::Shape {
                    name: name.to_string(),
                    expected: dst.shape().to_vec(),
                    found: t.shape().to_vec(),
                })
            }
            Some(t) => *dst = t,
        }
    }
}

impl Visitor for Restore<'_> {
    fn param(&mut self, name: &str, p: &mut Param) {
        self.fill(name, &mut p.value);
    }

    fn buffer(&mut self, name: &str, b: &mut Tensor) {
        self.fill(name, b);
    }
}

fn adam_names(model: &mut PointDisc) -> Vec<String> {
    let mut names = Vec::new();
    crate::blocks::for_each_param(model, |n, _| names.push(n.to_string()));
    names
}

impl Checkpoint {
    pub fn capture(config: &Config, epoch: u64, rng: &ChaCha8Rng, model: &mut PointDisc, adam: &Adam) -> Self {
        let mut tensors = Vec::new();
        model.visit("", &mut Collect { out: &mut tensors });
        for (name, (m, v)) in adam_names(model).into_iter().zip(adam.m.iter().zip(&adam.v)) {
            tensors.push((format!("adam.m.{name}"), m.clone()));
            tensors.push((format!("adam.v.{name}"), v.clone()));
        }
        Checkpoint {
            config: config.to_text(),
            epoch,
            rng: RngState::capture(rng),
            adam_step: adam.step,
            tensors,
        }
    }

    pub fn resolved_config(&self) -> Result<Config> {
        Config::parse(&self.config)
    }

    /// Copies parameters and buffers into `model`, and Adam moments into
    /// `adam` when given. Every tensor must be present with a matching shape.
    pub fn restore(&self, model: &mut PointDisc, adam: Option<&mut Adam>) -> Result<()> {
        let mut table: BTreeMap<String, Tensor> = self.tensors.iter().cloned().collect();
        let mut r = Restore {
            table: &mut table,
            error: None,
        };
        model.visit("", &mut r);
        if let Some(e) = r.error {
            return Err(e);
        }
        let names = adam_names(model);
        match adam {
            Some(adam) => {
                adam.step = self.adam_step;
                for (i, name) in names.iter().enumerate() {
                    let mut r = Restore {
                        table: &mut table,
                        error: None,
                    };
                    r.fill(&format!("adam.m.{name}"), &mut adam.m[i]);
                    r.fill(&format!("adam.v.{name}"), &mut adam.v[i]);
                    if let Some(e) = r.error {
                        return Err(e);
                    }
                }
            }
            None => table.retain(|k, _| !k.starts_with("adam.")),
        }
        match table.keys().next() {
            Some(extra) => Err(Error::Format(format!("checkpoint has unexpected tensor `{extra}`"))),
            None => Ok(()),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PDCK_MAGIC);
        put_u32(&mut out, PDCK_VERSION);
        put_string(&mut out, &self.config);
        put_u64(&mut out, self.epoch);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u64(&mut out, self.adam_step);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_string(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4).ok() != Some(PDCK_MAGIC.as_slice()) {
            return Err(Error::Format("not a PDCK checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != PDCK_VERSION {
            return Err(Error::Format(format!("unsupported PDCK version {version}")));
        }
        let config = r.string()?;
        let epoch = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let adam_step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` has an impossible shape {shape:?}")))?;
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        r.finish()?;
        Ok(Checkpoint {
            config,
            epoch,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            adam_step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// A freshly initialized model for `config`.
pub fn build_model(config: &Config) -> Result<PointDisc> {
    let seed = config.u64("train.seed");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM));
    PointDisc::new(
        config.encoder_spec()?,
        config.cons_spec()?,
        config.bool("consistency.shared"),
        &mut rng,
    )
}

/// The model stored in a checkpoint, with its configuration.
pub fn load_model(path: &Path) -> Result<(Config, PointDisc)> {
    let ck = Checkpoint::load(path)?;
    let config = ck.resolved_config()?;
    let mut model = build_model(&config)?;
    ck.restore(&mut model, None)?;
    Ok((config, model))
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// One-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
    pub groups: GroupStats,
}

/// Where a training run writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

pub struct Trainer {
    pub config: Config,
    pub cfg: TrainConfig,
    pub model: PointDisc,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    rng: ChaCha8Rng,
    geoms: Vec<CloudGeometry>,
    ids: Vec<String>,
}

impl Trainer {
    pub fn new(config: &Config, dataset: &Dataset) -> Result<Self> {
        let cfg = TrainConfig::from_config(config)?;
        if dataset.clouds.len() < 2 {
            return Err(Error::invalid("pretraining needs at least 2 clouds"));
        }
        let mut model = build_model(config)?;
        let geoms = dataset
            .clouds
            .iter()
            .map(|c| model.encoder.geometry(&c.points))
            .collect::<Result<Vec<_>>>()?;
        let adam = Adam::new(&mut model, cfg.adam);
        Ok(Trainer {
            config: config.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            model,
            adam,
            epoch: 0,
            geoms,
            ids: dataset.clouds.iter().map(|c| c.id.clone()).collect(),
        })
    }

    /// Continues the run saved in `ck` on the same dataset.
    pub fn resume(ck: &Checkpoint, dataset: &Dataset) -> Result<Self> {
        let config = ck.resolved_config()?;
        let mut t = Trainer::new(&config, dataset)?;
        ck.restore(&mut t.model, Some(&mut t.adam))?;
        t.rng = ck.rng.restore();
        t.epoch = ck.epoch as usize;
        Ok(t)
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        Checkpoint::capture(&self.config, self.epoch as u64, &self.rng, &mut self.model, &self.adam)
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let start = Instant::now();
        let lr = lr_at(self.epoch, &self.cfg);
        let epoch_seed = self.rng.next_u64();
        let mut order: Vec<usize> = (0..self.geoms.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut total = 0.0;
        let mut batches = 0;
        let mut stats = GroupStats::default();
        let b = self.cfg.batch_size;
        // a trailing single cloud cannot form batch statistics
        let usable = if order.len() % b == 1 { order.len() - 1 } else { order.len() };
        for (bi, chunk) in order[..usable].chunks(b).enumerate() {
            let mut brng = ChaCha8Rng::seed_from_u64(epoch_seed);
            brng.set_stream(bi as u64 + 1);
            let geoms: Vec<CloudGeometry> = chunk.iter().map(|&i| self.geoms[i].clone()).collect();
            let mut groups = Vec::with_capacity(chunk.len() * self.cfg.loss.groups_per_cloud);
            for (ci, g) in geoms.iter().enumerate() {
                let (gs, st) = build_groups(&self.model.encoder.spec, g, ci, &self.cfg.loss, &mut brng)?;
                groups.extend(gs);
                stats.add(st);
            }
            let batch_err = |e: Error| {
                let ids: Vec<&str> = chunk.iter().map(|&i| self.ids[i].as_str()).collect();
                Error::Numeric(format!(
                    "epoch {} batch {bi} (clouds {}): {e}",
                    self.epoch + 1,
                    ids.join(", ")
                ))
            };
            let (value, tape) = match batch_loss(&self.model, &geoms, &groups, &self.cfg.loss, Mode::Train) {
                Ok(v) => v,
                Err(e @ Error::Numeric(_)) => return Err(batch_err(e)),
                Err(e) => return Err(e),
            };
            self.model.zero_grad();
            batch_backward(&mut self.model, &tape);
            self.model.commit(&tape);
            adam_step(&mut self.model, &mut self.adam, lr);
            let mut finite = true;
            crate::blocks::for_each_param(&mut self.model, |_, p| finite &= p.value.all_finite());
            if !finite {
                return Err(batch_err(Error::Numeric("parameters became non-finite".into())));
            }
            total += value.loss;
            batches += 1;
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: total / batches as f64,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
            groups: stats,
        })
    }

    /// Trains until `cfg.epochs` epochs are complete, writing metrics rows and
    /// checkpoints as configured. `on_epoch` sees every finished epoch.
    pub fn run(&mut self, out: &TrainOutputs, mut on_epoch: impl FnMut(&EpochStats)) -> Result<Vec<EpochStats>> {
        let mut metrics = match &out.metrics {
            Some(path) => Some(open_metrics(path, &self.config, self.epoch > 0)?),
            None => None,
        };
        let mut history = Vec::new();
        while self.epoch < self.cfg.epochs {
            let stats = self.run_epoch()?;
            if let Some((path, f)) = &mut metrics {
                writeln!(f, "{},{},{},{:.3}", stats.epoch, stats.mean_loss, stats.lr, stats.wall_seconds)
                    .and_then(|_| f.flush())
                    .map_err(|e| Error::io(path.as_path(), e))?;
            }
            on_epoch(&stats);
            let every = self.cfg.checkpoint_every;
            if let Some(path) = &out.checkpoint {
                if self.epoch == self.cfg.epochs || (every > 0 && self.epoch.is_multiple_of(every)) {
                    self.checkpoint().save(path)?;
                }
            }
            history.push(stats);
        }
        Ok(history)
    }
}

fn open_metrics(path: &Path, config: &Config, append: bool) -> Result<(PathBuf, fs::File)> {
    let io = |e| Error::io(path, e);
    if append && path.exists() {
        let f = fs::OpenOptions::new().append(true).open(path).map_err(io)?;
        return Ok((path.to_path_buf(), f));
    }
    let mut f = fs::File::create(path).map_err(io)?;
    writeln!(f, "{}epoch,mean_loss,lr,wall_seconds", config.comment_block()).map_err(io)?;
    Ok((path.to_path_buf(), f))
}

/// Pretrains a fresh model on `dataset`.
pub fn pretrain(
    config: &Config,
    dataset: &Dataset,
    out: &TrainOutputs,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(Trainer, Vec<EpochStats>)> {
    let mut trainer = Trainer::new(config, dataset)?;
    let history = trainer.run(out, on_epoch)?;
    Ok((trainer, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, Split};

    /// A small but complete configuration for fast end-to-end runs.
    pub(crate) fn tiny_config() -> Config {
        let mut c = Config::default();
        for kv in [
            "data.n_points=64",
            "encoder.l1.centroids=16",
            "encoder.l1.radius=0.4",
            "encoder.l1.max_neighbors=8",
            "encoder.l1.mlp=8,8",
            "encoder.l2.centroids=8",
            "encoder.l2.radius=0.8",
            "encoder.l2.max_neighbors=8",
            "encoder.l2.mlp=8,16",
            "encoder.l3.centroids=4",
            "encoder.l3.radius=1.2",
            "encoder.l3.max_neighbors=4",
            "encoder.l3.mlp=16,16",
            "encoder.global.mlp=16,16",
            "encoder.adapt.hidden=16",
            "encoder.adapt.dim=16",
            "consistency.hidden=16",
            "loss.groups_per_cloud=8",
            "train.batch_size=4",
            "train.epochs=2",
            "train.seed=3",
        ] {
            c.apply_override(kv).unwrap();
        }
        c
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert_eq!(lr_at(9, &cfg), 0.001);
        assert!((lr_at(10, &cfg) - 0.0007).abs() < 1e-15);
        assert_eq!(lr_at(1_000_000, &cfg), 1e-5);
    }

    struct Scalar(Param);

    impl Module for Scalar {
        fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
            v.param(prefix, &mut self.0);
        }
    }

    fn scalar(w: f64) -> Scalar {
        Scalar(Param::new(Tensor::from_vec(&[1], vec![w]).unwrap()))
    }

    #[test]
    fn adam_examples() {
        let mut s = scalar(0.7);
        let mut st = Adam::new(&mut s, AdamHyper::default());
        adam_step(&mut s, &mut st, 0.1);
        assert_eq!(s.0.value.data()[0], 0.7);

        for g in [1e-3, -2.0, 50.0] {
            let mut s = scalar(0.0);
            let mut st = Adam::new(&mut s, AdamHyper::default());
            s.0.grad.data_mut()[0] = g;
            adam_step(&mut s, &mut st, 0.01);
            let step = s.0.value.data()[0].abs();
            // first bias-corrected step: lr·|g|/(|g| + eps)
            assert!((step - 0.01 * g.abs() / (g.abs() + 1e-8)).abs() < 1e-15);
        }

        // 100 steps on w² from w = 1 at lr 0.1, checked against a plain simulation
        let mut s = scalar(1.0);
        let mut st = Adam::new(&mut s, AdamHyper::default());
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let w_now = s.0.value.data()[0];
            s.0.grad.data_mut()[0] = 2.0 * w_now;
            adam_step(&mut s, &mut st, 0.1);
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((s.0.value.data()[0] - w).abs() < 1e-12);
        assert!(w.abs() < 0.1, "{w}");
    }

    #[test]
    fn smoke_run_is_deterministic() {
        let config = tiny_config();
        let ds = synthetic_dataset(16, 64, 1, Split::Train).unwrap();
        let (mut a, ha) = pretrain(&config, &ds, &TrainOutputs::default(), |_| {}).unwrap();
        let (mut b, hb) = pretrain(&config, &ds, &TrainOutputs::default(), |_| {}).unwrap();
        assert_eq!(ha.len(), 2);
        assert!(ha.iter().all(|s| s.mean_loss.is_finite()));
        let losses = |h: &[EpochStats]| h.iter().map(|s| s.mean_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&ha), losses(&hb));
        assert_eq!(a.checkpoint().encode(), b.checkpoint().encode());
    }

    #[test]
    fn checkpoint_roundtrip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config();
        config.apply_override("train.epochs=4").unwrap();
        let ds = synthetic_dataset(12, 64, 2, Split::Train).unwrap();
        let (_, full) = pretrain(&config, &ds, &TrainOutputs::default(), |_| {}).unwrap();

        let mut half = config.clone();
        half.apply_override("train.epochs=2").unwrap();
        let path = dir.path().join("half.pdck");
        let out = TrainOutputs {
            checkpoint: Some(path.clone()),
            metrics: Some(dir.path().join("m.csv")),
        };
        pretrain(&half, &ds, &out, |_| {}).unwrap();

        let bytes = fs::read(&path).unwrap();
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck.encode(), bytes);
        let mut ck4 = ck.clone();
        ck4.config = config.to_text();
        let mut resumed = Trainer::resume(&ck4, &ds).unwrap();
        let rest = resumed.run(&TrainOutputs::default(), |_| {}).unwrap();
        assert_eq!(rest.len(), 2);
        for (a, b) in full[2..].iter().zip(&rest) {
            assert!((a.mean_loss - b.mean_loss).abs() <= 1e-12);
        }

        let csv = fs::read_to_string(dir.path().join("m.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows[0], "epoch,mean_loss,lr,wall_seconds");
        assert_eq!(rows.len(), 3);
        assert!(csv.contains("# train.epochs = 2"));

        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 5]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));

        let mut wide = half.clone();
        wide.apply_override("consistency.hidden=24").unwrap();
        let mut other = build_model(&wide).unwrap();
        match ck.restore(&mut other, None) {
            Err(Error::Shape { name, .. }) => assert!(name.starts_with("cons."), "{name}"),
            e => panic!("{e:?}"),
        }
        let (_, loaded) = load_model(&path).unwrap();
        assert_eq!(loaded.encoder.spec, half.encoder_spec().unwrap());
    }
}
