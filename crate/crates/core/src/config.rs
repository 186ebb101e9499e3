//! Flat `key = value` configuration.
//!
//! Every tunable lives under a dotted key with a typed schema entry and a
//! documented default. A resolved [`Config`] is defaults, then a config file,
//! then `--set` overrides; its [`Config::to_text`] form is echoed into every
//! checkpoint and CSV produced from it.

use std::fmt::Write as _;
use std::path::Path;

use crate::consistency::{ConditionerKind, ConsSpec, NormKind};
use crate::encoder::{EncoderSpec, LayerId, LayerSpec};
use crate::error::{Error, Result};
use crate::geom::{NoiseKind, NoiseSpec};
use crate::loss::{LayerChoice, LossConfig, Reduction};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Enum(&'static [&'static str]),
    IntList,
    FloatList,
    LayerList,
}

impl Kind {
    fn describe(self) -> String {
        match self {
            Kind::Int => "int".into(),
            Kind::Float => "float".into(),
            Kind::Bool => "bool".into(),
            Kind::Enum(opts) => opts.join("\\|"),
            Kind::IntList => "int list".into(),
            Kind::FloatList => "float list".into(),
            Kind::LayerList => "layer list".into(),
        }
    }

    /// Canonical text of a valid value; `None` if the value does not parse.
    fn canonical(self, raw: &str) -> Option<String> {
        let raw = raw.trim();
        let list = |raw: &str| -> Vec<String> {
            raw.split(',').map(|s| s.trim().to_string()).collect()
        };
        match self {
            Kind::Int => raw.parse::<u64>().ok().map(|v| v.to_string()),
            Kind::Float => raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(|v| format!("{v:?}")),
            Kind::Bool => match raw {
                "true" => Some("true".into()),
                "false" => Some("false".into()),
                _ => None,
            },
            Kind::Enum(opts) => opts.contains(&raw).then(|| raw.to_string()),
            Kind::IntList => list(raw)
                .iter()
                .map(|s| s.parse::<u64>().ok().map(|v| v.to_string()))
                .collect::<Option<Vec<_>>>()
                .map(|v| v.join(",")),
            Kind::FloatList => list(raw)
                .iter()
                .map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| format!("{v:?}")))
                .collect::<Option<Vec<_>>>()
                .map(|v| v.join(",")),
            Kind::LayerList => list(raw)
                .iter()
                .map(|s| s.parse::<LayerId>().ok().map(|l| l.name().to_string()))
                .collect::<Option<Vec<_>>>()
                .map(|v| v.join(",")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KeyDef {
    pub key: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub doc: &'static str,
    /// Value used in the original large-scale setting, where it differs or is stated.
    pub published: &'static str,
}

const fn key(
    key: &'static str,
    kind: Kind,
    default: &'static str,
    doc: &'static str,
    published: &'static str,
) -> KeyDef {
    KeyDef {
        key,
        kind,
        default,
        doc,
        published,
    }
}

const NOISE_KINDS: &[&str] = &["uniform", "gaussian"];
pub const ABLATION_AXES: &[&str] = &["noise_kind", "T_sweep", "layer_set", "cbn_vs_bn", "exclusion"];

pub static SCHEMA: &[KeyDef] = &[
    key("data.n_points", Kind::Int, "512", "points per cloud", ""),
    key("data.clouds", Kind::Int, "400", "clouds generated by gen-data", "ModelNet40"),
    key("data.seed", Kind::Int, "0", "seed for dataset generation and OFF surface sampling", ""),
    key("data.split", Kind::Enum(&["train", "val", "test"]), "train", "split tag written into generated datasets", ""),
    key("encoder.l1.centroids", Kind::Int, "128", "FPS centroids of the first set abstraction", ""),
    key("encoder.l1.radius", Kind::Float, "0.25", "ball-query radius of the first set abstraction", ""),
    key("encoder.l1.max_neighbors", Kind::Int, "32", "neighbors per group, first set abstraction", ""),
    key("encoder.l1.mlp", Kind::IntList, "32,32,64", "per-point MLP widths, first set abstraction", ""),
    key("encoder.l2.centroids", Kind::Int, "32", "FPS centroids of the second set abstraction", ""),
    key("encoder.l2.radius", Kind::Float, "0.5", "ball-query radius of the second set abstraction", ""),
    key("encoder.l2.max_neighbors", Kind::Int, "32", "neighbors per group, second set abstraction", ""),
    key("encoder.l2.mlp", Kind::IntList, "64,64,128", "per-point MLP widths, second set abstraction", ""),
    key("encoder.l3.centroids", Kind::Int, "8", "FPS centroids of the third set abstraction", ""),
    key("encoder.l3.radius", Kind::Float, "0.8", "ball-query radius of the third set abstraction", ""),
    key("encoder.l3.max_neighbors", Kind::Int, "16", "neighbors per group, third set abstraction", ""),
    key("encoder.l3.mlp", Kind::IntList, "128,128,256", "per-point MLP widths, third set abstraction", ""),
    key("encoder.global.mlp", Kind::IntList, "256,256", "MLP widths of the global set abstraction", ""),
    key("encoder.adapt.hidden", Kind::Int, "256", "hidden width of each adaptation MLP", "256"),
    key("encoder.adapt.dim", Kind::Int, "256", "output width D of each adaptation MLP", "256"),
    key("consistency.hidden", Kind::Int, "256", "hidden width of the consistency network", "256"),
    key("consistency.norm", Kind::Enum(&["cbn", "bn"]), "cbn", "conditional or plain batch norm at every site", "cbn"),
    key("consistency.conditioner", Kind::Enum(&["single", "stacked"]), "single", "one linear layer or linear-ReLU-linear per gamma/beta map", ""),
    key("consistency.shared", Kind::Bool, "false", "one consistency network for all layers instead of one per layer", ""),
    key("loss.tau", Kind::Float, "0.1", "softmax temperature", "0.1"),
    key("loss.K", Kind::Int, "1", "positives per group", "1"),
    key("loss.T", Kind::Int, "10", "negatives per group", "10"),
    key("loss.groups_per_cloud", Kind::Int, "64", "discrimination groups sampled per cloud", "1000"),
    key("loss.layers", Kind::LayerList, "l1,l2,l3,global", "layers whose features carry the loss", "l1,l2,l3,global"),
    key("loss.reduction", Kind::Enum(&["mean", "sum"]), "mean", "mean or sum over groups", "sum"),
    key("loss.layer_choice", Kind::Enum(&["uniform", "quota"]), "uniform", "random layer per group, or equal quotas", ""),
    key("loss.positives_with_replacement", Kind::Bool, "true", "draw positives with replacement", ""),
    key("loss.z_with_replacement", Kind::Bool, "true", "draw group features with replacement", ""),
    key("loss.noise.kind", Kind::Enum(NOISE_KINDS), "uniform", "noise added to region points to make negatives", "uniform"),
    key("loss.noise.a", Kind::Float, "1.0", "half-width of uniform noise", "1"),
    key("loss.noise.sigma", Kind::Float, "1.0", "standard deviation of Gaussian noise", ""),
    key("loss.noise.exclusion_radius", Kind::Float, "0.0", "redraw negatives closer than this to the region (0 = off)", "0 (0.1 in ablation)"),
    key("train.batch_size", Kind::Int, "8", "clouds per mini-batch", "24"),
    key("train.epochs", Kind::Int, "100", "pretraining epochs", ""),
    key("train.lr", Kind::Float, "0.001", "initial pretraining learning rate", "0.001"),
    key("train.lr_finetune", Kind::Float, "0.0005", "initial fine-tuning learning rate (recorded, unused by the linear probe)", "0.0005"),
    key("train.decay_factor", Kind::Float, "0.7", "learning-rate multiplier per decay period", "exponential decay"),
    key("train.decay_every", Kind::Int, "10", "epochs per decay period", ""),
    key("train.lr_floor", Kind::Float, "1e-5", "lower bound on the learning rate", ""),
    key("train.beta1", Kind::Float, "0.9", "Adam first-moment decay", ""),
    key("train.beta2", Kind::Float, "0.999", "Adam second-moment decay", ""),
    key("train.eps", Kind::Float, "1e-8", "Adam denominator epsilon", ""),
    key("train.weight_decay", Kind::Float, "0.0", "L2 penalty added to every gradient", ""),
    key("train.seed", Kind::Int, "0", "seed for initialization, shuffling and group sampling", ""),
    key("train.checkpoint_every", Kind::Int, "10", "epochs between checkpoints (0 = only at the end)", ""),
    key("eval.lambdas", Kind::FloatList, "0.0001,0.001,0.01,0.1,1.0,10.0", "L2 strengths tried by the linear probe", "SVM C chosen on val"),
    key("eval.max_iters", Kind::Int, "5000", "gradient-descent iterations per probe fit", ""),
    key("eval.grad_tol", Kind::Float, "1e-6", "probe stops once the gradient norm falls below this", ""),
    key("eval.probe_samples", Kind::Int, "5000", "uniform points scored per shape probe", "5000"),
    key("eval.probe_top_k", Kind::Int, "100", "highest-scoring points kept per shape probe", "100"),
    key("eval.probe_layer", Kind::Enum(&["l1", "l2", "l3", "global"]), "l2", "layer probed by shape-probe", ""),
    key("eval.probes", Kind::Int, "20", "probes run by shape-probe", ""),
    key("eval.seed", Kind::Int, "0", "seed for shape probes", ""),
    key("ablate.axis", Kind::Enum(ABLATION_AXES), "T_sweep", "ablated setting", ""),
    key("ablate.values", Kind::Enum(&[]), "", "comma-separated values for the axis (empty = axis default)", ""),
    key("ablate.repeats", Kind::Int, "3", "seeds per value", ""),
];

fn schema_index(key: &str) -> Option<usize> {
    SCHEMA.iter().position(|d| d.key == key)
}

/// A fully resolved configuration: one canonical value per schema key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: Vec<String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: SCHEMA.iter().map(|d| d.default.to_string()).collect(),
        }
    }
}

impl Config {
    /// Defaults overlaid with `text`.
    pub fn parse(text: &str) -> Result<Config> {
        let mut c = Config::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, found `{body}`"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Parse { line: i + 1, msg },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let idx = schema_index(key).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let def = &SCHEMA[idx];
        let canonical = if def.key == "ablate.values" {
            Some(value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect::<Vec<_>>().join(","))
        } else {
            def.kind.canonical(value)
        };
        self.values[idx] = canonical.ok_or_else(|| {
            Error::Config(format!(
                "invalid value `{value}` for `{key}` (expected {})",
                def.kind.describe().replace("\\|", "|")
            ))
        })?;
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        let idx = schema_index(key).unwrap_or_else(|| panic!("`{key}` is not a schema key"));
        &self.values[idx]
    }

    pub fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated int")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated int")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated float")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn usize_list(&self, key: &str) -> Vec<usize> {
        self.get(key).split(',').map(|s| s.parse().expect("validated int list")).collect()
    }

    pub fn f64_list(&self, key: &str) -> Vec<f64> {
        self.get(key).split(',').map(|s| s.parse().expect("validated float list")).collect()
    }

    pub fn layers(&self, key: &str) -> Vec<LayerId> {
        self.get(key).split(',').map(|s| s.parse().expect("validated layer list")).collect()
    }

    /// One `key = value` line per schema key, in schema order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (def, v) in SCHEMA.iter().zip(&self.values) {
            writeln!(out, "{} = {v}", def.key).expect("string write");
        }
        out
    }

    /// Keys whose values differ between two configs.
    pub fn diff(&self, other: &Config) -> Vec<&'static str> {
        SCHEMA
            .iter()
            .zip(self.values.iter().zip(&other.values))
            .filter(|(_, (a, b))| a != b)
            .map(|(d, _)| d.key)
            .collect()
    }

    /// The config echoed as `# `-prefixed comment lines.
    pub fn comment_block(&self) -> String {
        self.to_text().lines().map(|l| format!("# {l}\n")).collect()
    }

    pub fn encoder_spec(&self) -> Result<EncoderSpec> {
        let level = |l: &str| LayerSpec {
            centroids: self.usize(&format!("encoder.{l}.centroids")),
            radius: self.f64(&format!("encoder.{l}.radius")),
            max_neighbors: self.usize(&format!("encoder.{l}.max_neighbors")),
            mlp: self.usize_list(&format!("encoder.{l}.mlp")),
        };
        let spec = EncoderSpec {
            n_points: self.usize("data.n_points"),
            levels: [level("l1"), level("l2"), level("l3")],
            global_mlp: self.usize_list("encoder.global.mlp"),
            adapt_hidden: self.usize("encoder.adapt.hidden"),
            adapt_dim: self.usize("encoder.adapt.dim"),
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn cons_spec(&self) -> Result<ConsSpec> {
        let spec = ConsSpec {
            feature_dim: self.usize("encoder.adapt.dim"),
            hidden: self.usize("consistency.hidden"),
            norm: self.get("consistency.norm").parse::<NormKind>()?,
            conditioner: self.get("consistency.conditioner").parse::<ConditionerKind>()?,
        };
        if spec.hidden == 0 {
            return Err(Error::Config("consistency.hidden must be at least 1".into()));
        }
        Ok(spec)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let cfg = LossConfig {
            tau: self.f64("loss.tau"),
            k: self.usize("loss.K"),
            t: self.usize("loss.T"),
            groups_per_cloud: self.usize("loss.groups_per_cloud"),
            layers: self.layers("loss.layers"),
            reduction: self.get("loss.reduction").parse::<Reduction>()?,
            noise: NoiseSpec {
                kind: match self.get("loss.noise.kind") {
                    "gaussian" => NoiseKind::Gaussian,
                    _ => NoiseKind::Uniform,
                },
                a: self.f64("loss.noise.a"),
                sigma: self.f64("loss.noise.sigma"),
                exclusion_radius: self.f64("loss.noise.exclusion_radius"),
            },
            positives_with_replacement: self.bool("loss.positives_with_replacement"),
            z_with_replacement: self.bool("loss.z_with_replacement"),
            layer_choice: self.get("loss.layer_choice").parse::<LayerChoice>()?,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// The key table as a Markdown document.
pub fn markdown_table() -> String {
    let mut out = String::from("| key | type | default | published setting | meaning |\n|---|---|---|---|---|\n");
    for d in SCHEMA {
        let kind = if d.key == "ablate.values" {
            "string".to_string()
        } else {
            d.kind.describe()
        };
        let default = if d.default.is_empty() { "(empty)" } else { d.default };
        let published = if d.published.is_empty() { "-" } else { d.published };
        writeln!(out, "| `{}` | {} | `{}` | {} | {} |", d.key, kind, default, published, d.doc).expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_canonical() {
        let c = Config::parse("").unwrap();
        assert_eq!(c, Config::default());
        for d in SCHEMA {
            if d.key != "ablate.values" {
                assert_eq!(d.kind.canonical(d.default).as_deref(), Some(c.get(d.key)), "{}", d.key);
            }
        }
        assert_eq!(c.f64("loss.tau"), 0.1);
        assert_eq!(c.encoder_spec().unwrap(), EncoderSpec::default());
        assert_eq!(c.cons_spec().unwrap(), ConsSpec::default());
        assert_eq!(c.loss_config().unwrap(), LossConfig::default());
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parse_file_and_overrides() {
        let mut c = Config::parse("# header\n\nloss.tau = 0.2  # sharper\nloss.layers = l3, global\n").unwrap();
        assert_eq!(c.f64("loss.tau"), 0.2);
        assert_eq!(c.layers("loss.layers"), vec![LayerId::L3, LayerId::Global]);
        c.apply_override("train.lr=1e-4").unwrap();
        assert_eq!(c.get("train.lr"), "0.0001");
        assert_eq!(c.diff(&Config::default()), vec!["loss.tau", "loss.layers", "train.lr"]);
    }

    #[test]
    fn errors_name_line_and_key() {
        match Config::parse("\nloss.tau = abc\n") {
            Err(Error::Parse { line: 2, msg }) => assert!(msg.contains("loss.tau")),
            other => panic!("{other:?}"),
        }
        match Config::parse("loss.bogus = 1\n") {
            Err(Error::Parse { line: 1, msg }) => assert!(msg.contains("loss.bogus")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Config::parse("just words"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(Config::default().apply_override("nokey"), Err(Error::Config(_))));
        assert!(Config::parse("consistency.norm = layer").is_err());
        assert!(Config::parse("loss.tau = -1").unwrap().loss_config().is_err());
    }

    #[test]
    fn table_lists_every_key() {
        let table = markdown_table();
        assert_eq!(table.lines().count(), SCHEMA.len() + 2);
    }

    #[test]
    fn docs_page_lists_every_key() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/config.md");
        let page = std::fs::read_to_string(&path).unwrap_or_default();
        let table = markdown_table();
        let start = page.find("| key |").unwrap_or(page.len());
        if std::env::var_os("UPDATE_DOCS").is_some() {
            let intro = if start < page.len() { &page[..start] } else { "# Configuration keys\n\n" };
            std::fs::write(&path, format!("{intro}{table}")).unwrap();
            return;
        }
        assert_eq!(&page[start..], table, "docs/config.md is stale; rerun with UPDATE_DOCS=1");
    }
}
