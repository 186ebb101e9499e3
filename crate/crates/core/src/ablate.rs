//! Ablation sweeps: pretrain once per (value, repeat) cell with a single
//! setting changed, probe the frozen features, and tabulate the results.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::config::Config;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{extract_dataset, linear_probe, EvalConfig, Labeled};
use crate::train::{pretrain, TrainOutputs};

pub const CSV_HEADER: &str = "axis_value,repeat,probe_accuracy,mean_loss_final,status,probe_accuracy_ste,mean_loss_final_ste";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    NoiseKind,
    TSweep,
    LayerSet,
    CbnVsBn,
    Exclusion,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::NoiseKind, Axis::TSweep, Axis::LayerSet, Axis::CbnVsBn, Axis::Exclusion];

    pub fn name(self) -> &'static str {
        match self {
            Axis::NoiseKind => "noise_kind",
            Axis::TSweep => "T_sweep",
            Axis::LayerSet => "layer_set",
            Axis::CbnVsBn => "cbn_vs_bn",
            Axis::Exclusion => "exclusion",
        }
    }

    /// Config keys an axis value may change.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            Axis::NoiseKind => &["loss.noise.kind"],
            Axis::TSweep => &["loss.T"],
            Axis::LayerSet => &["loss.layers", "consistency.norm"],
            Axis::CbnVsBn => &["consistency.norm"],
            Axis::Exclusion => &["loss.noise.exclusion_radius"],
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::NoiseKind => &["uniform", "gaussian"],
            Axis::TSweep => &["1", "5", "10"],
            Axis::LayerSet => &["l3", "l3+l2", "all+bn", "all+cbn"],
            Axis::CbnVsBn => &["cbn", "bn"],
            Axis::Exclusion => &["0", "0.1"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Reference accuracies from the original large-scale study, for header comments.
    pub fn reference(self) -> &'static [&'static str] {
        match self {
            Axis::NoiseKind => &["ModelNet40 linear accuracy: uniform 92.30, gaussian 91.82"],
            Axis::TSweep => &["ModelNet40 linear accuracy: T=1 90.12, T=5 91.87, T=10 92.30, T=20 92.20, T=30 92.21"],
            Axis::LayerSet => &["ModelNet40 linear accuracy: l3 90.32, l3+l2 91.17, all+bn 91.09, all+cbn 92.30"],
            Axis::CbnVsBn => &["ModelNet40 linear accuracy: all layers with cbn 92.30, with bn 91.09"],
            Axis::Exclusion => &["no significant difference reported between exclusion radius 0 and 0.1"],
        }
    }

    /// Overrides that realize one axis value.
    pub fn overrides(self, value: &str) -> Result<Vec<(&'static str, String)>> {
        let bad = || Error::Config(format!("invalid value `{value}` for ablation axis {self}"));
        Ok(match self {
            Axis::NoiseKind => match value {
                "uniform" | "gaussian" => vec![("loss.noise.kind", value.to_string())],
                _ => return Err(bad()),
            },
            Axis::TSweep => {
                let t: usize = value.parse().map_err(|_| bad())?;
                if t == 0 {
                    return Err(bad());
                }
                vec![("loss.T", t.to_string())]
            }
            Axis::LayerSet => {
                let (layers, norm) = match value {
                    "l3" => ("l3", "cbn"),
                    "l3+l2" => ("l3,l2", "cbn"),
                    "all+bn" => ("l1,l2,l3", "bn"),
                    "all+cbn" => ("l1,l2,l3", "cbn"),
                    _ => return Err(bad()),
                };
                vec![("loss.layers", layers.to_string()), ("consistency.norm", norm.to_string())]
            }
            Axis::CbnVsBn => match value {
                "cbn" | "bn" => vec![("consistency.norm", value.to_string())],
                _ => return Err(bad()),
            },
            Axis::Exclusion => {
                let r: f64 = value.parse().map_err(|_| bad())?;
                if !(r >= 0.0 && r.is_finite()) {
                    return Err(bad());
                }
                vec![("loss.noise.exclusion_radius", value.to_string())]
            }
        })
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub axis: Axis,
    pub values: Vec<String>,
    pub base: Config,
    pub repeats: usize,
}

impl AblationPlan {
    pub fn from_config(base: &Config) -> Result<Self> {
        let axis: Axis = base.get("ablate.axis").parse()?;
        let raw = base.get("ablate.values");
        let values = if raw.is_empty() {
            axis.default_values()
        } else {
            raw.split(',').map(str::to_string).collect()
        };
        let plan = AblationPlan {
            axis,
            values,
            base: base.clone(),
            repeats: base.usize("ablate.repeats"),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("ablation plan has no values".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("ablate.repeats must be at least 1".into()));
        }
        for v in &self.values {
            self.cell_config(v, 0)?;
        }
        Ok(())
    }

    /// Config of one cell. Repeat `r` offsets the base training seed by `r`
    /// for every value alike.
    pub fn cell_config(&self, value: &str, repeat: usize) -> Result<Config> {
        let reference = self.seeded_base(repeat)?;
        let mut c = reference.clone();
        for (k, v) in self.axis.overrides(value)? {
            c.set(k, &v)?;
        }
        let stray: Vec<&str> = c.diff(&reference).into_iter().filter(|k| !self.axis.keys().contains(k)).collect();
        if !stray.is_empty() {
            return Err(Error::Config(format!("ablation cell changes keys outside the axis: {}", stray.join(", "))));
        }
        c.loss_config()?;
        c.cons_spec()?;
        Ok(c)
    }

    fn seeded_base(&self, repeat: usize) -> Result<Config> {
        let mut c = self.base.clone();
        let seed = self.base.u64("train.seed").wrapping_add(repeat as u64);
        c.set("train.seed", &seed.to_string())?;
        Ok(c)
    }
}

/// Labeled splits used by every cell: pretraining and probe training on
/// `train`, λ selection on `val`, reported accuracy on `test`.
pub struct AblationData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub value: String,
    pub repeat: usize,
    pub probe_accuracy: f64,
    pub mean_loss_final: f64,
    /// `None` when the cell succeeded.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub value: String,
    pub completed: usize,
    pub probe_accuracy: f64,
    pub probe_accuracy_ste: f64,
    pub mean_loss_final: f64,
    pub mean_loss_final_ste: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutcome {
    pub cells: Vec<CellResult>,
    pub summaries: Vec<Summary>,
}

fn mean_ste(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn summarize(value: &str, cells: &[CellResult]) -> Summary {
    let ok: Vec<&CellResult> = cells.iter().filter(|c| c.value == value && c.error.is_none()).collect();
    let (acc, acc_ste, loss, loss_ste) = if ok.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let a = mean_ste(&ok.iter().map(|c| c.probe_accuracy).collect::<Vec<_>>());
        let l = mean_ste(&ok.iter().map(|c| c.mean_loss_final).collect::<Vec<_>>());
        (a.0, a.1, l.0, l.1)
    };
    Summary {
        value: value.to_string(),
        completed: ok.len(),
        probe_accuracy: acc,
        probe_accuracy_ste: acc_ste,
        mean_loss_final: loss,
        mean_loss_final_ste: loss_ste,
    }
}

fn run_cell(config: &Config, data: &AblationData<'_>, eval: &EvalConfig) -> Result<(f64, f64)> {
    let (trainer, history) = pretrain(config, data.train, &TrainOutputs::default(), |_| {})?;
    let final_loss = history.last().map(|s| s.mean_loss).unwrap_or(f64::NAN);
    let labeled = |ds: &Dataset| Labeled::new(extract_dataset(&trainer.model, ds)?, ds.labels());
    let report = linear_probe(&labeled(data.train)?, &labeled(data.val)?, &labeled(data.test)?, eval)?;
    Ok((report.test_accuracy, final_loss))
}

/// Runs every cell of `plan`. A failed cell is recorded and the sweep moves on;
/// `on_cell` sees each result as it completes.
pub fn run_ablation(
    plan: &AblationPlan,
    data: &AblationData<'_>,
    mut on_cell: impl FnMut(&CellResult),
) -> Result<AblationOutcome> {
    plan.validate()?;
    let eval = EvalConfig::from_config(&plan.base)?;
    let mut cells = Vec::with_capacity(plan.values.len() * plan.repeats);
    for value in &plan.values {
        for repeat in 0..plan.repeats {
            let config = plan.cell_config(value, repeat)?;
            let cell = match run_cell(&config, data, &eval) {
                Ok((acc, loss)) => CellResult {
                    value: value.clone(),
                    repeat,
                    probe_accuracy: acc,
                    mean_loss_final: loss,
                    error: None,
                },
                Err(e) => CellResult {
                    value: value.clone(),
                    repeat,
                    probe_accuracy: f64::NAN,
                    mean_loss_final: f64::NAN,
                    error: Some(e.to_string()),
                },
            };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    let summaries = plan.values.iter().map(|v| summarize(v, &cells)).collect();
    Ok(AblationOutcome { cells, summaries })
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

/// CSV text: config echo and reference values as `#` comments, then one row
/// per cell and one `summary` row per value.
pub fn render_csv(plan: &AblationPlan, outcome: &AblationOutcome) -> String {
    let mut out = plan.base.comment_block();
    writeln!(out, "# axis = {}", plan.axis).expect("string write");
    for r in plan.axis.reference() {
        writeln!(out, "# reference: {r}").expect("string write");
    }
    if plan.axis == Axis::Exclusion && outcome.summaries.len() == 2 {
        let (a, b) = (&outcome.summaries[0], &outcome.summaries[1]);
        writeln!(
            out,
            "# mean difference ({} minus {}): probe_accuracy {}, mean_loss_final {}",
            b.value,
            a.value,
            num(b.probe_accuracy - a.probe_accuracy),
            num(b.mean_loss_final - a.mean_loss_final)
        )
        .expect("string write");
    }
    out.push_str(CSV_HEADER);
    out.push('\n');
    for c in &outcome.cells {
        let status = if c.error.is_some() { "failed" } else { "ok" };
        writeln!(out, "{},{},{},{},{status},,", c.value, c.repeat, num(c.probe_accuracy), num(c.mean_loss_final))
            .expect("string write");
    }
    for s in &outcome.summaries {
        let total = plan.repeats;
        let status = match s.completed {
            0 => "failed".to_string(),
            n if n == total => "ok".to_string(),
            n => format!("partial {n}/{total}"),
        };
        writeln!(
            out,
            "{},summary,{},{},{status},{},{}",
            s.value,
            num(s.probe_accuracy),
            num(s.mean_loss_final),
            num(s.probe_accuracy_ste),
            num(s.mean_loss_final_ste)
        )
        .expect("string write");
    }
    out
}

pub fn write_csv(path: &Path, plan: &AblationPlan, outcome: &AblationOutcome) -> Result<()> {
    fs::write(path, render_csv(plan, outcome)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, Split};

    fn tiny() -> Config {
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
            "train.epochs=1",
            "eval.max_iters=200",
            "eval.lambdas=0.01,1.0",
        ] {
            c.apply_override(kv).unwrap();
        }
        c
    }

    #[test]
    fn cells_differ_only_on_axis_keys() {
        let mut base = tiny();
        base.set("ablate.axis", "layer_set").unwrap();
        let plan = AblationPlan::from_config(&base).unwrap();
        assert_eq!(plan.values.len(), 4);
        let a = plan.cell_config("l3", 1).unwrap();
        let b = plan.cell_config("all+bn", 1).unwrap();
        assert_eq!(a.diff(&b), vec!["consistency.norm", "loss.layers"]);
        assert_eq!(a.u64("train.seed"), 1);
        assert!(plan.cell_config("l4", 0).is_err());
        base.set("ablate.values", "1,x").unwrap();
        base.set("ablate.axis", "T_sweep").unwrap();
        assert!(AblationPlan::from_config(&base).is_err());
    }

    #[test]
    fn summary_recomputes_from_rows() {
        let cell = |v: &str, r, acc, loss| CellResult {
            value: v.into(),
            repeat: r,
            probe_accuracy: acc,
            mean_loss_final: loss,
            error: None,
        };
        let mut cells = vec![cell("1", 0, 0.5, 2.0), cell("1", 1, 0.7, 1.0), cell("1", 2, 0.9, 3.0)];
        let s = summarize("1", &cells);
        assert!((s.probe_accuracy - 0.7).abs() < 1e-15);
        assert!((s.probe_accuracy_ste - (0.04f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(s.mean_loss_final, 2.0);
        cells[2].error = Some("boom".into());
        assert_eq!(summarize("1", &cells).completed, 2);
    }

    #[test]
    fn sweep_is_reproducible_and_well_formed() {
        let mut base = tiny();
        base.set("ablate.values", "1,5").unwrap();
        base.set("ablate.repeats", "1").unwrap();
        let plan = AblationPlan::from_config(&base).unwrap();
        let train = synthetic_dataset(8, 64, 1, Split::Train).unwrap();
        let val = synthetic_dataset(8, 64, 2, Split::Val).unwrap();
        let test = synthetic_dataset(8, 64, 3, Split::Test).unwrap();
        let data = AblationData {
            train: &train,
            val: &val,
            test: &test,
        };
        let first = render_csv(&plan, &run_ablation(&plan, &data, |_| {}).unwrap());
        let second = render_csv(&plan, &run_ablation(&plan, &data, |_| {}).unwrap());
        assert_eq!(first, second);
        let rows: Vec<&str> = first.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows[0], CSV_HEADER);
        assert_eq!(rows.len(), 1 + 2 + 2);
        assert!(rows[1..].iter().all(|r| r.split(',').count() == 7 && r.contains(",ok,")));
        assert!(first.lines().filter(|l| l.contains("90.12")).all(|l| l.starts_with('#')));
    }
}
