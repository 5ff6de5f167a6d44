//! Toy task suite, metrics, and the experiment grid and sweeps.

pub mod metrics;
pub mod toy;

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llltrain::{NoopObserver, Observer, RunResult, TrainMode, Trainer};
use crate::rvae::RvaeConfig;
use crate::tinylm::ModelConfig;
use toy::{DataConfig, ToyKind};

/// The six model variants compared in the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Replay only.
    #[serde(rename = "baseline")]
    Baseline,
    /// Replay plus the ID task.
    #[serde(rename = "+id")]
    Id,
    #[serde(rename = "rvae")]
    Rvae,
    #[serde(rename = "rvae-id")]
    RvaeNoId,
    #[serde(rename = "rcvae")]
    Rcvae,
    #[serde(rename = "rcvae-id")]
    RcvaeNoId,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Id,
        Variant::Rvae,
        Variant::RvaeNoId,
        Variant::Rcvae,
        Variant::RcvaeNoId,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Id => "+id",
            Variant::Rvae => "rvae",
            Variant::RvaeNoId => "rvae-id",
            Variant::Rcvae => "rcvae",
            Variant::RcvaeNoId => "rcvae-id",
        }
    }

    /// `None` without an adapter, otherwise whether it is conditional.
    pub fn adapter(self) -> Option<bool> {
        match self {
            Variant::Baseline | Variant::Id => None,
            Variant::Rvae | Variant::RvaeNoId => Some(false),
            Variant::Rcvae | Variant::RcvaeNoId => Some(true),
        }
    }

    pub fn use_id_task(self) -> bool {
        matches!(self, Variant::Id | Variant::Rvae | Variant::Rcvae)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('\u{2212}', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::config("variants", format!("unknown variant `{s}`")))
    }
}

/// Adapter hyperparameters that do not depend on the model or task count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub latent_dim: usize,
    pub alpha: f64,
    pub rho: f64,
    pub cond_dim: usize,
    pub detach_input: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        let r = RvaeConfig::default();
        Self {
            latent_dim: r.latent_dim,
            alpha: r.alpha,
            rho: r.rho,
            cond_dim: r.cond_dim,
            detach_input: r.detach_input,
        }
    }
}

impl AdapterConfig {
    /// Conditional adapters get one condition per task plus the null one.
    pub fn to_rvae(&self, d_model: usize, conditional: bool, n_tasks: usize) -> RvaeConfig {
        RvaeConfig {
            d_model,
            latent_dim: self.latent_dim,
            alpha: self.alpha,
            rho: self.rho,
            conditional,
            n_conditions: if conditional { n_tasks + 1 } else { 0 },
            cond_dim: self.cond_dim,
            detach_input: self.detach_input,
        }
    }
}

/// Base configuration shared by every run of a grid or sweep.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub train: crate::llltrain::LllConfig,
    pub data: DataConfig,
}

/// Fully specified single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub variant: Variant,
    pub order: Vec<ToyKind>,
    pub gamma: f64,
    pub seed: u64,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = toy::vocab().len();
        }
        m.validate()?;
        self.adapter
            .to_rvae(self.model.d_model, false, ToyKind::ALL.len())
            .validate()
    }

    /// Trainer for one run. Variants without an adapter train every epoch
    /// jointly.
    pub fn trainer(&self, spec: &RunSpec) -> Result<Trainer> {
        if spec.order.is_empty() {
            return Err(Error::config("order", "must name at least one task"));
        }
        let vocab = toy::vocab().clone();
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = vocab.len();
        }
        let mut lll = self.train.clone();
        lll.gamma = spec.gamma;
        lll.seed = spec.seed;
        lll.use_id_task = spec.variant.use_id_task();
        let rvae = match spec.variant.adapter() {
            Some(conditional) => Some(self.adapter.to_rvae(model.d_model, conditional, vocab.n_tasks())),
            None => {
                model.adapter_position = None;
                lll.mode = TrainMode::Naive;
                None
            }
        };
        let tasks = spec.order.iter().map(|&k| toy::task_data(k, &self.data)).collect();
        Trainer::new(model, rvae, lll, vocab, tasks)
    }

    pub fn run(&self, spec: &RunSpec, obs: &mut dyn Observer) -> Result<RunResult> {
        self.trainer(spec)?.run(obs)
    }
}

/// One grid or sweep run with its full configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec: RunSpec,
    pub config: Experiment,
    pub result: RunResult,
}

impl RunRecord {
    /// Pooled correspondence rate over every replay entry of the run.
    pub fn correspondence_rate(&self) -> Option<f64> {
        let (mut req, mut corr) = (0, 0);
        for e in self.result.stages.iter().flat_map(|s| &s.replay) {
            req += e.requested;
            corr += e.corresponding;
        }
        (req > 0).then(|| corr as f64 / req as f64)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn order_label(order: &[ToyKind]) -> String {
    order.iter().map(|k| k.name()).collect::<Vec<_>>().join(">")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub average: f64,
    pub std_across_orders: f64,
}

/// Aggregate of one `(variant, γ)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub variant: Variant,
    pub gamma: f64,
    pub runs: usize,
    /// Mean over orders of the per-order (seed-averaged) final average.
    pub average: f64,
    /// Population std across orders of the per-order averages.
    pub std_across_orders: f64,
    pub per_order: Vec<(String, f64)>,
    pub per_seed: Vec<SeedSummary>,
    /// Mean over runs of each run's pooled correspondence rate.
    pub correspondence_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GridTable {
    pub cells: Vec<GridCell>,
}

impl GridTable {
    pub fn cell(&self, variant: Variant, gamma: f64) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.variant == variant && c.gamma == gamma)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# std_orders: population std across task orders of seed-averaged scores\n");
        s.push_str("variant\tgamma\truns\taverage\tstd_orders\tcorrespondence\tper_order\tper_seed\n");
        for c in &self.cells {
            let per_order: Vec<String> = c.per_order.iter().map(|(o, v)| format!("{o}={v:.2}")).collect();
            let per_seed: Vec<String> = c
                .per_seed
                .iter()
                .map(|p| format!("{}={:.2}±{:.2}", p.seed, p.average, p.std_across_orders))
                .collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.2}\t{:.2}\t{}\t{}\t{}",
                c.variant,
                c.gamma,
                c.runs,
                c.average,
                c.std_across_orders,
                fmt_rate(c.correspondence_rate),
                per_order.join(","),
                per_seed.join(",")
            );
        }
        s
    }
}

/// `"n/a"` or the rate as a fraction.
pub fn fmt_rate(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".to_string(), |r| format!("{r:.4}"))
}

/// Builds the table from finished runs.
pub fn summarize(records: &[RunRecord]) -> GridTable {
    let mut keys: Vec<(Variant, f64)> = Vec::new();
    for r in records {
        if !keys.iter().any(|&(v, g)| v == r.spec.variant && g == r.spec.gamma) {
            keys.push((r.spec.variant, r.spec.gamma));
        }
    }
    let cells = keys
        .into_iter()
        .map(|(variant, gamma)| {
            let runs: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.spec.variant == variant && r.spec.gamma == gamma)
                .collect();
            let mut orders: Vec<String> = Vec::new();
            let mut seeds: Vec<u64> = Vec::new();
            for r in &runs {
                let o = order_label(&r.spec.order);
                if !orders.contains(&o) {
                    orders.push(o);
                }
                if !seeds.contains(&r.spec.seed) {
                    seeds.push(r.spec.seed);
                }
            }
            let per_order: Vec<(String, f64)> = orders
                .iter()
                .map(|o| {
                    let xs: Vec<f64> = runs
                        .iter()
                        .filter(|r| &order_label(&r.spec.order) == o)
                        .map(|r| r.result.average)
                        .collect();
                    (o.clone(), mean(&xs))
                })
                .collect();
            let order_means: Vec<f64> = per_order.iter().map(|(_, v)| *v).collect();
            let per_seed = seeds
                .iter()
                .map(|&seed| {
                    let xs: Vec<f64> = runs
                        .iter()
                        .filter(|r| r.spec.seed == seed)
                        .map(|r| r.result.average)
                        .collect();
                    SeedSummary {
                        seed,
                        average: mean(&xs),
                        std_across_orders: std_dev(&xs),
                    }
                })
                .collect();
            let rates: Vec<f64> = runs.iter().filter_map(|r| r.correspondence_rate()).collect();
            GridCell {
                variant,
                gamma,
                runs: runs.len(),
                average: mean(&order_means),
                std_across_orders: std_dev(&order_means),
                per_order,
                per_seed,
                correspondence_rate: (!rates.is_empty()).then(|| mean(&rates)),
            }
        })
        .collect();
    GridTable { cells }
}

/// Every `(variant, γ, order, seed)` run. `sink` sees each record as soon as
/// its run finishes.
pub fn run_grid(
    exp: &Experiment,
    orders: &[Vec<ToyKind>],
    gammas: &[f64],
    seeds: &[u64],
    variants: &[Variant],
    sink: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<(Vec<RunRecord>, GridTable)> {
    exp.validate()?;
    let mut records = Vec::new();
    for &variant in variants {
        for &gamma in gammas {
            for order in orders {
                for &seed in seeds {
                    let spec = RunSpec {
                        variant,
                        order: order.clone(),
                        gamma,
                        seed,
                    };
                    let result = exp.run(&spec, &mut NoopObserver)?;
                    let rec = RunRecord {
                        spec,
                        config: exp.clone(),
                        result,
                    };
                    sink(&rec)?;
                    records.push(rec);
                }
            }
        }
    }
    let table = summarize(&records);
    Ok((records, table))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    AdapterPosition,
    LatentDim,
    AltMode,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter_position" => Ok(SweepAxis::AdapterPosition),
            "latent_dim" => Ok(SweepAxis::LatentDim),
            "alt_mode" => Ok(SweepAxis::AltMode),
            _ => Err(Error::config(
                "axis",
                format!("unknown axis `{s}` (expected adapter_position, latent_dim or alt_mode)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Population std across seeds.
    pub std_across_seeds: f64,
}

/// The experiment with one axis set to `value`.
pub fn apply_axis(exp: &Experiment, axis: SweepAxis, value: &str) -> Result<Experiment> {
    let mut e = exp.clone();
    let bad = |msg: String| Error::config("values", msg);
    match axis {
        SweepAxis::AdapterPosition => {
            let p: usize = value.parse().map_err(|_| bad(format!("`{value}` is not a position")))?;
            if p > e.model.n_layers {
                return Err(bad(format!("position {p} exceeds n_layers {}", e.model.n_layers)));
            }
            e.model.adapter_position = Some(p);
        }
        SweepAxis::LatentDim => {
            let k: usize = value.parse().map_err(|_| bad(format!("`{value}` is not a dimension")))?;
            if k == 0 {
                return Err(bad("latent dimension must be ≥ 1".into()));
            }
            e.adapter.latent_dim = k;
        }
        SweepAxis::AltMode => {
            e.train.mode = value.parse().map_err(|_| bad(format!("unknown mode `{value}`")))?;
        }
    }
    e.validate()?;
    Ok(e)
}

/// `repeats` runs (seeds `base_seed..base_seed + repeats`) of the `rvae`
/// variant on the order cls → span → slot, per axis value.
pub fn sweep(
    exp: &Experiment,
    axis: SweepAxis,
    values: &[String],
    repeats: usize,
    base_seed: u64,
    sink: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<Vec<SweepPoint>> {
    if repeats == 0 {
        return Err(Error::config("repeats", "must be ≥ 1"));
    }
    let exps: Vec<Experiment> = values
        .iter()
        .map(|v| apply_axis(exp, axis, v))
        .collect::<Result<_>>()?;
    let mut points = Vec::new();
    for (value, e) in values.iter().zip(&exps) {
        let mut scores = Vec::new();
        for r in 0..repeats as u64 {
            let spec = RunSpec {
                variant: Variant::Rvae,
                order: ToyKind::ALL.to_vec(),
                gamma: e.train.gamma,
                seed: base_seed + r,
            };
            let result = e.run(&spec, &mut NoopObserver)?;
            scores.push(result.average);
            sink(&RunRecord {
                spec,
                config: e.clone(),
                result,
            })?;
        }
        points.push(SweepPoint {
            value: value.clone(),
            mean: mean(&scores),
            std_across_seeds: std_dev(&scores),
            scores,
        });
    }
    Ok(points)
}

pub fn sweep_tsv(axis: SweepAxis, points: &[SweepPoint]) -> String {
    let mut s = String::from("# std_seeds: population std across seeds\n");
    let name = serde_json::to_value(axis)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default();
    let _ = writeln!(s, "{name}\tmean\tstd_seeds\tscores");
    for p in points {
        let scores: Vec<String> = p.scores.iter().map(|x| format!("{x:.2}")).collect();
        let _ = writeln!(s, "{}\t{:.2}\t{:.2}\t{}", p.value, p.mean, p.std_across_seeds, scores.join(","));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_labels_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.label()));
        }
        assert_eq!("rvae\u{2212}id".parse::<Variant>().unwrap(), Variant::RvaeNoId);
        assert!("lamol".parse::<Variant>().is_err());
    }

    #[test]
    fn stats() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert!((std_dev(&[1.0, 3.0]) - 1.0).abs() < 1e-12);
        assert_eq!(std_dev(&[5.0]), 0.0);
    }

    #[test]
    fn axis_validation() {
        let e = Experiment::default();
        assert!(apply_axis(&e, SweepAxis::AdapterPosition, "4").is_ok());
        assert!(apply_axis(&e, SweepAxis::AdapterPosition, "5").is_err());
        assert!(apply_axis(&e, SweepAxis::LatentDim, "0").is_err());
        assert_eq!(apply_axis(&e, SweepAxis::LatentDim, "10").unwrap().adapter.latent_dim, 10);
        assert!(apply_axis(&e, SweepAxis::AltMode, "alt_m1_star").is_ok());
        assert!(apply_axis(&e, SweepAxis::AltMode, "sideways").is_err());
        assert!("depth".parse::<SweepAxis>().is_err());
    }
}
