//! Run configuration files and command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::toy::{all_orders, DataConfig, ToyKind};
use crate::bench::{apply_axis, AdapterConfig, Experiment, RunSpec, SweepAxis, Variant};
use crate::error::{Error, Result};
use crate::llltrain::LllConfig;
use crate::tinylm::ModelConfig;

/// Everything a command needs. Every field has a default, so an empty file
/// (or no file) is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Variant trained by `train`.
    pub variant: Variant,
    /// Task order trained by `train`.
    pub order: Vec<ToyKind>,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub train: LllConfig,
    pub data: DataConfig,
    pub grid: GridConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            variant: Variant::Rvae,
            order: ToyKind::ALL.to_vec(),
            model: ModelConfig::default(),
            adapter: AdapterConfig::default(),
            train: LllConfig::default(),
            data: DataConfig::default(),
            grid: GridConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub orders: Vec<Vec<ToyKind>>,
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            orders: all_orders().into_iter().map(|o| o.to_vec()).collect(),
            gammas: vec![0.0, 0.05, 0.2],
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub repeats: usize,
    pub base_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: SweepAxis::LatentDim,
            values: ["10", "50", "100", "200"].map(String::from).to_vec(),
            repeats: 3,
            base_seed: 0,
        }
    }
}

/// Command-line values that replace file values when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub order: Option<Vec<ToyKind>>,
    pub gamma: Option<f64>,
    pub mode: Option<String>,
    pub turns: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        // The rendered error quotes the offending line, which names the key.
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string().trim_end().to_string()))
    }

    /// Reads `path`, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(v) = o.variant {
            self.variant = v;
        }
        if let Some(order) = &o.order {
            self.order = order.clone();
        }
        if let Some(g) = o.gamma {
            self.train.gamma = g;
        }
        if let Some(m) = &o.mode {
            self.train.mode = m.parse()?;
        }
        if let Some(t) = o.turns {
            self.train.alt_turns = t;
        }
        if let Some(e) = o.epochs {
            self.train.epochs_per_task = e;
        }
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        Ok(())
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            model: self.model.clone(),
            adapter: self.adapter.clone(),
            train: self.train.clone(),
            data: self.data.clone(),
        }
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            variant: self.variant,
            order: self.order.clone(),
            gamma: self.train.gamma,
            seed: self.train.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment().validate()?;
        check_order("order", &self.order, false)?;
        let g = &self.grid;
        for (name, empty) in [
            ("grid.orders", g.orders.is_empty()),
            ("grid.gammas", g.gammas.is_empty()),
            ("grid.seeds", g.seeds.is_empty()),
            ("grid.variants", g.variants.is_empty()),
        ] {
            if empty {
                return Err(Error::config(name, "must not be empty"));
            }
        }
        for o in &g.orders {
            check_order("grid.orders", o, true)?;
        }
        if let Some(x) = g.gammas.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::config("grid.gammas", format!("{x} is not a non-negative number")));
        }
        if self.sweep.repeats == 0 {
            return Err(Error::config("sweep.repeats", "must be at least 1"));
        }
        if self.sweep.values.is_empty() {
            return Err(Error::config("sweep.values", "must not be empty"));
        }
        let exp = self.experiment();
        for v in &self.sweep.values {
            apply_axis(&exp, self.sweep.axis, v).map_err(|e| Error::config("sweep.values", e.to_string()))?;
        }
        Ok(())
    }

    /// The configuration as written to the output directory.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))
    }
}

fn check_order(field: &str, order: &[ToyKind], full: bool) -> Result<()> {
    if order.is_empty() {
        return Err(Error::config(field, "must name at least one task"));
    }
    for (i, k) in order.iter().enumerate() {
        if order[..i].contains(k) {
            return Err(Error::config(field, format!("task `{k}` appears twice")));
        }
    }
    if full && order.len() != ToyKind::ALL.len() {
        return Err(Error::config(field, "grid orders must be permutations of all three tasks"));
    }
    Ok(())
}

/// Hex SHA-256 of a config text.
pub fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(digest(&text), digest(&c.to_toml().unwrap()));
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::parse("[train]\nlambda_lmm = 1.0\n").unwrap_err();
        assert!(e.to_string().contains("lambda_lmm"), "{e}");
        let e = RunConfig::parse("[train]\ngamma = \"high\"\n").unwrap_err();
        assert!(e.to_string().contains("gamma"), "{e}");
        let mut c = RunConfig::default();
        c.train.batch_size = 0;
        assert!(c.validate().unwrap_err().to_string().contains("batch_size"));
        c = RunConfig::default();
        c.grid.orders = vec![vec![ToyKind::Cls]];
        assert!(c.validate().unwrap_err().to_string().contains("grid.orders"));
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut c = RunConfig::parse("[train]\ngamma = 0.05\nmode = \"naive\"\nalt_turns = 2\n").unwrap();
        c.apply(&Overrides {
            gamma: Some(0.2),
            mode: Some("alt".into()),
            turns: Some(3),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(c.train.gamma, 0.2);
        assert_eq!(c.train.mode.as_str(), "alt");
        assert_eq!(c.train.alt_turns, 3);
        assert!(c.apply(&Overrides { mode: Some("bogus".into()), ..Overrides::default() }).is_err());
    }
}
