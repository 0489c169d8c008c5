//! Run configuration files.
//!
//! A config is one JSON object. Every [`PretrainConfig`] field may appear at
//! the top level; missing fields keep their defaults. Three extra keys are
//! read by individual subcommands:
//!
//! - `held_out_fraction`: share of graphs held out by `finetune` (and by
//!   `pretrain` when the scheduler monitors `val_loss`), default 0.2;
//! - `arms`: arms run by `compare-losses`, default all three;
//! - `generate`: the [`GenerateConfig`] used by `gen-data`.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use spectrain_core::eigen::eigendecompose;
use spectrain_core::graph::build_laplacian;
use spectrain_core::rng;
use spectrain_core::training::{Arm, PretrainConfig};
use spectrain_core::{generate_graph, Graph, GraphSpec, LaplacianNorm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub pretrain: PretrainConfig,
    pub held_out_fraction: f64,
    pub arms: Vec<Arm>,
    pub generate: GenerateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pretrain: PretrainConfig::default(),
            held_out_fraction: 0.2,
            arms: Arm::ALL.to_vec(),
            generate: GenerateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let value: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        let Value::Object(mut map) = value else {
            bail!("config must be a JSON object");
        };
        let mut cfg = RunConfig::default();
        if let Some(v) = map.remove("held_out_fraction") {
            cfg.held_out_fraction = serde_json::from_value(v).context("held_out_fraction")?;
        }
        if let Some(v) = map.remove("arms") {
            cfg.arms = serde_json::from_value(v).context("arms")?;
        }
        if let Some(v) = map.remove("generate") {
            cfg.generate = serde_json::from_value(v).context("generate")?;
        }
        cfg.pretrain = serde_json::from_value(Value::Object(map)).context("config")?;
        if !(0.0..1.0).contains(&cfg.held_out_fraction) {
            bail!("held_out_fraction must lie in [0, 1)");
        }
        cfg.pretrain.validate()?;
        cfg.generate.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("config {}", p.display()))
            }
        }
    }

    /// The effective config as a single flat object, as accepted by [`RunConfig::parse`].
    pub fn to_value(&self) -> Value {
        let mut map = match serde_json::to_value(&self.pretrain).expect("config serializes") {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        map.insert("held_out_fraction".into(), self.held_out_fraction.into());
        map.insert("arms".into(), serde_json::to_value(&self.arms).expect("arms serialize"));
        map.insert(
            "generate".into(),
            serde_json::to_value(&self.generate).expect("generate serializes"),
        );
        Value::Object(map)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Path,
    Cycle,
    Star,
    Complete,
    Grid,
    ErdosRenyi,
}

/// Synthetic dataset recipe for `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub count: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Families are cycled through in order.
    pub families: Vec<Family>,
    /// Erdős–Rényi edge probability is drawn uniformly from this range.
    pub edge_probability: [f64; 2],
    /// Laplacian used for the spectral targets `lambda2` and `lambda_max`.
    pub laplacian_norm: LaplacianNorm,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 200,
            min_nodes: 8,
            max_nodes: 16,
            families: vec![Family::ErdosRenyi],
            edge_probability: [0.2, 0.5],
            laplacian_norm: LaplacianNorm::Unnormalized,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.min_nodes < 3 || self.min_nodes > self.max_nodes {
            bail!("generate: need 3 <= min_nodes <= max_nodes");
        }
        if self.families.is_empty() {
            bail!("generate: families is empty");
        }
        let [lo, hi] = self.edge_probability;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            bail!("generate: edge_probability must satisfy 0 < lo <= hi <= 1");
        }
        Ok(())
    }

    /// Generates `count` graphs with `lambda2` and `lambda_max` targets.
    pub fn generate(&self, seed: u64) -> anyhow::Result<Vec<Graph>> {
        use rand::Rng;
        self.validate()?;
        let mut out = Vec::with_capacity(self.count);
        for i in 0..self.count {
            let item_seed = rng::mix(seed, i as u64);
            let mut r = rng::seeded(item_seed, 0);
            let n = r.gen_range(self.min_nodes..=self.max_nodes);
            let spec = match self.families[i % self.families.len()] {
                Family::Path => GraphSpec::Path { n },
                Family::Cycle => GraphSpec::Cycle { n },
                Family::Star => GraphSpec::Star { n },
                Family::Complete => GraphSpec::Complete { n },
                Family::Grid => {
                    let rows = (2..=n).rev().find(|d| n % d == 0 && d * d <= n).unwrap_or(1).max(1);
                    GraphSpec::Grid { rows, cols: n / rows }
                }
                Family::ErdosRenyi => {
                    let [lo, hi] = self.edge_probability;
                    GraphSpec::ErdosRenyi {
                        n,
                        p: if lo == hi { lo } else { r.gen_range(lo..hi) },
                    }
                }
            };
            let mut g = generate_graph(&spec, item_seed)?;
            let spectrum = eigendecompose(&build_laplacian(&g, self.laplacian_norm))?;
            let ev = &spectrum.eigenvalues;
            g.set_target("lambda2", ev[1]);
            g.set_target("lambda_max", ev[ev.len() - 1]);
            out.push(g);
        }
        Ok(out)
    }
}
