//! Training flags shared by every command that builds a model. Flags override
//! the config file, which overrides the built-in defaults.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use hifirec::{AcgMode, Activation, Behavior, Neighborhood, Sampling, TrainConfig, VariantSpec};

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML file with TrainConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Total negative weight mass per behavior.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub x: Option<f64>,
    #[arg(long)]
    pub k_ref: Option<Behavior>,
    /// Task weights for view, add, purchase.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub activation: Option<Activation>,
    #[arg(long)]
    pub acg: Option<AcgMode>,
    /// Ablation variant such as F-NB+I-NS.
    #[arg(long, conflicts_with_all = ["neighborhood", "sampling"])]
    pub variant: Option<VariantSpec>,
    #[arg(long)]
    pub neighborhood: Option<Neighborhood>,
    #[arg(long)]
    pub sampling: Option<Sampling>,
    #[arg(long)]
    pub uniform_weight: Option<f64>,
    #[arg(long)]
    pub c_pos: Option<f64>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub edge_self_loop: bool,
    #[arg(long)]
    pub per_layer_wbeh: bool,
    #[arg(long)]
    pub wint_through_gradient: bool,
    #[arg(long)]
    pub eq10_ref_denominator: bool,
    #[arg(long)]
    pub exclude_valid: bool,
    #[arg(long, value_delimiter = ',')]
    pub topk: Option<Vec<usize>>,
}

macro_rules! apply {
    ($cfg:ident, $args:ident, $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => TrainConfig::default(),
        };
        apply!(
            cfg, self, dim, layers, c, x, k_ref, lambda, mu, lr, epochs, patience, eval_every, seed, activation, acg,
            neighborhood, sampling, uniform_weight, c_pos, chunk_size, clip_norm, topk
        );
        if let Some(v) = self.variant {
            cfg = cfg.with_variant(v);
        }
        cfg.edge_self_loop |= self.edge_self_loop;
        cfg.per_layer_wbeh |= self.per_layer_wbeh;
        cfg.wint_through_gradient |= self.wint_through_gradient;
        cfg.eq10_ref_denominator |= self.eq10_ref_denominator;
        cfg.exclude_valid |= self.exclude_valid;
        cfg.validate()?;
        Ok(cfg)
    }
}
