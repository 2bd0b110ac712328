//! Flat key-value configuration: `section.key = value` lines, `#` comments.
//!
//! One file configures the generator (`data.*`), the training loop
//! (`train.*`), and the experiment plan (`run.*`). Parsing is strict:
//! unknown keys, duplicate keys, and malformed values are errors naming the
//! key and line. Serialization emits every key in a fixed order, and
//! parse -> serialize -> parse is the identity.

use crate::datagen::SyntheticSpec;
use crate::trainer::{TrainConfig, Variant};
use anyhow::{bail, Context, Result};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Full experiment description: data, training knobs, and the run plan.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            variants: vec![Variant::Adsnet],
            seeds: vec![0],
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.variants.is_empty() {
            bail!("run.variants must list at least one variant");
        }
        if self.seeds.is_empty() {
            bail!("run.seeds must list at least one seed");
        }
        Ok(())
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str) -> Option<Vec<T>> {
    raw.split(',').map(|p| p.trim().parse::<T>().ok()).collect()
}

fn apply(cfg: &mut Config, key: &str, raw: &str, line_no: usize) -> Result<()> {
    macro_rules! val {
        ($ty:ty, $what:expr) => {
            raw.parse::<$ty>().map_err(|_| {
                anyhow::anyhow!("line {line_no}: key {key}: expected {}, got `{raw}`", $what)
            })?
        };
    }
    macro_rules! list {
        ($ty:ty, $what:expr) => {
            parse_list::<$ty>(raw).ok_or_else(|| {
                anyhow::anyhow!(
                    "line {line_no}: key {key}: expected comma-separated {}, got `{raw}`",
                    $what
                )
            })?
        };
    }

    match key {
        "data.n_internal" => cfg.data.n_internal = val!(usize, "an integer"),
        "data.n_external" => cfg.data.n_external = val!(usize, "an integer"),
        "data.purchase_rate_internal" => {
            cfg.data.purchase_rate_internal = val!(f64, "a number")
        }
        "data.purchase_rate_external" => {
            cfg.data.purchase_rate_external = val!(f64, "a number")
        }
        "data.mean_ltv_internal" => cfg.data.mean_ltv_internal = val!(f64, "a number"),
        "data.mean_ltv_external" => cfg.data.mean_ltv_external = val!(f64, "a number"),
        "data.shift" => cfg.data.shift = val!(f64, "a number"),
        "data.noise_fraction" => cfg.data.noise_fraction = val!(f64, "a number"),
        "data.n_fields" => cfg.data.n_fields = val!(usize, "an integer"),
        "data.vocab_sizes" => cfg.data.vocab_sizes = list!(usize, "integers"),
        "data.seed" => cfg.data.seed = val!(u64, "an integer"),
        "train.warmup_steps" => cfg.train.warmup_steps = val!(usize, "an integer"),
        "train.total_steps" => cfg.train.total_steps = val!(usize, "an integer"),
        "train.sync_frequency" => cfg.train.sync_frequency = val!(usize, "an integer"),
        "train.batch_size" => cfg.train.batch_size = val!(usize, "an integer"),
        "train.external_microbatch" => {
            cfg.train.external_microbatch = val!(usize, "an integer")
        }
        "train.beta" => cfg.train.beta = val!(f64, "a number"),
        "train.lr_dense" => cfg.train.lr_dense = val!(f64, "a number"),
        "train.lr_sparse" => cfg.train.lr_sparse = val!(f64, "a number"),
        "train.ftrl_l1" => cfg.train.ftrl_l1 = val!(f64, "a number"),
        "train.ftrl_l2" => cfg.train.ftrl_l2 = val!(f64, "a number"),
        "train.embedding_dim" => cfg.train.embedding_dim = val!(usize, "an integer"),
        "train.k_segments" => cfg.train.k_segments = val!(usize, "an integer"),
        "train.n_experts" => cfg.train.n_experts = val!(usize, "an integer"),
        "train.expert_hidden" => cfg.train.expert_hidden = list!(usize, "integers"),
        "train.adapter_hidden" => cfg.train.adapter_hidden = val!(usize, "an integer"),
        "run.variants" => {
            cfg.variants = raw
                .split(',')
                .map(|p| {
                    Variant::parse(p.trim()).ok_or_else(|| {
                        anyhow::anyhow!(
                            "line {line_no}: key {key}: unknown variant `{}` (expected one of {})",
                            p.trim(),
                            Variant::ALL.map(|v| v.as_str()).join(", ")
                        )
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        "run.seeds" => cfg.seeds = list!(u64, "integers"),
        _ => bail!("line {line_no}: unknown config key `{key}`"),
    }
    Ok(())
}

/// Parses config text over the defaults. Strict about unknown and duplicate
/// keys.
pub fn parse_config(text: &str) -> Result<Config> {
    let mut cfg = Config::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, raw)) = trimmed.split_once('=') else {
            bail!("line {line_no}: expected `key = value`, got `{trimmed}`");
        };
        let (key, raw) = (key.trim(), raw.trim());
        if !seen.insert(key.to_string()) {
            bail!("line {line_no}: duplicate config key `{key}`");
        }
        apply(&mut cfg, key, raw, line_no)?;
    }
    Ok(cfg)
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Emits every key in a fixed order; parsing the result reproduces the
/// config exactly.
pub fn serialize_config(cfg: &Config) -> String {
    let mut s = String::new();
    let d = &cfg.data;
    let t = &cfg.train;
    let pairs: Vec<(&str, String)> = vec![
        ("data.n_internal", d.n_internal.to_string()),
        ("data.n_external", d.n_external.to_string()),
        ("data.purchase_rate_internal", d.purchase_rate_internal.to_string()),
        ("data.purchase_rate_external", d.purchase_rate_external.to_string()),
        ("data.mean_ltv_internal", d.mean_ltv_internal.to_string()),
        ("data.mean_ltv_external", d.mean_ltv_external.to_string()),
        ("data.shift", d.shift.to_string()),
        ("data.noise_fraction", d.noise_fraction.to_string()),
        ("data.n_fields", d.n_fields.to_string()),
        ("data.vocab_sizes", join(&d.vocab_sizes)),
        ("data.seed", d.seed.to_string()),
        ("train.warmup_steps", t.warmup_steps.to_string()),
        ("train.total_steps", t.total_steps.to_string()),
        ("train.sync_frequency", t.sync_frequency.to_string()),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.external_microbatch", t.external_microbatch.to_string()),
        ("train.beta", t.beta.to_string()),
        ("train.lr_dense", t.lr_dense.to_string()),
        ("train.lr_sparse", t.lr_sparse.to_string()),
        ("train.ftrl_l1", t.ftrl_l1.to_string()),
        ("train.ftrl_l2", t.ftrl_l2.to_string()),
        ("train.embedding_dim", t.embedding_dim.to_string()),
        ("train.k_segments", t.k_segments.to_string()),
        ("train.n_experts", t.n_experts.to_string()),
        ("train.expert_hidden", join(&t.expert_hidden)),
        ("train.adapter_hidden", t.adapter_hidden.to_string()),
        (
            "run.variants",
            cfg.variants.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(","),
        ),
        ("run.seeds", join(&cfg.seeds)),
    ];
    for (k, v) in pairs {
        writeln!(s, "{k} = {v}").unwrap();
    }
    s
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("parsing config {}", path.display()))
}
