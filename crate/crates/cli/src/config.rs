//! Flat run configuration shared by every subcommand.
//!
//! A [`RunConfig`] is one TOML table whose keys cover the world, training,
//! loss and evaluation settings. Each key doubles as a command-line flag
//! (`--alpha 0.25`), and `NEARID_SEED` replaces `seed` when set. Precedence,
//! lowest first: built-in defaults, an inherited world config, the
//! `--config` file, `NEARID_SEED`, flags.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nearid::eval::{EvalOptions, Kernel, SourceFilter};
use nearid::losses::{LossConfig, LossVariant};
use nearid::synthworld::{Split, WorldConfig};
use nearid::train::{MaskProbs, TrainConfig};
use nearid::Temperature;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "NEARID_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KpcaChoice {
    None,
    Linear,
    Rbf,
}

impl FromStr for KpcaChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "linear" => Ok(Self::Linear),
            "rbf" => Ok(Self::Rbf),
            other => Err(format!("unknown kernel `{other}` (none, linear, rbf)")),
        }
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty $(=> [$($extra:tt)*])? ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        /// Command-line flags, one per [`RunConfig`] key.
        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct Overrides {
            $(
                $(#[doc = $doc])*
                #[arg(long = stringify!($name), value_name = "VALUE", help_heading = "Config keys" $(, $($extra)*)?)]
                pub $name: Option<$ty>,
            )*
        }

        impl Overrides {
            pub fn apply(&self, cfg: &mut RunConfig) {
                $( if let Some(v) = &self.$name { cfg.$name = v.clone(); } )*
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];
        }
    };
}

run_config! {
    n_identities: usize,
    d_latent: usize,
    tokens_fg: usize,
    tokens_bg: usize,
    token_dim: usize,
    sigma_near: f64,
    sigma_noise: f64,
    token_scale: f64,
    view_split: f64,
    n_distractor_sources: usize,
    train_sources: usize,
    k_per_source: usize,
    part_edits: usize,
    human_noise: f64,
    objectness: f64,
    val_fraction: f64,
    test_fraction: f64,
    /// Seeds world generation and training.
    seed: u64,

    loss: LossVariant,
    lr: f64,
    weight_decay: f64,
    warmup_steps: usize,
    epochs: usize,
    batch_identities: usize,
    alpha: f64,
    beta: f64,
    margin_m: f64,
    tau: f64,
    circle_relaxation: f64,
    siglip_bias: f64,
    mask_anchor: f64,
    mask_positive: f64,
    mask_distractor: f64,
    jitter_sigma: f64,
    part_edit_fraction: f64,
    part_edit_upsample: usize,
    heads: usize,
    out_dim: usize,

    split: Split,
    sources: SourceFilter,
    fg_only: bool => [num_args = 0..=1, default_missing_value = "true", alias = "fg-only"],
    kpca: KpcaChoice,
    /// RBF bandwidth; 0 picks `1/d`.
    rbf_gamma: f64,
    kpca_identities: usize,
    histogram_bins: usize,
}

impl RunConfig {
    pub fn from_parts(w: &WorldConfig, t: &TrainConfig, e: &EvalOptions) -> Self {
        let (kpca, rbf_gamma) = match e.kpca {
            None => (KpcaChoice::None, 0.0),
            Some(Kernel::Linear) => (KpcaChoice::Linear, 0.0),
            Some(Kernel::Rbf { gamma }) => (KpcaChoice::Rbf, gamma.unwrap_or(0.0)),
        };
        Self {
            n_identities: w.n_identities,
            d_latent: w.d_latent,
            tokens_fg: w.tokens_fg,
            tokens_bg: w.tokens_bg,
            token_dim: w.token_dim,
            sigma_near: w.sigma_near,
            sigma_noise: w.sigma_noise,
            token_scale: w.token_scale,
            view_split: w.view_split,
            n_distractor_sources: w.n_distractor_sources,
            train_sources: w.train_sources,
            k_per_source: w.k_per_source,
            part_edits: w.part_edits,
            human_noise: w.human_noise,
            objectness: w.objectness,
            val_fraction: w.val_fraction,
            test_fraction: w.test_fraction,
            seed: w.seed,
            loss: t.variant,
            lr: t.lr,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            epochs: t.epochs,
            batch_identities: t.batch_identities,
            alpha: t.loss.alpha,
            beta: t.loss.beta,
            margin_m: t.loss.margin_m,
            tau: t.loss.tau.value(),
            circle_relaxation: t.loss.circle_relaxation,
            siglip_bias: t.loss.siglip_bias,
            mask_anchor: t.mask.anchor,
            mask_positive: t.mask.positive,
            mask_distractor: t.mask.distractor,
            jitter_sigma: t.jitter_sigma,
            part_edit_fraction: t.part_edit_fraction,
            part_edit_upsample: t.part_edit_upsample,
            heads: t.heads,
            out_dim: t.out_dim,
            split: e.split,
            sources: e.sources,
            fg_only: e.fg_only,
            kpca,
            rbf_gamma,
            kpca_identities: e.kpca_identities,
            histogram_bins: e.histogram_bins,
        }
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            n_identities: self.n_identities,
            d_latent: self.d_latent,
            tokens_fg: self.tokens_fg,
            tokens_bg: self.tokens_bg,
            token_dim: self.token_dim,
            sigma_near: self.sigma_near,
            sigma_noise: self.sigma_noise,
            token_scale: self.token_scale,
            view_split: self.view_split,
            n_distractor_sources: self.n_distractor_sources,
            train_sources: self.train_sources,
            k_per_source: self.k_per_source,
            part_edits: self.part_edits,
            human_noise: self.human_noise,
            objectness: self.objectness,
            val_fraction: self.val_fraction,
            test_fraction: self.test_fraction,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> CliResult<TrainConfig> {
        let tau = Temperature::new(self.tau)?;
        Ok(TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            epochs: self.epochs,
            batch_identities: self.batch_identities,
            seed: self.seed,
            variant: self.loss,
            loss: LossConfig {
                alpha: self.alpha,
                beta: self.beta,
                margin_m: self.margin_m,
                tau,
                circle_relaxation: self.circle_relaxation,
                siglip_bias: self.siglip_bias,
            },
            mask: MaskProbs {
                anchor: self.mask_anchor,
                positive: self.mask_positive,
                distractor: self.mask_distractor,
            },
            jitter_sigma: self.jitter_sigma,
            part_edit_fraction: self.part_edit_fraction,
            part_edit_upsample: self.part_edit_upsample,
            heads: self.heads,
            out_dim: self.out_dim,
        })
    }

    pub fn eval(&self) -> EvalOptions {
        let gamma = (self.rbf_gamma > 0.0).then_some(self.rbf_gamma);
        EvalOptions {
            split: self.split,
            sources: self.sources,
            fg_only: self.fg_only,
            kpca: match self.kpca {
                KpcaChoice::None => None,
                KpcaChoice::Linear => Some(Kernel::Linear),
                KpcaChoice::Rbf => Some(Kernel::Rbf { gamma }),
            },
            kpca_identities: self.kpca_identities,
            histogram_bins: self.histogram_bins,
        }
    }

    /// Checks every section; the error names the first bad setting.
    pub fn validate(&self) -> CliResult<()> {
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Config(format!("seed {} does not fit in 63 bits", self.seed)));
        }
        if !(self.rbf_gamma >= 0.0 && self.rbf_gamma.is_finite()) {
            return Err(CliError::Config("rbf_gamma must be finite and non-negative".into()));
        }
        if self.histogram_bins == 0 {
            return Err(CliError::Config("histogram_bins must be positive".into()));
        }
        self.world().validate()?;
        self.train()?.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn to_table(&self) -> toml::Table {
        match toml::Value::try_from(self).expect("flat config always serializes") {
            toml::Value::Table(t) => t,
            _ => unreachable!("a struct serializes to a table"),
        }
    }

    pub fn from_table(table: toml::Table) -> CliResult<Self> {
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        Self::from_table(parse_table(text)?)
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            tool: "nearid".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.seed,
            config_hash: self.hash(),
        }
    }

    /// TOML text with a provenance comment block.
    pub fn echo(&self) -> String {
        let p = self.provenance();
        format!("# {} {}\n# config_hash = {}\n{}", p.tool, p.version, p.config_hash, self.to_toml())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(&WorldConfig::default(), &TrainConfig::default(), &EvalOptions::default())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_toml())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
}

pub fn parse_table(text: &str) -> CliResult<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| CliError::Config(e.message().to_string()))
}

pub fn read_table(path: &Path) -> CliResult<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_table(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Layers configuration sources into one validated config.
#[derive(Debug, Default)]
pub struct ConfigLoader<'a> {
    pub inherited: Option<toml::Table>,
    pub file: Option<&'a Path>,
    pub env_seed: Option<String>,
    pub overrides: Option<&'a Overrides>,
}

impl ConfigLoader<'_> {
    pub fn load(&self) -> CliResult<RunConfig> {
        let mut table = self.inherited.clone().unwrap_or_default();
        if let Some(path) = self.file {
            table.extend(read_table(path)?);
        }
        let mut cfg = RunConfig::from_table(table)?;
        if let Some(s) = &self.env_seed {
            cfg.seed = s.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV}={s} is not a seed")))?;
        }
        if let Some(o) = self.overrides {
            o.apply(&mut cfg);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets `key` from a string, typed after the key's current value.
pub fn set_key(table: &mut toml::Table, key: &str, raw: &str) -> CliResult<()> {
    let current = table.get(key).ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
    let bad = || CliError::Config(format!("`{raw}` is not a valid value for `{key}`"));
    let value = match current {
        toml::Value::Integer(_) => toml::Value::Integer(raw.parse().map_err(|_| bad())?),
        toml::Value::Float(_) => toml::Value::Float(raw.parse().map_err(|_| bad())?),
        toml::Value::Boolean(_) => toml::Value::Boolean(raw.parse().map_err(|_| bad())?),
        _ => toml::Value::String(raw.to_string()),
    };
    table.insert(key.to_string(), value);
    Ok(())
}
