//! Run configuration: profile defaults, then an optional TOML file, then
//! command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use lifthead::training::{LossWeights, TrainConfig};
use lifthead::{AttentionScale, HeadConfig};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// L=2, h=2, d=32 on a 4×4 grid of 32 channels.
    Tiny,
    /// L=6, h=8, d=512 on an 8×8 grid of 512 channels.
    Paper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub samples: usize,
    pub eval_samples: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsConfig {
    pub out: PathBuf,
    pub metrics: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (head, train) = match profile {
            Profile::Tiny => (HeadConfig::tiny(), TrainConfig::tiny()),
            Profile::Paper => (HeadConfig::paper(), TrainConfig::default()),
        };
        Self {
            profile,
            head,
            train,
            data: DataConfig {
                samples: 64,
                eval_samples: 256,
                noise_sigma: 0.0,
                seed: 0,
            },
            paths: PathsConfig {
                out: PathBuf::from("runs"),
                metrics: "metrics.tsv".into(),
            },
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.paths.out.join(&self.paths.metrics)
    }

    /// Fully resolved settings as `config.<section>.<field><TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        let h = &self.head;
        let t = &self.train;
        let d = &self.data;
        let scale = match h.attention_scale {
            AttentionScale::ModelWidth => "model",
            AttentionScale::HeadWidth => "head",
        };
        let profile = match self.profile {
            Profile::Tiny => "tiny",
            Profile::Paper => "paper",
        };
        let rows: Vec<(&str, String)> = vec![
            ("profile", profile.into()),
            ("head.layers", h.layers.to_string()),
            ("head.heads", h.heads.to_string()),
            ("head.width", h.width.to_string()),
            ("head.n_patches", h.n_patches.to_string()),
            ("head.c_in", h.c_in.to_string()),
            ("head.dropout", h.dropout.to_string()),
            ("head.attention_scale", scale.into()),
            ("head.ln_eps", h.ln_eps.to_string()),
            ("train.max_lr", t.max_lr.to_string()),
            ("train.warmup_steps", t.warmup_steps.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.avg_last_epochs", t.avg_last_epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.min_keep_patches", t.min_keep(h.n_patches).to_string()),
            ("train.w_keypoint", t.weights.keypoint.to_string()),
            ("train.w_twist", t.weights.twist.to_string()),
            ("train.w_beta", t.weights.beta.to_string()),
            ("data.samples", d.samples.to_string()),
            ("data.eval_samples", d.eval_samples.to_string()),
            ("data.noise_sigma", d.noise_sigma.to_string()),
            ("data.seed", d.seed.to_string()),
            ("paths.out", self.paths.out.display().to_string()),
            ("paths.metrics", self.paths.metrics.clone()),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "config.{k}\t{v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.train.validate(self.head.n_patches)?;
        if self.data.samples == 0 {
            bail!("invalid config field `data.samples`: must be positive");
        }
        if self.data.eval_samples == 0 {
            bail!("invalid config field `data.eval_samples`: must be positive");
        }
        if !self.data.noise_sigma.is_finite() || self.data.noise_sigma < 0.0 {
            bail!("invalid config field `data.noise_sigma`: must be finite and non-negative");
        }
        if self.paths.metrics.is_empty() {
            bail!("invalid config field `paths.metrics`: must be a file name");
        }
        Ok(())
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    head: HeadFile,
    #[serde(default)]
    train: TrainFile,
    #[serde(default)]
    data: DataFile,
    #[serde(default)]
    paths: PathsFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadFile {
    layers: Option<usize>,
    heads: Option<usize>,
    width: Option<usize>,
    n_patches: Option<usize>,
    c_in: Option<usize>,
    dropout: Option<f64>,
    attention_scale: Option<ScaleName>,
    ln_eps: Option<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScaleName {
    /// Divide scores by sqrt(d).
    Model,
    /// Divide scores by sqrt(d / h).
    Head,
}

impl From<ScaleName> for AttentionScale {
    fn from(s: ScaleName) -> Self {
        match s {
            ScaleName::Model => AttentionScale::ModelWidth,
            ScaleName::Head => AttentionScale::HeadWidth,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    max_lr: Option<f64>,
    warmup_steps: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    avg_last_epochs: Option<usize>,
    seed: Option<u64>,
    min_keep_patches: Option<usize>,
    w_keypoint: Option<f64>,
    w_twist: Option<f64>,
    w_beta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataFile {
    samples: Option<usize>,
    eval_samples: Option<usize>,
    noise_sigma: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathsFile {
    out: Option<PathBuf>,
    metrics: Option<String>,
}

/// Flags shared by every command. Unset flags leave the file or profile
/// value in place.
#[derive(Debug, Default, Clone, Args)]
pub struct Overrides {
    /// TOML file with [head], [train], [data] and [paths] tables.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Default settings to start from.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    /// Seed for initialization, shuffling, augmentation and dropout.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints and logs.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    #[arg(long, global = true)]
    pub width: Option<usize>,
    #[arg(long, global = true)]
    pub n_patches: Option<usize>,
    #[arg(long, global = true)]
    pub c_in: Option<usize>,
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub attention_scale: Option<ScaleName>,

    #[arg(long, global = true)]
    pub max_lr: Option<f64>,
    #[arg(long, global = true)]
    pub warmup_steps: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub avg_last_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub min_keep_patches: Option<usize>,
    #[arg(long, global = true)]
    pub w_keypoint: Option<f64>,
    #[arg(long, global = true)]
    pub w_twist: Option<f64>,
    #[arg(long, global = true)]
    pub w_beta: Option<f64>,

    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub eval_samples: Option<usize>,
    #[arg(long, global = true)]
    pub noise_sigma: Option<f64>,
    #[arg(long, global = true)]
    pub data_seed: Option<u64>,
    /// Metrics file name inside the output directory.
    #[arg(long, global = true)]
    pub metrics: Option<String>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn read_file(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Profile defaults, overlaid by the config file, overlaid by flags.
pub fn resolve(o: &Overrides) -> Result<RunConfig> {
    let mut c = RunConfig::for_profile(o.profile.unwrap_or(Profile::Paper));
    if let Some(path) = &o.config {
        let f = read_file(path)?;
        apply_file(&mut c, f);
    }
    apply_flags(&mut c, o);
    c.validate()?;
    Ok(c)
}

fn apply_file(c: &mut RunConfig, f: FileConfig) {
    let (h, t) = (&mut c.head, &mut c.train);
    set(&mut h.layers, f.head.layers);
    set(&mut h.heads, f.head.heads);
    set(&mut h.width, f.head.width);
    set(&mut h.n_patches, f.head.n_patches);
    set(&mut h.c_in, f.head.c_in);
    set(&mut h.dropout, f.head.dropout);
    set(&mut h.attention_scale, f.head.attention_scale.map(Into::into));
    set(&mut h.ln_eps, f.head.ln_eps);
    set(&mut t.max_lr, f.train.max_lr);
    set(&mut t.warmup_steps, f.train.warmup_steps);
    set(&mut t.epochs, f.train.epochs);
    set(&mut t.batch_size, f.train.batch_size);
    set(&mut t.avg_last_epochs, f.train.avg_last_epochs);
    set(&mut t.seed, f.train.seed);
    if f.train.min_keep_patches.is_some() {
        t.min_keep_patches = f.train.min_keep_patches;
    }
    set(&mut t.weights.keypoint, f.train.w_keypoint);
    set(&mut t.weights.twist, f.train.w_twist);
    set(&mut t.weights.beta, f.train.w_beta);
    set(&mut c.data.samples, f.data.samples);
    set(&mut c.data.eval_samples, f.data.eval_samples);
    set(&mut c.data.noise_sigma, f.data.noise_sigma);
    set(&mut c.data.seed, f.data.seed);
    set(&mut c.paths.out, f.paths.out);
    set(&mut c.paths.metrics, f.paths.metrics);
}

fn apply_flags(c: &mut RunConfig, o: &Overrides) {
    let (h, t) = (&mut c.head, &mut c.train);
    set(&mut h.layers, o.layers);
    set(&mut h.heads, o.heads);
    set(&mut h.width, o.width);
    set(&mut h.n_patches, o.n_patches);
    set(&mut h.c_in, o.c_in);
    set(&mut h.dropout, o.dropout);
    set(&mut h.attention_scale, o.attention_scale.map(Into::into));
    set(&mut t.max_lr, o.max_lr);
    set(&mut t.warmup_steps, o.warmup_steps);
    set(&mut t.epochs, o.epochs);
    set(&mut t.batch_size, o.batch_size);
    set(&mut t.avg_last_epochs, o.avg_last_epochs);
    set(&mut t.seed, o.seed);
    if o.min_keep_patches.is_some() {
        t.min_keep_patches = o.min_keep_patches;
    }
    let w: &mut LossWeights = &mut t.weights;
    set(&mut w.keypoint, o.w_keypoint);
    set(&mut w.twist, o.w_twist);
    set(&mut w.beta, o.w_beta);
    set(&mut c.data.samples, o.samples);
    set(&mut c.data.eval_samples, o.eval_samples);
    set(&mut c.data.noise_sigma, o.noise_sigma);
    set(&mut c.data.seed, o.data_seed);
    set(&mut c.paths.out, o.out.clone());
    set(&mut c.paths.metrics, o.metrics.clone());
}
