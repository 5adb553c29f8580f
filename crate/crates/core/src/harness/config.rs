use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::awm::{DEFAULT_ITC_TAU, DEFAULT_SIMCLR_TAU};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{WafParams, DEFAULT_EPSILON, DEFAULT_TAU};
use crate::synthdata::{SynthConfig, TextAugment, DEFAULT_SIGMA_AUG};

/// How the student's second view is masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskStrategy {
    /// Drop the patches the EMA teacher's CLS attends to least.
    Awm,
    /// Drop a uniformly random subset of the same size.
    Random,
}

impl MaskStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskStrategy::Awm => "awm",
            MaskStrategy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "awm" => Ok(MaskStrategy::Awm),
            "random" => Ok(MaskStrategy::Random),
            other => Err(Error::Config(format!("unknown mask strategy `{other}`"))),
        }
    }
}

/// Which terms enter the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossToggles {
    pub bsdm: bool,
    pub sdm: bool,
    pub waf: bool,
    pub id: bool,
    pub awm: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            bsdm: true,
            sdm: false,
            waf: true,
            id: true,
            awm: true,
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub data: SynthConfig,
    pub data_seed: u64,
    pub tau: f64,
    pub epsilon: f64,
    pub waf: WafParams,
    pub itc_tau: f64,
    pub simclr_tau: f64,
    pub projector_hidden: usize,
    pub mask_ratio: f64,
    pub mask_strategy: MaskStrategy,
    pub noise_rate: f64,
    pub losses: LossToggles,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sigma_aug: f64,
    pub text_aug: TextAugment,
    pub seed: u64,
    /// Seeds used by the sweep and comparison commands.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            data: SynthConfig::default(),
            data_seed: 0,
            tau: DEFAULT_TAU,
            epsilon: DEFAULT_EPSILON,
            waf: WafParams::default(),
            itc_tau: DEFAULT_ITC_TAU,
            simclr_tau: DEFAULT_SIMCLR_TAU,
            projector_hidden: 64,
            mask_ratio: 0.5,
            mask_strategy: MaskStrategy::Awm,
            noise_rate: 0.0,
            losses: LossToggles::default(),
            epochs: 60,
            batch_size: 16,
            lr: 3e-4,
            sigma_aug: DEFAULT_SIGMA_AUG,
            text_aug: TextAugment::default(),
            seed: 0,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects a boolean, got `{value}`"))),
    }
}

impl RunConfig {
    /// Keys accepted by [`RunConfig::set`], in the order [`RunConfig::to_text`] writes them.
    pub const KEYS: &'static [&'static str] = &[
        "d_model",
        "heads",
        "image_layers",
        "text_layers",
        "ff_hidden",
        "d_joint",
        "max_len",
        "n_identities",
        "samples_per_id",
        "num_patches",
        "patch_dim",
        "d_sig",
        "signal_patches",
        "sigma",
        "sigma_background",
        "signal_gain",
        "foreground_offset",
        "attribute_slots",
        "attribute_values",
        "filler_per_caption",
        "vocab",
        "train_fraction",
        "val_fraction",
        "data_seed",
        "tau",
        "epsilon",
        "alpha",
        "beta",
        "gamma",
        "itc_tau",
        "simclr_tau",
        "projector_hidden",
        "mask_ratio",
        "mask_strategy",
        "noise_rate",
        "bsdm",
        "sdm",
        "waf",
        "id",
        "awm",
        "epochs",
        "batch_size",
        "lr",
        "sigma_aug",
        "text_p_mask",
        "text_p_replace",
        "text_p_remove",
        "seed",
        "seeds",
        "output_dir",
    ];

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "d_model" => self.encoder.d_model = parse(key, v)?,
            "heads" => self.encoder.heads = parse(key, v)?,
            "image_layers" => self.encoder.image_layers = parse(key, v)?,
            "text_layers" => self.encoder.text_layers = parse(key, v)?,
            "ff_hidden" => self.encoder.ff_hidden = parse(key, v)?,
            "d_joint" => self.encoder.d_joint = parse(key, v)?,
            "max_len" => self.encoder.max_len = parse(key, v)?,
            "n_identities" => self.data.n_identities = parse(key, v)?,
            "samples_per_id" => self.data.samples_per_id = parse(key, v)?,
            "num_patches" => self.data.num_patches = parse(key, v)?,
            "patch_dim" => self.data.patch_dim = parse(key, v)?,
            "d_sig" => self.data.d_sig = parse(key, v)?,
            "signal_patches" => self.data.signal_patches = parse(key, v)?,
            "sigma" => self.data.sigma = parse(key, v)?,
            "sigma_background" => self.data.sigma_background = parse(key, v)?,
            "signal_gain" => self.data.signal_gain = parse(key, v)?,
            "foreground_offset" => self.data.foreground_offset = parse(key, v)?,
            "attribute_slots" => self.data.attribute_slots = parse(key, v)?,
            "attribute_values" => self.data.attribute_values = parse(key, v)?,
            "filler_per_caption" => self.data.filler_per_caption = parse(key, v)?,
            "vocab" => self.data.vocab = parse(key, v)?,
            "train_fraction" => self.data.train_fraction = parse(key, v)?,
            "val_fraction" => self.data.val_fraction = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "alpha" => self.waf.alpha = parse(key, v)?,
            "beta" => self.waf.beta = parse(key, v)?,
            "gamma" => self.waf.gamma = parse(key, v)?,
            "itc_tau" => self.itc_tau = parse(key, v)?,
            "simclr_tau" => self.simclr_tau = parse(key, v)?,
            "projector_hidden" => self.projector_hidden = parse(key, v)?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "mask_strategy" => self.mask_strategy = MaskStrategy::parse(v)?,
            "noise_rate" => self.noise_rate = parse(key, v)?,
            "bsdm" => self.losses.bsdm = parse_bool(key, v)?,
            "sdm" => self.losses.sdm = parse_bool(key, v)?,
            "waf" => self.losses.waf = parse_bool(key, v)?,
            "id" => self.losses.id = parse_bool(key, v)?,
            "awm" => self.losses.awm = parse_bool(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "sigma_aug" => self.sigma_aug = parse(key, v)?,
            "text_p_mask" => self.text_aug.p_mask = parse(key, v)?,
            "text_p_replace" => self.text_aug.p_replace = parse(key, v)?,
            "text_p_remove" => self.text_aug.p_remove = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "output_dir" => self.output_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies `--key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        for arg in args {
            let arg = arg.as_ref();
            let body = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("override `{arg}` must look like --key=value")))?;
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{arg}` must look like --key=value")))?;
            self.set(&k.replace('-', "_"), v)?;
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "d_model" => self.encoder.d_model.to_string(),
            "heads" => self.encoder.heads.to_string(),
            "image_layers" => self.encoder.image_layers.to_string(),
            "text_layers" => self.encoder.text_layers.to_string(),
            "ff_hidden" => self.encoder.ff_hidden.to_string(),
            "d_joint" => self.encoder.d_joint.to_string(),
            "max_len" => self.encoder.max_len.to_string(),
            "n_identities" => self.data.n_identities.to_string(),
            "samples_per_id" => self.data.samples_per_id.to_string(),
            "num_patches" => self.data.num_patches.to_string(),
            "patch_dim" => self.data.patch_dim.to_string(),
            "d_sig" => self.data.d_sig.to_string(),
            "signal_patches" => self.data.signal_patches.to_string(),
            "sigma" => self.data.sigma.to_string(),
            "sigma_background" => self.data.sigma_background.to_string(),
            "signal_gain" => self.data.signal_gain.to_string(),
            "foreground_offset" => self.data.foreground_offset.to_string(),
            "attribute_slots" => self.data.attribute_slots.to_string(),
            "attribute_values" => self.data.attribute_values.to_string(),
            "filler_per_caption" => self.data.filler_per_caption.to_string(),
            "vocab" => self.data.vocab.to_string(),
            "train_fraction" => self.data.train_fraction.to_string(),
            "val_fraction" => self.data.val_fraction.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "tau" => self.tau.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "alpha" => self.waf.alpha.to_string(),
            "beta" => self.waf.beta.to_string(),
            "gamma" => self.waf.gamma.to_string(),
            "itc_tau" => self.itc_tau.to_string(),
            "simclr_tau" => self.simclr_tau.to_string(),
            "projector_hidden" => self.projector_hidden.to_string(),
            "mask_ratio" => self.mask_ratio.to_string(),
            "mask_strategy" => self.mask_strategy.as_str().to_string(),
            "noise_rate" => self.noise_rate.to_string(),
            "bsdm" => self.losses.bsdm.to_string(),
            "sdm" => self.losses.sdm.to_string(),
            "waf" => self.losses.waf.to_string(),
            "id" => self.losses.id.to_string(),
            "awm" => self.losses.awm.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "sigma_aug" => self.sigma_aug.to_string(),
            "text_p_mask" => self.text_aug.p_mask.to_string(),
            "text_p_replace" => self.text_aug.p_replace.to_string(),
            "text_p_remove" => self.text_aug.p_remove.to_string(),
            "seed" => self.seed.to_string(),
            "seeds" => self
                .seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "output_dir" => self.output_dir.display().to_string(),
            _ => unreachable!("every listed key has a value"),
        }
    }

    /// Writes every key in the format accepted by [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            let _ = writeln!(s, "{key} = {}", self.value_of(key));
        }
        s
    }

    /// Encoder sizes with the data-dependent fields filled in from the dataset settings.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_patches: self.data.num_patches,
            patch_dim: self.data.patch_dim,
            vocab: self.data.vocab,
            ..self.encoder.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.data.validate()?;
        self.waf.validate()?;
        self.text_aug.validate()?;
        if self.losses.bsdm && self.losses.sdm {
            return Err(Error::Config("bsdm and sdm are alternatives; enable at most one".into()));
        }
        let l = &self.losses;
        if !(l.bsdm || l.sdm || l.waf || l.id || l.awm) {
            return Err(Error::Config("at least one loss must be enabled".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise_rate {} outside [0, 1)", self.noise_rate)));
        }
        for (name, t) in [("tau", self.tau), ("itc_tau", self.itc_tau), ("simclr_tau", self.simclr_tau)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.projector_hidden == 0 {
            return Err(Error::Config("projector_hidden must be positive".into()));
        }
        if self.data.caption_len() + 1 > self.encoder.max_len {
            return Err(Error::Config(format!(
                "captions of {} tokens plus end marker exceed max_len {}",
                self.data.caption_len(),
                self.encoder.max_len
            )));
        }
        Ok(())
    }
}
