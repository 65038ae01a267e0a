//! Flat `key = value` run configuration with `#` comments.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use ptl_core::cells::CellVersion;
use ptl_core::network::{Mode, NetworkConfig};
use ptl_core::tensor::OpKind;
use ptl_core::training::{SgdConfig, TrainOptions};
use ptl_core::DType;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Everything a command needs, validated before anything is allocated.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub optimizer: SgdConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub state_backprop: bool,
    pub timing: bool,
    pub dtype: DType,
    pub dataset: DatasetKind,
    pub data_seed: u64,
    pub synth_per_class: usize,
    pub synth_eval_per_class: usize,
    pub synth_noise_std: f64,
    pub synth_variant: u32,
    pub cifar_dir: Option<PathBuf>,
    /// 0 keeps every sample.
    pub train_limit: usize,
    pub test_limit: usize,
    pub eval_split: Split,
    pub lambda: f64,
    /// Non-empty runs one distillation per entry.
    pub lambdas: Vec<f64>,
    pub teacher: Option<PathBuf>,
    pub gradcheck_fault: Option<OpKind>,
    pub inspect_mode: Mode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            optimizer: SgdConfig::default(),
            batch_size: 32,
            epochs: 10,
            seed: 0,
            augment: false,
            state_backprop: false,
            timing: false,
            dtype: DType::F32,
            dataset: DatasetKind::Synthetic,
            data_seed: 0,
            synth_per_class: 200,
            synth_eval_per_class: 50,
            synth_noise_std: 0.05,
            synth_variant: 0,
            cifar_dir: None,
            train_limit: 0,
            test_limit: 0,
            eval_split: Split::Test,
            lambda: 0.8,
            lambdas: Vec::new(),
            teacher: None,
            gradcheck_fault: None,
            inspect_mode: Mode::Train,
        }
    }
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "cells",
    "in_channels",
    "resolution",
    "stem_channels",
    "block_channels",
    "block_strides",
    "cell_channels",
    "feature_dim",
    "hidden_dim",
    "classes",
    "kernel",
    "lr",
    "momentum",
    "decay_factor",
    "decay_every",
    "batch_size",
    "epochs",
    "seed",
    "augment",
    "state_backprop",
    "timing",
    "dtype",
    "dataset",
    "data_seed",
    "synth_per_class",
    "synth_eval_per_class",
    "synth_noise_std",
    "synth_variant",
    "cifar_dir",
    "train_limit",
    "test_limit",
    "eval_split",
    "lambda",
    "lambdas",
    "teacher",
    "gradcheck_fault",
    "inspect_mode",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse `{v}`"))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got `{v}`")),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses a config file body on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let net = &mut self.network;
        match key {
            "cells" => {
                net.cells = match v {
                    "none" => None,
                    other => Some(other.parse::<CellVersion>().map_err(|e| format!("cells: {e}"))?),
                }
            }
            "in_channels" => net.in_channels = num(key, v)?,
            "resolution" => net.resolution = num(key, v)?,
            "stem_channels" => net.stem_channels = num(key, v)?,
            "block_channels" => net.block_channels = list(key, v)?,
            "block_strides" => net.block_strides = list(key, v)?,
            "cell_channels" => net.cell_channels = list(key, v)?,
            "feature_dim" => net.feature_dim = num(key, v)?,
            "hidden_dim" => net.hidden_dim = num(key, v)?,
            "classes" => net.classes = num(key, v)?,
            "kernel" => net.kernel = num(key, v)?,
            "lr" => self.optimizer.lr0 = num(key, v)?,
            "momentum" => self.optimizer.momentum = num(key, v)?,
            "decay_factor" => self.optimizer.decay_factor = num(key, v)?,
            "decay_every" => self.optimizer.decay_every = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "augment" => self.augment = flag(key, v)?,
            "state_backprop" => self.state_backprop = flag(key, v)?,
            "timing" => self.timing = flag(key, v)?,
            "dtype" => self.dtype = v.parse().map_err(|e| format!("dtype: {e}"))?,
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetKind::Synthetic,
                    "cifar" => DatasetKind::Cifar,
                    _ => return Err(format!("dataset: expected synthetic or cifar, got `{v}`")),
                }
            }
            "data_seed" => self.data_seed = num(key, v)?,
            "synth_per_class" => self.synth_per_class = num(key, v)?,
            "synth_eval_per_class" => self.synth_eval_per_class = num(key, v)?,
            "synth_noise_std" => self.synth_noise_std = num(key, v)?,
            "synth_variant" => self.synth_variant = num(key, v)?,
            "cifar_dir" => self.cifar_dir = path(v),
            "train_limit" => self.train_limit = num(key, v)?,
            "test_limit" => self.test_limit = num(key, v)?,
            "eval_split" => {
                self.eval_split = match v {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    _ => return Err(format!("eval_split: expected train or test, got `{v}`")),
                }
            }
            "lambda" => self.lambda = num(key, v)?,
            "lambdas" => self.lambdas = list(key, v)?,
            "teacher" => self.teacher = path(v),
            "gradcheck_fault" => {
                self.gradcheck_fault = match v {
                    "none" => None,
                    other => Some(other.parse().map_err(|e| format!("gradcheck_fault: {e}"))?),
                }
            }
            "inspect_mode" => {
                self.inspect_mode = match v {
                    "train" => Mode::Train,
                    "eval" => Mode::Eval,
                    _ => return Err(format!("inspect_mode: expected train or eval, got `{v}`")),
                }
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        self.network.validate().map_err(|e| CliError::Config(strip_core(e)))?;
        self.optimizer.validate().map_err(|e| CliError::Config(strip_core(e)))?;
        if self.batch_size == 0 {
            return bad("batch_size: must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda: must lie in [0, 1], got {}", self.lambda));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return bad(format!("lambdas: every entry must lie in [0, 1], got {l}"));
        }
        match self.dataset {
            DatasetKind::Synthetic => {
                if self.synth_per_class == 0 || self.synth_eval_per_class == 0 {
                    return bad("synth_per_class: must be positive".into());
                }
                if !(self.synth_noise_std >= 0.0 && self.synth_noise_std.is_finite()) {
                    return bad(format!("synth_noise_std: must be finite and >= 0, got {}", self.synth_noise_std));
                }
            }
            DatasetKind::Cifar => {
                if self.cifar_dir.is_none() {
                    return bad("cifar_dir: required when dataset = cifar".into());
                }
                if self.network.resolution != 32 || self.network.in_channels != 3 {
                    return bad("resolution: CIFAR-10 images are 3x32x32".into());
                }
                if self.network.classes != 10 {
                    return bad(format!("classes: CIFAR-10 has 10 classes, got {}", self.network.classes));
                }
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` returns an equal config.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let o = &self.optimizer;
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: Vec<String> = vec![
            n.cells.map(|c| format!("{c:?}").to_lowercase()).unwrap_or_else(|| "none".into()),
            n.in_channels.to_string(),
            n.resolution.to_string(),
            n.stem_channels.to_string(),
            join(&n.block_channels),
            join(&n.block_strides),
            join(&n.cell_channels),
            n.feature_dim.to_string(),
            n.hidden_dim.to_string(),
            n.classes.to_string(),
            n.kernel.to_string(),
            o.lr0.to_string(),
            o.momentum.to_string(),
            o.decay_factor.to_string(),
            o.decay_every.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.seed.to_string(),
            self.augment.to_string(),
            self.state_backprop.to_string(),
            self.timing.to_string(),
            self.dtype.to_string(),
            match self.dataset {
                DatasetKind::Synthetic => "synthetic".into(),
                DatasetKind::Cifar => "cifar".into(),
            },
            self.data_seed.to_string(),
            self.synth_per_class.to_string(),
            self.synth_eval_per_class.to_string(),
            self.synth_noise_std.to_string(),
            self.synth_variant.to_string(),
            opt_path(&self.cifar_dir),
            self.train_limit.to_string(),
            self.test_limit.to_string(),
            match self.eval_split {
                Split::Train => "train".into(),
                Split::Test => "test".into(),
            },
            self.lambda.to_string(),
            join(&self.lambdas),
            opt_path(&self.teacher),
            self.gradcheck_fault.map(|k| k.name().to_string()).unwrap_or_else(|| "none".into()),
            match self.inspect_mode {
                Mode::Train => "train".into(),
                Mode::Eval => "eval".into(),
            },
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            seed: self.seed,
            augment: self.augment,
            state_backprop: self.state_backprop,
        }
    }
}

fn strip_core(e: ptl_core::Error) -> String {
    match e {
        ptl_core::Error::InvalidArgument(msg) => msg,
        other => other.to_string(),
    }
}
