//! Run configuration: flat INI-style sections or a JSON mirror, resolved to
//! fully-defaulted values. Unknown keys are rejected by name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use fcfd_core::losses::{FuncMode, LossWeights};
use fcfd_core::pathing::SamplerConfig;
use fcfd_core::trainer::{TrainConfig, TrainMode};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSection {
    /// Registry name of the (teacher, student) pair.
    pub pair: String,
    /// Initialization seed for model construction.
    pub model_seed: u64,
    /// Candidate switch positions (1-based stage indices).
    pub positions: Vec<usize>,
    /// Optional teacher checkpoint; when absent the teacher is pretrained
    /// in-process with the same optimizer settings.
    pub teacher_init: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataSection {
    /// "synthetic" or "files".
    pub source: String,
    pub classes: usize,
    pub per_class: usize,
    pub eval_per_class: usize,
    pub image_size: usize,
    pub data_seed: u64,
    pub train_images: Option<String>,
    pub train_labels: Option<String>,
    pub eval_images: Option<String>,
    pub eval_labels: Option<String>,
    pub augment: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    /// "offline" or "online".
    pub mode: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossSection {
    pub w_task: f64,
    pub w_kd: f64,
    pub w_app: f64,
    pub w_func_fd: f64,
    pub w_func_kl: f64,
    pub temperature: f64,
    /// "full" or "partial".
    pub func_mode: String,
    pub enable_task: bool,
    pub enable_kd: bool,
    pub enable_app: bool,
    pub enable_func: bool,
    pub enable_func_prime: bool,
    pub include_func_prime_l2: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerSection {
    pub paths_per_iter: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub optim: OptimSection,
    pub losses: LossSection,
    pub sampler: SamplerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = LossWeights::default();
        RunConfig {
            model: ModelSection {
                pair: "tiny-hetero-pair".into(),
                model_seed: 1,
                positions: vec![2, 3, 4],
                teacher_init: None,
            },
            data: DataSection {
                source: "synthetic".into(),
                classes: 10,
                per_class: 150,
                eval_per_class: 100,
                image_size: 32,
                data_seed: 1,
                train_images: None,
                train_labels: None,
                eval_images: None,
                eval_labels: None,
                augment: true,
            },
            optim: OptimSection {
                epochs: t.epochs,
                batch_size: t.batch_size,
                base_lr: t.base_lr,
                lr_milestones: t.lr_milestones.clone(),
                lr_decay: t.lr_decay,
                momentum: t.momentum,
                weight_decay: t.weight_decay,
                eval_every: t.eval_every,
                mode: "offline".into(),
                seed: t.seed,
            },
            losses: LossSection {
                w_task: w.w_task,
                w_kd: w.w_kd,
                w_app: w.w_app,
                w_func_fd: w.w_func_fd,
                w_func_kl: w.w_func_kl,
                temperature: w.temperature,
                func_mode: "full".into(),
                enable_task: w.enable_task,
                enable_kd: w.enable_kd,
                enable_app: w.enable_app,
                enable_func: w.enable_func,
                enable_func_prime: w.enable_func_prime,
                include_func_prime_l2: w.include_func_prime_l2,
            },
            sampler: SamplerSection { paths_per_iter: 2 },
        }
    }
}

pub type ConfigResult<T> = std::result::Result<T, String>;

fn parse_as<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> ConfigResult<T> {
    value
        .parse()
        .map_err(|_| format!("config:bad-value:{section}.{key}={value}"))
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> ConfigResult<Vec<T>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| parse_as(section, key, p.trim()))
        .collect()
}

impl RunConfig {
    fn set(&mut self, section: &str, key: &str, value: &str) -> ConfigResult<()> {
        let s = section;
        match (section, key) {
            ("model", "pair") => self.model.pair = value.into(),
            ("model", "model_seed") => self.model.model_seed = parse_as(s, key, value)?,
            ("model", "positions") => self.model.positions = parse_list(s, key, value)?,
            ("model", "teacher_init") => self.model.teacher_init = Some(value.into()),
            ("data", "source") => self.data.source = value.into(),
            ("data", "classes") => self.data.classes = parse_as(s, key, value)?,
            ("data", "per_class") => self.data.per_class = parse_as(s, key, value)?,
            ("data", "eval_per_class") => self.data.eval_per_class = parse_as(s, key, value)?,
            ("data", "image_size") => self.data.image_size = parse_as(s, key, value)?,
            ("data", "data_seed") => self.data.data_seed = parse_as(s, key, value)?,
            ("data", "train_images") => self.data.train_images = Some(value.into()),
            ("data", "train_labels") => self.data.train_labels = Some(value.into()),
            ("data", "eval_images") => self.data.eval_images = Some(value.into()),
            ("data", "eval_labels") => self.data.eval_labels = Some(value.into()),
            ("data", "augment") => self.data.augment = parse_as(s, key, value)?,
            ("optim", "epochs") => self.optim.epochs = parse_as(s, key, value)?,
            ("optim", "batch_size") => self.optim.batch_size = parse_as(s, key, value)?,
            ("optim", "base_lr") => self.optim.base_lr = parse_as(s, key, value)?,
            ("optim", "lr_milestones") => self.optim.lr_milestones = parse_list(s, key, value)?,
            ("optim", "lr_decay") => self.optim.lr_decay = parse_as(s, key, value)?,
            ("optim", "momentum") => self.optim.momentum = parse_as(s, key, value)?,
            ("optim", "weight_decay") => self.optim.weight_decay = parse_as(s, key, value)?,
            ("optim", "eval_every") => self.optim.eval_every = parse_as(s, key, value)?,
            ("optim", "mode") => self.optim.mode = value.into(),
            ("optim", "seed") => self.optim.seed = parse_as(s, key, value)?,
            ("losses", "w_task") => self.losses.w_task = parse_as(s, key, value)?,
            ("losses", "w_kd") => self.losses.w_kd = parse_as(s, key, value)?,
            ("losses", "w_app") => self.losses.w_app = parse_as(s, key, value)?,
            ("losses", "w_func_fd") => self.losses.w_func_fd = parse_as(s, key, value)?,
            ("losses", "w_func_kl") => self.losses.w_func_kl = parse_as(s, key, value)?,
            ("losses", "temperature") => self.losses.temperature = parse_as(s, key, value)?,
            ("losses", "func_mode") => self.losses.func_mode = value.into(),
            ("losses", "enable_task") => self.losses.enable_task = parse_as(s, key, value)?,
            ("losses", "enable_kd") => self.losses.enable_kd = parse_as(s, key, value)?,
            ("losses", "enable_app") => self.losses.enable_app = parse_as(s, key, value)?,
            ("losses", "enable_func") => self.losses.enable_func = parse_as(s, key, value)?,
            ("losses", "enable_func_prime") => {
                self.losses.enable_func_prime = parse_as(s, key, value)?
            }
            ("losses", "include_func_prime_l2") => {
                self.losses.include_func_prime_l2 = parse_as(s, key, value)?
            }
            ("sampler", "paths_per_iter") => {
                self.sampler.paths_per_iter = parse_as(s, key, value)?
            }
            _ => return Err(format!("config:unknown-key:{section}.{key}")),
        }
        Ok(())
    }

    pub fn train_config(&self) -> ConfigResult<TrainConfig> {
        let mode = match self.optim.mode.as_str() {
            "offline" => TrainMode::Offline,
            "online" => TrainMode::Online,
            other => return Err(format!("config:bad-value:optim.mode={other}")),
        };
        let cfg = TrainConfig {
            epochs: self.optim.epochs,
            batch_size: self.optim.batch_size,
            base_lr: self.optim.base_lr,
            lr_milestones: self.optim.lr_milestones.clone(),
            lr_decay: self.optim.lr_decay,
            momentum: self.optim.momentum,
            weight_decay: self.optim.weight_decay,
            eval_every: self.optim.eval_every,
            seed: self.optim.seed,
            mode,
            augment: self.data.augment,
        };
        cfg.validate().map_err(|e| format!("config:invalid:{e}"))?;
        Ok(cfg)
    }

    pub fn loss_weights(&self) -> ConfigResult<LossWeights> {
        let func_mode = match self.losses.func_mode.as_str() {
            "full" => FuncMode::Full,
            "partial" => FuncMode::Partial,
            other => return Err(format!("config:bad-value:losses.func_mode={other}")),
        };
        let w = LossWeights {
            w_task: self.losses.w_task,
            w_kd: self.losses.w_kd,
            w_app: self.losses.w_app,
            w_func_fd: self.losses.w_func_fd,
            w_func_kl: self.losses.w_func_kl,
            temperature: self.losses.temperature,
            func_mode,
            enable_task: self.losses.enable_task,
            enable_kd: self.losses.enable_kd,
            enable_app: self.losses.enable_app,
            enable_func: self.losses.enable_func,
            enable_func_prime: self.losses.enable_func_prime,
            include_func_prime_l2: self.losses.include_func_prime_l2,
        };
        w.validate().map_err(|e| format!("config:invalid:{e}"))?;
        Ok(w)
    }

    pub fn sampler_config(&self) -> ConfigResult<SamplerConfig> {
        let cfg = SamplerConfig::new(
            self.model.positions.clone(),
            self.sampler.paths_per_iter,
            self.optim.seed,
        );
        cfg.validate().map_err(|e| format!("config:invalid:{e}"))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> ConfigResult<()> {
        self.train_config()?;
        self.loss_weights()?;
        self.sampler_config()?;
        match self.data.source.as_str() {
            "synthetic" => {}
            "files" => {
                for (k, v) in [
                    ("train_images", &self.data.train_images),
                    ("train_labels", &self.data.train_labels),
                    ("eval_images", &self.data.eval_images),
                    ("eval_labels", &self.data.eval_labels),
                ] {
                    if v.is_none() {
                        return Err(format!("config:missing-key:data.{k}"));
                    }
                }
            }
            other => return Err(format!("config:bad-value:data.source={other}")),
        }
        Ok(())
    }
}

fn apply_ini(cfg: &mut RunConfig, text: &str) -> ConfigResult<()> {
    let mut section = String::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("config:syntax:line-{}", ln + 1));
        };
        if section.is_empty() {
            return Err(format!("config:syntax:line-{}:key-outside-section", ln + 1));
        }
        cfg.set(&section, key.trim(), value.trim())?;
    }
    Ok(())
}

fn json_scalar(section: &str, key: &str, v: &serde_json::Value) -> ConfigResult<String> {
    match v {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        serde_json::Value::Bool(b) => Ok(b.to_string()),
        serde_json::Value::Array(items) => {
            let parts: Vec<String> = items
                .iter()
                .map(|i| json_scalar(section, key, i))
                .collect::<ConfigResult<_>>()?;
            Ok(parts.join(","))
        }
        _ => Err(format!("config:bad-value:{section}.{key}")),
    }
}

fn apply_json(cfg: &mut RunConfig, text: &str) -> ConfigResult<()> {
    let root: serde_json::Value =
        serde_json::from_str(text).map_err(|e| format!("config:syntax:{e}"))?;
    let serde_json::Value::Object(sections) = root else {
        return Err("config:syntax:top-level-must-be-object".into());
    };
    for (section, body) in sections {
        let serde_json::Value::Object(kv) = body else {
            return Err(format!("config:bad-value:{section}"));
        };
        for (key, value) in kv {
            let s = json_scalar(&section, &key, &value)?;
            cfg.set(&section, &key, &s)?;
        }
    }
    Ok(())
}

/// Loads, resolves and validates a config file. Also returns the raw bytes
/// for content hashing. An empty file yields all defaults.
pub fn load_config(path: &Path) -> ConfigResult<(RunConfig, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|_| "config:not-found".to_string())?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| "config:syntax:not-utf8".to_string())?;
    let mut cfg = RunConfig::default();
    let is_json = path.extension().and_then(|e| e.to_str()) == Some("json");
    if is_json && !text.trim().is_empty() {
        apply_json(&mut cfg, &text)?;
    } else if !is_json {
        apply_ini(&mut cfg, &text)?;
    }
    cfg.validate()?;
    Ok((cfg, bytes))
}
