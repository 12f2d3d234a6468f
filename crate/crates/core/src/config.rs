//! Run configuration as flat `key = value` text with dotted namespaces.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. [`RunConfig::to_text`] writes every key, so its output replays the
//! run exactly.

use std::path::{Path, PathBuf};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Existing dataset directory; when empty, data is generated.
    pub dir: Option<PathBuf>,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            dir: None,
            train: s.train,
            dev: s.dev,
            test: s.test,
            min_distractors: s.min_distractors,
            max_distractors: s.max_distractors,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key.trim() {
            "seed" => {
                self.seed = parse(key, v)?;
                t.seed = self.seed;
            }
            "model.d_model" => m.d_model = parse(key, v)?,
            "model.layers" => m.layers = parse(key, v)?,
            "model.decoder_layers" => m.decoder_layers = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.ffn_dim" => m.ffn_dim = parse(key, v)?,
            "model.vocab_size" => m.vocab_size = parse(key, v)?,
            "model.dropout" => m.dropout = parse(key, v)?,
            "model.gamma" => m.gamma = parse(key, v)?,
            "model.lambda" => m.lambda = parse(key, v)?,
            "model.tau" => m.tau = parse(key, v)?,
            "model.channels" => m.channels = parse(key, v)?,
            "model.height" => m.height = parse(key, v)?,
            "model.width" => m.width = parse(key, v)?,
            "model.patch_size" => m.patch_size = parse(key, v)?,
            "model.max_text_len" => m.max_text_len = parse(key, v)?,
            "model.max_summary_len" => m.max_summary_len = parse(key, v)?,
            "model.pooling" => m.pooling = v.parse()?,
            "model.relu_in_denominator" => m.relu_in_denominator = parse_bool(key, v)?,
            "model.self_attention_in_cam" => m.self_attention_in_cam = parse_bool(key, v)?,
            "model.share_gates" => m.share_gates = parse_bool(key, v)?,
            "model.tie_embeddings" => m.tie_embeddings = parse_bool(key, v)?,
            "model.image_positional" => m.image_positional = parse_bool(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.dev_every" => t.dev_every = parse(key, v)?,
            "train.ckpt_every" => t.ckpt_every = parse(key, v)?,
            "train.lr_halving" => t.lr_halving = parse_bool(key, v)?,
            "losses.beta1" => t.beta1 = v.parse()?,
            "losses.beta2" => t.beta2 = v.parse()?,
            "losses.beta_mode" => t.beta_mode = v.parse()?,
            "losses.disable_t2i" => t.disable_t2i = parse_bool(key, v)?,
            "losses.disable_i2t" => t.disable_i2t = parse_bool(key, v)?,
            "data.dir" => d.dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.train" => d.train = parse(key, v)?,
            "data.dev" => d.dev = parse(key, v)?,
            "data.test" => d.test = parse(key, v)?,
            "data.min_distractors" => d.min_distractors = parse(key, v)?,
            "data.max_distractors" => d.max_distractors = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` assignments in order.
    pub fn apply<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.as_ref().split_once('=').ok_or_else(|| {
                Error::Config(format!("override {:?} is not key=value", o.as_ref()))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seed != self.seed {
            return Err(Error::Config("train seed differs from run seed".into()));
        }
        Ok(())
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            vocab_size: self.model.vocab_size,
            channels: self.model.channels,
            height: self.model.height,
            width: self.model.width,
            patch_size: self.model.patch_size,
            train: self.data.train,
            dev: self.data.dev,
            test: self.data.test,
            min_distractors: self.data.min_distractors,
            max_distractors: self.data.max_distractors,
        }
    }

    /// Every key with its current value.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let pooling = serde_json::to_value(m.pooling).expect("enum serializes");
        let kind = |k| serde_json::to_value(k).expect("enum serializes");
        let lines: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("model.d_model".into(), m.d_model.to_string()),
            ("model.layers".into(), m.layers.to_string()),
            ("model.decoder_layers".into(), m.decoder_layers.to_string()),
            ("model.heads".into(), m.heads.to_string()),
            ("model.ffn_dim".into(), m.ffn_dim.to_string()),
            ("model.vocab_size".into(), m.vocab_size.to_string()),
            ("model.dropout".into(), m.dropout.to_string()),
            ("model.gamma".into(), m.gamma.to_string()),
            ("model.lambda".into(), m.lambda.to_string()),
            ("model.tau".into(), m.tau.to_string()),
            ("model.channels".into(), m.channels.to_string()),
            ("model.height".into(), m.height.to_string()),
            ("model.width".into(), m.width.to_string()),
            ("model.patch_size".into(), m.patch_size.to_string()),
            ("model.max_text_len".into(), m.max_text_len.to_string()),
            (
                "model.max_summary_len".into(),
                m.max_summary_len.to_string(),
            ),
            (
                "model.pooling".into(),
                pooling.as_str().unwrap_or_default().to_string(),
            ),
            (
                "model.relu_in_denominator".into(),
                m.relu_in_denominator.to_string(),
            ),
            (
                "model.self_attention_in_cam".into(),
                m.self_attention_in_cam.to_string(),
            ),
            ("model.share_gates".into(), m.share_gates.to_string()),
            ("model.tie_embeddings".into(), m.tie_embeddings.to_string()),
            (
                "model.image_positional".into(),
                m.image_positional.to_string(),
            ),
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.lr".into(), t.lr.to_string()),
            ("train.weight_decay".into(), t.weight_decay.to_string()),
            ("train.clip_norm".into(), t.clip_norm.to_string()),
            ("train.dev_every".into(), t.dev_every.to_string()),
            ("train.ckpt_every".into(), t.ckpt_every.to_string()),
            ("train.lr_halving".into(), t.lr_halving.to_string()),
            (
                "losses.beta1".into(),
                kind(t.beta1).as_str().unwrap_or_default().to_string(),
            ),
            (
                "losses.beta2".into(),
                kind(t.beta2).as_str().unwrap_or_default().to_string(),
            ),
            (
                "losses.beta_mode".into(),
                serde_json::to_value(t.beta_mode)
                    .expect("enum serializes")
                    .as_str()
                    .unwrap_or_default()
                    .to_string(),
            ),
            ("losses.disable_t2i".into(), t.disable_t2i.to_string()),
            ("losses.disable_i2t".into(), t.disable_i2t.to_string()),
            (
                "data.dir".into(),
                d.dir
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("data.train".into(), d.train.to_string()),
            ("data.dev".into(), d.dev.to_string()),
            ("data.test".into(), d.test.to_string()),
            ("data.min_distractors".into(), d.min_distractors.to_string()),
            ("data.max_distractors".into(), d.max_distractors.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
