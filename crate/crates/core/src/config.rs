//! Run configuration, ablation switches and the flat `key = value` format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sckd,
    Finetune,
    Joint,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "sckd" => Ok(Mode::Sckd),
            "finetune" => Ok(Mode::Finetune),
            "joint" => Ok(Mode::Joint),
            other => Err(Error::config(format!("unknown mode '{other}' (expected sckd, finetune or joint)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sckd => "sckd",
            Mode::Finetune => "finetune",
            Mode::Joint => "joint",
        })
    }
}

/// What the teacher's projection and classifier consume during distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherInput {
    /// The student's feature goes through the teacher projection and the
    /// student's hidden vector through the teacher classifier.
    Serial,
    /// The teacher runs its own full forward pass.
    Independent,
}

impl FromStr for TeacherInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<TeacherInput> {
        match s {
            "serial" => Ok(TeacherInput::Serial),
            "independent" => Ok(TeacherInput::Independent),
            other => Err(Error::config(format!("unknown teacher input '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    NoDst,
    NoAug,
    NoFd,
    NoRd,
    NoDtr,
    NoPd,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoDst,
        Ablation::NoAug,
        Ablation::NoFd,
        Ablation::NoRd,
        Ablation::NoDtr,
        Ablation::NoPd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoDst => "no-dst",
            Ablation::NoAug => "no-aug",
            Ablation::NoFd => "no-fd",
            Ablation::NoRd => "no-rd",
            Ablation::NoDtr => "no-dtr",
            Ablation::NoPd => "no-pd",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Ablation> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub epochs_adapt: usize,
    pub epochs_sckd: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub memory_size: usize,
    pub pseudo_per_relation: usize,
    pub tau: f64,
    pub augment: bool,
    pub augment_cap: usize,
    pub teacher_input: TeacherInput,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub ablations: Vec<Ablation>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            mode: Mode::Sckd,
            epochs_adapt: 20,
            epochs_sckd: 10,
            batch_size: 16,
            grad_accum: 4,
            memory_size: 1,
            pseudo_per_relation: 10,
            tau: 0.95,
            augment: true,
            augment_cap: crate::augment::DEFAULT_CAP,
            teacher_input: TeacherInput::Serial,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            model_dim: 64,
            heads: 4,
            ffn_dim: 128,
            hidden_dim: 64,
            dropout: 0.5,
            ablations: Vec::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean '{value}' for {key}"))),
    }
}

impl RunConfig {
    /// Applies an ablation by zeroing the corresponding weight or switch.
    pub fn ablate(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::NoDst => self.weights.lambda2 = 0.0,
            Ablation::NoAug => self.augment = false,
            Ablation::NoFd => self.weights.alpha = 0.0,
            Ablation::NoRd => self.weights.rd_weight = 0.0,
            Ablation::NoDtr => self.weights.dtr_weight = 0.0,
            Ablation::NoPd => self.weights.gamma = 0.0,
        }
        if !self.ablations.contains(&ablation) {
            self.ablations.push(ablation);
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            model_dim: self.model_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            hidden_dim: self.hidden_dim,
            dropout: self.dropout,
            layer_norm_eps: 1e-5,
            max_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("grad_accum", self.grad_accum),
            ("memory", self.memory_size),
            ("pseudo", self.pseudo_per_relation),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config("tau must lie in (0, 1]"));
        }
        self.weights.validate()?;
        self.adam.validate()?;
        self.encoder_config(2).validate()
    }

    /// Sets one field from its textual key. Returns `Ok(false)` for keys
    /// this struct does not know, so callers can layer their own keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let w = &mut self.weights;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "mode" | "baseline" => self.mode = value.parse()?,
            "epochs_adapt" => self.epochs_adapt = parse(key, value)?,
            "epochs_sckd" => self.epochs_sckd = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "grad_accum" => self.grad_accum = parse(key, value)?,
            "memory" => self.memory_size = parse(key, value)?,
            "pseudo" => self.pseudo_per_relation = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "augment_cap" => self.augment_cap = parse(key, value)?,
            "teacher_input" => self.teacher_input = value.parse()?,
            "alpha" => w.alpha = parse(key, value)?,
            "beta" => w.beta = parse(key, value)?,
            "gamma" => w.gamma = parse(key, value)?,
            "lambda1" => w.lambda1 = parse(key, value)?,
            "lambda2" => w.lambda2 = parse(key, value)?,
            "temp" | "temperature" => w.temperature = parse(key, value)?,
            "rd_weight" => w.rd_weight = parse(key, value)?,
            "dtr_weight" => w.dtr_weight = parse(key, value)?,
            "lr_encoder" => self.adam.lr_encoder = parse(key, value)?,
            "lr_projection" => self.adam.lr_projection = parse(key, value)?,
            "lr_classifier" => self.adam.lr_classifier = parse(key, value)?,
            "model_dim" => self.model_dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "ablate" => {
                for a in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    self.ablate(a.parse()?);
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parses a flat `key = value` file. Blank lines and `#` comments are
/// skipped; later keys override earlier ones.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key = value, got '{line}'"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}
