//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are skipped. Every key may appear
//! at most once and unknown keys are rejected. Errors carry the 1-based line
//! and column of the offending token.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dsclap::data::Task;
use dsclap::training::{FreezeMask, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: {}", self.line, self.column, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Optional overrides for every [`TrainConfig`] field.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub hard_negatives: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub encoder_lr_scale: Option<f64>,
}

impl TrainOverrides {
    /// Fields set in `other` win.
    pub fn merge(&mut self, other: TrainOverrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            learning_rate,
            batch_size,
            epochs,
            lambda,
            gamma,
            hard_negatives,
            seeds,
            weight_decay,
            beta1,
            beta2,
            epsilon,
            encoder_lr_scale
        );
    }

    pub fn apply(&self, base: TrainConfig) -> TrainConfig {
        let mut c = base;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = v.clone(); } )* };
        }
        set!(
            learning_rate,
            batch_size,
            epochs,
            lambda,
            gamma,
            hard_negatives,
            seeds,
            weight_decay,
            beta1,
            beta2,
            epsilon,
            encoder_lr_scale
        );
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainOverrides,
    pub data: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub task: Option<Task>,
    pub freeze: Option<FreezeMask>,
    pub cer: Option<f64>,
    pub sizes: Option<Vec<usize>>,
    pub parallel: Option<bool>,
}

pub const KEYS: &[&str] = &[
    "learning_rate",
    "batch_size",
    "epochs",
    "lambda",
    "gamma",
    "hard_negatives",
    "seeds",
    "weight_decay",
    "beta1",
    "beta2",
    "epsilon",
    "encoder_lr_scale",
    "data",
    "train",
    "test",
    "checkpoint",
    "out",
    "task",
    "freeze",
    "cer",
    "sizes",
    "parallel",
];

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| anyhow::Error::new(e).context(format!("in config {}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let indent = raw.len() - raw.trim_start().len();
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let err = |column: usize, message: String| ConfigError { line, column, message };
            let Some(eq) = raw.find('=') else {
                return Err(err(indent + 1, "expected `key = value`".into()));
            };
            let key = raw[..eq].trim();
            if key.is_empty() {
                return Err(err(indent + 1, "missing key before `=`".into()));
            }
            let after = &raw[eq + 1..];
            let value = after.trim();
            let value_col = eq + 2 + (after.len() - after.trim_start().len());
            let Some(&known) = KEYS.iter().find(|&&k| k == key) else {
                return Err(err(indent + 1, format!("unknown key `{key}`")));
            };
            if seen.contains(&known) {
                return Err(err(indent + 1, format!("duplicate key `{key}`")));
            }
            seen.push(known);
            if value.is_empty() {
                return Err(err(value_col, format!("missing value for `{key}`")));
            }
            cfg.set(known, value).map_err(|m| err(value_col, m))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "learning_rate" => t.learning_rate = Some(num(key, value)?),
            "batch_size" => t.batch_size = Some(num(key, value)?),
            "epochs" => t.epochs = Some(num(key, value)?),
            "lambda" => t.lambda = Some(num(key, value)?),
            "gamma" => t.gamma = Some(num(key, value)?),
            "hard_negatives" => t.hard_negatives = Some(num(key, value)?),
            "seeds" => t.seeds = Some(list(key, value)?),
            "weight_decay" => t.weight_decay = Some(num(key, value)?),
            "beta1" => t.beta1 = Some(num(key, value)?),
            "beta2" => t.beta2 = Some(num(key, value)?),
            "epsilon" => t.epsilon = Some(num(key, value)?),
            "encoder_lr_scale" => t.encoder_lr_scale = Some(num(key, value)?),
            "data" => self.data = Some(value.into()),
            "train" => self.train_data = Some(value.into()),
            "test" => self.test_data = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "task" => self.task = Some(value.parse()?),
            "freeze" => self.freeze = Some(parse_freeze(value)?),
            "cer" => self.cer = Some(num(key, value)?),
            "sizes" => self.sizes = Some(list(key, value)?),
            "parallel" => self.parallel = Some(num(key, value)?),
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

/// Comma-separated list, e.g. `1, 12, 123`.
pub fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    let items = value
        .split(',')
        .map(|v| num(key, v.trim()))
        .collect::<Result<Vec<T>, _>>()?;
    if items.is_empty() {
        return Err(format!("`{key}` needs at least one value"));
    }
    Ok(items)
}

/// Names which encoders stay fixed: `none`, `audio`, `text` or `both`.
pub fn parse_freeze(value: &str) -> Result<FreezeMask, String> {
    match value {
        "none" => Ok(FreezeMask::TRAIN_ALL),
        "audio" => Ok(FreezeMask::new(false, true)),
        "text" => Ok(FreezeMask::new(true, false)),
        "both" => Ok(FreezeMask::FREEZE_ALL),
        other => Err(format!("unknown freeze mode `{other}` (expected none, audio, text or both)")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_key() {
        let text = "\
# pretraining run
learning_rate = 0.001
batch_size = 8
epochs = 2
lambda = 0.4
gamma = 0.6
hard_negatives = 2
seeds = 1, 2,3
weight_decay = 0
beta1 = 0.8
beta2 = 0.99
epsilon = 1e-6
encoder_lr_scale = 0.5
data = a.ds
train = b.ds
test = c.ds
checkpoint = m.dsck
out = runs/x
task = mcic
freeze = audio
cer = 0.187
sizes = 100,200
parallel = true
";
        let c = RunConfig::parse(text).unwrap();
        let t = c.train.apply(TrainConfig::desk());
        assert_eq!(t.learning_rate, 0.001);
        assert_eq!(t.seeds, vec![1, 2, 3]);
        assert_eq!(t.encoder_lr_scale, 0.5);
        assert_eq!(c.task, Some(Task::Mcic));
        assert_eq!(c.freeze, Some(FreezeMask::new(false, true)));
        assert_eq!(c.sizes, Some(vec![100, 200]));
        assert_eq!(c.parallel, Some(true));
        assert_eq!(c.out.as_deref(), Some(Path::new("runs/x")));
    }

    #[test]
    fn unknown_key_reports_position() {
        let e = RunConfig::parse("epochs = 1\n\n  temperature = 0.07\n").unwrap_err();
        assert_eq!((e.line, e.column), (3, 3));
        assert!(e.message.contains("unknown key `temperature`"));
    }

    #[test]
    fn bad_value_points_at_value() {
        let e = RunConfig::parse("epochs =  many\n").unwrap_err();
        assert_eq!((e.line, e.column), (1, 11));
        let e = RunConfig::parse("task = asr\n").unwrap_err();
        assert_eq!((e.line, e.column), (1, 8));
    }

    #[test]
    fn rejects_duplicates_and_missing_equals() {
        assert_eq!(RunConfig::parse("epochs = 1\nepochs = 2\n").unwrap_err().line, 2);
        let e = RunConfig::parse("epochs 1\n").unwrap_err();
        assert_eq!((e.line, e.column), (1, 1));
    }

    #[test]
    fn merge_prefers_later_values() {
        let mut a = RunConfig::parse("epochs = 1\nlambda = 0.2\n").unwrap().train;
        a.merge(TrainOverrides {
            epochs: Some(7),
            ..Default::default()
        });
        assert_eq!(a.epochs, Some(7));
        assert_eq!(a.lambda, Some(0.2));
    }
}
