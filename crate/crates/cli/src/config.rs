//! Flat `key=value` run configuration. Later sources override earlier ones:
//! defaults, then the config file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use fss::encoder::EncoderConfig;
use fss::mask::BoundingBox;
use fss::patterns::PatternTag;
use fss::training::TrainConfig;
use fss::{FssError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Stub,
    /// Tensor archive in the projection-encoder layout.
    Adapter(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorKind {
    Model,
    Oracle,
}

/// Evaluation target: one pattern, or every pattern the checkpoint's group serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatternChoice {
    One(PatternTag),
    Group,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub fold: usize,
    pub pattern: PatternChoice,
    pub k: usize,
    pub encoder: EncoderKind,
    pub encoder_seed: u64,
    pub predictor: PredictorKind,
    pub output: Option<PathBuf>,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub query: Option<PathBuf>,
    pub support_image: Option<PathBuf>,
    pub support_mask: Option<PathBuf>,
    pub support_box: Option<BoundingBox>,
    pub class_name: Option<String>,
    pub overlay: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            dataset: None,
            checkpoint: None,
            fold: 0,
            pattern: PatternChoice::Group,
            k: 1,
            encoder: EncoderKind::Stub,
            encoder_seed: EncoderConfig::default().seed,
            predictor: PredictorKind::Model,
            output: None,
            synth_classes: 20,
            synth_per_class: 12,
            query: None,
            support_image: None,
            support_mask: None,
            support_box: None,
            class_name: None,
            overlay: None,
        }
    }
}

fn invalid(key: &str, value: &str) -> FssError {
    FssError::Config(format!("invalid value `{value}` for `{key}`"))
}

fn num<X: std::str::FromStr>(key: &str, value: &str) -> Result<X> {
    value.parse().map_err(|_| invalid(key, value))
}

fn parse_box(value: &str) -> Result<BoundingBox> {
    let v: Vec<usize> = value.split(',').map(|s| num("support_box", s.trim())).collect::<Result<_>>()?;
    match v[..] {
        [x_min, y_min, x_max, y_max] => Ok(BoundingBox { x_min, y_min, x_max, y_max }),
        _ => Err(invalid("support_box", value)),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let path = || Some(PathBuf::from(value));
        match key {
            "dataset" => self.dataset = path(),
            "checkpoint" => self.checkpoint = path(),
            "fold" => self.fold = num(key, value)?,
            "pattern" => {
                self.pattern = match value {
                    "all" => PatternChoice::Group,
                    _ => PatternChoice::One(value.parse().map_err(|e: FssError| FssError::Config(e.to_string()))?),
                }
            }
            "k" => self.k = num(key, value)?,
            "encoder" => {
                self.encoder = match value {
                    "stub" => EncoderKind::Stub,
                    _ => match value.strip_prefix("adapter:") {
                        Some(p) if !p.is_empty() => EncoderKind::Adapter(PathBuf::from(p)),
                        _ => return Err(invalid(key, value)),
                    },
                }
            }
            "encoder_seed" => self.encoder_seed = num(key, value)?,
            "predictor" => {
                self.predictor = match value {
                    "model" => PredictorKind::Model,
                    "oracle" => PredictorKind::Oracle,
                    _ => return Err(invalid(key, value)),
                }
            }
            "output" => self.output = path(),
            "synth_classes" => self.synth_classes = num(key, value)?,
            "synth_per_class" => self.synth_per_class = num(key, value)?,
            "query" => self.query = path(),
            "support_image" => self.support_image = path(),
            "support_mask" => self.support_mask = path(),
            "support_box" => self.support_box = Some(parse_box(value)?),
            "class_name" => self.class_name = Some(value.to_string()),
            "overlay" => self.overlay = path(),
            _ => {
                if !self.train.set(key, value)? {
                    return Err(FssError::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FssError::Config(format!("{origin}:{}: expected key=value", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| FssError::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| FssError::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(FssError::Config("k must be at least 1".into()));
        }
        if self.fold >= self.train.n_folds {
            return Err(FssError::Config(format!("fold {} out of range for {} folds", self.fold, self.train.n_folds)));
        }
        self.train.validate()
    }

    /// Resolved configuration in the file format.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<String> = self.train.entries().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        let opt = |k: &str, p: &Option<PathBuf>| p.as_ref().map(|p| format!("{k}={}", p.display()));
        lines.extend(opt("dataset", &self.dataset));
        lines.extend(opt("checkpoint", &self.checkpoint));
        lines.push(format!("fold={}", self.fold));
        lines.push(format!(
            "pattern={}",
            match self.pattern {
                PatternChoice::One(p) => p.to_string(),
                PatternChoice::Group => "all".into(),
            }
        ));
        lines.push(format!("k={}", self.k));
        lines.push(format!(
            "encoder={}",
            match &self.encoder {
                EncoderKind::Stub => "stub".into(),
                EncoderKind::Adapter(p) => format!("adapter:{}", p.display()),
            }
        ));
        lines.push(format!("encoder_seed={}", self.encoder_seed));
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_parsing() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nlearning_rate = 0.001\nfold=2\npattern=class_box\nencoder=adapter:/tmp/w.fsa\n", "f").unwrap();
        c.set("fold", "1").unwrap();
        assert_eq!(c.fold, 1);
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!(c.pattern, PatternChoice::One(PatternTag::ClassBox));
        assert_eq!(c.encoder, EncoderKind::Adapter(PathBuf::from("/tmp/w.fsa")));
        c.set("support_box", "1, 2, 5, 6").unwrap();
        assert_eq!(c.support_box, Some(BoundingBox { x_min: 1, y_min: 2, x_max: 5, y_max: 6 }));
        assert!(c.set("bogus", "1").is_err());
        assert!(c.set("pattern", "points").is_err());
        assert!(c.apply_text("fold\n", "f").is_err());
        c.set("k", "0").unwrap();
        assert!(c.validate().is_err());
    }
}
