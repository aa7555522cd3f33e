//! `key=value` configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use idsplat::synth::{PerturbConfig, SynthSpec};
use idsplat::train::TrainConfig;
use idsplat::{Error, Result};

#[derive(Clone, Debug)]
pub struct Config {
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub perturb: PerturbConfig,
    pub threads: Option<usize>,
    pub deterministic: bool,
    pub metrics: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            perturb: PerturbConfig::default(),
            threads: None,
            deterministic: false,
            metrics: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

impl Config {
    /// Applies one setting. `seed` reaches both the generator and training.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let known = match key {
            "seed" => {
                self.train.set(key, value)?;
                self.synth.set(key, value)?;
                self.perturb.seed = parse(key, value)?;
                true
            }
            "threads" => {
                self.threads = Some(parse(key, value)?);
                true
            }
            "deterministic" => {
                self.deterministic = parse(key, value)?;
                true
            }
            "metrics" => {
                self.metrics = Some(PathBuf::from(value.trim()));
                true
            }
            "perturb_position" => {
                self.perturb.position_sigma = parse(key, value)?;
                true
            }
            "perturb_color" => {
                self.perturb.color_sigma = parse(key, value)?;
                true
            }
            "perturb_opacity" => {
                self.perturb.opacity = match value.trim() {
                    "none" => None,
                    v => Some(parse(key, v)?),
                };
                true
            }
            _ => self.train.set(key, value)? || self.synth.set(key, value)?,
        };
        if known {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key '{key}'")))
        }
    }

    /// Applies a `key=value` line.
    pub fn apply(&mut self, line: &str) -> Result<()> {
        match line.split_once('=') {
            Some((k, v)) => self.set(k, v),
            None => Err(Error::Config(format!("expected key=value, got '{line}'"))),
        }
    }

    /// Parses a config file: one `key=value` per line, `#` starts a comment.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply(line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    /// Worker count: one when deterministic.
    pub fn worker_threads(&self) -> Option<usize> {
        if self.deterministic {
            Some(1)
        } else {
            self.threads
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# desk run\nphase1_iters = 10\nn_objects=3 # fewer\n\nseed=7\n").unwrap();
        let mut c = Config::default();
        c.load(&path).unwrap();
        c.apply("lambda_c=0").unwrap();
        assert_eq!(c.train.phase1_iters, 10);
        assert_eq!(c.synth.n_objects, 3);
        assert_eq!((c.train.seed, c.synth.seed, c.perturb.seed), (7, 7, 7));
        assert_eq!(c.train.lambda_c, 0.0);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = Config::default();
        assert!(matches!(c.apply("colour=1"), Err(Error::Config(_))));
        assert!(matches!(c.apply("phase1_iters"), Err(Error::Config(_))));
        assert!(matches!(c.apply("phase1_iters=ten"), Err(Error::Config(_))));
        c.apply("threads=0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn deterministic_forces_one_thread() {
        let mut c = Config::default();
        c.apply("threads=8").unwrap();
        assert_eq!(c.worker_threads(), Some(8));
        c.apply("deterministic=true").unwrap();
        assert_eq!(c.worker_threads(), Some(1));
    }
}
