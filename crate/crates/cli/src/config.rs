//! Pipeline configuration as a flat `key = value` text file.
//!
//! Keys are exactly the long flag names of `embalance run`. `#` starts a
//! comment. Paths are taken verbatim; `batch` lists four paths separated by
//! whitespace; `chunks = auto` means one chunk per worker thread.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use embalance::balance::{DEFAULT_BETA, DEFAULT_TOPK};
use embalance::cluster::{DEFAULT_K, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use embalance::distill::{DEFAULT_ALPHA, DEFAULT_GAMMA, DEFAULT_TAU};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_NEG_RATE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub normalize: bool,
    pub beta: f64,
    pub topk: usize,
    /// `None` = one chunk per worker thread.
    pub chunks: Option<usize>,
    pub k: usize,
    pub iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub tau: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub neg_rate: f64,
    /// student image, student text, teacher image, teacher text
    pub batch: Option<[PathBuf; 4]>,
    pub labels: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: None,
            out_dir: None,
            normalize: false,
            beta: DEFAULT_BETA,
            topk: DEFAULT_TOPK,
            chunks: None,
            k: DEFAULT_K,
            iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            seed: DEFAULT_SEED,
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
            neg_rate: DEFAULT_NEG_RATE,
            batch: None,
            labels: None,
        }
    }
}

fn bad(path: &Path, line: usize, message: impl Into<String>) -> CliError {
    CliError::Parse {
        path: path.into(),
        line,
        message: message.into(),
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses config text; `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> CliResult<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(origin, line_no, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .map_err(|m| bad(origin, line_no, format!("{key}: {m}")))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e: T::Err| e.to_string())
        }
        let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "input" => self.input = opt_path(value),
            "out-dir" => self.out_dir = opt_path(value),
            "normalize" => self.normalize = num(value)?,
            "beta" => self.beta = num(value)?,
            "topk" => self.topk = num(value)?,
            "chunks" => {
                self.chunks = match value {
                    "auto" => None,
                    v => Some(num(v)?),
                }
            }
            "k" => self.k = num(value)?,
            "iters" => self.iters = num(value)?,
            "tol" => self.tol = num(value)?,
            "seed" => self.seed = num(value)?,
            "tau" => self.tau = num(value)?,
            "alpha" => self.alpha = num(value)?,
            "gamma" => self.gamma = num(value)?,
            "neg-rate" => self.neg_rate = num(value)?,
            "batch" => {
                self.batch = if value.is_empty() {
                    None
                } else {
                    let parts: Vec<PathBuf> = value.split_whitespace().map(PathBuf::from).collect();
                    Some(
                        parts
                            .try_into()
                            .map_err(|p: Vec<PathBuf>| format!("expected 4 paths, got {}", p.len()))?,
                    )
                }
            }
            "labels" => self.labels = opt_path(value),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Serializes every field; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let mut s = String::new();
        let _ = writeln!(s, "input = {}", path(&self.input));
        let _ = writeln!(s, "out-dir = {}", path(&self.out_dir));
        let _ = writeln!(s, "normalize = {}", self.normalize);
        let _ = writeln!(s, "beta = {:?}", self.beta);
        let _ = writeln!(s, "topk = {}", self.topk);
        let _ = writeln!(
            s,
            "chunks = {}",
            self.chunks.map_or("auto".to_string(), |c| c.to_string())
        );
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "iters = {}", self.iters);
        let _ = writeln!(s, "tol = {:?}", self.tol);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "tau = {:?}", self.tau);
        let _ = writeln!(s, "alpha = {:?}", self.alpha);
        let _ = writeln!(s, "gamma = {:?}", self.gamma);
        let _ = writeln!(s, "neg-rate = {:?}", self.neg_rate);
        let batch = self.batch.as_ref().map_or(String::new(), |b| {
            b.iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(" ")
        });
        let _ = writeln!(s, "batch = {batch}");
        let _ = writeln!(s, "labels = {}", path(&self.labels));
        s
    }

    /// Checks every numeric field against the preconditions of its stage.
    pub fn validate(&self) -> CliResult<()> {
        let fail = |m: String| Err(CliError::Config(m));
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return fail(format!("beta must be positive, got {}", self.beta));
        }
        if self.topk == 0 {
            return fail("topk must be at least 1".into());
        }
        if self.chunks == Some(0) {
            return fail("chunks must be at least 1".into());
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.iters == 0 {
            return fail("iters must be at least 1".into());
        }
        if !(self.tol >= 0.0) {
            return fail(format!("tol must be non-negative, got {}", self.tol));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.neg_rate > 0.0 && self.neg_rate <= 1.0) {
            return fail(format!("neg-rate must lie in (0, 1], got {}", self.neg_rate));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_hyperparameters() {
        let c = PipelineConfig::default();
        assert_eq!((c.tau, c.alpha, c.gamma, c.beta), (0.07, 0.999, 0.5, 0.07));
    }

    #[test]
    fn text_round_trip() {
        let cfg = PipelineConfig {
            input: Some("data/x.emb".into()),
            out_dir: Some("out".into()),
            normalize: true,
            beta: 0.123456789,
            chunks: Some(3),
            tol: 1e-9,
            seed: 99,
            batch: Some(["a".into(), "b".into(), "c".into(), "d".into()]),
            labels: Some("l.txt".into()),
            ..Default::default()
        };
        let back = PipelineConfig::parse(&cfg.to_text(), Path::new("t")).unwrap();
        assert_eq!(back, cfg);
        let d = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&d.to_text(), Path::new("t")).unwrap(), d);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let p = Path::new("cfg");
        assert!(matches!(
            PipelineConfig::parse("betta = 1", p),
            Err(CliError::Parse { line: 1, .. })
        ));
        assert!(PipelineConfig::parse("# c\nbeta = x", p).is_err());
        assert!(PipelineConfig::parse("batch = a b", p).is_err());
        let cfg = PipelineConfig::parse("alpha = 2", p).unwrap();
        assert!(cfg.validate().is_err());
    }
}
