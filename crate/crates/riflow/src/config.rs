//! Run configuration: plain-text `key=value` files.
//!
//! Lines are `key = value` with `#` comments (full-line or trailing) and
//! blank lines ignored. Unknown and duplicate keys are hard errors — a
//! typo'd knob must never silently fall back to its default. Every field
//! has a default, so an empty file (or no file) is a valid configuration.
//!
//! Reports echo the effective configuration as metadata lines and carry a
//! short hash of it, so any CSV can be traced back to the exact settings
//! that produced it.

use std::collections::HashSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// All tunable knobs, with their defaults.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Config {
    /// Optimizer learning rate.
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after each epoch.
    pub lr_decay: f64,
    /// Training epochs.
    pub epochs: usize,
    /// Training batch size.
    pub batch_size: usize,
    /// Gradient-attack iteration count.
    pub attack_iters: usize,
    /// Attack budget: max per-pixel perturbation in integer pixel levels.
    pub attack_epsilon: f64,
    /// Attack step size in pixel levels.
    pub attack_alpha: f64,
    /// Per-component loss ceiling (bits/dim) used by the weighted attack.
    pub loss_bound: f64,
    /// Frobenius penalty coefficient of the regularized training mode.
    pub rho1: f64,
    /// Spectral penalty coefficient of the regularized training mode.
    pub rho2: f64,
    /// Fraction of each batch replaced by attacked samples in hybrid modes.
    pub mixing: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            lr: 1e-3,
            lr_decay: 0.999,
            epochs: 10,
            batch_size: 8,
            attack_iters: 10,
            attack_epsilon: 5.0,
            attack_alpha: 1.0,
            loss_bound: 8.0,
            rho1: 2.0,
            rho2: 0.5,
            mixing: 0.5,
        }
    }
}

impl Config {
    /// Parses a configuration file's text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                detail: format!("line {lineno}: expected key=value, got {line:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    detail: format!("line {lineno}: duplicate key {key}"),
                });
            }
            cfg.set(key, value, lineno)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a configuration file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str, lineno: usize) -> Result<()> {
        fn float(key: &str, value: &str, lineno: usize) -> Result<f64> {
            value.parse().map_err(|_| Error::Config {
                detail: format!("line {lineno}: {key} needs a number, got {value:?}"),
            })
        }
        fn count(key: &str, value: &str, lineno: usize) -> Result<usize> {
            value.parse().map_err(|_| Error::Config {
                detail: format!("line {lineno}: {key} needs a non-negative integer, got {value:?}"),
            })
        }
        match key {
            "lr" => self.lr = float(key, value, lineno)?,
            "lr_decay" => self.lr_decay = float(key, value, lineno)?,
            "epochs" => self.epochs = count(key, value, lineno)?,
            "batch_size" => self.batch_size = count(key, value, lineno)?,
            "attack_iters" => self.attack_iters = count(key, value, lineno)?,
            "attack_epsilon" => self.attack_epsilon = float(key, value, lineno)?,
            "attack_alpha" => self.attack_alpha = float(key, value, lineno)?,
            "loss_bound" => self.loss_bound = float(key, value, lineno)?,
            "rho1" => self.rho1 = float(key, value, lineno)?,
            "rho2" => self.rho2 = float(key, value, lineno)?,
            "mixing" => self.mixing = float(key, value, lineno)?,
            other => {
                return Err(Error::Config {
                    detail: format!("line {lineno}: unknown key {other}"),
                })
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let complain = |cond: bool, msg: &str| {
            if cond {
                Err(Error::Config { detail: msg.to_string() })
            } else {
                Ok(())
            }
        };
        complain(!(self.lr > 0.0 && self.lr.is_finite()), "lr must be positive")?;
        complain(
            !(self.lr_decay > 0.0 && self.lr_decay <= 1.0),
            "lr_decay must lie in (0, 1]",
        )?;
        complain(self.epochs == 0, "epochs must be at least 1")?;
        complain(self.batch_size == 0, "batch_size must be at least 1")?;
        complain(
            !(self.attack_epsilon >= 0.0 && self.attack_epsilon.is_finite()),
            "attack_epsilon must be non-negative",
        )?;
        complain(
            !(self.attack_alpha > 0.0 && self.attack_alpha.is_finite()),
            "attack_alpha must be positive",
        )?;
        complain(
            !(self.loss_bound > 0.0 && self.loss_bound.is_finite()),
            "loss_bound must be positive",
        )?;
        complain(!(self.rho1 >= 0.0 && self.rho1.is_finite()), "rho1 must be non-negative")?;
        complain(!(self.rho2 >= 0.0 && self.rho2.is_finite()), "rho2 must be non-negative")?;
        complain(!(0.0..=1.0).contains(&self.mixing), "mixing must lie in [0, 1]")?;
        Ok(())
    }

    /// The effective configuration as `key=value` lines in declaration
    /// order. Floats use Rust's shortest-roundtrip form, so the lines (and
    /// the hash over them) are canonical.
    pub fn metadata_lines(&self) -> Vec<String> {
        vec![
            format!("lr={}", self.lr),
            format!("lr_decay={}", self.lr_decay),
            format!("epochs={}", self.epochs),
            format!("batch_size={}", self.batch_size),
            format!("attack_iters={}", self.attack_iters),
            format!("attack_epsilon={}", self.attack_epsilon),
            format!("attack_alpha={}", self.attack_alpha),
            format!("loss_bound={}", self.loss_bound),
            format!("rho1={}", self.rho1),
            format!("rho2={}", self.rho2),
            format!("mixing={}", self.mixing),
        ]
    }

    /// Short content hash of the canonical configuration text.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.metadata_lines().join("\n"));
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}
