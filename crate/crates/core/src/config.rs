//! Flat `key = value` configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Document-encoder shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub conv_window: usize,
    pub conv_groups: usize,
    pub dropout: f64,
    pub layers: usize,
    pub ff_dim: usize,
}

impl AttentionConfig {
    pub fn d_key(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.conv_groups == 0 || !self.model_dim.is_multiple_of(self.conv_groups) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by conv_groups {}",
                self.model_dim, self.conv_groups
            )));
        }
        if self.conv_window.is_multiple_of(2) {
            return Err(Error::Config(format!("conv_window {} must be odd", self.conv_window)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Every tunable of the model, trainer and pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub embedding_dim: usize,
    pub heads: usize,
    pub conv_window: usize,
    pub conv_groups: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub kernels: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub top_windows: usize,
    pub max_query_terms: usize,
    pub max_doc_terms: usize,
    pub max_extra_terms: usize,
    pub min_df: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub candidates_depth: usize,
    pub bn_momentum: f64,
    pub calibration_batches: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            embedding_dim: 256,
            heads: 32,
            conv_window: 31,
            conv_groups: 32,
            layers: 2,
            ff_dim: 256,
            dropout: 0.2,
            kernels: 10,
            pool_window: 300,
            pool_stride: 100,
            top_windows: 3,
            max_query_terms: 20,
            max_doc_terms: 4000,
            max_extra_terms: 2000,
            min_df: 2,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            grad_accum: 1,
            steps: 1000,
            checkpoint_every: 0,
            candidates_depth: 100,
            bn_momentum: 0.1,
            calibration_batches: 4,
            seed: 42,
        }
    }
}

macro_rules! config_keys {
    ($m:ident) => {
        $m!(
            embedding_dim,
            heads,
            conv_window,
            conv_groups,
            layers,
            ff_dim,
            dropout,
            kernels,
            pool_window,
            pool_stride,
            top_windows,
            max_query_terms,
            max_doc_terms,
            max_extra_terms,
            min_df,
            learning_rate,
            adam_beta1,
            adam_beta2,
            adam_eps,
            batch_size,
            grad_accum,
            steps,
            checkpoint_every,
            candidates_depth,
            bn_momentum,
            calibration_batches,
            seed
        )
    };
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl Config {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.embedding_dim,
            heads: self.heads,
            conv_window: self.conv_window,
            conv_groups: self.conv_groups,
            dropout: self.dropout,
            layers: self.layers,
            ff_dim: self.ff_dim,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! set_match {
            ($($k:ident),*) => {
                match key {
                    $(stringify!($k) => self.$k = parse_value(key, value)?,)*
                    other => return Err(Error::Config(format!("unknown key `{other}`"))),
                }
            };
        }
        config_keys!(set_match);
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; parses back to an identical config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! write_all {
            ($($k:ident),*) => {
                $( let _ = writeln!(out, "{} = {}", stringify!($k), self.$k); )*
            };
        }
        config_keys!(write_all);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.kernels < 2 {
            return Err(Error::Config("need at least 2 kernels".into()));
        }
        if self.pool_stride == 0 || self.pool_window < self.pool_stride {
            return Err(Error::Config(format!(
                "pool window {} / stride {} must satisfy window >= stride >= 1",
                self.pool_window, self.pool_stride
            )));
        }
        if self.top_windows == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config(
                "top_windows, batch_size and grad_accum must be positive".into(),
            ));
        }
        if self.max_query_terms == 0 || self.max_doc_terms == 0 {
            return Err(Error::Config("truncation lengths must be positive".into()));
        }
        Ok(())
    }
}
