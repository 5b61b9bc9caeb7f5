//! Plain `key=value` configuration.
//!
//! One assignment per line; blank lines and lines starting with `#` are
//! ignored. Later assignments override earlier ones, which is how CLI flags
//! take precedence over a config file.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sim::FlockingConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                )));
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    /// Overrides entries of `self` with those of `other`.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::Config(format!("`{key}={v}`: {e}"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        s.trim()
                            .parse::<T>()
                            .map_err(|e| Error::Config(format!("`{key}={v}`: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn flocking(&self) -> Result<FlockingConfig> {
        let d = FlockingConfig::default();
        let cfg = FlockingConfig {
            agents: self.get_or("agents", d.agents)?,
            sampling_time: self.get_or("sampling_time", d.sampling_time)?,
            duration: self.get_or("duration", d.duration)?,
            comm_radius: self.get_or("comm_radius", d.comm_radius)?,
            ca_radius: self.get_or("ca_radius", d.ca_radius)?,
            max_accel: self.get_or("max_accel", d.max_accel)?,
            init_velocity_max: self.get_or("init_velocity_max", d.init_velocity_max)?,
            bias_max: self.get_or("bias_max", d.bias_max)?,
            min_init_distance: self.get_or("min_init_distance", d.min_init_distance)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: self.get_or("epochs", d.epochs)?,
            batch_size: self.get_or("batch_size", d.batch_size)?,
            lr: self.get_or("lr", d.lr)?,
            beta1: self.get_or("beta1", d.beta1)?,
            beta2: self.get_or("beta2", d.beta2)?,
            eps: self.get_or("eps", d.eps)?,
            validate_every: self.get_or("validate_every", d.validate_every)?,
            seed: self.get_or("seed", d.seed)?,
            max_loss: self.get_or("max_loss", d.max_loss)?,
            wall_budget: self.get("wall_budget")?.or(d.wall_budget),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses the canonical rendering produced by [`FlockingConfig::canonical`].
pub fn flocking_from_kv(text: &str) -> Result<FlockingConfig> {
    KvConfig::parse(text)?.flocking()
}
