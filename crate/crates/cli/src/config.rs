//! Flat `key = value` run configuration with dotted keys.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Every accepted key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("run.wall_time", "false"),
    ("task.kind", "denoise"),
    ("task.size", "32"),
    ("task.n_train", "256"),
    ("task.n_eval", "32"),
    ("task.blur_sigma", "3"),
    ("task.blur_noise", "0.01"),
    ("task.rasters", ""),
    ("model.kind", "convstack"),
    ("model.channels", ""),
    ("model.zero_final", "true"),
    ("mge.levels", "4"),
    ("train.strategy", "multiscale"),
    ("train.n1", "16"),
    ("train.iters", "2000"),
    ("train.schedule", ""),
    ("train.optimizer", "adam"),
    ("train.lr", "0.0005"),
    ("train.lr_schedule", "cosine"),
    ("train.eval_every", "100"),
    ("train.metric", "mse"),
    ("train.reset_optimizer", "true"),
    ("train.probe_size", "16"),
    ("train.dry_run", "false"),
    ("verify.suite", "all"),
    ("example1.n", "256"),
    ("example1.sigmas", "0,0.1,0.5,1"),
    ("example1.levels", "5"),
    ("coarsen_crop.sizes", "128,64,32"),
    ("coarsen_crop.n_samples", "8"),
    ("coarsen_crop.crop_fraction", "0.25"),
    ("coarsen_crop.crop_draws", "16"),
    ("variance.size", "32"),
    ("variance.n_data", "512"),
    ("variance.batch", "4"),
    ("variance.repeats", "128"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.into();
                Ok(())
            }
            None => bail!("unknown config key {key:?}"),
        }
    }

    /// Applies a config file on top of the current values.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("{key} is not a known key"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| anyhow!("bad value {raw:?} for {key}: {e}"))
    }

    /// Comma-separated list; empty means none.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',').map(|s| s.trim().parse().map_err(|e| anyhow!("bad value {raw:?} for {key}: {e}"))).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# effective configuration; pass back with --config to rerun\n");
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_comments() {
        let mut c = Config::default();
        c.merge_text("# header\ntrain.lr = 0.01  # tuned\n\nmge.levels=3\n").unwrap();
        assert_eq!(c.get::<f64>("train.lr").unwrap(), 0.01);
        assert_eq!(c.get::<usize>("mge.levels").unwrap(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = Config::default();
        let err = c.merge_text("train.lrr = 1\n").unwrap_err();
        assert!(format!("{err:#}").contains("train.lrr"));
        assert!(c.merge_text("no equals sign\n").is_err());
    }

    #[test]
    fn effective_text_round_trips() {
        let mut c = Config::default();
        c.set("train.schedule", "4,3,2,1").unwrap();
        let mut d = Config::default();
        d.merge_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn lists_parse() {
        let c = Config::default();
        assert_eq!(c.list::<usize>("coarsen_crop.sizes").unwrap(), vec![128, 64, 32]);
        assert!(c.list::<u64>("train.schedule").unwrap().is_empty());
        assert!(c.get::<usize>("example1.sigmas").is_err());
    }
}
