//! Flat `key = value` configuration files for training runs. Command-line
//! flags are merged on top of the file, so a config can hold the defaults
//! for a sweep while individual runs override the seed or alpha.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{ModelDims, Variant};
use crate::optim::OptimConfig;
use crate::trainer::{DataSource, TrainConfig};

/// Ordered key/value bag; later inserts win.
#[derive(Debug, Clone, Default)]
pub struct KeyMap {
    entries: BTreeMap<String, String>,
}

impl KeyMap {
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Overlay `other` on top of this map.
    pub fn merge(&mut self, other: &KeyMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn parse_str(text: &str) -> Result<KeyMap> {
        let mut map = KeyMap::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            map.set(key, value.trim());
        }
        Ok(map)
    }

    pub fn parse_file(path: &Path) -> Result<KeyMap> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    fn req(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    fn parse_num<T: std::str::FromStr>(&self, key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            Some(v) => self.parse_num(key, v),
            None => Ok(default),
        }
    }

    fn opt_num<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            Some(v) => Ok(Some(self.parse_num(key, v)?)),
            None => Ok(None),
        }
    }
}

/// Everything a `train` invocation needs: the trainer config plus the TopK
/// switch when `variant = topk`.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// set when the run trains the TopK baseline instead of a bilinear model
    pub topk_k: Option<usize>,
}

pub fn build_run_config(map: &KeyMap) -> Result<RunConfig> {
    let variant_name = map.get("variant").unwrap_or("vanilla");
    let topk = variant_name == "topk";
    let variant = if topk { Variant::Vanilla } else { Variant::parse(variant_name)? };

    let d_in: usize = map.parse_num("d_in", map.req("d_in")?)?;
    let d_lat: usize = map.parse_num("d_lat", map.req("d_lat")?)?;
    let d_mix: Option<usize> = map.opt_num("d_mix")?;
    if variant.has_mixer() && d_mix.is_none() {
        return Err(Error::Config(format!("variant '{variant_name}' needs d_mix")));
    }
    let dims = ModelDims::new(d_in, d_lat, if variant.has_mixer() { d_mix } else { None })?;

    let topk_k = if topk {
        Some(map.num("k", 50usize)?)
    } else {
        None
    };

    let optim = OptimConfig {
        lr: map.num("lr", 0.01)?,
        steps: map.num("steps", 1024)?,
        warmup_frac: map.num("warmup_frac", 0.5)?,
        alpha_warmup_steps: map.num("alpha_warmup", 256)?,
        ns_iters: map.num("ns_iters", 5)?,
    };

    let source = match (map.get("data"), map.get("synthetic")) {
        (Some(_), Some(_)) => {
            return Err(Error::Config("set either 'data' or 'synthetic', not both".into()))
        }
        (Some(path), None) => DataSource::Dump(PathBuf::from(path)),
        (None, Some(kind)) => {
            let subspace = match map.get("subspace") {
                Some(list) if !list.trim().is_empty() => list
                    .split(',')
                    .map(|s| map.parse_num::<usize>("subspace", s.trim()))
                    .collect::<Result<Vec<_>>>()?,
                _ => vec![],
            };
            let spec = SyntheticSpec {
                kind: SyntheticKind::parse(kind)?,
                d_in,
                n_features: map.num("n_features", d_in)?,
                subspace,
                sparsity: map.num("sparsity", 0.1)?,
                noise: map.num("noise", 0.01)?,
                seed: map.num("data_seed", 0u64)?,
            };
            DataSource::Synthetic(spec, map.num("n_samples", 16384usize)?)
        }
        (None, None) => {
            return Err(Error::Config("missing data source: set 'data' or 'synthetic'".into()))
        }
    };

    let train = TrainConfig {
        dims,
        variant,
        alpha_target: map.num("alpha", 0.1)?,
        optim,
        source,
        batch_size: map.num("batch_size", 256)?,
        log_every: map.num("log_every", 32)?,
        checkpoint: map.get("checkpoint").map(PathBuf::from),
        seed: map.num("seed", 0u64)?,
    };
    train.validate()?;
    Ok(RunConfig { train, topk_k })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_key_values_with_comments() {
        let map = KeyMap::parse_str(
            "# a comment\nvariant = ordered\nd_in = 8\nd_lat= 16 # trailing\n\nsynthetic = superposed_sparse\nn_samples = 2048\n",
        )
        .unwrap();
        assert_eq!(map.get("variant"), Some("ordered"));
        assert_eq!(map.get("d_lat"), Some("16"));
        let run = build_run_config(&map).unwrap();
        assert_eq!(run.train.variant, Variant::Ordered);
        assert_eq!(run.train.dims.d_lat, 16);
        assert!(run.topk_k.is_none());
    }

    #[test]
    fn flags_override_file() {
        let mut file = KeyMap::parse_str("d_in = 8\nd_lat = 16\nsynthetic = noise\nalpha = 0.1\nn_samples = 2048").unwrap();
        let mut flags = KeyMap::default();
        flags.set("alpha", "0.7");
        file.merge(&flags);
        let run = build_run_config(&file).unwrap();
        assert_eq!(run.train.alpha_target, 0.7);
    }

    #[test]
    fn topk_variant_sets_k() {
        let map = KeyMap::parse_str(
            "variant = topk\nk = 12\nd_in = 8\nd_lat = 32\nsynthetic = noise\nn_samples = 2048",
        )
        .unwrap();
        let run = build_run_config(&map).unwrap();
        assert_eq!(run.topk_k, Some(12));
    }

    #[test]
    fn rejects_malformed_lines_and_missing_keys() {
        assert!(KeyMap::parse_str("just words").is_err());
        let map = KeyMap::parse_str("d_in = 8\nd_lat = 16").unwrap();
        let err = build_run_config(&map).unwrap_err();
        assert!(err.to_string().contains("data"), "{err}");
    }

    #[test]
    fn mixer_variant_requires_d_mix() {
        let map = KeyMap::parse_str(
            "variant = mixed\nd_in = 8\nd_lat = 16\nsynthetic = noise\nn_samples = 2048",
        )
        .unwrap();
        assert!(build_run_config(&map).is_err());
        let map = KeyMap::parse_str(
            "variant = mixed\nd_mix = 8\nd_in = 8\nd_lat = 16\nsynthetic = noise\nn_samples = 2048",
        )
        .unwrap();
        assert!(build_run_config(&map).is_ok());
    }
}
