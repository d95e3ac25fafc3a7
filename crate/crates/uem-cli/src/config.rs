//! Run configuration: one TOML file with dotted sections plus `--set`
//! overrides (overrides win). Unknown keys are rejected with their name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use uem_core::datagen::ScenarioConfig;
use uem_core::pipeline::EvalConfig;
use uem_core::trainer::{EncoderConfig, Stage1Config, Stage2Config, TrainConfig};
use uem_core::Error;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub tau: f64,
    pub beta: f64,
    pub encoder: EncoderConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub data: ScenarioConfig,
    pub eval: EvalConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: train.seed,
            batch_size: train.batch_size,
            lr0: train.lr0,
            momentum: train.momentum,
            tau: train.tau,
            beta: train.beta,
            encoder: train.encoder,
            stage1: train.stage1,
            stage2: train.stage2,
            data: ScenarioConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            batch_size: self.batch_size,
            lr0: self.lr0,
            momentum: self.momentum,
            tau: self.tau,
            beta: self.beta,
            encoder: self.encoder.clone(),
            stage1: self.stage1.clone(),
            stage2: self.stage2.clone(),
        }
    }

    /// Scenario config with the run seed threaded through.
    pub fn scenario_config(&self) -> ScenarioConfig {
        let mut s = self.data.clone();
        s.seed = self.seed;
        s
    }
}

/// Load a config file (or defaults when absent), apply `--set key=value`
/// overrides and an optional seed override.
pub fn resolve_config(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<AppConfig, Error> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config {
                key: "config".to_string(),
                msg: format!("{}: {e}", p.display()),
            })?;
            text.parse().map_err(|e| Error::Config {
                key: "config".to_string(),
                msg: format!("{}: {e}", p.display()),
            })?
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };

    for set in sets {
        let (key, raw) = set.split_once('=').ok_or_else(|| Error::Config {
            key: set.clone(),
            msg: "expected key.path=value".to_string(),
        })?;
        apply_override(&mut value, key, raw)?;
    }
    if let Some(s) = seed {
        apply_override(&mut value, "seed", &s.to_string())?;
    }

    let cfg: AppConfig = value.try_into().map_err(|e| {
        let msg = e.to_string();
        Error::Config {
            key: extract_key(&msg),
            msg,
        }
    })?;
    Ok(cfg)
}

fn extract_key(msg: &str) -> String {
    // serde reports `unknown field `foo`` or `invalid type ... for key `a.b``.
    if let Some(start) = msg.find('`') {
        if let Some(end) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + end].to_string();
        }
    }
    "config".to_string()
}

fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<(), Error> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| Error::Config {
            key: key.to_string(),
            msg: format!("`{part}` is not a section"),
        })?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let leaf = parts.last().unwrap();
    let parsed = parse_scalar(raw);
    let table = cur.as_table_mut().ok_or_else(|| Error::Config {
        key: key.to_string(),
        msg: "parent is not a section".to_string(),
    })?;
    table.insert(leaf.to_string(), parsed);
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    // Arrays like [128,64] for encoder.hidden.
    if raw.starts_with('[') {
        if let Ok(v) = raw.parse::<toml::Value>() {
            return v;
        }
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_without_a_file() {
        let cfg = resolve_config(None, &[], None).unwrap();
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.lr0, 2e-4);
        assert_eq!(cfg.tau, 0.07);
        assert_eq!(cfg.beta, 0.99);
    }

    #[test]
    fn set_overrides_win() {
        let cfg = resolve_config(
            None,
            &[
                "stage1.epochs=5".to_string(),
                "data.setting=openset".to_string(),
                "encoder.hidden=[32,16]".to_string(),
            ],
            Some(99),
        )
        .unwrap();
        assert_eq!(cfg.stage1.epochs, 5);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.encoder.hidden, vec![32, 16]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = resolve_config(None, &["stage1.bogus_key=1".to_string()], None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_key"), "message: {msg}");
    }
}
