//! Run configuration: TOML file plus dotted-key overrides.

use std::path::Path;

use depthdiff::eval::EvalOptions;
use depthdiff::train::TrainConfig;
use depthdiff::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
}

impl RunConfig {
    /// Defaults, then the optional file, then each `key=value` override.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let file: Table = toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?;
                let mut base = to_table(&RunConfig::default())?;
                merge(&mut base, file);
                base
            }
            None => to_table(&RunConfig::default())?,
        };
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Usage(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: RunConfig =
            Value::Table(table.clone()).try_into().map_err(|e| Error::Usage(format!("config: {e}")))?;
        let resolved = to_table(&cfg)?;
        for o in overrides {
            let key = o.split_once('=').map_or(o.as_str(), |(k, _)| k.trim());
            if lookup(&resolved, key).is_none() {
                return Err(Error::Usage(format!("unknown config key {key:?}")));
            }
        }
        unknown_keys(&table, &resolved, "")?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Usage(format!("config: {e}")))
    }
}

fn to_table(cfg: &RunConfig) -> Result<Table> {
    Table::try_from(cfg).map_err(|e| Error::Usage(format!("config: {e}")))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("malformed config key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = match cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(Error::Usage(format!("config key {key:?}: {p} is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn lookup<'a>(table: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut v = table.get(parts.next()?)?;
    for p in parts {
        v = v.as_table()?.get(p)?;
    }
    Some(v)
}

/// Keys present in the input that deserialization silently dropped.
fn unknown_keys(input: &Table, resolved: &Table, prefix: &str) -> Result<()> {
    for (k, v) in input {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, resolved.get(k)) {
            (_, None) => return Err(Error::Usage(format!("unknown config key {path:?}"))),
            (Value::Table(a), Some(Value::Table(b))) => unknown_keys(a, b, &path)?,
            _ => {}
        }
    }
    Ok(())
}
