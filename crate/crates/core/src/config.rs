//! Layered TOML configuration: defaults < file < environment < flags.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Overrides `data_root` of the training config.
pub const DATA_ROOT_ENV: &str = "KBPN_DATA_ROOT";

/// One `key.path=value` assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl Override {
    pub fn new(path: &str, value: Value) -> Self {
        Self { path: path.split('.').map(str::to_owned).collect(), value }
    }

    /// Parses `a.b=v`; `v` is read as a TOML value, else as a bare string.
    pub fn parse(text: &str) -> Result<Self> {
        let (key, raw) = text.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {text:?}")))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::Config(format!("bad key in {text:?}")));
        }
        let raw = raw.trim();
        let value = toml::from_str::<Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_owned()));
        Ok(Self::new(key, value))
    }
}

/// Recursively overlays `over` onto `base`; tables merge, other values replace.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply(table: &mut Table, ov: &Override) -> Result<()> {
    let (last, parents) = ov.path.split_last().ok_or_else(|| Error::Config("empty key".into()))?;
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("{} is not a table", ov.path.join("."))))?;
    }
    cur.insert(last.clone(), ov.value.clone());
    Ok(())
}

pub fn to_table<T: Serialize>(value: &T) -> Result<Table> {
    Table::try_from(value).map_err(|e| Error::Config(e.to_string()))
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Defaults, then `file`, then `overrides` in order. Unknown keys fail in
/// the typed decode.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[Override]) -> Result<T> {
    let mut table = to_table(&T::default())?;
    if let Some(path) = file {
        merge(&mut table, read_table(path)?);
    }
    for ov in overrides {
        apply(&mut table, ov)?;
    }
    Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

/// The environment layer for training configs.
pub fn env_overrides() -> Vec<Override> {
    std::env::var_os(DATA_ROOT_ENV)
        .map(|v| vec![Override::new("data_root", Value::String(PathBuf::from(v).to_string_lossy().into_owned()))])
        .unwrap_or_default()
}

/// The resolved snapshot printed on every run.
pub fn render<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(e.to_string()))
}
