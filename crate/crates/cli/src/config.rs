//! TOML run configuration: loading, `--override` patches and typed sections.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use toml::{Table, Value};

/// A required key is absent. The message names the dotted key.
#[derive(Debug)]
pub struct MissingKey(pub String);

impl fmt::Display for MissingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing config key `{}`", self.0)
    }
}

impl std::error::Error for MissingKey {}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    text.parse::<Table>()
        .with_context(|| format!("parsing config {}", path.display()))
}

/// Parses the right-hand side of `KEY=VALUE` as a TOML value, falling back
/// to a bare string so `paths.corpus=data/c.jsonl` needs no quoting.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn set(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed config key {key:?}");
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("config key `{}` is not a table", parts[..=i].join(".")),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not KEY=VALUE"))?;
    set(table, key.trim(), parse_value(raw.trim()))
}

pub fn get<'a>(table: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

pub fn require<'a>(table: &'a Table, key: &str) -> Result<&'a Value> {
    get(table, key).ok_or_else(|| MissingKey(key.to_string()).into())
}

/// Deserializes the value at `key`; an absent optional section yields the
/// type's default.
pub fn section<T: DeserializeOwned + Default>(table: &Table, key: &str) -> Result<T> {
    match get(table, key) {
        Some(v) => v.clone().try_into().with_context(|| format!("config section `{key}`")),
        None => Ok(T::default()),
    }
}

pub fn required_section<T: DeserializeOwned>(table: &Table, key: &str) -> Result<T> {
    require(table, key)?
        .clone()
        .try_into()
        .with_context(|| format!("config section `{key}`"))
}

pub fn seed(table: &Table) -> Result<u64> {
    match require(table, "seed")? {
        Value::Integer(s) if *s >= 0 => Ok(*s as u64),
        other => bail!("config key `seed` must be a non-negative integer, got {other}"),
    }
}

/// Resolves `paths.<name>` against `base` unless it is absolute.
pub fn path(table: &Table, name: &str, base: &Path) -> Result<PathBuf> {
    let key = format!("paths.{name}");
    let v = require(table, &key)?;
    let s = v
        .as_str()
        .with_context(|| format!("config key `{key}` must be a string"))?;
    Ok(base.join(s))
}
