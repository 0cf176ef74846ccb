//! Flat `key = value` configuration with per-command schemas.
//!
//! Resolution order: schema defaults, then the `--config` file, then
//! `--set key=value` and `--key value` flags. Keys outside the schema are
//! rejected wherever they appear.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use qstitch_core::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

/// Resolved values for one command, in schema order.
#[derive(Debug, Clone)]
pub struct Params {
    schema: &'static [Key],
    values: BTreeMap<&'static str, String>,
}

impl Params {
    pub fn defaults(schema: &'static [Key]) -> Self {
        Params {
            schema,
            values: schema.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let k = self
            .schema
            .iter()
            .find(|k| k.name == name)
            .ok_or_else(|| Error::Config(format!("unknown key '{name}'")))?;
        self.values.insert(k.name, value.trim().to_string());
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_assignment(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{kv}'")))?;
        self.set(k.trim(), v)
    }

    pub fn str(&self, name: &str) -> &str {
        self.values
            .get(name)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key '{name}' is not in the schema"))
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(name);
        raw.parse().map_err(|e| Error::Config(format!("{name} = '{raw}': {e}")))
    }

    pub fn list<T: FromStr>(&self, name: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(name);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| Error::Config(format!("{name} = '{raw}': {e}"))))
            .collect()
    }

    /// A path-valued key; empty means unset.
    pub fn path(&self, name: &str) -> Option<PathBuf> {
        let raw = self.str(name);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn required_path(&self, name: &str) -> Result<PathBuf> {
        self.path(name)
            .ok_or_else(|| Error::Config(format!("'{name}' is required")))
    }

    /// Resolved configuration in the same format it is read from.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in self.schema {
            let _ = writeln!(out, "{} = {}", k.name, self.values[k.name]);
        }
        out
    }

    pub fn as_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.schema
                .iter()
                .map(|k| (k.name.to_string(), self.values[k.name].clone().into()))
                .collect(),
        )
    }
}
