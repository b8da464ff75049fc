//! Config files are flat TOML tables; command-line flags are merged into the
//! table before it is validated, so flags always win.

use std::path::Path;

use dgp_core::{Error, Result};
use serde::de::DeserializeOwned;
use toml::{Table, Value};

pub fn load_table(path: Option<&Path>) -> Result<Table> {
    let Some(path) = path else {
        return Ok(Table::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim_end())))
}

/// `key=value`, with the value read as a TOML literal and falling back to a
/// bare string (`--set criterion=imse`).
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{s}'")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("--set expects key=value, got '{s}'")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

pub struct Overrides {
    table: Table,
}

impl Overrides {
    pub fn new(table: Table) -> Self {
        Self { table }
    }

    pub fn set(&mut self, key: &str, value: Option<impl Into<Value>>) -> &mut Self {
        if let Some(v) = value {
            self.table.insert(key.to_string(), v.into());
        }
        self
    }

    pub fn assignments(&mut self, items: &[String]) -> Result<&mut Self> {
        for item in items {
            let (k, v) = parse_assignment(item)?;
            self.table.insert(k, v);
        }
        Ok(self)
    }

    pub fn into_config<T: DeserializeOwned>(self) -> Result<T> {
        Value::Table(self.table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim_end().to_string()))
    }
}
