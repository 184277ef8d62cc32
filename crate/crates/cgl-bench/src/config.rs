//! Flat `key = value` config files: one assignment per line, `#` starts
//! a comment, dotted keys namespace the modules (e.g. `trainer.epochs`).

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::orchestrate::BenchResult;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> BenchResult<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected `key = value`, got `{raw}`", i + 1))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(format!("config line {}: empty key", i + 1).into());
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Config { values })
    }

    pub fn load(path: &Path) -> BenchResult<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> BenchResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| format!("config key `{key}`: {e}").into()),
        }
    }
}
