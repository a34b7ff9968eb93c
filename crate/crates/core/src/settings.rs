//! Flat `key = value` views of configuration structs, shared by the CLI
//! config parser and checkpoint manifests.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SettingError {
    UnknownKey(String),
    /// The value does not parse as the key's type; carries the expectation.
    Type(String),
}

impl fmt::Display for SettingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SettingError::UnknownKey(k) => write!(f, "unknown key {k:?}"),
            SettingError::Type(m) => f.write_str(m),
        }
    }
}

pub trait Settings {
    /// Sets one field from its text form.
    fn set(&mut self, key: &str, value: &str) -> Result<(), SettingError>;
    /// Every field in a stable order, formatted so `set` reproduces it exactly.
    fn pairs(&self) -> Vec<(String, String)>;
}

pub fn parse<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T, SettingError> {
    value
        .trim()
        .parse()
        .map_err(|_| SettingError::Type(format!("{key}: expected {expected}, found {value:?}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool, SettingError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(SettingError::Type(format!("{key}: expected true/false, found {value:?}"))),
    }
}

pub fn parse_list<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<Vec<T>, SettingError> {
    value.split(',').map(|v| parse(key, v, expected)).collect()
}

pub fn join<T: fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

/// Applies `pairs` in order, failing on the first bad one.
pub fn apply<S: Settings + ?Sized>(target: &mut S, pairs: &[(String, String)]) -> Result<(), SettingError> {
    for (k, v) in pairs {
        target.set(k, v)?;
    }
    Ok(())
}
