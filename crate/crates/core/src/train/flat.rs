//! Flat dotted-key config files (`section.key = value`, TOML syntax).

use std::collections::BTreeMap;

use toml::Value;

use crate::error::{Error, Result};

/// Parses `text` and flattens nested tables into dotted keys.
pub fn parse(text: &str) -> Result<BTreeMap<String, Value>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut out = BTreeMap::new();
    flatten("", Value::Table(table), &mut out);
    Ok(out)
}

fn flatten(prefix: &str, v: Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        v => {
            out.insert(prefix.to_string(), v);
        }
    }
}

/// Writes `key = value` lines in the given order.
pub fn render(entries: &[(&str, Value)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v.to_string());
        s.push('\n');
    }
    s
}

/// Typed reads with key-named errors.
pub fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(type_err(key, "a number", v)),
    }
}

pub fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(type_err(key, "a non-negative integer", v)),
    }
}

pub fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(type_err(key, "a non-negative integer", v)),
    }
}

pub fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| type_err(key, "true or false", v))
}

pub fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| type_err(key, "a string", v))
}

pub fn as_strings(key: &str, v: &Value) -> Result<Vec<String>> {
    match v {
        Value::String(s) => Ok(vec![s.clone()]),
        Value::Array(a) => a.iter().map(|x| as_str(key, x).map(str::to_string)).collect(),
        _ => Err(type_err(key, "a string or list of strings", v)),
    }
}

pub fn as_usizes(key: &str, v: &Value) -> Result<Vec<usize>> {
    match v {
        Value::Array(a) => a.iter().map(|x| as_usize(key, x)).collect(),
        _ => Err(type_err(key, "a list of integers", v)),
    }
}

fn type_err(key: &str, want: &str, got: &Value) -> Error {
    Error::Config(format!("{key}: expected {want}, got {got}"))
}

pub fn float(v: f64) -> Value {
    Value::Float(v)
}

pub fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}
