//! Flat `key = value` run configuration. Keys are the field names of [`ModelConfig`] and
//! [`TrainConfig`] plus `precision`; later sources override earlier ones.

use std::collections::BTreeMap;

use s4ecg::model::ModelConfig;
use s4ecg::train::TrainConfig;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub precision: Precision,
}

/// Parses a flat TOML document; nested tables and arrays are rejected.
pub fn parse_flat(text: &str) -> Result<Vec<(String, Value)>, CliError> {
    let table: toml::Table = toml::from_str(text).map_err(|e| CliError::Usage(format!("config file: {e}")))?;
    table.into_iter().map(|(k, v)| Ok((k.clone(), scalar(&k, v)?))).collect()
}

fn scalar(key: &str, v: toml::Value) -> Result<Value, CliError> {
    match v {
        toml::Value::Table(_) | toml::Value::Array(_) => {
            Err(CliError::Usage(format!("config key {key}: only scalar values are allowed")))
        }
        toml::Value::Datetime(d) => Ok(Value::String(d.to_string())),
        other => serde_json::to_value(other).map_err(|e| CliError::Usage(format!("config key {key}: {e}"))),
    }
}

/// `key=value` from the command line; the value is read as a TOML scalar, falling back to
/// a bare string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {s:?}")))?;
    let k = k.trim().to_string();
    let v = v.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {v}")).ok().and_then(|mut t| t.remove("v"));
    let value = match parsed {
        Some(tv) => scalar(&k, tv)?,
        None => Value::String(v.to_string()),
    };
    Ok((k, value))
}

fn object(v: Value) -> serde_json::Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("config structs serialize to objects"),
    }
}

/// Applies `entries` in order on top of the defaults.
pub fn resolve(entries: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let mut model = object(serde_json::to_value(ModelConfig::default()).expect("serializable"));
    let mut train = object(serde_json::to_value(TrainConfig::default()).expect("serializable"));
    let mut precision = Precision::F32;
    for (k, v) in entries {
        if k == "precision" {
            precision = match v.as_str() {
                Some("f32") => Precision::F32,
                Some("f64") => Precision::F64,
                _ => return Err(CliError::Usage(format!("precision must be f32 or f64, got {v}"))),
            };
        } else if model.contains_key(k) {
            model.insert(k.clone(), v.clone());
        } else if train.contains_key(k) {
            train.insert(k.clone(), v.clone());
        } else {
            return Err(CliError::Usage(format!("unknown config key {k:?}")));
        }
    }
    let bad = |what: &str, e: serde_json::Error| CliError::Usage(format!("{what} config: {e}"));
    let model: ModelConfig = serde_json::from_value(Value::Object(model)).map_err(|e| bad("model", e))?;
    let train: TrainConfig = serde_json::from_value(Value::Object(train)).map_err(|e| bad("training", e))?;
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(RunConfig { model, train, precision })
}

impl RunConfig {
    /// Every setting as a sorted flat map, the form hashed into the run manifest.
    pub fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        out.extend(object(serde_json::to_value(&self.model).expect("serializable")));
        out.extend(object(serde_json::to_value(&self.train).expect("serializable")));
        out.insert("precision".into(), serde_json::to_value(self.precision).expect("serializable"));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut e = parse_flat("lr = 0.002\ninput_epochs = 5\nscale = 0.25\n").unwrap();
        e.push(parse_assignment("input_epochs=30").unwrap());
        let c = resolve(&e).unwrap();
        assert_eq!(c.train.lr, 0.002);
        assert_eq!(c.model.input_epochs, 30);
        assert_eq!(c.model.input_size(), 115_200);
        assert_eq!(c.model.scale, 0.25);
    }

    #[test]
    fn unknown_and_nested_keys_are_usage_errors() {
        assert!(matches!(resolve(&parse_flat("learning_rate = 1").unwrap()), Err(CliError::Usage(_))));
        assert!(matches!(parse_flat("[model]\nscale = 1\n"), Err(CliError::Usage(_))));
        assert!(matches!(parse_assignment("lr"), Err(CliError::Usage(_))));
    }

    #[test]
    fn integer_accepted_for_float_field() {
        let c = resolve(&[("dropout".into(), Value::from(0))]).unwrap();
        assert_eq!(c.model.dropout, 0.0);
    }

    #[test]
    fn precision_key() {
        let c = resolve(&[parse_assignment("precision=\"f64\"").unwrap()]).unwrap();
        assert_eq!(c.precision, Precision::F64);
        let c = resolve(&[parse_assignment("precision=f64").unwrap()]).unwrap();
        assert_eq!(c.precision, Precision::F64);
        assert!(resolve(&[parse_assignment("precision=f16").unwrap()]).is_err());
    }
}
