//! Plain `key = value` config files for the tunable structs.
//!
//! One scalar per line, `#` comments and blank lines allowed. Unknown
//! keys are rejected; omitted keys keep their defaults. Works for any
//! flat struct of numbers/bools/strings that implements
//! `Serialize + DeserializeOwned + Default`.

use crate::error::CoreError;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Number, Value};

fn flat_object<T: Serialize>(value: &T) -> Result<Map<String, Value>, CoreError> {
    match serde_json::to_value(value)? {
        Value::Object(map) => {
            for (k, v) in &map {
                match v {
                    Value::Number(_) | Value::Bool(_) | Value::String(_) => {}
                    _ => {
                        return Err(CoreError::Config(format!(
                            "field {k} is not a scalar; key = value form only covers flat structs"
                        )))
                    }
                }
            }
            Ok(map)
        }
        _ => Err(CoreError::Config("config type is not a struct".into())),
    }
}

/// Serialize a flat struct to `key = value` lines (field order, 17
/// significant digits for floats so values round-trip bitwise).
pub fn to_key_values<T: Serialize>(value: &T) -> Result<String, CoreError> {
    let map = flat_object(value)?;
    let mut out = String::new();
    for (k, v) in &map {
        let rendered = match v {
            Value::Number(n) => n.to_string(),
            Value::Bool(b) => b.to_string(),
            Value::String(s) => s.clone(),
            _ => unreachable!(),
        };
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&rendered);
        out.push('\n');
    }
    Ok(out)
}

fn parse_scalar(key: &str, raw: &str, template: &Value) -> Result<Value, CoreError> {
    let fail = |what: &str| {
        CoreError::Config(format!("key {key}: cannot parse {raw:?} as {what}"))
    };
    match template {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| fail("bool")),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Number(n) => {
            if n.is_f64() {
                let f = raw.parse::<f64>().map_err(|_| fail("float"))?;
                Number::from_f64(f)
                    .map(Value::Number)
                    .ok_or_else(|| fail("finite float"))
            } else if n.is_u64() {
                raw.parse::<u64>()
                    .map(|v| Value::Number(v.into()))
                    .map_err(|_| fail("unsigned integer"))
            } else {
                raw.parse::<i64>()
                    .map(|v| Value::Number(v.into()))
                    .map_err(|_| fail("integer"))
            }
        }
        _ => unreachable!(),
    }
}

/// Parse `key = value` text into a struct, starting from its defaults.
/// Unknown keys, repeated keys, and malformed lines are errors.
pub fn from_key_values<T: Serialize + DeserializeOwned + Default>(
    text: &str,
) -> Result<T, CoreError> {
    let mut map = flat_object(&T::default())?;
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, raw) = line.split_once('=').ok_or_else(|| {
            CoreError::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1))
        })?;
        let key = key.trim();
        let raw = raw.trim();
        let template = map
            .get(key)
            .ok_or_else(|| CoreError::Config(format!("unknown key {key:?}")))?
            .clone();
        if !seen.insert(key.to_string()) {
            return Err(CoreError::Config(format!("key {key:?} given twice")));
        }
        map.insert(key.to_string(), parse_scalar(key, raw, &template)?);
    }
    Ok(serde_json::from_value(Value::Object(map))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbt::GbtConfig;
    use crate::pinn::PinnConfig;
    use crate::solver::SolverConfig;
    use crate::PlantConstants;

    fn roundtrip<T: Serialize + DeserializeOwned + Default + PartialEq + std::fmt::Debug>(v: &T) {
        let text = to_key_values(v).unwrap();
        let back: T = from_key_values(&text).unwrap();
        assert_eq!(&back, v);
    }

    #[test]
    fn all_config_structs_round_trip() {
        roundtrip(&PlantConstants::default());
        roundtrip(&SolverConfig::default());
        roundtrip(&PinnConfig::default());
        roundtrip(&GbtConfig::default());
        let tweaked = SolverConfig { rtol: 1.2345678901234567e-7, ..SolverConfig::default() };
        roundtrip(&tweaked);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = from_key_values::<SolverConfig>("rtol = 1e-6\nbogus = 3\n");
        assert!(matches!(err, Err(CoreError::Config(m)) if m.contains("bogus")));
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = from_key_values::<SolverConfig>("rtol = 1e-6\nrtol = 1e-7\n");
        assert!(matches!(err, Err(CoreError::Config(m)) if m.contains("twice")));
    }

    #[test]
    fn type_mismatch_rejected() {
        assert!(from_key_values::<SolverConfig>("max_newton = 1.5\n").is_err());
        assert!(from_key_values::<GbtConfig>("delta_targets = 7\n").is_err());
    }

    #[test]
    fn comments_blanks_and_partial_override() {
        let cfg: SolverConfig =
            from_key_values("# tighter\n\nrtol = 1e-10\n  atol=1e-12\n").unwrap();
        assert_eq!(cfg.rtol, 1e-10);
        assert_eq!(cfg.atol, 1e-12);
        assert_eq!(cfg.dt_max, SolverConfig::default().dt_max);
    }
}
