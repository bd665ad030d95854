//! Canonical JSON: sorted keys, two-space indent, every float printed with
//! 17 significant digits so values survive a round trip bit for bit.
//! Artifacts carry a `format` header naming their schema and version.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

pub const SCENE: &str = "scene/1";
pub const LABELS: &str = "labels/1";
pub const BA: &str = "ba/1";

pub fn to_string<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("artifact types serialize to JSON");
    let mut out = String::new();
    write_value(&mut out, &v, 0);
    out.push('\n');
    out
}

fn write_value(out: &mut String, v: &Value, depth: usize) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_u64() {
                write!(out, "{i}").unwrap();
            } else if let Some(i) = n.as_i64() {
                write!(out, "{i}").unwrap();
            } else {
                write!(out, "{:.16e}", n.as_f64().unwrap()).unwrap();
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).unwrap()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            // flat arrays of scalars stay on one line
            if items.iter().all(|x| !x.is_array() && !x.is_object()) {
                out.push('[');
                for (i, x) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_value(out, x, depth);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (i, x) in items.iter().enumerate() {
                indent(out, depth + 1);
                write_value(out, x, depth + 1);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            indent(out, depth);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                indent(out, depth + 1);
                out.push_str(&serde_json::to_string(k).unwrap());
                out.push_str(": ");
                write_value(out, &map[*k], depth + 1);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            indent(out, depth);
            out.push('}');
        }
    }
}

fn indent(out: &mut String, depth: usize) {
    for _ in 0..depth {
        out.push_str("  ");
    }
}

/// `{"format": format, key: value}`.
pub fn with_header<T: Serialize>(format: &str, key: &str, value: &T) -> String {
    let mut m = Map::new();
    m.insert("format".into(), Value::String(format.into()));
    m.insert(key.into(), serde_json::to_value(value).expect("artifact types serialize to JSON"));
    to_string(&Value::Object(m))
}

pub fn write<T: Serialize>(path: &Path, format: &str, key: &str, value: &T) -> Result<()> {
    write_text(path, &with_header(format, key, value))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads the `key` section of an artifact, checking its format header.
pub fn read<T: DeserializeOwned>(path: &Path, format: &str, key: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text, format, key).map_err(|message| CliError::Parse {
        path: path.to_path_buf(),
        message,
    })
}

pub fn parse<T: DeserializeOwned>(text: &str, format: &str, key: &str) -> std::result::Result<T, String> {
    let mut v: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let found = v.get("format").and_then(Value::as_str).unwrap_or("none");
    if found != format {
        return Err(format!("expected format {format}, found {found}"));
    }
    let section = v
        .get_mut(key)
        .map(Value::take)
        .ok_or_else(|| format!("missing section `{key}`"))?;
    serde_json::from_value(section).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    #[test]
    fn keys_are_sorted_and_floats_full_precision() {
        let v = serde_json::json!({"b": 0.1, "a": [1, 2.5], "c": {"z": true, "y": null}});
        let s = to_string(&v);
        assert_eq!(
            s,
            "{\n  \"a\": [1, 2.5000000000000000e0],\n  \"b\": 1.0000000000000001e-1,\n  \"c\": {\n    \"y\": null,\n    \"z\": true\n  }\n}\n"
        );
    }

    #[test]
    fn header_is_checked() {
        let s = with_header(SCENE, "x", &3u32);
        assert_eq!(parse::<u32>(&s, SCENE, "x").unwrap(), 3);
        assert!(parse::<u32>(&s, LABELS, "x").unwrap_err().contains("scene/1"));
        assert!(parse::<u32>(&s, SCENE, "y").is_err());
    }

    proptest! {
        #[test]
        fn floats_round_trip_exactly(xs in proptest::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..20)) {
            let s = with_header(BA, "xs", &xs);
            let back: Vec<f64> = parse(&s, BA, "xs").unwrap();
            prop_assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn output_is_independent_of_insertion_order(keys in proptest::collection::vec("[a-z]{1,6}", 1..10)) {
            let fwd: serde_json::Map<String, Value> = keys.iter().map(|k| (k.clone(), Value::from(1.5))).collect();
            let rev: serde_json::Map<String, Value> = keys.iter().rev().map(|k| (k.clone(), Value::from(1.5))).collect();
            prop_assert_eq!(to_string(&Value::Object(fwd)), to_string(&Value::Object(rev)));
            let m: BTreeMap<String, f64> = keys.iter().map(|k| (k.clone(), 1.5)).collect();
            prop_assert!(to_string(&m).contains("1.5000000000000000e0"));
        }
    }
}
