//! Canonical JSON for hashing: object keys sorted, no insignificant
//! whitespace, integers verbatim, other numbers in scientific notation
//! with 17 significant digits.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&v, &mut out);
    Ok(out)
}

/// Hex SHA-256 of the canonical form.
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(canonical_json(value)?.as_bytes())))
}

fn write_value(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                let f = n.as_f64().expect("finite JSON number");
                out.push_str(&format!("{:.16e}", f));
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_value(&map[k], out);
            }
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sorted_keys_and_fixed_floats() {
        let v = json!({"b": 0.1, "a": [1, -2, true, null], "c": {"z": "x\"y", "y": 2.5e-300}});
        assert_eq!(
            canonical_json(&v).unwrap(),
            r#"{"a":[1,-2,true,null],"b":1.0000000000000001e-1,"c":{"y":2.5000000000000000e-300,"z":"x\"y"}}"#
        );
    }

    #[test]
    fn key_order_does_not_change_hash() {
        let a: Value = serde_json::from_str(r#"{"x": 1, "y": 0.3333333333333333}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{ "y": 3.333333333333333e-1,  "x": 1 }"#).unwrap();
        assert_eq!(canonical_hash(&a).unwrap(), canonical_hash(&b).unwrap());
        let c: Value = serde_json::from_str(r#"{"x": 1, "y": 0.33333333333333331}"#).unwrap();
        assert_eq!(canonical_hash(&a).unwrap(), canonical_hash(&c).unwrap());
        let d: Value = serde_json::from_str(r#"{"x": 2, "y": 0.3333333333333333}"#).unwrap();
        assert_ne!(canonical_hash(&a).unwrap(), canonical_hash(&d).unwrap());
    }
}
