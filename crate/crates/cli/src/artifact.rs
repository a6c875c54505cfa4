//! JSON artifacts and run manifests.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Rounds to 12 significant digits so repeated runs serialize identically.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                if !(n.is_i64() || n.is_u64()) {
                    if let Some(r) = serde_json::Number::from_f64(round_sig(f)) {
                        *n = r;
                    }
                }
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_value),
        Value::Object(o) => o.values_mut().for_each(round_value),
        _ => {}
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("artifact types serialize");
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v).expect("json value serializes");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    std::fs::write(path, to_json(value))
}

pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub command_line: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub wall_time_s: f64,
    pub artifacts: Vec<PathBuf>,
    /// "pass", "fail" or "error".
    pub verdict: String,
    pub summary: Value,
}

/// `<dir>/<stem>.manifest.json` next to the first artifact, else in the
/// working directory.
pub fn manifest_path(command: &str, artifacts: &[PathBuf]) -> PathBuf {
    match artifacts.first() {
        Some(a) => {
            let stem = a.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| command.into());
            a.with_file_name(format!("{stem}.manifest.json"))
        }
        None => PathBuf::from(format!("evanskit-{command}.manifest.json")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rounding_is_idempotent(x in proptest::num::f64::NORMAL) {
            let r = round_sig(x);
            prop_assert_eq!(round_sig(r), r);
            prop_assert!((r - x).abs() <= 1e-11 * x.abs());
        }
    }

    #[test]
    fn rounding_keeps_twelve_digits() {
        assert_eq!(round_sig(0.1 + 0.2), 0.3);
        assert_eq!(round_sig(1.234567890123456e-7), 1.23456789012e-7);
        assert_eq!(round_sig(0.0), 0.0);
        let mut v = serde_json::json!({"a": [1.00000000000001, 3], "b": {"c": -2.9999999999999996}});
        round_value(&mut v);
        assert_eq!(v, serde_json::json!({"a": [1.0, 3], "b": {"c": -3.0}}));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"seed": 42}));
        assert_eq!(a, config_hash(&serde_json::json!({"seed": 42})));
        assert_ne!(a, config_hash(&serde_json::json!({"seed": 43})));
        assert_eq!(a.len(), 64);
    }
}
