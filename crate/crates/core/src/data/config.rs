//! `key = value` configuration files with `#` comments.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

pub type ConfigMap = IndexMap<String, String>;

/// Parses config text, rejecting malformed lines, duplicates and keys not in
/// `allowed`.
pub fn parse_config(text: &str, allowed: &[&str]) -> Result<ConfigMap> {
    let mut map = ConfigMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config { line, detail: format!("expected `key = value`, got `{content}`") })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config { line, detail: "empty key or value".into() });
        }
        if !allowed.contains(&key) {
            return Err(Error::UnknownKey(key.to_string()));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config { line, detail: format!("duplicate key `{key}`") });
        }
    }
    Ok(map)
}

pub fn parse_config_file(path: impl AsRef<Path>, allowed: &[&str]) -> Result<ConfigMap> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, allowed)
}

/// Canonical form: one `key = value` line per entry in insertion order.
pub fn serialize_config(map: &ConfigMap) -> String {
    map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_example() {
        let m = parse_config("heads = 4\n# c\nlr = 1e-3", &["heads", "lr"]).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m["heads"], "4");
        assert_eq!(m["lr"], "1e-3");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(parse_config("x = 1", &["y"]), Err(Error::UnknownKey(k)) if k == "x"));
        assert!(matches!(parse_config("\nnot a pair", &["y"]), Err(Error::Config { line: 2, .. })));
        assert!(parse_config("y = 1\ny = 2", &["y"]).is_err());
        assert!(parse_config("y =", &["y"]).is_err());
    }

    #[test]
    fn serialization_is_idempotent() {
        let text = "  b=2 # trailing\n\na = x y\n";
        let once = serialize_config(&parse_config(text, &["a", "b"]).unwrap());
        let twice = serialize_config(&parse_config(&once, &["a", "b"]).unwrap());
        assert_eq!(once, "b = 2\na = x y\n");
        assert_eq!(once, twice);
    }
}
