//! Line-based `key = value` text, used by config files and checkpoint headers.

use crate::error::{MdcError, Result};

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(MdcError::Config(format!("line {}: expected `key = value`, got {raw:?}", no + 1)));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(MdcError::Config(format!("line {}: empty key", no + 1)));
        }
        if out.iter().any(|(ek, _)| ek == key) {
            return Err(MdcError::Config(format!("line {}: duplicate key {key:?}", no + 1)));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn format(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn get<'a>(pairs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| MdcError::Config(format!("{key}: cannot parse {value:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = parse("# header\nsteps = 500\n\n lr=4e-3   # initial rate\n").unwrap();
        assert_eq!(kv, vec![("steps".into(), "500".into()), ("lr".into(), "4e-3".into())]);
        assert_eq!(parse(&format(&kv)).unwrap(), kv);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse("steps 500").is_err());
        assert!(parse("= 3").is_err());
        assert!(parse("a = 1\na = 2").is_err());
    }
}
