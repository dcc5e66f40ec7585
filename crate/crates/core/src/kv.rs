//! Flat `key=value` text format with dotted hierarchical keys.
//!
//! Blank lines and lines starting with `#` are ignored. Whitespace around keys
//! and values is trimmed. The canonical rendering lists keys in sorted order,
//! one `key=value` per line.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type KvMap = BTreeMap<String, String>;

pub fn parse(text: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
        }
    }
    Ok(map)
}

pub fn render(map: &KvMap) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Removes `key` from `map` and parses it, leaving `target` untouched if absent.
pub(crate) fn take<T: FromStr>(map: &mut KvMap, key: &str, target: &mut T) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = map.remove(key) {
        *target = v
            .parse()
            .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))?;
    }
    Ok(())
}

/// Fails if any key was left unconsumed.
pub(crate) fn ensure_consumed(map: &KvMap) -> Result<()> {
    match map.keys().next() {
        Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let m = parse("# comment\n b.x = 2\n\na=1\n").unwrap();
        assert_eq!(render(&m), "a=1\nb.x=2\n");
        assert!(parse("novalue").is_err());
        assert!(parse("a=1\na=2").is_err());
        assert!(parse("=3").is_err());
    }

    #[test]
    fn take_parses_and_reports() {
        let mut m = parse("n=3\nbad=x").unwrap();
        let mut n = 0usize;
        take(&mut m, "n", &mut n).unwrap();
        assert_eq!(n, 3);
        assert!(take(&mut m, "bad", &mut n).is_err());
        let mut missing = 7usize;
        take(&mut m, "absent", &mut missing).unwrap();
        assert_eq!(missing, 7);
    }
}
