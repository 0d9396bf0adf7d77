//! `key: value` text files used for run configs and generator specs.

use std::path::Path;

use crate::error::{MccError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses non-empty, non-comment lines of the form `key: value`.
/// `key = value` is accepted as well.
pub fn parse(text: &str, origin: &Path) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let split = match (line.find(':'), line.find('=')) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        let Some(at) = split else {
            return Err(MccError::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: "expected `key: value`".into(),
            });
        };
        out.push(Entry {
            key: line[..at].trim().to_string(),
            value: line[at + 1..].trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| MccError::config(format!("`{key}`: cannot parse `{value}`")))
}

pub fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(MccError::config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_separators_and_skips_comments() {
        let text = "# run\nmcc.tau: 0.1\n\ncpi.k = 32\nlabels.path: /a:b\n";
        let entries = parse(text, Path::new("cfg")).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].key, "mcc.tau");
        assert_eq!(entries[1].value, "32");
        assert_eq!(entries[2].value, "/a:b");
        assert_eq!(entries[2].line, 5);
    }

    #[test]
    fn reports_line_of_garbage() {
        match parse("a: 1\nnope\n", Path::new("cfg")) {
            Err(MccError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lists_accept_commas_and_spaces() {
        let v: Vec<usize> = parse_list("x", "1, 2 3").unwrap();
        assert_eq!(v, vec![1, 2, 3]);
    }
}
