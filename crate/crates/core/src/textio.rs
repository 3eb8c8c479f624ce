//! Shared plumbing for the newline-delimited `#kforge-*` file formats.
//!
//! Every format starts with a `#kforge-<kind> v<N>` header line. Later lines
//! starting with `#` are metadata comments (the CLI writes a
//! `#meta config=<hash> seed=<n>` line) and are skipped by readers.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

/// Escape a field for tab-separated records: `\` -> `\\`, tab -> `\t`,
/// newline -> `\n`, CR -> `\r`.
pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(Error::InvalidInput(format!(
                    "bad escape sequence \\{} in field",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(out)
}

/// Read a kforge text file: verify the version header, drop `#` comment
/// lines, and return the remaining lines with their 1-based line numbers.
pub fn read_records(path: &Path, expected_header: &str) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) => h.trim_end(),
        None => {
            return Err(Error::Version {
                path: path.display().to_string(),
                expected: expected_header.to_string(),
                found: "<empty file>".to_string(),
            })
        }
    };
    if header != expected_header {
        return Err(Error::Version {
            path: path.display().to_string(),
            expected: expected_header.to_string(),
            found: header.to_string(),
        });
    }
    Ok(lines
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// Write a kforge text file: header, optional meta comment lines, records.
pub fn write_records(
    path: &Path,
    header: &str,
    meta: &[String],
    records: &[String],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for m in meta {
        out.push('#');
        out.push_str(m);
        out.push('\n');
    }
    for r in records {
        out.push_str(r);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escape_round_trip() {
        let s = "a\tb\\c\nd\re";
        assert_eq!(unescape_field(&escape_field(s)).unwrap(), s);
        assert!(!escape_field(s).contains('\n'));
    }

    #[test]
    fn bad_escape_is_an_error() {
        assert!(unescape_field("a\\x").is_err());
        assert!(unescape_field("trailing\\").is_err());
    }

    #[test]
    fn header_mismatch_is_versioned_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        std::fs::write(&p, "#kforge-pages v2\n").unwrap();
        match read_records(&p, "#kforge-pages v1") {
            Err(Error::Version {
                expected, found, ..
            }) => {
                assert_eq!(expected, "#kforge-pages v1");
                assert_eq!(found, "#kforge-pages v2");
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn meta_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        write_records(
            &p,
            "#kforge-pages v1",
            &["meta config=abc seed=1".into()],
            &["rec1".into(), "rec2".into()],
        )
        .unwrap();
        let recs = read_records(&p, "#kforge-pages v1").unwrap();
        assert_eq!(
            recs.iter().map(|(_, r)| r.as_str()).collect::<Vec<_>>(),
            vec!["rec1", "rec2"]
        );
    }
}
