//! Class list files: one class per line, `id, name[, desc_seed]`.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub id: u64,
    pub name: String,
    /// Seed for the description surrogate; falls back to `id`.
    pub desc_seed: Option<u64>,
}

impl ClassEntry {
    pub fn key(&self) -> u64 {
        self.desc_seed.unwrap_or(self.id)
    }
}

fn bad(line: usize, reason: impl Into<String>) -> Error {
    Error::Parameter {
        name: "classes",
        reason: format!("line {line}: {}", reason.into()),
    }
}

/// Blank lines and `#` comments are skipped. Ids must be unique.
pub fn parse_class_list(text: &str) -> Result<Vec<ClassEntry>> {
    let mut out: Vec<ClassEntry> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(bad(n + 1, "expected `id, name[, desc_seed]`"));
        }
        let id = fields[0].parse().map_err(|_| bad(n + 1, format!("bad id {:?}", fields[0])))?;
        if fields[1].is_empty() {
            return Err(bad(n + 1, "empty class name"));
        }
        let desc_seed = match fields.get(2) {
            Some(s) if !s.is_empty() => Some(s.parse().map_err(|_| bad(n + 1, format!("bad desc seed {s:?}")))?),
            _ => None,
        };
        if out.iter().any(|e| e.id == id) {
            return Err(bad(n + 1, format!("duplicate id {id}")));
        }
        out.push(ClassEntry {
            id,
            name: fields[1].to_string(),
            desc_seed,
        });
    }
    Ok(out)
}

pub fn load_class_list(path: &Path) -> Result<Vec<ClassEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parameter {
        name: "classes",
        reason: format!("{}: {e}", path.display()),
    })?;
    parse_class_list(&text)
}

/// Placeholder names `class_0 ..` used when no list is given.
pub fn default_class_list(count: usize) -> Vec<ClassEntry> {
    (0..count as u64)
        .map(|id| ClassEntry {
            id,
            name: format!("class_{id}"),
            desc_seed: None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_optional_seed_and_comments() {
        let list = parse_class_list("# header\n0, waving\n1, jumping jacks, 42\n\n7,run,\n").unwrap();
        assert_eq!(list.len(), 3);
        assert_eq!(list[0].key(), 0);
        assert_eq!(list[1].name, "jumping jacks");
        assert_eq!(list[1].key(), 42);
        assert_eq!(list[2].desc_seed, None);
    }

    #[test]
    fn rejects_malformed() {
        assert!(parse_class_list("waving").is_err());
        assert!(parse_class_list("x, waving").is_err());
        assert!(parse_class_list("1, a\n1, b").is_err());
        assert!(parse_class_list("1, a, 2, 3").is_err());
        assert!(parse_class_list("1, ").is_err());
    }
}
