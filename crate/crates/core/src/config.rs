//! Sectioned key-value configuration files.
//!
//! Site and scenario files share one plain-text format:
//!
//! ```text
//! # comment
//! [patch]
//! patch_id = olin-a
//! reference_coords = 39.3289, -76.6210
//! ```
//!
//! Every `[name]` header opens a new section and sections may repeat; each
//! occurrence describes one entity. Keys are unique within a section. Values
//! run to the end of the line with surrounding whitespace trimmed. Comments
//! start with `#` or `;` at the beginning of a line.

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: [{section}] is missing key `{key}`")]
    MissingKey { line: usize, section: String, key: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: invalid value for `{key}`: {message}")]
    InvalidValue { line: usize, key: String, message: String },
}

impl ConfigError {
    pub fn line(&self) -> usize {
        match self {
            ConfigError::Syntax { line, .. }
            | ConfigError::MissingKey { line, .. }
            | ConfigError::UnknownKey { line, .. }
            | ConfigError::InvalidValue { line, .. } => *line,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    /// Line of the `[name]` header (1-based).
    pub line: usize,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    /// Parses a whole document. An input without any section is rejected.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut sections: Vec<Section> = Vec::new();
        let mut last_line = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            last_line = line;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line,
                    message: format!("unterminated section header `{trimmed}`"),
                })?;
                let name = name.trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(ConfigError::Syntax {
                        line,
                        message: format!("invalid section name `{name}`"),
                    });
                }
                sections.push(Section {
                    name: name.to_string(),
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("expected `key = value`, found `{trimmed}`"),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    message: "empty key".into(),
                });
            }
            let Some(section) = sections.last_mut() else {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("key `{key}` appears before any section header"),
                });
            };
            if section.entries.iter().any(|e| e.key == key) {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("key `{key}` repeated within [{}]", section.name),
                });
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        if sections.is_empty() {
            return Err(ConfigError::Syntax {
                line: last_line.max(1),
                message: "no sections found".into(),
            });
        }
        Ok(Document { sections })
    }

    pub fn sections_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name == name)
    }
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn require(&self, key: &str) -> Result<&Entry, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::MissingKey {
            line: self.line,
            section: self.name.clone(),
            key: key.to_string(),
        })
    }

    pub fn text(&self, key: &str) -> Result<String, ConfigError> {
        Ok(self.require(key)?.value.clone())
    }

    pub fn text_or(&self, key: &str, default: &str) -> String {
        self.get(key)
            .map(|e| e.value.clone())
            .unwrap_or_else(|| default.to_string())
    }

    pub fn parse<T>(&self, key: &str) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let entry = self.require(key)?;
        parse_value(entry, &entry.value)
    }

    pub fn parse_or<T>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.get(key) {
            Some(entry) => parse_value(entry, &entry.value),
            None => Ok(default),
        }
    }

    pub fn parse_opt<T>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key).map(|entry| parse_value(entry, &entry.value)).transpose()
    }

    /// Parses a comma separated list of exactly `N` numbers, optionally
    /// wrapped in parentheses: `(1.0, 2.0)` or `1.0, 2.0`.
    pub fn parse_tuple<const N: usize>(&self, key: &str) -> Result<[f64; N], ConfigError> {
        let entry = self.require(key)?;
        parse_tuple_value(entry)
    }

    pub fn parse_tuple_opt<const N: usize>(&self, key: &str) -> Result<Option<[f64; N]>, ConfigError> {
        self.get(key).map(parse_tuple_value).transpose()
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        for entry in &self.entries {
            if !allowed.contains(&entry.key.as_str()) {
                return Err(ConfigError::UnknownKey {
                    line: entry.line,
                    section: self.name.clone(),
                    key: entry.key.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn invalid(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::InvalidValue {
            line: self.get(key).map_or(self.line, |e| e.line),
            key: key.to_string(),
            message: message.into(),
        }
    }
}

fn parse_value<T>(entry: &Entry, text: &str) -> Result<T, ConfigError>
where
    T: FromStr,
    T::Err: Display,
{
    text.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        line: entry.line,
        key: entry.key.clone(),
        message: format!("`{text}`: {e}"),
    })
}

fn parse_tuple_value<const N: usize>(entry: &Entry) -> Result<[f64; N], ConfigError> {
    let inner = entry.value.trim();
    let inner = inner
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .unwrap_or(inner);
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(ConfigError::InvalidValue {
            line: entry.line,
            key: entry.key.clone(),
            message: format!("expected {N} comma separated numbers, found {}", parts.len()),
        });
    }
    let mut out = [0.0; N];
    for (slot, part) in out.iter_mut().zip(parts) {
        *slot = parse_value(entry, part)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_repeated_sections() {
        let doc = Document::parse("# header\n[mote]\nmote_id = 1\n\n[mote]\nmote_id = 2\noffset_m = (2, 0)\n").unwrap();
        let motes: Vec<_> = doc.sections_named("mote").collect();
        assert_eq!(motes.len(), 2);
        assert_eq!(motes[1].line, 5);
        assert_eq!(motes[1].parse::<u32>("mote_id").unwrap(), 2);
        assert_eq!(motes[1].parse_tuple::<2>("offset_m").unwrap(), [2.0, 0.0]);
    }

    #[test]
    fn empty_input_is_a_syntax_error() {
        assert!(matches!(Document::parse(""), Err(ConfigError::Syntax { .. })));
        assert!(matches!(
            Document::parse("# only a comment\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn errors_name_the_line() {
        let err = Document::parse("[site]\nsite_id = a\nbogus line\n").unwrap_err();
        assert_eq!(err.line(), 3);
        let err = Document::parse("[site]\nsite_id = a\nsite_id = b\n").unwrap_err();
        assert_eq!(err.line(), 3);
        let doc = Document::parse("[site]\nlatitude = north\n").unwrap();
        let err = doc.sections[0].parse::<f64>("latitude").unwrap_err();
        assert_eq!(err.line(), 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        let doc = Document::parse("[site]\nsite_id = a\ncolour = red\n").unwrap();
        let err = doc.sections[0].check_keys(&["site_id"]).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 3, .. }));
    }
}
