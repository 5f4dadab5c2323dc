//! Flat INI-style run configuration.
//!
//! The dialect is deliberately strict and nesting-free so configs stay
//! language-neutral and diff-friendly: `[section]` headers, `key = value`
//! pairs, `#`/`;` comments, UTF-8, nothing else. Readers consume keys
//! through [`SectionReader`], which records every access so that unknown
//! keys — usually typos — are reported as errors instead of being ignored.

use std::collections::BTreeSet;
use std::path::Path;

use super::HarnessError;

/// Parsed key/value sections, order-preserving. Duplicate sections and
/// duplicate keys within a section are rejected.
#[derive(Clone, Debug, Default)]
pub struct Ini {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Ini, HarnessError> {
        let mut ini = Ini::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if name.is_empty() {
                    return Err(HarnessError::Config(format!(
                        "line {}: empty section name",
                        lineno + 1
                    )));
                }
                if ini.sections.iter().any(|(n, _)| n == name) {
                    return Err(HarnessError::Config(format!(
                        "line {}: duplicate section [{name}]",
                        lineno + 1
                    )));
                }
                ini.sections.push((name.to_string(), Vec::new()));
            } else if let Some((key, value)) = line.split_once('=') {
                let (key, value) = (key.trim(), value.trim());
                if key.is_empty() {
                    return Err(HarnessError::Config(format!(
                        "line {}: empty key",
                        lineno + 1
                    )));
                }
                let section = ini.sections.last_mut().ok_or_else(|| {
                    HarnessError::Config(format!(
                        "line {}: key `{key}` appears before any [section]",
                        lineno + 1
                    ))
                })?;
                if section.1.iter().any(|(k, _)| k == key) {
                    return Err(HarnessError::Config(format!(
                        "line {}: duplicate key `{key}` in [{}]",
                        lineno + 1,
                        section.0
                    )));
                }
                section.1.push((key.to_string(), value.to_string()));
            } else {
                return Err(HarnessError::Config(format!(
                    "line {}: expected `[section]` or `key = value`, got `{line}`",
                    lineno + 1
                )));
            }
        }
        Ok(ini)
    }

    pub fn from_file(path: &Path) -> Result<Ini, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Ini::parse(&text)
    }

    pub fn section_names(&self) -> Vec<&str> {
        self.sections.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|(n, _)| n == name)
    }

    /// Reader over one section; a missing section reads as empty, so
    /// callers can treat optional sections uniformly.
    pub fn reader<'a>(&'a self, name: &str) -> SectionReader<'a> {
        let pairs = self
            .sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
            .unwrap_or(&[]);
        SectionReader {
            section: name.to_string(),
            pairs,
            consumed: BTreeSet::new(),
        }
    }

    /// Rejects sections outside `allowed`; call once per command schema.
    pub fn check_sections(&self, allowed: &[&str]) -> Result<(), HarnessError> {
        for (name, _) in &self.sections {
            if !allowed.contains(&name.as_str()) {
                return Err(HarnessError::Config(format!(
                    "unknown section [{name}]; expected one of {allowed:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Typed access to one section's keys with consumption tracking:
/// [`SectionReader::finish`] fails if any key was never read.
pub struct SectionReader<'a> {
    section: String,
    pairs: &'a [(String, String)],
    consumed: BTreeSet<String>,
}

impl<'a> SectionReader<'a> {
    fn raw(&mut self, key: &str) -> Option<&'a str> {
        let found = self
            .pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str());
        if found.is_some() {
            self.consumed.insert(key.to_string());
        }
        found
    }

    fn missing(&self, key: &str) -> HarnessError {
        HarnessError::Config(format!("[{}] is missing key `{key}`", self.section))
    }

    fn bad<T: std::fmt::Display>(&self, key: &str, value: &str, what: T) -> HarnessError {
        HarnessError::Config(format!(
            "[{}] {key} = {value}: expected {what}",
            self.section
        ))
    }

    pub fn opt_str(&mut self, key: &str) -> Option<&'a str> {
        self.raw(key)
    }

    pub fn str_req(&mut self, key: &str) -> Result<&'a str, HarnessError> {
        self.raw(key).ok_or_else(|| self.missing(key))
    }

    pub fn opt_f64(&mut self, key: &str) -> Result<Option<f64>, HarnessError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| self.bad(key, v, "a number")),
        }
    }

    pub fn f64_or(&mut self, key: &str, default: f64) -> Result<f64, HarnessError> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    pub fn opt_usize(&mut self, key: &str) -> Result<Option<usize>, HarnessError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<usize>()
                .map(Some)
                .map_err(|_| self.bad(key, v, "a non-negative integer")),
        }
    }

    pub fn usize_req(&mut self, key: &str) -> Result<usize, HarnessError> {
        self.opt_usize(key)?.ok_or_else(|| self.missing(key))
    }

    pub fn usize_or(&mut self, key: &str, default: usize) -> Result<usize, HarnessError> {
        Ok(self.opt_usize(key)?.unwrap_or(default))
    }

    pub fn opt_u64(&mut self, key: &str) -> Result<Option<u64>, HarnessError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<u64>()
                .map(Some)
                .map_err(|_| self.bad(key, v, "a non-negative integer")),
        }
    }

    pub fn bool_or(&mut self, key: &str, default: bool) -> Result<bool, HarnessError> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(self.bad(key, v, "true or false")),
        }
    }

    /// Comma-separated positive integers, e.g. hidden layer widths.
    pub fn opt_usize_list(&mut self, key: &str) -> Result<Option<Vec<usize>>, HarnessError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| self.bad(key, v, "comma-separated integers")),
        }
    }

    /// Space-separated floats, used by dataset sidecars for vectors and
    /// row-major matrices.
    pub fn opt_f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>, HarnessError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split_whitespace()
                .map(|p| p.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| self.bad(key, v, "space-separated numbers")),
        }
    }

    pub fn f64_list_req(&mut self, key: &str) -> Result<Vec<f64>, HarnessError> {
        self.opt_f64_list(key)?.ok_or_else(|| self.missing(key))
    }

    /// Errors on any key that no reader call touched.
    pub fn finish(self) -> Result<(), HarnessError> {
        for (k, _) in self.pairs {
            if !self.consumed.contains(k) {
                return Err(HarnessError::Config(format!(
                    "unknown key `{k}` in [{}]",
                    self.section
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_keys_and_comments() {
        let ini = Ini::parse(
            "# run settings\n[run]\nmethod = em\nseed = 7\n\n; more\n[optimizer]\niters = 10\n",
        )
        .unwrap();
        assert_eq!(ini.section_names(), vec!["run", "optimizer"]);
        let mut r = ini.reader("run");
        assert_eq!(r.str_req("method").unwrap(), "em");
        assert_eq!(r.opt_u64("seed").unwrap(), Some(7));
        r.finish().unwrap();
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        assert!(Ini::parse("stray = 1\n").is_err());
        assert!(Ini::parse("[a]\nnot a pair\n").is_err());
        assert!(Ini::parse("[a]\n[a]\n").is_err());
        assert!(Ini::parse("[a]\nk = 1\nk = 2\n").is_err());
        assert!(Ini::parse("[]\n").is_err());
    }

    #[test]
    fn unknown_keys_and_sections_are_errors() {
        let ini = Ini::parse("[run]\nmethod = em\ntypo_key = 3\n").unwrap();
        let mut r = ini.reader("run");
        let _ = r.str_req("method");
        let err = r.finish().unwrap_err();
        assert!(err.to_string().contains("typo_key"));
        assert!(ini.check_sections(&["model"]).is_err());
        assert!(ini.check_sections(&["run", "model"]).is_ok());
    }

    #[test]
    fn typed_reads_validate() {
        let ini = Ini::parse("[s]\nx = 1.5\nn = 4\nflag = true\nlist = 3, 5\nvec = 1.0 -2.5\n")
            .unwrap();
        let mut r = ini.reader("s");
        assert_eq!(r.f64_or("x", 0.0).unwrap(), 1.5);
        assert_eq!(r.usize_req("n").unwrap(), 4);
        assert!(r.bool_or("flag", false).unwrap());
        assert_eq!(r.opt_usize_list("list").unwrap().unwrap(), vec![3, 5]);
        assert_eq!(r.f64_list_req("vec").unwrap(), vec![1.0, -2.5]);
        assert_eq!(r.usize_or("absent", 9).unwrap(), 9);
        r.finish().unwrap();

        let bad = Ini::parse("[s]\nn = -3\n").unwrap();
        assert!(bad.reader("s").usize_req("n").is_err());
    }

    #[test]
    fn missing_section_reads_as_empty() {
        let ini = Ini::parse("[run]\nseed = 1\n").unwrap();
        let mut r = ini.reader("schedule");
        assert!(r.opt_f64("phi_start").unwrap().is_none());
        r.finish().unwrap();
        assert!(!ini.has_section("schedule"));
    }
}
