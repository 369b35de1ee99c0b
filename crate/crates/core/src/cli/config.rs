//! `key=value` run configuration merged with command-line flags (flags win),
//! and the hash that stamps every output file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::csvio::read_kv;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
    base_dir: Option<PathBuf>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let entries = read_kv(path)?.into_iter().map(|(k, v)| (normalize(&k), v)).collect();
        Ok(ConfigFile {
            entries,
            base_dir: path.parent().map(Path::to_path_buf),
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(&normalize(key)).map(String::as_str)
    }

    /// Entries `prefix.<rest>`, returned as `(rest, value)`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, String)> {
        let p = format!("{}.", normalize(prefix));
        self.entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|r| (r.to_string(), v.clone())))
            .collect()
    }

    /// Relative paths in the file are taken relative to the file itself.
    fn path(&self, value: &str) -> PathBuf {
        let p = PathBuf::from(value);
        match &self.base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p,
        }
    }
}

/// Resolves settings and records every effective value for the config hash.
#[derive(Debug)]
pub struct Settings<'a> {
    file: &'a ConfigFile,
    record: BTreeMap<String, String>,
}

impl<'a> Settings<'a> {
    pub fn new(file: &'a ConfigFile) -> Self {
        Settings {
            file,
            record: BTreeMap::new(),
        }
    }

    pub fn file(&self) -> &ConfigFile {
        self.file
    }

    pub fn opt<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(s) => Some(
                    s.parse::<T>()
                        .map_err(|_| Error::invalid(format!("config key `{key}`: cannot parse `{s}`")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &v {
            self.record.insert(normalize(key), v.to_string());
        }
        Ok(v)
    }

    pub fn or<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        match self.opt(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.record.insert(normalize(key), default.to_string());
                Ok(default)
            }
        }
    }

    pub fn required<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.opt(key, flag)?.ok_or_else(|| {
            Error::invalid(format!("missing setting `{key}` (pass --{} or set it in the config file)", key.replace('_', "-")))
        })
    }

    pub fn flag(&mut self, key: &str, flag: bool) -> Result<bool> {
        self.or(key, flag.then_some(true), false)
    }

    /// An input file; its content hash, not its path, enters the config hash.
    pub fn input(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let path = match flag {
            Some(p) => Some(p),
            None => self.file.get(key).map(|v| self.file.path(v)),
        };
        if let Some(p) = &path {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            self.record.insert(format!("input.{}", normalize(key)), hex(&Sha256::digest(&bytes)));
        }
        Ok(path)
    }

    pub fn required_input(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.input(key, flag)?.ok_or_else(|| {
            Error::invalid(format!("missing input `{key}` (pass --{} or set it in the config file)", key.replace('_', "-")))
        })
    }

    /// Records a derived value that should be part of the hash.
    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.record.insert(normalize(key), value.to_string());
    }

    /// SHA-256 of the sorted effective settings.
    pub fn hash(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.record {
            let _ = writeln!(s, "{k}={v}");
        }
        hex(&Sha256::digest(s.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
