//! Run configuration files: flat INI-style `key = value` lines grouped
//! under `[data]`, `[model]`, `[train]` and `[run]` headers. `#` and `;`
//! start comments. Every key is addressable as `section.key`, which is also
//! how command-line overrides and error messages name it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Which domains to hold out: each one in turn, or a fixed list.
#[derive(Debug, Clone, PartialEq)]
pub enum HoldOut {
    All,
    Domains(Vec<String>),
}

impl HoldOut {
    pub fn parse(s: &str) -> HoldOut {
        match s.trim() {
            "all" => HoldOut::All,
            list => HoldOut::Domains(list.split(',').map(|d| d.trim().to_string()).filter(|d| !d.is_empty()).collect()),
        }
    }

    pub fn resolve(&self, available: &[&str]) -> Result<Vec<String>> {
        match self {
            HoldOut::All => Ok(available.iter().map(|s| s.to_string()).collect()),
            HoldOut::Domains(ds) => {
                for d in ds {
                    if !available.contains(&d.as_str()) {
                        return Err(Error::Config {
                            key: "data.hold_out".into(),
                            msg: format!("unknown domain `{d}` (have {})", available.join(", ")),
                        });
                    }
                }
                if ds.is_empty() {
                    return Err(Error::Config {
                        key: "data.hold_out".into(),
                        msg: "no domain given".into(),
                    });
                }
                Ok(ds.clone())
            }
        }
    }
}

impl std::fmt::Display for HoldOut {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HoldOut::All => f.write_str("all"),
            HoldOut::Domains(ds) => f.write_str(&ds.join(",")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub hold_out: HoldOut,
    pub train_fraction: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seeds to repeat every run with; each seeds initialization, split and
    /// training. Empty means `[train.seed]`.
    pub seeds: Vec<u64>,
    pub tag: String,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: None,
            hold_out: HoldOut::All,
            train_fraction: 0.9,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: Vec::new(),
            tag: "run".into(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_ini(&text)?;
        Ok(cfg)
    }

    /// Applies every setting in `text` on top of the current values.
    pub fn apply_ini(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "data" | "model" | "train" | "run") {
                    return Err(Error::Config {
                        key: section,
                        msg: format!("line {}: unknown section", i + 1),
                    });
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    key: format!("{section}.?"),
                    msg: format!("line {}: expected `key = value`", i + 1),
                });
            };
            if section.is_empty() {
                return Err(Error::Config {
                    key: key.trim().to_string(),
                    msg: format!("line {}: setting outside any section", i + 1),
                });
            }
            self.set(&format!("{section}.{}", key.trim()), value.trim())?;
        }
        Ok(())
    }

    /// Sets one `section.key` to `value`.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        let (section, key) = path.split_once('.').ok_or_else(|| Error::Config {
            key: path.to_string(),
            msg: "expected `section.key`".into(),
        })?;
        let err = |msg: String| Error::Config {
            key: path.to_string(),
            msg,
        };
        match (section, key) {
            ("model", k) => self.model.set(k, value, "model.")?,
            ("train", k) => self.train.set(k, value, "train.")?,
            ("data", "dir") => self.data_dir = Some(PathBuf::from(value)),
            ("data", "hold_out") => self.hold_out = HoldOut::parse(value),
            ("data", "train_fraction") => {
                self.train_fraction = value.parse().map_err(|e| err(format!("expected a number: {e}")))?
            }
            ("run", "seeds") => {
                self.seeds = value
                    .split(',')
                    .map(|s| s.trim().parse::<u64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| err(format!("expected comma-separated integers: {e}")))?
            }
            ("run", "tag") => self.tag = value.to_string(),
            ("run", "out") => self.out_dir = PathBuf::from(value),
            _ => return Err(err("unknown key".into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config {
            key: "model".into(),
            msg: e.to_string(),
        })?;
        self.train.validate().map_err(|e| Error::Config {
            key: "train".into(),
            msg: e.to_string(),
        })?;
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config {
                key: "data.train_fraction".into(),
                msg: format!("{} outside (0, 1]", self.train_fraction),
            });
        }
        Ok(())
    }

    pub fn effective_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// The effective configuration as a file [`RunConfig::apply_ini`] reads back.
    pub fn to_ini(&self) -> String {
        let mut s = String::from("[data]\n");
        if let Some(d) = &self.data_dir {
            let _ = writeln!(s, "dir = {}", d.display());
        }
        let _ = writeln!(s, "hold_out = {}", self.hold_out);
        let _ = writeln!(s, "train_fraction = {}", self.train_fraction);
        s.push_str("\n[model]\n");
        for (k, v) in self.model.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s.push_str("\n[train]\n");
        for (k, v) in self.train.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s.push_str("\n[run]\n");
        if !self.seeds.is_empty() {
            let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(s, "seeds = {}", seeds.join(","));
        }
        let _ = writeln!(s, "tag = {}", self.tag);
        let _ = writeln!(s, "out = {}", self.out_dir.display());
        s
    }
}
