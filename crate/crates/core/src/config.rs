//! TOML scenario files with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::TrainConfig;
use crate::simulator::{EpisodeConfig, Scenario};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Subdirectory name; derived from the command and seed when absent.
    pub run_id: Option<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            run_id: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub checkpoint: Option<PathBuf>,
    /// Use an untrained policy instead of a checkpoint.
    pub random: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub agents: Vec<usize>,
    /// Seeds `0..seeds`.
    pub seeds: u64,
    /// Add a deadlock-off arm for every cell.
    pub ablate_deadlock: bool,
    /// Add a filter-off arm for every cell.
    pub ablate_filter: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            agents: vec![4, 8, 16],
            seeds: 5,
            ablate_deadlock: false,
            ablate_filter: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneralizeConfig {
    pub train_m: usize,
    pub test_n: Vec<usize>,
    pub seeds: u64,
}

impl Default for GeneralizeConfig {
    fn default() -> Self {
        Self {
            train_m: 8,
            test_n: vec![32, 64],
            seeds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub agents: Vec<usize>,
    pub seeds: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            agents: vec![16, 32, 64],
            seeds: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub episode: EpisodeConfig,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    pub output: OutputConfig,
    pub sweep: SweepConfig,
    pub generalize: GeneralizeConfig,
    pub bench: BenchConfig,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.model.validate()?;
        self.episode.validate()?;
        self.train.validate()?;
        let s = &self.scenario;
        if !(s.r > 0.0) || !(s.sensing_radius > 2.0 * s.r) || !(s.extent > 0.0) {
            return Err(Error::Config(
                "scenario requires r > 0, sensing_radius > 2r and extent > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let text = toml::to_string(&table).expect("table serializes");
        let cfg: Self = toml::from_str(&text).map_err(|e| parse_error(&text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Parses `text` and applies `path=value` overrides before validation.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        // Reports file errors against the file's own line numbers.
        toml::from_str::<Self>(text).map_err(|e| parse_error(text, &e))?;
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_error(text, &e))?;
        // Start from the defaults so overrides can reach fields the file omits.
        let defaults: toml::Table = Self::default().to_toml().parse().expect("defaults parse");
        merge(&mut table, defaults);
        for (k, v) in overrides {
            set_path(&mut table, k, v)?;
        }
        Self::from_table(table)
    }
}

fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (Some(_), _) => {}
            (None, v) => {
                dst.insert(k, v);
            }
        }
    }
}

fn parse_error(text: &str, e: &toml::de::Error) -> Error {
    let (line, column) = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = span.start - before.rfind('\n').map_or(0, |p| p + 1) + 1;
            (line, column)
        }
        None => (0, 0),
    };
    Error::Parse {
        line,
        column,
        message: e.message().to_string(),
    }
}

/// Value literal: TOML syntax when it parses, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path `{path}`")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("`{path}`: `{k}` is not a table"))),
        };
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw));
    Ok(())
}
