//! Per-category integration of two models' result sets.
//!
//! In `route` mode each category is taken wholesale from one source (e.g.
//! everything from model A except `cane`, which comes from model B). In
//! `merge` mode both sources are concatenated and suppressed with Soft-NMS.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coco::{Category, Detection};
use crate::error::{Error, Result};
use crate::softnms::{soft_nms_grouped, NmsParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    A,
    B,
}

impl FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Source::A),
            "B" | "b" => Ok(Source::B),
            other => Err(Error::invalid(format!("unknown source {other:?}; expected A or B"))),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::A => "A",
            Source::B => "B",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Route,
    Merge,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "route" => Ok(Mode::Route),
            "merge" => Ok(Mode::Merge),
            other => Err(Error::invalid(format!("unknown mode {other:?}; expected route or merge"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub default_source: Source,
    /// category id -> source
    pub overrides: BTreeMap<u64, Source>,
    pub mode: Mode,
}

impl Default for RoutingTable {
    fn default() -> Self {
        RoutingTable {
            default_source: Source::A,
            overrides: BTreeMap::new(),
            mode: Mode::Route,
        }
    }
}

/// User-facing routing config, keyed by category name.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingConfig {
    #[serde(default)]
    pub default: Option<Source>,
    #[serde(default)]
    pub overrides: BTreeMap<String, Source>,
    #[serde(default)]
    pub mode: Option<Mode>,
}

impl RoutingConfig {
    /// Parses `"default=A,cane=B"`. Keys other than `default` and `mode` are category names.
    pub fn parse_spec(spec: &str) -> Result<Self> {
        let mut cfg = RoutingConfig::default();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("routing entry {item:?} is not key=value")))?;
            match key.trim() {
                "default" => cfg.default = Some(value.parse()?),
                "mode" => cfg.mode = Some(value.parse()?),
                name => {
                    if cfg.overrides.insert(name.to_string(), value.parse()?).is_some() {
                        return Err(Error::invalid(format!("category {name:?} routed twice")));
                    }
                }
            }
        }
        Ok(cfg)
    }

    /// Resolves category names against `categories`.
    pub fn resolve(&self, categories: &[Category]) -> Result<RoutingTable> {
        let mut overrides = BTreeMap::new();
        let mut problems = Vec::new();
        for (name, &src) in &self.overrides {
            match categories.iter().find(|c| &c.name == name) {
                Some(c) => {
                    overrides.insert(c.id, src);
                }
                None => problems.push(format!("routing names unknown category {name:?}")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(RoutingTable {
            default_source: self.default.unwrap_or(Source::A),
            overrides,
            mode: self.mode.unwrap_or_default(),
        })
    }
}

impl RoutingTable {
    pub fn source_for(&self, category_id: u64) -> Source {
        self.overrides
            .get(&category_id)
            .copied()
            .unwrap_or(self.default_source)
    }

    pub fn validate(&self, categories: &[Category]) -> Result<()> {
        let known: HashSet<u64> = categories.iter().map(|c| c.id).collect();
        let problems: Vec<String> = self
            .overrides
            .keys()
            .filter(|id| !known.contains(id))
            .map(|id| format!("routing override for unknown category id {id}"))
            .collect();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Combines `a` and `b` per category according to `routing`.
///
/// Route mode keeps input order: A's routed detections first, then B's.
/// Merge mode runs [`soft_nms_grouped`] with `nms` over the concatenation.
pub fn integrate_by_category(
    a: &[Detection],
    b: &[Detection],
    routing: &RoutingTable,
    categories: &[Category],
    nms: &NmsParams,
) -> Result<Vec<Detection>> {
    routing.validate(categories)?;
    match routing.mode {
        Mode::Route => Ok(a
            .iter()
            .filter(|d| routing.source_for(d.category_id) == Source::A)
            .chain(b.iter().filter(|d| routing.source_for(d.category_id) == Source::B))
            .cloned()
            .collect()),
        Mode::Merge => {
            let all: Vec<Detection> = a.iter().chain(b).cloned().collect();
            soft_nms_grouped(&all, nms)
        }
    }
}
