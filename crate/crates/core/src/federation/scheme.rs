//! The scheme matrix: which coordinates are exchanged, whether that set is
//! fixed, whether unselected weights are pinned to `w0`, and whether DP is on.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Top-K by accumulated gradient magnitude on public data.
    Topk,
    Random,
    /// Every coordinate (no compression).
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeSpec {
    pub selection: Selection,
    pub fixed_across_rounds: bool,
    pub reinit_nonselected: bool,
    pub dp: bool,
}

impl SchemeSpec {
    /// A fresh random index set is drawn every round.
    pub fn per_round_selection(&self) -> bool {
        self.selection == Selection::Random && !self.fixed_across_rounds
    }

    /// Whether the server-to-client message is the K retained values rather
    /// than the full model. Schemes whose set changes every round ship the
    /// full model downstream.
    pub fn downstream_compressed(&self) -> bool {
        !self.per_round_selection()
    }
}

/// Named schemes. Each has a DP twin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeName {
    FlStd,
    FlTop,
    FlTopBis,
    FlBasic,
    FlBas2,
    FlBas3,
    FlBas4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Scheme {
    pub name: SchemeName,
    pub dp: bool,
}

impl SchemeName {
    pub const ALL: [SchemeName; 7] = [
        SchemeName::FlStd,
        SchemeName::FlTop,
        SchemeName::FlTopBis,
        SchemeName::FlBasic,
        SchemeName::FlBas2,
        SchemeName::FlBas3,
        SchemeName::FlBas4,
    ];

    fn stem(self) -> &'static str {
        match self {
            SchemeName::FlStd => "fl-std",
            SchemeName::FlTop => "fl-top",
            SchemeName::FlTopBis => "fl-top-bis",
            SchemeName::FlBasic => "fl-basic",
            SchemeName::FlBas2 => "fl-bas-2",
            SchemeName::FlBas3 => "fl-bas-3",
            SchemeName::FlBas4 => "fl-bas-4",
        }
    }
}

impl Scheme {
    pub fn new(name: SchemeName, dp: bool) -> Self {
        Self { name, dp }
    }

    pub fn spec(&self) -> SchemeSpec {
        use Selection::*;
        let (selection, fixed_across_rounds, reinit_nonselected) = match self.name {
            SchemeName::FlStd => (All, true, false),
            SchemeName::FlTop => (Topk, true, true),
            SchemeName::FlTopBis => (Topk, true, false),
            SchemeName::FlBasic => (Random, false, true),
            SchemeName::FlBas2 => (Random, false, false),
            SchemeName::FlBas3 => (Random, true, true),
            SchemeName::FlBas4 => (Random, true, false),
        };
        SchemeSpec {
            selection,
            fixed_across_rounds,
            reinit_nonselected,
            dp: self.dp,
        }
    }

    /// Every accepted identifier, e.g. `fl-top`, `fl-top-dp`.
    pub fn valid_names() -> Vec<String> {
        SchemeName::ALL
            .iter()
            .flat_map(|n| [Scheme::new(*n, false), Scheme::new(*n, true)])
            .map(|s| s.to_string())
            .collect()
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name.stem())?;
        if self.dp {
            f.write_str("-dp")?;
        }
        Ok(())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (stem, dp) = match lower.strip_suffix("-dp") {
            Some(stem) => (stem, true),
            None => (lower.as_str(), false),
        };
        SchemeName::ALL
            .iter()
            .find(|n| n.stem() == stem)
            .map(|&name| Scheme { name, dp })
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown scheme '{s}'; valid names: {}",
                    Scheme::valid_names().join(", ")
                ))
            })
    }
}

impl Serialize for Scheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Scheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|e: Error| match e {
            Error::Config(msg) => serde::de::Error::custom(msg),
            e => serde::de::Error::custom(e),
        })
    }
}
