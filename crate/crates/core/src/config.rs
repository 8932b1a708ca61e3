//! Run configuration files and ablation presets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::adversarial::AdvMode;
use crate::distill::DistillMode;
use crate::trainer::RunConfig;
use crate::{Error, Result};

/// Parse a JSON run configuration. Missing keys take defaults, unknown keys
/// are rejected with their full path, and the result is validated.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let text = if text.trim().is_empty() { "{}" } else { text };
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let msg = e.into_inner().to_string();
        Error::Config { key, msg }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Canonical JSON of a configuration.
pub fn config_json(cfg: &RunConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("configuration serialises")
}

/// SHA-256 of the canonical JSON.
pub fn config_checksum(cfg: &RunConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("configuration serialises");
    hex::encode(Sha256::digest(&json))
}

/// Rows of the ablation table, in their fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Preset {
    Baseline,
    Same,
    Fusing,
    FusingSingle,
    FusingCoupled,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Baseline,
        Preset::Same,
        Preset::Fusing,
        Preset::FusingSingle,
        Preset::FusingCoupled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Same => "same",
            Preset::Fusing => "fusing",
            Preset::FusingSingle => "fusing+single",
            Preset::FusingCoupled => "fusing+coupled",
        }
    }

    /// `cfg` with the distillation and adversarial switches of this row.
    /// The baseline student sees real images only.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        let (distill, adv) = match self {
            Preset::Baseline => (DistillMode::Off, AdvMode::Off),
            Preset::Same => (DistillMode::SameOnly, AdvMode::Off),
            Preset::Fusing => (DistillMode::ScaleFusing, AdvMode::Off),
            Preset::FusingSingle => (DistillMode::ScaleFusing, AdvMode::Single),
            Preset::FusingCoupled => (DistillMode::ScaleFusing, AdvMode::Coupled),
        };
        c.distill.mode = distill;
        c.adv.mode = adv;
        if self == Preset::Baseline {
            c.terms.lane_virtual = 0.0;
        }
        c
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| {
                Error::config(
                    "ablation",
                    format!("unknown preset `{s}`; expected one of baseline, same, fusing, fusing+single, fusing+coupled"),
                )
            })
    }
}

/// Parse a comma-separated preset list into table order, without repeats.
pub fn parse_presets(list: &str) -> Result<Vec<Preset>> {
    let mut out: Vec<Preset> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Preset::from_str)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::config("ablation", "no presets given"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
        assert_eq!(parse_config("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        match parse_config(r#"{"repaint": {"gian": 2.0}}"#) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "repaint.gian"),
            other => panic!("{other:?}"),
        }
        match parse_config(r#"{"sed": 1}"#) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "sed"),
            other => panic!("{other:?}"),
        }
        match parse_config(r#"{"repaint": {"gain": "big"}}"#) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "repaint.gain"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_named() {
        match parse_config(r#"{"repaint": {"gain": -1}}"#) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "repaint.gain"),
            other => panic!("{other:?}"),
        }
        match parse_config(r#"{"adv": {"g_weight": -0.5}}"#) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "adv.g_weight"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_preserves_checksum() {
        let text = r#"{"seed": 7, "distill": {"mode": "same_only"}, "optimizer": {"kind": "adaptive", "beta1": 0.9, "beta2": 0.99, "eps": 1e-8}}"#;
        let a = parse_config(text).unwrap();
        let b = parse_config(&config_json(&a)).unwrap();
        assert_eq!(a, b);
        assert_eq!(config_checksum(&a), config_checksum(&b));
        assert_ne!(config_checksum(&a), config_checksum(&RunConfig::default()));
    }

    #[test]
    fn presets_parse_in_table_order() {
        let p = parse_presets("fusing+coupled,baseline,same,baseline").unwrap();
        assert_eq!(p, vec![Preset::Baseline, Preset::Same, Preset::FusingCoupled]);
        assert!(parse_presets("fusing+dual").is_err());
        let c = Preset::Same.apply(&RunConfig::default());
        assert_eq!(c.distill.mode, DistillMode::SameOnly);
        assert_eq!(c.adv.mode, AdvMode::Off);
        let b = Preset::Baseline.apply(&RunConfig::default());
        assert!(!b.uses_virtual());
    }
}
