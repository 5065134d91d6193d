//! The JSON run configuration and `--key value` overrides.
//!
//! A config names its data (a synthetic [`StreamSpec`] or a manifest path)
//! and a [`TrainPlan`]. Missing plan fields take their defaults. Overrides
//! address a field by its leaf name when that name is unique in the tree,
//! or by a dotted path otherwise (`incremental_sgd.initial_lr`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{config, Result};
use crate::sampler::{load_stream, make_session_stream, SessionStream, StreamSpec};
use crate::trainer::TrainPlan;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<StreamSpec>,
    /// Manifest of an ingested feature stream, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub plan: TrainPlan,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config(e.to_string()))
    }

    /// Reads a config file; a relative manifest path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(m) = &cfg.manifest {
            if m.is_relative() {
                cfg.manifest = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.manifest) {
            (Some(spec), None) => spec.validate()?,
            (None, Some(_)) => {}
            _ => return Err(config("exactly one of `synthetic` and `manifest` must be set")),
        }
        self.plan.validate()
    }

    /// Builds or loads the session stream this config points at.
    pub fn stream(&self) -> Result<SessionStream> {
        self.validate()?;
        match (&self.synthetic, &self.manifest) {
            (Some(spec), _) => make_session_stream(spec, self.plan.seed),
            (_, Some(m)) => load_stream(m),
            _ => unreachable!("validated"),
        }
    }

    /// Applies `(key, value)` overrides in order. Keys may use dashes for
    /// underscores. Values are parsed as JSON when possible and taken as
    /// strings otherwise.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            let key = key.replace('-', "_");
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let path = resolve(&tree, &key)?;
            let mut slot = &mut tree;
            for part in &path {
                slot = slot.get_mut(part).expect("resolved path exists");
            }
            *slot = value;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| config(e.to_string()))?;
        Ok(cfg)
    }
}

fn leaves(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            prefix.push(k.clone());
            out.push(prefix.clone());
            leaves(child, prefix, out);
            prefix.pop();
        }
    }
}

/// Full path of the field named by `key`.
fn resolve(tree: &Value, key: &str) -> Result<Vec<String>> {
    let mut all = Vec::new();
    leaves(tree, &mut Vec::new(), &mut all);
    let wanted: Vec<&str> = key.split('.').collect();
    let hits: Vec<Vec<String>> = all
        .into_iter()
        .filter(|p| p.len() >= wanted.len() && p[p.len() - wanted.len()..].iter().zip(&wanted).all(|(a, b)| a == b))
        .collect();
    match hits.len() {
        0 => Err(config(format!("unknown config key `{key}`"))),
        1 => Ok(hits.into_iter().next().unwrap()),
        _ => {
            let names: Vec<String> = hits.iter().map(|p| p.join(".")).collect();
            Err(config(format!("ambiguous config key `{key}`: {}", names.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::AnchorSign;
    use crate::trainer::{Baseline, LossMode};

    fn base() -> RunConfig {
        RunConfig::from_json(
            r#"{"synthetic": {"base_classes": 4, "sessions": 2, "n_way": 2, "k_shot": 3,
                "input_dim": 5, "separation": 3.0, "variance": 1.0}}"#,
        )
        .unwrap()
    }

    #[test]
    fn partial_plan_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"manifest": "m.json", "plan": {"seed": 7}}"#).unwrap();
        assert_eq!(cfg.plan.seed, 7);
        assert_eq!(cfg.plan.bank, TrainPlan::default().bank);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_json(r#"{"plan": {"lamda": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn needs_exactly_one_source() {
        assert!(RunConfig::default().validate().is_err());
        let mut cfg = base();
        cfg.manifest = Some("x".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn leaf_overrides() {
        let cfg = base()
            .with_overrides([
                ("lambda", "0.05"),
                ("anchor-sign", "attract"),
                ("loss_mode", "triplet"),
                ("baseline", "finetune"),
                ("hinge", "false"),
                ("b_schedule", "[3, 2, 1]"),
                ("k_shot", "5"),
            ])
            .unwrap();
        assert_eq!(cfg.plan.bank.lambda, 0.05);
        assert_eq!(cfg.plan.bank.anchor_sign, AnchorSign::Attract);
        assert_eq!(cfg.plan.loss_mode, LossMode::Triplet);
        assert_eq!(cfg.plan.baseline, Baseline::Finetune);
        assert!(!cfg.plan.hinge);
        assert_eq!(cfg.plan.bank.b_schedule, Some(vec![3, 2, 1]));
        assert_eq!(cfg.synthetic.unwrap().k_shot, 5);
    }

    #[test]
    fn ambiguous_and_dotted_keys() {
        let err = base().with_overrides([("initial_lr", "1.0")]).unwrap_err();
        assert!(err.to_string().contains("ambiguous"), "{err}");
        let cfg = base()
            .with_overrides([("incremental_sgd.initial_lr", "1.0")])
            .unwrap();
        assert_eq!(cfg.plan.incremental_sgd.initial_lr, 1.0);
        assert!(base().with_overrides([("nonsense", "1")]).is_err());
    }

    #[test]
    fn override_type_errors_are_config_errors() {
        let err = base().with_overrides([("lambda", "lots")]).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = base();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }
}
