//! Config files: TOML or JSON mirroring `RunConfig`, plus an `[output]`
//! table. Rule tables may omit fields; missing ones come from the preset.

use std::path::{Path, PathBuf};

use distill_lab::diffusion::NoiseSchedule;
use distill_lab::optim::{AdamConfig, Init, Parameterization, SceneSpec, Weighting};
use distill_lab::rules::{Preset, RuleConfig, RuleKind};
use distill_lab::{Error, Result, RunConfig};
use serde::Deserialize;
use serde_json::{Map, Value};

pub const ORACLE_URL_ENV: &str = "DISTILL_LAB_ORACLE_URL";

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: Option<PathBuf>,
    pub record_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
pub enum PresetName {
    #[default]
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "long-run")]
    LongRun,
}

impl From<PresetName> for Preset {
    fn from(p: PresetName) -> Self {
        match p {
            PresetName::TwoD => Preset::TwoD,
            PresetName::LongRun => Preset::LongRun,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub preset: PresetName,
    #[serde(default)]
    pub rule: Option<RuleConfig>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub timestep_range: Option<(f64, f64)>,
    #[serde(default)]
    pub weighting: Option<Weighting>,
    #[serde(default)]
    pub scene: Option<SceneSpec>,
    #[serde(default)]
    pub parameterization: Option<Parameterization>,
    #[serde(default)]
    pub init: Option<Init>,
    #[serde(default)]
    pub record_every: Option<usize>,
    #[serde(default)]
    pub optimizer: Option<AdamConfig>,
    #[serde(default)]
    pub schedule: Option<NoiseSchedule>,
    #[serde(default)]
    pub output: OutputSection,
}

fn config_err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.into(),
        message: message.to_string(),
    }
}

/// Fills omitted rule fields from the preset for that rule kind.
fn complete_rule(rule: &mut Map<String, Value>, preset: Preset) -> std::result::Result<(), String> {
    let kind = match rule.get("kind") {
        Some(Value::String(k)) => k.parse::<RuleKind>().map_err(|e| e.to_string())?,
        Some(_) => return Err("rule.kind must be a string".into()),
        None => return Err("rule table needs a `kind`".into()),
    };
    let defaults = serde_json::to_value(RuleConfig::preset(kind, preset)).expect("rule serializes");
    if let Value::Object(defaults) = defaults {
        for (k, v) in defaults {
            rule.entry(k).or_insert(v);
        }
    }
    Ok(())
}

pub fn parse_config(text: &str, path: &Path) -> Result<CliConfig> {
    let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    let mut value: Value = if is_json {
        serde_json::from_str(text).map_err(|e| config_err(path, e))?
    } else {
        toml::from_str(text).map_err(|e| config_err(path, e))?
    };
    // a run directory's config.json wraps the config with its schema version
    if let Some(inner) = value.as_object_mut().and_then(|o| {
        (o.contains_key("schema_version") && o.len() == 2).then(|| o.remove("config")).flatten()
    }) {
        value = inner;
    }
    let obj = value
        .as_object_mut()
        .ok_or_else(|| config_err(path, "config must be a table"))?;
    let preset: Preset = match obj.get("preset") {
        Some(p) => serde_json::from_value::<PresetName>(p.clone())
            .map_err(|e| config_err(path, format!("preset: {e} (expected \"2d\" or \"long-run\")")))?
            .into(),
        None => Preset::TwoD,
    };
    if let Some(rule) = obj.get_mut("rule") {
        match rule {
            Value::String(kind) => {
                let mut m = Map::new();
                m.insert("kind".into(), Value::String(kind.clone()));
                *rule = Value::Object(m);
            }
            Value::Object(_) => {}
            _ => return Err(config_err(path, "rule must be a name or a table")),
        }
        if let Value::Object(m) = rule {
            complete_rule(m, preset).map_err(|e| config_err(path, e))?;
        }
    }
    serde_json::from_value(value).map_err(|e| config_err(path, e))
}

pub fn load_config(path: &Path) -> Result<CliConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    parse_config(&text, path)
}

impl CliConfig {
    pub fn preset(&self) -> Preset {
        self.preset.into()
    }

    /// The run config for `rule`, falling back to the file's own rule.
    pub fn to_run_config(&self, rule: Option<RuleConfig>) -> Result<RunConfig> {
        let rule = rule
            .or(self.rule)
            .ok_or_else(|| Error::Config("config has no [rule] table".into()))?;
        let default_steps = match self.preset() {
            Preset::TwoD => 1000,
            Preset::LongRun => 25_000,
        };
        let mut cfg = RunConfig::new(rule, self.steps.unwrap_or(default_steps), self.seed.unwrap_or(0));
        cfg.label = self.label.clone();
        if let Some(r) = self.timestep_range {
            cfg.timestep_range = r;
        }
        if let Some(w) = self.weighting {
            cfg.weighting = w;
        }
        if let Some(s) = &self.scene {
            cfg.scene = s.clone();
        }
        if let SceneSpec::Remote(remote) = &mut cfg.scene {
            if let Ok(url) = std::env::var(ORACLE_URL_ENV) {
                if !url.is_empty() {
                    remote.endpoint = url;
                }
            }
        }
        if let Some(p) = &self.parameterization {
            cfg.parameterization = p.clone();
        }
        if let Some(i) = &self.init {
            cfg.init = i.clone();
        }
        cfg.record_every = match (self.record_every, self.output.record_every) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!(
                    "record_every given twice with different values ({a} and {b})"
                )))
            }
            (a, b) => a.or(b).unwrap_or(1),
        };
        if let Some(o) = self.optimizer {
            cfg.optimizer = o;
        }
        if let Some(s) = &self.schedule {
            cfg.schedule = s.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rule for `kind` in a sweep: the file's rule when it has that kind,
    /// otherwise the preset.
    pub fn rule_for(&self, kind: RuleKind) -> RuleConfig {
        match self.rule {
            Some(r) if r.kind() == kind => r,
            _ => RuleConfig::preset(kind, self.preset()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<CliConfig> {
        parse_config(text, Path::new("test.toml"))
    }

    #[test]
    fn partial_rule_is_completed_from_preset() {
        let c = parse("steps = 10\n[rule]\nkind = \"tbsd\"\nbeta = 500\n").unwrap();
        assert_eq!(
            c.rule,
            Some(RuleConfig::Tbsd {
                alpha: 5.0,
                beta: 500.0,
                gamma: 2.0
            })
        );
        let c = parse("preset = \"long-run\"\nrule = \"csd\"\n").unwrap();
        assert_eq!(c.rule, Some(RuleConfig::preset(RuleKind::Csd, Preset::LongRun)));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("stepz = 10\n").is_err());
        assert!(parse("[rule]\nkind = \"sds\"\nscale = 3\n").is_err());
        assert!(parse("[output]\ndir = \"x\"\n").is_err());
        assert!(parse("[rule]\nkind = \"magic\"\n").is_err());
    }

    #[test]
    fn malformed_toml_names_the_line() {
        let err = parse("steps = 10\n[rule\nkind = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn json_configs_parse() {
        let c = parse_config(r#"{"rule":{"kind":"sds"},"steps":5,"scene":"canonical"}"#, Path::new("c.json")).unwrap();
        let run = c.to_run_config(None).unwrap();
        assert_eq!(run.rule, RuleConfig::Sds { s: 100.0 });
        assert_eq!(run.steps, 5);
    }

    #[test]
    fn record_every_from_output_section() {
        let c = parse("rule = \"sds\"\n[output]\nrecord_every = 7\n").unwrap();
        assert_eq!(c.to_run_config(None).unwrap().record_every, 7);
        let c = parse("rule = \"sds\"\nrecord_every = 3\n[output]\nrecord_every = 7\n").unwrap();
        assert!(c.to_run_config(None).is_err());
    }
}
