use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use romgait::evalkit::{Alignment, DEFAULT_EVAL_EPISODES};
use romgait::ppo::TeacherConfig;
use romgait::student::StudentConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

pub const DEFAULT_REFERENCE_FRAMES: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordConfig {
    /// Frames to record.
    pub steps: usize,
    pub seed: u64,
    pub export_csv: bool,
}

impl Default for RecordConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_REFERENCE_FRAMES, seed: 0, export_csv: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Rollout length cap; 0 means the reference length.
    pub max_steps: usize,
    pub alignment: Alignment,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { episodes: DEFAULT_EVAL_EPISODES, seed: 0, max_steps: 0, alignment: Alignment::None }
    }
}

/// Everything the pipeline can be configured with, one table per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub teacher: TeacherConfig,
    pub record: RecordConfig,
    pub student: StudentConfig,
    pub evaluate: EvaluateConfig,
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Defaults, then the optional file, then each `key.path=value` override.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut tree = Value::try_from(RunConfig::default())?;
        let known = known_tree()?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let user: Value = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            check_keys(&user, &known, "")?;
            merge(&mut tree, user);
        }
        for s in sets {
            let (key, raw) = s.split_once('=').ok_or_else(|| anyhow!("override {s:?} is not of the form key=value"))?;
            set_path(&mut tree, &known, key.trim(), raw.trim())?;
        }
        tree.try_into().map_err(|e: toml::de::Error| anyhow!("invalid configuration: {e}"))
    }
}

/// Default tree with optional fields filled in, so their keys are recognised.
fn known_tree() -> Result<Value> {
    let mut c = RunConfig::default();
    c.student.sac.entropy_target = Some(0.0);
    Ok(Value::try_from(c)?)
}

fn check_keys(user: &Value, known: &Value, prefix: &str) -> Result<()> {
    if let (Value::Table(u), Value::Table(k)) = (user, known) {
        for (key, v) in u {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                Some(kv) => check_keys(v, kv, &path)?,
                None => bail!("unknown config key `{path}`"),
            }
        }
    }
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn parse_scalar(raw: &str) -> Value {
    // bare words become strings so `reward_mode=exponential` works unquoted
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(tree: &mut Value, known: &Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut k = known;
    for p in &parts {
        k = k.get(p).ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
    }
    if k.is_table() {
        bail!("config key `{key}` is a table; set one of its fields");
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("config key `{key}` does not name a field"))?
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    let table = node.as_table_mut().ok_or_else(|| anyhow!("config key `{key}` does not name a field"))?;
    let mut value = parse_scalar(raw);
    // keep floats floats when the user types `1`
    if let (true, Value::Integer(i)) = (k.is_float(), &value) {
        value = Value::Float(*i as f64);
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn write_resolved(config: &RunConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join("config.toml"), config.to_toml()?).with_context(|| format!("writing {}", dir.join("config.toml").display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_a_toml_round_trip() {
        let text = RunConfig::default().to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[teacher.episode]\nalpha = 3.0\n[student.blend]\neta = 0.25\n").unwrap();
        let c = RunConfig::resolve(Some(&path), &["student.blend.eta=1".into(), "teacher.episode.reward_mode=exponential".into()]).unwrap();
        assert_eq!(c.teacher.episode.alpha, 3.0);
        assert_eq!(c.student.blend.eta, 1.0);
        assert_eq!(c.teacher.episode.reward_mode, romgait::env::RewardMode::Exponential);
        assert_eq!(c.student.sac.batch_size, StudentConfig::default().sac.batch_size);
    }

    #[test]
    fn unknown_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[teacher.episode]\nalhpa = 3.0\n").unwrap();
        let err = RunConfig::resolve(Some(&path), &[]).unwrap_err().to_string();
        assert!(err.contains("teacher.episode.alhpa"), "{err}");
        let err = RunConfig::resolve(None, &["student.nope=1".into()]).unwrap_err().to_string();
        assert!(err.contains("student.nope"), "{err}");
    }

    #[test]
    fn optional_entropy_target_can_be_set() {
        let c = RunConfig::resolve(None, &["student.sac.entropy_target=-3".into()]).unwrap();
        assert_eq!(c.student.sac.entropy_target, Some(-3.0));
    }
}
