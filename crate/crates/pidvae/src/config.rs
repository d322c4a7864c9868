//! Run configuration from files and command-line overrides.
//!
//! Two file formats are accepted. The flat format has one `key = value` per
//! line with dotted namespaces:
//!
//! ```text
//! # comments start with '#'
//! experiment = kdv
//! model.n_u = 128
//! train.epochs = 200
//! model.params.alpha.prior_sd = 0.3
//! ```
//!
//! Values are read as JSON when they parse (`0.5`, `true`, `[1, 2]`,
//! `"text"`) and as plain strings otherwise. A file whose first
//! non-blank character is `{` is read as nested JSON instead.
//!
//! Entries are applied over the experiment's defaults. A key may be
//! abbreviated to any dotted suffix that names exactly one setting, so
//! `n_u=32` means `model.n_u=32`.

use std::path::Path;

use pidvae_core::experiment::{Experiment, RunConfig};
use serde_json::{Map, Value};

use crate::error::{io, Error, Result};

/// Everything the user said about the configuration.
#[derive(Debug, Clone, Default)]
pub struct ConfigInput {
    pub experiment: Option<String>,
    pub file: Option<std::path::PathBuf>,
    pub seed: Option<u64>,
    /// `key=value` strings, applied after the file.
    pub overrides: Vec<String>,
}

pub type Entry = (String, Value);

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Parses one `key=value` override.
pub fn parse_override(s: &str) -> Result<Entry> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), parse_value(v))),
        _ => Err(Error::Config(format!("override `{s}` is not of the form key=value"))),
    }
}

/// Parses either file format into a list of dotted entries.
pub fn parse_config_text(text: &str) -> Result<Vec<Entry>> {
    if text.trim_start().starts_with('{') {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("JSON config: {e}")))?;
        let mut out = Vec::new();
        flatten("", &v, &mut out);
        return Ok(out);
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        out.push((k.trim().to_string(), parse_value(v)));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    parse_config_text(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        e => e,
    })
}

/// Objects are expanded; everything else (including arrays) is a leaf.
fn flatten(prefix: &str, v: &Value, out: &mut Vec<Entry>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.clone())),
    }
}

fn leaf_paths(v: &Value) -> Vec<String> {
    let mut out = Vec::new();
    flatten("", v, &mut out);
    out.into_iter().map(|(k, _)| k).collect()
}

/// Full dotted path for `key`: an exact match, or the unique leaf whose
/// path ends with `.key`.
fn resolve_key(key: &str, leaves: &[String]) -> std::result::Result<String, String> {
    if leaves.iter().any(|l| l == key) {
        return Ok(key.to_string());
    }
    let suffix = format!(".{key}");
    let hits: Vec<&String> = leaves.iter().filter(|l| l.ends_with(&suffix)).collect();
    match hits.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(format!("`{key}`: unknown key")),
        many => Err(format!(
            "`{key}`: ambiguous, could be {}",
            many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )),
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut node = root;
    for part in path.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(part))
            .expect("path was resolved against this tree");
    }
    *node = value;
}

fn from_json(v: Value) -> std::result::Result<RunConfig, String> {
    serde_json::from_value(v).map_err(|e| e.to_string())
}

/// Applies `entries` over `base`, reporting every offending key at once.
pub fn apply_entries(base: &RunConfig, entries: &[Entry]) -> Result<RunConfig> {
    let base_json = serde_json::to_value(base).expect("config serializes");
    let leaves = leaf_paths(&base_json);
    let mut merged = base_json.clone();
    let mut errors = Vec::new();
    for (key, value) in entries {
        if key == "experiment" {
            let same = value.as_str() == Some(base_json["experiment"].as_str().unwrap_or_default());
            if !same {
                errors.push(format!("`experiment`: cannot change from {} to {value}", base_json["experiment"]));
            }
            continue;
        }
        match resolve_key(key, &leaves) {
            Ok(path) => {
                // check the entry on its own so type errors name their key
                let mut single = base_json.clone();
                set_path(&mut single, &path, value.clone());
                match from_json(single) {
                    Ok(_) => set_path(&mut merged, &path, value.clone()),
                    Err(e) => errors.push(format!("`{path}`: {e}")),
                }
            }
            Err(e) => errors.push(e),
        }
    }
    // the valid entries are still checked so one run reports every problem
    let config = match from_json(merged) {
        Ok(c) => c,
        Err(e) => {
            errors.push(e);
            return Err(Error::Config(errors.join("; ")));
        }
    };
    if let Err(e) = config.validate() {
        errors.push(match e {
            pidvae_core::Error::Config(msg) => msg,
            e => e.to_string(),
        });
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors.join("; ")));
    }
    Ok(config)
}

fn experiment_entry(entries: &[Entry]) -> Option<String> {
    entries
        .iter()
        .rev()
        .find(|(k, _)| k == "experiment")
        .map(|(_, v)| v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string()))
}

/// Resolves the configuration of one command. `base` is a configuration the
/// command already has (the one stored with an episode); otherwise the
/// experiment's defaults are used. The experiment comes from the flag, the
/// file, or `base`, and must agree between them.
pub fn resolve(input: &ConfigInput, base: Option<&RunConfig>) -> Result<RunConfig> {
    let mut entries = match &input.file {
        Some(path) => read_config_file(path)?,
        None => Vec::new(),
    };
    for o in &input.overrides {
        entries.push(parse_override(o)?);
    }
    let named = input.experiment.clone().or_else(|| experiment_entry(&entries));
    let experiment = match (&named, base) {
        (Some(name), _) => Experiment::parse(name)?,
        (None, Some(b)) => b.experiment,
        (None, None) => {
            return Err(Error::Config(
                "no experiment given (use --experiment, an `experiment` entry, or a config file)".into(),
            ))
        }
    };
    let start = match base {
        Some(b) if b.experiment == experiment => b.clone(),
        Some(b) => {
            return Err(Error::Config(format!(
                "experiment {experiment:?} does not match the episode's {:?}",
                b.experiment
            )))
        }
        None => RunConfig::preset(experiment),
    };
    if let Some(seed) = input.seed {
        entries.push(("seed".into(), Value::from(seed)));
    }
    apply_entries(&start, &entries)
}

/// The configuration as flat `key = value` text, readable by
/// [`parse_config_text`].
pub fn to_flat_text(config: &RunConfig) -> String {
    let mut out = Vec::new();
    flatten("", &serde_json::to_value(config).expect("config serializes"), &mut out);
    out.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
