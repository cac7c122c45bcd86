//! TOML experiment configuration with environment overrides.
//!
//! Every section is optional and falls back to defaults:
//!
//! ```toml
//! seeds = [0, 1, 2, 3, 4]
//!
//! [data]          # num_classes, base_fraction, shots_per_base_class,
//!                 # eval_samples_per_class, separability, feature_noise,
//!                 # domain_shift, class_jitter, seed
//! [encoder]       # visual_layers, text_layers, visual_dim, text_dim, heads,
//!                 # patches, patch_width, token_seq_len, vocab_size,
//!                 # joint_dim, temperature
//! [prompts]       # visual_depth, text_depth, visual_len, text_len
//! [adapter]       # mode = "dense" | "low_rank" | "bottleneck", rank
//! [image_adapter] # same keys; presence enables the image-side adapter
//! [train]         # learning_rate, batch_size, epochs,
//!                 # optimizer = "adadelta" | "sgd",
//!                 # schedule = "cosine" | "constant", seed
//! [ensemble]      # beta, epsilon
//! [pretrain]      # classes, samples_per_class, min_separability,
//!                 # max_separability, feature_noise, ridge
//! ```
//!
//! `APEX_<SECTION>_<KEY>` overrides one key, e.g. `APEX_TRAIN_EPOCHS=3` or
//! `APEX_DATA_SEPARABILITY=4.0`; `APEX_SEEDS="[1, 2]"` sets the seed list.
//! Values are parsed as TOML literals and fall back to bare strings, so
//! `APEX_ADAPTER_MODE=low_rank` works. Unknown sections or keys are errors.

use std::path::Path;

use toml::{Table, Value};

use crate::error::{HarnessError, Result};
use crate::experiment::ExperimentConfig;

const PREFIX: &str = "APEX_";

/// Longest first so `image_adapter` wins over `adapter`.
const SECTIONS: &[&str] = &[
    "image_adapter",
    "pretrain",
    "ensemble",
    "encoder",
    "prompts",
    "adapter",
    "train",
    "data",
];

const TOP_LEVEL: &[&str] = &["seeds"];

pub fn load_config(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?,
        None => String::new(),
    };
    parse_config(&text, env)
}

pub fn parse_config(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<ExperimentConfig> {
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| HarnessError::Config(format!("invalid TOML: {e}")))?;
    let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(PREFIX)).collect();
    // Deterministic regardless of the environment's iteration order.
    overrides.sort();
    for (name, raw) in overrides {
        apply_override(&mut table, &name, &raw)?;
    }
    let config: ExperimentConfig = table
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
    let echoed = Table::try_from(&config).map_err(|e| HarnessError::Config(e.to_string()))?;
    reject_unknown(&table, &echoed, "")?;
    config.validate()?;
    Ok(config)
}

fn apply_override(table: &mut Table, name: &str, raw: &str) -> Result<()> {
    let rest = name[PREFIX.len()..].to_ascii_lowercase();
    let value = parse_value(raw);
    if TOP_LEVEL.contains(&rest.as_str()) {
        table.insert(rest, value);
        return Ok(());
    }
    let (section, key) = SECTIONS
        .iter()
        .find_map(|s| {
            rest.strip_prefix(s)
                .and_then(|r| r.strip_prefix('_'))
                .filter(|k| !k.is_empty())
                .map(|k| (*s, k))
        })
        .ok_or_else(|| HarnessError::Config(format!("{name} does not name a config section and key")))?;
    let entry = table
        .entry(section)
        .or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(HarnessError::Config(format!("[{section}] is not a table"))),
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn reject_unknown(given: &Table, known: &Table, path: &str) -> Result<()> {
    for (key, value) in given {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match (value, known.get(key)) {
            (_, None) => return Err(HarnessError::Config(format!("unknown config key {full}"))),
            (Value::Table(g), Some(Value::Table(k))) => reject_unknown(g, k, &full)?,
            _ => {}
        }
    }
    Ok(())
}

/// The configuration as TOML, suitable for [`parse_config`].
pub fn to_toml(config: &ExperimentConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| HarnessError::Serialize(e.to_string()))
}
