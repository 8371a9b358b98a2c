//! Effective-config resolution: explicit flags over the JSON config file over
//! `PMOE_SEED` over built-in defaults.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub const SEED_ENV: &str = "PMOE_SEED";

/// Recursively overlays `top` onto `base`. Objects merge key by key; any
/// other value replaces what was there.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, top) => *slot = top,
    }
}

fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::Usage(format!("config {} must hold a JSON object", path.display())));
    }
    Ok(value)
}

/// Seed from the environment, if set.
pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Builds the effective config of type `C`. `flags` must serialize only the
/// options given on the command line.
pub fn resolve<C>(flags: &impl Serialize, file: Option<&Path>) -> Result<C, CliError>
where
    C: Serialize + DeserializeOwned + Default,
{
    let mut value = serde_json::to_value(C::default()).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(seed) = env_seed()? {
        if let Value::Object(map) = &mut value {
            if map.contains_key("seed") {
                map.insert("seed".into(), Value::from(seed));
            }
        }
    }
    if let Some(path) = file {
        merge(&mut value, read_config_file(path)?);
    }
    let explicit = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))?;
    merge(&mut value, explicit);
    if let Value::Object(map) = &mut value {
        map.remove("config");
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("bad configuration: {e}")))
}

/// Prints the effective config to stdout as one JSON object.
pub fn echo(command: &str, config: &impl Serialize) -> Result<(), CliError> {
    let mut map = Map::new();
    map.insert("command".into(), Value::from(command));
    map.insert(
        "config".into(),
        serde_json::to_value(config).map_err(|e| CliError::Usage(e.to_string()))?,
    );
    println!("{}", Value::Object(map));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_prefers_top_and_recurses() {
        let mut base = json!({"a": 1, "b": {"x": 1, "y": 2}, "c": [1]});
        merge(&mut base, json!({"b": {"y": 3}, "c": [2, 3], "d": null}));
        assert_eq!(base, json!({"a": 1, "b": {"x": 1, "y": 3}, "c": [2, 3], "d": null}));
    }
}
