//! `--section.key value` flags that mirror configuration keys.
//!
//! These are pulled out of the argument list before clap sees it, so any
//! configuration key can be overridden without declaring a flag for each.

use std::path::Path;

use infkan_core::config::{FlatConfig, KEYS};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "INFKAN_SEED";

/// Subcommands that accept configuration overrides.
const WITH_OVERRIDES: &[&str] = &["train", "sweep"];

/// Splits `args` into the arguments for clap and `(key, value)` overrides.
pub fn extract(args: Vec<String>) -> CliResult<(Vec<String>, Vec<(String, String)>)> {
    let takes_overrides = args.get(1).is_some_and(|c| WITH_OVERRIDES.contains(&c.as_str()));
    if !takes_overrides {
        return Ok((args, Vec::new()));
    }
    let mut rest = Vec::with_capacity(args.len());
    let mut pairs = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if !(key.contains('.') || KEYS.contains(&key)) {
            rest.push(a);
            continue;
        }
        if !KEYS.contains(&key) {
            return Err(CliError::usage(format!("unknown configuration key `{key}`")));
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| CliError::usage(format!("missing value for `--{key}`")))?,
        };
        pairs.push((key.to_string(), value));
    }
    Ok((rest, pairs))
}

/// Loads the configuration file (if any), then applies `INFKAN_SEED` and
/// the command-line overrides in that order.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> CliResult<FlatConfig> {
    let mut flat = match path {
        Some(p) => FlatConfig::load(p)?,
        None => FlatConfig::default(),
    };
    if let Ok(seed) = std::env::var(SEED_ENV) {
        if seed.trim().parse::<u64>().is_err() {
            return Err(CliError::usage(format!("{SEED_ENV} must be a non-negative integer, got `{seed}`")));
        }
        flat.set("seed", seed.trim())?;
    }
    for (k, v) in overrides {
        flat.set(k, v)?;
    }
    flat.resolve()?;
    Ok(flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dotted_flags_become_overrides() {
        let (rest, pairs) = extract(args(&[
            "infkan", "train", "c.toml", "--optim.lr", "0.1", "--out", "d", "--seed=4",
        ]))
        .unwrap();
        assert_eq!(rest, args(&["infkan", "train", "c.toml", "--out", "d"]));
        assert_eq!(
            pairs,
            vec![("optim.lr".to_string(), "0.1".to_string()), ("seed".to_string(), "4".to_string())]
        );
    }

    #[test]
    fn unknown_dotted_key_is_named() {
        let e = extract(args(&["infkan", "train", "--optim.lrr", "1"])).unwrap_err();
        assert!(e.to_string().contains("optim.lrr"));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn generate_keeps_its_own_seed_flag() {
        let a = args(&["infkan", "generate", "spiral", "--seed", "7"]);
        let (rest, pairs) = extract(a.clone()).unwrap();
        assert_eq!(rest, a);
        assert!(pairs.is_empty());
    }

    #[test]
    fn missing_value_is_usage_error() {
        assert!(extract(args(&["infkan", "train", "--optim.lr"])).is_err());
    }
}
