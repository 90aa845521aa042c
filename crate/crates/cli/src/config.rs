//! JSON config overlay. Values from the config file replace defaults, but
//! never values given on the command line or through the environment.

use std::path::Path;

use anyhow::{Context, Result};
use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::run::UsageError;

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    top: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(top)) => Ok(Self { top }),
            Ok(_) => Err(UsageError::new("config file must hold a JSON object").into()),
            Err(e) => Err(UsageError::new(format!("config file is not valid JSON: {e}")).into()),
        }
    }

    fn section(&self, name: &str) -> Result<Option<&Map<String, Value>>> {
        match self.top.get(name) {
            None => Ok(None),
            Some(Value::Object(m)) => Ok(Some(m)),
            Some(_) => Err(UsageError::new(format!("config section {name:?} must be an object")).into()),
        }
    }

    /// Applies top-level keys, then keys of the `section` object. Top-level
    /// keys the target does not know are ignored, so one file can serve
    /// several subcommands; unknown keys inside a section are errors.
    pub fn overlay<T>(&self, target: &T, matches: &ArgMatches, section: Option<&str>) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
    {
        let mut value = serde_json::to_value(target).expect("arguments serialize");
        let fields = value.as_object_mut().expect("arguments serialize to an object");
        let from_user =
            |key: &str| matches!(matches.value_source(key), Some(ValueSource::CommandLine | ValueSource::EnvVariable));
        let mut apply = |src: &Map<String, Value>, strict: bool, what: &str| -> Result<()> {
            for (key, v) in src {
                if !fields.contains_key(key) {
                    if strict {
                        return Err(UsageError::new(format!("unknown key {key:?} in config section {what:?}")).into());
                    }
                    continue;
                }
                if !from_user(key) {
                    fields.insert(key.clone(), v.clone());
                }
            }
            Ok(())
        };
        apply(&self.top, false, "")?;
        if let Some(name) = section {
            if let Some(sec) = self.section(name)? {
                apply(sec, true, name)?;
            }
        }
        serde_json::from_value(value).map_err(|e| UsageError::new(format!("config value: {e}")).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{Args, Command, FromArgMatches};
    use serde::Deserialize;

    #[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
    struct Demo {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_delimiter = ',')]
        c: Vec<f64>,
        #[arg(long)]
        lenient: bool,
    }

    fn parse(argv: &[&str]) -> (Demo, ArgMatches) {
        let cmd = Demo::augment_args(Command::new("demo"));
        let m = cmd.try_get_matches_from(argv).unwrap();
        (Demo::from_arg_matches(&m).unwrap(), m)
    }

    #[test]
    fn config_fills_defaults() {
        let (d, m) = parse(&["demo"]);
        let cfg = ConfigFile::parse(r#"{"seed": 7, "other": 1, "demo": {"c": [1, 10], "lenient": true}}"#).unwrap();
        let out = cfg.overlay(&d, &m, Some("demo")).unwrap();
        assert_eq!(out, Demo { seed: 7, c: vec![1.0, 10.0], lenient: true });
    }

    #[test]
    fn flags_win() {
        let (d, m) = parse(&["demo", "--seed", "3", "--c", "5"]);
        let cfg = ConfigFile::parse(r#"{"demo": {"seed": 7, "c": [1]}}"#).unwrap();
        let out = cfg.overlay(&d, &m, Some("demo")).unwrap();
        assert_eq!(out.seed, 3);
        assert_eq!(out.c, vec![5.0]);
    }

    #[test]
    fn unknown_section_key_is_rejected() {
        let (d, m) = parse(&["demo"]);
        let cfg = ConfigFile::parse(r#"{"demo": {"sede": 7}}"#).unwrap();
        assert!(cfg.overlay(&d, &m, Some("demo")).is_err());
        assert!(ConfigFile::parse("[1]").is_err());
    }
}
