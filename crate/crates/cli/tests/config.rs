use std::io::Write;

use cpdae_cli::config::{
    keys_help, nearest_key, parse_layer, read_layer, resolve, resolve_from, schema, ConfigError, Kind, Source,
    KEY_DOCS,
};
use cpdae_core::experiment::ExperimentConfig;

fn flags(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn schema_covers_every_documented_key_once() {
    let keys: Vec<String> = schema().into_iter().map(|k| k.key).collect();
    let documented: Vec<&str> = KEY_DOCS.iter().map(|(k, _)| *k).collect();
    assert_eq!(keys, documented);
    assert!(!keys.iter().any(|k| k == "model.vocab_size"));
}

#[test]
fn help_lists_every_key_with_default_and_doc() {
    let help = keys_help();
    for spec in schema() {
        let line = help
            .lines()
            .find(|l| l.trim_start().starts_with(&format!("{} =", spec.key)))
            .unwrap_or_else(|| panic!("{} missing from help", spec.key));
        let default = match &spec.default {
            serde_json::Value::String(s) => s.clone(),
            v => v.to_string(),
        };
        assert!(line.contains(&default), "{line}");
        let doc = KEY_DOCS.iter().find(|(k, _)| *k == spec.key).unwrap().1;
        assert!(line.ends_with(doc), "{line}");
    }
}

#[test]
fn defaults_match_the_experiment_defaults() {
    let r = resolve(None, &[]).unwrap();
    assert_eq!(r.config, ExperimentConfig::default());
    assert_eq!(r.config.train.lambda, 0.1);
    assert!(r.provenance.values().all(|s| *s == Source::Default));
}

#[test]
fn flag_beats_file_beats_default() {
    let layer = parse_layer("# desk run\n[train]\nlambda = 0.1\nsteps = 77\n", "run.cfg").unwrap();
    let r = resolve(Some((&layer, "run.cfg")), &flags(&[("train.lambda", "0.2")])).unwrap();
    assert_eq!(r.config.train.lambda, 0.2);
    assert_eq!(r.config.train.steps, 77);
    assert_eq!(r.provenance["train.lambda"], Source::Flag);
    assert_eq!(r.provenance["train.steps"], Source::File("run.cfg".into()));
    assert_eq!(r.provenance["train.lr"], Source::Default);
}

#[test]
fn type_errors_name_the_key() {
    let err = resolve(None, &flags(&[("train.lambda", "abc")])).unwrap_err();
    match &err {
        ConfigError::Type { key, expected, value } => {
            assert_eq!(key, "train.lambda");
            assert_eq!(*expected, Kind::Float);
            assert_eq!(value, "abc");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("train.lambda"));
    assert!(matches!(
        resolve(None, &flags(&[("train.steps", "-3")])),
        Err(ConfigError::Type { .. })
    ));
}

#[test]
fn unknown_keys_suggest_the_nearest() {
    let err = resolve(None, &flags(&[("train.lamda", "0.2")])).unwrap_err();
    assert!(matches!(&err, ConfigError::UnknownKey { suggestion: Some(s), .. } if s == "train.lambda"));
    assert!(err.to_string().contains("did you mean `train.lambda`"));
    assert_eq!(nearest_key("completely.unrelated.thing.here"), None);
}

#[test]
fn bad_enumerations_name_the_key() {
    let err = resolve(None, &flags(&[("train.loss_mode", "bogus")])).unwrap_err();
    assert!(err.to_string().contains("train.loss_mode"), "{err}");
}

#[test]
fn semantic_validation_runs_after_layering() {
    let err = resolve(None, &flags(&[("model.heads", "3")])).unwrap_err();
    assert!(matches!(err, ConfigError::Semantic(_)), "{err:?}");
}

#[test]
fn syntax_errors_carry_the_line() {
    let err = parse_layer("train.lambda = 0.1\nthis line is wrong\n", "x.cfg").unwrap_err();
    assert!(matches!(err, ConfigError::Syntax { line: 2, .. }), "{err:?}");
}

#[test]
fn run_manifest_replays_as_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run_manifest.json");
    let mut f = std::fs::File::create(&path).unwrap();
    write!(f, r#"{{"subcommand": "pretrain", "config": {{"train.lambda": 0.3, "train.loss_mode": "no_cl"}}}}"#).unwrap();
    drop(f);
    assert_eq!(read_layer(&path).unwrap().entries.len(), 2);
    let r = resolve_from(Some(&path), &[]).unwrap();
    assert_eq!(r.config.train.lambda, 0.3);
    assert_eq!(r.config.train.loss_mode.as_str(), "no_cl");
}
