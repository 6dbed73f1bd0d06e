// SPDX-License-Identifier: Apache-2.0

//! Config file loading, flag merging and artifact names.

use std::path::{Path, PathBuf};

use bpdg::config::{Preset, RunConfig};
use bpdg::corpus::schema::GENDER_WORDS;
use bpdg::corpus::{AttributeTables, Profile};
use bpdg::training::TrainingConfig;
use bpdg::BpdgError;

use crate::args::DecodeArgs;
use crate::{CliError, CliResult};

pub const TABLES_FILE: &str = "tables.txt";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALID_FILE: &str = "valid.jsonl";
pub const RANDOM_TEST_FILE: &str = "test_random.jsonl";
pub const BIASED_TEST_FILE: &str = "test_biased.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const RELEVANCE_FILE: &str = "relevance.ckpt";
pub const BIPERSONA_FILE: &str = "bipersona.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const AUX_REPORT_FILE: &str = "aux_report.json";

/// Reads a TOML run configuration. Unknown keys are rejected. A large
/// preset without an explicit warmup takes the longer warmup.
pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| BpdgError::io(path, e))?;
    parse_config(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn parse_config(text: &str) -> Result<RunConfig, String> {
    let table: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
    let warmup_set = table
        .get("training")
        .and_then(|t| t.as_table())
        .is_some_and(|t| t.contains_key("warmup_steps"));
    let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| e.to_string())?;
    if cfg.preset == Preset::Large && !warmup_set {
        cfg.training.warmup_steps = TrainingConfig::large().warmup_steps;
    }
    Ok(cfg)
}

pub fn config_to_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("run config always serializes to TOML")
}

/// Writes `<out>/<command>.run.toml` with the resolved configuration and
/// its digest.
pub fn write_resolved(out: &Path, command: &str, cfg: &RunConfig) -> CliResult<PathBuf> {
    ensure_dir(out)?;
    let path = out.join(format!("{command}.run.toml"));
    let text = format!("# run_config_digest = \"{}\"\n{}", cfg.digest(), config_to_toml(cfg));
    write_text(&path, &text)?;
    Ok(path)
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| BpdgError::io(dir, e).into())
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| BpdgError::io(path, e).into())
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| BpdgError::io(path, e).into())
}

pub fn apply_decode(cfg: &mut RunConfig, d: &DecodeArgs) {
    if let Some(m) = d.mode {
        cfg.decoding.mode = m;
    }
    if d.no_cmim {
        cfg.decoding.use_cmim = false;
    }
    if let Some(l) = d.lambda3 {
        cfg.decoding.lambda3 = l;
    }
    if let Some(b) = d.beam {
        cfg.decoding.beam.beam = b;
    }
    if let Some(m) = d.max_len {
        cfg.decoding.beam.max_len = m;
    }
}

/// Parses `gender=<male|female>;area=<name>;interests=<a>,<b>` against the
/// attribute tables. Keys may come in any order.
pub fn parse_profile(spec: &str, tables: &AttributeTables) -> CliResult<Profile> {
    let bad = |m: String| CliError::Usage(format!("profile {spec:?}: {m}"));
    let (mut gender, mut area, mut interests) = (None, None, None);
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {part:?}")))?;
        let v = v.split_whitespace().collect::<Vec<_>>().join(" ");
        match k.trim() {
            "gender" => {
                let g = GENDER_WORDS
                    .iter()
                    .position(|w| *w == v)
                    .ok_or_else(|| bad(format!("gender must be one of {GENDER_WORDS:?}")))?;
                gender = Some(g as u8);
            }
            "area" => {
                area = Some(tables.area_index(&v).ok_or_else(|| bad(format!("unknown area {v:?}")))?);
            }
            "interests" => {
                let list = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| tables.interest_index(s).ok_or_else(|| bad(format!("unknown interest {s:?}"))))
                    .collect::<CliResult<Vec<_>>>()?;
                interests = Some(list);
            }
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    let p = Profile {
        gender: gender.ok_or_else(|| bad("missing gender".into()))?,
        area: area.ok_or_else(|| bad("missing area".into()))?,
        interests: interests.ok_or_else(|| bad("missing interests".into()))?,
    };
    p.validate(tables).map_err(|e| bad(e.to_string()))?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tables() -> AttributeTables {
        AttributeTables {
            areas: vec!["paris".into(), "new york".into()],
            interests: vec!["music".into(), "board games".into()],
        }
    }

    #[test]
    fn profile_spec() {
        let p = parse_profile("area=new york; gender=female;interests=board games, music", &tables()).unwrap();
        assert_eq!((p.gender, p.area, p.interests), (1, 1, vec![1, 0]));
        for bad in ["gender=female;area=rome;interests=music", "gender=x;area=paris;interests=music", "area=paris", "nonsense"] {
            assert!(matches!(parse_profile(bad, &tables()), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn config_round_trip_and_large_warmup() {
        let mut c = RunConfig::default();
        c.seed = 3;
        c.model.d_model = Some(32);
        let back = parse_config(&config_to_toml(&c)).unwrap();
        assert_eq!(back, c);
        assert_eq!(parse_config("preset = \"large\"").unwrap().training.warmup_steps, 2000);
        let explicit = parse_config("preset = \"large\"\n[training]\nwarmup_steps = 5\n").unwrap();
        assert_eq!(explicit.training.warmup_steps, 5);
        assert!(parse_config("bogus = 1").is_err());
    }
}
