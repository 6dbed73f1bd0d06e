// SPDX-License-Identifier: Apache-2.0

//! Line-delimited corpus files and attribute tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::{AttributeTables, Dialogue, PersonaLabel, Profile, Speaker, Utterance};
use crate::error::{BpdgError, Result};

pub const CORPUS_HEADER: &str = "bpdg-corpus-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileRecord {
    gender: u8,
    area: String,
    interests: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRecord {
    speaker: Speaker,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DialogueRecord {
    id: String,
    user_profile: ProfileRecord,
    robot_profile: ProfileRecord,
    turns: Vec<TurnRecord>,
}

fn profile_from_record(p: ProfileRecord, tables: &AttributeTables, field: &str) -> Result<Profile> {
    let area = tables
        .area_index(&p.area)
        .ok_or_else(|| BpdgError::Schema(format!("{field}.area: unknown area {:?}", p.area)))?;
    let interests = p
        .interests
        .iter()
        .map(|s| {
            tables.interest_index(s).ok_or_else(|| {
                BpdgError::Schema(format!("{field}.interests: unknown interest {s:?}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Profile {
        gender: p.gender,
        area,
        interests,
    })
}

fn profile_to_record(p: &Profile, tables: &AttributeTables) -> ProfileRecord {
    ProfileRecord {
        gender: p.gender,
        area: tables.areas[p.area].clone(),
        interests: p.interests.iter().map(|&i| tables.interests[i].clone()).collect(),
    }
}

fn dialogue_from_record(r: DialogueRecord, tables: &AttributeTables) -> Result<Dialogue> {
    let turns = r
        .turns
        .into_iter()
        .map(|t| {
            Ok(Utterance {
                speaker: t.speaker,
                text: t.text.split_whitespace().collect::<Vec<_>>().join(" "),
                label: t.label.map(|l| PersonaLabel::from_index(l as usize)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let d = Dialogue {
        user_profile: profile_from_record(r.user_profile, tables, "user_profile")?,
        robot_profile: profile_from_record(r.robot_profile, tables, "robot_profile")?,
        id: r.id,
        turns,
    };
    d.validate(tables)?;
    Ok(d)
}

fn dialogue_to_record(d: &Dialogue, tables: &AttributeTables) -> DialogueRecord {
    DialogueRecord {
        id: d.id.clone(),
        user_profile: profile_to_record(&d.user_profile, tables),
        robot_profile: profile_to_record(&d.robot_profile, tables),
        turns: d
            .turns
            .iter()
            .map(|t| TurnRecord {
                speaker: t.speaker,
                text: t.text.clone(),
                label: t.label.map(|l| l.index() as u8),
            })
            .collect(),
    }
}

/// A conversation awaiting the robot's reply: profiles plus turns that end
/// with the user.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueContext {
    pub user_profile: Profile,
    pub robot_profile: Profile,
    pub turns: Vec<Utterance>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextRecord {
    #[serde(default, rename = "id")]
    _id: Option<String>,
    user_profile: ProfileRecord,
    robot_profile: ProfileRecord,
    turns: Vec<TurnRecord>,
}

/// Parses one JSON object shaped like a corpus record whose last turn is
/// the user's.
pub fn parse_context(text: &str, tables: &AttributeTables) -> Result<DialogueContext> {
    let r: ContextRecord = serde_json::from_str(text.trim()).map_err(|e| BpdgError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let turns: Vec<Utterance> = r
        .turns
        .into_iter()
        .map(|t| Utterance {
            speaker: t.speaker,
            text: t.text.split_whitespace().collect::<Vec<_>>().join(" "),
            label: None,
        })
        .collect();
    match turns.last() {
        Some(t) if t.speaker == Speaker::User => {}
        _ => return Err(BpdgError::Schema("context must end with a user turn".into())),
    }
    if turns.iter().any(|t| t.text.is_empty()) {
        return Err(BpdgError::Schema("context turns must be non-empty".into()));
    }
    let user_profile = profile_from_record(r.user_profile, tables, "user_profile")?;
    let robot_profile = profile_from_record(r.robot_profile, tables, "robot_profile")?;
    user_profile.validate(tables)?;
    robot_profile.validate(tables)?;
    Ok(DialogueContext {
        user_profile,
        robot_profile,
        turns,
    })
}

/// Parses corpus text; errors carry 1-based line numbers.
pub fn parse_corpus(text: &str, tables: &AttributeTables) -> Result<Vec<Dialogue>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, h)) if h.trim() == CORPUS_HEADER => {}
        Some((_, h)) if h.trim().is_empty() && text.trim().is_empty() => return Ok(Vec::new()),
        Some(_) => {
            return Err(BpdgError::Parse {
                line: 1,
                message: format!("expected header {CORPUS_HEADER:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec: DialogueRecord = serde_json::from_str(line).map_err(|e| BpdgError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let d = dialogue_from_record(rec, tables).map_err(|e| match e {
            BpdgError::Schema(m) => BpdgError::Schema(format!("line {lineno}: {m}")),
            other => BpdgError::Parse {
                line: lineno,
                message: other.to_string(),
            },
        })?;
        out.push(d);
    }
    Ok(out)
}

pub fn format_corpus(dialogues: &[Dialogue], tables: &AttributeTables) -> String {
    let mut s = String::new();
    s.push_str(CORPUS_HEADER);
    s.push('\n');
    for d in dialogues {
        let line = serde_json::to_string(&dialogue_to_record(d, tables))
            .expect("corpus records always serialize");
        let _ = writeln!(s, "{line}");
    }
    s
}

pub fn load_corpus(path: impl AsRef<Path>, tables: &AttributeTables) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| BpdgError::io(path, e))?;
    parse_corpus(&text, tables)
}

pub fn save_corpus(
    path: impl AsRef<Path>,
    dialogues: &[Dialogue],
    tables: &AttributeTables,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_corpus(dialogues, tables)).map_err(|e| BpdgError::io(path, e))
}

pub fn parse_tables(text: &str) -> Result<AttributeTables> {
    let mut lines = text.splitn(2, '\n');
    let header = lines.next().unwrap_or("").trim();
    if header != CORPUS_HEADER {
        return Err(BpdgError::Parse {
            line: 1,
            message: format!("expected header {CORPUS_HEADER:?}"),
        });
    }
    let body = lines.next().unwrap_or("");
    let t: AttributeTables = serde_json::from_str(body).map_err(|e| BpdgError::Parse {
        line: e.line() + 1,
        message: e.to_string(),
    })?;
    if t.areas.is_empty() || t.interests.is_empty() {
        return Err(BpdgError::Schema("attribute tables must be non-empty".into()));
    }
    Ok(t)
}

pub fn format_tables(tables: &AttributeTables) -> String {
    format!(
        "{CORPUS_HEADER}\n{}\n",
        serde_json::to_string(tables).expect("tables always serialize")
    )
}

pub fn load_tables(path: impl AsRef<Path>) -> Result<AttributeTables> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| BpdgError::io(path, e))?;
    parse_tables(&text)
}

pub fn save_tables(path: impl AsRef<Path>, tables: &AttributeTables) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_tables(tables)).map_err(|e| BpdgError::io(path, e))
}
