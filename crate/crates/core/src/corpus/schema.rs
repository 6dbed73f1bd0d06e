// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{BpdgError, Result};

pub const GENDER_WORDS: [&str; 2] = ["male", "female"];
pub const KEY_GENDER: &str = "gender";
pub const KEY_AREA: &str = "area";
pub const KEY_INTERESTS: &str = "interests";
pub const PROFILE_SEPARATOR: &str = ",";

/// Interests beyond this many do not contribute to the persona embedding.
pub const MAX_EMBEDDED_INTERESTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Robot,
}

/// Which party's persona an utterance expresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PersonaLabel {
    User = 0,
    Robot = 1,
    NoPersona = 2,
}

impl PersonaLabel {
    pub const ALL: [PersonaLabel; 3] = [Self::User, Self::Robot, Self::NoPersona];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Self::User),
            1 => Ok(Self::Robot),
            2 => Ok(Self::NoPersona),
            _ => Err(BpdgError::Schema(format!("persona label {i} not in {{0,1,2}}"))),
        }
    }
}

/// One speaker's explicit persona. Attribute values index the
/// corpus-wide [`AttributeTables`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Profile {
    pub gender: u8,
    pub area: usize,
    pub interests: Vec<usize>,
}

impl Profile {
    pub fn validate(&self, tables: &AttributeTables) -> Result<()> {
        if self.gender > 1 {
            return Err(BpdgError::Schema(format!("gender {} not in {{0,1}}", self.gender)));
        }
        if self.area >= tables.areas.len() {
            return Err(BpdgError::Schema(format!("area index {} out of range", self.area)));
        }
        if self.interests.is_empty() {
            return Err(BpdgError::Schema("profile needs at least one interest".into()));
        }
        if let Some(i) = self.interests.iter().find(|&&i| i >= tables.interests.len()) {
            return Err(BpdgError::Schema(format!("interest index {i} out of range")));
        }
        Ok(())
    }

    /// Surface strings of every attribute value.
    pub fn surface_strings<'t>(&self, tables: &'t AttributeTables) -> Vec<&'t str> {
        let mut out = vec![GENDER_WORDS[self.gender as usize], tables.areas[self.area].as_str()];
        out.extend(self.interests.iter().map(|&i| tables.interests[i].as_str()));
        out
    }

    /// `gender <v> , area <v> , interests <v...>` as whitespace tokens.
    pub fn to_text(&self, tables: &AttributeTables) -> String {
        let interests: Vec<&str> = self
            .interests
            .iter()
            .map(|&i| tables.interests[i].as_str())
            .collect();
        format!(
            "{KEY_GENDER} {} {PROFILE_SEPARATOR} {KEY_AREA} {} {PROFILE_SEPARATOR} {KEY_INTERESTS} {}",
            GENDER_WORDS[self.gender as usize],
            tables.areas[self.area],
            interests.join(" ")
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub label: Option<PersonaLabel>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Dialogue {
    pub id: String,
    pub user_profile: Profile,
    pub robot_profile: Profile,
    pub turns: Vec<Utterance>,
}

impl Dialogue {
    /// Speakers alternate starting with the user; the last turn is the
    /// robot's reference response.
    pub fn validate(&self, tables: &AttributeTables) -> Result<()> {
        self.user_profile
            .validate(tables)
            .map_err(|e| BpdgError::Schema(format!("{}: user_profile: {e}", self.id)))?;
        self.robot_profile
            .validate(tables)
            .map_err(|e| BpdgError::Schema(format!("{}: robot_profile: {e}", self.id)))?;
        if self.turns.len() < 2 {
            return Err(BpdgError::Schema(format!("{}: needs at least 2 turns", self.id)));
        }
        for (i, t) in self.turns.iter().enumerate() {
            let want = if i % 2 == 0 { Speaker::User } else { Speaker::Robot };
            if t.speaker != want {
                return Err(BpdgError::Schema(format!(
                    "{}: turn {i} spoken by {:?}, expected {want:?} (speakers must alternate starting with user)",
                    self.id, t.speaker
                )));
            }
            if t.text.split_whitespace().next().is_none() {
                return Err(BpdgError::Schema(format!("{}: turn {i} has empty text", self.id)));
            }
        }
        if self.turns.len() % 2 != 0 {
            return Err(BpdgError::Schema(format!(
                "{}: final turn must be the robot response",
                self.id
            )));
        }
        Ok(())
    }

    pub fn reference(&self) -> &Utterance {
        self.turns.last().expect("validated dialogue has turns")
    }

    /// Every turn before the reference response: history plus current input.
    pub fn context(&self) -> &[Utterance] {
        &self.turns[..self.turns.len() - 1]
    }

    /// History without the current user input.
    pub fn history(&self) -> &[Utterance] {
        &self.turns[..self.turns.len().saturating_sub(2)]
    }

    pub fn profile(&self, speaker: Speaker) -> &Profile {
        match speaker {
            Speaker::User => &self.user_profile,
            Speaker::Robot => &self.robot_profile,
        }
    }
}

/// Ordered surface strings for area and interest indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeTables {
    pub areas: Vec<String>,
    pub interests: Vec<String>,
}

impl AttributeTables {
    pub fn area_index(&self, s: &str) -> Option<usize> {
        self.areas.iter().position(|a| a == s)
    }

    pub fn interest_index(&self, s: &str) -> Option<usize> {
        self.interests.iter().position(|a| a == s)
    }

    /// Builds tables sorted by descending occurrence count in `profiles`,
    /// ties broken lexicographically.
    pub fn from_profile_strings<'a>(
        areas: impl IntoIterator<Item = &'a str>,
        interests: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        Self {
            areas: frequency_sorted(areas),
            interests: frequency_sorted(interests),
        }
    }
}

pub(crate) fn frequency_sorted<'a>(items: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
    for s in items {
        *counts.entry(s).or_default() += 1;
    }
    let mut v: Vec<(&str, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    v.into_iter().map(|(s, _)| s.to_string()).collect()
}
