// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::schema::{AttributeTables, Dialogue, PersonaLabel, Profile};

/// Winner when an utterance matches both profiles equally.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    User,
    #[default]
    Robot,
}

/// Number of utterance tokens covered by occurrences of the profile's
/// attribute surface strings, matched as contiguous token runs.
pub fn matched_attribute_tokens(tokens: &[&str], profile: &Profile, tables: &AttributeTables) -> usize {
    profile
        .surface_strings(tables)
        .iter()
        .map(|s| {
            let pat: Vec<&str> = s.split_whitespace().collect();
            if pat.is_empty() || pat.len() > tokens.len() {
                return 0;
            }
            tokens.windows(pat.len()).filter(|w| *w == pat.as_slice()).count() * pat.len()
        })
        .sum()
}

pub fn heuristic_persona_label(
    text: &str,
    user: &Profile,
    robot: &Profile,
    tables: &AttributeTables,
    tie: TieBreak,
) -> PersonaLabel {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let u = matched_attribute_tokens(&tokens, user, tables);
    let r = matched_attribute_tokens(&tokens, robot, tables);
    match (u, r) {
        (0, 0) => PersonaLabel::NoPersona,
        (_, 0) => PersonaLabel::User,
        (0, _) => PersonaLabel::Robot,
        (u, r) if u > r => PersonaLabel::User,
        (u, r) if r > u => PersonaLabel::Robot,
        _ => match tie {
            TieBreak::User => PersonaLabel::User,
            TieBreak::Robot => PersonaLabel::Robot,
        },
    }
}

/// Overwrites every turn's label with the heuristic one.
pub fn label_dialogue(d: &mut Dialogue, tables: &AttributeTables, tie: TieBreak) {
    for t in &mut d.turns {
        t.label = Some(heuristic_persona_label(
            &t.text,
            &d.user_profile,
            &d.robot_profile,
            tables,
            tie,
        ));
    }
}
