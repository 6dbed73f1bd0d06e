// SPDX-License-Identifier: Apache-2.0

//! Seeded synthetic corpus with bilateral profiles.
//!
//! Each dialogue keeps one small-talk topic. The last user turn is a cue
//! whose kind fixes the reference label: a question about the robot, a
//! request to recall something about the user, or a topic question.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::label::{heuristic_persona_label, TieBreak};
use super::schema::{
    frequency_sorted, AttributeTables, Dialogue, PersonaLabel, Profile, Speaker, Utterance,
    GENDER_WORDS,
};
use crate::error::{BpdgError, Result};

const AREAS: [&str; 24] = [
    "paris", "rome", "london", "tokyo", "berlin", "madrid", "vienna", "dublin", "oslo", "lisbon",
    "prague", "athens", "cairo", "lima", "seoul", "sydney", "boston", "denver", "austin", "miami",
    "chicago", "toronto", "warsaw", "helsinki",
];

const INTERESTS: [&str; 24] = [
    "music", "chess", "hiking", "cooking", "reading", "painting", "dancing", "swimming",
    "cycling", "gaming", "fishing", "photography", "gardening", "running", "tennis", "soccer",
    "movies", "poetry", "yoga", "baking", "skiing", "surfing", "knitting", "singing",
];

struct Topic {
    nouns: [&'static str; 5],
    adjectives: [&'static str; 3],
}

const TOPICS: [Topic; 7] = [
    Topic { nouns: ["rain", "sun", "wind", "snow", "cloud"], adjectives: ["cold", "warm", "bright"] },
    Topic { nouns: ["pizza", "soup", "bread", "noodles", "salad"], adjectives: ["tasty", "spicy", "fresh"] },
    Topic { nouns: ["office", "boss", "meeting", "project", "deadline"], adjectives: ["busy", "tiring", "boring"] },
    Topic { nouns: ["train", "flight", "hotel", "beach", "museum"], adjectives: ["cheap", "crowded", "lovely"] },
    Topic { nouns: ["dog", "cat", "puppy", "kitten", "parrot"], adjectives: ["cute", "noisy", "lazy"] },
    Topic { nouns: ["exam", "teacher", "homework", "class", "lesson"], adjectives: ["hard", "easy", "long"] },
    Topic { nouns: ["shoes", "jacket", "market", "store", "gift"], adjectives: ["expensive", "nice", "new"] },
];

const USER_TOPIC: [&str; 5] = [
    "i think the {n} is {a} today",
    "have you seen the {n} ?",
    "my {n} was {a} yesterday",
    "the {n} here is so {a}",
    "do you like the {n} ?",
];

const ROBOT_TOPIC: [&str; 5] = [
    "yes the {n} is really {a}",
    "i saw a {a} {n} last week",
    "the {n} sounds {a} to me",
    "oh that {n} must be {a}",
    "i agree the {n} is {a}",
];

/// Reference label mix for one split; the remainder is label 2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonaRates {
    pub user: f64,
    pub robot: f64,
}

impl PersonaRates {
    pub fn new(user: f64, robot: f64) -> Result<Self> {
        let r = Self { user, robot };
        r.validate()?;
        Ok(r)
    }

    /// Splits a total persona rate evenly between the two sides.
    pub fn even(total: f64) -> Result<Self> {
        Self::new(total / 2.0, total / 2.0)
    }

    pub fn none(&self) -> f64 {
        1.0 - self.user - self.robot
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        if !ok(self.user) || !ok(self.robot) || self.user + self.robot > 1.0 + 1e-12 {
            return Err(BpdgError::Config(format!(
                "persona rates ({}, {}) must lie in [0,1] and sum to at most 1",
                self.user, self.robot
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_areas: usize,
    pub num_interests: usize,
    pub min_rounds: usize,
    pub max_rounds: usize,
    pub max_profile_interests: usize,
    /// Chance that a history turn mentions a profile attribute.
    pub mention_rate: f64,
    /// Share of no-persona references that talk about a third party's city.
    pub distractor_rate: f64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub train_rates: PersonaRates,
    pub random_rates: PersonaRates,
    pub biased_rates: PersonaRates,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_areas: 20,
            num_interests: 20,
            min_rounds: 3,
            max_rounds: 4,
            max_profile_interests: 4,
            mention_rate: 0.2,
            distractor_rate: 0.2,
            train: 2000,
            valid: 100,
            test: 100,
            train_rates: PersonaRates { user: 0.3, robot: 0.3 },
            random_rates: PersonaRates { user: 0.1, robot: 0.1 },
            biased_rates: PersonaRates { user: 0.4, robot: 0.4 },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_areas < 3 || self.num_areas > AREAS.len() {
            return Err(BpdgError::Config(format!(
                "num_areas must be in 3..={}",
                AREAS.len()
            )));
        }
        if self.num_interests < 2 || self.num_interests > INTERESTS.len() {
            return Err(BpdgError::Config(format!(
                "num_interests must be in 2..={}",
                INTERESTS.len()
            )));
        }
        if self.min_rounds < 1 || self.max_rounds < self.min_rounds {
            return Err(BpdgError::Config("rounds must satisfy 1 <= min <= max".into()));
        }
        if self.max_profile_interests < 1 || 2 * self.max_profile_interests > self.num_interests {
            return Err(BpdgError::Config(
                "max_profile_interests must be >= 1 and leave room for two disjoint profiles".into(),
            ));
        }
        for (name, p) in [("mention_rate", self.mention_rate), ("distractor_rate", self.distractor_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(BpdgError::Config(format!("{name} must be in [0,1]")));
            }
        }
        self.train_rates.validate()?;
        self.random_rates.validate()?;
        self.biased_rates.validate()
    }

    /// Attribute inventory before frequency sorting.
    pub fn inventory(&self) -> AttributeTables {
        AttributeTables {
            areas: AREAS[..self.num_areas].iter().map(|s| s.to_string()).collect(),
            interests: INTERESTS[..self.num_interests].iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplits {
    pub tables: AttributeTables,
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub random_test: Vec<Dialogue>,
    pub biased_test: Vec<Dialogue>,
}

struct Gen<'a> {
    cfg: &'a SynthConfig,
    tables: &'a AttributeTables,
    rng: ChaCha8Rng,
}

fn fill(template: &str, n: &str, a: &str) -> String {
    template.replace("{n}", n).replace("{a}", a)
}

impl Gen<'_> {
    fn profiles(&mut self) -> (Profile, Profile) {
        let mut areas: Vec<usize> = (0..self.tables.areas.len()).collect();
        areas.shuffle(&mut self.rng);
        let mut interests: Vec<usize> = (0..self.tables.interests.len()).collect();
        interests.shuffle(&mut self.rng);
        let max = self.cfg.max_profile_interests;
        let ku = self.rng.random_range(1..=max);
        let kr = self.rng.random_range(1..=max);
        let user = Profile {
            gender: self.rng.random_range(0..2),
            area: areas[0],
            interests: interests[..ku].to_vec(),
        };
        let robot = Profile {
            gender: self.rng.random_range(0..2),
            area: areas[1],
            interests: interests[ku..ku + kr].to_vec(),
        };
        (user, robot)
    }

    fn topic_text(&mut self, topic: &Topic, templates: &[&str]) -> String {
        let t = templates.choose(&mut self.rng).unwrap();
        let n = topic.nouns.choose(&mut self.rng).unwrap();
        let a = topic.adjectives.choose(&mut self.rng).unwrap();
        fill(t, n, a)
    }

    /// Picks the attribute kind to talk about; gender only when the two
    /// profiles differ in it, so a mention stays one-sided.
    fn attribute_kind(&mut self, user: &Profile, robot: &Profile) -> u8 {
        let kinds: &[u8] = if user.gender != robot.gender { &[0, 1, 1, 2, 2] } else { &[1, 1, 2, 2] };
        *kinds.choose(&mut self.rng).unwrap()
    }

    fn interest(&mut self, p: &Profile) -> String {
        self.tables.interests[*p.interests.choose(&mut self.rng).unwrap()].clone()
    }

    /// A self-statement by `speaker` about `owner`'s profile.
    fn mention(&mut self, speaker: Speaker, owner: Speaker, user: &Profile, robot: &Profile) -> String {
        let p = if owner == Speaker::User { user } else { robot };
        let kind = self.attribute_kind(user, robot);
        let gender = GENDER_WORDS[p.gender as usize];
        let area = self.tables.areas[p.area].clone();
        let interest = self.interest(p);
        let own = speaker == owner;
        match (kind, own) {
            (0, true) => format!("i am a {gender} by the way"),
            (0, false) => format!("you are a {gender} right"),
            (1, true) => format!("i live in {area} now"),
            (1, false) => format!("you told me you live in {area}"),
            (_, true) => format!("i really enjoy {interest}"),
            (_, false) => format!("you said you like {interest}"),
        }
    }

    fn cue_and_reference(
        &mut self,
        label: PersonaLabel,
        topic: &Topic,
        user: &Profile,
        robot: &Profile,
    ) -> (String, String) {
        match label {
            PersonaLabel::Robot => {
                let kind = self.attribute_kind(user, robot);
                let alt = self.rng.random_bool(0.5);
                match kind {
                    0 => (
                        "are you a boy or a girl ?".into(),
                        format!("i am a {}", GENDER_WORDS[robot.gender as usize]),
                    ),
                    1 => {
                        let a = &self.tables.areas[robot.area];
                        if alt {
                            ("where do you live ?".into(), format!("i live in {a}"))
                        } else {
                            ("which city are you from ?".into(), format!("i am from {a}"))
                        }
                    }
                    _ => {
                        let i = self.interest(robot);
                        if alt {
                            ("what do you like to do ?".into(), format!("i like {i}"))
                        } else {
                            ("what is your hobby ?".into(), format!("my hobby is {i}"))
                        }
                    }
                }
            }
            PersonaLabel::User => {
                let kind = self.attribute_kind(user, robot);
                match kind {
                    0 => (
                        "can you guess if i am a boy or a girl ?".into(),
                        format!("you are a {}", GENDER_WORDS[user.gender as usize]),
                    ),
                    1 => (
                        "do you remember where i live ?".into(),
                        format!("you live in {}", self.tables.areas[user.area]),
                    ),
                    _ => {
                        let i = self.interest(user);
                        ("guess what i like to do ?".into(), format!("you like {i}"))
                    }
                }
            }
            PersonaLabel::NoPersona => {
                if self.rng.random_bool(self.cfg.distractor_rate) {
                    let others: Vec<usize> = (0..self.tables.areas.len())
                        .filter(|&a| a != user.area && a != robot.area)
                        .collect();
                    let a = &self.tables.areas[*others.choose(&mut self.rng).unwrap()];
                    ("where does your friend live ?".into(), format!("my friend lives in {a}"))
                } else {
                    let n = topic.nouns.choose(&mut self.rng).unwrap();
                    let a = topic.adjectives.choose(&mut self.rng).unwrap();
                    let y = if self.rng.random_bool(0.5) {
                        format!("the {n} is {a}")
                    } else {
                        format!("i think the {n} is {a}")
                    };
                    (format!("what do you think about the {n} ?"), y)
                }
            }
        }
    }

    fn dialogue(&mut self, id: String, label: PersonaLabel) -> Result<Dialogue> {
        let (user, robot) = self.profiles();
        let topic = &TOPICS[self.rng.random_range(0..TOPICS.len())];
        let rounds = self.rng.random_range(self.cfg.min_rounds..=self.cfg.max_rounds);
        let mut turns = Vec::with_capacity(2 * rounds);
        for _ in 0..rounds - 1 {
            for speaker in [Speaker::User, Speaker::Robot] {
                let (text, intended) = if self.rng.random_bool(self.cfg.mention_rate) {
                    let owner = if self.rng.random_bool(0.5) { Speaker::User } else { Speaker::Robot };
                    let l = match owner {
                        Speaker::User => PersonaLabel::User,
                        Speaker::Robot => PersonaLabel::Robot,
                    };
                    (self.mention(speaker, owner, &user, &robot), l)
                } else {
                    let templates: &[&str] = match speaker {
                        Speaker::User => &USER_TOPIC,
                        Speaker::Robot => &ROBOT_TOPIC,
                    };
                    (self.topic_text(topic, templates), PersonaLabel::NoPersona)
                };
                turns.push(Utterance {
                    speaker,
                    text,
                    label: Some(intended),
                });
            }
        }
        let (cue, reference) = self.cue_and_reference(label, topic, &user, &robot);
        turns.push(Utterance {
            speaker: Speaker::User,
            text: cue,
            label: Some(PersonaLabel::NoPersona),
        });
        turns.push(Utterance {
            speaker: Speaker::Robot,
            text: reference,
            label: Some(label),
        });
        let d = Dialogue {
            id,
            user_profile: user,
            robot_profile: robot,
            turns,
        };
        for (i, t) in d.turns.iter().enumerate() {
            let h = heuristic_persona_label(&t.text, &d.user_profile, &d.robot_profile, self.tables, TieBreak::Robot);
            if Some(h) != t.label {
                return Err(BpdgError::Contract(format!(
                    "{}: turn {i} constructed as {:?} but labels as {h:?}",
                    d.id, t.label
                )));
            }
        }
        Ok(d)
    }
}

/// Reference labels in exact proportion to `rates`, in seeded random order.
fn label_plan(n: usize, rates: PersonaRates, rng: &mut ChaCha8Rng) -> Vec<PersonaLabel> {
    let nu = (rates.user * n as f64).round() as usize;
    let nr = ((rates.robot * n as f64).round() as usize).min(n - nu.min(n));
    let nu = nu.min(n);
    let mut plan = vec![PersonaLabel::User; nu];
    plan.extend(std::iter::repeat_n(PersonaLabel::Robot, nr));
    plan.resize(n, PersonaLabel::NoPersona);
    plan.shuffle(rng);
    plan
}

/// One split over a fixed attribute table.
pub fn generate_synthetic_corpus(
    cfg: &SynthConfig,
    tables: &AttributeTables,
    rates: PersonaRates,
    count: usize,
    prefix: &str,
    seed: u64,
) -> Result<Vec<Dialogue>> {
    cfg.validate()?;
    rates.validate()?;
    if tables.areas.len() < 3 || tables.interests.len() < 2 * cfg.max_profile_interests {
        return Err(BpdgError::Config("attribute tables too small for the generator".into()));
    }
    let mut gen = Gen {
        cfg,
        tables,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let plan = label_plan(count, rates, &mut gen.rng);
    plan.into_iter()
        .enumerate()
        .map(|(i, l)| gen.dialogue(format!("{prefix}-{i:05}"), l))
        .collect()
}

/// All four splits. Attribute tables are reordered by how often each value
/// occurs in the generated profiles.
pub fn generate_splits(cfg: &SynthConfig, seed: u64) -> Result<SyntheticSplits> {
    cfg.validate()?;
    let inv = cfg.inventory();
    let mut splits = Vec::new();
    for (k, (name, n, rates)) in [
        ("train", cfg.train, cfg.train_rates),
        ("valid", cfg.valid, cfg.train_rates),
        ("random", cfg.test, cfg.random_rates),
        ("biased", cfg.test, cfg.biased_rates),
    ]
    .into_iter()
    .enumerate()
    {
        let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64);
        splits.push(generate_synthetic_corpus(cfg, &inv, rates, n, name, s)?);
    }
    let all = || splits.iter().flatten().flat_map(|d| [&d.user_profile, &d.robot_profile]);
    let mut area_names: Vec<&str> = all().map(|p| inv.areas[p.area].as_str()).collect();
    let mut interest_names: Vec<&str> = all()
        .flat_map(|p| p.interests.iter().map(|&i| inv.interests[i].as_str()))
        .collect();
    // Unused values still belong in the table, after every used one.
    area_names.extend(inv.areas.iter().map(String::as_str));
    interest_names.extend(inv.interests.iter().map(String::as_str));
    let tables = AttributeTables {
        areas: frequency_sorted(area_names),
        interests: frequency_sorted(interest_names),
    };
    let area_map: Vec<usize> = inv.areas.iter().map(|a| tables.area_index(a).unwrap()).collect();
    let interest_map: Vec<usize> = inv
        .interests
        .iter()
        .map(|a| tables.interest_index(a).unwrap())
        .collect();
    for d in splits.iter_mut().flatten() {
        for p in [&mut d.user_profile, &mut d.robot_profile] {
            p.area = area_map[p.area];
            p.interests.iter_mut().for_each(|i| *i = interest_map[*i]);
        }
    }
    let mut it = splits.into_iter();
    Ok(SyntheticSplits {
        tables,
        train: it.next().unwrap(),
        valid: it.next().unwrap(),
        random_test: it.next().unwrap(),
        biased_test: it.next().unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(ds: &[Dialogue]) -> [usize; 3] {
        let mut c = [0; 3];
        for d in ds {
            c[d.reference().label.unwrap().index()] += 1;
        }
        c
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SynthConfig::default();
        let inv = cfg.inventory();
        let r = PersonaRates::new(0.3, 0.3).unwrap();
        let a = generate_synthetic_corpus(&cfg, &inv, r, 50, "x", 7).unwrap();
        let b = generate_synthetic_corpus(&cfg, &inv, r, 50, "x", 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&cfg, &inv, r, 50, "x", 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_persona_rates_give_label_two() {
        let cfg = SynthConfig::default();
        let inv = cfg.inventory();
        let ds = generate_synthetic_corpus(&cfg, &inv, PersonaRates::new(0.0, 0.0).unwrap(), 200, "x", 1).unwrap();
        assert_eq!(labels(&ds), [0, 0, 200]);
    }

    #[test]
    fn label_mix_follows_rates() {
        let cfg = SynthConfig::default();
        let inv = cfg.inventory();
        let ds = generate_synthetic_corpus(&cfg, &inv, PersonaRates::new(0.4, 0.4).unwrap(), 1000, "x", 3).unwrap();
        let c = labels(&ds);
        for (got, want) in c.iter().zip([0.4, 0.4, 0.2]) {
            assert!((*got as f64 / 1000.0 - want).abs() <= 0.03, "{c:?}");
        }
    }

    #[test]
    fn rates_over_one_are_rejected() {
        assert!(matches!(PersonaRates::new(0.6, 0.5), Err(BpdgError::Config(_))));
    }

    #[test]
    fn splits_validate_and_rounds_are_bounded() {
        let cfg = SynthConfig {
            train: 60,
            valid: 10,
            test: 10,
            ..SynthConfig::default()
        };
        let s = generate_splits(&cfg, 11).unwrap();
        for d in s.train.iter().chain(&s.valid).chain(&s.random_test).chain(&s.biased_test) {
            d.validate(&s.tables).unwrap();
            let rounds = d.turns.len() / 2;
            assert!((3..=4).contains(&rounds));
        }
        assert_eq!(s.tables.areas.len(), cfg.num_areas);
    }
}
