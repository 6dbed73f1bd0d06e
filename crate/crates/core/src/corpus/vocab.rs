// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::schema::{AttributeTables, Dialogue};

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<sep>", "<bos>", "<eos>", "<unk>"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

pub const DEFAULT_MIN_FREQ: u64 = 1;
pub const DEFAULT_RARE_THRESHOLD: u64 = 2;

/// Word vocabulary with a frequent/rare partition of the non-special ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    rare_threshold: u64,
    index: HashMap<String, usize>,
    num_rare: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    counts: Vec<u64>,
    rare_threshold: u64,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = String;
    fn try_from(r: VocabularyRepr) -> Result<Self, String> {
        if r.tokens.len() != r.counts.len() {
            return Err("vocabulary tokens and counts differ in length".into());
        }
        if r.tokens.len() < NUM_SPECIAL
            || r.tokens[..NUM_SPECIAL]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err("vocabulary must start with the special tokens".into());
        }
        let v = Vocabulary::from_parts(r.tokens, r.counts, r.rare_threshold);
        if v.index.len() != v.tokens.len() {
            return Err("vocabulary contains duplicate tokens".into());
        }
        Ok(v)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.tokens,
            counts: v.counts,
            rare_threshold: v.rare_threshold,
        }
    }
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, counts: Vec<u64>, rare_threshold: u64) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let num_rare = counts[NUM_SPECIAL.min(counts.len())..]
            .iter()
            .filter(|&&c| c < rare_threshold)
            .count();
        Self {
            tokens,
            counts,
            rare_threshold,
            index,
            num_rare,
        }
    }

    /// Builds from token counts. Ids follow descending count, then
    /// lexicographic order. `extra` tokens are registered even when unseen.
    pub fn from_counts<'a>(
        counts: &BTreeMap<String, u64>,
        extra: impl IntoIterator<Item = &'a str>,
        min_freq: u64,
        rare_threshold: u64,
    ) -> Self {
        let mut all: BTreeMap<&str, u64> = BTreeMap::new();
        for (t, &c) in counts {
            if c >= min_freq && !SPECIAL_TOKENS.contains(&t.as_str()) {
                all.insert(t.as_str(), c);
            }
        }
        for t in extra {
            if !SPECIAL_TOKENS.contains(&t) {
                all.entry(t).or_insert(counts.get(t).copied().unwrap_or(0));
            }
        }
        let mut entries: Vec<(&str, u64)> = all.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut cs = vec![0; NUM_SPECIAL];
        for (t, c) in entries {
            tokens.push(t.to_string());
            cs.push(c);
        }
        Self::from_parts(tokens, cs, rare_threshold)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_SPECIAL
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn rare_threshold(&self) -> u64 {
        self.rare_threshold
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < NUM_SPECIAL
    }

    /// Member of the rare set R.
    pub fn is_rare(&self, id: usize) -> bool {
        !self.is_special(id) && self.counts[id] < self.rare_threshold
    }

    /// Member of the frequent set F.
    pub fn is_frequent(&self, id: usize) -> bool {
        !self.is_special(id) && !self.is_rare(id)
    }

    pub fn num_rare(&self) -> usize {
        self.num_rare
    }

    pub fn num_frequent(&self) -> usize {
        self.len() - NUM_SPECIAL - self.num_rare
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// sha256 over the ordered token list and counts.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            h.update(t.as_bytes());
            h.update([0u8]);
            h.update(c.to_le_bytes());
        }
        h.update(self.rare_threshold.to_le_bytes());
        hex::encode(h.finalize())
    }
}

pub fn count_tokens<'a>(texts: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for text in texts {
        for w in text.split_whitespace() {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

pub fn build_vocab_from_texts<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    min_freq: u64,
    rare_threshold: u64,
) -> Vocabulary {
    Vocabulary::from_counts(&count_tokens(texts), [], min_freq, rare_threshold)
}

/// Counts every utterance and profile rendering; all attribute surface
/// tokens are registered so any profile can be embedded.
pub fn build_vocab(
    dialogues: &[Dialogue],
    tables: &AttributeTables,
    min_freq: u64,
    rare_threshold: u64,
) -> Vocabulary {
    let mut texts: Vec<String> = Vec::new();
    for d in dialogues {
        texts.extend(d.turns.iter().map(|t| t.text.clone()));
        texts.push(d.user_profile.to_text(tables));
        texts.push(d.robot_profile.to_text(tables));
    }
    let counts = count_tokens(texts.iter().map(String::as_str));
    let mut extra: Vec<&str> = vec![
        super::schema::KEY_GENDER,
        super::schema::KEY_AREA,
        super::schema::KEY_INTERESTS,
        super::schema::PROFILE_SEPARATOR,
    ];
    extra.extend(super::schema::GENDER_WORDS);
    for s in tables.areas.iter().chain(&tables.interests) {
        extra.extend(s.split_whitespace());
    }
    Vocabulary::from_counts(&counts, extra, min_freq, rare_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_partition() {
        let v = build_vocab_from_texts(["a a b"], 1, 2);
        assert_eq!(v.len(), NUM_SPECIAL + 2);
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!((a, b), (NUM_SPECIAL, NUM_SPECIAL + 1));
        assert!(v.is_frequent(a) && v.is_rare(b));
        assert_eq!((v.num_frequent(), v.num_rare()), (1, 1));
    }

    #[test]
    fn empty_corpus_has_only_specials() {
        let v = build_vocab_from_texts([], 1, 2);
        assert_eq!(v.len(), NUM_SPECIAL);
        assert_eq!(v.num_rare(), 0);
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i));
        }
    }

    #[test]
    fn tokenize_round_trip_and_unk() {
        let v = build_vocab_from_texts(["hello world"], 1, 2);
        assert!(v.tokenize("").is_empty());
        let ids = v.tokenize("hello world");
        assert_eq!(ids, vec![v.id("hello").unwrap(), v.id("world").unwrap()]);
        assert_eq!(v.detokenize(&ids), "hello world");
        assert_eq!(v.tokenize("zebra"), vec![UNK]);
    }

    #[test]
    fn min_freq_drops_but_extra_keeps() {
        let counts = count_tokens(["x x y"]);
        let v = Vocabulary::from_counts(&counts, ["z"], 2, 2);
        assert!(v.id("x").is_some());
        assert!(v.id("y").is_none());
        assert!(v.is_rare(v.id("z").unwrap()));
    }

    #[test]
    fn serde_round_trip() {
        let v = build_vocab_from_texts(["c b a a"], 1, 2);
        let s = serde_json::to_string(&v).unwrap();
        let w: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(v, w);
        assert_eq!(v.digest(), w.digest());
    }
}
