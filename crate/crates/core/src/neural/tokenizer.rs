//! Word-level vocabulary. Responses are tokenized with the same rules as KB
//! annotation, so response token `j` is decoder target step `j`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: &str = "[pad]";
pub const CLS: &str = "[cls]";
pub const SEP: &str = "[sep]";
pub const BOS: &str = "[bos]";
pub const EOS: &str = "[eos]";
pub const UNK: &str = "[unk]";
pub const USR: &str = crate::dialog::USER_MARKER;
pub const SYS: &str = crate::dialog::SYSTEM_MARKER;

const SPECIALS: [&str; 8] = [PAD, CLS, SEP, BOS, EOS, UNK, USR, SYS];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials first, then corpus tokens by descending count, ties broken
    /// alphabetically.
    pub fn build<'a, I, S>(sequences: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for seq in sequences {
            for t in seq {
                *counts.entry(t.as_ref().to_string()).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !SPECIALS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or_else(|| self.index[UNK])
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Decodes up to the first end-of-sequence, dropping other specials.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        let eos = self.id(EOS);
        ids.iter()
            .take_while(|&&i| i != eos)
            .filter(|&&i| i >= SPECIALS.len())
            .map(|&i| self.tokens[i].clone())
            .collect()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn pad(&self) -> usize {
        0
    }
    pub fn cls(&self) -> usize {
        1
    }
    pub fn sep(&self) -> usize {
        2
    }
    pub fn bos(&self) -> usize {
        3
    }
    pub fn eos(&self) -> usize {
        4
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::build([&tokenize("a b b")[..]], 1);
        assert_eq!(v.id(PAD), v.pad());
        assert_eq!(v.id(CLS), v.cls());
        assert_eq!(v.id(SEP), v.sep());
        assert_eq!(v.id(BOS), v.bos());
        assert_eq!(v.id(EOS), v.eos());
        assert_eq!(v.token(8), "b");
        assert_eq!(v.id("zzz"), v.id(UNK));
    }

    #[test]
    fn encode_decode_round_trip() {
        let toks = tokenize("pizza hut is in the south .");
        let v = Vocab::build([&toks[..]], 1);
        let mut ids = v.encode(&toks);
        assert_eq!(v.decode(&ids), toks);
        ids.push(v.eos());
        ids.push(v.id("south"));
        assert_eq!(v.decode(&ids), toks);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
