//! Closed whitespace vocabulary with reserved special tokens.

use std::collections::{BTreeSet, HashMap};

pub const UNK: usize = 0;
pub const EOS: usize = 1;
pub const BOS: usize = 2;
pub const SEP: usize = 3;

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";
pub const BOS_TOKEN: &str = "<bos>";
pub const SEP_TOKEN: &str = "<sep>";
pub const EXT_TOKEN: &str = "<ext>";
pub const ABS_TOKEN: &str = "<abs>";
pub const MC_TOKEN: &str = "<mc>";

/// Number of option labels `(A)`, `(B)`, ... reserved in every vocabulary.
pub const MAX_OPTIONS: usize = 8;

const SPECIALS: [&str; 7] = [
    UNK_TOKEN, EOS_TOKEN, BOS_TOKEN, SEP_TOKEN, EXT_TOKEN, ABS_TOKEN, MC_TOKEN,
];

/// Label for option `i` (0-based): `(A)`, `(B)`, ...
pub fn option_label(i: usize) -> String {
    assert!(i < MAX_OPTIONS, "option index {i} exceeds {MAX_OPTIONS}");
    format!("({})", (b'A' + i as u8) as char)
}

pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

/// Serialized as its token list; see [`Vocab::tokens`] and [`Vocab::from_tokens`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials, option labels, then the sorted unique words of `words`.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..MAX_OPTIONS).map(option_label));
        let reserved: BTreeSet<String> = tokens.iter().cloned().collect();
        let rest: BTreeSet<&str> = words
            .into_iter()
            .filter(|w| !reserved.contains(*w))
            .collect();
        tokens.extend(rest.into_iter().map(str::to_string));
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its token list (as stored in checkpoints).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Unknown words map to [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK_TOKEN, String::as_str)
    }

    /// Joins tokens with single spaces, stopping at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::build(["b", "a", "a"]);
        assert_eq!(v.id(UNK_TOKEN), UNK);
        assert_eq!(v.id(EOS_TOKEN), EOS);
        assert_eq!(v.id(BOS_TOKEN), BOS);
        assert_eq!(v.id(SEP_TOKEN), SEP);
        assert_eq!(v.id("(A)"), SPECIALS.len());
        assert!(v.id("a") < v.id("b"));
        assert_eq!(v.len(), SPECIALS.len() + MAX_OPTIONS + 2);
    }

    #[test]
    fn unknown_maps_to_unk_and_decode_stops_at_eos() {
        let v = Vocab::build(["x", "y"]);
        let ids = v.encode("x zz y");
        assert_eq!(ids[1], UNK);
        let mut with_eos = ids.clone();
        with_eos.push(EOS);
        with_eos.push(v.id("x"));
        assert_eq!(v.decode(&with_eos), "x <unk> y");
    }

    #[test]
    fn from_tokens_round_trips() {
        let v = Vocab::build(["p", "q"]);
        let w = Vocab::from_tokens(v.tokens().to_vec());
        assert_eq!(v, w);
    }
}
