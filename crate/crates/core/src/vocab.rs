//! Closed-world word vocabulary with reserved, prompt, and coordinate tokens.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const MASK: TokenId = 3;
pub const IMG_CLS: TokenId = 4;
pub const TXT_CLS: TokenId = 5;

const SPECIAL: [&str; 6] = ["[PAD]", "[BOS]", "[EOS]", "[MASK]", "[IMG_CLS]", "[TXT_CLS]"];

/// Number of coordinate tokens; values live on the integer grid `[0, 100]`.
pub const NUM_COORDS: usize = 101;
pub const COORD_MAX: i64 = 100;

/// Task prefixes. Each is one reserved token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Prompt {
    ShortCaption,
    LongCaption,
    Vqa,
    BoundingBox,
}

impl Prompt {
    pub const ALL: [Prompt; 4] = [
        Prompt::ShortCaption,
        Prompt::LongCaption,
        Prompt::Vqa,
        Prompt::BoundingBox,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Prompt::ShortCaption => "short caption:",
            Prompt::LongCaption => "long caption:",
            Prompt::Vqa => "vqa:",
            Prompt::BoundingBox => "bounding-box:",
        }
    }

    pub fn id(self) -> TokenId {
        PROMPT_BASE + self as TokenId
    }

    pub fn from_id(id: TokenId) -> Option<Prompt> {
        Prompt::ALL.into_iter().find(|p| p.id() == id)
    }

    pub fn parse(s: &str) -> Option<Prompt> {
        let s = s.trim().to_lowercase();
        Prompt::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

const PROMPT_BASE: TokenId = SPECIAL.len() as TokenId;
pub const COORD_BASE: TokenId = PROMPT_BASE + Prompt::ALL.len() as TokenId;
/// First id available to corpus words.
pub const FIRST_WORD: TokenId = COORD_BASE + NUM_COORDS as TokenId;

fn coord_str(v: usize) -> String {
    format!("<coord_{v}>")
}

/// Splits text into lowercase tokens. Reserved strings (special, prompt and
/// coordinate tokens) are kept whole; otherwise alphanumeric runs form words
/// and every other non-space character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut rest = lower.as_str();
    'outer: while !rest.is_empty() {
        let trimmed = rest.trim_start();
        if trimmed.is_empty() {
            break;
        }
        rest = trimmed;
        for reserved in SPECIAL.iter().copied().chain(Prompt::ALL.iter().map(|p| p.as_str())) {
            let r = reserved.to_lowercase();
            if rest.starts_with(&r) {
                out.push(reserved.to_string());
                rest = &rest[r.len()..];
                continue 'outer;
            }
        }
        if let Some(tail) = rest.strip_prefix("<coord_") {
            let digits: String = tail.chars().take_while(char::is_ascii_digit).collect();
            if !digits.is_empty() && tail[digits.len()..].starts_with('>') {
                if let Ok(v) = digits.parse::<usize>() {
                    if v < NUM_COORDS && digits == v.to_string() {
                        out.push(coord_str(v));
                        rest = &tail[digits.len() + 1..];
                        continue;
                    }
                }
            }
        }
        let first = rest.chars().next().expect("non-empty");
        if first.is_alphanumeric() {
            let end = rest
                .char_indices()
                .find(|(_, c)| !c.is_alphanumeric())
                .map_or(rest.len(), |(i, _)| i);
            out.push(rest[..end].to_string());
            rest = &rest[end..];
        } else {
            out.push(first.to_string());
            rest = &rest[first.len_utf8()..];
        }
    }
    out
}

/// Canonical form of `text`: its tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Token/id bijection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Reserved tokens plus every word of `corpus`, words in sorted order.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Vocabulary {
        let mut words = BTreeSet::new();
        for line in corpus {
            for tok in tokenize(line.as_ref()) {
                words.insert(tok);
            }
        }
        let mut tokens = Self::reserved_tokens();
        let reserved: BTreeSet<String> = tokens.iter().cloned().collect();
        tokens.extend(words.into_iter().filter(|w| !reserved.contains(w)));
        Self::from_tokens(tokens).expect("reserved layout is valid")
    }

    fn reserved_tokens() -> Vec<String> {
        SPECIAL
            .iter()
            .map(|s| s.to_string())
            .chain(Prompt::ALL.iter().map(|p| p.as_str().to_string()))
            .chain((0..NUM_COORDS).map(coord_str))
            .collect()
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        let reserved = Self::reserved_tokens();
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved[..] {
            return Err(Error::Malformed(
                "vocabulary does not start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(Error::Malformed(format!("invalid token at line {}", i + 1)));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Malformed(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Word tokens (everything after the reserved range).
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens[FIRST_WORD as usize..].iter().map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        tokenize(text)
            .into_iter()
            .map(|t| self.id(&t).ok_or(Error::UnknownWord(t)))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| self.token(id).ok_or(Error::UnknownId(id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// Serialized form: one token per line, line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            writeln!(s, "{t}").expect("write to string");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Vocabulary> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Token id of the integer coordinate `v`.
pub fn coord_token(v: i64) -> Result<TokenId> {
    if !(0..=COORD_MAX).contains(&v) {
        return Err(Error::CoordinateRange(v));
    }
    Ok(COORD_BASE + v as TokenId)
}

/// Inverse of [`coord_token`]; `None` for non-coordinate ids.
pub fn parse_coord(id: TokenId) -> Option<i64> {
    (COORD_BASE..COORD_BASE + NUM_COORDS as TokenId)
        .contains(&id)
        .then(|| (id - COORD_BASE) as i64)
}

pub fn is_reserved(id: TokenId) -> bool {
    id < FIRST_WORD
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn reserved_layout() {
        let v = Vocabulary::build(&["a road"]);
        assert!(v.contains("a") && v.contains("road"));
        assert_eq!(v.id("[MASK]"), Some(MASK));
        assert_eq!(v.id("[TXT_CLS]"), Some(TXT_CLS));
        assert_eq!(v.len(), FIRST_WORD as usize + 2);
        for p in Prompt::ALL {
            assert_eq!(v.id(p.as_str()), Some(p.id()));
        }
    }

    #[test]
    fn empty_lines_contribute_nothing() {
        let v = Vocabulary::build(&["", "   "]);
        assert_eq!(v.len(), FIRST_WORD as usize);
        assert_eq!(v.encode("").unwrap(), Vec::<TokenId>::new());
    }

    #[test]
    fn prompt_is_one_token() {
        let v = Vocabulary::build(&["the red square"]);
        assert_eq!(v.encode("bounding-box:").unwrap(), vec![Prompt::BoundingBox.id()]);
        assert_eq!(
            v.encode("Short caption: the red square").unwrap(),
            vec![
                Prompt::ShortCaption.id(),
                v.id("the").unwrap(),
                v.id("red").unwrap(),
                v.id("square").unwrap()
            ]
        );
    }

    #[test]
    fn unknown_word_is_named() {
        let v = Vocabulary::build(&["a road"]);
        match v.encode("a river") {
            Err(Error::UnknownWord(w)) => assert_eq!(w, "river"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn coordinate_tokens() {
        let v = Vocabulary::build(&["x"]);
        assert_eq!(v.token(coord_token(0).unwrap()), Some("<coord_0>"));
        assert_eq!(v.token(coord_token(100).unwrap()), Some("<coord_100>"));
        for k in 0..=100 {
            assert_eq!(parse_coord(coord_token(k).unwrap()), Some(k));
        }
        assert_eq!(parse_coord(v.id("x").unwrap()), None);
        assert_eq!(parse_coord(MASK), None);
        assert!(matches!(coord_token(101), Err(Error::CoordinateRange(101))));
        assert!(matches!(coord_token(-1), Err(Error::CoordinateRange(-1))));
        assert_eq!(
            v.encode("<coord_7> <coord_100>").unwrap(),
            vec![COORD_BASE + 7, COORD_BASE + 100]
        );
    }

    #[test]
    fn text_round_trip_is_bitwise() {
        let v = Vocabulary::build(&["two red squares, one blue circle?"]);
        let text = v.to_text();
        let back = Vocabulary::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Vocabulary::from_text("hello\n").is_err());
        let mut text = Vocabulary::build(&["a b"]).to_text();
        text.push_str("a\n");
        assert!(Vocabulary::from_text(&text).is_err());
    }

    const WORDS: [&str; 12] = [
        "a", "red", "blue", "square", "circle", "two", "in", "the", "top", "left", "?", ",",
    ];

    proptest! {
        #[test]
        fn decode_encode_round_trip(idx in prop::collection::vec(0usize..WORDS.len(), 0..12),
                                    upper in any::<bool>()) {
            let v = Vocabulary::build(&WORDS);
            let s = idx.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ");
            let s = if upper { s.to_uppercase() } else { s };
            let ids = v.encode(&s).unwrap();
            prop_assert_eq!(v.decode(&ids).unwrap(), normalize(&s));
        }

        #[test]
        fn encode_decode_round_trip(ids in prop::collection::vec(0u32..(FIRST_WORD + WORDS.len() as u32), 0..16)) {
            let v = Vocabulary::build(&WORDS);
            let text = v.decode(&ids).unwrap();
            prop_assert_eq!(v.encode(&text).unwrap(), ids);
        }
    }
}
