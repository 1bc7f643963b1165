use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub const UNK_TOKEN: &str = "<unk>";
pub const MAX_CAPTION_LEN: usize = 16;

const TEMPLATE_WORDS: [&str; 7] = ["a", "photo", "of", "there", "is", "in", "this"];

/// Visual attribute words, grouped so that members of a group are mutually
/// exclusive (an image is never both dark and bright). Group order is also
/// the order in which attribute words appear in captions.
pub const ATTRIBUTE_GROUPS: [&[&str]; 3] = [
    &["dark", "bright"],
    &["red", "green", "blue"],
    &["striped", "framed"],
];

/// Fixed token inventory with an unknown-token fallback and a substitution
/// table used by the text attack.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk_id: usize,
    synonyms: BTreeMap<usize, Vec<usize>>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, unk_id: usize, synonyms: BTreeMap<usize, Vec<usize>>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(config_err!("duplicate vocabulary token '{t}'"));
            }
        }
        if unk_id >= tokens.len() {
            return Err(config_err!("unk id {unk_id} outside vocabulary of {}", tokens.len()));
        }
        for (&k, list) in &synonyms {
            if k >= tokens.len() || list.iter().any(|&s| s >= tokens.len()) {
                return Err(config_err!("synonym table references unknown token id"));
            }
            if list.contains(&k) {
                return Err(config_err!("token '{}' listed as its own synonym", tokens[k]));
            }
        }
        Ok(Self {
            tokens,
            index,
            unk_id,
            synonyms,
        })
    }

    /// Unknown token, caption template words, attribute words and the given
    /// class names. Class names substitute for each other; attribute words
    /// substitute within their group.
    pub fn standard(class_names: &[String]) -> Result<Self> {
        let mut tokens: Vec<String> = vec![UNK_TOKEN.to_string()];
        tokens.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        let mut groups = Vec::new();
        for group in ATTRIBUTE_GROUPS {
            let start = tokens.len();
            tokens.extend(group.iter().map(|w| w.to_string()));
            groups.push((start..tokens.len()).collect::<Vec<_>>());
        }
        let class_start = tokens.len();
        for name in class_names {
            if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                return Err(config_err!(
                    "class name '{name}' must be a single lowercase word"
                ));
            }
            if tokens.iter().any(|t| t == name) {
                return Err(config_err!("class name '{name}' collides with a reserved word"));
            }
            tokens.push(name.clone());
        }
        groups.push((class_start..tokens.len()).collect());

        let mut synonyms = BTreeMap::new();
        for group in &groups {
            for &id in group {
                let others: Vec<usize> = group.iter().copied().filter(|&o| o != id).collect();
                if !others.is_empty() {
                    synonyms.insert(id, others);
                }
            }
        }
        Self::new(tokens, 0, synonyms)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn synonyms(&self, id: usize) -> &[usize] {
        self.synonyms.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }
}

/// Token id sequence of length `1..=MAX_CAPTION_LEN`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Copy with position `pos` replaced by `id`.
    pub fn replaced(&self, pos: usize, id: usize) -> Self {
        let mut ids = self.ids.clone();
        ids[pos] = id;
        Self { ids }
    }
}

/// Lowercases, splits on whitespace, strips surrounding punctuation and maps
/// words to ids (unknown words map to the unk id). Truncates to
/// [`MAX_CAPTION_LEN`]; an empty text becomes a single unk token.
pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSeq {
    let mut ids: Vec<usize> = text
        .split_whitespace()
        .map(|w| {
            let w = w
                .trim_matches(|c: char| c.is_ascii_punctuation() && c != '<' && c != '>')
                .to_lowercase();
            vocab.id(&w).unwrap_or(vocab.unk_id())
        })
        .take(MAX_CAPTION_LEN)
        .collect();
    if ids.is_empty() {
        ids.push(vocab.unk_id());
    }
    TokenSeq { ids }
}

pub fn detokenize(seq: &TokenSeq, vocab: &Vocab) -> String {
    seq.ids
        .iter()
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::standard(&["cat".to_string(), "dog".to_string(), "ship".to_string()]).unwrap()
    }

    #[test]
    fn known_caption_maps_to_known_ids() {
        let v = vocab();
        let t = tokenize("a photo of a cat", &v);
        assert_eq!(t.len(), 5);
        assert!(t.ids.iter().all(|&id| id != v.unk_id()));
        assert_eq!(tokenize("A photo of a Cat.", &v), t);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = vocab();
        let t = tokenize("a photo of a zebra", &v);
        assert_eq!(t.ids[4], v.unk_id());
    }

    #[test]
    fn detokenize_roundtrip() {
        let v = vocab();
        let t = tokenize("there is a dark red striped dog in this photo", &v);
        assert!(!t.ids.contains(&v.unk_id()));
        assert_eq!(tokenize(&detokenize(&t, &v), &v), t);
    }

    #[test]
    fn truncates_long_text() {
        let v = vocab();
        let long = vec!["cat"; 40].join(" ");
        assert_eq!(tokenize(&long, &v).len(), MAX_CAPTION_LEN);
        assert_eq!(tokenize("   ", &v).ids, vec![v.unk_id()]);
    }

    #[test]
    fn synonym_table_shape() {
        let v = vocab();
        let cat = v.id("cat").unwrap();
        let syn: Vec<&str> = v.synonyms(cat).iter().map(|&i| v.token(i)).collect();
        assert_eq!(syn, vec!["dog", "ship"]);
        let dark = v.id("dark").unwrap();
        assert_eq!(v.synonyms(dark), &[v.id("bright").unwrap()]);
        assert!(v.synonyms(v.id("photo").unwrap()).is_empty());
        for id in 0..v.len() {
            assert!(!v.synonyms(id).contains(&id));
        }
    }

    #[test]
    fn invalid_vocabularies() {
        assert!(Vocab::standard(&["photo".to_string()]).is_err());
        assert!(Vocab::standard(&["two words".to_string()]).is_err());
        assert!(Vocab::new(vec!["a".into(), "a".into()], 0, BTreeMap::new()).is_err());
        let mut syn = BTreeMap::new();
        syn.insert(1, vec![1]);
        assert!(Vocab::new(vec!["a".into(), "b".into()], 0, syn).is_err());
    }
}
