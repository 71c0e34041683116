//! The bundled gloss table and its closed-vocabulary tokenizer. The table
//! ships with the crate; the first sixteen rows are the synthetic categories
//! in canonical order, followed by a couple of real-world reference entries.

use std::collections::BTreeMap;

use crate::encoders::GlossTokens;
use crate::error::{Error, Result};

pub const BUNDLED_GLOSS_TSV: &str = include_str!("gloss.tsv");

/// Lowercases and splits on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Closed vocabulary over the bundled gloss file; ids are assigned in sorted
/// token order so they are stable across runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn from_texts<'a>(texts: impl Iterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = texts.flat_map(|t| tokenize(t)).collect();
        tokens.sort();
        tokens.dedup();
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token: tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Encodes text; any token outside the vocabulary is a hard error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text)
            .iter()
            .map(|t| {
                self.id(t).ok_or_else(|| Error::Data(format!(
                    "token {t:?} is outside the closed gloss vocabulary"
                )))
            })
            .collect()
    }
}

/// Category-name to gloss mapping with its derived vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlossTable {
    entries: Vec<(String, String)>,
    vocab: Vocabulary,
}

impl GlossTable {
    pub fn bundled() -> Self {
        Self::from_tsv(BUNDLED_GLOSS_TSV).expect("bundled gloss table is well-formed")
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, gloss) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!("gloss line {}: expected name<TAB>gloss", lineno + 1))
            })?;
            if gloss.trim().is_empty() {
                return Err(Error::Data(format!("gloss line {}: empty gloss", lineno + 1)));
            }
            entries.push((name.trim().to_string(), gloss.trim().to_string()));
        }
        let vocab = Vocabulary::from_texts(entries.iter().map(|(_, g)| g.as_str()));
        Ok(GlossTable { entries, vocab })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn gloss_text(&self, name: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_str())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (n, g) in &self.entries {
            out.push_str(n);
            out.push('\t');
            out.push_str(g);
            out.push('\n');
        }
        out
    }

    /// Tokenized gloss for a category name; unknown names are errors.
    pub fn lookup(&self, name: &str) -> Result<GlossTokens> {
        let idx = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))?;
        let tokens = self.vocab.encode(&self.entries[idx].1)?;
        Ok(GlossTokens { tokens, category: idx })
    }

    /// Tokenized category name itself (for the class-name query variant).
    pub fn name_tokens(&self, name: &str) -> Result<GlossTokens> {
        let idx = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))?;
        let tokens = self.vocab.encode(&name.replace('_', " "))?;
        Ok(GlossTokens { tokens, category: idx })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_table_has_expected_entries() {
        let table = GlossTable::bundled();
        assert_eq!(table.names().count(), 18);
        // roughly a 60-word vocabulary
        assert!((55..=70).contains(&table.vocab().len()), "vocab {}", table.vocab().len());
    }

    #[test]
    fn lookup_paper_reference_glosses() {
        let table = GlossTable::bundled();
        let sofa = table.lookup("sofa").unwrap();
        let words: Vec<&str> = sofa
            .tokens
            .iter()
            .map(|&id| table.vocab().token(id).unwrap())
            .collect();
        assert_eq!(words, vec!["an", "upholstered", "seat", "for", "more", "than", "one", "person"]);

        let carrot = table.lookup("carrot").unwrap();
        let words: Vec<&str> = carrot
            .tokens
            .iter()
            .map(|&id| table.vocab().token(id).unwrap())
            .collect();
        assert_eq!(
            words,
            vec!["deep", "orange", "edible", "root", "of", "the", "cultivated", "carrot", "plant"]
        );
    }

    #[test]
    fn unknown_category_is_an_error() {
        let table = GlossTable::bundled();
        assert!(matches!(table.lookup("zeppelin"), Err(Error::UnknownCategory(_))));
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("A Red, star-shape!"), vec!["a", "red", "star", "shape"]);
    }

    #[test]
    fn encode_rejects_out_of_vocabulary_tokens() {
        let table = GlossTable::bundled();
        assert!(table.vocab().encode("a red star shape").is_ok());
        assert!(table.vocab().encode("a crimson star").is_err());
    }

    #[test]
    fn name_tokens_split_on_underscore() {
        let table = GlossTable::bundled();
        let toks = table.name_tokens("red_star").unwrap();
        let words: Vec<&str> = toks
            .tokens
            .iter()
            .map(|&id| table.vocab().token(id).unwrap())
            .collect();
        assert_eq!(words, vec!["red", "star"]);
    }
}
