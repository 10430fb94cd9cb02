use std::collections::{BTreeSet, HashMap};

use crate::synth::ActionClass;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
const SPECIALS: [&str; 4] = ["<PAD>", "<UNK>", "<CLS>", "<SEP>"];

/// Word-level tokenizer: text is split on whitespace, case is kept, and
/// words outside the vocabulary map to `<UNK>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Special tokens followed by `words` in sorted order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = words.into_iter().filter(|w| !SPECIALS.contains(w)).collect();
        let words: Vec<String> = SPECIALS.iter().copied().chain(set).map(str::to_string).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Tokenizer { words, index }
    }

    /// Vocabulary of every action phrasing plus the transition template.
    pub fn action_vocab() -> Self {
        let mut words = vec!["transit", "from", "to"];
        for class in ActionClass::ALL {
            for p in class.phrasings() {
                words.extend(p.split_whitespace());
            }
        }
        Self::from_words(words)
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// `[<CLS>, words..., <SEP>]`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![CLS];
        ids.extend(text.split_whitespace().map(|w| self.index.get(w).copied().unwrap_or(UNK)));
        if ids.len() == 1 {
            return Err(Error::invalid("text", "empty text"));
        }
        ids.push(SEP);
        Ok(ids)
    }

    /// Joins the non-special words with single spaces.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len() || i == UNK)
            .map(|&i| self.word(i).unwrap_or("<UNK>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
