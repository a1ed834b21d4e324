use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::decoder::{TokenSequence, UNK};
use crate::error::{Error, Result};
use crate::metrics::tokenize;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word ↔ id map. Ids 0..=3 are PAD, BOS, EOS and UNK.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().skip(RESERVED.len()).map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Words ordered by descending frequency, then alphabetically. Words
    /// seen fewer than `min_freq` times are left out and map to UNK.
    pub fn build<S: AsRef<str>>(captions: &[S], min_freq: usize) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Ingestion("cannot build a vocabulary from no captions".into()));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for c in captions {
            for w in tokenize(c.as_ref()) {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = freq.into_iter().filter(|(_, n)| *n >= min_freq.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let words =
            RESERVED.iter().map(|s| s.to_string()).chain(ranked.into_iter().map(|(w, _)| w)).collect::<Vec<_>>();
        Ok(Vocabulary::from(words))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Word ids of a caption, without BOS/EOS.
    pub fn encode(&self, caption: &str) -> Vec<usize> {
        tokenize(caption).iter().map(|w| self.id(w)).collect()
    }

    pub fn encode_sequence(&self, caption: &str) -> TokenSequence {
        TokenSequence::from_words(&self.encode(caption))
    }

    /// Space-joined words; reserved ids other than UNK are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter(|&&id| id >= UNK).filter_map(|&id| self.word(id)).collect::<Vec<_>>().join(" ")
    }
}
