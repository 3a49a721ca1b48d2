use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<eos>", "<unk>"];

/// Punctuation that attaches to the preceding word when decoding.
const CLOSING: &[char] = &['.', ',', '!', '?', ';', ':', ')', ']', '}', '%'];

/// Splits a caption into words and standalone punctuation marks, keeping case.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let start = chars.iter().position(|c| c.is_alphanumeric()).unwrap_or(chars.len());
        let end = chars.iter().rposition(|c| c.is_alphanumeric()).map_or(start, |e| e + 1);
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(chars[end.max(start)..].iter().map(|c| c.to_string()));
    }
    out
}

/// Word-level vocabulary frozen at training time and stored in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds a sorted vocabulary over every word of the corpus.
    pub fn fit<S: AsRef<str>>(corpus: &[S]) -> Self {
        let words: BTreeSet<String> = corpus.iter().flat_map(|t| split_words(t.as_ref())).collect();
        let vocab = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_vocab(vocab)
    }

    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { vocab, index }
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.index.get(w).copied().unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD || id == EOS {
                continue;
            }
            let word = self.vocab.get(id as usize).map_or("<unk>", String::as_str);
            let attach = word.chars().count() == 1 && word.starts_with(CLOSING);
            if !out.is_empty() && !attach {
                out.push(' ');
            }
            out.push_str(word);
        }
        out
    }
}
