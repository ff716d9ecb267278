use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Default context length.
pub const DEFAULT_CONTEXT: usize = 32;

/// Word-level vocabulary: four specials followed by the sorted corpus words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    context_len: usize,
    index: HashMap<String, usize>,
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

impl Vocab {
    pub fn build<S: AsRef<str>>(corpus: &[S], context_len: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("vocabulary corpus is empty"));
        }
        let mut words = BTreeSet::new();
        let mut longest = 0;
        for line in corpus {
            let w = normalize_words(line.as_ref());
            longest = longest.max(w.len());
            words.extend(w);
        }
        if context_len < longest + 2 {
            return Err(Error::invalid(format!(
                "context length {context_len} too short for a {longest}-word prompt"
            )));
        }
        let tokens = [PAD, SOS, EOS, UNK]
            .into_iter()
            .map(str::to_string)
            .chain(words)
            .collect();
        Ok(Self::from_tokens(tokens, context_len))
    }

    pub fn from_tokens(tokens: Vec<String>, context_len: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            context_len,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk())
    }

    pub fn pad(&self) -> usize {
        0
    }
    pub fn sos(&self) -> usize {
        1
    }
    pub fn eos(&self) -> usize {
        2
    }
    pub fn unk(&self) -> usize {
        3
    }

    /// `[<sos>, words.., <eos>, <pad>..]` padded to the context length.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let words = normalize_words(text);
        if words.len() + 2 > self.context_len {
            return Err(Error::invalid(format!(
                "prompt of {} words exceeds context length {}",
                words.len(),
                self.context_len
            )));
        }
        let mut ids = Vec::with_capacity(self.context_len);
        ids.push(self.sos());
        ids.extend(words.iter().map(|w| self.id(w)));
        ids.push(self.eos());
        ids.resize(self.context_len, self.pad());
        Ok(ids)
    }

    /// Position of the single `<eos>` token.
    pub fn eos_position(&self, ids: &[usize]) -> Result<usize> {
        let mut found = ids.iter().enumerate().filter(|(_, &t)| t == self.eos());
        match (found.next(), found.next()) {
            (Some((i, _)), None) => Ok(i),
            (None, _) => Err(Error::invalid("token sequence has no <eos>")),
            (Some(_), Some(_)) => Err(Error::invalid("token sequence has more than one <eos>")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_sorted_word_vocabulary() {
        let v = Vocab::build(&["a patch of a grass."], 32).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<sos>", "<eos>", "<unk>", "a", "grass", "of", "patch"]);
    }

    #[test]
    fn tokenizes_with_sos_eos_and_padding() {
        let v = Vocab::build(&["a patch of a grass."], 32).unwrap();
        let ids = v.tokenize("a patch of a grass.").unwrap();
        assert_eq!(&ids[..7], &[1, 4, 7, 6, 4, 5, 2]);
        assert!(ids[7..].iter().all(|&t| t == 0));
        assert_eq!(ids.len(), 32);
        assert_eq!(v.tokenize("a river").unwrap()[2], v.unk());
    }

    #[test]
    fn short_context_is_rejected() {
        assert!(Vocab::build(&["one two three"], 4).is_err());
        assert!(Vocab::build::<&str>(&[], 8).is_err());
    }
}
