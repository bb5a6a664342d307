//! Fixed-length attribute-token prompts over a closed vocabulary.

use crate::error::{Error, Result};

pub const PROMPT_LEN: usize = 6;

pub const PAD_ID: usize = 0;
pub const VOCAB_SIZE: usize = 15;

pub const VOCAB: [&str; VOCAB_SIZE] = [
    "<pad>", "circle", "square", "triangle", "red", "green", "blue", "yellow", "black",
    "white", "small", "large", "stripes", "dots", "plain",
];

/// Fixed-length sequence of attribute-token ids standing in for a text prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTokens {
    ids: [usize; PROMPT_LEN],
}

impl PromptTokens {
    pub fn new(ids: [usize; PROMPT_LEN]) -> Result<Self> {
        for &id in &ids {
            if id >= VOCAB_SIZE {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} outside vocabulary of size {VOCAB_SIZE}"
                )));
            }
        }
        Ok(PromptTokens { ids })
    }

    /// Parse a space-separated prompt such as "red circle large plain".
    /// Order-insensitive; unknown words are rejected; missing slots pad.
    pub fn parse(text: &str) -> Result<Self> {
        let mut ids = [PAD_ID; PROMPT_LEN];
        let mut n = 0;
        for word in text.split_whitespace() {
            let id = VOCAB
                .iter()
                .position(|&w| w == word)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown prompt word '{word}'")))?;
            if n == PROMPT_LEN {
                return Err(Error::InvalidArgument(format!(
                    "prompt '{text}' longer than {PROMPT_LEN} tokens"
                )));
            }
            ids[n] = id;
            n += 1;
        }
        PromptTokens::new(ids)
    }

    pub fn ids(&self) -> &[usize; PROMPT_LEN] {
        &self.ids
    }

    /// Positions where two prompts disagree.
    pub fn differing_positions(&self, other: &PromptTokens) -> Vec<usize> {
        (0..PROMPT_LEN).filter(|&i| self.ids[i] != other.ids[i]).collect()
    }

    pub fn words(&self) -> String {
        self.ids
            .iter()
            .filter(|&&id| id != PAD_ID)
            .map(|&id| VOCAB[id])
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let p = PromptTokens::parse("red circle large plain").unwrap();
        assert_eq!(p.words(), "red circle large plain");
        assert!(PromptTokens::parse("red dragon").is_err());
    }

    #[test]
    fn differing_positions() {
        let a = PromptTokens::parse("red circle large plain").unwrap();
        let b = PromptTokens::parse("blue circle large plain").unwrap();
        assert_eq!(a.differing_positions(&b), vec![0]);
    }
}
