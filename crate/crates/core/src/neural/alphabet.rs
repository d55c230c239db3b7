use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label space for CTC: index 0 is the blank, `1..=len` map to characters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    characters: Vec<char>,
}

pub const BLANK: usize = 0;

impl Alphabet {
    pub fn new(characters: impl IntoIterator<Item = char>) -> Result<Self> {
        let characters: Vec<char> = characters.into_iter().collect();
        let mut sorted = characters.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != characters.len() {
            return Err(Error::InvalidArgument("alphabet characters must be distinct".into()));
        }
        Ok(Alphabet { characters })
    }

    /// Lowercase `a`-`z` followed by digits, matching the builtin glyph atlas order.
    pub fn builtin() -> Self {
        let mut chars: Vec<char> = ('0'..='9').chain('a'..='z').collect();
        chars.sort_unstable();
        Alphabet { characters: chars }
    }

    /// Number of classes including the blank.
    pub fn classes(&self) -> usize {
        self.characters.len() + 1
    }

    pub fn characters(&self) -> &[char] {
        &self.characters
    }

    pub fn index_of(&self, ch: char) -> Option<usize> {
        self.characters.iter().position(|&c| c == ch).map(|p| p + 1)
    }

    pub fn char_at(&self, index: usize) -> Option<char> {
        index.checked_sub(1).and_then(|i| self.characters.get(i).copied())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::InvalidArgument(format!("character {c:?} is not in the alphabet")))
            })
            .collect()
    }
}
