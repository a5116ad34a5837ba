//! Character-level vocabulary and token sequence layout.
//!
//! Two built-in alphabets: `train94` is the 94 printable ASCII symbols
//! excluding space, ordered by codepoint (33..=126), and `eval36` is the
//! case-folded evaluation alphabet `0-9a-z`. Token ids place the
//! end-of-sequence marker at 0 so the class axis of the output head is
//! `[E]` followed by the S characters; start and padding markers live past
//! the character range and never appear in logits.

use std::collections::HashMap;
use thiserror::Error;

/// Class id of the end-of-sequence marker, also logit column 0.
pub const EOS_ID: usize = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CharsetError {
    #[error("unknown character {ch:?} at position {position}")]
    UnknownCharacter { ch: char, position: usize },
    #[error("label of length {length} exceeds capacity {max}")]
    LabelTooLong { length: usize, max: usize },
    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),
}

#[derive(Debug, Clone)]
pub struct Charset {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Charset {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Self {
        let symbols: Vec<char> = symbols.into_iter().collect();
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            let prev = index.insert(c, i);
            assert!(prev.is_none(), "duplicate symbol {c:?}");
        }
        Charset { symbols, index }
    }

    /// 94 printable ASCII symbols excluding space, in codepoint order.
    pub fn train94() -> Charset {
        Charset::new((33u8..=126).map(char::from))
    }

    /// Digits then lowercase letters; the case-folded evaluation alphabet.
    pub fn eval36() -> Charset {
        Charset::new(('0'..='9').chain('a'..='z'))
    }

    /// Number of character symbols (S).
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Start-of-sequence id (S+1); input-only, never a logit class.
    pub fn bos_id(&self) -> usize {
        self.size() + 1
    }

    /// Padding id (S+2); input-only, never a logit class.
    pub fn pad_id(&self) -> usize {
        self.size() + 2
    }

    /// Token ids 0..=S+2: [E], characters, [B], [PAD].
    pub fn id_space(&self) -> usize {
        self.size() + 3
    }

    /// Logit classes 0..=S: [E] plus characters.
    pub fn class_count(&self) -> usize {
        self.size() + 1
    }

    pub fn char_to_id(&self, c: char) -> Option<usize> {
        self.index.get(&c).map(|&i| i + 1)
    }

    pub fn id_to_char(&self, id: usize) -> Option<char> {
        if id == 0 || id > self.size() {
            None
        } else {
            Some(self.symbols[id - 1])
        }
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }
}

/// Fixed-capacity id sequence: `[B]`, the label's characters, `[E]`, then
/// `[PAD]` up to capacity `t_max + 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    length: usize,
}

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Character count of the underlying label.
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn capacity(&self) -> usize {
        self.ids.len()
    }

    /// The decoder's context slots: `[B]` plus `t_max` token positions.
    pub fn context_ids(&self) -> &[usize] {
        &self.ids[..self.ids.len() - 1]
    }

    /// Overwrite one slot in place. For probing what downstream consumers
    /// do with forged inputs; `encode` never produces these by itself.
    pub fn set_id(&mut self, slot: usize, id: usize) {
        self.ids[slot] = id;
    }
}

/// Label to fixed-capacity ids. Ids are a pure function of (label, charset).
pub fn encode(label: &str, charset: &Charset, t_max: usize) -> Result<TokenSequence, CharsetError> {
    let chars: Vec<char> = label.chars().collect();
    if chars.len() > t_max {
        return Err(CharsetError::LabelTooLong { length: chars.len(), max: t_max });
    }
    let mut ids = Vec::with_capacity(t_max + 2);
    ids.push(charset.bos_id());
    for (position, &c) in chars.iter().enumerate() {
        let id = charset
            .char_to_id(c)
            .ok_or(CharsetError::UnknownCharacter { ch: c, position })?;
        ids.push(id);
    }
    ids.push(EOS_ID);
    ids.resize(t_max + 2, charset.pad_id());
    Ok(TokenSequence { ids, length: chars.len() })
}

/// Ids back to a label: everything between `[B]` and the first `[E]`.
/// Content after `[E]` is ignored.
pub fn decode(ids: &[usize], charset: &Charset) -> Result<String, CharsetError> {
    if ids.first() != Some(&charset.bos_id()) {
        return Err(CharsetError::MalformedSequence("missing leading [B]".into()));
    }
    let mut label = String::new();
    for (i, &id) in ids.iter().enumerate().skip(1) {
        if id == EOS_ID {
            return Ok(label);
        }
        let c = charset.id_to_char(id).ok_or_else(|| {
            CharsetError::MalformedSequence(format!("non-character id {id} at slot {i}"))
        })?;
        label.push(c);
    }
    Err(CharsetError::MalformedSequence("no [E] before capacity end".into()))
}

/// Case-fold and drop everything outside the 36-symbol evaluation alphabet.
pub fn fold_for_eval(label: &str) -> String {
    label
        .chars()
        .flat_map(|c| c.to_lowercase())
        .filter(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
        .collect()
}
