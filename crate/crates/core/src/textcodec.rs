//! Character set, special tokens and string <-> token-id conversion.
//!
//! Id layout: `EOS = 0`, characters `1..=n`, then `BOS`, `PAD` and `MASK_L`.
//! With the full 36-symbol alphabet that is `EOS=0, a..9 = 1..36, BOS=37,
//! PAD=38, MASK_L=39`.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Token id within the vocabulary.
pub type TokenId = usize;

/// The full recognizable alphabet, in id order.
pub const FULL_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

/// Longest label accepted by default.
pub const DEFAULT_MAX_LABEL_LEN: usize = 25;

pub const EOS: TokenId = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("character {ch:?} at index {index} is not in the charset")]
    OutOfCharset { ch: char, index: usize },
    #[error("label length {len} exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} at index {index} is not a character token")]
    NonCharacterToken { id: TokenId, index: usize },
    #[error("invalid charset: {0}")]
    InvalidCharset(String),
}

/// Ordered set of recognizable characters plus the special-token layout.
#[derive(Clone, PartialEq, Eq)]
pub struct Charset {
    chars: Vec<char>,
    index: HashMap<char, TokenId>,
    max_label_len: usize,
}

impl fmt::Debug for Charset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Charset")
            .field("chars", &self.as_string())
            .field("max_label_len", &self.max_label_len)
            .finish()
    }
}

impl Default for Charset {
    fn default() -> Self {
        Self::new(FULL_ALPHABET, DEFAULT_MAX_LABEL_LEN).expect("built-in alphabet is valid")
    }
}

impl Charset {
    /// Builds a charset from a line of characters. Characters must be
    /// lowercase-stable and distinct.
    pub fn new(chars: &str, max_label_len: usize) -> Result<Self, CodecError> {
        let chars: Vec<char> = chars.chars().collect();
        if chars.is_empty() {
            return Err(CodecError::InvalidCharset("empty charset".into()));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if c.is_whitespace() || c.to_lowercase().ne(std::iter::once(c)) {
                return Err(CodecError::InvalidCharset(format!(
                    "character {c:?} must be a non-space lowercase symbol"
                )));
            }
            if index.insert(c, i + 1).is_some() {
                return Err(CodecError::InvalidCharset(format!("duplicate character {c:?}")));
            }
        }
        Ok(Self { chars, index, max_label_len })
    }

    /// The first `n` symbols of [`FULL_ALPHABET`].
    pub fn prefix(n: usize, max_label_len: usize) -> Result<Self, CodecError> {
        if n == 0 || n > FULL_ALPHABET.len() {
            return Err(CodecError::InvalidCharset(format!(
                "prefix size {n} outside 1..={}",
                FULL_ALPHABET.len()
            )));
        }
        Self::new(&FULL_ALPHABET[..n], max_label_len)
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn max_label_len(&self) -> usize {
        self.max_label_len
    }

    pub fn eos(&self) -> TokenId {
        EOS
    }

    pub fn bos(&self) -> TokenId {
        self.chars.len() + 1
    }

    pub fn pad(&self) -> TokenId {
        self.chars.len() + 2
    }

    pub fn mask(&self) -> TokenId {
        self.chars.len() + 3
    }

    pub fn vocab_size(&self) -> usize {
        self.chars.len() + 4
    }

    pub fn is_char(&self, id: TokenId) -> bool {
        (1..=self.chars.len()).contains(&id)
    }

    pub fn id_of(&self, c: char) -> Option<TokenId> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, id: TokenId) -> Option<char> {
        if self.is_char(id) {
            Some(self.chars[id - 1])
        } else {
            None
        }
    }

    /// Lowercases `text` and maps it to character ids.
    pub fn encode(&self, text: &str) -> Result<TokenSeq, CodecError> {
        let lowered = text.to_lowercase();
        let len = lowered.chars().count();
        if len > self.max_label_len {
            return Err(CodecError::TooLong { len, max: self.max_label_len });
        }
        let ids = lowered
            .chars()
            .enumerate()
            .map(|(index, ch)| self.id_of(ch).ok_or(CodecError::OutOfCharset { ch, index }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TokenSeq::new(ids))
    }

    /// Maps ids back to text, stopping at the first `EOS`.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, CodecError> {
        let mut out = String::new();
        for (index, &id) in ids.iter().enumerate() {
            if id == EOS {
                break;
            }
            match self.char_of(id) {
                Some(c) => out.push(c),
                None => return Err(CodecError::NonCharacterToken { id, index }),
            }
        }
        Ok(out)
    }
}

/// A label as character ids, plus which positions are hidden from the decoder.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
    masked: Vec<bool>,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        let masked = vec![false; ids.len()];
        Self { ids, masked }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Marks the given 1-based character positions as masked.
    ///
    /// Panics if a position is outside `1..=len`.
    pub fn with_masked_positions(mut self, positions: &[usize]) -> Self {
        self.masked.iter_mut().for_each(|m| *m = false);
        for &p in positions {
            assert!(p >= 1 && p <= self.ids.len(), "masked position {p} out of range");
            self.masked[p - 1] = true;
        }
        self
    }

    /// Masked character positions, 1-based (context column indices).
    pub fn masked_positions(&self) -> Vec<usize> {
        self.masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i + 1))
            .collect()
    }

    /// Prediction targets for the `len + 1` query rows: characters then `EOS`.
    pub fn targets(&self) -> Vec<TokenId> {
        let mut t = self.ids.clone();
        t.push(EOS);
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn special_layout_matches_full_alphabet() {
        let cs = Charset::default();
        assert_eq!(cs.num_chars(), 36);
        assert_eq!((cs.eos(), cs.bos(), cs.pad(), cs.mask()), (0, 37, 38, 39));
        assert_eq!(cs.vocab_size(), 40);
    }

    #[test]
    fn encode_examples() {
        let az = Charset::new("abcdefghijklmnopqrstuvwxyz", 25).unwrap();
        assert_eq!(az.encode("ab").unwrap().ids(), &[1, 2]);
        assert!(az.encode("").unwrap().is_empty());
        let cs = Charset::default();
        assert_eq!(cs.encode("a0").unwrap().ids(), &[1, 27]);
        assert_eq!(cs.encode("AB").unwrap().ids(), &[1, 2]);
        assert!(cs.encode("a0").unwrap().masked().iter().all(|m| !m));
    }

    #[test]
    fn encode_errors() {
        let cs = Charset::default();
        assert_eq!(cs.encode("ab-c"), Err(CodecError::OutOfCharset { ch: '-', index: 2 }));
        let long = "a".repeat(26);
        assert_eq!(cs.encode(&long), Err(CodecError::TooLong { len: 26, max: 25 }));
    }

    #[test]
    fn decode_examples() {
        let cs = Charset::default();
        assert_eq!(cs.decode(&[1, 2, 0, 5]).unwrap(), "ab");
        assert_eq!(cs.decode(&[0]).unwrap(), "");
        assert_eq!(cs.decode(&[1, 0, 37]).unwrap(), "a");
        assert_eq!(
            cs.decode(&[1, 37]),
            Err(CodecError::NonCharacterToken { id: 37, index: 1 })
        );
    }

    #[test]
    fn round_trip_random_strings() {
        let cs = Charset::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let len = rng.gen_range(0..=25);
            let s: String = (0..len).map(|_| cs.chars()[rng.gen_range(0..36)]).collect();
            let mut ids = cs.encode(&s).unwrap().ids().to_vec();
            assert_eq!(cs.decode(&ids).unwrap(), s);
            ids.push(EOS);
            assert_eq!(cs.decode(&ids).unwrap(), s);
        }
    }

    #[test]
    fn id_space_is_partitioned() {
        for n in [1, 16, 36] {
            let cs = Charset::prefix(n, 25).unwrap();
            let mut seen = vec![0usize; cs.vocab_size()];
            seen[cs.eos()] += 1;
            seen[cs.bos()] += 1;
            seen[cs.pad()] += 1;
            seen[cs.mask()] += 1;
            for &c in cs.chars() {
                seen[cs.id_of(c).unwrap()] += 1;
            }
            assert!(seen.iter().all(|&k| k == 1));
        }
    }

    #[test]
    fn rejects_bad_charsets() {
        assert!(Charset::new("aab", 25).is_err());
        assert!(Charset::new("aB", 25).is_err());
        assert!(Charset::new("", 25).is_err());
        assert!(Charset::prefix(37, 25).is_err());
    }

    #[test]
    fn masked_positions_and_targets() {
        let cs = Charset::default();
        let seq = cs.encode("abc").unwrap().with_masked_positions(&[2]);
        assert_eq!(seq.masked_positions(), vec![2]);
        assert_eq!(seq.targets(), vec![1, 2, 3, EOS]);
    }
}
