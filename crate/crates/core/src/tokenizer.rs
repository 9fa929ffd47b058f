//! Byte-level text encoding.
//!
//! Text is encoded as its raw UTF-8 bytes, each byte one token, framed by
//! `BOS`/`EOS`. No Unicode normalization is applied, so precomposed and
//! decomposed spellings of the same character stay distinct.

use std::fmt;

use thiserror::Error;

pub const PAD: u16 = 256;
pub const BOS: u16 = 257;
pub const EOS: u16 = 258;
/// Byte values plus the three special tokens.
pub const VOCAB_SIZE: usize = 259;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("malformed input: unpaired surrogate at code unit {index}")]
    MalformedInput { index: usize },
    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("token sequence must start with BOS and end with EOS")]
    MissingFraming,
    #[error("unexpected token {token} at position {position}")]
    UnexpectedToken { token: u16, position: usize },
}

/// `BOS`, the UTF-8 bytes of a text, `EOS`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u16>);

impl TokenSequence {
    /// Validates framing and token ranges.
    pub fn from_ids(ids: Vec<u16>) -> Result<Self, TokenizerError> {
        if ids.len() < 2 || ids[0] != BOS || ids[ids.len() - 1] != EOS {
            return Err(TokenizerError::MissingFraming);
        }
        for (position, &token) in ids.iter().enumerate().take(ids.len() - 1).skip(1) {
            if token > 255 {
                return Err(TokenizerError::UnexpectedToken { token, position });
            }
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u16] {
        &self.0
    }

    /// Token IDs widened for embedding lookups.
    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().map(|&t| t as usize).collect()
    }

    /// Payload bytes between the framing tokens.
    pub fn bytes(&self) -> impl Iterator<Item = u8> + '_ {
        self.0[1..self.0.len() - 1].iter().map(|&t| t as u8)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("TokenSequence").field(&self.0).finish()
    }
}

impl fmt::Display for TokenSequence {
    /// Space-separated token IDs.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

pub fn encode(text: &str) -> TokenSequence {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(text.bytes().map(u16::from));
    ids.push(EOS);
    TokenSequence(ids)
}

/// Encodes UTF-16 code units, rejecting unpaired surrogates.
pub fn encode_utf16(units: &[u16]) -> Result<TokenSequence, TokenizerError> {
    let mut text = String::with_capacity(units.len());
    let mut index = 0;
    for ch in char::decode_utf16(units.iter().copied()) {
        match ch {
            Ok(c) => {
                text.push(c);
                index += c.len_utf16();
            }
            Err(_) => return Err(TokenizerError::MalformedInput { index }),
        }
    }
    Ok(encode(&text))
}

/// Inverse of [`encode`]. Offsets in errors count payload bytes after `BOS`.
pub fn decode(seq: &TokenSequence) -> Result<String, TokenizerError> {
    let bytes: Vec<u8> = seq.bytes().collect();
    String::from_utf8(bytes)
        .map_err(|e| TokenizerError::InvalidUtf8 { offset: e.utf8_error().valid_up_to() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ascii_is_identity() {
        assert_eq!(encode("ab").ids(), &[BOS, 0x61, 0x62, EOS]);
    }

    #[test]
    fn greek_alpha_is_two_bytes() {
        // U+03B1 = 0b1110110001 -> 110_01110 10_110001
        assert_eq!(encode("α").ids(), &[BOS, 0xCE, 0xB1, EOS]);
    }

    #[test]
    fn cjk_character_is_three_bytes() {
        let seq = encode("语");
        assert_eq!(seq.len(), 5);
        assert!(seq.bytes().all(|b| b >= 0x80));
    }

    #[test]
    fn decode_simple() {
        let seq = TokenSequence::from_ids(vec![BOS, 0x61, EOS]).unwrap();
        assert_eq!(decode(&seq).unwrap(), "a");
    }

    #[test]
    fn truncated_sequence_reports_offset() {
        let seq = TokenSequence::from_ids(vec![BOS, 0xCE, EOS]).unwrap();
        assert_eq!(decode(&seq), Err(TokenizerError::InvalidUtf8 { offset: 0 }));
        let seq = TokenSequence::from_ids(vec![BOS, 0x61, 0x62, 0xFF, EOS]).unwrap();
        assert_eq!(decode(&seq), Err(TokenizerError::InvalidUtf8 { offset: 2 }));
    }

    #[test]
    fn unpaired_surrogate_is_rejected() {
        assert_eq!(encode_utf16(&[0x61, 0xD800, 0x62]), Err(TokenizerError::MalformedInput { index: 1 }));
        assert_eq!(encode_utf16(&[0xD83D, 0xDE00]).unwrap(), encode("😀"));
    }

    #[test]
    fn framing_is_validated() {
        assert_eq!(TokenSequence::from_ids(vec![0x61, EOS]), Err(TokenizerError::MissingFraming));
        assert_eq!(
            TokenSequence::from_ids(vec![BOS, PAD, EOS]),
            Err(TokenizerError::UnexpectedToken { token: PAD, position: 1 })
        );
    }

    #[test]
    fn no_normalization() {
        let precomposed = "\u{00E9}";
        let decomposed = "e\u{0301}";
        assert_ne!(encode(precomposed), encode(decomposed));
    }

    #[test]
    fn display_is_space_separated() {
        assert_eq!(encode("a").to_string(), "257 97 258");
    }

    proptest! {
        #[test]
        fn roundtrip_and_length(text in "\\PC{0,40}") {
            let seq = encode(&text);
            prop_assert_eq!(seq.len(), text.len() + 2);
            prop_assert!(seq.ids().iter().all(|&t| (t as usize) < VOCAB_SIZE));
            prop_assert_eq!(decode(&seq).unwrap(), text);
        }
    }
}
