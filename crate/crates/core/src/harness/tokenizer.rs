use crate::error::{Error, Result};

/// Byte-level tokenizer: each byte is its own token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const VOCAB_SIZE: usize = 256;

    pub fn tokenize(&self, text: impl AsRef<[u8]>) -> Vec<usize> {
        text.as_ref().iter().map(|&b| b as usize).collect()
    }

    pub fn detokenize(&self, tokens: &[usize]) -> Result<Vec<u8>> {
        tokens
            .iter()
            .map(|&t| {
                u8::try_from(t).map_err(|_| Error::TokenOutOfRange {
                    token: t,
                    vocab: Self::VOCAB_SIZE,
                })
            })
            .collect()
    }

    /// Lossy UTF-8 view of `tokens`, for display.
    pub fn detokenize_lossy(&self, tokens: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.detokenize(tokens)?).into_owned())
    }
}
