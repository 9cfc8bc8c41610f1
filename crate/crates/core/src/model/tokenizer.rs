use crate::error::{Error, Result};

/// First code point of the vocabulary (the Tibetan block).
pub const FIRST_SYMBOL: u32 = 0x0F00;

/// Bijection between `vocab_size` consecutive code points and token ids.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab_size: usize,
}

impl Tokenizer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        let last = FIRST_SYMBOL as usize + vocab_size;
        if vocab_size == 0 || char::from_u32(last as u32 - 1).is_none() {
            return Err(Error::Config(format!("unsupported vocab_size {vocab_size}")));
        }
        Ok(Tokenizer { vocab_size })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        if text.is_empty() {
            return Err(Error::Empty("text"));
        }
        text.chars()
            .map(|c| {
                let id = (c as u32).wrapping_sub(FIRST_SYMBOL) as usize;
                if id < self.vocab_size {
                    Ok(id)
                } else {
                    Err(Error::UnknownSymbol(c))
                }
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                if id < self.vocab_size {
                    Ok(char::from_u32(FIRST_SYMBOL + id as u32).expect("validated range"))
                } else {
                    Err(Error::UnknownToken(id))
                }
            })
            .collect()
    }
}
