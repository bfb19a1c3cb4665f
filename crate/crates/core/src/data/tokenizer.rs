//! Deterministic hash tokenizer standing in for a BPE vocabulary.

use serde::{Deserialize, Serialize};

pub const SEQ_LEN: usize = 77;
pub const VOCAB_SIZE: usize = 1024;
pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
const RESERVED: usize = 3;

/// Fixed-length id sequence: `SOS, tokens…, EOS, PAD…`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Position of the EOS token.
    pub fn eos_position(&self) -> usize {
        self.ids
            .iter()
            .position(|&i| i == EOS)
            .expect("token sequences always contain EOS")
    }

    /// Checks the layout invariants; used by property tests.
    pub fn is_well_formed(&self) -> bool {
        if self.ids.len() != SEQ_LEN || self.ids[0] != SOS {
            return false;
        }
        let Some(eos) = self.ids.iter().position(|&i| i == EOS) else {
            return false;
        };
        let body_ok = self.ids[1..eos]
            .iter()
            .all(|&i| (RESERVED..VOCAB_SIZE).contains(&i));
        body_ok && self.ids[eos + 1..].iter().all(|&i| i == PAD)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

pub fn token_id(word: &str) -> usize {
    RESERVED + (fnv1a64(word.as_bytes()) % (VOCAB_SIZE - RESERVED) as u64) as usize
}

/// Lowercases, splits on anything that is not alphanumeric, hashes each word.
pub fn tokenize_caption(text: &str) -> TokenSequence {
    let lowered = text.to_lowercase();
    let mut ids = Vec::with_capacity(SEQ_LEN);
    ids.push(SOS);
    ids.extend(
        lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(token_id)
            .take(SEQ_LEN - 2),
    );
    ids.push(EOS);
    ids.resize(SEQ_LEN, PAD);
    TokenSequence { ids }
}
