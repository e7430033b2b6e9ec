//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// `BOS, bytes..., EOS`.
pub fn encode(text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BOS);
    out.extend(text.bytes().map(u32::from));
    out.push(EOS);
    out
}

/// Drops special tokens; invalid UTF-8 is replaced.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
