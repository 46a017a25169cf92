//! Byte-level fallback tokenizer: ids `0..256` are raw bytes, followed by specials.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const BYTE_VOCAB: usize = 258;

#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Drops specials and ids above the byte range; invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().filter_map(|&i| u8::try_from(i).ok()).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}
