//! Byte-level toy tokenizer.
//!
//! `0` ends a sequence, `1` is padding, `2..=257` are the 256 byte values.
//! Ids above 257 exist in the vocabulary but never come out of `encode`.

pub type TokenId = u32;
pub type TokenSeq = Vec<TokenId>;

pub const EOS: TokenId = 0;
pub const PAD: TokenId = 1;
pub const BYTE_OFFSET: TokenId = 2;

pub fn encode(text: &str) -> TokenSeq {
    text.bytes().map(|b| b as TokenId + BYTE_OFFSET).collect()
}

/// Lossy decode; non-byte ids render as `<id>`.
pub fn decode(tokens: &[TokenId]) -> String {
    let mut bytes = Vec::new();
    for &t in tokens {
        match t {
            EOS => bytes.extend_from_slice(b"<eos>"),
            PAD => {}
            t if (BYTE_OFFSET..BYTE_OFFSET + 256).contains(&t) => {
                bytes.push((t - BYTE_OFFSET) as u8)
            }
            t => bytes.extend_from_slice(format!("<{t}>").as_bytes()),
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_round_trip() {
        let t = encode("a red square");
        assert_eq!(t[0], b'a' as u32 + 2);
        assert_eq!(decode(&t), "a red square");
        assert_eq!(decode(&[300, EOS]), "<300><eos>");
    }
}
