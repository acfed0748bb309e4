//! Reserved token ids and sequence layout.
//!
//! A scored sequence is `prompt ++ [SEP] ++ response`, where a finished
//! response ends with [`EOS`]. Right padding uses [`PAD`]; causal masking
//! keeps padding from influencing real positions.

use crate::Token;

pub const PAD: Token = 0;
pub const SEP: Token = 1;
pub const EOS: Token = 2;
pub const FIRST_CONTENT: Token = 3;

pub fn join(prompt: &[Token], response: &[Token]) -> Vec<Token> {
    let mut s = Vec::with_capacity(prompt.len() + response.len() + 1);
    s.extend_from_slice(prompt);
    s.push(SEP);
    s.extend_from_slice(response);
    s
}

/// Response body without the trailing EOS, if present.
pub fn body(response: &[Token]) -> &[Token] {
    match response.last() {
        Some(&EOS) => &response[..response.len() - 1],
        _ => response,
    }
}
