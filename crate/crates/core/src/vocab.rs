//! Reserved vocabulary layout shared by the model and the world generator.
//!
//! The low end of every vocabulary is fixed: a padding symbol, the empty
//! response symbol "∅", a four-token jailbreak marker block, and a two-token
//! neutral prefix. The world generator allocates template, style, and answer
//! tokens above `RESERVED`.

use crate::model::Token;

pub const PAD: Token = Token(0);
/// The empty-response symbol "∅" targeted by the empty-response defense.
pub const EMPTY: Token = Token(1);
/// Instruction-marker block prepended by the hard question rephrase.
pub const JAILBREAK: [Token; 4] = [Token(2), Token(3), Token(4), Token(5)];
/// Meaning-free prefix prepended by the easy question rephrase.
pub const NEUTRAL_PREFIX: [Token; 2] = [Token(6), Token(7)];
/// First token index available to the world generator.
pub const RESERVED: u32 = 8;

pub fn jailbreak_tokens() -> Vec<Token> {
    JAILBREAK.to_vec()
}

pub fn neutral_prefix_tokens() -> Vec<Token> {
    NEUTRAL_PREFIX.to_vec()
}
