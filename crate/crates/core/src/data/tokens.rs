//! Fixed ids for the response-format tokens. Ordinary vocabulary starts at
//! [`RESERVED_TOKENS`].

pub type TokenId = u32;

pub const THINK_START: TokenId = 0;
pub const THINK_END: TokenId = 1;
pub const ANSWER_START: TokenId = 2;
pub const ANSWER_END: TokenId = 3;
pub const LATENT_START: TokenId = 4;
pub const LATENT_PAD: TokenId = 5;
pub const LATENT_END: TokenId = 6;
pub const PARSER_START: TokenId = 7;
pub const PARSER_END: TokenId = 8;

pub const RESERVED_TOKENS: usize = 9;

/// The five tokens that only appear in latent-supervised responses.
pub const LATENT_FORMAT_TOKENS: [TokenId; 5] =
    [LATENT_START, LATENT_PAD, LATENT_END, PARSER_START, PARSER_END];

pub fn is_reserved(t: TokenId) -> bool {
    (t as usize) < RESERVED_TOKENS
}

pub fn token_name(t: TokenId) -> String {
    match t {
        THINK_START => "<think>".into(),
        THINK_END => "</think>".into(),
        ANSWER_START => "<answer>".into(),
        ANSWER_END => "</answer>".into(),
        LATENT_START => "<|latent_start|>".into(),
        LATENT_PAD => "<|latent_pad|>".into(),
        LATENT_END => "<|latent_end|>".into(),
        PARSER_START => "<parser>".into(),
        PARSER_END => "</parser>".into(),
        other => format!("w{other}"),
    }
}
