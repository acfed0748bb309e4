//! Fixtures shared by the criterion benches.

use erlab_core::model::tokens::{EOS, FIRST_CONTENT, SEP};
use erlab_core::rng::stream;
use erlab_core::Token;
use rand::Rng;

/// `n` random `prompt ++ SEP ++ response ++ EOS` sequences over content
/// tokens of a 64-token vocabulary.
pub fn random_sequences(n: usize, prompt_len: usize, response_len: usize, seed: u64) -> Vec<Vec<Token>> {
    let mut rng = stream(seed, "bench-seqs");
    let mut draw = |len: usize| -> Vec<Token> { (0..len).map(|_| rng.random_range(FIRST_CONTENT..64)).collect() };
    (0..n)
        .map(|_| {
            let mut s = draw(prompt_len);
            s.push(SEP);
            s.extend(draw(response_len));
            s.push(EOS);
            s
        })
        .collect()
}

/// Prompts alone, for sampling benches.
pub fn random_prompts(n: usize, len: usize, seed: u64) -> Vec<Vec<Token>> {
    let mut rng = stream(seed, "bench-prompts");
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(FIRST_CONTENT..64)).collect())
        .collect()
}
