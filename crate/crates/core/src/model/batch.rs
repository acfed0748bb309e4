use crate::error::{Error, Result};
use crate::Token;

use super::tokens::PAD;

/// Right-padded batch of token sequences.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    ids: Vec<usize>,
    lens: Vec<usize>,
    seq: usize,
}

impl TokenBatch {
    pub fn new<S: AsRef<[Token]>>(seqs: &[S], max_seq_len: usize, vocab: usize) -> Result<Self> {
        let seq = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::EmptySequence);
            }
            if s.len() > max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: s.len(),
                    max: max_seq_len,
                });
            }
            for &t in s {
                if t as usize >= vocab {
                    return Err(Error::TokenOutOfRange {
                        token: t as usize,
                        vocab,
                    });
                }
                ids.push(t as usize);
            }
            ids.extend(std::iter::repeat_n(PAD as usize, seq - s.len()));
            lens.push(s.len());
        }
        Ok(TokenBatch { ids, lens, seq })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    /// Flattened row of position `t` in sequence `b`.
    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.seq + t
    }

    /// Row index of each sequence's last real token.
    pub fn last_rows(&self) -> Vec<usize> {
        self.lens.iter().enumerate().map(|(b, &l)| self.row(b, l - 1)).collect()
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.batch()).flat_map(|_| 0..self.seq).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_right_and_validates() {
        let b = TokenBatch::new(&[vec![3u32, 4, 5], vec![6]], 8, 10).unwrap();
        assert_eq!(b.seq(), 3);
        assert_eq!(b.ids(), &[3, 4, 5, 6, 0, 0]);
        assert_eq!(b.last_rows(), vec![2, 3]);
        assert!(matches!(
            TokenBatch::new(&[vec![3u32; 9]], 8, 10),
            Err(Error::SequenceTooLong { len: 9, max: 8 })
        ));
        assert!(TokenBatch::new(&[vec![11u32]], 8, 10).is_err());
        assert!(TokenBatch::new(&[Vec::<u32>::new()], 8, 10).is_err());
    }
}
