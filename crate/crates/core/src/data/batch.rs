use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Splits `0..len` into shuffled batches; the permutation depends only on
/// `(seed, epoch)`.
pub fn batchify(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    let mix = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Time-major padded batch of source/target id sequences.
///
/// Decoder inputs are `<s> y1 .. yn` and outputs `y1 .. yn </s>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelBatch {
    /// `src[t][b]`
    pub src: Vec<Vec<usize>>,
    pub src_lens: Vec<usize>,
    pub tgt_in: Vec<Vec<usize>>,
    pub tgt_out: Vec<Vec<usize>>,
    pub tgt_lens: Vec<usize>,
}

impl ParallelBatch {
    pub fn new(pairs: &[(&[usize], &[usize])]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        if pairs.iter().any(|(s, _)| s.is_empty()) {
            return Err(Error::EmptyInput("empty source sequence".into()));
        }
        let src_lens: Vec<usize> = pairs.iter().map(|(s, _)| s.len()).collect();
        let tgt_lens: Vec<usize> = pairs.iter().map(|(_, t)| t.len() + 1).collect();
        let ts = *src_lens.iter().max().expect("non-empty");
        let tt = *tgt_lens.iter().max().expect("non-empty");
        let at = |seq: &[usize], t: usize| seq.get(t).copied().unwrap_or(PAD);

        let src = (0..ts).map(|t| pairs.iter().map(|(s, _)| at(s, t)).collect()).collect();
        let tgt_in = (0..tt)
            .map(|t| {
                pairs
                    .iter()
                    .map(|(_, y)| match t {
                        0 => BOS,
                        _ if t <= y.len() => y[t - 1],
                        _ => PAD,
                    })
                    .collect()
            })
            .collect();
        let tgt_out = (0..tt)
            .map(|t| {
                pairs
                    .iter()
                    .map(|(_, y)| match t.cmp(&y.len()) {
                        std::cmp::Ordering::Less => y[t],
                        std::cmp::Ordering::Equal => EOS,
                        std::cmp::Ordering::Greater => PAD,
                    })
                    .collect()
            })
            .collect();
        Ok(ParallelBatch {
            src,
            src_lens,
            tgt_in,
            tgt_out,
            tgt_lens,
        })
    }

    pub fn size(&self) -> usize {
        self.src_lens.len()
    }

    /// `true` where decoder step `t` of example `b` is real.
    pub fn tgt_valid(&self, t: usize, b: usize) -> bool {
        t < self.tgt_lens[b]
    }

    pub fn src_valid(&self, t: usize, b: usize) -> bool {
        t < self.src_lens[b]
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn batch_size_one_has_no_padding() {
        let b = ParallelBatch::new(&[(&[5, 6, 7], &[8, 9])]).unwrap();
        assert_eq!(b.src, vec![vec![5], vec![6], vec![7]]);
        assert_eq!(b.tgt_in, vec![vec![BOS], vec![8], vec![9]]);
        assert_eq!(b.tgt_out, vec![vec![8], vec![9], vec![EOS]]);
        for batch in batchify(7, 1, 0, 0).unwrap() {
            assert_eq!(batch.len(), 1);
        }
    }

    #[test]
    fn padding_and_masks_agree() {
        let b = ParallelBatch::new(&[(&[5], &[8]), (&[5, 6, 7], &[8, 9, 10])]).unwrap();
        for t in 0..b.src.len() {
            for i in 0..2 {
                assert_eq!(b.src[t][i] == PAD, !b.src_valid(t, i));
            }
        }
        for t in 0..b.tgt_out.len() {
            for i in 0..2 {
                assert_eq!(b.tgt_out[t][i] == PAD, !b.tgt_valid(t, i));
            }
        }
        assert_eq!(b.target_tokens(), 2 + 4);
    }

    #[test]
    fn empty_batch_is_error() {
        assert!(ParallelBatch::new(&[]).is_err());
        assert!(batchify(3, 0, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn batches_partition_the_dataset(len in 0usize..200, size in 1usize..17, seed in any::<u64>(), epoch in 0usize..5) {
            let batches = batchify(len, size, seed, epoch).unwrap();
            let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
            prop_assert_eq!(all.len(), len);
            all.sort_unstable();
            prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
            prop_assert!(batches.iter().all(|b| b.len() <= size));
            prop_assert_eq!(batches, batchify(len, size, seed, epoch).unwrap());
        }
    }
}
