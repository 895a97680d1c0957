use super::corpus::ParallelCorpus;
use super::vocab::PAD;
use super::{DataError, Result};
use crate::numerics::RngState;

/// Padded sentence pairs. Matrices are row-major `[size, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_mask: Vec<bool>,
    /// Sentences whose training loss uses hint interpolation.
    pub hint: Vec<bool>,
    /// Corpus index of each row.
    pub indices: Vec<usize>,
}

fn pad_rows(rows: &[&[usize]]) -> (usize, Vec<usize>, Vec<bool>) {
    let len = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut ids = vec![PAD; rows.len() * len];
    let mut mask = vec![false; rows.len() * len];
    for (b, r) in rows.iter().enumerate() {
        ids[b * len..b * len + r.len()].copy_from_slice(r);
        mask[b * len..b * len + r.len()].fill(true);
    }
    (len, ids, mask)
}

impl Batch {
    /// Batch of the pairs at `indices`, in order, without hints.
    pub fn from_corpus(corpus: &ParallelCorpus, indices: &[usize]) -> Self {
        let pairs = corpus.pairs();
        let srcs: Vec<&[usize]> = indices.iter().map(|&i| pairs[i].src.as_slice()).collect();
        let tgts: Vec<&[usize]> = indices.iter().map(|&i| pairs[i].tgt.as_slice()).collect();
        Self::from_sequences(&srcs, &tgts, indices.to_vec())
    }

    pub fn from_sequences(srcs: &[&[usize]], tgts: &[&[usize]], indices: Vec<usize>) -> Self {
        assert_eq!(srcs.len(), tgts.len());
        assert_eq!(srcs.len(), indices.len());
        let (src_len, src, src_mask) = pad_rows(srcs);
        let (tgt_len, tgt, tgt_mask) = pad_rows(tgts);
        Self {
            size: srcs.len(),
            src_len,
            tgt_len,
            src,
            tgt,
            src_mask,
            tgt_mask,
            hint: vec![false; srcs.len()],
            indices,
        }
    }

    pub fn src_row(&self, b: usize) -> &[usize] {
        let row = &self.src[b * self.src_len..(b + 1) * self.src_len];
        &row[..self.src_mask[b * self.src_len..(b + 1) * self.src_len].iter().filter(|&&m| m).count()]
    }

    pub fn tgt_row(&self, b: usize) -> &[usize] {
        let row = &self.tgt[b * self.tgt_len..(b + 1) * self.tgt_len];
        &row[..self.tgt_mask[b * self.tgt_len..(b + 1) * self.tgt_len].iter().filter(|&&m| m).count()]
    }

    pub fn num_target_tokens(&self) -> usize {
        self.tgt_mask.iter().filter(|&&m| m).count()
    }
}

/// Shuffles the corpus and cuts it into padded batches. In every batch a
/// random `floor(hint_fraction * size)` sentences get hints.
pub fn make_batches(
    corpus: &ParallelCorpus,
    batch_size: usize,
    hint_fraction: f64,
    rng: &mut RngState,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(DataError::Config("batch size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&hint_fraction) {
        return Err(DataError::Config(format!("hint fraction {hint_fraction} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    rng.shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let mut batch = Batch::from_corpus(corpus, chunk);
            let k = (hint_fraction * chunk.len() as f64).floor() as usize;
            for i in rng.sample_indices(chunk.len(), k) {
                batch.hint[i] = true;
            }
            batch
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, TaskSpec};

    #[test]
    fn half_of_eight_gets_hints() {
        let c = generate_corpus(&TaskSpec::default(), 64).unwrap();
        let batches = make_batches(&c, 8, 0.5, &mut RngState::new(1)).unwrap();
        assert_eq!(batches.len(), 8);
        for b in &batches {
            assert_eq!(b.hint.len(), 8);
            assert_eq!(b.hint.iter().filter(|&&h| h).count(), 4);
        }
    }

    #[test]
    fn zero_fraction_no_hints() {
        let c = generate_corpus(&TaskSpec::default(), 20).unwrap();
        let batches = make_batches(&c, 7, 0.0, &mut RngState::new(1)).unwrap();
        assert_eq!(batches.iter().map(|b| b.size).collect::<Vec<_>>(), vec![7, 7, 6]);
        assert!(batches.iter().all(|b| b.hint.iter().all(|&h| !h)));
    }

    #[test]
    fn invalid_arguments() {
        let c = generate_corpus(&TaskSpec::default(), 4).unwrap();
        assert!(make_batches(&c, 0, 0.5, &mut RngState::new(1)).is_err());
        assert!(make_batches(&c, 2, 1.5, &mut RngState::new(1)).is_err());
    }

    #[test]
    fn batches_cover_corpus_once() {
        let c = generate_corpus(&TaskSpec::default(), 50).unwrap();
        let batches = make_batches(&c, 8, 0.5, &mut RngState::new(4)).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
        for b in &batches {
            for (r, &i) in b.indices.iter().enumerate() {
                assert_eq!(b.src_row(r), c.pairs()[i].src.as_slice());
                assert_eq!(b.tgt_row(r), c.pairs()[i].tgt.as_slice());
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn mask_marks_exactly_non_pad(seed in 0u64..500, bs in 1usize..12, frac in 0.0f64..=1.0) {
            let c = generate_corpus(&TaskSpec::default().with_seed(seed), 30).unwrap();
            let batches = make_batches(&c, bs, frac, &mut RngState::new(seed)).unwrap();
            for b in batches {
                for (id, m) in b.src.iter().zip(&b.src_mask).chain(b.tgt.iter().zip(&b.tgt_mask)) {
                    proptest::prop_assert_eq!(*m, *id != PAD);
                }
                let want = (frac * b.size as f64).floor() as usize;
                proptest::prop_assert_eq!(b.hint.iter().filter(|&&h| h).count(), want);
                let max_t = b.indices.iter().map(|&i| c.pairs()[i].tgt.len()).max().unwrap();
                proptest::prop_assert_eq!(b.tgt_len, max_t);
            }
        }
    }
}
