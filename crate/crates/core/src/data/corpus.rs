use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, NUM_RESERVED, UNK};
use super::{DataError, Result};
use crate::numerics::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    /// Replaced target positions over target length.
    pub corrupted_fraction: f64,
    pub domain: String,
}

impl PairMeta {
    pub fn clean(domain: &str) -> Self {
        Self { corrupted_fraction: 0.0, domain: domain.to_string() }
    }

    pub fn is_clean(&self) -> bool {
        self.corrupted_fraction == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub meta: PairMeta,
}

/// Aligned sentence pairs over one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    vocab: Vocab,
    pairs: Vec<Pair>,
}

impl ParallelCorpus {
    pub fn new(vocab: Vocab, pairs: Vec<Pair>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            if p.src.is_empty() || p.tgt.is_empty() {
                return Err(DataError::Format(format!("pair {i} has an empty sentence")));
            }
            if let Some(&t) = p.src.iter().chain(&p.tgt).find(|&&t| t >= vocab.len() || (t < NUM_RESERVED && t != UNK))
            {
                return Err(DataError::Format(format!(
                    "pair {i} has id {t}, invalid for vocabulary of {}",
                    vocab.len()
                )));
            }
            if !(0.0..=1.0).contains(&p.meta.corrupted_fraction) {
                return Err(DataError::Format(format!(
                    "pair {i} corrupted fraction {} outside [0, 1]",
                    p.meta.corrupted_fraction
                )));
            }
        }
        Ok(Self { vocab, pairs })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Binary clean flags, one per pair.
    pub fn clean_labels(&self) -> Vec<bool> {
        self.pairs.iter().map(|p| p.meta.is_clean()).collect()
    }

    /// Same text under another vocabulary; tokens it lacks become UNK.
    pub fn reencode(&self, vocab: &Vocab) -> Result<Self> {
        let map = |ids: &[usize]| vocab.encode(&self.vocab.decode(ids));
        let pairs =
            self.pairs.iter().map(|p| Pair { src: map(&p.src), tgt: map(&p.tgt), meta: p.meta.clone() }).collect();
        Self::new(vocab.clone(), pairs)
    }

    /// Pairs at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let pairs = indices.iter().map(|&i| self.pairs[i].clone()).collect();
        Self { vocab: self.vocab.clone(), pairs }
    }

    pub fn with_pairs(&self, pairs: Vec<Pair>) -> Result<Self> {
        Self::new(self.vocab.clone(), pairs)
    }

    /// Fraction of all tokens (both sides) that are UNK.
    pub fn unk_rate(&self) -> f64 {
        let (mut unk, mut total) = (0usize, 0usize);
        for p in &self.pairs {
            for &t in p.src.iter().chain(&p.tgt) {
                total += 1;
                unk += (t == UNK) as usize;
            }
        }
        unk as f64 / total.max(1) as f64
    }
}

/// Replaces target tokens with uniform content tokens.
///
/// Exactly `round(sentence_rate * n)` pairs are chosen; in each, exactly
/// `round(word_rate * T)` positions (at least one when `word_rate > 0`) are
/// overwritten. A replacement may coincide with the original token; the
/// recorded fraction counts overwritten positions.
pub fn corrupt_targets(
    corpus: &ParallelCorpus,
    sentence_rate: f64,
    word_rate: f64,
    rng: &mut RngState,
) -> Result<ParallelCorpus> {
    for (name, r) in [("sentence_rate", sentence_rate), ("word_rate", word_rate)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(DataError::Config(format!("{name} {r} outside [0, 1]")));
        }
    }
    let v = corpus.vocab.len();
    if v <= NUM_RESERVED {
        return Err(DataError::Config("no content tokens to sample".into()));
    }
    let n = corpus.len();
    let chosen = rng.sample_indices(n, (sentence_rate * n as f64).round() as usize);
    let mut pairs = corpus.pairs.clone();
    for i in chosen {
        let pair = &mut pairs[i];
        let t = pair.tgt.len();
        let mut k = (word_rate * t as f64).round() as usize;
        if word_rate > 0.0 {
            k = k.clamp(1, t);
        }
        for pos in rng.sample_indices(t, k) {
            pair.tgt[pos] = NUM_RESERVED + rng.below(v - NUM_RESERVED);
        }
        pair.meta.corrupted_fraction = k as f64 / t as f64;
    }
    Ok(ParallelCorpus { vocab: corpus.vocab.clone(), pairs })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    /// Line pairs dropped because either side was blank.
    pub skipped_empty: usize,
    pub unk_tokens: usize,
    pub total_tokens: usize,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path)
        .map_err(|e| DataError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(BufReader::new(f).lines().collect::<std::io::Result<_>>()?)
}

/// Reads one sentence per line from each file. With `vocab = None` a
/// vocabulary of the `cap` most frequent tokens over both sides is built.
pub fn load_parallel_text(
    src_path: &Path,
    tgt_path: &Path,
    vocab: Option<&Vocab>,
    cap: usize,
) -> Result<(ParallelCorpus, LoadReport)> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(DataError::Format(format!("line count mismatch: {} source vs {} target", src.len(), tgt.len())));
    }
    let mut report = LoadReport::default();
    let kept: Vec<(&str, &str)> = src
        .iter()
        .zip(&tgt)
        .filter(|(s, t)| {
            let keep = !s.trim().is_empty() && !t.trim().is_empty();
            report.skipped_empty += (!keep) as usize;
            keep
        })
        .map(|(s, t)| (s.as_str(), t.as_str()))
        .collect();
    if report.skipped_empty > 0 {
        log::warn!("skipped {} empty line pairs", report.skipped_empty);
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocab::from_frequencies(
            kept.iter().flat_map(|(s, t)| s.split_whitespace().chain(t.split_whitespace())),
            cap,
        )?,
    };
    let pairs: Vec<Pair> = kept
        .iter()
        .map(|(s, t)| Pair { src: vocab.encode(s), tgt: vocab.encode(t), meta: PairMeta::clean("text") })
        .collect();
    for p in &pairs {
        for &t in p.src.iter().chain(&p.tgt) {
            report.total_tokens += 1;
            report.unk_tokens += (t == UNK) as usize;
        }
    }
    Ok((ParallelCorpus::new(vocab, pairs)?, report))
}

pub fn write_parallel_text(corpus: &ParallelCorpus, src_path: &Path, tgt_path: &Path) -> Result<()> {
    let mut s = BufWriter::new(File::create(src_path)?);
    let mut t = BufWriter::new(File::create(tgt_path)?);
    for p in &corpus.pairs {
        writeln!(s, "{}", corpus.vocab.decode(&p.src))?;
        writeln!(t, "{}", corpus.vocab.decode(&p.tgt))?;
    }
    s.flush()?;
    t.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRecord {
    index: usize,
    noise_label: String,
    corrupted_fraction: f64,
    domain: String,
}

/// One JSON record per pair: index, noise label, corrupted fraction, domain.
pub fn write_metadata(corpus: &ParallelCorpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (index, p) in corpus.pairs.iter().enumerate() {
        let rec = MetaRecord {
            index,
            noise_label: if p.meta.is_clean() { "clean" } else { "corrupted" }.to_string(),
            corrupted_fraction: p.meta.corrupted_fraction,
            domain: p.meta.domain.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| DataError::Format(e.to_string()))?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metadata(path: &Path) -> Result<Vec<PairMeta>> {
    read_lines(path)?
        .iter()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let rec: MetaRecord =
                serde_json::from_str(l).map_err(|e| DataError::Format(format!("line {}: {e}", i + 1)))?;
            if rec.index != i {
                return Err(DataError::Format(format!("line {} has index {}", i + 1, rec.index)));
            }
            Ok(PairMeta { corrupted_fraction: rec.corrupted_fraction, domain: rec.domain })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, TaskSpec};

    fn corpus(n: usize) -> ParallelCorpus {
        generate_corpus(&TaskSpec::default(), n).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let c = corpus(30);
        let mut rng = RngState::new(1);
        let out = corrupt_targets(&c, 0.0, 0.5, &mut rng).unwrap();
        assert_eq!(out, c);
        assert!(out.clean_labels().iter().all(|&x| x));
    }

    #[test]
    fn rejects_bad_rates() {
        let c = corpus(3);
        let mut rng = RngState::new(1);
        assert!(corrupt_targets(&c, 1.5, 0.1, &mut rng).is_err());
        assert!(corrupt_targets(&c, 0.5, -0.1, &mut rng).is_err());
    }

    #[test]
    fn full_corruption_matches_binomial() {
        // Each position is redrawn from V - 4 content tokens, so it differs
        // from the original with probability (V - 5) / (V - 4).
        let c = corpus(400);
        let mut rng = RngState::new(11);
        let out = corrupt_targets(&c, 1.0, 1.0, &mut rng).unwrap();
        let (mut n, mut changed) = (0usize, 0usize);
        for (a, b) in c.pairs().iter().zip(out.pairs()) {
            for (x, y) in a.tgt.iter().zip(&b.tgt) {
                n += 1;
                changed += (x != y) as usize;
            }
            assert_eq!(b.meta.corrupted_fraction, 1.0);
        }
        let v = c.vocab().len() as f64;
        let p = (v - 5.0) / (v - 4.0);
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((changed as f64 - mean).abs() <= 3.0 * sd, "{changed} vs {mean} ± {sd}");
    }

    #[test]
    fn partial_corruption_bookkeeping() {
        let c = corpus(200);
        let mut rng = RngState::new(5);
        let out = corrupt_targets(&c, 0.4, 0.3, &mut rng).unwrap();
        assert_eq!(out.clean_labels().iter().filter(|&&x| !x).count(), 80);
        for (a, b) in c.pairs().iter().zip(out.pairs()) {
            assert_eq!(a.src, b.src);
            let t = a.tgt.len();
            let k = ((0.3 * t as f64).round() as usize).max(1);
            if b.meta.is_clean() {
                assert_eq!(a.tgt, b.tgt);
            } else {
                assert_eq!(b.meta.corrupted_fraction, k as f64 / t as f64);
                let diff = a.tgt.iter().zip(&b.tgt).filter(|(x, y)| x != y).count();
                assert!(diff <= k);
            }
            assert!(b.tgt.iter().all(|&x| (NUM_RESERVED..200).contains(&x)));
        }
    }

    #[test]
    fn noise_regimes_scale_with_rate() {
        let c = corpus(100);
        for rate in [0.2, 0.4, 0.6, 0.8] {
            let out = corrupt_targets(&c, rate, 0.5, &mut RngState::new(3)).unwrap();
            let noisy = out.clean_labels().iter().filter(|&&x| !x).count();
            assert_eq!(noisy, (rate * 100.0).round() as usize);
        }
    }

    #[test]
    fn text_round_trip_and_unknowns() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
        std::fs::write(&s, "the cat sat\n\nhello world\n").unwrap();
        std::fs::write(&t, "le chat\nvide\nbonjour monde\n").unwrap();
        let (c, rep) = load_parallel_text(&s, &t, None, 100).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(rep.skipped_empty, 1);
        assert_eq!(rep.unk_tokens, 0);
        assert_eq!(c.vocab().decode(&c.pairs()[1].src), "hello world");

        let small = Vocab::new(["the", "cat"]).unwrap();
        let (c2, rep2) = load_parallel_text(&s, &t, Some(&small), 100).unwrap();
        assert_eq!(c2.pairs()[0].src, vec![4, 5, UNK]);
        assert_eq!(rep2.unk_tokens, 1 + 2 + 2 + 2);

        let out = (dir.path().join("b.src"), dir.path().join("b.tgt"));
        write_parallel_text(&c, &out.0, &out.1).unwrap();
        let (c3, _) = load_parallel_text(&out.0, &out.1, Some(c.vocab()), 100).unwrap();
        assert_eq!(c3.pairs(), c.pairs());
    }

    #[test]
    fn line_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("a"), dir.path().join("b"));
        std::fs::write(&s, "a\nb\n").unwrap();
        std::fs::write(&t, "a\n").unwrap();
        assert!(matches!(load_parallel_text(&s, &t, None, 10), Err(DataError::Format(_))));
        assert!(matches!(load_parallel_text(&dir.path().join("missing"), &t, None, 10), Err(DataError::Io(_))));
    }

    #[test]
    fn metadata_sidecar_round_trip() {
        let c = corpus(20);
        let noisy = corrupt_targets(&c, 0.5, 0.5, &mut RngState::new(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.jsonl");
        write_metadata(&noisy, &path).unwrap();
        let back = read_metadata(&path).unwrap();
        let orig: Vec<_> = noisy.pairs().iter().map(|p| p.meta.clone()).collect();
        assert_eq!(back, orig);
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.lines().next().unwrap().contains("\"index\":0"));
    }

    #[test]
    fn rejects_invalid_pairs() {
        let v = Vocab::synthetic(10).unwrap();
        let meta = PairMeta::clean("x");
        let empty = Pair { src: vec![], tgt: vec![5], meta: meta.clone() };
        assert!(ParallelCorpus::new(v.clone(), vec![empty]).is_err());
        let big = Pair { src: vec![10], tgt: vec![5], meta: meta.clone() };
        assert!(ParallelCorpus::new(v.clone(), vec![big]).is_err());
        let pad = Pair { src: vec![0], tgt: vec![5], meta };
        assert!(ParallelCorpus::new(v, vec![pad]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn corruption_preserves_sources_and_order(
            seed in 0u64..1000, srate in 0.0f64..=1.0, wrate in 0.0f64..=1.0
        ) {
            let c = corpus(25);
            let out = corrupt_targets(&c, srate, wrate, &mut RngState::new(seed)).unwrap();
            proptest::prop_assert_eq!(out.len(), c.len());
            for (a, b) in c.pairs().iter().zip(out.pairs()) {
                proptest::prop_assert_eq!(&a.src, &b.src);
                proptest::prop_assert_eq!(a.tgt.len(), b.tgt.len());
                let f = b.meta.corrupted_fraction * b.tgt.len() as f64;
                proptest::prop_assert!((f - f.round()).abs() < 1e-9);
            }
        }
    }
}
