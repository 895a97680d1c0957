use serde::{Deserialize, Serialize};

use super::corpus::{Pair, PairMeta, ParallelCorpus};
use super::vocab::{Vocab, NUM_RESERVED};
use super::{DataError, Result};
use crate::numerics::RngState;

/// Bijection on content-token indices `0..m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MappingRule {
    Identity,
    /// Cyclic shift: `i -> (i + offset) mod m`.
    Shift {
        offset: usize,
    },
    /// Random permutation drawn from its own seed.
    Permutation {
        seed: u64,
    },
    /// Applies each rule in turn.
    Chain {
        rules: Vec<MappingRule>,
    },
}

impl MappingRule {
    /// Lookup table of the rule over `m` content indices.
    pub fn table(&self, m: usize) -> Vec<usize> {
        match self {
            MappingRule::Identity => (0..m).collect(),
            MappingRule::Shift { offset } => (0..m).map(|i| (i + offset) % m).collect(),
            MappingRule::Permutation { seed } => {
                let mut perm: Vec<usize> = (0..m).collect();
                RngState::new(*seed).substream("rule", 0).shuffle(&mut perm);
                perm
            }
            MappingRule::Chain { rules } => {
                let mut t: Vec<usize> = (0..m).collect();
                for r in rules {
                    let next = r.table(m);
                    for x in t.iter_mut() {
                        *x = next[*x];
                    }
                }
                t
            }
        }
    }
}

/// Recipe for a synthetic translation task.
///
/// Sources draw content tokens from ids `content_offset..vocab_size` with
/// Zipfian frequencies (lower ids more frequent). The target maps each token
/// through `rule` and then reverses consecutive blocks of `reorder_block`
/// tokens (1 disables reordering).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub content_offset: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub rule: MappingRule,
    pub reorder_block: usize,
    pub zipf_exponent: f64,
    pub domain: String,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            content_offset: NUM_RESERVED,
            min_len: 5,
            max_len: 15,
            rule: MappingRule::Permutation { seed: 17 },
            reorder_block: 2,
            zipf_exponent: 1.0,
            domain: "in-domain".to_string(),
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn content_size(&self) -> usize {
        self.vocab_size.saturating_sub(self.content_offset)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DataError::Config(m));
        if self.content_offset < NUM_RESERVED {
            return fail(format!("content_offset {} overlaps reserved ids", self.content_offset));
        }
        if self.vocab_size <= self.content_offset {
            return fail(format!(
                "vocab_size {} leaves no content tokens above {}",
                self.vocab_size, self.content_offset
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("bad length range [{}, {}]", self.min_len, self.max_len));
        }
        if self.reorder_block == 0 {
            return fail("reorder_block must be at least 1".into());
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return fail(format!("zipf_exponent {} must be finite and >= 0", self.zipf_exponent));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Target for a source sentence.
    pub fn translate(&self, src: &[usize]) -> Vec<usize> {
        let table = self.rule.table(self.content_size());
        self.translate_with(&table, src)
    }

    fn translate_with(&self, table: &[usize], src: &[usize]) -> Vec<usize> {
        let off = self.content_offset;
        let mut out: Vec<usize> = src.iter().map(|&t| off + table[t - off]).collect();
        for block in out.chunks_mut(self.reorder_block) {
            block.reverse();
        }
        out
    }

    fn zipf_cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (1..=self.content_size())
            .map(|r| {
                acc += (r as f64).powf(-self.zipf_exponent);
                acc
            })
            .collect();
        for c in cdf.iter_mut() {
            *c /= acc;
        }
        cdf
    }
}

/// `n` sentence pairs, a pure function of the spec.
pub fn generate_corpus(spec: &TaskSpec, n: usize) -> Result<ParallelCorpus> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::Config("corpus size must be at least 1".into()));
    }
    let table = spec.rule.table(spec.content_size());
    let cdf = spec.zipf_cdf();
    let mut rng = RngState::new(spec.seed).substream(&format!("data/{}", spec.domain), 0);
    let pairs = (0..n)
        .map(|_| {
            let len = rng.range_inclusive(spec.min_len, spec.max_len);
            let src: Vec<usize> = (0..len)
                .map(|_| {
                    let u = rng.uniform();
                    let r = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                    spec.content_offset + r
                })
                .collect();
            let tgt = spec.translate_with(&table, &src);
            Pair { src, tgt, meta: PairMeta::clean(&spec.domain) }
        })
        .collect();
    ParallelCorpus::new(Vocab::synthetic(spec.vocab_size)?, pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainShift {
    /// Content tokens from a range disjoint from the base vocabulary.
    VocabShift,
    /// Longer sentences.
    LengthShift { min_len: usize, max_len: usize },
    /// Base rule followed by a half-cycle shift, so every content token maps
    /// differently.
    RuleShift,
}

impl DomainShift {
    pub fn name(&self) -> &'static str {
        match self {
            DomainShift::VocabShift => "vocab-shift",
            DomainShift::LengthShift { .. } => "length-shift",
            DomainShift::RuleShift => "rule-shift",
        }
    }

    /// The task the shifted corpus is drawn from.
    pub fn apply(&self, base: &TaskSpec) -> Result<TaskSpec> {
        base.validate()?;
        let m = base.content_size();
        let mut spec = base.clone();
        spec.domain = self.name().to_string();
        match *self {
            DomainShift::VocabShift => {
                spec.content_offset = base.vocab_size;
                spec.vocab_size = base.vocab_size + m;
            }
            DomainShift::LengthShift { min_len, max_len } => {
                spec.min_len = min_len;
                spec.max_len = max_len;
            }
            DomainShift::RuleShift => {
                if m < 2 {
                    return Err(DataError::Config("rule shift needs two content tokens".into()));
                }
                spec.rule = MappingRule::Chain { rules: vec![base.rule.clone(), MappingRule::Shift { offset: m / 2 }] };
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Corpus from a shifted distribution, tagged with the shift's domain name.
/// A vocab-shift corpus carries its own larger vocabulary; re-encode it with
/// the in-domain vocabulary to expose the unknown tokens.
pub fn generate_ood_corpus(base: &TaskSpec, shift: &DomainShift, n: usize) -> Result<ParallelCorpus> {
    generate_corpus(&shift.apply(base)?, n)
}
