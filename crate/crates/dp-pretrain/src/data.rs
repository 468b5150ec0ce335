//! Synthetic corpus generation, token masking, and batch membership sampling.
//!
//! Sequences are drawn from a seeded first-order Markov chain over the content
//! vocabulary, giving data with tunable predictability: a model that learns the
//! transition structure beats the unigram baseline by a wide margin.

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream, StreamKey};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub const PAD: u16 = 0;
pub const CLS: u16 = 1;
pub const SEP: u16 = 2;
pub const MASK: u16 = 3;
/// First non-reserved token id; everything from here up is content.
pub const FIRST_CONTENT: u16 = 4;

/// Recipe for a deterministic synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub num_examples: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Sharpness of the transition rows: 0 gives a uniform chain, larger
    /// values concentrate each row on a few successors.
    pub concentration: f64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < FIRST_CONTENT as usize + 1 {
            return Err(Error::parameter(format!(
                "vocab_size {} leaves no content tokens (need > {})",
                self.vocab_size, FIRST_CONTENT
            )));
        }
        if self.vocab_size > u16::MAX as usize + 1 {
            return Err(Error::parameter(format!(
                "vocab_size {} exceeds the u16 token range",
                self.vocab_size
            )));
        }
        if self.seq_len < 4 {
            return Err(Error::parameter(format!(
                "seq_len {} too short for CLS + segment + SEP + segment",
                self.seq_len
            )));
        }
        if self.num_examples == 0 {
            return Err(Error::parameter("corpus needs at least one example"));
        }
        if !(self.concentration >= 0.0) {
            return Err(Error::parameter(format!(
                "concentration must be >= 0, got {}",
                self.concentration
            )));
        }
        let content = self.vocab_size - FIRST_CONTENT as usize;
        let table_bytes = content * content * 8;
        if table_bytes > 1 << 31 {
            return Err(Error::parameter(format!(
                "transition table for {content} content tokens needs {table_bytes} bytes; \
                 this generator is for desk-scale vocabularies"
            )));
        }
        Ok(())
    }

    fn content_count(&self) -> usize {
        self.vocab_size - FIRST_CONTENT as usize
    }
}

/// Generated corpus: `num_examples` sequences of `seq_len` token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    spec: CorpusSpec,
    tokens: Vec<u16>,
}

/// Per-row cumulative transition distribution over content tokens.
struct TransitionTable {
    content: usize,
    cdf: Vec<f64>,
}

impl TransitionTable {
    fn build(spec: &CorpusSpec) -> Self {
        let w = spec.content_count();
        let stream = RngStream::new(spec.seed);
        let mut cdf = vec![0.0f64; w * w];
        for row in 0..w {
            let mut rng = stream.key(0, row as u64, Purpose::CorpusTransitions).rng();
            let r = &mut cdf[row * w..(row + 1) * w];
            // draw first, shift by the row max so exp stays finite at any
            // sharpness
            for slot in r.iter_mut() {
                *slot = spec.concentration * rng.random::<f64>();
            }
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut acc = 0.0;
            for slot in r.iter_mut() {
                acc += (*slot - m).exp();
                *slot = acc;
            }
            let total = acc;
            for slot in r.iter_mut() {
                *slot /= total;
            }
        }
        TransitionTable { content: w, cdf }
    }

    fn next(&self, current: usize, u: f64) -> usize {
        let row = &self.cdf[current * self.content..(current + 1) * self.content];
        // first index whose cumulative mass exceeds u
        match row.binary_search_by(|x| x.partial_cmp(&u).unwrap()) {
            Ok(i) => (i + 1).min(self.content - 1),
            Err(i) => i.min(self.content - 1),
        }
    }
}

impl Corpus {
    /// Deterministically generate the corpus described by `spec`.
    pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
        spec.validate()?;
        let table = TransitionTable::build(spec);
        let w = spec.content_count();
        let l = spec.seq_len;
        let stream = RngStream::new(spec.seed);
        let mut tokens = Vec::with_capacity(spec.num_examples * l);
        for i in 0..spec.num_examples {
            let mut rng = stream.key(0, i as u64, Purpose::CorpusChain).rng();
            // segment split: s0 content tokens, then SEP, then the rest
            let s0 = rng.random_range(1..=l - 3);
            let mut current = rng.random_range(0..w);
            tokens.push(CLS);
            for pos in 0..l - 2 {
                if pos == s0 {
                    tokens.push(SEP);
                }
                tokens.push(FIRST_CONTENT + current as u16);
                if pos + 1 < l - 2 {
                    current = table.next(current, rng.random());
                }
            }
            debug_assert_eq!(tokens.len(), (i + 1) * l);
        }
        Ok(Corpus { spec: spec.clone(), tokens })
    }

    pub fn spec(&self) -> &CorpusSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.spec.num_examples
    }

    pub fn is_empty(&self) -> bool {
        self.spec.num_examples == 0
    }

    pub fn seq_len(&self) -> usize {
        self.spec.seq_len
    }

    pub fn sequence(&self, i: usize) -> &[u16] {
        let l = self.spec.seq_len;
        &self.tokens[i * l..(i + 1) * l]
    }

    /// Segment ids: 0 up to and including the SEP, 1 after it.
    pub fn token_types(sequence: &[u16]) -> Vec<u8> {
        let sep = sequence.iter().position(|&t| t == SEP).unwrap_or(sequence.len());
        sequence.iter().enumerate().map(|(i, _)| u8::from(i > sep)).collect()
    }

    /// Write one example per line as space-separated ids, after a header line
    /// recording vocabulary, sequence length, seed, and concentration.
    pub fn export(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "# vocab={} seq_len={} seed={} concentration={}",
            self.spec.vocab_size, self.spec.seq_len, self.spec.seed, self.spec.concentration
        )?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            for (j, t) in self.sequence(i).iter().enumerate() {
                if j > 0 {
                    line.push(' ');
                }
                line.push_str(&t.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Inverse of `export`, validating structure as it reads.
    pub fn import(r: impl BufRead) -> Result<Corpus> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::data("empty corpus file"))??;
        let rest = header
            .strip_prefix("# ")
            .ok_or_else(|| Error::data("corpus header must start with `# `"))?;
        let mut vocab = None;
        let mut seq_len = None;
        let mut seed = None;
        let mut concentration = None;
        for field in rest.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::data(format!("malformed header field `{field}`")))?;
            match k {
                "vocab" => vocab = Some(v.parse::<usize>().map_err(|e| Error::data(format!("vocab: {e}")))?),
                "seq_len" => seq_len = Some(v.parse::<usize>().map_err(|e| Error::data(format!("seq_len: {e}")))?),
                "seed" => seed = Some(v.parse::<u64>().map_err(|e| Error::data(format!("seed: {e}")))?),
                "concentration" => {
                    concentration =
                        Some(v.parse::<f64>().map_err(|e| Error::data(format!("concentration: {e}")))?)
                }
                other => return Err(Error::data(format!("unknown header field `{other}`"))),
            }
        }
        let vocab = vocab.ok_or_else(|| Error::data("header missing vocab"))?;
        let seq_len = seq_len.ok_or_else(|| Error::data("header missing seq_len"))?;
        let seed = seed.ok_or_else(|| Error::data("header missing seed"))?;
        let concentration = concentration.ok_or_else(|| Error::data("header missing concentration"))?;
        let mut tokens = Vec::new();
        let mut count = 0usize;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let start = tokens.len();
            for tok in line.split_whitespace() {
                let id: u16 = tok
                    .parse()
                    .map_err(|e| Error::data(format!("line {}: bad token `{tok}`: {e}", lineno + 2)))?;
                if id as usize >= vocab {
                    return Err(Error::data(format!(
                        "line {}: token {id} out of vocabulary {vocab}",
                        lineno + 2
                    )));
                }
                tokens.push(id);
            }
            let seq = &tokens[start..];
            if seq.len() != seq_len {
                return Err(Error::data(format!(
                    "line {}: {} tokens, expected {seq_len}",
                    lineno + 2,
                    seq.len()
                )));
            }
            if seq[0] != CLS {
                return Err(Error::data(format!("line {}: sequence must start with CLS", lineno + 2)));
            }
            if seq.iter().filter(|&&t| t == SEP).count() != 1 {
                return Err(Error::data(format!("line {}: expected exactly one SEP", lineno + 2)));
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::data("corpus file has a header but no examples"));
        }
        let spec = CorpusSpec { num_examples: count, seq_len, vocab_size: vocab, seed, concentration };
        spec.validate()?;
        Ok(Corpus { spec, tokens })
    }
}

/// A sequence with some content positions replaced by MASK, plus everything
/// the model and loss need to know about what was hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    /// Token ids after masking.
    pub tokens: Vec<u16>,
    /// Segment ids (0 before/at the SEP, 1 after).
    pub token_types: Vec<u8>,
    /// Masked positions, ascending.
    pub positions: Vec<usize>,
    /// Original tokens at those positions, aligned with `positions`.
    pub labels: Vec<u16>,
}

impl MaskedExample {
    /// Restore the original sequence.
    pub fn unmasked(&self) -> Vec<u16> {
        let mut out = self.tokens.clone();
        for (&p, &l) in self.positions.iter().zip(&self.labels) {
            out[p] = l;
        }
        out
    }
}

/// Hide ceil(rate * len) content tokens behind MASK, chosen uniformly without
/// replacement from the non-reserved positions.
pub fn apply_masking(sequence: &[u16], rate: f64, key: StreamKey) -> Result<MaskedExample> {
    if sequence.is_empty() {
        return Err(Error::parameter("cannot mask an empty sequence"));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::parameter(format!("mask rate must be in [0, 1], got {rate}")));
    }
    let count = (rate * sequence.len() as f64).ceil() as usize;
    let mut maskable: Vec<usize> =
        (0..sequence.len()).filter(|&i| sequence[i] >= FIRST_CONTENT).collect();
    if count > maskable.len() {
        return Err(Error::data(format!(
            "need {count} maskable positions but only {} content tokens",
            maskable.len()
        )));
    }
    let mut rng = key.rng();
    // partial Fisher-Yates: the first `count` slots become the sample
    for i in 0..count {
        let j = rng.random_range(i..maskable.len());
        maskable.swap(i, j);
    }
    let mut positions: Vec<usize> = maskable[..count].to_vec();
    positions.sort_unstable();
    let labels: Vec<u16> = positions.iter().map(|&p| sequence[p]).collect();
    let mut tokens = sequence.to_vec();
    for &p in &positions {
        tokens[p] = MASK;
    }
    let token_types = Corpus::token_types(sequence);
    Ok(MaskedExample { tokens, token_types, positions, labels })
}

/// How batch membership is drawn each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Independent inclusion of every example with probability b/n. Batch
    /// sizes fluctuate around the scheduled value; this is the regime the
    /// privacy accounting is exact for.
    Poisson,
    /// Exactly b distinct examples per step.
    Fixed,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson" => Ok(SamplingMode::Poisson),
            "fixed" => Ok(SamplingMode::Fixed),
            other => Err(Error::parameter(format!(
                "unknown sampling mode `{other}` (expected poisson or fixed)"
            ))),
        }
    }
}

impl SamplingMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::Poisson => "poisson",
            SamplingMode::Fixed => "fixed",
        }
    }
}

/// Uniform random subset of {0..n} of size m (Floyd's algorithm), sorted.
fn distinct_subset(n: usize, m: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    debug_assert!(m <= n);
    let mut chosen = std::collections::HashSet::with_capacity(m);
    for j in n - m..n {
        let t = rng.random_range(0..=j);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    let mut out: Vec<usize> = chosen.into_iter().collect();
    out.sort_unstable();
    out
}

/// Indices of the examples participating in one step.
///
/// Poisson mode draws the batch size from Binomial(n, expected/n) and then a
/// uniform subset of that size, which is jointly identical to independent
/// per-example coin flips but costs O(batch) instead of O(n).
pub fn sample_batch(
    dataset_size: usize,
    expected: u64,
    mode: SamplingMode,
    key: StreamKey,
) -> Result<Vec<usize>> {
    if dataset_size == 0 {
        return Err(Error::parameter("cannot sample from an empty dataset"));
    }
    if expected as usize > dataset_size {
        return Err(Error::parameter(format!(
            "batch size {expected} exceeds dataset size {dataset_size}"
        )));
    }
    let mut rng = key.rng();
    match mode {
        SamplingMode::Fixed => Ok(distinct_subset(dataset_size, expected as usize, &mut rng)),
        SamplingMode::Poisson => {
            let q = expected as f64 / dataset_size as f64;
            let bin = Binomial::new(dataset_size as u64, q)
                .map_err(|e| Error::parameter(format!("binomial({dataset_size}, {q}): {e}")))?;
            let m = bin.sample(&mut rng) as usize;
            Ok(distinct_subset(dataset_size, m, &mut rng))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec { num_examples: 400, seq_len: 16, vocab_size: 20, seed: 9, concentration: 4.0 }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Corpus::generate(&small_spec()).unwrap();
        let b = Corpus::generate(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sequences_are_well_formed() {
        let c = Corpus::generate(&small_spec()).unwrap();
        for i in 0..c.len() {
            let s = c.sequence(i);
            assert_eq!(s[0], CLS);
            assert_eq!(s.iter().filter(|&&t| t == SEP).count(), 1);
            assert!(!s.contains(&PAD));
            assert!(!s.contains(&MASK));
            for (j, &t) in s.iter().enumerate() {
                if j == 0 || t == SEP {
                    continue;
                }
                assert!(t >= FIRST_CONTENT && (t as usize) < c.spec().vocab_size);
            }
            let tt = Corpus::token_types(s);
            let sep = s.iter().position(|&t| t == SEP).unwrap();
            assert!(tt[..=sep].iter().all(|&x| x == 0));
            assert!(tt[sep + 1..].iter().all(|&x| x == 1));
        }
    }

    #[test]
    fn concentration_lowers_transition_entropy() {
        // empirical conditional entropy of successor given current token
        fn cond_entropy(conc: f64) -> f64 {
            let spec = CorpusSpec {
                num_examples: 3000,
                seq_len: 16,
                vocab_size: 12,
                seed: 5,
                concentration: conc,
            };
            let c = Corpus::generate(&spec).unwrap();
            let w = spec.vocab_size - FIRST_CONTENT as usize;
            let mut counts = vec![0u64; w * w];
            for i in 0..c.len() {
                let content: Vec<usize> = c
                    .sequence(i)
                    .iter()
                    .filter(|&&t| t >= FIRST_CONTENT)
                    .map(|&t| (t - FIRST_CONTENT) as usize)
                    .collect();
                for pair in content.windows(2) {
                    counts[pair[0] * w + pair[1]] += 1;
                }
            }
            let mut h = 0.0;
            let total: u64 = counts.iter().sum();
            for row in 0..w {
                let rowsum: u64 = counts[row * w..(row + 1) * w].iter().sum();
                if rowsum == 0 {
                    continue;
                }
                let p_row = rowsum as f64 / total as f64;
                let mut h_row = 0.0;
                for &c in &counts[row * w..(row + 1) * w] {
                    if c > 0 {
                        let p = c as f64 / rowsum as f64;
                        h_row -= p * p.ln();
                    }
                }
                h += p_row * h_row;
            }
            h
        }
        let uniform = cond_entropy(0.0);
        let sharp = cond_entropy(12.0);
        // uniform chain over 8 successors has entropy ln(8) = 2.079
        assert!((uniform - (8.0f64).ln()).abs() < 0.1, "uniform entropy {uniform}");
        assert!(sharp < uniform - 0.8, "sharp {sharp} vs uniform {uniform}");
    }

    #[test]
    fn export_import_roundtrip() {
        let c = Corpus::generate(&small_spec()).unwrap();
        let mut buf = Vec::new();
        c.export(&mut buf).unwrap();
        let back = Corpus::import(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn import_rejects_out_of_vocab() {
        let text = "# vocab=8 seq_len=4 seed=1 concentration=0\n1 9 2 4\n";
        let err = Corpus::import(std::io::Cursor::new(text)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn import_rejects_wrong_length() {
        let text = "# vocab=8 seq_len=5 seed=1 concentration=0\n1 4 2 4\n";
        assert!(matches!(Corpus::import(std::io::Cursor::new(text)), Err(Error::Data(_))));
    }

    #[test]
    fn masking_counts_and_reconstruction() {
        let c = Corpus::generate(&small_spec()).unwrap();
        let stream = RngStream::new(77);
        for i in 0..50 {
            let seq = c.sequence(i);
            let ex = apply_masking(seq, 0.15, stream.key(1, i as u64, Purpose::Mask)).unwrap();
            // ceil(0.15 * 16) = 3
            assert_eq!(ex.positions.len(), 3);
            for w in ex.positions.windows(2) {
                assert!(w[0] < w[1]);
            }
            for (&p, &l) in ex.positions.iter().zip(&ex.labels) {
                assert_eq!(ex.tokens[p], MASK);
                assert_eq!(seq[p], l);
                assert!(l >= FIRST_CONTENT);
            }
            assert_eq!(ex.unmasked(), seq);
        }
    }

    #[test]
    fn masking_never_hits_reserved_positions() {
        let c = Corpus::generate(&small_spec()).unwrap();
        let stream = RngStream::new(3);
        for i in 0..50 {
            let seq = c.sequence(i);
            // the highest rate the sequence supports: all content positions
            let content = seq.iter().filter(|&&t| t >= FIRST_CONTENT).count();
            let rate = content as f64 / seq.len() as f64;
            let ex = apply_masking(seq, rate, stream.key(2, i as u64, Purpose::Mask)).unwrap();
            assert_eq!(ex.positions.len(), content);
            for &p in &ex.positions {
                assert!(seq[p] >= FIRST_CONTENT);
            }
        }
    }

    #[test]
    fn masking_rate_zero_and_overflow() {
        let c = Corpus::generate(&small_spec()).unwrap();
        let seq = c.sequence(0);
        let stream = RngStream::new(3);
        let ex = apply_masking(seq, 0.0, stream.key(0, 0, Purpose::Mask)).unwrap();
        assert!(ex.positions.is_empty());
        assert_eq!(ex.tokens, seq);
        // rate 1.0 demands L masked but only L-2 are content
        let err = apply_masking(seq, 1.0, stream.key(0, 0, Purpose::Mask)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn masking_is_deterministic() {
        let c = Corpus::generate(&small_spec()).unwrap();
        let key = RngStream::new(5).key(7, 3, Purpose::Mask);
        let a = apply_masking(c.sequence(3), 0.15, key).unwrap();
        let b = apply_masking(c.sequence(3), 0.15, key).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_sampling_exact_size() {
        let key = RngStream::new(1).key(10, 0, Purpose::Batch);
        let batch = sample_batch(1000, 64, SamplingMode::Fixed, key).unwrap();
        assert_eq!(batch.len(), 64);
        for w in batch.windows(2) {
            assert!(w[0] < w[1], "indices must be distinct and sorted");
        }
        assert!(batch.iter().all(|&i| i < 1000));
    }

    #[test]
    fn poisson_sampling_mean_matches() {
        let stream = RngStream::new(2);
        let mut total = 0usize;
        let draws = 200;
        for t in 0..draws {
            let batch = sample_batch(1000, 64, SamplingMode::Poisson, stream.key(t, 0, Purpose::Batch))
                .unwrap();
            total += batch.len();
        }
        let mean = total as f64 / draws as f64;
        // std of the mean is sqrt(64 * 0.936 / 200) = 0.55
        assert!((mean - 64.0).abs() < 3.0, "poisson mean batch {mean}");
    }

    #[test]
    fn poisson_full_probability_takes_everything() {
        let key = RngStream::new(4).key(0, 0, Purpose::Batch);
        let batch = sample_batch(50, 50, SamplingMode::Poisson, key).unwrap();
        assert_eq!(batch, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_batch_rejected() {
        let key = RngStream::new(4).key(0, 0, Purpose::Batch);
        for mode in [SamplingMode::Poisson, SamplingMode::Fixed] {
            assert!(matches!(sample_batch(10, 11, mode, key), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let key = RngStream::new(6).key(3, 0, Purpose::Batch);
        let a = sample_batch(500, 32, SamplingMode::Poisson, key).unwrap();
        let b = sample_batch(500, 32, SamplingMode::Poisson, key).unwrap();
        assert_eq!(a, b);
    }
}
