//! Autoregressive next-token distributions.
//!
//! Decoding only ever talks to a [`Scorer`]: given the input and the output
//! prefix generated so far, it returns a full log-distribution over the
//! vocabulary. The implementations here are small stand-ins for a trained
//! sequence-to-sequence model.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::vocab::TokenId;

pub trait Scorer: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities over the whole vocabulary for the token following `prefix`.
    fn next_token_logprobs(&self, input: &[TokenId], prefix: &[TokenId]) -> Vec<f64>;

    /// Sum of step log-probabilities of an EOS-terminated sequence.
    fn sequence_score(&self, input: &[TokenId], tokens: &[TokenId]) -> Result<f64> {
        if tokens.last() != Some(&TokenId::EOS) {
            return Err(Error::MissingEos);
        }
        let mut total = 0.0;
        for i in 0..tokens.len() {
            let lp = self.next_token_logprobs(input, &tokens[..i]);
            total += logprob_at(&lp, tokens[i])?;
        }
        Ok(total)
    }

    /// Label-smoothed negative log-likelihood: at each step the gold token
    /// gets weight `1 - eps` and every vocabulary entry (gold included) gets
    /// `eps / V`.
    fn smoothed_nll(&self, input: &[TokenId], target: &[TokenId], eps: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::SmoothingOutOfRange(eps));
        }
        if target.last() != Some(&TokenId::EOS) {
            return Err(Error::MissingEos);
        }
        let mut loss = 0.0;
        for i in 0..target.len() {
            let lp = self.next_token_logprobs(input, &target[..i]);
            let gold = logprob_at(&lp, target[i])?;
            let mut step = -(1.0 - eps) * gold;
            if eps > 0.0 {
                let sum: f64 = lp.iter().sum();
                step -= eps / lp.len() as f64 * sum;
            }
            loss += step;
        }
        Ok(loss)
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn next_token_logprobs(&self, input: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        (**self).next_token_logprobs(input, prefix)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn next_token_logprobs(&self, input: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        (**self).next_token_logprobs(input, prefix)
    }
}

fn logprob_at(lp: &[f64], tok: TokenId) -> Result<f64> {
    lp.get(tok.index()).copied().ok_or(Error::TokenOutOfRange {
        id: tok.0,
        size: lp.len(),
    })
}

/// Numerically stable log-sum-exp.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug)]
pub struct UniformScorer {
    vocab_size: usize,
}

impl UniformScorer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > 0);
        Self { vocab_size }
    }
}

impl Scorer for UniformScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_token_logprobs(&self, _input: &[TokenId], _prefix: &[TokenId]) -> Vec<f64> {
        vec![-(self.vocab_size as f64).ln(); self.vocab_size]
    }
}

/// Puts most of the mass on a known target sequence.
///
/// At step `i` the target's `i`-th token gets probability `hit`, the rest is
/// spread evenly; past the end of the target the favoured token is EOS.
/// Targets can be keyed by input; unknown inputs fall back to the default
/// target or, without one, to a uniform distribution.
#[derive(Clone, Debug)]
pub struct OracleScorer {
    vocab_size: usize,
    default_target: Option<Vec<TokenId>>,
    targets: HashMap<Vec<TokenId>, Vec<TokenId>>,
    on: f64,
    off: f64,
}

impl OracleScorer {
    pub const DEFAULT_HIT: f64 = 0.9;

    pub fn new(vocab_size: usize, target: Vec<TokenId>) -> Self {
        let mut s = Self::keyed(vocab_size);
        s.default_target = Some(target);
        s
    }

    pub fn keyed(vocab_size: usize) -> Self {
        assert!(vocab_size > 1);
        Self::with_hit(vocab_size, Self::DEFAULT_HIT)
    }

    fn with_hit(vocab_size: usize, hit: f64) -> Self {
        Self {
            vocab_size,
            default_target: None,
            targets: HashMap::new(),
            on: hit.ln(),
            off: ((1.0 - hit) / (vocab_size - 1) as f64).ln(),
        }
    }

    /// Probability given to the favoured token at each step, in (0, 1).
    pub fn hit_probability(mut self, hit: f64) -> Self {
        assert!(hit > 0.0 && hit < 1.0);
        let fresh = Self::with_hit(self.vocab_size, hit);
        self.on = fresh.on;
        self.off = fresh.off;
        self
    }

    pub fn insert_target(&mut self, input: Vec<TokenId>, target: Vec<TokenId>) {
        self.targets.insert(input, target);
    }

    fn target_for(&self, input: &[TokenId]) -> Option<&[TokenId]> {
        self.targets
            .get(input)
            .or(self.default_target.as_ref())
            .map(Vec::as_slice)
    }
}

impl Scorer for OracleScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_token_logprobs(&self, input: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        let Some(target) = self.target_for(input) else {
            return UniformScorer::new(self.vocab_size).next_token_logprobs(input, prefix);
        };
        let favoured = target.get(prefix.len()).copied().unwrap_or(TokenId::EOS);
        let mut lp = vec![self.off; self.vocab_size];
        if let Some(slot) = lp.get_mut(favoured.index()) {
            *slot = self.on;
        }
        lp
    }
}

/// Additively smoothed bigram model over output tokens.
///
/// The context of a step is the previous output token (SOS at the start),
/// optionally combined with a hash bucket of the input when
/// `input_buckets > 1`. Contexts are encoded as `bucket * V + previous`.
#[derive(Clone, Debug, PartialEq)]
pub struct TableScorer {
    vocab_size: usize,
    alpha: f64,
    input_buckets: u32,
    counts: BTreeMap<(u64, TokenId), u64>,
    totals: HashMap<u64, u64>,
}

impl TableScorer {
    pub fn new(vocab_size: usize, alpha: f64, input_buckets: u32) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidAlpha(alpha));
        }
        if vocab_size == 0 {
            return Err(Error::Config("vocabulary size must be positive".into()));
        }
        Ok(Self {
            vocab_size,
            alpha,
            input_buckets: input_buckets.max(1),
            counts: BTreeMap::new(),
            totals: HashMap::new(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn input_buckets(&self) -> u32 {
        self.input_buckets
    }

    fn bucket(&self, input: &[TokenId]) -> u64 {
        if self.input_buckets <= 1 {
            return 0;
        }
        // FNV-1a over the little-endian token ids
        let mut h: u64 = 0xcbf29ce484222325;
        for tok in input {
            for b in tok.0.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h % self.input_buckets as u64
    }

    pub fn context_id(&self, input: &[TokenId], previous: TokenId) -> u64 {
        self.bucket(input) * self.vocab_size as u64 + previous.0 as u64
    }

    pub fn count(&self, context: u64, next: TokenId) -> u64 {
        self.counts.get(&(context, next)).copied().unwrap_or(0)
    }

    pub fn context_total(&self, context: u64) -> u64 {
        self.totals.get(&context).copied().unwrap_or(0)
    }

    /// Accumulates transition counts from `(input, target)` pairs. Targets are
    /// taken as given; include EOS to learn where sequences stop.
    pub fn train(&mut self, pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        for (i, (_, target)) in pairs.iter().enumerate() {
            if target.is_empty() {
                return Err(Error::EmptyTarget(i));
            }
            if let Some(bad) = target.iter().find(|t| t.index() >= self.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    id: bad.0,
                    size: self.vocab_size,
                });
            }
        }
        for (input, target) in pairs {
            let mut prev = TokenId::SOS;
            for &tok in target {
                let ctx = self.context_id(input, prev);
                *self.counts.entry((ctx, tok)).or_default() += 1;
                *self.totals.entry(ctx).or_default() += 1;
                prev = tok;
            }
        }
        Ok(())
    }

    /// Serializes as a header line followed by `ctx-id TAB tok-id TAB count` rows.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "alpha={}\tvocab_size={}\tinput_buckets={}\n",
            self.alpha, self.vocab_size, self.input_buckets
        );
        for (&(ctx, tok), &count) in &self.counts {
            let _ = writeln!(out, "{ctx}\t{tok}\t{count}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let err = |line: usize, reason: &str| Error::ScorerFormat {
            line,
            reason: reason.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header"))?;
        let mut alpha = None;
        let mut vocab_size = None;
        let mut buckets = 1u32;
        for field in header.split('\t') {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| err(1, "malformed header field"))?;
            match k {
                "alpha" => alpha = Some(v.parse::<f64>().map_err(|_| err(1, "bad alpha"))?),
                "vocab_size" => {
                    vocab_size = Some(v.parse::<usize>().map_err(|_| err(1, "bad vocab_size"))?)
                }
                "input_buckets" => buckets = v.parse().map_err(|_| err(1, "bad input_buckets"))?,
                _ => return Err(err(1, "unknown header field")),
            }
        }
        let alpha = alpha.ok_or_else(|| err(1, "header lacks alpha"))?;
        let vocab_size = vocab_size.ok_or_else(|| err(1, "header lacks vocab_size"))?;
        let mut scorer = Self::new(vocab_size, alpha, buckets)?;
        let max_ctx = scorer.input_buckets as u64 * vocab_size as u64;
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let mut field = |name: &str| -> Result<u64> {
                parts
                    .next()
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| err(i + 1, &format!("bad or missing {name}")))
            };
            let (ctx, tok, count) = (field("ctx-id")?, field("tok-id")?, field("count")?);
            if ctx >= max_ctx || tok >= vocab_size as u64 {
                return Err(err(i + 1, "id out of range"));
            }
            if count == 0 {
                continue;
            }
            let key = (ctx, TokenId(tok as u32));
            if scorer.counts.insert(key, count).is_some() {
                return Err(err(i + 1, "duplicate row"));
            }
            *scorer.totals.entry(ctx).or_default() += count;
        }
        Ok(scorer)
    }
}

/// Fits a [`TableScorer`] to the given pairs in closed form.
pub fn train_table_scorer(
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    alpha: f64,
    vocab_size: usize,
    input_buckets: u32,
) -> Result<TableScorer> {
    let mut scorer = TableScorer::new(vocab_size, alpha, input_buckets)?;
    scorer.train(pairs)?;
    Ok(scorer)
}

impl Scorer for TableScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_token_logprobs(&self, input: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        let prev = prefix.last().copied().unwrap_or(TokenId::SOS);
        let ctx = self.context_id(input, prev);
        let denom = (self.context_total(ctx) as f64 + self.alpha * self.vocab_size as f64).ln();
        let base = self.alpha.ln() - denom;
        let mut lp = vec![base; self.vocab_size];
        for (&(_, tok), &c) in self
            .counts
            .range((ctx, TokenId(0))..=(ctx, TokenId(u32::MAX)))
        {
            lp[tok.index()] = (c as f64 + self.alpha).ln() - denom;
        }
        lp
    }
}
