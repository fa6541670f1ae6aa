//! Constrained beam search and entity ranking.
//!
//! Disallowed tokens have their log-probabilities replaced by `-inf`; the
//! surviving entries are used as-is, without renormalizing over the allowed
//! set. A decoded entity therefore scores exactly what the unconstrained
//! model assigns to it.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::scorer::Scorer;
use crate::trie::{EntityTrie, NodeId};
use crate::vocab::TokenId;

/// Restricts which token may follow a partial output.
///
/// The state is threaded through decoding so implementations need not
/// re-walk the prefix at every step.
pub trait Constraint {
    type State: Clone;

    fn initial(&self) -> Self::State;

    /// Allowed next tokens. An empty set marks a dead end.
    fn allowed(&self, state: &Self::State) -> Vec<TokenId>;

    /// Transition on a non-EOS token drawn from `allowed(state)`.
    fn advance(&self, state: &Self::State, token: TokenId) -> Self::State;
}

/// Constrains decoding to the sequences stored in a trie.
pub struct TrieConstraint<'a> {
    trie: &'a EntityTrie,
}

impl<'a> TrieConstraint<'a> {
    pub fn new(trie: &'a EntityTrie) -> Self {
        Self { trie }
    }
}

impl Constraint for TrieConstraint<'_> {
    type State = NodeId;

    fn initial(&self) -> NodeId {
        self.trie.root()
    }

    fn allowed(&self, &node: &NodeId) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = self.trie.children(node).collect();
        if self.trie.is_terminal(node) {
            out.push(TokenId::EOS);
        }
        out
    }

    fn advance(&self, &node: &NodeId, token: TokenId) -> NodeId {
        self.trie
            .child(node, token)
            .expect("advance called with a token outside the allowed set")
    }
}

/// Wraps any `prefix -> allowed tokens` function.
pub struct PrefixConstraint<F>(pub F);

impl<F> Constraint for PrefixConstraint<F>
where
    F: Fn(&[TokenId]) -> Vec<TokenId>,
{
    type State = Vec<TokenId>;

    fn initial(&self) -> Vec<TokenId> {
        Vec::new()
    }

    fn allowed(&self, prefix: &Vec<TokenId>) -> Vec<TokenId> {
        (self.0)(prefix)
    }

    fn advance(&self, prefix: &Vec<TokenId>, token: TokenId) -> Vec<TokenId> {
        let mut next = prefix.clone();
        next.push(token);
        next
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub k: usize,
    pub max_steps: usize,
    pub length_normalize: bool,
}

impl BeamConfig {
    pub fn new(k: usize, max_steps: usize, length_normalize: bool) -> Result<Self> {
        let cfg = Self {
            k,
            max_steps,
            length_normalize,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max steps must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for BeamConfig {
    /// 10 beams, 15 steps, length normalization on.
    fn default() -> Self {
        Self {
            k: 10,
            max_steps: 15,
            length_normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, no SOS; ends with EOS iff finished.
    pub tokens: Vec<TokenId>,
    pub cum_logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// `cum_logprob / len` with EOS counted in the length.
    pub fn normalized_score(&self) -> f64 {
        self.cum_logprob / self.tokens.len().max(1) as f64
    }

    pub fn ranking_score(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.normalized_score()
        } else {
            self.cum_logprob
        }
    }
}

/// Sets entries outside `allowed` to `-inf` and leaves the rest untouched.
/// Returns `None` when nothing is allowed.
pub fn mask_logprobs(logprobs: &[f64], allowed: &[TokenId]) -> Option<Vec<f64>> {
    if allowed.is_empty() {
        return None;
    }
    let mut masked = vec![f64::NEG_INFINITY; logprobs.len()];
    for tok in allowed {
        if let Some(&lp) = logprobs.get(tok.index()) {
            masked[tok.index()] = lp;
        }
    }
    Some(masked)
}

/// Descending score, then ascending token sequence.
fn rank_order(a_score: f64, a_tokens: &[TokenId], b_score: f64, b_tokens: &[TokenId]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a_tokens.cmp(b_tokens))
}

struct Live<S> {
    tokens: Vec<TokenId>,
    cum: f64,
    state: S,
}

/// Beam search with `k` live hypotheses.
///
/// Every expansion that emits EOS is retired to the finished pool and does not
/// take a beam slot; the best `k` non-final expansions by cumulative
/// log-probability stay live. Hypotheses still live after `max_steps` tokens
/// are discarded. Returns at most `k` finished hypotheses, best first under
/// the configured normalization.
pub fn beam_search<S, C>(
    scorer: &S,
    input: &[TokenId],
    constraint: &C,
    config: &BeamConfig,
) -> Vec<Hypothesis>
where
    S: Scorer + ?Sized,
    C: Constraint,
{
    let mut live = vec![Live {
        tokens: Vec::new(),
        cum: 0.0,
        state: constraint.initial(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..config.max_steps {
        if live.is_empty() {
            break;
        }
        // (parent index, token, cumulative score)
        let mut candidates: Vec<(usize, TokenId, f64)> = Vec::new();
        for (pi, hyp) in live.iter().enumerate() {
            let allowed = constraint.allowed(&hyp.state);
            let logprobs = scorer.next_token_logprobs(input, &hyp.tokens);
            let Some(masked) = mask_logprobs(&logprobs, &allowed) else {
                continue;
            };
            for tok in allowed {
                let lp = masked[tok.index()];
                if lp == f64::NEG_INFINITY || lp.is_nan() {
                    continue;
                }
                candidates.push((pi, tok, hyp.cum + lp));
            }
        }

        candidates.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then_with(|| live[a.0].tokens.cmp(&live[b.0].tokens))
                .then_with(|| a.1.cmp(&b.1))
        });

        let mut next = Vec::with_capacity(config.k);
        for (pi, tok, cum) in candidates {
            let parent = &live[pi];
            let mut tokens = Vec::with_capacity(parent.tokens.len() + 1);
            tokens.extend_from_slice(&parent.tokens);
            tokens.push(tok);
            if tok == TokenId::EOS {
                finished.push(Hypothesis {
                    tokens,
                    cum_logprob: cum,
                    finished: true,
                });
            } else if next.len() < config.k {
                let state = constraint.advance(&parent.state, tok);
                next.push(Live { tokens, cum, state });
            }
        }
        live = next;
    }

    finished.sort_by(|a, b| {
        rank_order(
            a.ranking_score(config.length_normalize),
            &a.tokens,
            b.ranking_score(config.length_normalize),
            &b.tokens,
        )
    });
    finished.truncate(config.k);
    finished
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntity {
    pub name: String,
    /// Entity tokens without EOS.
    pub tokens: Vec<TokenId>,
    pub raw_logprob: f64,
    /// Length-normalized score, or the raw score when normalization is off.
    pub normalized_score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub entries: Vec<RankedEntity>,
}

impl RankedResult {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn top(&self) -> Option<&RankedEntity> {
        self.entries.first()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    fn from_scored(mut scored: Vec<(Vec<TokenId>, String, f64)>, length_normalize: bool) -> Self {
        let mut entries: Vec<RankedEntity> = scored
            .drain(..)
            .map(|(tokens, name, raw)| {
                // EOS is part of the decoded length
                let len = tokens.len() + 1;
                RankedEntity {
                    normalized_score: if length_normalize {
                        raw / len as f64
                    } else {
                        raw
                    },
                    name,
                    tokens,
                    raw_logprob: raw,
                }
            })
            .collect();
        entries.sort_by(|a, b| {
            rank_order(a.normalized_score, &a.tokens, b.normalized_score, &b.tokens)
        });
        Self { entries }
    }
}

/// Top-k entities from a trie-constrained beam search, resolved to catalog names.
pub fn rank_entities<S: Scorer + ?Sized>(
    scorer: &S,
    input: &[TokenId],
    trie: &EntityTrie,
    catalog: &Catalog,
    config: &BeamConfig,
) -> Result<RankedResult> {
    config.validate()?;
    let hyps = beam_search(scorer, input, &TrieConstraint::new(trie), config);
    let scored = hyps
        .into_iter()
        .map(|h| {
            let tokens = h.tokens[..h.tokens.len() - 1].to_vec();
            let name = catalog
                .name_for(&tokens)
                .ok_or_else(|| Error::UnknownEntity(format!("token path {tokens:?}")))?
                .to_string();
            Ok((tokens, name, h.cum_logprob))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedResult::from_scored(scored, config.length_normalize))
}

/// Scores every catalog entry and sorts, under the same rules as [`rank_entities`].
pub fn exhaustive_rank<S: Scorer + ?Sized>(
    scorer: &S,
    input: &[TokenId],
    catalog: &Catalog,
    length_normalize: bool,
) -> Result<RankedResult> {
    let scored = catalog
        .records()
        .map(|rec| {
            let mut seq = rec.tokens.clone();
            seq.push(TokenId::EOS);
            let raw = scorer.sequence_score(input, &seq)?;
            Ok((rec.tokens, rec.name, raw))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedResult::from_scored(scored, length_normalize))
}
