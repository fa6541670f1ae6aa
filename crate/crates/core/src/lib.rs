//! Entity retrieval, disambiguation and linking by constrained decoding over
//! a prefix trie of tokenized entity names.
//!
//! A [`Scorer`] supplies next-token log-probabilities. [`beam_search`] masks
//! every token the active [`Constraint`] disallows, so only catalog names
//! (or, for linking, well-formed markup over the source) can be produced.

pub mod beam;
pub mod catalog;
pub mod error;
pub mod eval;
pub mod markup;
pub mod scorer;
pub mod tasks;
pub mod trie;
pub mod vocab;

pub use beam::{
    beam_search, exhaustive_rank, mask_logprobs, rank_entities, BeamConfig, Constraint, Hypothesis,
    PrefixConstraint, RankedEntity, RankedResult, TrieConstraint,
};
pub use catalog::{load_candidate_sets, CandidateSet, Catalog, EntityRecord, LoadReport};
pub use error::{Error, Result};
pub use eval::{
    ed_accuracy, match_type, micro_f1_spans, r_precision, EvalReport, MatchType, RetrievalReport,
};
pub use markup::{
    link_document, parse_document, parse_markup, render_markup, replay, strip_markup, LinkConfig,
    LinkOutcome, LinkerState, MarkupConstraint, MarkupDocument, SpanAnnotation,
};
pub use scorer::{train_table_scorer, OracleScorer, Scorer, TableScorer, UniformScorer};
pub use tasks::{
    disambiguate, flag_mention, gold_oracle, load_dataset, predict, retrieve, run_eval_suite,
    score_predictions, training_pairs, Dataset, EdInstance, KnowledgeBase, Mode, Prediction,
    SuiteConfig, SuiteReport, TaskConfig,
};
pub use trie::{EntityTrie, NodeId, TrieStats};
pub use vocab::{TokenId, Vocabulary};
