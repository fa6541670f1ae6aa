//! Disambiguation, retrieval and linking pipelines over line-oriented datasets.
//!
//! Dataset lines are tab-separated:
//!
//! ```text
//! ED: id  context  mention_start  mention_len  gold  [cand1|cand2|...]
//! DR: id  query    gold1|gold2|...
//! EL: id  source   gold-markup
//! ```
//!
//! Mention offsets count characters of the context.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::{rank_entities, BeamConfig, RankedEntity, RankedResult};
use crate::catalog::{CandidateSet, Catalog};
use crate::error::{Error, Result};
use crate::eval::{doc_counts, ed_accuracy, r_precision, EvalReport, RetrievalReport};
use crate::markup::{
    link_document, markup_targets, parse_markup, render_markup, LinkConfig, SpanAnnotation,
};
use crate::scorer::{OracleScorer, Scorer};
use crate::trie::EntityTrie;
use crate::vocab::{TokenId, Vocabulary};

/// Vocabulary, catalog and the full-catalog trie, kept consistent.
#[derive(Clone, Debug)]
pub struct KnowledgeBase {
    pub vocab: Vocabulary,
    pub catalog: Catalog,
    pub trie: EntityTrie,
}

impl KnowledgeBase {
    pub fn new(vocab: Vocabulary, catalog: Catalog) -> Result<Self> {
        let trie = catalog.build_trie()?;
        Self::with_trie(vocab, catalog, trie)
    }

    /// Uses a prebuilt trie; every sequence in it must name a catalog entry.
    pub fn with_trie(vocab: Vocabulary, catalog: Catalog, trie: EntityTrie) -> Result<Self> {
        if trie.vocab_size() != vocab.len() || catalog.vocab_size() != vocab.len() {
            return Err(Error::Config(format!(
                "vocabulary has {} ids but the trie expects {} and the catalog {}",
                vocab.len(),
                trie.vocab_size(),
                catalog.vocab_size()
            )));
        }
        if let Some(orphan) = trie
            .sequences()
            .into_iter()
            .find(|s| catalog.name_for(s).is_none())
        {
            return Err(Error::Config(format!(
                "trie path {:?} has no catalog entry",
                vocab.decode(&orphan).unwrap_or_default()
            )));
        }
        Ok(Self {
            vocab,
            catalog,
            trie,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ed,
    Dr,
    El,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ed" => Ok(Mode::Ed),
            "dr" => Ok(Mode::Dr),
            "el" => Ok(Mode::El),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected ed, dr or el)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Ed => "ed",
            Mode::Dr => "dr",
            Mode::El => "el",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub beam: BeamConfig,
    /// Maximum flagged input length in tokens.
    pub context_window: usize,
}

impl Default for TaskConfig {
    /// 10 beams, 15 steps, normalization on, 384-token window.
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            context_window: 384,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdInstance {
    pub id: String,
    pub context: Vec<TokenId>,
    /// Token range of the mention within `context`.
    pub mention: Range<usize>,
    /// Character start and length of the mention within the context text.
    pub mention_chars: (usize, usize),
    pub candidates: Option<CandidateSet>,
    pub gold: String,
}

impl EdInstance {
    /// Tokenizes `context` and maps the character span onto the tokens it touches.
    pub fn new(
        id: impl Into<String>,
        context: &str,
        mention_start: usize,
        mention_len: usize,
        gold: impl Into<String>,
        candidates: Option<CandidateSet>,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if mention_len == 0 {
            return Err(Error::InvalidSpan("empty mention".into()));
        }
        let end = mention_start + mention_len;
        if end > context.chars().count() {
            return Err(Error::InvalidSpan("mention exceeds the context".into()));
        }
        let enc = vocab.encode_with_offsets(context);
        let touched: Vec<usize> = enc
            .iter()
            .enumerate()
            .filter(|(_, (_, r))| r.start < end && r.end > mention_start)
            .map(|(i, _)| i)
            .collect();
        let (Some(&first), Some(&last)) = (touched.first(), touched.last()) else {
            return Err(Error::InvalidSpan("mention covers no token".into()));
        };
        Ok(Self {
            id: id.into(),
            context: enc.into_iter().map(|(t, _)| t).collect(),
            mention: first..last + 1,
            mention_chars: (mention_start, mention_len),
            candidates,
            gold: gold.into(),
        })
    }

    fn gold_span(&self) -> SpanAnnotation {
        SpanAnnotation::new(self.mention_chars.0, self.mention_chars.1, &self.gold)
    }
}

/// Surrounds the mention with the start/end flags and trims the context to
/// `window` tokens, keeping the mention centred. An odd leftover budget goes
/// to the right side, i.e. the left is trimmed first.
pub fn flag_mention(
    instance: &EdInstance,
    vocab: &Vocabulary,
    window: usize,
) -> Result<Vec<TokenId>> {
    let m = &instance.mention;
    let mention_len = m.end - m.start;
    if mention_len + 2 > window {
        return Err(Error::MentionTooLong {
            mention: mention_len,
            window,
        });
    }
    let left_avail = m.start;
    let right_avail = instance.context.len() - m.end;
    let budget = window - mention_len - 2;
    let mut keep_left = left_avail.min(budget / 2);
    let keep_right = right_avail.min(budget - keep_left);
    keep_left = left_avail.min(budget - keep_right);

    let mut out = Vec::with_capacity(keep_left + mention_len + 2 + keep_right);
    out.extend_from_slice(&instance.context[m.start - keep_left..m.start]);
    out.push(vocab.start_ent());
    out.extend_from_slice(&instance.context[m.clone()]);
    out.push(vocab.end_ent());
    out.extend_from_slice(&instance.context[m.end..m.end + keep_right]);
    Ok(out)
}

/// Ranks entities for one flagged mention, restricted to the candidate set
/// when the instance carries one and over the whole catalog otherwise.
pub fn disambiguate<S: Scorer + ?Sized>(
    scorer: &S,
    instance: &EdInstance,
    kb: &KnowledgeBase,
    config: &TaskConfig,
) -> Result<RankedResult> {
    let input = flag_mention(instance, &kb.vocab, config.context_window)?;
    match &instance.candidates {
        Some(cands) => {
            let trie = kb.catalog.candidate_trie(cands)?;
            rank_entities(scorer, &input, &trie, &kb.catalog, &config.beam)
        }
        None => rank_entities(scorer, &input, &kb.trie, &kb.catalog, &config.beam),
    }
}

/// Ranks catalog entities for a free-text query.
pub fn retrieve<S: Scorer + ?Sized>(
    scorer: &S,
    query: &str,
    kb: &KnowledgeBase,
    config: &TaskConfig,
) -> Result<RankedResult> {
    let input = query_input(query, &kb.vocab, config.context_window);
    rank_entities(scorer, &input, &kb.trie, &kb.catalog, &config.beam)
}

fn query_input(query: &str, vocab: &Vocabulary, window: usize) -> Vec<TokenId> {
    let mut input = vocab.encode(query);
    input.truncate(window);
    input
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DrInstance {
    pub id: String,
    pub query: String,
    pub gold: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ElInstance {
    pub id: String,
    pub source: String,
    pub gold: Vec<SpanAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Dataset {
    Ed(Vec<EdInstance>),
    Dr(Vec<DrInstance>),
    El(Vec<ElInstance>),
}

impl Dataset {
    pub fn mode(&self) -> Mode {
        match self {
            Dataset::Ed(_) => Mode::Ed,
            Dataset::Dr(_) => Mode::Dr,
            Dataset::El(_) => Mode::El,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Ed(v) => v.len(),
            Dataset::Dr(v) => v.len(),
            Dataset::El(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<&str> {
        match self {
            Dataset::Ed(v) => v.iter().map(|i| i.id.as_str()).collect(),
            Dataset::Dr(v) => v.iter().map(|i| i.id.as_str()).collect(),
            Dataset::El(v) => v.iter().map(|i| i.id.as_str()).collect(),
        }
    }

    /// Applies externally supplied candidate sets (keyed by instance id) to ED instances.
    pub fn apply_candidates(&mut self, sets: &BTreeMap<String, CandidateSet>) {
        if let Dataset::Ed(instances) = self {
            for inst in instances {
                if let Some(set) = sets.get(&inst.id) {
                    inst.candidates = Some(set.clone());
                }
            }
        }
    }
}

/// Parses a dataset. Blank lines are skipped; malformed lines fail with
/// their 1-based line number. Gold entities must be in the catalog.
pub fn load_dataset(text: &str, mode: Mode, kb: &KnowledgeBase) -> Result<Dataset> {
    let what = match mode {
        Mode::Ed => "ED dataset",
        Mode::Dr => "DR dataset",
        Mode::El => "EL dataset",
    };
    let mut ed = Vec::new();
    let mut dr = Vec::new();
    let mut el = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Dataset {
            what,
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(err("empty id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(err(format!("duplicate id {id:?}")));
        }
        let known = |name: &str| -> Result<()> {
            if kb.catalog.contains(name) {
                Ok(())
            } else {
                Err(err(format!("entity {name:?} is not in the catalog")))
            }
        };
        match mode {
            Mode::Ed => {
                if !(5..=6).contains(&fields.len()) {
                    return Err(err(format!(
                        "expected 5 or 6 fields, found {}",
                        fields.len()
                    )));
                }
                let num = |s: &str, name: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| err(format!("bad {name} {s:?}")))
                };
                let start = num(fields[2], "mention_start")?;
                let len = num(fields[3], "mention_len")?;
                let gold = fields[4].trim();
                known(gold)?;
                let candidates = match fields.get(5).map(|s| s.trim()).filter(|s| !s.is_empty()) {
                    Some(list) => Some(
                        CandidateSet::new(
                            list.split('|').map(str::trim).filter(|s| !s.is_empty()),
                            &kb.catalog,
                        )
                        .map_err(|e| err(e.to_string()))?,
                    ),
                    None => None,
                };
                let inst = EdInstance::new(id, fields[1], start, len, gold, candidates, &kb.vocab)
                    .map_err(|e| err(e.to_string()))?;
                ed.push(inst);
            }
            Mode::Dr => {
                if fields.len() != 3 {
                    return Err(err(format!("expected 3 fields, found {}", fields.len())));
                }
                let gold: Vec<String> = fields[2]
                    .split('|')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect();
                if gold.is_empty() {
                    return Err(err("no gold entities".into()));
                }
                for g in &gold {
                    known(g)?;
                }
                dr.push(DrInstance {
                    id,
                    query: fields[1].to_string(),
                    gold,
                });
            }
            Mode::El => {
                if fields.len() != 3 {
                    return Err(err(format!("expected 3 fields, found {}", fields.len())));
                }
                let gold = parse_markup(fields[2], fields[1], Some(&kb.catalog))
                    .map_err(|e| err(e.to_string()))?;
                el.push(ElInstance {
                    id,
                    source: fields[1].to_string(),
                    gold,
                });
            }
        }
    }
    let ds = match mode {
        Mode::Ed => Dataset::Ed(ed),
        Mode::Dr => Dataset::Dr(dr),
        Mode::El => Dataset::El(el),
    };
    if ds.is_empty() {
        return Err(Error::Dataset {
            what,
            line: 0,
            reason: "dataset has no instances".into(),
        });
    }
    Ok(ds)
}

/// Output of one pipeline run on one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranking: Option<Vec<RankedEntity>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markup: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<SpanAnnotation>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl Prediction {
    pub fn ranked(id: impl Into<String>, ranking: RankedResult) -> Self {
        Self {
            id: id.into(),
            ranking: Some(ranking.entries),
            markup: None,
            spans: None,
            diagnostics: Vec::new(),
        }
    }

    fn top(&self) -> Option<&str> {
        self.ranking.as_ref()?.first().map(|e| e.name.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub task: TaskConfig,
    pub link: LinkConfig,
    /// Worker threads; `None` uses the default pool.
    pub jobs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub mode: Mode,
    pub instances: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_f1: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalReport>,
}

impl SuiteReport {
    /// `metric=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("mode={}\ninstances={}\n", self.mode, self.instances);
        if let Some(acc) = self.accuracy {
            out.push_str(&format!("accuracy={acc:.2}\n"));
        }
        if let Some(r) = &self.micro_f1 {
            out.push_str(&r.to_text());
        }
        if let Some(r) = &self.retrieval {
            out.push_str(&r.to_text());
        }
        out
    }
}

fn in_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(Error::Config("jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs the pipeline matching the dataset's mode; output order follows the dataset.
pub fn predict<S: Scorer + ?Sized>(
    scorer: &S,
    dataset: &Dataset,
    kb: &KnowledgeBase,
    config: &SuiteConfig,
) -> Result<Vec<Prediction>> {
    in_pool(config.jobs, || match dataset {
        Dataset::Ed(v) => v
            .par_iter()
            .map(|inst| {
                Ok(Prediction::ranked(
                    &inst.id,
                    disambiguate(scorer, inst, kb, &config.task)?,
                ))
            })
            .collect(),
        Dataset::Dr(v) => v
            .par_iter()
            .map(|inst| {
                Ok(Prediction::ranked(
                    &inst.id,
                    retrieve(scorer, &inst.query, kb, &config.task)?,
                ))
            })
            .collect(),
        Dataset::El(v) => v
            .par_iter()
            .map(|inst| {
                let out = link_document(
                    scorer,
                    &inst.source,
                    &kb.vocab,
                    &kb.catalog,
                    &kb.trie,
                    &config.link,
                )?;
                Ok(Prediction {
                    id: inst.id.clone(),
                    ranking: None,
                    markup: Some(render_markup(&out.document)),
                    spans: Some(out.document.into_spans()),
                    diagnostics: out.diagnostics,
                })
            })
            .collect(),
    })?
}

/// Scores predictions against the dataset. Instances without a prediction
/// count as predicting nothing; predictions for unknown ids are an error.
pub fn score_predictions(dataset: &Dataset, predictions: &[Prediction]) -> Result<SuiteReport> {
    let ids: HashSet<&str> = dataset.ids().into_iter().collect();
    let mut by_id = std::collections::HashMap::new();
    for p in predictions {
        if !ids.contains(p.id.as_str()) {
            return Err(Error::Metric(format!(
                "prediction for unknown id {:?}",
                p.id
            )));
        }
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(Error::Metric(format!(
                "duplicate prediction for id {:?}",
                p.id
            )));
        }
    }
    let mut report = SuiteReport {
        mode: dataset.mode(),
        instances: dataset.len(),
        micro_f1: None,
        accuracy: None,
        retrieval: None,
    };
    match dataset {
        Dataset::Ed(v) => {
            let gold: Vec<&str> = v.iter().map(|i| i.gold.as_str()).collect();
            let top: Vec<Option<&str>> = v
                .iter()
                .map(|i| by_id.get(i.id.as_str()).and_then(|p| p.top()))
                .collect();
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (inst, t) in v.iter().zip(&top) {
                let pred: Vec<SpanAnnotation> = t
                    .map(|name| {
                        SpanAnnotation::new(inst.mention_chars.0, inst.mention_chars.1, name)
                    })
                    .into_iter()
                    .collect();
                let (a, b, c) = doc_counts(&[inst.gold_span()], &pred);
                tp += a;
                fp += b;
                fn_ += c;
            }
            report.accuracy = Some(ed_accuracy(&gold, &top)?);
            report.micro_f1 = Some(EvalReport::from_counts(tp, fp, fn_));
        }
        Dataset::Dr(v) => {
            let scores = v
                .iter()
                .map(|inst| {
                    let ranked = RankedResult {
                        entries: by_id
                            .get(inst.id.as_str())
                            .and_then(|p| p.ranking.clone())
                            .unwrap_or_default(),
                    };
                    r_precision(&inst.gold.iter().cloned().collect(), &ranked)
                })
                .collect::<Result<Vec<_>>>()?;
            report.retrieval = Some(RetrievalReport::from_scores(scores)?);
        }
        Dataset::El(v) => {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for inst in v {
                let pred = by_id
                    .get(inst.id.as_str())
                    .and_then(|p| p.spans.clone())
                    .unwrap_or_default();
                let (a, b, c) = doc_counts(&inst.gold, &pred);
                tp += a;
                fp += b;
                fn_ += c;
            }
            report.micro_f1 = Some(EvalReport::from_counts(tp, fp, fn_));
        }
    }
    Ok(report)
}

/// Runs the pipeline over a dataset and scores it.
pub fn run_eval_suite<S: Scorer + ?Sized>(
    scorer: &S,
    dataset: &Dataset,
    kb: &KnowledgeBase,
    config: &SuiteConfig,
) -> Result<(SuiteReport, Vec<Prediction>)> {
    let predictions = predict(scorer, dataset, kb, config)?;
    let report = score_predictions(dataset, &predictions)?;
    Ok((report, predictions))
}

/// `(input, EOS-terminated target)` pairs exactly as the pipeline would
/// present them to a scorer, derived from the dataset's gold labels.
pub fn training_pairs(
    dataset: &Dataset,
    kb: &KnowledgeBase,
    config: &SuiteConfig,
) -> Result<Vec<(Vec<TokenId>, Vec<TokenId>)>> {
    let with_eos = |name: &str| -> Result<Vec<TokenId>> {
        let mut t = kb
            .catalog
            .tokens(name)
            .ok_or_else(|| Error::UnknownEntity(name.to_string()))?
            .to_vec();
        t.push(TokenId::EOS);
        Ok(t)
    };
    let mut pairs = Vec::new();
    match dataset {
        Dataset::Ed(v) => {
            for inst in v {
                let input = flag_mention(inst, &kb.vocab, config.task.context_window)?;
                pairs.push((input, with_eos(&inst.gold)?));
            }
        }
        Dataset::Dr(v) => {
            for inst in v {
                let input = query_input(&inst.query, &kb.vocab, config.task.context_window);
                for g in &inst.gold {
                    pairs.push((input.clone(), with_eos(g)?));
                }
            }
        }
        Dataset::El(v) => {
            for inst in v {
                let doc =
                    crate::markup::MarkupDocument::new(inst.source.clone(), inst.gold.clone())?;
                pairs.extend(markup_targets(
                    &doc,
                    &kb.vocab,
                    &kb.catalog,
                    config.link.chunk_size,
                )?);
            }
        }
    }
    Ok(pairs)
}

/// An oracle keyed by pipeline input that reproduces the gold labels.
/// For retrieval with several gold entities, the first one is favoured.
pub fn gold_oracle(
    dataset: &Dataset,
    kb: &KnowledgeBase,
    config: &SuiteConfig,
) -> Result<OracleScorer> {
    let mut oracle = OracleScorer::keyed(kb.vocab.len());
    for (input, target) in training_pairs(dataset, kb, config)?.into_iter().rev() {
        oracle.insert_target(input, target);
    }
    Ok(oracle)
}
