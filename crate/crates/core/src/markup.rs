//! End-to-end linking by markup-constrained decoding.
//!
//! The decoder re-emits the source annotated as `[mention](Entity)`. Which
//! token may come next depends on where the decoder is:
//!
//! * outside a group: copy the next source token or open a mention, or stop
//!   at the end of the source;
//! * inside a mention: copy the next source token or close the mention
//!   (only once at least one token was copied);
//! * inside a link: `(` first, then any continuation the entity trie allows,
//!   and `)` once the entity prefix is a complete name.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::{beam_search, BeamConfig, Constraint};
use crate::catalog::{validate_name, Catalog};
use crate::error::{Error, Result};
use crate::scorer::Scorer;
use crate::trie::{EntityTrie, NodeId};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Outside,
    InMention {
        start: usize,
    },
    /// `node` is `None` until the link has been opened.
    InEntity {
        node: Option<NodeId>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkerState {
    pub phase: Phase,
    /// Index of the next source token to copy.
    pub source_cursor: usize,
}

impl LinkerState {
    pub fn start() -> Self {
        Self {
            phase: Phase::Outside,
            source_cursor: 0,
        }
    }
}

/// Tokens the markup decoder may emit from `state`, ascending.
pub fn dynamic_constraint(
    state: &LinkerState,
    source: &[TokenId],
    trie: &EntityTrie,
) -> Vec<TokenId> {
    let next_source = source.get(state.source_cursor).copied();
    let mut out = match state.phase {
        Phase::Outside => match next_source {
            Some(tok) => vec![tok, TokenId::MENTION_OPEN],
            None => vec![TokenId::EOS],
        },
        Phase::InMention { start } => {
            let mut v: Vec<TokenId> = next_source.into_iter().collect();
            if state.source_cursor > start {
                v.push(TokenId::MENTION_CLOSE);
            }
            v
        }
        Phase::InEntity { node: None } => vec![TokenId::LINK_OPEN],
        Phase::InEntity { node: Some(node) } => {
            let mut v: Vec<TokenId> = trie.children(node).collect();
            if trie.is_terminal(node) {
                v.push(TokenId::LINK_CLOSE);
            }
            v
        }
    };
    out.sort_unstable();
    out.dedup();
    out
}

/// Transition on a non-EOS token. The token must come from
/// [`dynamic_constraint`] for the same state.
pub fn advance_state(state: &LinkerState, token: TokenId, trie: &EntityTrie) -> LinkerState {
    let mut next = *state;
    match state.phase {
        Phase::Outside if token == TokenId::MENTION_OPEN => {
            next.phase = Phase::InMention {
                start: state.source_cursor,
            };
        }
        Phase::Outside => next.source_cursor += 1,
        Phase::InMention { .. } if token == TokenId::MENTION_CLOSE => {
            next.phase = Phase::InEntity { node: None };
        }
        Phase::InMention { .. } => next.source_cursor += 1,
        Phase::InEntity { node: None } => {
            next.phase = Phase::InEntity {
                node: Some(trie.root()),
            }
        }
        Phase::InEntity { node: Some(_) } if token == TokenId::LINK_CLOSE => {
            next.phase = Phase::Outside
        }
        Phase::InEntity { node: Some(node) } => {
            let child = trie
                .child(node, token)
                .expect("entity token outside the trie continuations");
            next.phase = Phase::InEntity { node: Some(child) };
        }
    }
    next
}

pub struct MarkupConstraint<'a> {
    source: &'a [TokenId],
    trie: &'a EntityTrie,
}

impl<'a> MarkupConstraint<'a> {
    pub fn new(source: &'a [TokenId], trie: &'a EntityTrie) -> Self {
        Self { source, trie }
    }
}

impl Constraint for MarkupConstraint<'_> {
    type State = LinkerState;

    fn initial(&self) -> LinkerState {
        LinkerState::start()
    }

    fn allowed(&self, state: &LinkerState) -> Vec<TokenId> {
        dynamic_constraint(state, self.source, self.trie)
    }

    fn advance(&self, state: &LinkerState, token: TokenId) -> LinkerState {
        advance_state(state, token, self.trie)
    }
}

/// A mention recovered from a decoded token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedMention {
    /// Source token range covered by the mention.
    pub source: Range<usize>,
    pub entity: Vec<TokenId>,
}

/// Re-runs the state machine over a finished markup sequence, checking that
/// every token was allowed, and returns its mentions.
pub fn replay(
    tokens: &[TokenId],
    source: &[TokenId],
    trie: &EntityTrie,
) -> Result<Vec<DecodedMention>> {
    let mut state = LinkerState::start();
    let mut mentions = Vec::new();
    let mut mention_span = 0..0;
    let mut entity = Vec::new();
    for (i, &tok) in tokens.iter().enumerate() {
        if !dynamic_constraint(&state, source, trie).contains(&tok) {
            return Err(Error::Markup(format!(
                "token {tok} at step {i} is not allowed by the decoder state"
            )));
        }
        if tok == TokenId::EOS {
            if i + 1 != tokens.len() {
                return Err(Error::Markup("tokens after EOS".into()));
            }
            return Ok(mentions);
        }
        let next = advance_state(&state, tok, trie);
        match (state.phase, next.phase) {
            (Phase::InMention { start }, Phase::InEntity { .. }) => {
                mention_span = start..state.source_cursor;
                entity.clear();
            }
            (Phase::InEntity { node: Some(_) }, Phase::Outside) => mentions.push(DecodedMention {
                source: mention_span.clone(),
                entity: std::mem::take(&mut entity),
            }),
            (Phase::InEntity { node: Some(_) }, Phase::InEntity { .. }) => entity.push(tok),
            _ => {}
        }
        state = next;
    }
    Err(Error::Markup("sequence does not end with EOS".into()))
}

/// Drops markup tokens and linked entity tokens, leaving the copied source.
pub fn strip_markup(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut in_link = false;
    for &tok in tokens {
        match tok {
            TokenId::LINK_OPEN => in_link = true,
            TokenId::LINK_CLOSE => in_link = false,
            TokenId::MENTION_OPEN | TokenId::MENTION_CLOSE | TokenId::EOS | TokenId::SOS => {}
            _ if !in_link => out.push(tok),
            _ => {}
        }
    }
    out
}

/// A linked mention, in character offsets of the source text.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub start: usize,
    pub length: usize,
    pub entity: String,
}

impl SpanAnnotation {
    pub fn new(start: usize, length: usize, entity: impl Into<String>) -> Self {
        Self {
            start,
            length,
            entity: entity.into(),
        }
    }

    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

/// Source text with sorted, non-overlapping span annotations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkupDocument {
    source: String,
    spans: Vec<SpanAnnotation>,
}

impl MarkupDocument {
    pub fn new(source: impl Into<String>, spans: Vec<SpanAnnotation>) -> Result<Self> {
        let source = source.into();
        if source.contains(['[', ']']) {
            return Err(Error::Markup(
                "source text contains a mention bracket".into(),
            ));
        }
        let n_chars = source.chars().count();
        let mut prev_end = 0;
        for (i, span) in spans.iter().enumerate() {
            if span.length == 0 {
                return Err(Error::InvalidSpan(format!("span {i} is empty")));
            }
            if span.end() > n_chars {
                return Err(Error::InvalidSpan(format!("span {i} exceeds the source")));
            }
            if i > 0 && span.start < prev_end {
                return Err(Error::InvalidSpan(format!(
                    "span {i} overlaps or is out of order"
                )));
            }
            validate_name(&span.entity).map_err(|reason| {
                Error::InvalidSpan(format!("span {i} entity {:?}: {reason}", span.entity))
            })?;
            prev_end = span.end();
        }
        Ok(Self { source, spans })
    }

    /// A document without annotations.
    pub fn plain(source: impl Into<String>) -> Result<Self> {
        Self::new(source, Vec::new())
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn spans(&self) -> &[SpanAnnotation] {
        &self.spans
    }

    pub fn into_spans(self) -> Vec<SpanAnnotation> {
        self.spans
    }
}

/// Writes `[mention](entity)` around each span.
pub fn render_markup(doc: &MarkupDocument) -> String {
    let mut out = String::with_capacity(doc.source.len() + doc.spans.len() * 16);
    let mut spans = doc.spans.iter().peekable();
    let mut open: Option<&SpanAnnotation> = None;
    for (i, ch) in doc.source.chars().enumerate() {
        if let Some(span) = open {
            if span.end() == i {
                close_group(&mut out, span);
                open = None;
            }
        }
        if spans.peek().is_some_and(|s| s.start == i) {
            out.push('[');
            open = spans.next();
        }
        out.push(ch);
    }
    if let Some(span) = open {
        close_group(&mut out, span);
    }
    out
}

fn close_group(out: &mut String, span: &SpanAnnotation) {
    out.push_str("](");
    out.push_str(&span.entity);
    out.push(')');
}

/// Parses markup into a document whose source is the text with all
/// annotations removed. When a catalog is given, unknown entities are
/// rejected; otherwise they are kept.
pub fn parse_document(markup: &str, catalog: Option<&Catalog>) -> Result<MarkupDocument> {
    let mut source = String::with_capacity(markup.len());
    let mut spans = Vec::new();
    let mut n_chars = 0usize;
    let mut chars = markup.chars().enumerate();
    while let Some((pos, ch)) = chars.next() {
        match ch {
            '[' => {
                let start = n_chars;
                loop {
                    match chars.next() {
                        None => {
                            return Err(Error::Markup(format!("unclosed mention opened at {pos}")))
                        }
                        Some((p, '[')) => {
                            return Err(Error::Markup(format!("nested mention at {p}")))
                        }
                        Some((_, ']')) => break,
                        Some((_, c)) => {
                            source.push(c);
                            n_chars += 1;
                        }
                    }
                }
                if n_chars == start {
                    return Err(Error::Markup(format!("empty mention at {pos}")));
                }
                match chars.next() {
                    Some((_, '(')) => {}
                    _ => {
                        return Err(Error::Markup(format!(
                            "mention at {pos} is not followed by a link"
                        )))
                    }
                }
                let mut entity = String::new();
                loop {
                    match chars.next() {
                        None => {
                            return Err(Error::Markup(format!(
                                "unclosed link for mention at {pos}"
                            )))
                        }
                        Some((_, ')')) => break,
                        Some((p, c @ ('(' | '[' | ']'))) => {
                            return Err(Error::Markup(format!(
                                "unexpected {c:?} inside link at {p}"
                            )))
                        }
                        Some((_, c)) => entity.push(c),
                    }
                }
                if let Some(cat) = catalog {
                    if !cat.contains(&entity) {
                        return Err(Error::UnknownEntity(entity));
                    }
                }
                spans.push(SpanAnnotation::new(start, n_chars - start, entity));
            }
            ']' => return Err(Error::Markup(format!("unbalanced ']' at {pos}"))),
            c => {
                source.push(c);
                n_chars += 1;
            }
        }
    }
    MarkupDocument::new(source, spans)
}

/// Parses markup and checks it annotates `source`; offsets refer to `source`.
pub fn parse_markup(
    markup: &str,
    source: &str,
    catalog: Option<&Catalog>,
) -> Result<Vec<SpanAnnotation>> {
    let doc = parse_document(markup, catalog)?;
    if doc.source != source {
        return Err(Error::SourceMismatch);
    }
    Ok(doc.spans)
}

/// Splits into consecutive chunks of `max_len` tokens; the last may be shorter.
pub fn chunk_input(source: &[TokenId], max_len: usize) -> Result<Vec<&[TokenId]>> {
    if max_len == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    Ok(source.chunks(max_len).collect())
}

fn chunk_ranges(len: usize, chunk_size: Option<usize>) -> Vec<Range<usize>> {
    match chunk_size {
        Some(size) if len > size => (0..len)
            .step_by(size)
            .map(|s| s..(s + size).min(len))
            .collect(),
        _ => std::iter::once(0..len).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub beam: BeamConfig,
    /// Source tokens per decoded chunk; `None` decodes the whole source at once.
    pub chunk_size: Option<usize>,
}

impl Default for LinkConfig {
    /// 6 beams, 384 steps, length normalization on, 128-token chunks.
    fn default() -> Self {
        Self {
            beam: BeamConfig {
                k: 6,
                max_steps: 384,
                length_normalize: true,
            },
            chunk_size: Some(128),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkOutcome {
    pub document: MarkupDocument,
    /// Best finished markup sequence per chunk, if any.
    pub chunk_outputs: Vec<Option<Vec<TokenId>>>,
    pub diagnostics: Vec<String>,
}

/// Tokenized source with character offsets.
struct Encoded {
    ids: Vec<TokenId>,
    offsets: Vec<Range<usize>>,
}

impl Encoded {
    fn new(text: &str, vocab: &Vocabulary) -> Self {
        let (ids, offsets) = vocab.encode_with_offsets(text).into_iter().unzip();
        Self { ids, offsets }
    }

    fn char_span(&self, tokens: &Range<usize>) -> (usize, usize) {
        let start = self.offsets[tokens.start].start;
        (start, self.offsets[tokens.end - 1].end - start)
    }

    fn token_span(&self, span: &SpanAnnotation) -> Option<Range<usize>> {
        let first = self.offsets.iter().position(|r| r.start == span.start)?;
        let last = self.offsets.iter().position(|r| r.end == span.end())?;
        (first <= last).then_some(first..last + 1)
    }
}

/// Links every mention the decoder finds in `source`.
///
/// The source is decoded chunk by chunk; each chunk's best finished
/// hypothesis supplies its mentions. A chunk without a finished hypothesis
/// contributes nothing and leaves a diagnostic.
pub fn link_document<S: Scorer + ?Sized>(
    scorer: &S,
    source: &str,
    vocab: &Vocabulary,
    catalog: &Catalog,
    trie: &EntityTrie,
    config: &LinkConfig,
) -> Result<LinkOutcome> {
    config.beam.validate()?;
    if config.chunk_size == Some(0) {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    // rejects sources the markup format cannot carry
    MarkupDocument::plain(source)?;

    let enc = Encoded::new(source, vocab);
    let ranges = chunk_ranges(enc.ids.len(), config.chunk_size);
    let decoded: Vec<Option<Vec<TokenId>>> = ranges
        .par_iter()
        .map(|r| {
            let chunk = &enc.ids[r.clone()];
            beam_search(
                scorer,
                chunk,
                &MarkupConstraint::new(chunk, trie),
                &config.beam,
            )
            .into_iter()
            .next()
            .map(|h| h.tokens)
        })
        .collect();

    let mut diagnostics = Vec::new();
    let mut spans = Vec::new();
    for (ci, (range, best)) in ranges.iter().zip(&decoded).enumerate() {
        let Some(tokens) = best else {
            diagnostics.push(format!(
                "chunk {ci}: no finished hypothesis within {} steps",
                config.beam.max_steps
            ));
            continue;
        };
        let chunk = &enc.ids[range.clone()];
        for m in replay(tokens, chunk, trie)? {
            let global = range.start + m.source.start..range.start + m.source.end;
            let Some(name) = catalog.name_for(&m.entity) else {
                diagnostics.push(format!(
                    "chunk {ci}: decoded entity {:?} is not in the catalog",
                    m.entity
                ));
                continue;
            };
            if straddles(&global, range, &enc.ids, vocab) {
                diagnostics.push(format!(
                    "chunk {ci}: dropped mention of {name:?} cut by a chunk boundary"
                ));
                continue;
            }
            let (start, length) = enc.char_span(&global);
            spans.push(SpanAnnotation::new(start, length, name));
        }
    }
    Ok(LinkOutcome {
        document: MarkupDocument::new(source, spans)?,
        chunk_outputs: decoded,
        diagnostics,
    })
}

/// A mention touching a chunk edge whose word continues across that edge.
fn straddles(
    mention: &Range<usize>,
    chunk: &Range<usize>,
    ids: &[TokenId],
    vocab: &Vocabulary,
) -> bool {
    let cut_left =
        mention.start == chunk.start && chunk.start > 0 && vocab.is_continuation(ids[chunk.start]);
    let cut_right =
        mention.end == chunk.end && chunk.end < ids.len() && vocab.is_continuation(ids[chunk.end]);
    cut_left || cut_right
}

/// Decoder target sequences for a gold document, one `(chunk input, target)`
/// pair per chunk, each target EOS-terminated. Spans must align with token
/// boundaries; spans cut by a chunk boundary are left out.
pub fn markup_targets(
    doc: &MarkupDocument,
    vocab: &Vocabulary,
    catalog: &Catalog,
    chunk_size: Option<usize>,
) -> Result<Vec<(Vec<TokenId>, Vec<TokenId>)>> {
    let enc = Encoded::new(&doc.source, vocab);
    let mut groups = Vec::with_capacity(doc.spans.len());
    for span in &doc.spans {
        let toks = enc.token_span(span).ok_or_else(|| {
            Error::InvalidSpan(format!(
                "span at {} is not aligned to token boundaries",
                span.start
            ))
        })?;
        let entity = catalog
            .tokens(&span.entity)
            .ok_or_else(|| Error::UnknownEntity(span.entity.clone()))?;
        groups.push((toks, entity));
    }
    let mut out = Vec::new();
    for range in chunk_ranges(enc.ids.len(), chunk_size) {
        let mut target = Vec::new();
        let inside: Vec<_> = groups
            .iter()
            .filter(|(t, _)| t.start >= range.start && t.end <= range.end)
            .collect();
        let mut next = inside.iter().peekable();
        let mut i = range.start;
        while i < range.end {
            if let Some((toks, entity)) = next.peek().filter(|(t, _)| t.start == i) {
                target.push(TokenId::MENTION_OPEN);
                target.extend_from_slice(&enc.ids[toks.clone()]);
                target.extend([TokenId::MENTION_CLOSE, TokenId::LINK_OPEN]);
                target.extend_from_slice(entity);
                target.push(TokenId::LINK_CLOSE);
                i = toks.end;
                next.next();
            } else {
                target.push(enc.ids[i]);
                i += 1;
            }
        }
        target.push(TokenId::EOS);
        out.push((enc.ids[range].to_vec(), target));
    }
    Ok(out)
}
