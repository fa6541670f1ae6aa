//! The entity collection and per-mention candidate sets.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::trie::EntityTrie;
use crate::vocab::{TokenId, Vocabulary};

/// Characters that would be ambiguous inside markup output.
pub const RESERVED_NAME_CHARS: [char; 4] = ['[', ']', '(', ')'];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityRecord {
    pub name: String,
    pub tokens: Vec<TokenId>,
}

/// Entity names with their cached tokenizations.
///
/// Names and token sequences are both unique, so a decoded path through the
/// trie resolves to exactly one name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Catalog {
    vocab_size: usize,
    records: BTreeMap<String, Vec<TokenId>>,
    by_tokens: HashMap<Vec<TokenId>, String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadReport {
    pub duplicates: usize,
}

pub fn validate_name(name: &str) -> std::result::Result<(), &'static str> {
    if name.trim().is_empty() {
        return Err("empty name");
    }
    if name.contains(RESERVED_NAME_CHARS) {
        return Err("name contains a reserved markup character");
    }
    if name != name.trim() {
        return Err("name has leading or trailing whitespace");
    }
    Ok(())
}

impl Catalog {
    pub fn new(vocab: &Vocabulary) -> Self {
        Self {
            vocab_size: vocab.len(),
            records: BTreeMap::new(),
            by_tokens: HashMap::new(),
        }
    }

    /// Reads one name per line. Blank lines are ignored and repeated names
    /// are skipped and counted.
    pub fn load(source: &str, vocab: &Vocabulary) -> Result<(Self, LoadReport)> {
        let mut catalog = Self::new(vocab);
        let mut duplicates = 0;
        for (i, line) in source.lines().enumerate() {
            let name = line.trim();
            if name.is_empty() {
                continue;
            }
            match catalog.insert_at(name, vocab, i + 1) {
                Ok(()) => {}
                Err(Error::DuplicateEntity(_)) => duplicates += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((catalog, LoadReport { duplicates }))
    }

    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for name in self.records.keys() {
            out.push_str(name);
            out.push('\n');
        }
        out
    }

    /// Adds a name in place.
    pub fn insert(&mut self, name: &str, vocab: &Vocabulary) -> Result<()> {
        self.insert_at(name, vocab, 0)
    }

    /// Returns a new catalog version with `name` added.
    pub fn add_entity(&self, name: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut next = self.clone();
        next.insert(name, vocab)?;
        Ok(next)
    }

    fn insert_at(&mut self, name: &str, vocab: &Vocabulary, line: usize) -> Result<()> {
        validate_name(name).map_err(|reason| Error::InvalidEntityName {
            line,
            name: name.to_string(),
            reason,
        })?;
        if vocab.len() != self.vocab_size {
            return Err(Error::Config(format!(
                "catalog built for vocabulary of size {}, got {}",
                self.vocab_size,
                vocab.len()
            )));
        }
        if self.records.contains_key(name) {
            return Err(Error::DuplicateEntity(name.to_string()));
        }
        let tokens = vocab.encode(name);
        if let Some(existing) = self.by_tokens.get(&tokens) {
            return Err(Error::TokenizationCollision {
                name: name.to_string(),
                existing: existing.clone(),
            });
        }
        self.by_tokens.insert(tokens.clone(), name.to_string());
        self.records.insert(name.to_string(), tokens);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn contains(&self, name: &str) -> bool {
        self.records.contains_key(name)
    }

    pub fn tokens(&self, name: &str) -> Option<&[TokenId]> {
        self.records.get(name).map(Vec::as_slice)
    }

    pub fn name_for(&self, tokens: &[TokenId]) -> Option<&str> {
        self.by_tokens.get(tokens).map(String::as_str)
    }

    /// Records in name order.
    pub fn records(&self) -> impl Iterator<Item = EntityRecord> + '_ {
        self.records.iter().map(|(name, tokens)| EntityRecord {
            name: name.clone(),
            tokens: tokens.clone(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn build_trie(&self) -> Result<EntityTrie> {
        EntityTrie::build(self.records.values(), self.vocab_size)
    }

    /// A trie restricted to the given candidates.
    pub fn candidate_trie(&self, candidates: &CandidateSet) -> Result<EntityTrie> {
        let seqs = candidates
            .names()
            .iter()
            .map(|n| {
                self.tokens(n)
                    .ok_or_else(|| Error::UnknownEntity(n.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        EntityTrie::build(seqs, self.vocab_size)
    }
}

/// A restricted, non-empty set of catalog names attached to one mention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    names: Vec<String>,
}

impl CandidateSet {
    /// Deduplicates while keeping first-seen order; every name must be in the catalog.
    pub fn new<I, S>(names: I, catalog: &Catalog) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out: Vec<String> = Vec::new();
        for name in names {
            let name = name.into();
            if !catalog.contains(&name) {
                return Err(Error::UnknownEntity(name));
            }
            if !out.contains(&name) {
                out.push(name);
            }
        }
        if out.is_empty() {
            return Err(Error::EmptyCandidateSet);
        }
        Ok(Self { names: out })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }
}

/// Parses `mention-id TAB name1|name2|...` lines.
pub fn load_candidate_sets(
    source: &str,
    catalog: &Catalog,
) -> Result<BTreeMap<String, CandidateSet>> {
    let mut out = BTreeMap::new();
    for (i, line) in source.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Dataset {
            what: "candidate sets",
            line: i + 1,
            reason,
        };
        let (id, names) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `mention-id TAB names`".into()))?;
        let set = CandidateSet::new(
            names.split('|').map(str::trim).filter(|n| !n.is_empty()),
            catalog,
        )
        .map_err(|e| err(e.to_string()))?;
        if out.insert(id.to_string(), set).is_some() {
            return Err(err(format!("duplicate mention id {id:?}")));
        }
    }
    Ok(out)
}
