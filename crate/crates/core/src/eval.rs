//! Span micro-F1, disambiguation accuracy, R-precision and mention/entity
//! string match categories.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::beam::RankedResult;
use crate::error::{Error, Result};
use crate::markup::SpanAnnotation;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl EvalReport {
    /// Derives the ratios from counts.
    ///
    /// A zero denominator yields 1.0 when there was nothing to find and
    /// nothing was predicted, and 0.0 otherwise.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let nothing_at_all = tp + fp + fn_ == 0;
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                if nothing_at_all {
                    1.0
                } else {
                    0.0
                }
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else if tp > 0 {
            // same value as 2PR/(P+R), computed from integers
            (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }

    /// Exact precision, recall and F1 as (numerator, denominator) pairs.
    pub fn rationals(&self) -> [(usize, usize); 3] {
        [
            (self.tp, self.tp + self.fp),
            (self.tp, self.tp + self.fn_),
            (2 * self.tp, 2 * self.tp + self.fp + self.fn_),
        ]
    }

    /// `metric=value` lines, ratios at two decimals.
    pub fn to_text(&self) -> String {
        format!(
            "precision={:.2}\nrecall={:.2}\nf1={:.2}\ntp={}\nfp={}\nfn={}\n",
            self.precision, self.recall, self.f1, self.tp, self.fp, self.fn_
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P={:.2} R={:.2} F1={:.2} (tp={} fp={} fn={})",
            self.precision, self.recall, self.f1, self.tp, self.fp, self.fn_
        )
    }
}

/// InKB micro-F1 over documents. A prediction counts as a true positive
/// only if start, length and entity all match a gold span of the same document.
pub fn micro_f1_spans(
    gold: &[Vec<SpanAnnotation>],
    pred: &[Vec<SpanAnnotation>],
) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::Metric(format!(
            "{} gold documents but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let (t, f, n) = doc_counts(g, p);
        tp += t;
        fp += f;
        fn_ += n;
    }
    Ok(EvalReport::from_counts(tp, fp, fn_))
}

/// Multiset matching of predicted against gold spans within one document.
pub fn doc_counts(gold: &[SpanAnnotation], pred: &[SpanAnnotation]) -> (usize, usize, usize) {
    let mut remaining: HashMap<&SpanAnnotation, usize> = HashMap::new();
    for g in gold {
        *remaining.entry(g).or_default() += 1;
    }
    let mut tp = 0;
    for p in pred {
        if let Some(n) = remaining.get_mut(p).filter(|n| **n > 0) {
            *n -= 1;
            tp += 1;
        }
    }
    (tp, pred.len() - tp, gold.len() - tp)
}

/// Fraction of mentions whose top prediction equals the gold entity.
/// `None` predictions count as wrong.
pub fn ed_accuracy<G, P>(gold: &[G], pred: &[Option<P>]) -> Result<f64>
where
    G: AsRef<str>,
    P: AsRef<str>,
{
    if gold.len() != pred.len() {
        return Err(Error::Metric(format!(
            "{} gold mentions but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Metric("accuracy over zero mentions".into()));
    }
    let correct = gold
        .iter()
        .zip(pred)
        .filter(|(g, p)| p.as_ref().is_some_and(|p| p.as_ref() == g.as_ref()))
        .count();
    Ok(correct as f64 / gold.len() as f64)
}

/// Precision at rank R, where R is the number of relevant names.
pub fn r_precision(gold_relevant: &HashSet<String>, ranked: &RankedResult) -> Result<f64> {
    let r = gold_relevant.len();
    if r == 0 {
        return Err(Error::Metric(
            "R-precision needs at least one relevant item".into(),
        ));
    }
    let hits = ranked
        .entries
        .iter()
        .take(r)
        .filter(|e| gold_relevant.contains(&e.name))
        .count();
    Ok(hits as f64 / r as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub r_precision: Vec<f64>,
    pub mean: f64,
}

impl RetrievalReport {
    pub fn from_scores(r_precision: Vec<f64>) -> Result<Self> {
        if r_precision.is_empty() {
            return Err(Error::Metric("no queries".into()));
        }
        let mean = r_precision.iter().sum::<f64>() / r_precision.len() as f64;
        Ok(Self { r_precision, mean })
    }

    pub fn to_text(&self) -> String {
        format!(
            "r_precision={:.2}\nqueries={}\n",
            self.mean,
            self.r_precision.len()
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchType {
    ExactMatch,
    PartialMatch,
    NoMatch,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Exact when equal ignoring case and whitespace runs; partial when any
/// whitespace-separated word is shared (case-insensitively); otherwise none.
pub fn match_type(mention: &str, entity: &str) -> MatchType {
    let (m, e) = (words(mention), words(entity));
    if m == e {
        MatchType::ExactMatch
    } else if m.iter().any(|w| e.contains(w)) {
        MatchType::PartialMatch
    } else {
        MatchType::NoMatch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam::RankedEntity;
    use proptest::prelude::*;

    fn ranked(names: &[&str]) -> RankedResult {
        RankedResult {
            entries: names
                .iter()
                .map(|n| RankedEntity {
                    name: n.to_string(),
                    tokens: vec![],
                    raw_logprob: 0.0,
                    normalized_score: 0.0,
                })
                .collect(),
        }
    }

    fn set(names: &[&str]) -> HashSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn perfect_prediction() {
        let g = vec![vec![
            SpanAnnotation::new(0, 3, "A"),
            SpanAnnotation::new(5, 2, "B"),
        ]];
        let r = micro_f1_spans(&g, &g).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_prediction_against_gold() {
        let g = vec![vec![
            SpanAnnotation::new(0, 3, "A"),
            SpanAnnotation::new(5, 2, "B"),
            SpanAnnotation::new(9, 2, "C"),
        ]];
        let r = micro_f1_spans(&g, &[vec![]]).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 3));
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));

        let r = micro_f1_spans(&[vec![]], &[vec![]]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn offsets_and_entity_must_all_match() {
        let g = vec![vec![SpanAnnotation::new(0, 3, "A")]];
        for p in [
            SpanAnnotation::new(1, 3, "A"),
            SpanAnnotation::new(0, 2, "A"),
            SpanAnnotation::new(0, 3, "B"),
        ] {
            let r = micro_f1_spans(&g, &[vec![p]]).unwrap();
            assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 1));
        }
        assert!(micro_f1_spans(&g, &[]).is_err());
    }

    #[test]
    fn text_report() {
        let r = EvalReport::from_counts(4, 1, 0);
        assert_eq!(
            r.to_text(),
            "precision=0.80\nrecall=1.00\nf1=0.89\ntp=4\nfp=1\nfn=0\n"
        );
        assert_eq!(r.rationals(), [(4, 5), (4, 4), (8, 9)]);
    }

    #[test]
    fn accuracy() {
        assert_eq!(
            ed_accuracy(&["A", "B"], &[Some("A"), Some("B")]).unwrap(),
            1.0
        );
        assert_eq!(
            ed_accuracy(&["A", "B"], &[Some("A"), Some("C")]).unwrap(),
            0.5
        );
        assert_eq!(
            ed_accuracy(&["A", "B"], &[Some("A"), None::<&str>]).unwrap(),
            0.5
        );
        assert!(ed_accuracy::<&str, &str>(&[], &[]).is_err());
        assert!(ed_accuracy(&["A"], &[Some("A"), Some("A")]).is_err());
    }

    #[test]
    fn r_precision_examples() {
        assert_eq!(
            r_precision(&set(&["A"]), &ranked(&["A", "B"])).unwrap(),
            1.0
        );
        assert_eq!(
            r_precision(&set(&["A", "B"]), &ranked(&["A", "C", "B"])).unwrap(),
            0.5
        );
        assert_eq!(
            r_precision(&set(&["A", "B"]), &ranked(&["A"])).unwrap(),
            0.5
        );
        assert!(r_precision(&set(&[]), &ranked(&["A"])).is_err());
    }

    #[test]
    fn match_types() {
        assert_eq!(match_type("Superman", "Superman"), MatchType::ExactMatch);
        assert_eq!(match_type("superman ", " SUPERMAN"), MatchType::ExactMatch);
        assert_eq!(
            match_type("Metropolis", "Metropolis (comics)"),
            MatchType::PartialMatch
        );
        assert_eq!(match_type("1503", "Leonardo da Vinci"), MatchType::NoMatch);
    }

    fn span_strategy() -> impl Strategy<Value = SpanAnnotation> {
        (
            0usize..6,
            1usize..3,
            proptest::sample::select(vec!["A", "B"]),
        )
            .prop_map(|(s, l, e)| SpanAnnotation::new(s, l, e))
    }

    fn docs_strategy() -> impl Strategy<Value = Vec<Vec<SpanAnnotation>>> {
        proptest::collection::vec(proptest::collection::vec(span_strategy(), 0..5), 1..6)
    }

    proptest! {
        #[test]
        fn micro_f1_properties(gold in docs_strategy(), pred_seed in docs_strategy(), rot in 0usize..6) {
            let n = gold.len();
            let pred: Vec<_> = (0..n).map(|i| pred_seed.get(i).cloned().unwrap_or_default()).collect();
            let r = micro_f1_spans(&gold, &pred).unwrap();
            prop_assert!(r.f1 <= 2.0 * r.precision.min(r.recall) + 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.f1));

            let mut g2 = gold.clone();
            let mut p2 = pred.clone();
            g2.rotate_left(rot % n);
            p2.rotate_left(rot % n);
            prop_assert_eq!(micro_f1_spans(&g2, &p2).unwrap(), r);
        }

        #[test]
        fn accuracy_equals_micro_f1_with_one_prediction_per_mention(
            pairs in proptest::collection::vec((0u8..3, 0u8..3), 1..20)
        ) {
            let names = ["A", "B", "C"];
            let gold: Vec<_> = pairs.iter().map(|(g, _)| names[*g as usize]).collect();
            let pred: Vec<_> = pairs.iter().map(|(_, p)| Some(names[*p as usize])).collect();
            let gold_spans: Vec<_> = gold.iter().enumerate().map(|(i, g)| vec![SpanAnnotation::new(i, 1, *g)]).collect();
            let pred_spans: Vec<_> = pred.iter().enumerate().map(|(i, p)| vec![SpanAnnotation::new(i, 1, p.unwrap())]).collect();
            let acc = ed_accuracy(&gold, &pred).unwrap();
            let f1 = micro_f1_spans(&gold_spans, &pred_spans).unwrap().f1;
            prop_assert!((acc - f1).abs() < 1e-12);
        }

        #[test]
        fn r_precision_ignores_tail(
            order in Just(vec!["A", "B", "C", "D", "E"]).prop_shuffle(),
            r in 1usize..4,
            tail_rot in 0usize..5,
        ) {
            let gold: HashSet<String> = ["A", "B", "C"][..r].iter().map(|s| s.to_string()).collect();
            let base = r_precision(&gold, &ranked(&order)).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            let mut changed = order.clone();
            let len = changed.len() - r;
            changed[r..].rotate_left(tail_rot % len.max(1));
            prop_assert_eq!(r_precision(&gold, &ranked(&changed)).unwrap(), base);
            let all_first = order[..r].iter().all(|n| gold.contains(*n));
            prop_assert_eq!(base == 1.0, all_first);
        }

        #[test]
        fn match_type_is_a_partition(a in "[a-cA-C ]{0,8}", b in "[a-cA-C ]{0,8}") {
            let t = match_type(&a, &b);
            let exact = words(&a) == words(&b);
            let overlap = words(&a).iter().any(|w| words(&b).contains(w));
            let labels = [exact, !exact && overlap, !exact && !overlap];
            prop_assert_eq!(labels.iter().filter(|x| **x).count(), 1);
            let expected = [MatchType::ExactMatch, MatchType::PartialMatch, MatchType::NoMatch]
                [labels.iter().position(|x| *x).unwrap()];
            prop_assert_eq!(t, expected);
        }
    }
}
