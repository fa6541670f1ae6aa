//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use trie_decode_core::markup::{dynamic_constraint, markup_targets};
use trie_decode_core::{
    beam_search, exhaustive_rank, link_document, parse_document, rank_entities, render_markup,
    replay, strip_markup, BeamConfig, Catalog, EntityTrie, EvalReport, LinkConfig, LinkerState,
    MarkupConstraint, OracleScorer, Scorer, SpanAnnotation, TokenId, TrieStats, UniformScorer,
    Vocabulary,
};

use common::*;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    if took > limit {
        Err(format!("took {took:.2?}, limit {limit:?}"))
    } else {
        Ok(took)
    }
}

fn trie_continuations() -> Outcome {
    let start = Instant::now();
    let v = Vocabulary::new(["English", "language", "literature", "France"]).unwrap();
    let (c, _) = Catalog::load("English language\nEnglish literature\nFrance\n", &v).unwrap();
    let t = c.build_trie().unwrap();
    let id = |s: &str| v.token_id(s).unwrap();
    let mut root = vec![id("English"), id("France")];
    root.sort();
    let mut english = vec![id("language"), id("literature")];
    english.sort();
    ensure!(t.allowed_continuations(&[]) == root, "root continuations");
    ensure!(
        t.allowed_continuations(&[id("English")]) == english,
        "continuations of English"
    );
    ensure!(
        t.allowed_continuations(&[id("France")]) == [TokenId::EOS],
        "continuations of France"
    );
    let took = within(Duration::from_secs(1), start)?;
    Ok(format!("3 prefixes exact, {took:.2?}"))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(2);
    let mut compared = 0;
    for round in 0..100 {
        let v = word_vocab(rng.gen_range(4..40));
        let words = v.len() - 9;
        let names = random_names(&mut rng, words, 200, 6);
        let (c, t) = catalog_of(&names, &v);
        let scorer = random_table_scorer(&mut rng, &v, &c);
        let input = random_input(&mut rng, &v, 8);
        for normalize in [false, true] {
            let cfg = BeamConfig::new(c.len(), 7, normalize).unwrap();
            let beam = rank_entities(&scorer, &input, &t, &c, &cfg).map_err(|e| e.to_string())?;
            let exact =
                exhaustive_rank(&scorer, &input, &c, normalize).map_err(|e| e.to_string())?;
            ensure!(
                beam.len() == exact.len(),
                "round {round}: {} vs {} entries",
                beam.len(),
                exact.len()
            );
            for (b, e) in beam.entries.iter().zip(&exact.entries) {
                ensure!(
                    b.name == e.name,
                    "round {round}: order differs at {:?} vs {:?}",
                    b.name,
                    e.name
                );
                ensure!(
                    (b.raw_logprob - e.raw_logprob).abs() <= 1e-12,
                    "round {round}: score of {:?} differs: {} vs {}",
                    b.name,
                    b.raw_logprob,
                    e.raw_logprob
                );
            }
            compared += beam.len();
        }
    }
    let took = within(Duration::from_secs(60), start)?;
    Ok(format!(
        "100 catalogs, {compared} ranked entries matched, {took:.2?}"
    ))
}

/// Shared corpus for the validity and no-renormalization fuzzers: returns
/// (decodes, violations of catalog membership, worst score deviation).
fn decode_fuzz() -> Result<(usize, usize, f64, usize), String> {
    let mut rng = rng(3);
    let mut decodes = 0;
    let mut violations = 0;
    let mut names_checked = 0;
    let mut worst: f64 = 0.0;
    for world in 0..100 {
        let v = word_vocab(rng.gen_range(3..30));
        let words = v.len() - 9;
        let names = random_names(&mut rng, words, 60, 5);
        let (c, t) = catalog_of(&names, &v);
        let scorer: Box<dyn Scorer> = match world % 3 {
            0 => Box::new(random_table_scorer(&mut rng, &v, &c)),
            1 => Box::new(NoiseScorer {
                vocab_size: v.len(),
                seed: world as u64,
                spread: 6.0,
            }),
            _ => {
                let mut target = random_input(&mut rng, &v, 4);
                target.push(TokenId::EOS);
                Box::new(
                    OracleScorer::new(v.len(), target).hit_probability(rng.gen_range(0.2..0.99)),
                )
            }
        };
        for _ in 0..100 {
            let input = random_input(&mut rng, &v, 6);
            let cfg = BeamConfig::new(
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
                rng.gen_bool(0.5),
            )
            .unwrap();
            let hyps = beam_search(
                &scorer,
                &input,
                &trie_decode_core::TrieConstraint::new(&t),
                &cfg,
            );
            decodes += 1;
            for h in hyps {
                names_checked += 1;
                let body = &h.tokens[..h.tokens.len() - 1];
                if h.tokens.last() != Some(&TokenId::EOS) || c.name_for(body).is_none() {
                    violations += 1;
                    continue;
                }
                let reference = scorer
                    .sequence_score(&input, &h.tokens)
                    .map_err(|e| e.to_string())?;
                worst = worst.max((reference - h.cum_logprob).abs());
            }
        }
    }
    Ok((decodes, violations, worst, names_checked))
}

fn validity_fuzz() -> Outcome {
    let (decodes, violations, _, names) = decode_fuzz()?;
    ensure!(decodes == 10_000, "ran {decodes} decodes");
    ensure!(violations == 0, "{violations} outputs outside the catalog");
    Ok(format!("{decodes} decodes, {names} outputs, 0 violations"))
}

fn no_renormalization() -> Outcome {
    let (_, _, worst, names) = decode_fuzz()?;
    ensure!(worst <= 1e-12, "max |decode - sequence_score| = {worst:e}");
    Ok(format!("{names} outputs, max deviation {worst:e}"))
}

const EL_GOLD: &str = "SOCCER - RESULT IN [SPANISH](Spain) FIRST DIVISION . [MADRID](Madrid) 1996-08-31 Result of game played in the [Spanish](Spain) first division on Saturday : Deportivo Coruna 1 [Real Madrid](Real Madrid C.F.) 1.";
const EL_PRED: &str = "SOCCER - RESULT IN [SPANISH](Spain) FIRST DIVISION . [MADRID](Madrid) 1996-08-31 Result of game played in the [Spanish](Spain) first division on Saturday : [Deportivo](Deportivo de La Coruna) Coruna 1 [Real Madrid](Real Madrid C.F.) 1.";

fn listed(spans: &[(usize, usize, &str)]) -> Vec<SpanAnnotation> {
    spans
        .iter()
        .map(|&(s, l, e)| SpanAnnotation::new(s, l, e.replace('_', " ")))
        .collect()
}

fn metric_reproduction() -> Outcome {
    let gold = parse_document(EL_GOLD, None).map_err(|e| e.to_string())?;
    let pred = parse_document(EL_PRED, None).map_err(|e| e.to_string())?;
    ensure!(
        gold.source() == pred.source(),
        "gold and predicted text differ"
    );
    let listed_gold = listed(&[
        (19, 7, "Spain"),
        (44, 6, "Madrid"),
        (91, 7, "Spain"),
        (147, 11, "Real_Madrid_C.F."),
    ]);
    let listed_pred = listed(&[
        (19, 7, "Spain"),
        (44, 6, "Madrid"),
        (91, 7, "Spain"),
        (128, 9, "Deportivo_de_La_Coruna"),
        (147, 11, "Real_Madrid_C.F."),
    ]);
    ensure!(
        gold.spans() == listed_gold,
        "parsed gold spans {:?}",
        gold.spans()
    );
    ensure!(
        pred.spans() == listed_pred,
        "parsed predicted spans {:?}",
        pred.spans()
    );
    let r = trie_decode_core::micro_f1_spans(&[gold.spans().to_vec()], &[pred.spans().to_vec()])
        .map_err(|e| e.to_string())?;
    ensure!(
        (r.tp, r.fp, r.fn_) == (4, 1, 0),
        "counts tp={} fp={} fn={}",
        r.tp,
        r.fp,
        r.fn_
    );
    ensure!(
        r.rationals() == [(4, 5), (4, 4), (8, 9)],
        "rationals {:?}",
        r.rationals()
    );
    ensure!(r == EvalReport::from_counts(4, 1, 0), "report mismatch");
    let shown = format!("{:.2}/{:.2}/{:.2}", r.precision, r.recall, r.f1);
    ensure!(shown == "0.80/1.00/0.89", "displayed {shown}");
    Ok(format!("P=4/5 R=4/4 F1=8/9, shown {shown}"))
}

fn markup_round_trip() -> Outcome {
    let source = "In 1503, Leonardo began painting the Mona Lisa.";
    let caption =
        "In 1503, [Leonardo](Leonardo da Vinci) began painting the [Mona Lisa](Mona Lisa).";
    let v = Vocabulary::new([
        "In", "1503", "##,", "Leonardo", "began", "painting", "the", "Mona", "Lisa", "##.", "da",
        "Vinci",
    ])
    .unwrap();
    let (c, _) = Catalog::load("Leonardo da Vinci\nMona Lisa\nLeonardo\n", &v).unwrap();
    let t = c.build_trie().unwrap();
    let gold = parse_document(caption, Some(&c)).map_err(|e| e.to_string())?;
    let targets = markup_targets(&gold, &v, &c, None).map_err(|e| e.to_string())?;
    let oracle = OracleScorer::new(v.len(), targets[0].1.clone());
    let cfg = LinkConfig {
        beam: BeamConfig::new(6, 384, true).unwrap(),
        chunk_size: None,
    };
    let out = link_document(&oracle, source, &v, &c, &t, &cfg).map_err(|e| e.to_string())?;
    let rendered = render_markup(&out.document);
    ensure!(rendered == caption, "rendered {rendered:?}");
    let reparsed = parse_document(&rendered, Some(&c)).map_err(|e| e.to_string())?;
    ensure!(reparsed == out.document, "parse(render(doc)) differs");
    ensure!(out.document.source() == source, "source not preserved");
    Ok(format!(
        "{} spans, render byte-identical",
        out.document.spans().len()
    ))
}

fn serialization() -> Outcome {
    let mut rng = rng(7);
    let mut bytes_total = 0;
    for round in 0..1000 {
        let v = word_vocab(rng.gen_range(2..50));
        let words = v.len() - 9;
        let mut names = random_names(&mut rng, words, 80, 6);
        let seqs: Vec<Vec<TokenId>> = names.iter().map(|n| v.encode(n)).collect();
        let trie = EntityTrie::build(&seqs, v.len()).map_err(|e| e.to_string())?;
        let bytes = trie.serialize();
        let back = EntityTrie::deserialize(&bytes).map_err(|e| format!("round {round}: {e}"))?;
        ensure!(
            back == trie,
            "round {round}: structure differs after round trip"
        );
        ensure!(
            back.serialize() == bytes,
            "round {round}: re-serialization differs"
        );
        names.shuffle(&mut rng);
        let shuffled: Vec<Vec<TokenId>> = names.iter().map(|n| v.encode(n)).collect();
        let other = EntityTrie::build(&shuffled, v.len()).map_err(|e| e.to_string())?;
        ensure!(
            other.serialize() == bytes,
            "round {round}: bytes depend on insertion order"
        );
        bytes_total += bytes.len();
    }
    Ok(format!("1000 catalogs, {bytes_total} bytes compared"))
}

/// Fixed distributions over a 3-token vocabulary, one row per step.
struct ThreeClass;

const THREE_CLASS_PROBS: [[f64; 3]; 3] = [[0.2, 0.5, 0.3], [0.6, 0.3, 0.1], [0.25, 0.25, 0.5]];

impl Scorer for ThreeClass {
    fn vocab_size(&self) -> usize {
        3
    }

    fn next_token_logprobs(&self, _input: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        THREE_CLASS_PROBS[prefix.len().min(2)]
            .iter()
            .map(|p| p.ln())
            .collect()
    }
}

fn label_smoothing() -> Outcome {
    let mut rng = rng(8);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let v = word_vocab(rng.gen_range(2..20));
        let words = v.len() - 9;
        let names = random_names(&mut rng, words, 10, 5);
        let (c, _) = catalog_of(&names, &v);
        let s = random_table_scorer(&mut rng, &v, &c);
        let input = random_input(&mut rng, &v, 5);
        let mut target = random_input(&mut rng, &v, 5);
        target.push(TokenId::EOS);
        let nll = s
            .smoothed_nll(&input, &target, 0.0)
            .map_err(|e| e.to_string())?;
        let score = s
            .sequence_score(&input, &target)
            .map_err(|e| e.to_string())?;
        worst = worst.max((nll + score).abs());
    }
    ensure!(worst <= 1e-12, "eps=0 deviation {worst:e}");

    // target: token 2, token 0, EOS (token 1)
    let target = [TokenId(2), TokenId(0), TokenId::EOS];
    let eps = 0.1;
    let mut direct = 0.0;
    for (step, &gold) in target.iter().enumerate() {
        for (j, p) in THREE_CLASS_PROBS[step].iter().enumerate() {
            let q = if j == gold.index() { 1.0 - eps } else { 0.0 } + eps / 3.0;
            direct -= q * p.ln();
        }
    }
    let got = ThreeClass
        .smoothed_nll(&[], &target, eps)
        .map_err(|e| e.to_string())?;
    ensure!(
        (got - direct).abs() <= 1e-12,
        "eps=0.1: {got} vs direct {direct}"
    );
    Ok(format!(
        "eps=0 max deviation {worst:e}; eps=0.1 toy {got:.12}"
    ))
}

fn scale_sanity() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(9);
    let words: Vec<String> = (0..500).map(|i| format!("w{i}")).collect();
    let v = Vocabulary::new(words.iter().map(String::as_str)).unwrap();
    let mut titles = std::collections::BTreeSet::new();
    while titles.len() < 10_000 {
        let len = rng.gen_range(1..=6);
        let title: Vec<&str> = (0..len)
            .map(|_| words[rng.gen_range(0..words.len())].as_str())
            .collect();
        titles.insert(title.join(" "));
    }
    let seqs: Vec<Vec<TokenId>> = titles.iter().map(|t| v.encode(t)).collect();
    let total_tokens: usize = seqs.iter().map(Vec::len).sum();
    let trie = EntityTrie::build(&seqs, v.len()).map_err(|e| e.to_string())?;
    let stats: TrieStats = trie.stats().map_err(|e| e.to_string())?;
    ensure!(
        stats.leaf_count == 10_000,
        "leaf_count {}",
        stats.leaf_count
    );
    ensure!(
        stats.internal_node_count <= total_tokens,
        "internal {} > tokens {total_tokens}",
        stats.internal_node_count
    );
    let took = within(Duration::from_secs(5), start)?;
    Ok(format!("{stats} tokens={total_tokens}, {took:.2?}"))
}

fn fsm_soundness() -> Outcome {
    let mut rng = rng(10);
    let mut decodes = 0;
    let mut sequences = 0;
    let mut mentions = 0;
    for world in 0..50 {
        let v = word_vocab(rng.gen_range(3..20));
        let words = v.len() - 9;
        let names = random_names(&mut rng, words, 30, 3);
        let (c, t) = catalog_of(&names, &v);
        let scorer: Box<dyn Scorer> = if world % 2 == 0 {
            Box::new(NoiseScorer {
                vocab_size: v.len(),
                seed: world as u64,
                spread: 3.0,
            })
        } else {
            Box::new(UniformScorer::new(v.len()))
        };
        for _ in 0..20 {
            let source = random_input(&mut rng, &v, 10);
            let cfg = BeamConfig::new(
                rng.gen_range(1..=6),
                source.len() * 7 + 1,
                rng.gen_bool(0.5),
            )
            .unwrap();
            let hyps = beam_search(&scorer, &source, &MarkupConstraint::new(&source, &t), &cfg);
            decodes += 1;
            for h in hyps {
                sequences += 1;
                // step-by-step containment, independent of replay
                let mut state = LinkerState::start();
                for (i, &tok) in h.tokens.iter().enumerate() {
                    let allowed = dynamic_constraint(&state, &source, &t);
                    ensure!(
                        allowed.contains(&tok),
                        "step {i} emitted {tok} outside {allowed:?}"
                    );
                    if tok != TokenId::EOS {
                        state = trie_decode_core::markup::advance_state(&state, tok, &t);
                    }
                }
                let found = replay(&h.tokens, &source, &t).map_err(|e| e.to_string())?;
                for m in &found {
                    ensure!(
                        c.name_for(&m.entity).is_some(),
                        "linked a non-catalog entity"
                    );
                }
                mentions += found.len();
                let stripped = strip_markup(&h.tokens);
                ensure!(
                    stripped == source,
                    "stripped {stripped:?} != source {source:?}"
                );
            }
        }
    }
    ensure!(decodes == 1000, "ran {decodes} decodes");
    ensure!(sequences >= decodes, "only {sequences} finished sequences");
    Ok(format!(
        "{decodes} decodes, {sequences} sequences, {mentions} mentions"
    ))
}

fn main() {
    let criteria: [Check; 10] = [
        ("trie continuations", trie_continuations),
        ("beam equals exhaustive ranking", oracle_equivalence),
        ("constrained outputs are catalog names", validity_fuzz),
        ("decode score equals sequence score", no_renormalization),
        ("span micro-F1 worked example", metric_reproduction),
        ("markup round trip", markup_round_trip),
        ("trie serialization", serialization),
        ("label-smoothed loss", label_smoothing),
        ("10k-title trie", scale_sanity),
        ("markup decoder soundness", fsm_soundness),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
