use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use trie_decode_core::markup::markup_targets;
use trie_decode_core::{
    disambiguate, gold_oracle, link_document, load_candidate_sets, load_dataset, parse_document,
    parse_markup, retrieve, run_eval_suite, score_predictions, train_table_scorer, training_pairs,
    BeamConfig, CandidateSet, Catalog, EdInstance, EntityTrie, KnowledgeBase, Mode, OracleScorer,
    Prediction, RankedResult, Scorer, SuiteConfig, TableScorer, TokenId, UniformScorer, Vocabulary,
};

#[derive(Parser)]
#[command(
    name = "trie-decode",
    version,
    about = "Entity retrieval and linking by trie-constrained decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect a whitespace-token vocabulary from text files.
    BuildVocab {
        /// Text files; every whitespace-separated word becomes a token.
        #[arg(long = "corpus", required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize a catalog and write its binary prefix trie.
    BuildTrie {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a smoothed bigram table scorer to a labelled dataset.
    TrainScorer {
        #[command(flatten)]
        kb: KbArgs,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        input_buckets: u32,
        #[arg(long)]
        context_window: Option<usize>,
        #[arg(long)]
        chunk_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank catalog entities for a query.
    Retrieve {
        #[command(flatten)]
        kb: KbArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        query: String,
    },
    /// Rank entities for one mention in context.
    Disambiguate {
        #[command(flatten)]
        kb: KbArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        context: String,
        /// Character offset of the mention.
        #[arg(long)]
        mention_start: usize,
        /// Mention length in characters.
        #[arg(long)]
        mention_len: usize,
        /// Candidate entities separated by `|`.
        #[arg(long)]
        candidates: Option<String>,
    },
    /// Annotate a text with entity markup.
    Link {
        #[command(flatten)]
        kb: KbArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        text: String,
    },
    /// Score a dataset, either by decoding it or from saved predictions.
    Eval {
        #[command(flatten)]
        kb: KbArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        data: PathBuf,
        /// Structured predictions (JSON lines) to score instead of decoding.
        #[arg(long, conflicts_with = "scorer")]
        predictions: Option<PathBuf>,
        /// Candidate sets file (`id TAB name|name`) for disambiguation.
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// Also write the structured predictions here.
        #[arg(long)]
        dump_predictions: Option<PathBuf>,
    },
}

#[derive(Args)]
struct KbArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    trie: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    /// Table scorer file, `uniform`, `oracle:TEXT`, or `gold-oracle` (eval only).
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    beams: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, overrides_with = "no_length_normalize")]
    length_normalize: bool,
    #[arg(long, overrides_with = "length_normalize")]
    no_length_normalize: bool,
    #[arg(long)]
    context_window: Option<usize>,
    /// Source tokens per linking chunk; 0 decodes whole documents.
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[arg(long, env = "TRIE_DECODE_JOBS")]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Structured,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ed,
    Dr,
    El,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ed => Mode::Ed,
            ModeArg::Dr => Mode::Dr,
            ModeArg::El => Mode::El,
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::from_lines(&read(path)?)
        .with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_catalog(path: &Path, vocab: &Vocabulary) -> Result<Catalog> {
    let (catalog, report) = Catalog::load(&read(path)?, vocab)
        .with_context(|| format!("loading catalog {}", path.display()))?;
    if report.duplicates > 0 {
        eprintln!(
            "warning: {} duplicate catalog lines ignored",
            report.duplicates
        );
    }
    Ok(catalog)
}

fn load_kb(args: &KbArgs) -> Result<KnowledgeBase> {
    let vocab = load_vocab(&args.vocab)?;
    let catalog = load_catalog(&args.catalog, &vocab)?;
    let bytes =
        fs::read(&args.trie).with_context(|| format!("reading trie {}", args.trie.display()))?;
    let trie = EntityTrie::deserialize(&bytes)
        .with_context(|| format!("loading trie {}", args.trie.display()))?;
    KnowledgeBase::with_trie(vocab, catalog, trie).context("trie does not match the catalog")
}

impl DecodeArgs {
    fn beam(&self, k: usize, max_steps: usize) -> Result<BeamConfig> {
        Ok(BeamConfig::new(
            self.beams.unwrap_or(k),
            self.max_steps.unwrap_or(max_steps),
            !self.no_length_normalize,
        )?)
    }

    fn suite(&self, mode: Mode) -> Result<SuiteConfig> {
        let mut cfg = SuiteConfig {
            jobs: self.jobs,
            ..SuiteConfig::default()
        };
        cfg.task.context_window = self.context_window.unwrap_or(cfg.task.context_window);
        if cfg.task.context_window == 0 {
            bail!("--context-window must be at least 1");
        }
        cfg.task.beam = self.beam(cfg.task.beam.k, cfg.task.beam.max_steps)?;
        cfg.link.beam = self.beam(cfg.link.beam.k, cfg.link.beam.max_steps)?;
        cfg.link.chunk_size = match self.chunk_size {
            Some(0) => None,
            Some(n) => Some(n),
            None => cfg.link.chunk_size,
        };
        if mode != Mode::El && self.chunk_size.is_some() {
            bail!("--chunk-size only applies to linking");
        }
        if mode == Mode::El && self.context_window.is_some() {
            bail!("--context-window does not apply to linking; use --chunk-size");
        }
        Ok(cfg)
    }

    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(path) => write(path, text.as_bytes()),
            None => {
                std::io::stdout().write_all(text.as_bytes())?;
                Ok(())
            }
        }
    }
}

fn scorer_for(
    spec: Option<&str>,
    kb: &KnowledgeBase,
    oracle_target: impl FnOnce(&str) -> Result<OracleScorer>,
) -> Result<Box<dyn Scorer>> {
    let spec = spec.context("--scorer is required")?;
    if spec == "uniform" {
        return Ok(Box::new(UniformScorer::new(kb.vocab.len())));
    }
    if spec == "gold-oracle" {
        bail!("the gold-oracle scorer is only available to eval");
    }
    if let Some(text) = spec.strip_prefix("oracle:") {
        return Ok(Box::new(oracle_target(text)?));
    }
    let table = TableScorer::from_text(&read(Path::new(spec))?)
        .with_context(|| format!("loading scorer {spec}"))?;
    if table.vocab_size() != kb.vocab.len() {
        bail!(
            "scorer was trained for {} token ids, vocabulary has {}",
            table.vocab_size(),
            kb.vocab.len()
        );
    }
    Ok(Box::new(table))
}

/// `oracle:NAME` favours the entity name, then EOS.
fn name_oracle(kb: &KnowledgeBase) -> impl FnOnce(&str) -> Result<OracleScorer> + '_ {
    move |text| {
        let mut target = kb.vocab.encode(text);
        if target.is_empty() {
            bail!("oracle target is empty");
        }
        target.push(TokenId::EOS);
        Ok(OracleScorer::new(kb.vocab.len(), target))
    }
}

fn ranking_text(r: &RankedResult) -> String {
    r.entries
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}\t{}\t{:.6}\n", i + 1, e.name, e.normalized_score))
        .collect()
}

fn prediction_line(p: &Prediction) -> Result<String> {
    Ok(serde_json::to_string(p)? + "\n")
}

fn emit_ranking(decode: &DecodeArgs, id: &str, ranked: RankedResult) -> Result<()> {
    if ranked.is_empty() {
        eprintln!(
            "warning: no entity finished within {} steps",
            decode.max_steps.unwrap_or(15)
        );
    }
    match decode.format {
        Format::Text => decode.emit(&ranking_text(&ranked)),
        Format::Structured => decode.emit(&prediction_line(&Prediction::ranked(id, ranked))?),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab { corpus, out } => {
            let texts = corpus.iter().map(|p| read(p)).collect::<Result<Vec<_>>>()?;
            let vocab = Vocabulary::from_texts(texts.iter().map(String::as_str));
            write(&out, vocab.to_lines().as_bytes())?;
            println!("tokens={}", vocab.ordinary_tokens().count());
        }
        Command::BuildTrie {
            vocab,
            catalog,
            out,
        } => {
            let vocab = load_vocab(&vocab)?;
            let catalog = load_catalog(&catalog, &vocab)?;
            let trie = catalog.build_trie().context("building trie")?;
            let bytes = trie.serialize();
            write(&out, &bytes)?;
            println!("{} bytes={}", trie.stats()?, bytes.len());
        }
        Command::TrainScorer {
            kb,
            mode,
            data,
            alpha,
            input_buckets,
            context_window,
            chunk_size,
            out,
        } => {
            let kb = load_kb(&kb)?;
            let args = DecodeArgs {
                scorer: None,
                beams: None,
                max_steps: None,
                length_normalize: false,
                no_length_normalize: false,
                context_window,
                chunk_size,
                format: Format::Text,
                jobs: None,
                out: None,
            };
            let cfg = args.suite(mode.into())?;
            let ds = load_dataset(&read(&data)?, mode.into(), &kb)?;
            let pairs = training_pairs(&ds, &kb, &cfg)?;
            let scorer = train_table_scorer(&pairs, alpha, kb.vocab.len(), input_buckets)?;
            write(&out, scorer.to_text().as_bytes())?;
            println!("pairs={}", pairs.len());
        }
        Command::Retrieve { kb, decode, query } => {
            let kb = load_kb(&kb)?;
            let cfg = decode.suite(Mode::Dr)?;
            let scorer = scorer_for(decode.scorer.as_deref(), &kb, name_oracle(&kb))?;
            let ranked = retrieve(&scorer, &query, &kb, &cfg.task)?;
            emit_ranking(&decode, "query", ranked)?;
        }
        Command::Disambiguate {
            kb,
            decode,
            context,
            mention_start,
            mention_len,
            candidates,
        } => {
            let kb = load_kb(&kb)?;
            let cfg = decode.suite(Mode::Ed)?;
            let cands = candidates
                .map(|list| {
                    CandidateSet::new(
                        list.split('|').map(str::trim).filter(|s| !s.is_empty()),
                        &kb.catalog,
                    )
                })
                .transpose()?;
            let gold = kb
                .catalog
                .names()
                .next()
                .context("catalog is empty")?
                .to_string();
            let inst = EdInstance::new(
                "mention",
                &context,
                mention_start,
                mention_len,
                gold,
                cands,
                &kb.vocab,
            )?;
            let scorer = scorer_for(decode.scorer.as_deref(), &kb, name_oracle(&kb))?;
            let ranked = disambiguate(&scorer, &inst, &kb, &cfg.task)?;
            emit_ranking(&decode, "mention", ranked)?;
        }
        Command::Link { kb, decode, text } => {
            let kb = load_kb(&kb)?;
            let cfg = decode.suite(Mode::El)?;
            let link_cfg = cfg.link.clone();
            // oracle:MARKUP favours the markup of each chunk
            let scorer = scorer_for(decode.scorer.as_deref(), &kb, |markup| {
                let doc = parse_document(markup, Some(&kb.catalog))?;
                if doc.source() != text {
                    bail!("oracle markup does not strip to the input text");
                }
                let mut oracle = OracleScorer::keyed(kb.vocab.len());
                for (input, target) in
                    markup_targets(&doc, &kb.vocab, &kb.catalog, link_cfg.chunk_size)?
                {
                    oracle.insert_target(input, target);
                }
                Ok(oracle)
            })?;
            let out = link_document(&scorer, &text, &kb.vocab, &kb.catalog, &kb.trie, &cfg.link)?;
            for d in &out.diagnostics {
                eprintln!("warning: {d}");
            }
            let markup = trie_decode_core::render_markup(&out.document);
            match decode.format {
                Format::Text => decode.emit(&(markup + "\n"))?,
                Format::Structured => decode.emit(&prediction_line(&Prediction {
                    id: "text".into(),
                    ranking: None,
                    markup: Some(markup),
                    spans: Some(out.document.spans().to_vec()),
                    diagnostics: out.diagnostics,
                })?)?,
            }
        }
        Command::Eval {
            kb,
            decode,
            mode,
            data,
            predictions,
            candidates,
            dump_predictions,
        } => {
            let kb = load_kb(&kb)?;
            let mode: Mode = mode.into();
            let cfg = decode.suite(mode)?;
            let mut ds = load_dataset(&read(&data)?, mode, &kb)?;
            if let Some(path) = &candidates {
                if mode != Mode::Ed {
                    bail!("--candidates only applies to disambiguation");
                }
                let sets = load_candidate_sets(&read(path)?, &kb.catalog)?;
                ds.apply_candidates(&sets);
            }
            let (report, mut preds) = match (&predictions, decode.scorer.as_deref()) {
                (Some(path), None) => {
                    let preds = read_predictions(&read(path)?, &ds, &kb)?;
                    (score_predictions(&ds, &preds)?, preds)
                }
                (None, Some("gold-oracle")) => {
                    let oracle = gold_oracle(&ds, &kb, &cfg)?;
                    run_eval_suite(&oracle, &ds, &kb, &cfg)?
                }
                (None, Some(_)) => {
                    let scorer = scorer_for(decode.scorer.as_deref(), &kb, name_oracle(&kb))?;
                    run_eval_suite(&scorer, &ds, &kb, &cfg)?
                }
                (None, None) => bail!("eval needs --scorer or --predictions"),
                (Some(_), Some(_)) => bail!("--scorer and --predictions are mutually exclusive"),
            };
            for p in &preds {
                for d in &p.diagnostics {
                    eprintln!("warning: {}: {d}", p.id);
                }
            }
            if let Some(path) = dump_predictions {
                preds.sort_by(|a, b| a.id.cmp(&b.id));
                let lines = preds
                    .iter()
                    .map(prediction_line)
                    .collect::<Result<String>>()?;
                write(&path, lines.as_bytes())?;
            }
            match decode.format {
                Format::Text => decode.emit(&report.to_text())?,
                Format::Structured => {
                    decode.emit(&(serde_json::to_string_pretty(&report)? + "\n"))?
                }
            }
        }
    }
    Ok(())
}

/// Parses JSON-lines predictions. Linking predictions may carry markup only,
/// in which case spans are recovered from it.
fn read_predictions(
    text: &str,
    ds: &trie_decode_core::Dataset,
    kb: &KnowledgeBase,
) -> Result<Vec<Prediction>> {
    let sources: std::collections::HashMap<&str, &str> = match ds {
        trie_decode_core::Dataset::El(v) => v
            .iter()
            .map(|i| (i.id.as_str(), i.source.as_str()))
            .collect(),
        _ => Default::default(),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut p: Prediction =
            serde_json::from_str(line).with_context(|| format!("predictions line {}", i + 1))?;
        if p.spans.is_none() {
            if let (Some(markup), Some(source)) = (&p.markup, sources.get(p.id.as_str())) {
                p.spans = Some(
                    parse_markup(markup, source, Some(&kb.catalog))
                        .with_context(|| format!("predictions line {}", i + 1))?,
                );
            }
        }
        out.push(p);
    }
    Ok(out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
