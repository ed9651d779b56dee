//! `kqg`: triple extraction, training, generation and evaluation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use kqg::checkpoint::{init_model, load_model_dir, save_model_dir, save_params};
use kqg::config::{Config, TrainMode};
use kqg::corpus::{encode_batch, load_samples, write_samples, TagVocabs, TrainingSample, Vocabulary};
use kqg::kb::{self, load_knowledge_base, Source, StopWords, TripleStore};
use kqg::nn::{randomize, ParameterSet};
use kqg::trainer::{gradcheck_losses, Trainer};
use kqg::{bundled, metrics, Error, Result};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "kqg", version, about = "Commonsense-knowledge question generation")]
struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` config key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Annotate a corpus with aligned knowledge triples and partition it.
    Extract(ExtractArgs),
    /// Print extraction statistics of an annotated corpus as JSON.
    Stats(StatsArgs),
    /// Train a model and write its directory.
    Train(TrainArgs),
    /// Generate questions with a trained model.
    Generate(GenerateArgs),
    /// Score hypotheses against references, or evaluate an auxiliary head.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every loss component on a toy batch.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Corpus JSONL; triples already present are replaced.
    #[arg(long)]
    corpus: PathBuf,
    /// ConceptNet TSV (`head<TAB>relation<TAB>tail`).
    #[arg(long)]
    conceptnet: Option<PathBuf>,
    /// WordNet TSV, merged after ConceptNet.
    #[arg(long)]
    wordnet: Option<PathBuf>,
    /// One stop word per line; defaults to the bundled list.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Annotated corpus JSONL.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Itf,
    EquippedOnly,
    PureOnly,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Itf => TrainMode::Itf,
            ModeArg::EquippedOnly => TrainMode::EquippedOnly,
            ModeArg::PureOnly => TrainMode::PureOnly,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Annotated corpus JSONL, split into equipped and pure samples.
    #[arg(long)]
    data: PathBuf,
    /// Annotated dev corpus for checkpoint selection by BLEU-4.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Model directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Disable tail generation.
    #[arg(long)]
    no_tg: bool,
    /// Disable relation classification.
    #[arg(long)]
    no_rc: bool,
    /// Stop after this many steps instead of the full schedule.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Corpus JSONL; annotated samples decode with their training triple.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the `beam` config key.
    #[arg(long)]
    beam: Option<usize>,
    /// Decode without knowledge even when a triple is present.
    #[arg(long)]
    no_knowledge: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Rc,
    Tg,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// JSONL with a `question` field per line.
    #[arg(long, required_unless_present = "task")]
    hyp: Option<PathBuf>,
    /// JSONL with a `question` field per line, in the same order.
    #[arg(long, required_unless_present = "task")]
    r#ref: Option<PathBuf>,
    /// Evaluate an auxiliary head instead; needs `--model` and `--data`.
    #[arg(long, value_enum, requires_all = ["model", "data"])]
    task: Option<Task>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Annotated corpus; defaults to the bundled mini corpus.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Equipped samples in the toy batch.
    #[arg(long, default_value_t = 2)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 3)]
    coords: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Defaults, then `base` overrides, config file, environment and flags.
fn load_config(cli: &Cli, base: &str, flags: &[(&str, String)]) -> Result<Config> {
    let mut cfg = Config::default();
    cfg.merge_str(base)?;
    if let Some(p) = &cli.config {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        cfg.merge_str(&text)?;
    }
    cfg.apply_env(std::env::vars())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    for (k, v) in flags {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Extract(a) => extract(a),
        Command::Stats(a) => stats(a),
        Command::Train(a) => train(&cli, a),
        Command::Generate(a) => generate(&cli, a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck(&cli, a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn write_jsonl(path: &Path, samples: &[TrainingSample]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_samples(BufWriter::new(f), samples).map_err(|e| Error::io(path, e))
}

fn extract(a: &ExtractArgs) -> Result<u8> {
    let mut samples = load_samples(&a.corpus)?;
    let mut stores: Vec<TripleStore> = Vec::new();
    if let Some(p) = &a.conceptnet {
        stores.push(load_knowledge_base(p, Source::ConceptNet)?);
    }
    if let Some(p) = &a.wordnet {
        stores.push(load_knowledge_base(p, Source::WordNet)?);
    }
    let stopwords = match &a.stopwords {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            StopWords::from_words(
                text.lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#')),
            )
        }
        None => StopWords::default(),
    };
    let refs: Vec<&TripleStore> = stores.iter().collect();
    kb::annotate(&mut samples, &refs, &stopwords);
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_jsonl(&a.out.join("annotated.jsonl"), &samples)?;
    let (equipped, pure) = kb::partition_dataset(samples);
    write_jsonl(&a.out.join("equipped.jsonl"), &equipped)?;
    write_jsonl(&a.out.join("pure.jsonl"), &pure)?;
    let manifest = json!({
        "equipped": equipped.iter().map(|s| &s.id).collect::<Vec<_>>(),
        "pure": pure.iter().map(|s| &s.id).collect::<Vec<_>>(),
    });
    write_text(&a.out.join("partition.json"), &serde_json::to_string_pretty(&manifest)?)?;
    let report = kb::stats_report(&equipped, &pure);
    write_text(&a.out.join("stats.json"), &serde_json::to_string_pretty(&report)?)?;
    eprintln!(
        "{} samples: {} equipped, {} pure",
        report.total_samples, report.equipped_count, report.pure_count
    );
    Ok(0)
}

fn stats(a: &StatsArgs) -> Result<u8> {
    let (equipped, pure) = kb::partition_dataset(load_samples(&a.corpus)?);
    let report = kb::stats_report(&equipped, &pure);
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
    Ok(0)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<u8> {
    let mut flags = Vec::new();
    if let Some(m) = a.mode {
        flags.push(("mode", TrainMode::from(m).to_string()));
    }
    if a.no_tg {
        flags.push(("no_tg", "true".to_string()));
    }
    if a.no_rc {
        flags.push(("no_rc", "true".to_string()));
    }
    let cfg = load_config(cli, "", &flags)?;
    let (equipped, pure) = kb::partition_dataset(load_samples(&a.data)?);
    let dev = match &a.dev {
        Some(p) => load_samples(p)?,
        None => Vec::new(),
    };
    let mut trainer = Trainer::new(cfg.clone(), equipped, pure, dev)?;
    let total = a
        .max_steps
        .map_or(trainer.schedule().len(), |m| m.min(trainer.schedule().len()));
    let interval = cfg.eval_interval;
    while trainer.steps_done() < total {
        let rec = trainer.step()?;
        if (rec.step + 1) % interval == 0 || rec.step + 1 == total {
            eprintln!(
                "step {} ({}) L={:.4} L_q={:.4} L_r={:.4} L_t={:.4}",
                rec.step + 1,
                rec.phase,
                rec.loss.l,
                rec.loss.l_q,
                rec.loss.l_r,
                rec.loss.l_t
            );
        }
    }
    if trainer.window.is_empty() {
        trainer.window.push(f64::NEG_INFINITY, trainer.params.clone());
    }
    let averaged = trainer.averaged_params()?;
    save_model_dir(&a.out, &cfg, &trainer.vocab, &trainer.tags, &averaged)?;
    save_params(a.out.join("last.ckpt"), &trainer.params)?;
    write_text(&a.out.join("train_log.csv"), &trainer.csv_log())?;
    Ok(0)
}

fn open_out(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<u8> {
    let md = load_model_dir(&a.model)?;
    let mut flags = Vec::new();
    if let Some(b) = a.beam {
        flags.push(("beam", b.to_string()));
    }
    let cfg = load_config(cli, &md.config.to_kv_string(), &flags)?;
    let samples = load_samples(&a.data)?;
    let out_path = a.out.as_deref();
    let mut w = open_out(out_path)?;
    for s in &samples {
        let batch = encode_batch(std::slice::from_ref(s), &md.vocab, &md.tags)?;
        let use_knowledge = !a.no_knowledge && batch.triples[0].is_some();
        let h = md.model.beam_search(
            &md.params,
            &batch,
            0,
            use_knowledge,
            cfg.beam,
            cfg.max_len,
            cfg.length_penalty,
        )?;
        let question: Vec<String> = h.ids.iter().map(|&id| batch.surface(&md.vocab, 0, id)).collect();
        let line = json!({"id": s.id, "question": question, "log_prob": h.log_prob, "score": h.score});
        let io = |e| Error::io(out_path.unwrap_or(Path::new("<stdout>")), e);
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::io(out_path.unwrap_or(Path::new("<stdout>")), e))?;
    Ok(0)
}

/// Lowercased `question` tokens of every line; a string is tokenized.
fn read_questions(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
        let toks = match v.get("question") {
            Some(serde_json::Value::String(s)) => kqg::corpus::tokenize(s, false),
            Some(serde_json::Value::Array(xs)) => xs
                .iter()
                .map(|x| {
                    x.as_str()
                        .map(str::to_lowercase)
                        .ok_or_else(|| perr("non-string token".into()))
                })
                .collect::<Result<_>>()?,
            _ => return Err(perr("missing question field".into())),
        };
        out.push(toks);
    }
    Ok(out)
}

fn evaluate(a: &EvaluateArgs) -> Result<u8> {
    let report = match a.task {
        None => {
            let hyps = read_questions(a.hyp.as_deref().expect("clap requires hyp"))?;
            let refs = read_questions(a.r#ref.as_deref().expect("clap requires ref"))?;
            serde_json::to_value(metrics::evaluate(&hyps, &refs)?)?
        }
        Some(task) => {
            let md = load_model_dir(a.model.as_deref().expect("clap requires model"))?;
            let samples = load_samples(a.data.as_deref().expect("clap requires data"))?;
            let equipped: Vec<_> = samples.into_iter().filter(|s| !s.triples.is_empty()).collect();
            if equipped.is_empty() {
                return Err(Error::validation("no annotated samples to evaluate"));
            }
            aux_report(task, &md.model, &md.params, &md.vocab, &md.tags, &md.config, &equipped)?
        }
    };
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
    Ok(0)
}

fn aux_report(
    task: Task,
    model: &kqg::model::Model,
    params: &ParameterSet,
    vocab: &Vocabulary,
    tags: &TagVocabs,
    cfg: &Config,
    samples: &[TrainingSample],
) -> Result<serde_json::Value> {
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    let mut tails = Vec::new();
    let mut gold_tails = Vec::new();
    for s in samples {
        let batch = encode_batch(std::slice::from_ref(s), vocab, tags)?;
        let ids = batch.triples[0].as_ref().expect("annotated sample");
        match task {
            Task::Rc => {
                preds.push(model.predict_relation(params, &batch, 0)?.0);
                golds.push(ids.relation);
            }
            Task::Tg => {
                let out = model.generate_tail(params, &batch, 0, cfg.max_len)?;
                tails.push(out.iter().map(|&id| batch.surface(vocab, 0, id)).collect::<Vec<_>>());
                gold_tails.push(ids.tail_tokens.clone());
            }
        }
    }
    Ok(match task {
        Task::Rc => json!({
            "rc_accuracy": metrics::rc_accuracy(&preds, &golds)?,
            "majority_baseline": metrics::majority_baseline(&golds)?,
            "samples": golds.len(),
        }),
        Task::Tg => json!({
            "tg_bleu1": metrics::tg_bleu1(&tails, &gold_tails)?,
            "samples": tails.len(),
        }),
    })
}

const TOY: &str = "hidden_size = 8\nword_dim = 6\nbio_dim = 2\npos_dim = 2\nner_dim = 2\ndropout = 0\n";

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<u8> {
    let cfg = load_config(cli, TOY, &[])?;
    let samples = match &a.data {
        Some(p) => load_samples(p)?,
        None => bundled::annotated()?,
    };
    let toy: Vec<TrainingSample> = samples
        .into_iter()
        .filter(|s| !s.triples.is_empty())
        .take(a.samples)
        .collect();
    if toy.is_empty() {
        return Err(Error::validation("gradcheck needs at least one annotated sample"));
    }
    let vocab = Vocabulary::build(&toy, cfg.vocab_size, 1);
    let tags = TagVocabs::build(&toy);
    let batch = encode_batch(&toy, &vocab, &tags)?;
    let (model, mut params) = init_model(&cfg, &vocab, &tags)?;
    randomize(&mut params, 0.5, cfg.seed);
    let reports = gradcheck_losses(&model, &params, &batch, a.eps, a.coords, cfg.seed)?;
    let mut ok = true;
    for (name, r) in &reports {
        let pass = r.max_rel_err < GRADCHECK_TOL;
        ok &= pass;
        let worst = r.worst.as_ref().map(|(n, i)| format!("{n}[{i}]")).unwrap_or_default();
        println!(
            "{name}\tmax_rel_err={:.3e}\tchecked={}\tworst={worst}\t{}",
            r.max_rel_err,
            r.checked,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok { 0 } else { 3 })
}
