//! The `eldan` executable: every workflow stage as a deterministic,
//! scriptable subcommand. Given identical inputs and seeds, every
//! subcommand writes byte-identical outputs.
//!
//! Exit codes: 0 on success, 1 when the inputs are at fault (bad flags,
//! malformed configs or corpora, unknown codes), 2 when the run itself
//! fails (I/O trouble, divergence, a failed gradient check).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::grad_check;
use crate::corpus::{
    binarize, code_stats, parse_corpus, serialize_corpus, split_corpus, CodeId, Corpus,
    CorpusError, Manifest,
};
use crate::eval::{
    attention_records, chance_document_f1_parallel, document_f1, encounter_f1, report_tables,
    significance_tailed, write_attention_jsonl, CodeSummaryRow, EvalError, PRFReport,
};
use crate::model::{load_model, save_model, Dims, Mode, ModelError, ModelParams};
use crate::synthgen::{generate, prevalence_warnings, GenConfig};
use crate::train::{model_filename, train_all, train_code, TrainConfig, TrainError};

/// Entry point used by `main`. `args` must include the program name.
pub fn run(args: &[String]) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // clap renders help/version on stdout (exit 0) and genuine
            // usage errors on stderr (exit 1).
            let code = u8::from(err.use_stderr());
            let _ = err.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Split(a) => cmd_split(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Train(a) => cmd_train(a),
        Command::TrainAll(a) => cmd_train_all(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attend(a) => cmd_attend(a),
        Command::DocF1(a) => cmd_doc_f1(a),
        Command::Chance(a) => cmd_chance(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {}", err.message);
            err.exit
        }
    }
}

#[derive(Parser)]
#[command(
    name = "eldan",
    version,
    about = "Encounter-level document attention: generate corpora, train one-vs-all coders, evaluate attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted source documents.
    Gen(GenArgs),
    /// Split a corpus into train/dev/test by hashed encounter id.
    Split(SplitArgs),
    /// Print per-code statistics, ranked by prevalence.
    Stats(StatsArgs),
    /// Train one binary classifier for one code.
    Train(TrainCmdArgs),
    /// Train classifiers for many codes, most frequent first.
    TrainAll(TrainAllArgs),
    /// Encounter-level F1 of a saved model on a labeled split.
    Eval(EvalArgs),
    /// Dump per-document attention weights as JSON Lines.
    Attend(AttendArgs),
    /// Document-level F1 of attention-selected sources against annotations.
    DocF1(DocF1Args),
    /// Document-level F1 under uniform-random attention, with significance.
    Chance(ChanceArgs),
    /// Verify the analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Render summary tables from a directory of trained models.
    Report(ReportArgs),
}

struct CliError {
    exit: u8,
    message: String,
}

impl CliError {
    fn validation(message: impl ToString) -> Self {
        CliError { exit: 1, message: message.to_string() }
    }

    fn runtime(message: impl ToString) -> Self {
        CliError { exit: 2, message: message.to_string() }
    }
}

/// Malformed input data is the caller's fault; failing to read it is not.
fn corpus_err(err: CorpusError) -> CliError {
    match err {
        CorpusError::Io(_) => CliError::runtime(err),
        _ => CliError::validation(err),
    }
}

fn model_err(err: ModelError) -> CliError {
    match err {
        ModelError::Io(_) => CliError::runtime(err),
        _ => CliError::validation(err),
    }
}

fn eval_err(err: EvalError) -> CliError {
    match err {
        EvalError::Model(inner) => model_err(inner),
        _ => CliError::validation(err),
    }
}

fn train_err(err: TrainError) -> CliError {
    match err {
        TrainError::NonFiniteGradient { .. }
        | TrainError::Diverged { .. }
        | TrainError::Persist { .. } => CliError::runtime(err),
        TrainError::Corpus(inner) => corpus_err(inner),
        TrainError::Model(inner) => model_err(inner),
        TrainError::Eval(inner) => eval_err(inner),
        _ => CliError::validation(err),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

/// Prints to stdout, or writes to `out` when given.
fn emit(out: Option<&Path>, contents: &str) -> Result<(), CliError> {
    match out {
        Some(path) => write_file(path, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    Manifest::from_json(&read_text(path)?).map_err(corpus_err)
}

fn load_corpus(corpus: &Path, manifest: &Path) -> Result<Corpus, CliError> {
    let manifest = load_manifest(manifest)?;
    let file = File::open(corpus)
        .map_err(|e| CliError::runtime(format!("cannot open {}: {e}", corpus.display())))?;
    parse_corpus(BufReader::new(file), &manifest).map_err(corpus_err)
}

fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), CliError> {
    let file = File::create(path)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", path.display())))?;
    serialize_corpus(corpus, BufWriter::new(file))
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

/// Loads a training config (or the defaults) and applies flag overrides.
fn train_config(
    config: Option<&Path>,
    seed: Option<u64>,
    mode: Option<Mode>,
) -> Result<TrainConfig, CliError> {
    let mut cfg = match config {
        Some(path) => TrainConfig::from_json(&read_text(path)?).map_err(train_err)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(mode) = mode {
        cfg.mode = mode;
    }
    Ok(cfg)
}

fn prf_tsv(code: &CodeId, report: &PRFReport) -> String {
    let cell = |x: f64, defined: bool| {
        if defined {
            x.to_string()
        } else {
            "-".to_owned()
        }
    };
    format!(
        "code\ttp\tfp\tfn\tprecision\trecall\tf1\tn_enc\tn_doc\tn_source\n\
         {}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        code,
        report.true_pos,
        report.false_pos,
        report.false_neg,
        cell(report.precision, report.is_defined()),
        cell(report.recall, report.is_defined()),
        cell(report.f1, report.is_defined()),
        report.n_enc,
        report.n_doc,
        report.n_source,
    )
}

/// The code a model-centric subcommand should score: the explicit flag if
/// given, otherwise the target recorded in the model file.
fn resolve_code(flag: Option<&str>, params: &ModelParams) -> Result<CodeId, CliError> {
    match (flag, &params.target) {
        (Some(code), _) => Ok(CodeId::new(code)),
        (None, Some(target)) => Ok(target.clone()),
        (None, None) => Err(CliError::validation(
            "the model records no target code; pass --code",
        )),
    }
}

fn eval_threads(flag: Option<usize>) -> Result<usize, CliError> {
    let threads = match flag {
        Some(t) => t,
        None => match std::env::var("ELDAN_THREADS") {
            Ok(value) => value.parse().map_err(|_| {
                CliError::validation(format!(
                    "ELDAN_THREADS must be a positive integer, got {value:?}"
                ))
            })?,
            Err(_) => 1,
        },
    };
    if threads == 0 {
        return Err(CliError::validation("thread count must be at least 1"));
    }
    Ok(threads)
}

#[derive(Args)]
struct GenArgs {
    /// Generator config JSON.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Seed for all generation randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output corpus JSONL path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Manifest JSON path (default: <out> with extension "manifest.json").
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
}

fn cmd_gen(args: &GenArgs) -> Result<(), CliError> {
    let config = GenConfig::from_json(&read_text(&args.config)?).map_err(CliError::validation)?;
    for warning in prevalence_warnings(&config) {
        eprintln!("warning: {warning}");
    }
    let corpus = generate(&config, args.seed).map_err(CliError::validation)?;
    write_corpus(&corpus, &args.out)?;
    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| args.out.with_extension("manifest.json"));
    write_file(&manifest_path, &Manifest::for_corpus(&corpus).to_json())?;
    println!(
        "wrote {} encounters to {} (manifest {})",
        corpus.len(),
        args.out.display(),
        manifest_path.display()
    );
    Ok(())
}

#[derive(Args)]
struct SplitArgs {
    /// Corpus JSONL to split.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Manifest JSON for the corpus.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Seed for the split hash.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory that receives train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Fraction of encounters assigned to the training split.
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    /// Fraction assigned to the dev split.
    #[arg(long, default_value_t = 0.1)]
    dev_ratio: f64,
    /// Fraction assigned to the test split.
    #[arg(long, default_value_t = 0.1)]
    test_ratio: f64,
}

fn cmd_split(args: &SplitArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&args.corpus, &args.manifest)?;
    let ratios = (args.train_ratio, args.dev_ratio, args.test_ratio);
    let (train, dev, test) = split_corpus(&corpus, ratios, args.seed).map_err(corpus_err)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", args.out.display())))?;
    for (name, split) in [("train", &train), ("dev", &dev), ("test", &test)] {
        write_corpus(split, &args.out.join(format!("{name}.jsonl")))?;
        println!("{name}\t{}", split.len());
    }
    Ok(())
}

#[derive(Args)]
struct StatsArgs {
    /// Corpus JSONL to summarize.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Manifest JSON for the corpus.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Write the TSV here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn cmd_stats(args: &StatsArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&args.corpus, &args.manifest)?;
    let mut text = String::from("code\tn_encounters\tprevalence\tmean_docs\n");
    for stat in code_stats(&corpus) {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            stat.code, stat.n_encounters, stat.prevalence, stat.mean_docs
        ));
    }
    emit(args.out.as_deref(), &text)
}

#[derive(Args)]
struct TrainCmdArgs {
    /// Training split JSONL.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Dev split JSONL used for model selection.
    #[arg(long, value_name = "FILE")]
    dev: PathBuf,
    /// Manifest JSON shared by both splits.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// The code to train a classifier for.
    #[arg(long, value_name = "CODE")]
    code: String,
    /// Training config JSON; flags below override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the pooling mode (eldan or eldn).
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Initialize the embedding from this trained model.
    #[arg(long, value_name = "MODEL")]
    transfer_from: Option<PathBuf>,
    /// Where to save the trained model.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// History TSV path (default: <out> with extension "history.tsv").
    #[arg(long, value_name = "FILE")]
    history: Option<PathBuf>,
}

fn cmd_train(args: &TrainCmdArgs) -> Result<(), CliError> {
    let cfg = train_config(args.config.as_deref(), args.seed, args.mode)?;
    let code = CodeId::new(&args.code);
    let train_set = binarize(&load_corpus(&args.corpus, &args.manifest)?, &code)
        .map_err(corpus_err)?;
    let dev_set = binarize(&load_corpus(&args.dev, &args.manifest)?, &code).map_err(corpus_err)?;
    let donor = match &args.transfer_from {
        Some(path) => Some(load_model(path).map_err(model_err)?.w_embed),
        None => None,
    };
    let (params, history) =
        train_code(&train_set, &dev_set, &cfg, donor.as_ref()).map_err(train_err)?;
    save_model(&params, &args.out).map_err(model_err)?;
    let history_path = args
        .history
        .clone()
        .unwrap_or_else(|| args.out.with_extension("history.tsv"));
    write_file(&history_path, &history.to_tsv())?;
    println!(
        "{}\tbest_epoch={}\tbest_dev_f1={}\t{}",
        code,
        history.best_epoch,
        history.best_dev_f1,
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct TrainAllArgs {
    /// Training split JSONL.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Dev split JSONL used for model selection.
    #[arg(long, value_name = "FILE")]
    dev: PathBuf,
    /// Manifest JSON shared by both splits.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Training config JSON; flags below override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the pooling mode (eldan or eldn).
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Chain embedding transfer down the prevalence ranking.
    #[arg(long)]
    transfer: bool,
    /// Train only the N most frequent codes.
    #[arg(long, value_name = "N")]
    top: Option<usize>,
    /// Directory that receives one model and history per code.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn cmd_train_all(args: &TrainAllArgs) -> Result<(), CliError> {
    let mut cfg = train_config(args.config.as_deref(), args.seed, args.mode)?;
    if args.transfer {
        cfg.transfer = true;
    }
    let train = load_corpus(&args.corpus, &args.manifest)?;
    let dev = load_corpus(&args.dev, &args.manifest)?;
    let mut codes: Vec<CodeId> = code_stats(&train)
        .into_iter()
        .filter(|stat| stat.n_encounters > 0)
        .map(|stat| stat.code)
        .collect();
    if let Some(top) = args.top {
        codes.truncate(top);
    }
    if codes.is_empty() {
        return Err(CliError::validation("no code in the training split has any positives"));
    }
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", args.out.display())))?;

    for outcome in train_all(&train, &dev, &codes, &cfg, Some(&args.out)) {
        match &outcome.result {
            Ok((_, history)) => println!(
                "{}\tok\tbest_epoch={}\tbest_dev_f1={}\t{}",
                outcome.code,
                history.best_epoch,
                history.best_dev_f1,
                model_filename(&outcome.code, cfg.mode, cfg.transfer)
            ),
            Err(err) => println!("{}\tskipped\t{err}", outcome.code),
        }
    }
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model file.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Labeled corpus JSONL to score.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Manifest JSON for the corpus.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Code to score (default: the model's recorded target).
    #[arg(long, value_name = "CODE")]
    code: Option<String>,
    /// Write the TSV here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let params = load_model(&args.model).map_err(model_err)?;
    let code = resolve_code(args.code.as_deref(), &params)?;
    let corpus = load_corpus(&args.corpus, &args.manifest)?;
    let set = binarize(&corpus, &code).map_err(corpus_err)?;
    let report = encounter_f1(&params, &set).map_err(eval_err)?;
    emit(args.out.as_deref(), &prf_tsv(&code, &report))
}

#[derive(Args)]
struct AttendArgs {
    /// Trained model file.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Annotated corpus JSONL.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Manifest JSON for the corpus.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Code whose carrying encounters are dumped (default: model target).
    #[arg(long, value_name = "CODE")]
    code: Option<String>,
    /// Write the JSONL here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn cmd_attend(args: &AttendArgs) -> Result<(), CliError> {
    let params = load_model(&args.model).map_err(model_err)?;
    let code = resolve_code(args.code.as_deref(), &params)?;
    let corpus = load_corpus(&args.corpus, &args.manifest)?;
    let records = attention_records(&params, &corpus, &code).map_err(eval_err)?;
    let mut buf = Vec::new();
    write_attention_jsonl(&records, &mut buf)
        .map_err(|e| CliError::runtime(format!("cannot serialize attention records: {e}")))?;
    let text = String::from_utf8(buf).expect("JSON output is UTF-8");
    emit(args.out.as_deref(), &text)
}

#[derive(Args)]
struct DocF1Args {
    /// Trained model file.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Corpus JSONL with per-document annotations.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Manifest JSON for the corpus.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Code to score (default: the model's recorded target).
    #[arg(long, value_name = "CODE")]
    code: Option<String>,
    /// Write the TSV here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn cmd_doc_f1(args: &DocF1Args) -> Result<(), CliError> {
    let params = load_model(&args.model).map_err(model_err)?;
    let code = resolve_code(args.code.as_deref(), &params)?;
    let corpus = load_corpus(&args.corpus, &args.manifest)?;
    let report = document_f1(&params, &corpus, &code).map_err(eval_err)?;
    emit(args.out.as_deref(), &prf_tsv(&code, &report))
}

#[derive(Args)]
struct ChanceArgs {
    /// Corpus JSONL with per-document annotations.
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Manifest JSON for the corpus.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Code to score.
    #[arg(long, value_name = "CODE")]
    code: String,
    /// Number of random-attention runs.
    #[arg(long, default_value_t = 500)]
    runs: usize,
    /// Seed for the random scores.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: ELDAN_THREADS, else 1).
    #[arg(long)]
    threads: Option<usize>,
    /// Also score this model and test it against the chance distribution.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Report a two-sided p-value instead of the one-sided default.
    #[arg(long)]
    two_sided: bool,
    /// Write the TSV here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn cmd_chance(args: &ChanceArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&args.corpus, &args.manifest)?;
    let code = CodeId::new(&args.code);
    let threads = eval_threads(args.threads)?;
    let chance =
        chance_document_f1_parallel(&corpus, &code, args.runs, args.seed, threads)
            .map_err(eval_err)?;
    let chance_cell = |x: f64| {
        if chance.is_defined() {
            x.to_string()
        } else {
            "-".to_owned()
        }
    };

    let text = match &args.model {
        None => format!(
            "code\tn_enc\truns\tchance_mean_f1\tchance_std_f1\n{}\t{}\t{}\t{}\t{}\n",
            code,
            chance.n_enc,
            chance.runs,
            chance_cell(chance.mean_f1),
            chance_cell(chance.std_f1),
        ),
        Some(model_path) => {
            let params = load_model(model_path).map_err(model_err)?;
            let report = document_f1(&params, &corpus, &code).map_err(eval_err)?;
            let test = significance_tailed(&chance, report.f1, args.two_sided);
            format!(
                "code\tn_enc\tn_doc\tn_source\tattention_f1\tchance_mean_f1\tchance_std_f1\truns\tt\tp\tsignificant\n\
                 {}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                code,
                report.n_enc,
                report.n_doc,
                report.n_source,
                if report.is_defined() { report.f1.to_string() } else { "-".to_owned() },
                chance_cell(chance.mean_f1),
                chance_cell(chance.std_f1),
                chance.runs,
                test.t,
                test.p,
                test.significant,
            )
        }
    };
    emit(args.out.as_deref(), &text)
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check only this mode (default: both).
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Seed for the random trial models and encounters.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random trials per mode.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Maximum tolerated relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let envelope = Dims {
        feature_dim: 64,
        embed_dim: 8,
        enc1_dim: 8,
        enc2_dim: 8,
        attn_dim: 8,
    };
    let modes = match args.mode {
        Some(mode) => vec![mode],
        None => vec![Mode::Eldan, Mode::Eldn],
    };
    let mut all_pass = true;
    for mode in modes {
        let report = grad_check(envelope, mode, args.seed, args.trials, args.eps, args.tol);
        println!("mode\t{mode}");
        print!("{}", report.to_tsv());
        all_pass &= report.all_pass();
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "gradient check failed: some tensor exceeded relative error {}",
            args.tol
        )))
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of models written by train-all.
    #[arg(long, value_name = "DIR")]
    models: PathBuf,
    /// Labeled corpus JSONL to score (typically the test split).
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Manifest JSON for the corpus.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Codes per macro-average group.
    #[arg(long, default_value_t = 10)]
    group_size: usize,
    /// Directory that receives per_code.tsv and grouped.tsv
    /// (default: print both tables to stdout).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    if args.group_size == 0 {
        return Err(CliError::validation("group size must be at least 1"));
    }
    let corpus = load_corpus(&args.corpus, &args.manifest)?;

    // Score one persisted variant of one code, if it was trained.
    let score = |code: &CodeId, mode: Mode, transfer: bool| -> Result<Option<f64>, CliError> {
        let path = args.models.join(model_filename(code, mode, transfer));
        if !path.exists() {
            return Ok(None);
        }
        let params = load_model(&path).map_err(model_err)?;
        let set = binarize(&corpus, code).map_err(corpus_err)?;
        let report = encounter_f1(&params, &set).map_err(eval_err)?;
        Ok(Some(report.f1))
    };

    let mut rows = Vec::new();
    for stat in code_stats(&corpus) {
        if stat.n_encounters == 0 {
            continue;
        }
        rows.push(CodeSummaryRow {
            f1_eldn: score(&stat.code, Mode::Eldn, false)?,
            f1_eldan: score(&stat.code, Mode::Eldan, false)?,
            f1_transfer: score(&stat.code, Mode::Eldan, true)?,
            code: stat.code,
            mean_docs: stat.mean_docs,
            prevalence: stat.prevalence,
        });
    }
    let tables = report_tables(&rows, args.group_size);
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)
                .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
            write_file(&dir.join("per_code.tsv"), &tables.per_code)?;
            write_file(&dir.join("grouped.tsv"), &tables.grouped)?;
            Ok(())
        }
        None => {
            print!("{}", tables.per_code);
            println!();
            print!("{}", tables.grouped);
            Ok(())
        }
    }
}
