//! The `confnet` command line. Data goes to stdout, diagnostics to stderr.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path as FsPath, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::confnet::{n_best_paths, parse_confnet_stream, prune, stats, ConfusionNetwork};
use crate::datagen::{default_ontology, generate_corpus, infer_ontology, load_corpus, save_corpus, Dialogue, NoiseModel};
use crate::embeddings::{EmbeddingTable, Vocabulary, DEFAULT_DIM};
use crate::encoder::{encode_network, EncoderParams, EncoderVariant};
use crate::error::{Error, Result};
use crate::evalbench::{aggregate_seeds, bench_inference, dump_attention, evaluate, EvalReport, Mode, DEFAULT_THRESHOLD};
use crate::model::{L1Branch, Model, Ontology};
use crate::numerics::Rng;
use crate::trainer::{corpus_vocabulary, gradient_check, init_model, train_model, Regime, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Tolerance the `gradcheck` subcommand enforces.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "confnet", version, about = "Confusion network encoders for dialogue state tracking")]
#[command(args_override_self = true)]
struct Cli {
    /// Flat key=value file whose keys mirror the subcommand's long flags.
    /// Flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Drop arcs below a score threshold (JSONL in, JSONL out).
    Prune(PruneArgs),
    /// Best paths of each network (JSONL in, one path per line out).
    Nbest(NbestArgs),
    /// Per-network summary as TSV.
    Stats,
    /// Per-position encoder output (JSONL in, JSONL out).
    Encode(EncodeArgs),
    /// Write a synthetic corpus and its ontology.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint plus report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Time inference per batch for several modes.
    Bench(BenchArgs),
    /// Attention heat map of one utterance as CSV.
    Attn(AttnArgs),
    /// Mean and standard error over evaluation reports.
    Aggregate(AggregateArgs),
    /// Finite-difference check of all gradients on a random instance.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
struct PruneArgs {
    #[arg(long, default_value_t = 0.001)]
    threshold: f64,
}

#[derive(Debug, Args, Serialize)]
struct NbestArgs {
    #[arg(short, long, default_value_t = 1)]
    n: usize,
}

#[derive(Debug, Args, Serialize)]
struct EncodeArgs {
    #[arg(long, default_value = "v1")]
    variant: EncoderVariant,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    emb_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Word vectors in text format; missing tokens get seeded random rows.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    dialogues: usize,
    #[arg(long, default_value_t = 0.5)]
    sub_prob: f64,
    #[arg(long, default_value_t = 3)]
    max_confusions: usize,
    #[arg(long, default_value_t = 0.3)]
    truth_drop: f64,
    #[arg(long, default_value_t = 4)]
    slots: usize,
    #[arg(long, default_value_t = 8)]
    values: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long, default_value = "nonaug")]
    regime: Regime,
    #[arg(long, default_value = "v1")]
    variant: EncoderVariant,
    #[arg(long, default_value_t = 5)]
    max_arcs: usize,
    #[arg(long = "asr-n", default_value_t = 5)]
    asr_n: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    emb_dim: usize,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    hidden_dim: usize,
    #[arg(long, default_value = "confnet")]
    l1_branch: L1Branch,
    #[arg(long, default_value_t = 0.001)]
    prune_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Ontology JSON; inferred from both corpora when absent.
    #[arg(long)]
    ontology: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "confnet")]
    mode: Mode,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "confnet,asr-1,asr-5,asr-9")]
    modes: Vec<Mode>,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

#[derive(Debug, Args, Serialize)]
struct AttnArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    utterance_id: String,
    /// Corpus or network JSONL; networks are read from stdin when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// CSV destination; the CSV goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct AggregateArgs {
    /// Eval or train report files.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value = "v1")]
    variant: EncoderVariant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: EXIT_DATA, message: e.to_string() }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Runs the CLI on process stdin/stdout/stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_io(argv, &mut std::io::stdin(), &mut std::io::stdout(), &mut std::io::stderr())
}

/// Runs the CLI against the given streams and returns the exit code.
pub fn run_with_io<I, T>(
    argv: I,
    stdin: &mut (dyn Read + Send),
    stdout: &mut (dyn Write + Send),
    stderr: &mut (dyn Write + Send),
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            let _ = writeln!(stderr, "error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { stderr.write_all(text.as_bytes()) } else { stdout.write_all(text.as_bytes()) };
            return code;
        }
    };
    if cli.threads == 0 {
        let _ = writeln!(stderr, "error: --threads must be at least 1");
        return EXIT_USAGE;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let result = pool.install(|| dispatch(cli.command, stdin, stdout, stderr));
    let _ = stdout.flush();
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

/// Splices `--config` file entries in as flags right after the subcommand,
/// so flags given explicitly later on the command line override them.
fn expand_config(argv: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let mut path = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut iter = argv.into_iter();
    while let Some(arg) = iter.next() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            path = Some(iter.next().ok_or("--config needs a file")?.into());
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut flags = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("config line {}: empty key", i + 1));
        }
        flags.push(OsString::from(format!("--{key}")));
        flags.push(OsString::from(value.trim()));
    }
    // position after the program name and the first non-flag argument
    let sub = rest
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, a)| !a.to_string_lossy().starts_with('-'))
        .map(|(i, _)| i + 1)
        .unwrap_or(rest.len());
    rest.splice(sub..sub, flags);
    Ok(rest)
}

fn dispatch(command: Command, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    match command {
        Command::Prune(a) => cmd_prune(&a, stdin, stdout, stderr),
        Command::Nbest(a) => cmd_nbest(&a, stdin, stdout, stderr),
        Command::Stats => cmd_stats(stdin, stdout),
        Command::Encode(a) => cmd_encode(&a, stdin, stdout, stderr),
        Command::GenData(a) => cmd_gen_data(&a, stdout),
        Command::Train(a) => cmd_train(&a, stdout, stderr),
        Command::Eval(a) => cmd_eval(&a, stdout),
        Command::Bench(a) => cmd_bench(&a, stdout),
        Command::Attn(a) => cmd_attn(&a, stdin, stdout),
        Command::Aggregate(a) => cmd_aggregate(&a, stdout),
        Command::Gradcheck(a) => cmd_gradcheck(&a, stdout),
    }
}

fn read_networks(stdin: &mut dyn Read) -> Result<Vec<ConfusionNetwork>> {
    let mut text = String::new();
    stdin
        .read_to_string(&mut text)
        .map_err(|e| Error::Parse(format!("reading stdin: {e}")))?;
    parse_confnet_stream(&text)
}

/// Stream commands write JSONL, so their resolved config goes to stderr.
fn echo_config(stderr: &mut dyn Write, name: &str, args: &impl Serialize) -> CmdResult {
    let line = json!({ "command": name, "config": args });
    writeln!(stderr, "{line}")?;
    Ok(())
}

fn emit(stdout: &mut dyn Write, value: &Value) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    writeln!(stdout, "{text}")?;
    Ok(())
}

fn cmd_prune(a: &PruneArgs, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    echo_config(stderr, "prune", a)?;
    for net in read_networks(stdin)? {
        writeln!(stdout, "{}", prune(&net, a.threshold)?.to_json())?;
    }
    Ok(())
}

fn cmd_nbest(a: &NbestArgs, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    echo_config(stderr, "nbest", a)?;
    if a.n == 0 {
        return Err(Error::Invalid("-n must be at least 1".into()).into());
    }
    for net in read_networks(stdin)? {
        for (rank, path) in n_best_paths(&net, a.n).iter().enumerate() {
            let line = json!({
                "utterance_id": net.utterance_id,
                "rank": rank + 1,
                "tokens": path.tokens,
                "score": path.score,
            });
            writeln!(stdout, "{line}")?;
        }
    }
    Ok(())
}

fn cmd_stats(stdin: &mut dyn Read, stdout: &mut dyn Write) -> CmdResult {
    writeln!(stdout, "utterance_id\tpositions\tarcs\tmax_width\tepsilon_arcs\tlog10_paths\tbest_score")?;
    for net in read_networks(stdin)? {
        let s = stats(&net);
        writeln!(
            stdout,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.utterance_id, s.positions, s.arcs, s.max_width, s.epsilon_arcs, s.log10_paths, s.best_score
        )?;
    }
    Ok(())
}

fn cmd_encode(a: &EncodeArgs, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    echo_config(stderr, "encode", a)?;
    let nets = read_networks(stdin)?;
    let vocab = Vocabulary::sorted(
        nets.iter()
            .flat_map(|n| n.positions())
            .flat_map(|p| p.iter().map(|arc| arc.token.clone())),
    );
    let mut root = Rng::new(a.seed);
    let mut table_rng = root.fork();
    let mut enc_rng = root.fork();
    let table = match &a.embeddings {
        Some(path) => EmbeddingTable::load(path, vocab, a.emb_dim, &mut table_rng)?,
        None => EmbeddingTable::build(vocab, a.emb_dim, &mut table_rng)?,
    };
    let params = EncoderParams::init(a.variant, a.emb_dim, &mut enc_rng);
    for net in &nets {
        let encs = encode_network(&params, &table, net)?;
        let embeddings: Vec<&[f64]> = encs.iter().map(|e| &e.embedding[..]).collect();
        let mut line = json!({ "utterance_id": net.utterance_id, "embeddings": embeddings });
        if a.variant.has_attention() {
            let att: Vec<&[f64]> = encs.iter().filter_map(|e| e.attention.as_deref()).collect();
            line["attention"] = json!(att);
        }
        writeln!(stdout, "{line}")?;
    }
    Ok(())
}

/// `<out>` with its extension replaced by `suffix`.
fn sibling(out: &FsPath, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_gen_data(a: &GenDataArgs, stdout: &mut dyn Write) -> CmdResult {
    let ontology = default_ontology(a.slots, a.values)?;
    let noise = NoiseModel {
        substitution_prob: a.sub_prob,
        max_confusions: a.max_confusions,
        truth_drop_prob: a.truth_drop,
    };
    let corpus = generate_corpus(&ontology, a.dialogues, &noise, &mut Rng::new(a.seed))?;
    save_corpus(&corpus, &a.out)?;
    let ontology_path = sibling(&a.out, ".ontology.json");
    write_json_file(&ontology_path, &ontology)?;
    let turns: usize = corpus.iter().map(|d| d.turns.len()).sum();
    emit(
        stdout,
        &json!({
            "command": "gen-data",
            "config": a,
            "dialogues": corpus.len(),
            "turns": turns,
            "ontology": ontology_path,
        }),
    )
}

fn write_json_file(path: &FsPath, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &FsPath) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn resolve_ontology(path: Option<&FsPath>, corpora: [&[Dialogue]; 2]) -> Result<Ontology> {
    match path {
        Some(p) => read_json_file(p),
        None => infer_ontology(corpora),
    }
}

fn cmd_train(a: &TrainArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    let config = TrainConfig {
        regime: a.regime,
        variant: a.variant,
        max_arcs: a.max_arcs,
        asr_list_size: a.asr_n,
        learning_rate: a.lr,
        batch_size: a.batch,
        dropout: a.dropout,
        lambda: a.lambda,
        epochs: a.epochs,
        seed: a.seed,
        emb_dim: a.emb_dim,
        hidden_dim: a.hidden_dim,
        l1_branch: a.l1_branch,
        prune_threshold: a.prune_threshold,
        decision_threshold: a.threshold,
    };
    config.validate()?;
    let train = load_corpus(&a.train)?;
    let dev = load_corpus(&a.dev)?;
    let ontology = resolve_ontology(a.ontology.as_deref(), [train.as_slice(), dev.as_slice()])?;
    let vocab = corpus_vocabulary([train.as_slice(), dev.as_slice()]);
    let mut root = Rng::new(config.seed);
    let mut table_rng = root.fork();
    let table = match &a.embeddings {
        Some(path) => EmbeddingTable::load(path, vocab, config.emb_dim, &mut table_rng)?,
        None => EmbeddingTable::build(vocab, config.emb_dim, &mut table_rng)?,
    };
    let model = init_model(&config, ontology, table);
    let (mut report, best) = train_model(&config, model, &train, &dev)?;
    best.save(&a.out)?;
    report.checkpoint = Some(a.out.display().to_string());
    let report_path = sibling(&a.out, ".report.json");
    write_json_file(&report_path, &report)?;
    writeln!(
        stderr,
        "trained {} epochs, best epoch {} (dev joint goal {:.4})",
        config.epochs, report.best_epoch, report.best_dev.joint_goal
    )?;
    emit(stdout, &json!({ "command": "train", "config": a, "report": report }))
}

fn cmd_eval(a: &EvalArgs, stdout: &mut dyn Write) -> CmdResult {
    let model = Model::load(&a.ckpt)?;
    let corpus = load_corpus(&a.data)?;
    let report = evaluate(&model, &corpus, a.mode, a.threshold)?;
    let mut out = serde_json::to_value(&report).map_err(Error::from)?;
    out["command"] = json!("eval");
    out["config"] = json!(a);
    emit(stdout, &out)
}

fn cmd_bench(a: &BenchArgs, stdout: &mut dyn Write) -> CmdResult {
    let model = Model::load(&a.ckpt)?;
    let corpus = load_corpus(&a.data)?;
    let timing = bench_inference(&model, &corpus, &a.modes, a.batch, a.reps)?;
    let turns: usize = corpus.iter().map(|d| d.turns.len()).sum();
    emit(
        stdout,
        &json!({ "command": "bench", "config": a, "turns": turns, "timing": timing }),
    )
}

fn find_network(a: &AttnArgs, stdin: &mut dyn Read) -> Result<ConfusionNetwork> {
    let text = match &a.data {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => {
            let mut t = String::new();
            stdin
                .read_to_string(&mut t)
                .map_err(|e| Error::Parse(format!("reading stdin: {e}")))?;
            t
        }
    };
    let nets = match parse_confnet_stream(&text) {
        Ok(n) => n,
        Err(_) => crate::datagen::parse_corpus(&text)?
            .into_iter()
            .flat_map(|d| d.turns)
            .map(|t| t.confnet)
            .collect(),
    };
    nets.into_iter()
        .find(|n| n.utterance_id == a.utterance_id)
        .ok_or_else(|| Error::Invalid(format!("utterance {:?} not found", a.utterance_id)))
}

fn cmd_attn(a: &AttnArgs, stdin: &mut dyn Read, stdout: &mut dyn Write) -> CmdResult {
    let model = Model::load(&a.ckpt)?;
    let net = find_network(a, stdin)?;
    let csv = dump_attention(&model, &net)?.to_csv();
    match &a.out {
        Some(path) => {
            std::fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
            emit(
                stdout,
                &json!({ "command": "attn", "config": a, "positions": net.len(), "out": path }),
            )
        }
        None => Ok(stdout.write_all(csv.as_bytes())?),
    }
}

/// Accepts eval output directly or a train report (its best dev metrics).
fn report_from_file(path: &FsPath) -> Result<EvalReport> {
    let value: Value = read_json_file(path)?;
    let inner = if value.get("joint_goal").is_some() {
        value
    } else if let Some(best) = value.get("best_dev").or_else(|| value.pointer("/report/best_dev")) {
        best.clone()
    } else {
        return Err(Error::Parse(format!("{}: not an eval or train report", path.display())));
    };
    Ok(serde_json::from_value(inner)?)
}

fn cmd_aggregate(a: &AggregateArgs, stdout: &mut dyn Write) -> CmdResult {
    let reports = a
        .reports
        .iter()
        .map(|p| report_from_file(p))
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate_seeds(&reports)?;
    let mut out = serde_json::to_value(&agg).map_err(Error::from)?;
    out["command"] = json!("aggregate");
    out["config"] = json!(a);
    emit(stdout, &out)
}

fn cmd_gradcheck(a: &GradcheckArgs, stdout: &mut dyn Write) -> CmdResult {
    let report = gradient_check(a.variant, a.seed, a.dim, a.hidden)?;
    let pass = report.max_rel_err < GRADCHECK_TOLERANCE;
    let mut out = serde_json::to_value(&report).map_err(Error::from)?;
    out["command"] = json!("gradcheck");
    out["config"] = json!(a);
    out["tolerance"] = json!(GRADCHECK_TOLERANCE);
    out["pass"] = json!(pass);
    emit(stdout, &out)?;
    if pass {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("max relative error {:e} exceeds {GRADCHECK_TOLERANCE:e}", report.max_rel_err),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str], input: &str) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with_io(
            std::iter::once("confnet").chain(args.iter().copied()),
            &mut input.as_bytes(),
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    const TWO_BY_TWO: &str = r#"{"utterance_id":"u1","positions":[[{"token":"a","score":0.6},{"token":"b","score":0.4}],[{"token":"c","score":0.7},{"token":"d","score":0.3}]]}"#;

    #[test]
    fn nbest_on_two_by_two() {
        let (code, out, _) = run_str(&["nbest", "-n", "3"], TWO_BY_TWO);
        assert_eq!(code, 0);
        let lines: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        let toks: Vec<String> = lines.iter().map(|l| l["tokens"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect::<Vec<_>>().join(" ")).collect();
        assert_eq!(toks, ["a c", "b c", "a d"]);
        assert!((lines[0]["score"].as_f64().unwrap() - 0.42).abs() < 1e-12);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run_str(&["nbest", "--bogus"], "").0, EXIT_USAGE);
        assert_eq!(run_str(&[], "").0, EXIT_USAGE);
        assert_eq!(run_str(&["--help"], "").0, EXIT_OK);
        assert_eq!(run_str(&["prune"], "{not json").0, EXIT_DATA);
        assert_eq!(run_str(&["gradcheck", "--variant", "v4", "--seed", "7"], "").0, EXIT_OK);
    }

    #[test]
    fn config_file_is_overridden_by_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.conf");
        std::fs::write(&cfg, "# comment\nn = 4\n").unwrap();
        let c = cfg.to_str().unwrap();
        let (_, out, _) = run_str(&["nbest", "--config", c], TWO_BY_TWO);
        assert_eq!(out.lines().count(), 4);
        let (_, out, _) = run_str(&["--config", c, "nbest", "-n", "2"], TWO_BY_TWO);
        assert_eq!(out.lines().count(), 2);
        std::fs::write(&cfg, "unknown_key = 1\n").unwrap();
        assert_eq!(run_str(&["nbest", "--config", c], TWO_BY_TWO).0, EXIT_USAGE);
    }

    #[test]
    fn numerical_errors_map_to_exit_three() {
        assert_eq!(Failure::from(Error::NonFinite("loss".into())).code, EXIT_NUMERIC);
        assert_eq!(Failure::from(Error::Invalid("x".into())).code, EXIT_DATA);
    }

    #[test]
    fn stats_is_tsv() {
        let (code, out, _) = run_str(&["stats"], TWO_BY_TWO);
        assert_eq!(code, 0);
        let rows: Vec<&str> = out.lines().collect();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].starts_with("u1\t2\t4\t2\t0\t"));
    }
}
