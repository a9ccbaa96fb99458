//! Command-line entry points.

use std::fs;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::decode::{Assistant, DecodeSettings, Session, Strategy};
use crate::error::{Error, Result};
use crate::eval::{evaluate, summary_table, EvalOptions};
use crate::kb::{weak_label, KbMode, KnowledgeBase};
use crate::model::{ModelConfig, NeuralAssistant};
use crate::server::{serve, ServiceConfig, ServiceState};
use crate::text::{build_vocab, load_dialogs, save_dialogs, Dialog, Vocabulary, DEFAULT_MAX_HISTORY};
use crate::train::{label_tokens, make_examples, TrainConfig, Trainer};

pub const CHECKPOINT_ENV: &str = "NEURAL_ASSISTANT_CHECKPOINT";

#[derive(Parser, Debug)]
#[command(name = "neural-assistant", version, about = "Train, evaluate, and serve a KB-grounded dialog model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a dialog corpus.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test corpus.
    Eval(EvalArgs),
    /// Print distant-supervision labels for every (assistant turn, triple) pair.
    Label(LabelArgs),
    /// Evaluate (and optionally train) across KB slice sizes.
    Sweep(SweepArgs),
    /// Start the HTTP session service.
    Serve(ServeArgs),
    /// Talk to a checkpoint in the terminal.
    Chat(ChatArgs),
    /// Write a synthetic corpus and KB.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_positions: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    /// TOML file with `[train]` and `[model]` tables; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// none | oracle | weak | sampled:N | full
    #[arg(long)]
    pub kb_mode: Option<KbMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub max_history: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    /// Minimum token count for the vocabulary.
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training dialogs (JSON array or JSONL).
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Output directory for checkpoints, metrics, and the vocabulary.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug, Clone)]
pub struct DecodeArgs {
    /// greedy | beam:N
    #[arg(long, default_value = "greedy")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.6)]
    pub length_penalty: f64,
}

impl DecodeArgs {
    fn settings(&self) -> DecodeSettings {
        DecodeSettings {
            strategy: self.strategy,
            max_len: self.max_len,
            length_penalty: self.length_penalty,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, env = CHECKPOINT_ENV)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Defaults to the checkpoint's training mode.
    #[arg(long)]
    pub kb_mode: Option<KbMode>,
    /// Vocabulary file the data was prepared with; must match the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the full JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args, Debug)]
pub struct LabelArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Comma-separated slice sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub kb_sizes: Vec<usize>,
    /// Test dialogs.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    /// Evaluate this checkpoint at every size instead of training.
    #[arg(long, conflicts_with = "train")]
    pub checkpoint: Option<PathBuf>,
    /// Train one model per size on this corpus.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Directory for per-size checkpoints and reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for evaluation KB slices; `--seed` seeds training.
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, env = CHECKPOINT_ENV)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long)]
    pub kb_mode: Option<KbMode>,
    #[arg(long, default_value_t = 0)]
    pub kb_seed: u64,
    #[arg(long, default_value_t = 1800)]
    pub session_ttl_secs: u64,
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args, Debug)]
pub struct ChatArgs {
    #[arg(long, env = CHECKPOINT_ENV)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub kb_mode: Option<KbMode>,
    #[arg(long, default_value_t = 0)]
    pub kb_seed: u64,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// grounding | booking
    #[arg(long, default_value = "grounding")]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 240)]
    pub subjects: usize,
    #[arg(long, default_value_t = 40)]
    pub pool: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(serde::Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    train: Option<TrainConfig>,
    model: Option<ModelConfig>,
}

fn load_kb(path: Option<&Path>) -> Result<KnowledgeBase> {
    match path {
        Some(p) => KnowledgeBase::load(p),
        None => Ok(KnowledgeBase::default()),
    }
}

impl TrainFlags {
    /// Config file values, then flag overrides.
    fn resolve(&self, vocab_size: usize) -> Result<(TrainConfig, ModelConfig)> {
        let file = match &self.config {
            Some(p) => {
                let body = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<ConfigFile>(&body).map_err(|e| Error::invalid(format!("{}: {e}", p.display())))?
            }
            None => ConfigFile::default(),
        };
        let mut t = file.train.unwrap_or_default();
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { t.$f = v; } )* };
        }
        set!(steps, batch_tokens, learning_rate, warmup_steps, alpha, kb_mode, seed, max_history, checkpoint_every, eval_every, log_every);
        if self.grad_clip.is_some() {
            t.grad_clip = self.grad_clip;
        }
        let mut m = file.model.unwrap_or_else(|| ModelConfig::tiny(vocab_size));
        m.vocab_size = vocab_size;
        let a = &self.model;
        macro_rules! setm {
            ($($f:ident),*) => { $( if let Some(v) = a.$f { m.$f = v; } )* };
        }
        setm!(d_model, layers, heads, d_ff, dropout, max_positions);
        m.alpha = t.alpha;
        t.validate()?;
        m.validate()?;
        Ok((t, m))
    }
}

fn train_model(
    train: &[Dialog],
    dev: Option<&[Dialog]>,
    kb: &KnowledgeBase,
    flags: &TrainFlags,
    out: &Path,
    resume: Option<&Path>,
) -> Result<Checkpoint<f32>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(Checkpoint::load(p)?, flags.steps)?,
        None => {
            let vocab = build_vocab(train, kb.surface_texts().collect::<Vec<_>>().iter().map(String::as_str), flags.min_count)?;
            let (mut tc, mc) = flags.resolve(vocab.len())?;
            tc.checkpoint_dir = Some(out.to_path_buf());
            tc.metrics_path = Some(out.join("metrics.csv"));
            let model = NeuralAssistant::new(mc, tc.seed)?;
            Trainer::new(model, vocab, tc)?
        }
    };
    trainer.vocab.save(&out.join("vocab.txt"))?;
    let c = trainer.config.clone();
    let kb_opt = (!kb.is_empty()).then_some(kb);
    let examples = make_examples(train, kb_opt, &trainer.vocab, c.kb_mode, c.seed, c.max_history)?;
    let dev_examples = match dev {
        Some(d) => Some(make_examples(d, kb_opt, &trainer.vocab, c.kb_mode, c.seed ^ 1, c.max_history)?),
        None => None,
    };
    log::info!("{} training examples, vocabulary of {}", examples.len(), trainer.vocab.len());
    trainer.train(&examples, dev_examples.as_deref())?;
    Ok(trainer.checkpoint())
}

fn write_out(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, body).map_err(|e| Error::io(p, e)),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn cmd_label(args: &LabelArgs) -> Result<()> {
    let dialogs = load_dialogs(&args.data)?;
    let kb = KnowledgeBase::load(&args.kb)?;
    let mut body = String::new();
    for d in &dialogs {
        for k in d.assistant_turns() {
            let target = label_tokens(&d.turns[k]);
            let labels: Vec<u8> = kb.triples().iter().map(|t| weak_label(t, &target) as u8).collect();
            body.push_str(&json!({ "dialog": d.id, "turn": k, "labels": labels }).to_string());
            body.push('\n');
        }
    }
    write_out(args.out.as_deref(), &body)
}

fn eval_opts(mode: KbMode, decode: &DecodeArgs, seed: u64, ck: &Checkpoint<f32>, expected: Option<String>) -> EvalOptions {
    EvalOptions {
        kb_mode: mode,
        decode: decode.settings(),
        seed,
        max_history: ck.train_state.as_ref().map_or(DEFAULT_MAX_HISTORY, |s| s.config.max_history),
        expected_vocab_hash: expected,
        checkpoint_step: Some(ck.step),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::<f32>::load(&args.checkpoint)?;
    let dialogs = load_dialogs(&args.data)?;
    let kb = load_kb(args.kb.as_deref())?;
    let expected = match &args.vocab {
        Some(p) => Some(Vocabulary::load(p)?.hash()),
        None => None,
    };
    let mode = args.kb_mode.unwrap_or(if kb.is_empty() { KbMode::None } else { ck.kb_mode });
    let report = evaluate(&ck.model, &ck.vocab, &dialogs, &kb, &eval_opts(mode, &args.decode, args.seed, &ck, expected))?;
    if let Some(p) = &args.report {
        fs::write(p, report.to_json()?).map_err(|e| Error::io(p, e))?;
    }
    print!("{}", summary_table(std::slice::from_ref(&report)));
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let dialogs = load_dialogs(&args.data)?;
    let kb = KnowledgeBase::load(&args.kb)?;
    let mut reports = Vec::new();
    println!("{}", crate::eval::SUMMARY_HEADER);
    for &s in &args.kb_sizes {
        let mode = KbMode::Sampled(s);
        let ck = match (&args.checkpoint, &args.train) {
            (Some(p), _) => Checkpoint::<f32>::load(p)?,
            (None, Some(train)) => {
                let out = args.out.clone().unwrap_or_else(|| PathBuf::from("sweep")).join(format!("s{s}"));
                let mut flags = args.flags.clone();
                flags.kb_mode = Some(mode);
                train_model(&load_dialogs(train)?, None, &kb, &flags, &out, None)?
            }
            (None, None) => return Err(Error::invalid("sweep needs --checkpoint or --train")),
        };
        let report = evaluate(&ck.model, &ck.vocab, &dialogs, &kb, &eval_opts(mode, &args.decode, args.eval_seed, &ck, None))?;
        println!("{}", report.summary_row());
        if let Some(dir) = &args.out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(format!("report-s{s}.json"));
            fs::write(&p, report.to_json()?).map_err(|e| Error::io(&p, e))?;
        }
        reports.push(report);
    }
    if let Some(dir) = &args.out {
        let p = dir.join("summary.txt");
        fs::write(&p, summary_table(&reports)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn load_assistant(checkpoint: &Path, kb: Option<&Path>) -> Result<(Assistant<f32>, KbMode)> {
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let kb = load_kb(kb)?;
    let max_history = ck.train_state.as_ref().map_or(DEFAULT_MAX_HISTORY, |s| s.config.max_history);
    Ok((
        Assistant {
            model: ck.model,
            vocab: ck.vocab,
            kb,
            max_history,
        },
        ck.kb_mode,
    ))
}

fn cmd_serve(args: &ServeArgs) -> Result<()> {
    let (assistant, trained_mode) = load_assistant(&args.checkpoint, args.kb.as_deref())?;
    let config = ServiceConfig {
        decode: args.decode.settings(),
        kb_mode: args.kb_mode.unwrap_or(trained_mode),
        kb_seed: args.kb_seed,
        session_ttl: Duration::from_secs(args.session_ttl_secs),
        transcript_dir: args.transcripts.clone(),
    };
    let state = ServiceState::new(assistant, config);
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io(Path::new("tokio runtime"), e))?;
    rt.block_on(serve(args.addr, state))
        .map_err(|e| Error::io(Path::new(&args.addr.to_string()), e))
}

/// Reads user lines from `input` and writes replies to `output` until EOF or `/quit`.
pub fn chat_loop<R: BufRead, W: Write>(assistant: &Assistant<f32>, session: &mut Session, input: R, mut output: W) -> Result<()> {
    let io = |e| Error::io(Path::new("terminal"), e);
    for line in input.lines() {
        let line = line.map_err(io)?;
        let text = line.trim();
        if text == "/quit" {
            break;
        }
        if text.is_empty() {
            continue;
        }
        match assistant.respond(session, text) {
            Ok(r) => {
                writeln!(output, "response: {}", r.response).map_err(io)?;
                if let Some(raw) = &r.raw_action {
                    let flag = if r.malformed_action { " (malformed)" } else { "" };
                    writeln!(output, "action: {raw}{flag}").map_err(io)?;
                }
            }
            Err(e) => writeln!(output, "error: {e}").map_err(io)?,
        }
    }
    Ok(())
}

fn cmd_chat(args: &ChatArgs) -> Result<()> {
    let (assistant, trained_mode) = load_assistant(&args.checkpoint, args.kb.as_deref())?;
    let mut session = Session::new("terminal", args.kb_mode.unwrap_or(trained_mode), args.kb_seed, args.decode.settings());
    let stdin = std::io::stdin();
    chat_loop(&assistant, &mut session, stdin.lock(), std::io::stdout())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    match args.task.as_str() {
        "grounding" => {
            let t = crate::synth::grounding_task(args.subjects, args.pool, args.seed);
            t.kb.save_tsv(&args.out.join("kb.tsv"))?;
            save_dialogs(&args.out.join("train.jsonl"), &t.train)?;
            save_dialogs(&args.out.join("test.jsonl"), &t.test)?;
        }
        "booking" => {
            let d = crate::synth::booking_dialogs(args.subjects, args.seed);
            save_dialogs(&args.out.join("train.jsonl"), &d)?;
        }
        other => return Err(Error::invalid(format!("unknown synthetic task `{other}`"))),
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let train = load_dialogs(&a.train)?;
            let dev = a.dev.as_deref().map(load_dialogs).transpose()?;
            let kb = load_kb(a.kb.as_deref())?;
            let ck = train_model(&train, dev.as_deref(), &kb, &a.flags, &a.out, a.resume.as_deref())?;
            println!("trained {} steps; checkpoint {}", ck.step, a.out.join("final.ckpt").display());
            Ok(())
        }
        Command::Eval(a) => cmd_eval(&a),
        Command::Label(a) => cmd_label(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Serve(a) => cmd_serve(&a),
        Command::Chat(a) => cmd_chat(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

/// Parses `args` and runs the command. Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
