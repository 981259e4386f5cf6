//! Command-line front end. `run` never panics on bad input; it reports on
//! stderr and returns the process exit code.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint;
use crate::config::Config;
use crate::embedding::Vocab;
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::kb::KnowledgeBase;
use crate::model::ModelParams;
use crate::synth::{kb_to_tsv, make_synthetic, SynthConfig};
use crate::task::{build_vocab, evaluate_prepared, predict_prepared, prepare_all, Dataset, Knowledge, CANDIDATES};
use crate::train::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "kvlbert", version, about = "Knowledge-enriched visual-linguistic scorer")]
struct Cli {
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a knowledge-base TSV and report rejected lines.
    Ingest {
        #[arg(long)]
        kb: PathBuf,
    },
    /// Write a seeded synthetic task (kb.tsv, stoplist.txt, train.jsonl, eval.jsonl).
    Synth {
        #[arg(long, default_value_t = 4000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        eval: usize,
        #[arg(long, default_value_t = 20)]
        answers: usize,
        #[arg(long, default_value_t = 2000)]
        context_words: usize,
        #[arg(long)]
        d_app: Option<usize>,
    },
    /// Emit enriched sequences with their visible matrices.
    Transform {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        over: Overrides,
    },
    /// Score every candidate of every instance.
    Forward {
        #[command(flatten)]
        data: DataArgs,
        /// Trained checkpoint; without it a seeded random model is used.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        over: Overrides,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Train a model; writes model.ckpt, vocab.txt, metrics.jsonl and config.json.
    Train {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long = "train")]
        train_set: PathBuf,
        #[arg(long = "eval")]
        eval_set: Option<PathBuf>,
        #[command(flatten)]
        over: Overrides,
    },
    /// Accuracy metrics of a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        over: Overrides,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    kb: PathBuf,
    /// Instances, one JSON object per line.
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Debug, Args, Default)]
struct Overrides {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    mask_off: bool,
    #[arg(long)]
    absolute_pos: bool,
    #[arg(long)]
    stoplist: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    d_app: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
    #[arg(long)]
    init_gain: Option<f64>,
    #[arg(long)]
    embed_init: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

impl Overrides {
    fn apply(&self, c: &mut Config) {
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(k => k, d => model.d, heads => model.heads, layers => model.layers, d_ff => model.d_ff,
             d_app => model.d_app, max_seq => model.max_seq, init_gain => model.init_gain,
             embed_init => model.embed_init,
             lr => train.lr, momentum => train.momentum, weight_decay => train.weight_decay,
             epochs => train.epochs, batch_size => train.batch_size);
        if let Some(v) = self.clip_norm {
            c.train.clip_norm = Some(v);
        }
        if let Some(p) = &self.stoplist {
            c.stoplist = Some(p.clone());
        }
        c.mask_off |= self.mask_off;
        c.absolute_pos |= self.absolute_pos;
    }
}

/// Maps an error to the documented exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { stderr.write_all(text.as_bytes()) } else { stdout.write_all(text.as_bytes()) };
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match dispatch(&cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    config: Config,
    /// Whether the config file pins `model.d_app`.
    file_sets_d_app: bool,
}

impl Ctx<'_> {
    fn with(&self, over: &Overrides) -> Result<Config> {
        let mut c = self.config.clone();
        over.apply(&mut c);
        if let Some(s) = self.cli.seed {
            c.train.seed = s;
        }
        c.validate()?;
        Ok(c)
    }

    fn seed(&self) -> u64 {
        self.cli.seed.unwrap_or(self.config.train.seed)
    }
}

fn dispatch(cli: &Cli, stdout: &mut dyn Write) -> Result<i32> {
    let (config, file_sets_d_app) = match &cli.config {
        None => (Config::default(), false),
        Some(p) => {
            let c = Config::load(p)?;
            let raw: Value = serde_json::from_str(&fs::read_to_string(p).map_err(|e| Error::file(p, e))?)?;
            (c, raw.pointer("/model/d_app").is_some())
        }
    };
    let ctx = Ctx { cli, config, file_sets_d_app };
    match &cli.command {
        Command::Ingest { kb } => ingest(&ctx, kb, stdout),
        Command::Synth { train, eval, answers, context_words, d_app } => {
            let cfg = SynthConfig {
                seed: ctx.seed(),
                train: *train,
                eval: *eval,
                answers: *answers,
                context_words: *context_words,
                d_app: d_app.unwrap_or(ctx.config.model.d_app),
                ..Default::default()
            };
            synth(&ctx, &cfg, stdout)
        }
        Command::Transform { data, over } => transform(&ctx, data, over, stdout),
        Command::Forward { data, ckpt, over } => forward(&ctx, data, ckpt.as_deref(), over, stdout),
        Command::Gradcheck { samples } => gradcheck_cmd(&ctx, *samples, stdout),
        Command::Train { kb, train_set, eval_set, over } => train_cmd(&ctx, kb, train_set, eval_set.as_deref(), over, stdout),
        Command::Eval { data, ckpt, over } => eval_cmd(&ctx, data, ckpt, over, stdout),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::file(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::file(path, e))
}

fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    Ok(KnowledgeBase::ingest(open(path)?)?.0)
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::read_jsonl(open(path)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush().map_err(|e| Error::file(path, e))
}

fn emit(ctx: &Ctx, stdout: &mut dyn Write, summary: &Value, human: &str) -> Result<()> {
    if ctx.cli.json {
        writeln!(stdout, "{}", serde_json::to_string(summary)?)?;
    } else if !human.is_empty() {
        writeln!(stdout, "{human}")?;
    }
    Ok(())
}

/// Appearance width: flag, then config file, then the first instance.
fn resolve_d_app(ctx: &Ctx, over: &Overrides, cfg: &mut Config, data: &Dataset) {
    if over.d_app.is_none() && !ctx.file_sets_d_app {
        if let Some(r) = data.instances.first().and_then(|i| i.regions.first()) {
            cfg.model.d_app = r.appearance.len().max(1);
        }
    }
}

fn ingest(ctx: &Ctx, path: &Path, stdout: &mut dyn Write) -> Result<i32> {
    let (kb, report) = KnowledgeBase::ingest(open(path)?)?;
    if let Some(out) = &ctx.cli.out {
        let mut w = create(out)?;
        w.write_all(kb_to_tsv(&kb).as_bytes())?;
        w.flush().map_err(|e| Error::file(out, e))?;
    }
    let summary = json!({
        "accepted": report.accepted,
        "rejected": report.rejected.iter().map(|r| json!({"line": r.line, "reason": r.reason})).collect::<Vec<_>>(),
        "concepts": kb.concepts().count(),
    });
    let mut human = format!("{} facts accepted, {} lines rejected", report.accepted, report.rejected.len());
    for r in &report.rejected {
        human.push_str(&format!("\n  line {}: {}", r.line, r.reason));
    }
    emit(ctx, stdout, &summary, &human)?;
    Ok(EXIT_OK)
}

fn synth(ctx: &Ctx, cfg: &SynthConfig, stdout: &mut dyn Write) -> Result<i32> {
    let dir = ctx.cli.out.clone().ok_or_else(|| Error::Config("synth needs --out DIR".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    let syn = make_synthetic(cfg);
    let files = ["kb.tsv", "stoplist.txt", "train.jsonl", "eval.jsonl"].map(|f| dir.join(f));
    fs::write(&files[0], kb_to_tsv(&syn.kb)).map_err(|e| Error::file(&files[0], e))?;
    let mut stop = String::new();
    for w in crate::kb::DEFAULT_STOPWORDS.iter().copied().chain(syn.stoplist_words.iter().map(String::as_str)) {
        stop.push_str(w);
        stop.push('\n');
    }
    fs::write(&files[1], stop).map_err(|e| Error::file(&files[1], e))?;
    for (ds, path) in [(&syn.train, &files[2]), (&syn.eval, &files[3])] {
        let mut w = create(path)?;
        ds.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::file(path, e))?;
    }
    let summary = json!({
        "train": syn.train.len(),
        "eval": syn.eval.len(),
        "facts": syn.kb.len(),
        "files": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    let human = format!("wrote {} train / {} eval instances and {} facts to {}", syn.train.len(), syn.eval.len(), syn.kb.len(), dir.display());
    emit(ctx, stdout, &summary, &human)?;
    Ok(EXIT_OK)
}

fn knowledge(cfg: &Config, kb: KnowledgeBase) -> Result<Knowledge> {
    Ok(Knowledge { kb, stoplist: cfg.read_stoplist()?, opts: cfg.injection() })
}

fn transform(ctx: &Ctx, args: &DataArgs, over: &Overrides, stdout: &mut dyn Write) -> Result<i32> {
    let mut cfg = ctx.with(over)?;
    let data = load_data(&args.input)?;
    resolve_d_app(ctx, over, &mut cfg, &data);
    let know = knowledge(&cfg, load_kb(&args.kb)?)?;
    let mut docs = Vec::new();
    for inst in &data.instances {
        for c in 0..CANDIDATES {
            let seq = know.enrich(inst, c, cfg.model.d_app)?;
            let mut v = serde_json::to_value(seq.to_json())?;
            v["id"] = json!(inst.id);
            v["candidate"] = json!(c);
            docs.push(v);
        }
    }
    match &ctx.cli.out {
        Some(out) => {
            write_json(out, &docs)?;
            let summary = json!({"instances": data.len(), "sequences": docs.len(), "out": out.display().to_string()});
            emit(ctx, stdout, &summary, &format!("wrote {} sequences to {}", docs.len(), out.display()))?;
        }
        None => writeln!(stdout, "{}", serde_json::to_string_pretty(&docs)?)?,
    }
    Ok(EXIT_OK)
}

fn model_for(ctx: &Ctx, cfg: &Config, ckpt: Option<&Path>, kb: &KnowledgeBase, data: &Dataset) -> Result<(ModelParams, Vocab)> {
    match ckpt {
        Some(p) => checkpoint::load(p),
        None => {
            let vocab = build_vocab(kb, &data.instances);
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed());
            Ok((ModelParams::init(&cfg.model, vocab.rows(), &mut rng)?, vocab))
        }
    }
}

fn forward(ctx: &Ctx, args: &DataArgs, ckpt: Option<&Path>, over: &Overrides, stdout: &mut dyn Write) -> Result<i32> {
    let mut cfg = ctx.with(over)?;
    let data = load_data(&args.input)?;
    resolve_d_app(ctx, over, &mut cfg, &data);
    let kb = load_kb(&args.kb)?;
    let (params, vocab) = model_for(ctx, &cfg, ckpt, &kb, &data)?;
    let know = knowledge(&cfg, kb)?;
    let prepared = prepare_all(&data.instances, &know, &vocab, &params.config)?;
    let mut rows = Vec::with_capacity(prepared.len());
    for p in &prepared {
        let sv = predict_prepared(p, &params)?;
        rows.push(json!({"id": p.id, "scores": sv.scores, "probs": sv.probs, "predicted": sv.argmax()}));
    }
    if let Some(out) = &ctx.cli.out {
        write_json(out, &rows)?;
    }
    let mut human = String::new();
    for r in &rows {
        human.push_str(&format!("{} -> {} {}\n", r["id"].as_str().unwrap_or(""), r["predicted"], r["scores"]));
    }
    emit(ctx, stdout, &json!({ "instances": rows }), human.trim_end())?;
    Ok(EXIT_OK)
}

fn gradcheck_cmd(ctx: &Ctx, samples: usize, stdout: &mut dyn Write) -> Result<i32> {
    let report = gradcheck::gradient_check(ctx.seed(), samples)?;
    let human = format!(
        "checked {} parameters: max relative error {:.3e} at {} ({})",
        report.checked,
        report.max_rel_err,
        report.worst,
        if report.pass { "ok" } else { "FAILED" }
    );
    emit(ctx, stdout, &serde_json::to_value(&report)?, &human)?;
    Ok(if report.pass { EXIT_OK } else { EXIT_CHECK })
}

fn train_cmd(
    ctx: &Ctx,
    kb_path: &Path,
    train_path: &Path,
    eval_path: Option<&Path>,
    over: &Overrides,
    stdout: &mut dyn Write,
) -> Result<i32> {
    let dir = ctx.cli.out.clone().ok_or_else(|| Error::Config("train needs --out DIR".into()))?;
    let mut cfg = ctx.with(over)?;
    let train_set = load_data(train_path)?;
    resolve_d_app(ctx, over, &mut cfg, &train_set);
    let eval_set = eval_path.map(load_data).transpose()?;
    let know = knowledge(&cfg, load_kb(kb_path)?)?;
    let vocab = build_vocab(&know.kb, &train_set.instances);
    let tr = prepare_all(&train_set.instances, &know, &vocab, &cfg.model)?;
    let ev = eval_set
        .as_ref()
        .map(|d| prepare_all(&d.instances, &know, &vocab, &cfg.model))
        .transpose()?;

    fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut log = create(&metrics_path)?;
    let json_mode = ctx.cli.json;
    let trained = train(&cfg.model, &cfg.train, vocab.rows(), &tr, ev.as_deref(), |rec| {
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
        log.flush().map_err(|e| Error::file(&metrics_path, e))?;
        if !json_mode {
            let acc = rec.acc_qa.or(rec.acc_qar_given).map_or("-".to_string(), |a| format!("{a:.4}"));
            writeln!(stdout, "epoch {:>3}  loss {:.4}  acc {acc}", rec.epoch, rec.loss)?;
        }
        Ok(())
    })?;
    let ckpt_path = dir.join("model.ckpt");
    checkpoint::save(&ckpt_path, &trained.params, &vocab)?;
    let vocab_path = dir.join("vocab.txt");
    let mut w = create(&vocab_path)?;
    vocab.write(&mut w)?;
    w.flush().map_err(|e| Error::file(&vocab_path, e))?;
    write_json(&dir.join("config.json"), &cfg)?;
    if json_mode {
        let summary = json!({
            "epochs": trained.log,
            "checkpoint": ckpt_path.display().to_string(),
            "metrics": metrics_path.display().to_string(),
        });
        writeln!(stdout, "{}", serde_json::to_string(&summary)?)?;
    } else {
        writeln!(stdout, "saved {}", ckpt_path.display())?;
    }
    Ok(EXIT_OK)
}

fn eval_cmd(ctx: &Ctx, args: &DataArgs, ckpt: &Path, over: &Overrides, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = ctx.with(over)?;
    let data = load_data(&args.input)?;
    let (params, vocab) = checkpoint::load(ckpt)?;
    let know = knowledge(&cfg, load_kb(&args.kb)?)?;
    let prepared = prepare_all(&data.instances, &know, &vocab, &params.config)?;
    let result = evaluate_prepared(&prepared, &params)?;
    if let Some(out) = &ctx.cli.out {
        let mut w = create(out)?;
        for p in &result.predictions {
            writeln!(w, "{}", serde_json::to_string(p)?)?;
        }
        w.flush().map_err(|e| Error::file(out, e))?;
    }
    let m = &result.metrics;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    let mut human = format!(
        "acc_QA {}  acc_QAR_given {}  acc_joint {}",
        fmt(m.acc_qa),
        fmt(m.acc_qar_given),
        fmt(m.acc_joint)
    );
    if !m.unpaired.is_empty() {
        human.push_str(&format!("\n{} unpaired ids excluded from the joint metric", m.unpaired.len()));
    }
    emit(ctx, stdout, &serde_json::to_value(m)?, &human)?;
    Ok(EXIT_OK)
}
