use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use codesum::align::build_match_map;
use codesum::checkpoint::Checkpoint;
use codesum::corpus::{load_dataset, split_dataset, tokenize_code, write_dataset, Sample, Vocab};
use codesum::fusion::FusionMode;
use codesum::gradcheck::{run_suite, TOLERANCE};
use codesum::metrics::score_corpus;
use codesum::model::{prepare, Model};
use codesum::par;
use codesum::trainer::{build_vocabs, prepare_all, train, EpochRecord, TrainConfig};
use codesum::Error;

const USAGE: u8 = 2;
const DATA: u8 = 3;
const CHECKPOINT: u8 = 4;
const NUMERIC: u8 = 5;

#[derive(Parser)]
#[command(name = "codesum", version, about = "Train and run an AST/token fusion code summarizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset, split it and build vocabularies.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on a preprocessed directory and write the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log (defaults to `<out>.log.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate summaries for a dataset.
    Summarize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Beam width; 1 is greedy. Defaults to the checkpoint's setting.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score predictions against references.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the leaf-to-token match map of one sample.
    Match {
        #[arg(long)]
        input: PathBuf,
        /// Sample id; the first sample when omitted.
        #[arg(long)]
        id: Option<String>,
    },
    /// Finite-difference check of every layer and the full model.
    Gradcheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

/// Flags mirroring config keys; they override values from `--config`.
#[derive(Args, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fusion_mode: Option<FusionMode>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_k: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    gcn_layers: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    max_sum_len: Option<usize>,
    #[arg(long)]
    vocab_cap: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long, conflicts_with = "no_clip")]
    clip_norm: Option<f64>,
    /// Disable gradient clipping.
    #[arg(long)]
    no_clip: bool,
    #[arg(long)]
    target_train_loss: Option<f64>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => USAGE,
            Error::Checkpoint(_) | Error::CorruptCheckpoint(_) => CHECKPOINT,
            Error::Numeric(_) => NUMERIC,
            Error::Shape { .. } | Error::Ast(_) | Error::Data(_) | Error::Io { .. } | Error::Json(_) => DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> Outcome<()> {
    match cmd {
        Command::Preprocess { input, out, cfg } => preprocess(&input, &out, &resolve(&cfg)?),
        Command::Train { data, out, log, cfg } => train_cmd(&data, &out, log, &resolve(&cfg)?),
        Command::Summarize {
            checkpoint,
            input,
            out,
            beam,
        } => summarize(&checkpoint, &input, &out, beam),
        Command::Evaluate { predictions, out } => evaluate(&predictions, out.as_deref()),
        Command::Match { input, id } => match_cmd(&input, id.as_deref()),
        Command::Gradcheck { seed } => gradcheck(seed),
    }
}

/// Defaults, then the config file, then explicit flags.
fn resolve(a: &ConfigArgs) -> Outcome<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| fail(USAGE, format!("{}: {e}", p.display())))?;
            TrainConfig::from_json(&text).map_err(|e| fail(USAGE, format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! apply {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { c.$f = v; })* };
    }
    apply!(lr, batch_size, dropout, max_epochs, patience, seed, fusion_mode, d_model, heads, d_k, d_ff, layers, gcn_layers, max_len, max_sum_len, vocab_cap, beam);
    if let Some(v) = a.clip_norm {
        c.clip_norm = Some(v);
    }
    if a.no_clip {
        c.clip_norm = None;
    }
    if let Some(v) = a.target_train_loss {
        c.target_train_loss = Some(v);
    }
    c.validate()?;
    Ok(c)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome<()> {
    fs::write(path, bytes).map_err(|e| fail(DATA, format!("{}: {e}", path.display())))
}

fn preprocess(input: &Path, out: &Path, cfg: &TrainConfig) -> Outcome<()> {
    let samples = load_dataset(input)?;
    for s in &samples {
        s.ast()?
            .validate()
            .map_err(|e| fail(DATA, format!("sample {}: {e}", s.id)))?;
    }
    let n = samples.len();
    let split = split_dataset(samples, cfg.split, cfg.seed)?;
    if split.train.is_empty() || split.valid.is_empty() {
        return Err(fail(DATA, format!("{n} samples are too few for a train/valid split")));
    }
    let (cv, sv) = build_vocabs(&split.train, cfg.vocab_cap);
    fs::create_dir_all(out).map_err(|e| fail(DATA, format!("{}: {e}", out.display())))?;
    write_dataset(&out.join("train.jsonl"), &split.train)?;
    write_dataset(&out.join("valid.jsonl"), &split.valid)?;
    write_dataset(&out.join("test.jsonl"), &split.test)?;
    cv.save(&out.join("code_vocab.json"))?;
    sv.save(&out.join("summary_vocab.json"))?;
    let report = json!({
        "samples": n,
        "train": split.train.len(),
        "valid": split.valid.len(),
        "test": split.test.len(),
        "code_vocab": cv.len(),
        "summary_vocab": sv.len(),
    });
    write(&out.join("preprocess.json"), format!("{report:#}\n"))?;
    println!("{report}");
    Ok(())
}

fn train_cmd(data: &Path, out: &Path, log: Option<PathBuf>, cfg: &TrainConfig) -> Outcome<()> {
    let cv = Vocab::load(&data.join("code_vocab.json"))?;
    let sv = Vocab::load(&data.join("summary_vocab.json"))?;
    let mc = cfg.model();
    let train_set = prepare_all(&load_dataset(&data.join("train.jsonl"))?, &cv, &sv, &mc)?;
    let valid_set = prepare_all(&load_dataset(&data.join("valid.jsonl"))?, &cv, &sv, &mc)?;
    let log_path = log.unwrap_or_else(|| PathBuf::from(format!("{}.log.csv", out.display())));
    let mut log = fs::File::create(&log_path).map_err(|e| fail(DATA, format!("{}: {e}", log_path.display())))?;
    writeln!(log, "{}", EpochRecord::CSV_HEADER).map_err(|e| fail(DATA, e.to_string()))?;

    let model = Model::new(mc, cv.len(), sv.len(), cfg.seed)?;
    let mut io_err = None;
    let outcome = train(model, &train_set, &valid_set, cfg, |r| {
        eprintln!("epoch {:>4}  train {:.4}  valid {:.4}", r.epoch, r.train_loss, r.valid_loss);
        if let Err(e) = r.write_csv(&mut log) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(fail(DATA, format!("{}: {e}", log_path.display())));
    }
    let ckpt = Checkpoint::from_model(&outcome.best, cfg, &cv, &sv, outcome.best_epoch, outcome.best_valid);
    ckpt.save(out).map_err(|e| fail(CHECKPOINT, e.to_string()))?;
    println!(
        "{}",
        json!({"best_epoch": outcome.best_epoch, "best_valid_loss": outcome.best_valid, "epochs": outcome.history.len()})
    );
    Ok(())
}

fn summarize(checkpoint: &Path, input: &Path, out: &Path, beam: Option<usize>) -> Outcome<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let beam = beam.unwrap_or(ckpt.config.beam);
    if beam == 0 {
        return Err(fail(USAGE, "--beam must be at least 1"));
    }
    let samples = load_dataset(input)?;
    let prepared: Vec<_> = samples
        .iter()
        .map(|s| prepare(s, &ckpt.code_vocab, &ckpt.summary_vocab, &model.cfg))
        .collect::<Result<_, _>>()?;
    let hyps = par::map(&prepared, |p| model.summarize(p, beam));
    let mut buf = String::new();
    for (p, h) in prepared.iter().zip(hyps) {
        let h = h?;
        let line = json!({
            "id": p.id,
            "prediction": ckpt.summary_vocab.decode(&h.tokens).join(" "),
            "reference": p.reference.join(" "),
        });
        buf.push_str(&line.to_string());
        buf.push('\n');
    }
    write(out, buf)
}

fn evaluate(predictions: &Path, out: Option<&Path>) -> Outcome<()> {
    let text = fs::read_to_string(predictions).map_err(|e| fail(DATA, format!("{}: {e}", predictions.display())))?;
    let (mut cands, mut refs) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| fail(DATA, format!("{}:{}: {e}", predictions.display(), i + 1)))?;
        let field = |k: &str| -> Outcome<Vec<String>> {
            v.get(k)
                .and_then(|x| x.as_str())
                .map(|s| s.split_whitespace().map(str::to_string).collect())
                .ok_or_else(|| fail(DATA, format!("{}:{}: missing string field `{k}`", predictions.display(), i + 1)))
        };
        cands.push(field("prediction")?);
        refs.push(field("reference")?);
    }
    let report = score_corpus(&cands, &refs)?;
    print!("{}", report.table());
    if let Some(p) = out {
        let js = serde_json::to_string_pretty(&report).map_err(|e| fail(DATA, e.to_string()))?;
        write(p, js + "\n")?;
    }
    Ok(())
}

fn match_cmd(input: &Path, id: Option<&str>) -> Outcome<()> {
    let samples = load_dataset(input)?;
    let sample: &Sample = match id {
        Some(id) => samples.iter().find(|s| s.id == id).ok_or_else(|| fail(DATA, format!("no sample with id {id}")))?,
        None => samples.first().ok_or_else(|| fail(DATA, "dataset is empty"))?,
    };
    let ast = sample.ast()?.validate().map_err(Error::from)?;
    let map = build_match_map(&ast, &tokenize_code(&sample.code));
    println!("{}", map.to_json()?);
    Ok(())
}

fn gradcheck(seed: u64) -> Outcome<()> {
    let results = run_suite(seed)?;
    let mut ok = true;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        ok &= r.passed();
        println!("{:<30} {:>11.3e}  {:>5} probes  {verdict}", r.name, r.max_rel_error, r.probes);
    }
    if ok {
        Ok(())
    } else {
        Err(fail(NUMERIC, format!("relative error at or above {TOLERANCE}")))
    }
}
