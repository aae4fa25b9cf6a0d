//! Command line front end: model lifecycle, the two services, inference
//! through the relay, distillation, the extraction benchmark and the
//! enclave cost report.
//!
//! Exit codes: 0 success, 2 configuration or usage problem, 3 a
//! verification that ran and failed, 4 network or protocol failure.
//! Logging goes to stderr, controlled by `DISTILLOCK_LOG` (e.g.
//! `DISTILLOCK_LOG=debug`). Services print `LISTENING <addr>` on stdout
//! once they accept connections, so parents can scrape the bound port.

use clap::{Args, Parser, Subcommand, ValueEnum};
use distillock_core::enclave::{Enclave, PadSource};
use distillock_core::flops;
use distillock_core::grad::{self, OptKind, TrainHyper};
use distillock_core::io as model_io;
use distillock_core::kd::{self, distill, DataSpec, DistillHyper, PlainTeacher, TeacherOracle};
use distillock_core::model::{init_model, ModelConfig, NormKind};
use distillock_core::obfuscate::{
    gen_otp, gen_secret, min_hot_count, obfuscate_model, otp_rng, OtpPad,
};
use distillock_core::worker::Worker;
use distillock_core::{attack, CoreError};
use distillock_net::client::PipelineTeacher;
use distillock_net::client::{Relay, UnauthorizedRemoteTeacher, WorkerClient};
use distillock_net::service;
use std::fmt::Write as _;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

// ============================================================
// Error handling and exit codes
// ============================================================

enum CliError {
    /// Bad input, bad file, bad flag combination.
    Config(String),
    /// A check ran to completion and the artifacts failed it.
    Verify(String),
    /// The wire failed us.
    Net(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Verify(_) => 3,
            CliError::Net(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Verify(m) | CliError::Net(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<distillock_net::client::NetError> for CliError {
    fn from(e: distillock_net::client::NetError) -> Self {
        CliError::Net(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

// ============================================================
// Argument surface
// ============================================================

#[derive(Parser)]
#[command(
    name = "distillock",
    version,
    about = "Split inference with shuffled weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormArg {
    Layernorm,
    Rmsnorm,
}

impl From<NormArg> for NormKind {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Layernorm => NormKind::LayerNorm,
            NormArg::Rmsnorm => NormKind::RmsNorm,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptArg {
    Adam,
    Sgd,
}

impl From<OptArg> for OptKind {
    fn from(o: OptArg) -> Self {
        match o {
            OptArg::Adam => OptKind::Adam,
            OptArg::Sgd => OptKind::Sgd,
        }
    }
}

/// Synthetic task shape; shared by training, distillation and attacks.
#[derive(Args, Clone)]
struct TaskArgs {
    /// Contiguous vocabulary bands (labels); must divide the vocabulary
    #[arg(long, default_value_t = 8)]
    regions: u32,
    /// Tokens per sequence
    #[arg(long, default_value_t = 16)]
    seq_len: u32,
    #[arg(long, default_value_t = 256)]
    train_size: u32,
    #[arg(long, default_value_t = 128)]
    test_size: u32,
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
}

impl TaskArgs {
    fn spec(&self, vocab_size: u32) -> DataSpec {
        DataSpec {
            vocab_size,
            regions: self.regions,
            seq_len: self.seq_len,
            train_size: self.train_size,
            test_size: self.test_size,
            data_seed: self.data_seed,
        }
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 12)]
    epochs: u32,
    #[arg(long, default_value_t = 16)]
    batch_size: u32,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = OptArg::Adam)]
    optimizer: OptArg,
    #[arg(long, default_value_t = 0)]
    shuffle_seed: u64,
}

impl TrainArgs {
    fn hyper(&self) -> TrainHyper {
        TrainHyper {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: self.optimizer.into(),
            shuffle_seed: self.shuffle_seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Initialize a model file from a seed
    GenModel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        vocab_size: u32,
        #[arg(long, default_value_t = 16)]
        model_dim: u32,
        #[arg(long, default_value_t = 32)]
        ffn_dim: u32,
        #[arg(long, default_value_t = 2)]
        layers: u32,
        #[arg(long, default_value_t = 16)]
        max_seq_len: u32,
        #[arg(long, value_enum, default_value_t = NormArg::Layernorm)]
        norm: NormArg,
        /// Attention temperature squared; defaults to the model dimension
        #[arg(long)]
        attn_scale: Option<u32>,
        /// Drop the learned positional rows
        #[arg(long)]
        no_positional: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Fit a model to the synthetic task with hard labels
    TrainTeacher {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Append per-epoch rows to this CSV
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Shuffle a plain model under a fresh secret
    Obfuscate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        out_secret: PathBuf,
        #[arg(long, default_value_t = 2)]
        secret_seed: u64,
    },
    /// Pregenerate a pool of one-time pads
    GenPads {
        /// Plain model file (for the embedding table)
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: u32,
        /// Positions per pad; defaults to the model's maximum sequence
        #[arg(long)]
        seq_len: Option<u32>,
        /// Hot entries per position; defaults to the safe minimum for the
        /// vocabulary
        #[arg(long)]
        hot: Option<u32>,
        #[arg(long, default_value_t = 3)]
        pads_seed: u64,
    },
    /// Serve the trusted side
    ServeEnclave {
        #[arg(long)]
        secret: PathBuf,
        /// Plain model file (embedding table for pad offsets)
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        /// Draw pads from this pool file instead of a seeded stream
        #[arg(long)]
        pads: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        pads_seed: u64,
        #[arg(long)]
        hot: Option<u32>,
    },
    /// Serve the untrusted side
    ServeWorker {
        /// Obfuscated model file
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
    },
    /// One inference through the running services
    Infer {
        #[arg(long)]
        enclave: Option<String>,
        #[arg(long)]
        worker: String,
        /// Comma-separated token ids
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u32>,
        /// Skip authorization and drive the worker directly
        #[arg(long)]
        unauthorized: bool,
        /// Session id; the enclave burns each id after one use, so the
        /// default is a fresh random draw
        #[arg(long)]
        session: Option<u64>,
    },
    /// Train a student against a teacher's logits
    Distill {
        /// plain:FILE, pipeline:ENCLAVE_ADDR,WORKER_ADDR, or worker:ADDR
        /// (worker: = unauthorized outputs)
        #[arg(long)]
        teacher: String,
        /// Plain model file to initialize the student from; omit to draw a
        /// fresh student shaped like --like
        #[arg(long)]
        student: Option<PathBuf>,
        /// Model file whose shape the fresh student copies
        #[arg(long)]
        like: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        student_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// 0 = hard labels only, 1 = teacher logits only
        #[arg(long, default_value_t = 1.0)]
        kd_ratio: f64,
        #[arg(long, default_value_t = 2.0)]
        tau: f64,
        /// First session id used by the pipeline teacher; the enclave burns
        /// each id after one use, so the default is a fresh random draw
        #[arg(long)]
        first_session: Option<u64>,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run the surrogate extraction benchmark
    ///
    /// Defaults carry the calibrated attacker budget: 64 training
    /// sequences for 24 epochs, evaluated on 512 held-out sequences.
    Attack {
        /// Trained plain model (the victim and serving teacher)
        #[arg(long)]
        victim: PathBuf,
        /// Obfuscated counterpart (what the last scheme leaks)
        #[arg(long)]
        obf: PathBuf,
        /// Comma-separated scheme names, or "all"
        #[arg(long, default_value = "all")]
        schemes: String,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        kd_ratio: f64,
        #[arg(long, default_value_t = 2.0)]
        tau: f64,
        #[arg(long, default_value_t = 8)]
        regions: u32,
        #[arg(long, default_value_t = 16)]
        seq_len: u32,
        #[arg(long, default_value_t = 64)]
        train_size: u32,
        #[arg(long, default_value_t = 512)]
        test_size: u32,
        #[arg(long, default_value_t = 7)]
        data_seed: u64,
        #[arg(long, default_value_t = 24)]
        epochs: u32,
        #[arg(long, default_value_t = 16)]
        batch_size: u32,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = OptArg::Adam)]
        optimizer: OptArg,
        #[arg(long, default_value_t = 0)]
        shuffle_seed: u64,
    },
    /// Enclave-resident cost report
    Flops {
        /// Use the built-in production shapes instead of explicit dims
        #[arg(long)]
        production: bool,
        #[arg(long, default_value_t = 64)]
        vocab_size: u32,
        #[arg(long, default_value_t = 16)]
        model_dim: u32,
        #[arg(long, default_value_t = 32)]
        ffn_dim: u32,
        #[arg(long, default_value_t = 2)]
        layers: u32,
        #[arg(long, default_value_t = 512)]
        seq_len: u64,
        #[arg(long)]
        hot: Option<u64>,
        #[arg(long, default_value_t = 1_000_000)]
        tokens: u64,
        /// Also run the instrumented interpreter on a small shape and
        /// require an exact match with the closed form
        #[arg(long)]
        check: bool,
    },
    /// Check that an obfuscated model matches a plain model under a secret
    Verify {
        #[arg(long)]
        plain: PathBuf,
        #[arg(long)]
        obf: PathBuf,
        #[arg(long)]
        secret: PathBuf,
    },
}

// ============================================================
// Helpers
// ============================================================

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> CliResult {
    let mut out = String::with_capacity(rows.len() * 48 + header.len() + 1);
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn load_plain(path: &Path) -> Result<distillock_core::model::PlainModel, CliError> {
    model_io::read_plain_model(path).map_err(CliError::from)
}

fn print_listening(listener: &TcpListener) -> CliResult {
    let addr = listener.local_addr()?;
    println!("LISTENING {}", addr);
    std::io::stdout().flush()?;
    Ok(())
}

fn parse_teacher_arg(s: &str) -> Result<(&'static str, Vec<String>), CliError> {
    if let Some(rest) = s.strip_prefix("plain:") {
        Ok(("plain", vec![rest.to_string()]))
    } else if let Some(rest) = s.strip_prefix("pipeline:") {
        let parts: Vec<String> = rest.split(',').map(str::to_string).collect();
        if parts.len() != 2 {
            return Err(config_err(
                "pipeline teacher needs ENCLAVE_ADDR,WORKER_ADDR",
            ));
        }
        Ok(("pipeline", parts))
    } else if let Some(rest) = s.strip_prefix("worker:") {
        Ok(("worker", vec![rest.to_string()]))
    } else {
        Err(config_err(
            "teacher must be plain:FILE, pipeline:ENCLAVE,WORKER or worker:ADDR",
        ))
    }
}

fn format_logits(row: &[f64]) -> String {
    let mut s = String::new();
    for (j, v) in row.iter().enumerate() {
        if j > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:.6}", v);
    }
    s
}

// ============================================================
// Command bodies
// ============================================================

#[allow(clippy::too_many_arguments)]
fn cmd_gen_model(
    out: &Path,
    vocab_size: u32,
    model_dim: u32,
    ffn_dim: u32,
    layers: u32,
    max_seq_len: u32,
    norm: NormArg,
    attn_scale: Option<u32>,
    no_positional: bool,
    seed: u64,
) -> CliResult {
    let cfg = ModelConfig {
        vocab_size,
        model_dim,
        ffn_dim,
        num_layers: layers,
        max_seq_len,
        norm_kind: norm.into(),
        attn_scale,
        use_positional: !no_positional,
        seed,
    };
    let model = init_model(&cfg)?;
    model_io::write_model(out, &model, None)?;
    println!(
        "wrote {} ({} tokens x {} dims, {} layers)",
        out.display(),
        vocab_size,
        model_dim,
        layers
    );
    Ok(())
}

fn cmd_train_teacher(
    model_path: &Path,
    out: &Path,
    csv: Option<&Path>,
    task: &TaskArgs,
    train: &TrainArgs,
) -> CliResult {
    let mut model = load_plain(model_path)?;
    let spec = task.spec(model.config.vocab_size);
    if spec.seq_len > model.config.max_seq_len {
        return Err(config_err(format!(
            "task sequences of {} exceed the model's maximum {}",
            spec.seq_len, model.config.max_seq_len
        )));
    }
    let data = kd::generate_dataset(&spec)?;
    let span = spec.regions as usize;
    let hyper = train.hyper();

    let mut rows = Vec::new();
    let mut opt = grad::OptState::new(hyper.optimizer, &model);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(hyper.shuffle_seed);
    for epoch in 0..hyper.epochs {
        let loss = grad::run_epoch(
            &mut model,
            &data.train,
            &mut rng,
            &mut opt,
            hyper.batch_size as usize,
            hyper.lr,
            &|i, last| grad::ce_restricted(last, data.train_labels[i], span),
        )?;
        let acc = kd::eval_accuracy(&model, &data.test, &data.test_labels, span)?;
        log::info!("epoch {} loss {:.6} acc {:.4}", epoch, loss, acc);
        rows.push(format!("{},teacher,{:.6},{:.6}", epoch, loss, acc));
    }
    let final_acc = kd::eval_accuracy(&model, &data.test, &data.test_labels, span)?;
    model_io::write_model(out, &model, None)?;
    if let Some(csv_path) = csv {
        write_csv(csv_path, "epoch,mode,train_loss,eval_acc", &rows)?;
    }
    println!("final accuracy {:.4}", final_acc);
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_obfuscate(
    model_path: &Path,
    out_model: &Path,
    out_secret: &Path,
    secret_seed: u64,
) -> CliResult {
    let model = load_plain(model_path)?;
    let secret = gen_secret(&model.config, secret_seed);
    let obf = obfuscate_model(&model, &secret)?;
    model_io::write_model(out_model, &obf.inner, Some(obf.fingerprint))?;
    model_io::write_secret(out_secret, &secret)?;
    println!("fingerprint {:#018x}", obf.fingerprint);
    println!("wrote {} and {}", out_model.display(), out_secret.display());
    Ok(())
}

fn cmd_gen_pads(
    model_path: &Path,
    out: &Path,
    count: u32,
    seq_len: Option<u32>,
    hot: Option<u32>,
    pads_seed: u64,
) -> CliResult {
    let model = load_plain(model_path)?;
    let seq_len = seq_len.unwrap_or(model.config.max_seq_len);
    let hot = hot.unwrap_or_else(|| min_hot_count(model.config.vocab_size));
    let pads: Vec<OtpPad> = (0..count as u64)
        .map(|i| gen_otp(&model.w_emb, seq_len, hot, &mut otp_rng(pads_seed, i), i))
        .collect::<distillock_core::Result<_>>()?;
    model_io::write_pads(out, model.config.vocab_size, model.config.model_dim, &pads)?;
    println!(
        "wrote {} pads ({} positions x {} hot) to {}",
        count,
        seq_len,
        hot,
        out.display()
    );
    Ok(())
}

fn cmd_serve_enclave(
    secret_path: &Path,
    model_path: &Path,
    listen: &str,
    pads: Option<&Path>,
    pads_seed: u64,
    hot: Option<u32>,
) -> CliResult {
    let secret = model_io::read_secret(secret_path)?;
    let model = load_plain(model_path)?;
    let model_fp = distillock_core::obfuscate::model_fingerprint(&model.config);
    if secret.fingerprint != model_fp {
        return Err(CliError::Verify(format!(
            "secret fingerprint {:#018x} does not match model {:#018x}",
            secret.fingerprint, model_fp
        )));
    }
    let source = match pads {
        Some(path) => {
            let pool = model_io::read_pads(path)?;
            if pool.is_empty() {
                return Err(config_err("pad pool file is empty"));
            }
            PadSource::Pool(pool)
        }
        None => PadSource::Seeded {
            pads_seed,
            hot: hot.unwrap_or_else(|| min_hot_count(model.config.vocab_size)),
            w_emb: model.w_emb.clone(),
        },
    };
    let enclave = Enclave::new(secret, source);
    let listener = TcpListener::bind(listen)?;
    print_listening(&listener)?;
    service::serve_enclave(listener, enclave)?;
    Ok(())
}

fn cmd_serve_worker(model_path: &Path, listen: &str) -> CliResult {
    let obf = model_io::read_obf_model(model_path)?;
    let worker = Worker::new(obf);
    let listener = TcpListener::bind(listen)?;
    print_listening(&listener)?;
    service::serve_worker(listener, worker)?;
    Ok(())
}

fn cmd_infer(
    enclave: Option<&str>,
    worker: &str,
    ids: &[u32],
    unauthorized: bool,
    session: u64,
) -> CliResult {
    if ids.is_empty() {
        return Err(config_err("no token ids given"));
    }
    let last = if unauthorized {
        let mut client = WorkerClient::connect(worker)?;
        client.infer_last(ids)?
    } else {
        let enclave = enclave.ok_or_else(|| {
            config_err("authorized inference needs --enclave (or pass --unauthorized)")
        })?;
        let mut relay = Relay::connect(enclave, worker, session)?;
        relay.authorized_infer_last(ids)?
    };
    let best = last
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(j, _)| j)
        .unwrap_or(0);
    println!("logits {}", format_logits(&last));
    println!("argmax {}", best);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_distill(
    teacher_arg: &str,
    student: Option<&Path>,
    like: Option<&Path>,
    student_seed: u64,
    out: Option<&Path>,
    csv: Option<&Path>,
    kd_ratio: f64,
    tau: f64,
    first_session: u64,
    task: &TaskArgs,
    train: &TrainArgs,
) -> CliResult {
    let (kind, params) = parse_teacher_arg(teacher_arg)?;

    // Resolve the student first so its shape can come from --like or the
    // plain teacher file.
    let mut student_model = match (student, like) {
        (Some(path), _) => load_plain(path)?,
        (None, Some(path)) => {
            let mut cfg = model_io::read_model(path)?.0.config;
            cfg.seed = student_seed;
            init_model(&cfg)?
        }
        (None, None) => {
            if kind == "plain" {
                let mut cfg = load_plain(Path::new(&params[0]))?.config;
                cfg.seed = student_seed;
                init_model(&cfg)?
            } else {
                return Err(config_err(
                    "a remote teacher needs --student or --like to shape the student",
                ));
            }
        }
    };

    let spec = task.spec(student_model.config.vocab_size);
    let data = kd::generate_dataset(&spec)?;
    let (alpha, beta) = kd::kd_ratio(kd_ratio);
    let hyper = DistillHyper {
        train: train.hyper(),
        alpha,
        beta,
        tau,
    };

    // Hold whichever teacher we need alive for the run.
    let plain_model;
    let mut relay;
    let mut worker_client;
    let mut teacher: Box<dyn TeacherOracle + '_> = match kind {
        "plain" => {
            plain_model = load_plain(Path::new(&params[0]))?;
            Box::new(PlainTeacher(&plain_model))
        }
        "pipeline" => {
            relay = Relay::connect(params[0].as_str(), params[1].as_str(), first_session)?;
            Box::new(PipelineTeacher(&mut relay))
        }
        "worker" => {
            worker_client = WorkerClient::connect(params[0].as_str())?;
            Box::new(UnauthorizedRemoteTeacher(&mut worker_client))
        }
        _ => unreachable!(),
    };

    let metrics = distill(&mut student_model, teacher.as_mut(), &data, &hyper)?;
    let mode = format!("distill-{}", kind);
    let rows: Vec<String> = metrics
        .iter()
        .map(|m| format!("{},{},{:.6},{:.6}", m.epoch, mode, m.train_loss, m.eval_acc))
        .collect();
    if let Some(csv_path) = csv {
        write_csv(csv_path, "epoch,mode,train_loss,eval_acc", &rows)?;
    }
    if let Some(out_path) = out {
        model_io::write_model(out_path, &student_model, None)?;
        println!("wrote {}", out_path.display());
    }
    let final_acc = metrics.last().map(|m| m.eval_acc).unwrap_or(0.0);
    println!("final accuracy {:.4}", final_acc);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_attack(
    victim_path: &Path,
    obf_path: &Path,
    schemes_arg: &str,
    seeds: &[u64],
    csv: Option<&Path>,
    kd_ratio: f64,
    tau: f64,
    task: &TaskArgs,
    train: &TrainArgs,
) -> CliResult {
    let victim = load_plain(victim_path)?;
    let obf = model_io::read_obf_model(obf_path)?;
    let expected = distillock_core::obfuscate::model_fingerprint(&victim.config);
    if obf.fingerprint != expected {
        return Err(CliError::Verify(format!(
            "obfuscated file fingerprint {:#018x} does not match the victim {:#018x}",
            obf.fingerprint, expected
        )));
    }

    let schemes: Vec<attack::AttackScheme> = if schemes_arg == "all" {
        attack::AttackScheme::ALL.to_vec()
    } else {
        schemes_arg
            .split(',')
            .map(attack::AttackScheme::parse)
            .collect::<distillock_core::Result<_>>()?
    };

    let spec = task.spec(victim.config.vocab_size);
    let data = kd::generate_dataset(&spec)?;
    let (alpha, beta) = kd::kd_ratio(kd_ratio);
    let hyper = DistillHyper {
        train: train.hyper(),
        alpha,
        beta,
        tau,
    };

    let mut teacher = PlainTeacher(&victim);
    let report = attack::run_attacks(&victim, &obf, &mut teacher, &data, &schemes, seeds, &hyper)?;

    let mut rows = Vec::new();
    for run in &report.runs {
        let rel = report
            .run_relative(run)
            .map_err(|e| CliError::Verify(e.to_string()))?;
        rows.push(format!(
            "{},{},{:.6},{:.6}",
            run.scheme.name(),
            run.seed,
            run.final_acc,
            rel
        ));
    }
    if let Some(csv_path) = csv {
        write_csv(
            csv_path,
            "scheme,seed,final_acc,relative_to_blackbox",
            &rows,
        )?;
    }
    println!("scheme            mean_acc  vs_blackbox");
    for &scheme in &schemes {
        let mean = report.mean_acc(scheme).unwrap_or(0.0);
        let rel = report
            .relative_to_blackbox(scheme)
            .map_err(|e| CliError::Verify(e.to_string()))?;
        println!("{:<16}  {:>8.4}  {:>+11.4}", scheme.name(), mean, rel);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_flops(
    production: bool,
    vocab_size: u32,
    model_dim: u32,
    ffn_dim: u32,
    layers: u32,
    seq_len: u64,
    hot: Option<u64>,
    tokens: u64,
    check: bool,
) -> CliResult {
    if check {
        let cfg = ModelConfig {
            vocab_size: 11,
            model_dim: 4,
            ffn_dim: 6,
            num_layers: 2,
            max_seq_len: 5,
            norm_kind: NormKind::LayerNorm,
            attn_scale: None,
            use_positional: true,
            seed: 9,
        };
        let model = init_model(&cfg)?;
        let ids = [1u32, 2, 3, 4, 5].map(|i| i % cfg.vocab_size);
        let (measured, _) = flops::measured_forward(&model, &ids)?;
        let analytic = flops::forward_flops(&cfg, ids.len() as u64);
        if measured != analytic {
            return Err(CliError::Verify(format!(
                "instrumented count {} disagrees with closed form {}",
                measured, analytic
            )));
        }
        println!("interpreter check: {} == {} ok", measured, analytic);
    }

    let shapes: Vec<(String, ModelConfig)> = if production {
        flops::reference_configs()
            .into_iter()
            .map(|(n, c)| (n.to_string(), c))
            .collect()
    } else {
        vec![(
            "custom".to_string(),
            ModelConfig {
                vocab_size,
                model_dim,
                ffn_dim,
                num_layers: layers,
                max_seq_len: seq_len as u32,
                norm_kind: NormKind::LayerNorm,
                attn_scale: None,
                use_positional: false,
                seed: 0,
            },
        )]
    };

    for (name, cfg) in shapes {
        let report = flops::tee_report(&cfg, seq_len, hot, tokens);
        println!(
            "{}: V={} d={} m={} L={} n={} hot={} tokens={} ({} sequences)",
            name,
            cfg.vocab_size,
            cfg.model_dim,
            cfg.ffn_dim,
            cfg.num_layers,
            report.seq_len,
            report.hot,
            report.token_count,
            report.sequences
        );
        println!(
            "  forward: {} ops/seq, {} ops total",
            report.forward_per_seq, report.forward_total
        );
        println!(
            "  {:<12} {:>20} {:>24} {:>12}",
            "scheme", "ops/seq", "ops total", "share"
        );
        for row in &report.rows {
            println!(
                "  {:<12} {:>20} {:>24} {:>11.6}%",
                row.scheme.name(),
                row.per_seq,
                row.total,
                row.fraction * 100.0
            );
        }
    }
    Ok(())
}

fn cmd_verify(plain_path: &Path, obf_path: &Path, secret_path: &Path) -> CliResult {
    let plain = load_plain(plain_path)?;
    let obf = model_io::read_obf_model(obf_path)?;
    let secret = model_io::read_secret(secret_path)?;

    let model_fp = distillock_core::obfuscate::model_fingerprint(&plain.config);
    if secret.fingerprint != model_fp {
        return Err(CliError::Verify(format!(
            "secret fingerprint {:#018x} does not match the plain model {:#018x}",
            secret.fingerprint, model_fp
        )));
    }
    if obf.fingerprint != model_fp {
        return Err(CliError::Verify(format!(
            "obfuscated fingerprint {:#018x} does not match the plain model {:#018x}",
            obf.fingerprint, model_fp
        )));
    }
    let recomputed = obfuscate_model(&plain, &secret)?;
    if recomputed.inner != obf.inner {
        return Err(CliError::Verify(
            "re-shuffling the plain weights does not reproduce the obfuscated file".into(),
        ));
    }
    println!("ok: artifacts agree (fingerprint {:#018x})", model_fp);
    Ok(())
}

// ============================================================
// Entry
// ============================================================

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenModel {
            out,
            vocab_size,
            model_dim,
            ffn_dim,
            layers,
            max_seq_len,
            norm,
            attn_scale,
            no_positional,
            seed,
        } => cmd_gen_model(
            &out,
            vocab_size,
            model_dim,
            ffn_dim,
            layers,
            max_seq_len,
            norm,
            attn_scale,
            no_positional,
            seed,
        ),
        Command::TrainTeacher {
            model,
            out,
            csv,
            task,
            train,
        } => cmd_train_teacher(&model, &out, csv.as_deref(), &task, &train),
        Command::Obfuscate {
            model,
            out_model,
            out_secret,
            secret_seed,
        } => cmd_obfuscate(&model, &out_model, &out_secret, secret_seed),
        Command::GenPads {
            model,
            out,
            count,
            seq_len,
            hot,
            pads_seed,
        } => cmd_gen_pads(&model, &out, count, seq_len, hot, pads_seed),
        Command::ServeEnclave {
            secret,
            model,
            listen,
            pads,
            pads_seed,
            hot,
        } => cmd_serve_enclave(&secret, &model, &listen, pads.as_deref(), pads_seed, hot),
        Command::ServeWorker { model, listen } => cmd_serve_worker(&model, &listen),
        Command::Infer {
            enclave,
            worker,
            ids,
            unauthorized,
            session,
        } => cmd_infer(
            enclave.as_deref(),
            &worker,
            &ids,
            unauthorized,
            session.unwrap_or_else(rand::random),
        ),
        Command::Distill {
            teacher,
            student,
            like,
            student_seed,
            out,
            csv,
            kd_ratio,
            tau,
            first_session,
            task,
            train,
        } => cmd_distill(
            &teacher,
            student.as_deref(),
            like.as_deref(),
            student_seed,
            out.as_deref(),
            csv.as_deref(),
            kd_ratio,
            tau,
            first_session.unwrap_or_else(rand::random),
            &task,
            &train,
        ),
        Command::Attack {
            victim,
            obf,
            schemes,
            seeds,
            csv,
            kd_ratio,
            tau,
            regions,
            seq_len,
            train_size,
            test_size,
            data_seed,
            epochs,
            batch_size,
            lr,
            optimizer,
            shuffle_seed,
        } => {
            let task = TaskArgs {
                regions,
                seq_len,
                train_size,
                test_size,
                data_seed,
            };
            let train = TrainArgs {
                epochs,
                batch_size,
                lr,
                optimizer,
                shuffle_seed,
            };
            cmd_attack(
                &victim,
                &obf,
                &schemes,
                &seeds,
                csv.as_deref(),
                kd_ratio,
                tau,
                &task,
                &train,
            )
        }
        Command::Flops {
            production,
            vocab_size,
            model_dim,
            ffn_dim,
            layers,
            seq_len,
            hot,
            tokens,
            check,
        } => cmd_flops(
            production, vocab_size, model_dim, ffn_dim, layers, seq_len, hot, tokens, check,
        ),
        Command::Verify { plain, obf, secret } => cmd_verify(&plain, &obf, &secret),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DISTILLOCK_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
