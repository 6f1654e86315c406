//! `fcfd`: training, evaluation, probing, data tooling and the scalar
//! walkthrough behind one binary.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 numeric failure.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha1::{Digest, Sha1};

use config::{load_config, RunConfig};
use fcfd_core::analysis::{
    build_exit_branch, cross_probe, sample_directions, sensitivity_probe, toy_demo,
    train_exit_branch,
};
use fcfd_core::bridges::{build_bridge_set, BridgeSet};
use fcfd_core::checkpoint::{checkpoint_model_id, load_checkpoint, save_checkpoint};
use fcfd_core::data::{
    convert_cifar_bin, load_idx_dataset, make_batch, make_synthetic, write_idx_dataset,
    ImageDataset,
};
use fcfd_core::error::FcfdError;
use fcfd_core::pathing::{MissingStatsPolicy, Mode};
use fcfd_core::staged::{build_reference_pair, StagedModel, REGISTRY_NAMES};
use fcfd_core::trainer::{
    evaluate, train_distill, train_task_only, MetricsSink, TrainConfig, TrainMode,
};

type F = f32;

enum CliError {
    /// Exit 3: configuration problems, missing files, bad checkpoints.
    Config(String),
    /// Exit 4: numeric failures at runtime.
    Numeric(String),
}

impl From<FcfdError> for CliError {
    fn from(e: FcfdError) -> Self {
        match e {
            FcfdError::NonFinite { .. } => CliError::Numeric(format!("numeric:non-finite:{e}")),
            FcfdError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::Config(format!("config:not-found:{e}"))
            }
            other => CliError::Config(format!("config:invalid:{other}")),
        }
    }
}

impl From<String> for CliError {
    fn from(s: String) -> Self {
        CliError::Config(s)
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "fcfd", version, about = "Function-consistent feature distillation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Overrides the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to $FCFD_OUT or the current directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Compute device hint; only "cpu" is available.
    #[arg(long)]
    device: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a student against a teacher with the configured objective.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Warm-start the student (and bridges) from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on the configured eval split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Perturb features at one position and measure output divergence.
    ProbeSensitivity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Stage position to perturb.
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 32)]
        directions: usize,
        /// Cap on eval samples fed through the probe.
        #[arg(long, default_value_t = 256)]
        max_samples: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train an auxiliary branch on teacher features, then feed it student
    /// features through the student's bridge.
    ProbeExit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher_checkpoint: PathBuf,
        #[arg(long)]
        student_checkpoint: PathBuf,
        #[arg(long, default_value_t = 2)]
        attach_k: usize,
        #[arg(long, default_value_t = 10)]
        branch_epochs: usize,
        /// Probe raw student features instead of bridged ones.
        #[arg(long)]
        no_bridge: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print the scalar two-network walkthrough.
    DemoToy,
    /// Convert CIFAR-style label+pixels records to the native format.
    DataConvert {
        /// Input batch files, concatenated in order.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        /// Output file prefix inside --out-dir.
        #[arg(long, default_value = "train")]
        prefix: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate the synthetic class-conditional dataset.
    DataSynth {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 150)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value = "train")]
        prefix: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Model registry operations.
    Models {
        #[command(subcommand)]
        action: ModelsCmd,
    },
}

#[derive(Subcommand)]
enum ModelsCmd {
    /// List registered model pairs with their parameter counts.
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(4)
        }
    }
}

fn resolve_out_dir(common: &CommonArgs) -> CliResult<PathBuf> {
    if let Some(d) = &common.device {
        if d != "cpu" {
            return Err(CliError::Config(format!("config:bad-value:device={d}")));
        }
    }
    let dir = common
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("FCFD_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Config(format!("config:out-dir:{e}")))?;
    Ok(dir)
}

fn load_run_config(path: &Path, common: &CommonArgs) -> CliResult<(RunConfig, Vec<u8>)> {
    let (mut cfg, bytes) = load_config(path)?;
    if let Some(seed) = common.seed {
        cfg.optim.seed = seed;
        cfg.validate()?;
    }
    Ok((cfg, bytes))
}

/// Git-style content hash of the config file bytes.
fn config_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn load_datasets(cfg: &RunConfig) -> CliResult<(ImageDataset, ImageDataset)> {
    match cfg.data.source.as_str() {
        "synthetic" => {
            let train = make_synthetic(
                cfg.data.classes,
                cfg.data.per_class,
                cfg.data.image_size,
                cfg.data.data_seed,
            )?;
            let eval = make_synthetic(
                cfg.data.classes,
                cfg.data.eval_per_class,
                cfg.data.image_size,
                cfg.data.data_seed.wrapping_add(1),
            )?;
            Ok((train, eval))
        }
        "files" => {
            let p = |o: &Option<String>| PathBuf::from(o.as_ref().unwrap());
            let train = load_idx_dataset(&p(&cfg.data.train_images), &p(&cfg.data.train_labels))?;
            let eval = load_idx_dataset(&p(&cfg.data.eval_images), &p(&cfg.data.eval_labels))?;
            Ok((train, eval))
        }
        other => Err(CliError::Config(format!("config:bad-value:data.source={other}"))),
    }
}

fn build_pair(cfg: &RunConfig) -> CliResult<(StagedModel<F>, StagedModel<F>)> {
    Ok(build_reference_pair::<F>(&cfg.model.pair, cfg.model.model_seed)?)
}

/// Loads a checkpoint into whichever side of the pair it belongs to and
/// returns that model (teacher side flagged `true`).
fn load_into_pair(
    cfg: &RunConfig,
    ckpt: &Path,
    bridges: Option<&mut BridgeSet<F>>,
) -> CliResult<(StagedModel<F>, bool)> {
    let id = checkpoint_model_id(ckpt)?;
    let (mut teacher, mut student) = build_pair(cfg)?;
    if id == teacher.id {
        load_checkpoint(ckpt, &mut teacher, bridges)?;
        Ok((teacher, true))
    } else if id == student.id {
        load_checkpoint(ckpt, &mut student, bridges)?;
        Ok((student, false))
    } else {
        Err(CliError::Config(format!(
            "config:invalid:checkpoint model '{id}' is not part of pair '{}'",
            cfg.model.pair
        )))
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut f = BufWriter::new(File::create(path).map_err(FcfdError::from)?);
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| CliError::Config(e.to_string()))?;
    f.write_all(b"\n").map_err(FcfdError::from)?;
    Ok(())
}

fn dispatch(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::DemoToy => {
            print!("{}", toy_demo().render());
            Ok(())
        }
        Cmd::Models { action: ModelsCmd::List } => {
            for name in REGISTRY_NAMES {
                let (t, s) = build_reference_pair::<F>(name, 0)?;
                println!(
                    "{name}: teacher {} ({} params), student {} ({} params)",
                    t.id,
                    t.params.num_scalars(),
                    s.id,
                    s.params.num_scalars()
                );
            }
            Ok(())
        }
        Cmd::DataSynth { classes, per_class, image_size, prefix, common } => {
            let out = resolve_out_dir(&common)?;
            let seed = common.seed.unwrap_or(1);
            let ds = make_synthetic(classes, per_class, image_size, seed)?;
            let images = out.join(format!("{prefix}_images.bin"));
            let labels = out.join(format!("{prefix}_labels.bin"));
            write_idx_dataset(&ds, &images, &labels)?;
            println!(
                "{}",
                json!({"count": ds.len(), "images": images, "labels": labels})
            );
            Ok(())
        }
        Cmd::DataConvert { input, channels, height, width, prefix, common } => {
            let out = resolve_out_dir(&common)?;
            let ds = convert_cifar_bin(&input, channels, height, width)?;
            let images = out.join(format!("{prefix}_images.bin"));
            let labels = out.join(format!("{prefix}_labels.bin"));
            write_idx_dataset(&ds, &images, &labels)?;
            println!(
                "{}",
                json!({"count": ds.len(), "images": images, "labels": labels})
            );
            Ok(())
        }
        Cmd::Train { config, resume, common } => cmd_train(&config, resume.as_deref(), &common),
        Cmd::Eval { config, checkpoint, common } => cmd_eval(&config, &checkpoint, &common),
        Cmd::ProbeSensitivity {
            config,
            checkpoint,
            k,
            radius,
            directions,
            max_samples,
            common,
        } => cmd_probe_sensitivity(&config, &checkpoint, k, radius, directions, max_samples, &common),
        Cmd::ProbeExit {
            config,
            teacher_checkpoint,
            student_checkpoint,
            attach_k,
            branch_epochs,
            no_bridge,
            common,
        } => cmd_probe_exit(
            &config,
            &teacher_checkpoint,
            &student_checkpoint,
            attach_k,
            branch_epochs,
            no_bridge,
            &common,
        ),
    }
}

fn cmd_train(config_path: &Path, resume: Option<&Path>, common: &CommonArgs) -> CliResult<()> {
    let (cfg, raw) = load_run_config(config_path, common)?;
    let out = resolve_out_dir(common)?;
    let train_cfg = cfg.train_config()?;
    let weights = cfg.loss_weights()?;
    let sampler = cfg.sampler_config()?;

    let manifest_path = out.join("manifest.json");
    let hash = config_hash(&raw);
    if manifest_path.exists() {
        let prev: serde_json::Value = serde_json::from_slice(
            &std::fs::read(&manifest_path).map_err(FcfdError::from)?,
        )
        .map_err(|e| CliError::Config(format!("config:invalid:manifest:{e}")))?;
        if prev["config_hash"] != json!(hash) {
            return Err(CliError::Config(
                "config:run-dir-conflict:out dir already holds a different run".into(),
            ));
        }
    }
    let metrics_path = out.join("metrics.ndjson");
    let student_ckpt = out.join("student.ckpt");
    let teacher_ckpt = out.join("teacher.ckpt");
    let pretrain_teacher = cfg.model.teacher_init.is_none();
    // The manifest is on disk before any training step runs.
    write_json(
        &manifest_path,
        &json!({
            "format": "fcfd-run-manifest-v1",
            "created_unix": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            "config_hash": hash,
            "config": cfg,
            "artifacts": {
                "metrics": metrics_path,
                "student_checkpoint": student_ckpt,
                "teacher_checkpoint": if pretrain_teacher { Some(&teacher_ckpt) } else { None },
                "results": out.join("results.json"),
            },
        }),
    )?;

    let (train_ds, eval_ds) = load_datasets(&cfg)?;
    let (mut teacher, mut student) = build_pair(&cfg)?;
    let mut bridges = build_bridge_set(
        &teacher,
        &student,
        &cfg.model.positions,
        cfg.model.model_seed.wrapping_add(7),
    )?;
    if let Some(ckpt) = resume {
        load_checkpoint(ckpt, &mut student, Some(&mut bridges))?;
    }

    let metrics_file = File::create(&metrics_path).map_err(FcfdError::from)?;
    let mut metrics_writer = BufWriter::new(metrics_file);
    let mut sink = MetricsSink::new(&mut metrics_writer);

    let teacher_accuracy = match &cfg.model.teacher_init {
        Some(path) => {
            load_checkpoint(Path::new(path), &mut teacher, None)?;
            let (mean, std) = train_ds.channel_stats();
            evaluate(
                &mut teacher,
                &eval_ds,
                &mean,
                &std,
                train_cfg.batch_size,
                &MissingStatsPolicy::Strict,
            )?
        }
        None => {
            // Deterministic in-process pretraining on the task loss.
            let pre_cfg = TrainConfig {
                seed: train_cfg.seed.wrapping_add(0x7465_6163),
                mode: TrainMode::Offline,
                ..train_cfg.clone()
            };
            let res =
                train_task_only(&mut teacher, &train_ds, &eval_ds, &pre_cfg, &mut MetricsSink::none())?;
            save_checkpoint(&teacher_ckpt, &teacher, None)?;
            res.final_accuracy
        }
    };
    sink.emit(&json!({"event": "teacher", "accuracy": teacher_accuracy}))?;

    let outcome = train_distill(
        &mut teacher,
        &mut student,
        &mut bridges,
        &train_ds,
        &eval_ds,
        &train_cfg,
        &weights,
        &sampler,
        &mut sink,
    )?;
    drop(sink);
    metrics_writer.flush().map_err(FcfdError::from)?;

    save_checkpoint(&student_ckpt, &student, Some(&bridges))?;
    let results = json!({
        "teacher_accuracy": teacher_accuracy,
        "final_accuracy": outcome.final_accuracy,
        "eval_history": outcome.eval_history,
        "iterations": outcome.iterations,
        "student_checkpoint": student_ckpt,
    });
    write_json(&out.join("results.json"), &results)?;
    println!("{}", json!({"final_accuracy": outcome.final_accuracy, "out_dir": out}));
    Ok(())
}

fn cmd_eval(config_path: &Path, ckpt: &Path, common: &CommonArgs) -> CliResult<()> {
    let (cfg, _) = load_run_config(config_path, common)?;
    let train_cfg = cfg.train_config()?;
    let (train_ds, eval_ds) = load_datasets(&cfg)?;
    let (mut model, is_teacher) = load_into_pair(&cfg, ckpt, None)?;
    let (mean, std) = train_ds.channel_stats();
    let accuracy = evaluate(
        &mut model,
        &eval_ds,
        &mean,
        &std,
        train_cfg.batch_size,
        &MissingStatsPolicy::Strict,
    )?;
    println!(
        "{}",
        json!({"accuracy": accuracy, "model": model.id, "teacher": is_teacher})
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_probe_sensitivity(
    config_path: &Path,
    ckpt: &Path,
    k: usize,
    radius: f64,
    directions: usize,
    max_samples: usize,
    common: &CommonArgs,
) -> CliResult<()> {
    let (cfg, _) = load_run_config(config_path, common)?;
    let out = resolve_out_dir(common)?;
    let (train_ds, eval_ds) = load_datasets(&cfg)?;
    let (mut model, _) = load_into_pair(&cfg, ckpt, None)?;
    let (mean, std) = train_ds.channel_stats();
    let n = eval_ds.len().min(max_samples);
    let indices: Vec<usize> = (0..n).collect();
    let batch = make_batch::<F>(&eval_ds, &indices, &mean, &std);
    let (c, h, w) = model.stage_output_shapes[k.saturating_sub(1)];
    let dirs = sample_directions::<F>(&[c, h, w], directions, common.seed.unwrap_or(0));
    let report = sensitivity_probe(
        &mut model,
        k,
        &dirs,
        radius,
        &batch.x,
        Some(&batch.y),
        Mode::Eval,
        &MissingStatsPolicy::Strict,
    )?;
    let value = serde_json::to_value(&report).map_err(|e| CliError::Config(e.to_string()))?;
    write_json(&out.join("sensitivity.json"), &value)?;
    println!(
        "{}",
        json!({
            "k": report.k,
            "radius": report.radius,
            "min": report.min,
            "mean": report.mean,
            "max": report.max,
            "accuracy_worst": report.accuracy_worst,
            "accuracy_best": report.accuracy_best,
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_probe_exit(
    config_path: &Path,
    teacher_ckpt: &Path,
    student_ckpt: &Path,
    attach_k: usize,
    branch_epochs: usize,
    no_bridge: bool,
    common: &CommonArgs,
) -> CliResult<()> {
    let (cfg, _) = load_run_config(config_path, common)?;
    let out = resolve_out_dir(common)?;
    let train_cfg = cfg.train_config()?;
    let (train_ds, eval_ds) = load_datasets(&cfg)?;

    let (mut teacher, mut student) = build_pair(&cfg)?;
    load_checkpoint(teacher_ckpt, &mut teacher, None)?;
    let mut bridges = build_bridge_set(
        &teacher,
        &student,
        &cfg.model.positions,
        cfg.model.model_seed.wrapping_add(7),
    )?;
    load_checkpoint(student_ckpt, &mut student, Some(&mut bridges))?;

    let mut branch = build_exit_branch(&teacher, attach_k, common.seed.unwrap_or(0))?;
    let branch_cfg = TrainConfig {
        epochs: branch_epochs,
        eval_every: branch_epochs,
        lr_milestones: vec![],
        seed: common.seed.unwrap_or(0),
        augment: false,
        ..train_cfg.clone()
    };
    let branch_acc = train_exit_branch(
        &mut teacher,
        &mut branch,
        &train_ds,
        &eval_ds,
        &branch_cfg,
        &mut MetricsSink::none(),
    )?;

    let (mean, std) = train_ds.channel_stats();
    let cross_acc = cross_probe(
        &mut branch,
        &mut student,
        if no_bridge { None } else { Some(&mut bridges) },
        &train_ds,
        &eval_ds,
        &mean,
        &std,
        train_cfg.batch_size,
    )?;
    let report = json!({
        "attach_k": attach_k,
        "branch_accuracy": branch_acc,
        "cross_accuracy": cross_acc,
        "bridged": !no_bridge,
    });
    write_json(&out.join("exit_probe.json"), &report)?;
    println!("{report}");
    Ok(())
}
