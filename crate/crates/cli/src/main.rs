use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use thoughtful_core::distillation::{run_distillation, CommandTrainer, DistillationConfig, SeenCommands};
use thoughtful_core::jsonl;
use thoughtful_core::metrics::{
    collect_trials, run_latency_harness, setting_accuracy, similarity_report, AccuracyReport,
    LatencyCommand, SimilarityReport,
};
use thoughtful_core::runtime::{CommandEvent, DeviceInstance, Outcome, SensorSim, SimulatedSensors};
use thoughtful_core::snapshot_gen::{generate_set, GenerationConfig};
use thoughtful_core::state_model::{DeviceModel, Snapshot};
use thoughtful_core::synthesis::{
    audit_diversity, build_bootstrap_dataset, DatasetBundle, SynthesisConfig, JOURNAL_FILE,
};
use thoughtful_core::wire::{BackendConfig, GenerationBackend, HashingEmbedder, PromptKind};
use thoughtful_server::{app, serve, DeviceHandle, ServerOptions};

#[derive(Parser)]
#[command(name = "thoughtful", version, about = "Natural-language devices grounded by a state model")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample random valid snapshots as JSONL.
    GenStates {
        /// Device definition file or built-in name (lamp, thermostat).
        #[arg(long)]
        device: String,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label snapshots with a teacher and write train/test datasets.
    Synthesize {
        #[arg(long)]
        device: String,
        /// Teacher backend configuration (JSON).
        #[arg(long)]
        teacher: PathBuf,
        /// Snapshots JSONL; generated from --count/--seed when omitted.
        #[arg(long)]
        snapshots: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Seeds snapshot generation, sampling and the train/test split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Synthesis configuration (JSON); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the teacher/student correction loop.
    Distill {
        #[arg(long)]
        device: String,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Shell command run with each batch file path appended.
        #[arg(long)]
        trainer_hook: String,
        /// Directory holding train.jsonl and test.jsonl from `synthesize`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interactive device session. Prefix a line with `?` to ask a question.
    Run {
        #[arg(long)]
        device: String,
        #[arg(long)]
        backend: PathBuf,
        /// Sensor simulation, `name=VALUE` or `name=drift:START:STEP`.
        #[arg(long = "sensor")]
        sensors: Vec<String>,
        /// JSONL file receiving rejected commands.
        #[arg(long)]
        error_log: Option<PathBuf>,
    },
    /// Serve devices over HTTP. Repeat --device/--backend for several devices.
    Serve {
        #[arg(long = "device", required = true)]
        devices: Vec<String>,
        #[arg(long = "backend", required = true)]
        backends: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long = "sensor")]
        sensors: Vec<String>,
        #[arg(long)]
        cors: bool,
        /// Static files (e.g. a web console build) served at the root.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long)]
        error_log: Option<PathBuf>,
    },
    /// Judge a student on a hold-out set.
    Evaluate {
        #[arg(long)]
        device: String,
        #[arg(long)]
        testset: PathBuf,
        /// Training set for similarity scores.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        judge: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-field accuracy as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Measure latency and throughput of a backend on a device.
    Bench {
        #[arg(long)]
        device: String,
        #[arg(long)]
        backend: PathBuf,
        /// JSONL of {"text", "kind"} commands.
        #[arg(long)]
        commands: PathBuf,
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_device(arg: &str) -> Result<DeviceModel> {
    let path = Path::new(arg);
    if path.exists() {
        return DeviceModel::from_file(path).with_context(|| format!("loading device {arg}"));
    }
    DeviceModel::builtin(arg)
        .with_context(|| format!("{arg} is neither a device file nor a built-in device"))
}

fn load_backend(path: &Path) -> Result<Arc<dyn GenerationBackend>> {
    BackendConfig::load(path).with_context(|| format!("loading backend {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn parse_sensors(specs: &[String]) -> Result<SimulatedSensors> {
    let mut sims = BTreeMap::new();
    for spec in specs {
        let (name, rest) = spec
            .split_once('=')
            .with_context(|| format!("sensor `{spec}` must look like name=VALUE"))?;
        let sim = if let Some(drift) = rest.strip_prefix("drift:") {
            let (start, step) = drift
                .split_once(':')
                .with_context(|| format!("drift sensor `{spec}` must be name=drift:START:STEP"))?;
            SensorSim::Drift {
                start: start.parse()?,
                max_step: step.parse()?,
            }
        } else {
            SensorSim::Fixed(rest.parse().with_context(|| format!("sensor value in `{spec}`"))?)
        };
        sims.insert(name.to_string(), sim);
    }
    Ok(SimulatedSensors::new(sims, 0))
}

fn boot(model: DeviceModel, sensors: &[String], error_log: Option<&Path>) -> Result<DeviceInstance> {
    let mut instance = DeviceInstance::new(model, Box::new(parse_sensors(sensors)?))?;
    if let Some(p) = error_log {
        instance = instance.with_error_log(p);
    }
    Ok(instance)
}

fn describe(model: &DeviceModel, snapshot: &Snapshot) -> String {
    let fields: Vec<String> = model
        .ordered_settings(snapshot)
        .into_iter()
        .chain(model.ordered_sensors(snapshot))
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    if fields.is_empty() {
        return snapshot.state.clone();
    }
    format!("{} ({})", snapshot.state, fields.join(", "))
}

fn print_event(out: &mut impl Write, model: &DeviceModel, ev: &CommandEvent) -> std::io::Result<()> {
    match ev.outcome {
        Outcome::Applied => writeln!(out, "[{} ms] {}", ev.latency_ms, describe(model, &ev.after)),
        Outcome::Explained => writeln!(
            out,
            "[{} ms] {}",
            ev.latency_ms,
            ev.explanation.as_deref().unwrap_or_default()
        ),
        Outcome::RejectedInvalid | Outcome::RejectedParse => writeln!(
            out,
            "[{} ms] device kept its state: {}",
            ev.latency_ms,
            ev.error.as_ref().map_or("rejected", |e| e.detail.as_str())
        ),
    }
}

fn repl(instance: &mut DeviceInstance, backend: &dyn GenerationBackend) -> Result<()> {
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    writeln!(
        out,
        "{}: {}",
        instance.model().device_name(),
        describe(instance.model(), instance.current())
    )?;
    for line in stdin.lock().lines() {
        let line = line?;
        let line = line.trim();
        match line {
            "" => continue,
            ":quit" | ":q" => break,
            ":state" => {
                writeln!(out, "{}", describe(instance.model(), instance.current()))?;
                continue;
            }
            _ => {}
        }
        let (kind, text) = match line.strip_prefix('?') {
            Some(q) => (PromptKind::Explanation, q.trim()),
            None => (PromptKind::Action, line),
        };
        match instance.handle_command(text, kind, backend) {
            Ok(ev) => print_event(&mut out, instance.model(), &ev)?,
            Err(e) => writeln!(out, "error: {e}")?,
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluationReport {
    version: u32,
    device: String,
    trials: usize,
    accuracy: AccuracyReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    similarity: Option<SimilarityReport>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Cmd::GenStates {
            device,
            count,
            seed,
            out,
        } => {
            let model = load_device(&device)?;
            let snaps = generate_set(&model, &GenerationConfig::new(count, seed)?);
            match out {
                Some(path) => jsonl::write(&path, &snaps)?,
                None => {
                    let mut stdout = std::io::stdout().lock();
                    for s in &snaps {
                        writeln!(stdout, "{}", serde_json::to_string(s)?)?;
                    }
                }
            }
        }
        Cmd::Synthesize {
            device,
            teacher,
            snapshots,
            count,
            seed,
            config,
            out,
        } => {
            let model = load_device(&device)?;
            let teacher = load_backend(&teacher)?;
            let mut cfg: SynthesisConfig = match config {
                Some(p) => read_json(&p)?,
                None => SynthesisConfig::default(),
            };
            cfg.seed = seed;
            let snaps: Vec<Snapshot> = match snapshots {
                Some(p) => jsonl::read(&p).with_context(|| format!("reading {}", p.display()))?,
                None => generate_set(&model, &GenerationConfig::new(count, seed)?),
            };
            std::fs::create_dir_all(&out)?;
            let bundle: DatasetBundle = build_bootstrap_dataset(
                &model,
                &snaps,
                teacher.as_ref(),
                &cfg,
                Some(&out.join(JOURNAL_FILE)),
            )?;
            bundle.write_to_dir(&out)?;
            let audit = audit_diversity(&bundle.train, cfg.similarity_threshold, &HashingEmbedder::default());
            write_json(
                &out.join("stats.json"),
                &serde_json::json!({
                    "stats": bundle.stats,
                    "train": bundle.train.len(),
                    "test": bundle.test.len(),
                    "diversity_violations": audit,
                }),
            )?;
            println!(
                "{} train / {} test instances written to {}",
                bundle.train.len(),
                bundle.test.len(),
                out.display()
            );
        }
        Cmd::Distill {
            device,
            student,
            teacher,
            trainer_hook,
            dataset,
            config,
            out,
        } => {
            let model = load_device(&device)?;
            let student = load_backend(&student)?;
            let teacher = load_backend(&teacher)?;
            let cfg: DistillationConfig = match config {
                Some(p) => read_json(&p)?,
                None => DistillationConfig::default(),
            };
            let (train, test) = DatasetBundle::read_from_dir(&dataset)
                .with_context(|| format!("reading dataset in {}", dataset.display()))?;
            let seen = SeenCommands {
                train: train.into_iter().map(|i| i.command).collect(),
                holdout: test.into_iter().map(|i| i.command).collect(),
            };
            let mut trainer = CommandTrainer::new(trainer_hook);
            let report = run_distillation(
                student.as_ref(),
                teacher.as_ref(),
                &model,
                &cfg,
                &seen,
                &mut trainer,
                &out,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Run {
            device,
            backend,
            sensors,
            error_log,
        } => {
            let model = load_device(&device)?;
            let backend = load_backend(&backend)?;
            let mut instance = boot(model, &sensors, error_log.as_deref())?;
            repl(&mut instance, backend.as_ref())?;
        }
        Cmd::Serve {
            devices,
            backends,
            bind,
            sensors,
            cors,
            static_dir,
            error_log,
        } => {
            if devices.len() != backends.len() {
                bail!("give one --backend per --device");
            }
            let mut handles = Vec::new();
            for (d, b) in devices.iter().zip(&backends) {
                let model = load_device(d)?;
                let name = model.device_name().to_string();
                if handles.iter().any(|(n, _)| n == &name) {
                    bail!("device name `{name}` is used twice");
                }
                let log_path = error_log.as_ref().map(|p| {
                    if devices.len() == 1 {
                        p.clone()
                    } else {
                        p.with_file_name(format!(
                            "{name}-{}",
                            p.file_name().map_or("errors.jsonl".into(), |f| f.to_string_lossy())
                        ))
                    }
                });
                let instance = boot(model, &sensors, log_path.as_deref())?;
                handles.push((name, DeviceHandle::new(instance, load_backend(b)?)));
            }
            let router = app(handles, &ServerOptions { cors, static_dir });
            tokio::runtime::Runtime::new()?.block_on(serve(router, bind))?;
        }
        Cmd::Evaluate {
            device,
            testset,
            train,
            student,
            judge,
            seed,
            out,
            csv,
        } => {
            let model = load_device(&device)?;
            let student = load_backend(&student)?;
            let judge = load_backend(&judge)?;
            let test = jsonl::read(&testset).with_context(|| format!("reading {}", testset.display()))?;
            let trials = collect_trials(student.as_ref(), &model, &test, seed)?;
            let accuracy = setting_accuracy(&trials, judge.as_ref(), &model)?;
            let similarity = match train {
                Some(p) => Some(similarity_report(&trials, &jsonl::read(&p)?)),
                None => None,
            };
            if let Some(p) = csv {
                std::fs::write(&p, accuracy.per_field_csv())?;
            }
            let report = EvaluationReport {
                version: 1,
                device: model.device_name().to_string(),
                trials: trials.len(),
                accuracy,
                similarity,
            };
            write_json(&out, &report)?;
            println!(
                "overall accuracy {:.3} ± {:.3} over {} judged trials ({} unjudged)",
                report.accuracy.overall.fraction,
                report.accuracy.overall.ci90_half_width,
                report.accuracy.overall.total,
                report.accuracy.unjudged
            );
        }
        Cmd::Bench {
            device,
            backend,
            commands,
            repetitions,
            out,
        } => {
            let model = load_device(&device)?;
            let backend = load_backend(&backend)?;
            let cmds: Vec<LatencyCommand> = jsonl::read(&commands)?;
            let mut instance = DeviceInstance::simulated(model);
            let report = run_latency_harness(&mut instance, backend.as_ref(), &cmds, repetitions)?;
            match out {
                Some(p) => write_json(&p, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
    }
    Ok(())
}
