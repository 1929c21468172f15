//! `duolog`: run scenarios, benchmarks, model fits and the architecture advisor.
//!
//! Exit codes: 0 pass, 1 verified failure, 2 usage or I/O error, 3 advisor
//! found no matching row.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use duolog_core::advisor::{self, FeatureVector, Throughput, YesNo};
use duolog_core::bench::{self, ExportFormat, Profile, Sweep, SweepParam, ThroughputSample, WorkloadSpec};
use duolog_core::exchbroker::{ExchBroker, ExchConfig, Topology};
use duolog_core::fsutil::write_atomic;
use duolog_core::harness::{self, Scenario, Verdict};
use duolog_core::model::{self, presets, Constants, FitResult, KafkaThroughputModel, ModelForm, RabbitThroughputModel};
use duolog_core::EngineKind;

const PASS: u8 = 0;
const FAIL: u8 = 1;
const ERROR: u8 = 2;
const NO_MATCH: u8 = 3;

#[derive(Parser)]
#[command(name = "duolog", version, about = "Embedded pub/sub brokers: verify, bench, model, advise")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a fault-injection scenario and print its correctness report.
    Verify(VerifyArgs),
    /// Measure throughput and latency, optionally over a parameter sweep.
    Bench(BenchArgs),
    /// Fit or evaluate the analytic throughput models.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Recommend architectures for a requirement vector.
    Advise(AdviseArgs),
    /// Work with exchange topology files.
    #[command(subcommand)]
    Topo(TopoCmd),
}

#[derive(Args)]
struct VerifyArgs {
    /// Scenario JSON file.
    scenario: PathBuf,
    /// Also write the journals and phase events as JSON lines.
    #[arg(long)]
    journal: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Engine {
    Log,
    Exch,
}

impl From<Engine> for EngineKind {
    fn from(e: Engine) -> Self {
        match e {
            Engine::Log => EngineKind::Log,
            Engine::Exch => EngineKind::Exch,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "log")]
    engine: Engine,
    /// `param=v1,v2,...` over record_size, topics, partitions, replication,
    /// ack_mode or confirm_window.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long, default_value_t = 1)]
    producers: usize,
    #[arg(long, default_value_t = 1)]
    consumers: usize,
    /// Record size in bytes.
    #[arg(long, default_value_t = 100)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    partitions: u32,
    #[arg(long, default_value_t = 1)]
    topics: usize,
    #[arg(long, default_value_t = 1)]
    replication: u32,
    /// Log acks (0, 1, all) or exchange delivery (at_most_once, at_least_once).
    #[arg(long)]
    acks: Option<String>,
    /// Run length in seconds; defaults come from DUOLOG_PROFILE (desk or full).
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Results file; `.jsonl` selects JSON lines, anything else CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also replay every sweep point through the deterministic harness and
    /// write its journals next to the results.
    #[arg(long)]
    deterministic: bool,
    /// Messages per producer in deterministic replays.
    #[arg(long, default_value_t = 50)]
    messages: u64,
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Fit model constants to a results CSV.
    Fit {
        #[arg(long, value_enum)]
        form: Form,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict packets per second.
    Predict {
        #[arg(value_enum)]
        form: Form,
        #[arg(long)]
        producers: u32,
        /// Record size in bytes.
        #[arg(long)]
        size: u64,
        #[arg(long, default_value_t = 1)]
        partitions: u32,
        #[arg(long, default_value_t = 1)]
        topics: u32,
        /// Producer batch size; the log model uses max(batch, size).
        #[arg(long, default_value_t = 0)]
        batch_bytes: u64,
        /// Constants from a fit file.
        #[arg(long, conflicts_with = "preset")]
        constants: Option<PathBuf>,
        /// Built-in constants: no-replication, replicated-queue, acks0, acks1, acks-all-rep2.
        #[arg(long)]
        preset: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Form {
    Rabbit,
    Kafka,
}

impl From<Form> for ModelForm {
    fn from(f: Form) -> Self {
        match f {
            Form::Rabbit => ModelForm::Rabbit,
            Form::Kafka => ModelForm::Kafka,
        }
    }
}

#[derive(Args)]
struct AdviseArgs {
    #[arg(long)]
    latency: YesNo,
    #[arg(long)]
    routing: YesNo,
    #[arg(long)]
    storage: YesNo,
    #[arg(long)]
    topic_throughput: YesNo,
    #[arg(long)]
    order: YesNo,
    #[arg(long)]
    elasticity: YesNo,
    #[arg(long)]
    throughput: Throughput,
    #[arg(long)]
    at_least_once: YesNo,
    #[arg(long)]
    ha: YesNo,
}

#[derive(Subcommand)]
enum TopoCmd {
    /// Check a topology file and try declaring it on a scratch broker.
    Validate { file: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { ERROR } else { PASS });
        }
    };
    let result = match cli.cmd {
        Command::Verify(a) => verify(a),
        Command::Bench(a) => run_bench(a),
        Command::Model(m) => run_model(m),
        Command::Advise(a) => advise(a),
        Command::Topo(TopoCmd::Validate { file }) => topo_validate(&file),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(ERROR)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

fn verify(a: VerifyArgs) -> Result<u8> {
    let scenario = Scenario::from_json(&read(&a.scenario)?)?;
    let (outcome, report, verdict) = harness::evaluate(&scenario)?;
    if let Some(path) = &a.journal {
        write_atomic(path, outcome.to_jsonl().as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    match verdict {
        Verdict::Pass => Ok(PASS),
        Verdict::Fail(reasons) => {
            eprintln!("FAIL: {}", reasons.join(", "));
            Ok(FAIL)
        }
    }
}

/// Everything a bench run is configured with, checked before any work starts.
#[derive(Serialize)]
struct RunConfig {
    engine: EngineKind,
    workload: WorkloadSpec,
    sweep: Option<String>,
    seed: u64,
    out: PathBuf,
    format: ExportFormat,
    deterministic: bool,
}

impl RunConfig {
    fn from_args(a: &BenchArgs) -> Result<Self> {
        let (duration, warmup) = Profile::from_env().duration_warmup();
        let mut w = WorkloadSpec {
            engine: a.engine.into(),
            producers: a.producers,
            consumers: a.consumers,
            record_size_bytes: a.size,
            partitions: a.partitions,
            topics: a.topics,
            replication_factor: a.replication,
            duration_s: a.duration.unwrap_or(duration),
            warmup_s: a.warmup.unwrap_or(warmup),
            seed: a.seed,
            ..Default::default()
        };
        if let Some(acks) = &a.acks {
            w = w.with_param(SweepParam::AckMode, acks)?;
        }
        w.validate()?;
        if let Some(s) = &a.sweep {
            // Each point must form a valid workload too.
            let sweep: Sweep = s.parse()?;
            for v in &sweep.values {
                w.with_param(sweep.param, v)?.validate()?;
            }
        }
        let dir = match a.out.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        if !dir.is_dir() {
            bail!("output directory {} does not exist", dir.display());
        }
        if fs::metadata(&dir)?.permissions().readonly() {
            bail!("output directory {} is not writable", dir.display());
        }
        let format = match a.out.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => ExportFormat::Jsonl,
            _ => ExportFormat::Csv,
        };
        Ok(RunConfig {
            engine: w.engine,
            seed: w.seed,
            workload: w,
            sweep: a.sweep.clone(),
            out: a.out.clone(),
            format,
            deterministic: a.deterministic,
        })
    }

    fn points(&self) -> Result<Vec<WorkloadSpec>> {
        match &self.sweep {
            None => Ok(vec![self.workload.clone()]),
            Some(s) => {
                let sweep: Sweep = s.parse()?;
                Ok(sweep.values.iter().map(|v| self.workload.with_param(sweep.param, v)).collect::<Result<_, _>>()?)
            }
        }
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

fn host_name() -> String {
    fs::read_to_string("/proc/sys/kernel/hostname")
        .map(|s| s.trim().to_string())
        .or_else(|_| std::env::var("HOSTNAME"))
        .unwrap_or_else(|_| "unknown".to_string())
}

fn run_bench(a: BenchArgs) -> Result<u8> {
    let cfg = RunConfig::from_args(&a)?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);

    let results: Vec<ThroughputSample> = match &cfg.sweep {
        Some(s) => bench::run_throughput(&cfg.workload, &s.parse()?)?,
        None => vec![bench::run_single(&cfg.workload)?],
    };
    bench::export(&results, &cfg.out, cfg.format)?;
    for r in &results {
        eprintln!("{} {}={} {:.0} pps", r.engine.as_str(), r.sweep_param, r.sweep_value, r.pps);
    }

    let mut journals = Vec::new();
    if cfg.deterministic {
        let mut text = String::new();
        for point in cfg.points()? {
            let outcome = harness::replay(&Scenario::from_workload(&point, a.messages))?;
            text.push_str(&outcome.to_jsonl());
        }
        let path = sibling(&cfg.out, ".journal.jsonl");
        write_atomic(&path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
        journals.push(path);
    }

    let meta = serde_json::json!({
        "duolog_version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "host": host_name(),
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "cpus": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        "started_unix_s": started,
        "config": &cfg,
        "results": &cfg.out,
        "journals": journals,
    });
    write_json(&sibling(&cfg.out, ".meta.json"), &meta)?;
    Ok(PASS)
}

fn run_model(cmd: ModelCmd) -> Result<u8> {
    match cmd {
        ModelCmd::Fit { form, input, out } => {
            let samples = model::samples_from_csv(read(&input)?.as_bytes())?;
            let fit = model::fit(&samples, form.into())?;
            write_json(&out, &fit)?;
            println!("mean relative error {:.4} over {} samples", fit.mean_relative_error, fit.samples_used);
            Ok(PASS)
        }
        ModelCmd::Predict { form, producers, size, partitions, topics, batch_bytes, constants, preset } => {
            if producers == 0 || partitions == 0 || topics == 0 || size == 0 {
                bail!("producers, partitions, topics and size must be at least 1");
            }
            let c = match (constants, preset) {
                (Some(path), _) => load_constants(&path)?,
                (None, Some(name)) => match form {
                    Form::Rabbit => Constants::Rabbit(presets::rabbit(&name).ok_or_else(|| anyhow!("unknown rabbit preset {name:?}"))?),
                    Form::Kafka => Constants::Kafka(presets::kafka(&name).ok_or_else(|| anyhow!("unknown kafka preset {name:?}"))?),
                },
                (None, None) => bail!("give --constants or --preset"),
            };
            let pps = match (form, c) {
                (Form::Rabbit, Constants::Rabbit(m)) => model::predict_rabbit(producers, size, &m),
                (Form::Kafka, Constants::Kafka(m)) => {
                    model::predict_kafka(producers, partitions, topics, model::effective_size(batch_bytes, size), &m)
                }
                _ => bail!("constants do not belong to the {} form", form.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default()),
            };
            println!("{pps:.1}");
            Ok(PASS)
        }
    }
}

/// A fit file, or a bare constants object of either form.
fn load_constants(path: &Path) -> Result<Constants> {
    let text = read(path)?;
    if let Ok(f) = serde_json::from_str::<FitResult>(&text) {
        return Ok(f.constants);
    }
    if let Ok(c) = serde_json::from_str::<Constants>(&text) {
        return Ok(c);
    }
    if let Ok(k) = serde_json::from_str::<KafkaThroughputModel>(&text) {
        return Ok(Constants::Kafka(k));
    }
    serde_json::from_str::<RabbitThroughputModel>(&text)
        .map(Constants::Rabbit)
        .with_context(|| format!("{} holds no model constants", path.display()))
}

fn advise(a: AdviseArgs) -> Result<u8> {
    let fv = FeatureVector {
        predictable_latency: a.latency,
        complex_routing: a.routing,
        long_term_storage: a.storage,
        very_large_throughput_per_topic: a.topic_throughput,
        packet_order_important: a.order,
        dynamic_elasticity: a.elasticity,
        system_throughput: a.throughput,
        at_least_once: a.at_least_once,
        high_availability: a.ha,
    };
    let recs = advisor::recommend(&fv);
    if recs.is_empty() {
        eprintln!("no row matches {fv}");
        return Ok(NO_MATCH);
    }
    for r in recs {
        println!("{r}");
    }
    Ok(PASS)
}

fn topo_validate(file: &Path) -> Result<u8> {
    let topo = Topology::from_json(&read(file)?).with_context(|| format!("parsing {}", file.display()))?;
    let mut problems = topo.validate().err().unwrap_or_default();
    if problems.is_empty() {
        if let Err(e) = topo.apply(&ExchBroker::new(ExchConfig::default())) {
            problems.push(e.to_string());
        }
    }
    if problems.is_empty() {
        println!(
            "ok: {} exchanges, {} queues, {} bindings",
            topo.exchanges.len(),
            topo.queues.len(),
            topo.bindings.len()
        );
        return Ok(PASS);
    }
    for p in &problems {
        println!("{p}");
    }
    Ok(FAIL)
}
