//! `pioner`: command-line workflows over the captioning pipeline.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
//! Every setting resolves as flag, then `--config` file (or `PIONER_CONFIG`),
//! then built-in default.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use pioner_core::backbones::{build_backbone, open_image, Backbone};
use pioner_core::decoder::{train, DecoderCheckpoint, Mitigation, TrainSpec};
use pioner_core::evalharness::{
    convert, load_dataset, run_task, write_samples, EchoCaptioner, MetricSet, RegionCaptioner, RunOptions, Task,
};
use pioner_core::gap::MemoryBank;
use pioner_core::pipeline::{load_captioner, Captioner};
use pioner_core::tracebench::{build_benchmark, read_narratives, write_jsonl, BuildOptions, FixtureLlm, HttpLlm, LlmClient};
use pioner_core::types::parse_region_spec;
use pioner_core::{Config, ImageSize};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "pioner", version, about = "Region captioning from dense patch embeddings")]
struct Cli {
    /// JSON config file of dotted keys, e.g. {"gap.mode": "noise"}.
    #[arg(long, global = true, env = "PIONER_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides any config key: --set train.lr=0.001 (value parsed as JSON, else string).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Log verbosity: error, warn, info, debug.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the text-only decoder on a caption corpus (one caption per line).
    TrainDecoder(TrainArgs),
    /// Embed a text corpus into a memory bank for the gap projection.
    BuildMemory(MemoryArgs),
    /// Caption one region of one image.
    Caption(CaptionArgs),
    /// Run an evaluation task over a JSONL dataset.
    Eval(EvalArgs),
    /// Trace benchmark tooling.
    Tracebench {
        #[command(subcommand)]
        command: TraceCommand,
    },
    /// Serve the HTTP captioning API.
    Serve(ServeArgs),
    /// Convert public annotation files into task JSONL.
    Convert {
        #[command(subcommand)]
        format: ConvertFormat,
    },
}

#[derive(Subcommand)]
enum ConvertFormat {
    /// Karpathy-split dataset_*.json to image-task samples.
    Karpathy {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Prefix joined with each entry's filepath/filename.
        #[arg(long, default_value = ".")]
        image_root: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Visual Genome region_descriptions.json to dense-task samples.
    VisualGenome {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "{id}.jpg")]
        image_template: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Entities-style grounded captions to region-set samples.
    Entities {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "{id}.jpg")]
        image_template: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// memory, noise or none.
    #[arg(long)]
    mitigation: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct MemoryArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    image: PathBuf,
    /// region-spec/v1 JSON, e.g. '{"kind":"box","box":[0,0,100,80]}'.
    #[arg(long)]
    region: String,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    bank: Option<PathBuf>,
    /// uniform, gaussian or attention.
    #[arg(long)]
    aggregation: Option<String>,
    /// Also print the patch selection as JSON.
    #[arg(long)]
    weights: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    task: Task,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    aggregation: Option<String>,
    /// JSON report; a text table is written next to it.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-sample JSONL dump.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Answer every sample with its first reference; tests the metric plumbing.
    #[arg(long)]
    echo_stub: bool,
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Split narratives into per-sentence traces and rewrite the captions.
    Build(TraceBuildArgs),
}

#[derive(Args)]
struct TraceBuildArgs {
    /// Localized-narratives JSONL.
    #[arg(long)]
    narratives: PathBuf,
    /// OpenAI-compatible chat completions URL.
    #[arg(long, conflicts_with = "llm_fixture")]
    llm: Option<String>,
    /// JSON map from input sentence to recorded LLM output, used instead of --llm.
    #[arg(long)]
    llm_fixture: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Image path per record; `{id}` is replaced by the image id.
    #[arg(long, default_value = "{id}.jpg")]
    image_template: String,
    /// Per-sentence status report (all samples, including rejected ones).
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    bank: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = Result<(), Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

/// Resolved config plus the keys that were set explicitly.
struct Settings {
    cfg: Config,
    explicit: BTreeSet<String>,
}

impl Settings {
    fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Failure> {
        let mut explicit = BTreeSet::new();
        let cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())).map_err(usage)?;
                if let Ok(Value::Object(m)) = serde_json::from_str::<Value>(&text) {
                    explicit.extend(m.keys().cloned());
                }
                Config::from_json_str(&text).with_context(|| format!("config {}", p.display())).map_err(usage)?
            }
            None => Config::default(),
        };
        let mut s = Self { cfg, explicit };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got `{o}`")))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            s.set(k, v)?;
        }
        Ok(s)
    }

    fn set(&mut self, key: &str, v: Value) -> Result<(), Failure> {
        self.cfg.set(key, v).map_err(usage)?;
        self.explicit.insert(key.to_string());
        Ok(())
    }

    fn set_opt<T: Into<Value>>(&mut self, key: &str, v: Option<T>) -> Result<(), Failure> {
        match v {
            Some(v) => self.set(key, v.into()),
            None => Ok(()),
        }
    }

    fn set_path(&mut self, key: &str, p: &Option<PathBuf>) -> Result<(), Failure> {
        self.set_opt(key, p.as_ref().map(|p| p.display().to_string()))
    }

    /// Adopts the checkpoint's gap mode unless one was chosen explicitly, so
    /// a noise- or none-trained decoder works without extra flags.
    fn adopt_checkpoint_mode(&mut self, ckpt: &DecoderCheckpoint) {
        if !self.explicit.contains("gap.mode") {
            self.cfg.gap.mode = ckpt.mitigation.mode;
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    let lines: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect();
    if lines.is_empty() {
        return Err(usage(anyhow!("{} contains no captions", path.display())));
    }
    Ok(lines)
}

fn backbone(cfg: &Config) -> Result<Arc<dyn Backbone>, Failure> {
    build_backbone(&cfg.backbone).context("loading backbone").map_err(usage)
}

fn train_decoder(mut s: Settings, a: TrainArgs) -> Outcome {
    s.set_opt("gap.mode", a.mitigation)?;
    s.set_opt("train.epochs", a.epochs)?;
    s.set_opt("train.lr", a.lr)?;
    s.set_opt("train.batch_size", a.batch)?;
    s.set_opt("train.seed", a.seed)?;
    s.set_opt("train.weight_decay", a.weight_decay)?;
    s.set_opt("gap.sigma2", a.sigma2)?;
    if a.max_steps == Some(0) {
        return Err(usage(anyhow!("--max-steps must be >= 1")));
    }
    let cfg = &s.cfg;
    let corpus = read_lines(&a.corpus)?;
    let adapter = backbone(cfg)?;
    let spec = TrainSpec {
        corpus_id: a.corpus.display().to_string(),
        epochs: cfg.train.epochs,
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        batch_size: cfg.train.batch_size,
        mitigation: Mitigation { mode: cfg.gap.mode, sigma2: cfg.gap.sigma2 },
        seed: cfg.train.seed,
        deterministic: cfg.train.deterministic,
        layers: cfg.decoder.layers,
        heads: cfg.decoder.heads,
        d_model: cfg.decoder.d_model,
        max_len: cfg.decoder.max_len,
        max_steps: a.max_steps,
        ..TrainSpec::new(corpus)
    };
    let (ckpt, log) = train(&spec, adapter.as_ref()).context("training failed").map_err(runtime)?;
    ckpt.save(&a.out).with_context(|| format!("writing {}", a.out.display())).map_err(runtime)?;
    let log_path = a.out.with_extension("log.json");
    let log_json = json!({"meta": ckpt.meta, "step_losses": log.step_losses, "epoch_losses": log.epoch_losses});
    fs::write(&log_path, serde_json::to_string_pretty(&log_json).map_err(runtime)?).map_err(runtime)?;
    let last = log.step_losses.last().copied().unwrap_or(f64::NAN);
    println!("wrote {} ({} steps, final loss {last:.4}); log {}", a.out.display(), ckpt.meta.steps, log_path.display());
    Ok(())
}

fn build_memory(mut s: Settings, a: MemoryArgs) -> Outcome {
    s.set_opt("gap.tau", a.tau)?;
    let corpus = read_lines(&a.corpus)?;
    let adapter = backbone(&s.cfg)?;
    let bank = MemoryBank::build(&corpus, adapter.as_ref(), s.cfg.gap.tau).context("building memory bank").map_err(runtime)?;
    bank.save(&a.out).with_context(|| format!("writing {}", a.out.display())).map_err(runtime)?;
    println!("wrote {} (N={}, D={}, tau={})", a.out.display(), bank.len(), bank.dim(), bank.tau());
    Ok(())
}

/// Builds the captioner from `decoder.checkpoint` and, in memory mode, `gap.bank`.
fn captioner(s: &mut Settings) -> Result<Captioner, Failure> {
    let path = s.cfg.decoder.checkpoint.clone().ok_or_else(|| usage(anyhow!("no decoder checkpoint: pass --ckpt")))?;
    let ckpt = DecoderCheckpoint::load(&path).with_context(|| format!("loading {}", path.display())).map_err(usage)?;
    s.adopt_checkpoint_mode(&ckpt);
    load_captioner(&s.cfg).context("building captioner").map_err(usage)
}

fn caption(mut s: Settings, a: CaptionArgs) -> Outcome {
    s.set_path("decoder.checkpoint", &a.ckpt)?;
    s.set_path("gap.bank", &a.bank)?;
    s.set_opt("regions.aggregation", a.aggregation)?;
    let spec = parse_region_spec(&a.region).context("invalid --region").map_err(usage)?;
    let captioner = captioner(&mut s)?;
    let adapter = backbone(&s.cfg)?;
    let image = open_image(&a.image).with_context(|| format!("reading {}", a.image.display())).map_err(usage)?;
    let grid = adapter.encode_image(&image).context("encoding image").map_err(runtime)?;
    let size = ImageSize::new(image.width(), image.height());
    let out = captioner.caption_grid(&grid, size, &spec).map_err(|e| match e {
        // bad regions mirror the service's 422
        pioner_core::pipeline::PipelineError::Region(r) => usage(r),
        other => runtime(other),
    })?;
    println!("{}", out.caption.text);
    if a.weights {
        println!("{}", json!({"indices": out.patch_indices, "weights": out.patch_weights}));
    }
    Ok(())
}

fn eval(mut s: Settings, a: EvalArgs) -> Outcome {
    s.set_path("decoder.checkpoint", &a.ckpt)?;
    s.set_path("gap.bank", &a.bank)?;
    s.set_opt("regions.aggregation", a.aggregation)?;
    s.set_opt("eval.jobs", a.jobs)?;
    let dataset = load_dataset(a.task, &a.dataset).context("loading dataset").map_err(usage)?;
    if !dataset.skipped.is_empty() {
        eprintln!("skipped {} malformed records", dataset.skipped.len());
    }
    let real;
    let captioner: &dyn RegionCaptioner = if a.echo_stub {
        &EchoCaptioner
    } else {
        real = captioner(&mut s)?;
        &real
    };
    let opts = RunOptions {
        jobs: s.cfg.eval.jobs,
        metrics: MetricSet::from_config(&s.cfg).map_err(usage)?,
        config_snapshot: s.cfg.snapshot(),
        dump_path: a.dump.clone(),
    };
    let (report, _) = run_task(&dataset, backbone(&s.cfg)?, captioner, &opts).context("evaluation failed").map_err(runtime)?;
    if let Some(p) = &a.report {
        report.write(p).with_context(|| format!("writing {}", p.display())).map_err(runtime)?;
    }
    print!("{}", report.table());
    Ok(())
}

fn tracebench_build(mut s: Settings, a: TraceBuildArgs) -> Outcome {
    s.set_opt("llm.url", a.llm.clone())?;
    let text = fs::read_to_string(&a.narratives).with_context(|| format!("reading {}", a.narratives.display())).map_err(usage)?;
    let records = read_narratives(&text).context("parsing narratives").map_err(usage)?;
    let cfg = &s.cfg;
    let llm: Box<dyn LlmClient> = match (&a.llm_fixture, &cfg.llm.url) {
        (Some(p), _) => Box::new(FixtureLlm::load(p).with_context(|| format!("loading {}", p.display())).map_err(usage)?),
        (None, Some(url)) => Box::new(HttpLlm::new(
            url.clone(),
            cfg.llm.model.clone(),
            Duration::from_secs(cfg.llm.timeout_secs),
            cfg.llm.rate_per_sec,
            cfg.llm.concurrency,
        )),
        (None, None) => return Err(usage(anyhow!("pass --llm URL, --llm-fixture FILE, or set llm.url"))),
    };
    let opts = BuildOptions {
        image_template: a.image_template.clone(),
        max_retries: cfg.llm.max_retries,
        concurrency: cfg.llm.concurrency,
    };
    let (samples, stats) = build_benchmark(&records, llm.as_ref(), &opts);
    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display())).map_err(runtime)?;
    let mut w = BufWriter::new(file);
    let written = write_jsonl(&samples, &mut w).map_err(runtime)?;
    w.flush().map_err(runtime)?;
    if let Some(p) = &a.stats {
        let body = json!({"stats": stats, "samples": samples});
        fs::write(p, serde_json::to_string_pretty(&body).map_err(runtime)?).map_err(runtime)?;
    }
    println!("{}", serde_json::to_string(&stats).map_err(runtime)?);
    eprintln!("wrote {written} samples to {}", a.out.display());
    if stats.records > 0 && written == 0 && stats.llm_failures > 0 {
        return Err(runtime(anyhow!("every rewrite failed; check the LLM endpoint")));
    }
    Ok(())
}

fn serve(mut s: Settings, a: ServeArgs) -> Outcome {
    s.set_opt("service.port", a.port)?;
    s.set_path("decoder.checkpoint", &a.ckpt)?;
    s.set_path("gap.bank", &a.bank)?;
    if let Some(p) = s.cfg.decoder.checkpoint.clone() {
        // an unreadable checkpoint is reported by /v1/health, not fatal
        if let Ok(ckpt) = DecoderCheckpoint::load(&p) {
            s.adopt_checkpoint_mode(&ckpt);
        }
    }
    let addr: SocketAddr = format!("{}:{}", a.host, s.cfg.service.port).parse().context("invalid --host").map_err(usage)?;
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    let state = Arc::new(pioner_service::AppState::from_config(s.cfg));
    rt.block_on(pioner_service::serve(state, addr, |bound| {
        println!("listening on http://{bound}");
        let _ = std::io::stdout().flush();
    }))
    .with_context(|| format!("serving on {addr}"))
    .map_err(runtime)
}

fn convert(format: ConvertFormat) -> Outcome {
    let read = |p: &Path| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(usage);
    let (task, samples, dropped, out) = match format {
        ConvertFormat::Karpathy { input, split, image_root, out } => {
            let samples = convert::karpathy(&read(&input)?, &split, &image_root).map_err(usage)?;
            (Task::Image, samples, 0, out)
        }
        ConvertFormat::VisualGenome { input, image_template, out } => {
            let (samples, dropped) = convert::visual_genome(&read(&input)?, &image_template).map_err(usage)?;
            (Task::Dense, samples, dropped, out)
        }
        ConvertFormat::Entities { input, image_template, out } => {
            let (samples, dropped) = convert::entities(&read(&input)?, &image_template).map_err(usage)?;
            (Task::RegionSet, samples, dropped, out)
        }
    };
    let file = fs::File::create(&out).with_context(|| format!("creating {}", out.display())).map_err(runtime)?;
    let mut w = BufWriter::new(file);
    write_samples(task, &samples, &mut w).and_then(|_| w.flush()).map_err(runtime)?;
    println!("wrote {} {task} samples to {} ({dropped} dropped)", samples.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let s = Settings::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::TrainDecoder(a) => train_decoder(s, a),
        Command::BuildMemory(a) => build_memory(s, a),
        Command::Caption(a) => caption(s, a),
        Command::Eval(a) => eval(s, a),
        Command::Tracebench { command: TraceCommand::Build(a) } => tracebench_build(s, a),
        Command::Serve(a) => serve(s, a),
        Command::Convert { format } => convert(format),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
