//! `qdm`: generate toy data, pretrain, quantize, fine-tune scales, sample,
//! evaluate and analyze from one run configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use qdm_core::analysis::{self, Axis};
use qdm_core::diffusion::{gen_dataset, sample, Denoiser, ScaleSource};
use qdm_core::experts::ExpertBank;
use qdm_core::io::export::{csv_bytes, ratio_csv, ratio_pgm, write_csv, write_pgm_grid};
use qdm_core::io::{self as qio, PackMeta, RunConfig};
use qdm_core::quantizer::quantize_model;
use qdm_core::training::{self, Method};
use qdm_core::{Error, Result};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "qdm", version, about = "Scale-only fine-tuning of quantized toy diffusion models")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Opts {
    /// Run configuration (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Weight bit width (4 or 8).
    #[arg(long, global = true, value_parser = parse_bits)]
    bits: Option<u8>,
    /// Fine-tuning method: baseline or tuneqdm.
    #[arg(long, global = true, value_parser = parse_method)]
    method: Option<Method>,
    /// Number of timestep experts.
    #[arg(long, global = true)]
    experts: Option<usize>,
    /// DDIM sampling steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// DDIM stochasticity in [0, 1].
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// Seed for the command's random streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Mean of the input-channel scale init.
    #[arg(long, global = true)]
    scale_init_mean: Option<f64>,
    /// Standard deviation of the input-channel scale init.
    #[arg(long, global = true)]
    scale_init_std: Option<f64>,
    /// Prior-preservation weight.
    #[arg(long, global = true)]
    lambda_prior: Option<f64>,
    /// Training iterations for pretrain/finetune.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Task id naming the scale pack.
    #[arg(long, global = true)]
    task: Option<String>,
    /// Scale pack to load (defaults to `<out>/<task>.tqsp` where one is needed).
    #[arg(long, global = true)]
    pack: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the configured datasets as PGM grids.
    GenData,
    /// Train the full-precision denoiser.
    Pretrain,
    /// Quantize the pretrained checkpoint.
    Quantize,
    /// Fine-tune a scale bank against the quantized checkpoint.
    Finetune,
    /// Draw samples with DDIM.
    Sample {
        /// Use the post-training scales instead of a pack.
        #[arg(long)]
        ptq: bool,
    },
    /// Eval loss and Fréchet pixel distance on the eval dataset.
    Eval {
        #[arg(long)]
        ptq: bool,
    },
    /// Change-ratio maps, channel statistics, structural audit and storage.
    Analyze,
    /// Dequantized matmul microbenchmark.
    Bench {
        #[arg(long, default_value_t = 9)]
        repetitions: usize,
    },
}

fn parse_bits(s: &str) -> std::result::Result<u8, String> {
    match s.parse::<u8>() {
        Ok(b @ (4 | 8)) => Ok(b),
        _ => Err(format!("unsupported bit width {s:?}; valid widths are 4 and 8")),
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    match s {
        "baseline" => Ok(Method::Baseline),
        "tuneqdm" => Ok(Method::Tuneqdm),
        _ => Err(format!("unknown method {s:?}; expected baseline or tuneqdm")),
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    opts: Opts,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn pack_path(&self) -> PathBuf {
        self.opts
            .pack
            .clone()
            .unwrap_or_else(|| self.path(&format!("{}.tqsp", self.cfg.task_id)))
    }
}

fn load_config(opts: &Opts) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(b) = opts.bits {
        cfg.quantize.bits = b;
        cfg.finetune.bits = b;
    }
    if let Some(m) = opts.method {
        cfg.finetune.method = m;
    }
    if let Some(n) = opts.experts {
        cfg.finetune.n_experts = n;
    }
    if let Some(s) = opts.steps {
        cfg.sample.n_steps = s;
        cfg.eval.n_steps = s;
    }
    if let Some(e) = opts.eta {
        cfg.sample.eta = e;
        cfg.eval.eta = e;
    }
    if let Some(s) = opts.seed {
        cfg.pretrain.seed = s;
        cfg.finetune.seed = s;
        cfg.sample.seed = s;
    }
    if let Some(m) = opts.scale_init_mean {
        cfg.finetune.scale_init.mean = m;
    }
    if let Some(s) = opts.scale_init_std {
        cfg.finetune.scale_init.std = s;
    }
    if let Some(l) = opts.lambda_prior {
        cfg.finetune.lambda_prior = Some(l);
    }
    if let Some(i) = opts.iterations {
        cfg.pretrain.iterations = i;
        cfg.finetune.iterations = i;
    }
    if let Some(t) = &opts.task {
        cfg.task_id = t.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    qio::write_atomic(path, &bytes)
}

fn quantized(ctx: &Ctx) -> Result<qio::Checkpoint> {
    qio::load_checkpoint(&ctx.path("quantized.tqdm"))
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let d = &ctx.cfg.data;
    let mut specs = vec![("pretrain", d.pretrain.clone()), ("target", d.target.clone()), ("eval", d.eval_spec())];
    if let Some(p) = &d.prior {
        specs.push(("prior", p.clone()));
    }
    for (name, spec) in &specs {
        let data = gen_dataset(spec)?;
        let n = data.shape()[0].min(64);
        let idx: Vec<usize> = (0..n).collect();
        write_pgm_grid(&ctx.path(&format!("data_{name}.pgm")), &data.select(&idx), 8)?;
        info!("{name}: {} {} images", data.shape()[0], spec.family);
    }
    write_json(&ctx.path("datasets.json"), &specs.into_iter().collect::<std::collections::BTreeMap<_, _>>())
}

#[derive(Serialize)]
struct LossRow {
    iteration: usize,
    loss: f64,
}

fn pretrain(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let data = gen_dataset(&cfg.data.pretrain)?;
    let schedule = cfg.schedule.build()?;
    let model = Denoiser::<f32>::new(cfg.model.clone(), cfg.pretrain.seed)?;
    info!("pretraining {} parameters for {} iterations", model.param_count(), cfg.pretrain.iterations);
    let out = training::pretrain(model, &data, &schedule, &cfg.pretrain)?;
    let rows: Vec<LossRow> = out
        .losses
        .iter()
        .enumerate()
        .map(|(iteration, &loss)| LossRow { iteration, loss })
        .collect();
    write_csv(&ctx.path("pretrain_loss.csv"), &rows)?;
    qio::save_checkpoint(&ctx.path("pretrained.tqdm"), &out.model, &cfg.schedule)?;
    Ok(())
}

fn quantize(ctx: &Ctx) -> Result<()> {
    let ck = qio::load_checkpoint(&ctx.path("pretrained.tqdm"))?;
    let q = quantize_model(&ck.model, ctx.cfg.quantize.bits, ctx.cfg.quantize.policy)?;
    qio::save_checkpoint(&ctx.path("quantized.tqdm"), &q, &ck.schedule)?;
    let report = analysis::storage_report(&q, &ck.schedule, None)?;
    info!("compression {:.2}x", report.compression_ratio);
    write_json(&ctx.path("storage.json"), &report)
}

fn init_bank(ctx: &Ctx, model: &Denoiser<f32>, total_steps: usize) -> Result<ExpertBank<f32>> {
    let f = &ctx.cfg.finetune;
    ExpertBank::init(model, f.n_experts, total_steps, f.method.mode(), f.scale_init, f.seed)
}

#[derive(Serialize)]
struct FinetuneSummary<'a> {
    task_id: &'a str,
    method: Method,
    bits: u8,
    n_experts: usize,
    iterations: usize,
    trainable_params: usize,
    total_params: usize,
    initial_eval_loss: f64,
    final_eval_loss: f64,
    wall_time_s: f64,
    expert_updates: &'a [usize],
    samples_processed: usize,
    scalepack_bytes: u64,
}

fn finetune(ctx: &Ctx) -> Result<()> {
    let ck = quantized(ctx)?;
    let mut cfg = ctx.cfg.finetune.clone();
    if ctx.opts.bits.is_none() {
        if let Some(q) = ck.model.quant_layers().first() {
            cfg.bits = q.codes().bits();
        }
    }
    let schedule = ck.schedule.build()?;
    let target = gen_dataset(&ctx.cfg.data.target)?;
    let prior = ctx.cfg.data.prior.as_ref().map(gen_dataset).transpose()?;
    let eval_data = gen_dataset(&ctx.cfg.data.eval_spec())?;
    let mut bank = init_bank(ctx, &ck.model, schedule.steps())?;
    let eval_cfg = &ctx.cfg.eval;
    let before = training::eval_loss(&ck.model, ScaleSource::Bank(&bank), &eval_data, &schedule, cfg.seed, eval_cfg)?;
    let mut report = training::finetune(&ck.model, &mut bank, &target, prior.as_ref(), &schedule, &cfg, None)?;
    let after = training::eval_loss(&ck.model, ScaleSource::Bank(&bank), &eval_data, &schedule, cfg.seed, eval_cfg)?;
    report.final_eval_loss = Some(after);
    info!("eval loss {before:.5} -> {after:.5}");
    let meta = PackMeta {
        task_id: ctx.cfg.task_id.clone(),
        method: cfg.method,
        bits: cfg.bits,
        iterations: cfg.iterations,
        seed: cfg.seed,
    };
    let pack_bytes = qio::save_scalepack(&ctx.pack_path(), &bank, &meta)?;
    write_csv(&ctx.path("finetune_report.csv"), &report.rows)?;
    write_json(
        &ctx.path("finetune_summary.json"),
        &FinetuneSummary {
            task_id: &ctx.cfg.task_id,
            method: cfg.method,
            bits: cfg.bits,
            n_experts: cfg.n_experts,
            iterations: cfg.iterations,
            trainable_params: report.trainable_params,
            total_params: ck.model.param_count(),
            initial_eval_loss: before,
            final_eval_loss: after,
            wall_time_s: report.wall_time_s,
            expert_updates: &report.expert_updates,
            samples_processed: report.samples_processed,
            scalepack_bytes: pack_bytes,
        },
    )
}

fn with_source<T>(ctx: &Ctx, ptq: bool, f: impl FnOnce(&Denoiser<f32>, ScaleSource<'_, f32>, &qio::Checkpoint) -> Result<T>) -> Result<T> {
    let ck = quantized(ctx)?;
    if ptq {
        return f(&ck.model, ScaleSource::Ptq, &ck);
    }
    let (bank, _) = qio::load_scalepack(&ctx.pack_path(), &ck.model)?;
    f(&ck.model, ScaleSource::Bank(&bank), &ck)
}

fn sample_cmd(ctx: &Ctx, ptq: bool) -> Result<()> {
    with_source(ctx, ptq, |model, source, ck| {
        let out = sample(model, source, &ck.schedule.build()?, &ctx.cfg.sample)?;
        if out.guard_clamps > 0 {
            log::warn!("variance guard clamped {} steps", out.guard_clamps);
        }
        write_pgm_grid(&ctx.path("samples.pgm"), &out.images, 8)
    })
}

fn eval_cmd(ctx: &Ctx, ptq: bool) -> Result<()> {
    let data = gen_dataset(&ctx.cfg.data.eval_spec())?;
    with_source(ctx, ptq, |model, source, ck| {
        let schedule = ck.schedule.build()?;
        let report = training::evaluate(model, source, &data, &schedule, ctx.cfg.sample.seed, &ctx.cfg.eval)?;
        info!("eval loss {:.5}, frechet {:.3}", report.loss, report.frechet);
        write_json(&ctx.path("eval.json"), &report)
    })
}

#[derive(Serialize)]
struct StatsRow<'a> {
    layer: &'a str,
    expert: usize,
    axis: Axis,
    channel: usize,
    min: Option<f64>,
    q1: Option<f64>,
    median: Option<f64>,
    q3: Option<f64>,
    max: Option<f64>,
}

fn analyze(ctx: &Ctx) -> Result<()> {
    let ck = quantized(ctx)?;
    let (tuned, meta) = qio::load_scalepack(&ctx.pack_path(), &ck.model)?;
    let init = ExpertBank::init(
        &ck.model,
        tuned.n_experts(),
        tuned.total_steps(),
        tuned.mode(),
        ctx.cfg.finetune.scale_init,
        meta.seed,
    )?;
    let dir = ctx.path("analysis");
    let mut stats = Vec::new();
    for (l, layer) in ck.model.quant_layers().into_iter().enumerate() {
        for e in 0..tuned.n_experts() {
            let map = analysis::layer_change_ratio(layer, &init.expert(e)[l], &tuned.expert(e)[l])?;
            let stem = format!("ratio_{}_e{e}", layer.name);
            qio::write_atomic(&dir.join(format!("{stem}.csv")), &ratio_csv(&map))?;
            qio::write_atomic(&dir.join(format!("{stem}.pgm")), &ratio_pgm(&map))?;
            for axis in [Axis::Out, Axis::In] {
                for (channel, s) in analysis::channel_stats(&map, axis).into_iter().enumerate() {
                    stats.push(StatsRow {
                        layer: &layer.name,
                        expert: e,
                        axis,
                        channel,
                        min: s.map(|s| s.min),
                        q1: s.map(|s| s.q1),
                        median: s.map(|s| s.median),
                        q3: s.map(|s| s.q3),
                        max: s.map(|s| s.max),
                    });
                }
            }
        }
    }
    qio::write_atomic(&dir.join("channel_stats.csv"), &csv_bytes(&stats)?)?;
    let audit = analysis::audit(&ck.model, &init, &tuned, 1e-5)?;
    write_json(&dir.join("audit.json"), &audit)?;
    let storage = analysis::storage_report(&ck.model, &ck.schedule, Some((&tuned, &meta)))?;
    write_json(&dir.join("storage.json"), &storage)?;
    if !audit.passed() {
        return Err(Error::Correctness("structural audit failed; see audit.json".into()));
    }
    Ok(())
}

fn bench(ctx: &Ctx, repetitions: usize) -> Result<()> {
    let sizes = [(16, 64, 64), (64, 256, 256), (64, 1024, 1024)];
    let mut rows = analysis::bench_dequant_matmul(&sizes, ctx.cfg.quantize.bits, repetitions, 0)?;
    rows.extend(analysis::bench_dequant_matmul(&sizes, if ctx.cfg.quantize.bits == 4 { 8 } else { 4 }, repetitions, 0)?);
    write_csv(&ctx.path("bench.csv"), &rows)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.opts)?;
    let ctx = Ctx {
        out: cli.opts.out.clone(),
        cfg,
        opts: cli.opts,
    };
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::Io {
        path: ctx.out.clone(),
        source: e,
    })?;
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Pretrain => pretrain(&ctx),
        Command::Quantize => quantize(&ctx),
        Command::Finetune => finetune(&ctx),
        Command::Sample { ptq } => sample_cmd(&ctx, ptq),
        Command::Eval { ptq } => eval_cmd(&ctx, ptq),
        Command::Analyze => analyze(&ctx),
        Command::Bench { repetitions } => bench(&ctx, repetitions),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}

