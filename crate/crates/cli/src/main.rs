//! `floe`: generate toy MoE models, calibrate and compress them, evaluate
//! the predictors, simulate offloaded decoding and tabulate the theory.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use floe_core::bench::{bench_masked_kernel, fit_compute_model};
use floe_core::model::{
    compress_model, forward_token, gen_model_with, gen_tokens, CompressedModel, ExpertBank, GenOptions, MoeConfig,
    MoeModel, COMPRESSED_MAGIC, DENSE_MAGIC,
};
use floe_core::offload::{
    report_tps, simulate_traces, timeline_csv, ChannelPrefetch, CompactLayout, ComputeModel, ExpertPrefetch, SimConfig,
    TransferModel,
};
use floe_core::predictors::{eval_inter, eval_reuse, train_inter, ExpertTrace, InterExpertPredictor, TrainConfig};
use floe_core::quant::{QuantConfig, DEFAULT_GROUP_SIZE};
use floe_core::sparsify::{calibrate, collect_stats, realized_density, ThresholdTable, DEFAULT_RESERVOIR};
use floe_core::theory::{default_etas, default_ps, fg_table, losses_table, mc_losses, GaussianSpec, ShiftedExpSpec};

#[derive(Parser, Debug)]
#[command(name = "floe", version, about = "Compressed MoE expert offloading toolkit")]
struct Cli {
    /// Root seed; every random stream in a run derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for calibration and Monte-Carlo; outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a random dense MoE model.
    GenModel(GenModelArgs),
    /// Sample up-projection activations and write per-expert thresholds.
    Calibrate(CalibrateArgs),
    /// Quantize up projections and attach thresholds.
    Compress(CompressArgs),
    /// Decode random tokens and log routing and channel density.
    Run(RunArgs),
    /// Train the expert lookahead and score both predictors.
    PredictEval(PredictEvalArgs),
    /// Simulate offloaded decoding and report tokens per second.
    Simulate(SimulateArgs),
    /// Tabulate removed-energy closed forms and Monte-Carlo losses.
    Theory(TheoryArgs),
    /// Time the masked gate/down kernel against the dense one.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenModelArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    experts: usize,
    #[arg(long)]
    topk: usize,
    #[arg(long)]
    dh: usize,
    #[arg(long)]
    di: usize,
    /// Scales the mixing matrices and down projections.
    #[arg(long, default_value_t = 1.0)]
    drift_scale: f32,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Target fraction of channels zeroed.
    #[arg(long, default_value_t = 0.8)]
    k: f64,
    #[arg(long, default_value_t = 512)]
    tokens: usize,
    /// Samples kept per expert.
    #[arg(long, default_value_t = DEFAULT_RESERVOIR)]
    reservoir: usize,
    /// Also write consecutive-layer cosine similarities here.
    #[arg(long)]
    similarity: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    thresholds: PathBuf,
    #[arg(long, default_value_t = 2)]
    bits: u8,
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    group_size: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Dense or compressed model file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct PredictEvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 512)]
    train_tokens: usize,
    #[arg(long, default_value_t = 256)]
    eval_tokens: usize,
    /// Experts fetched ahead per layer; defaults to the model's top-k.
    #[arg(long)]
    prefetch: Option<usize>,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    /// Score this predictor instead of training one.
    #[arg(long, conflicts_with = "save_predictor")]
    predictor: Option<PathBuf>,
    #[arg(long)]
    save_predictor: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExpertMode {
    Learned,
    Oracle,
    None,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ChannelMode {
    Reuse,
    Oracle,
    Full,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Compressed model file.
    #[arg(long)]
    model: PathBuf,
    /// Trained expert predictor, needed for `--experts learned`.
    #[arg(long)]
    predictor: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ExpertMode::Learned)]
    experts: ExpertMode,
    #[arg(long, value_enum, default_value_t = ChannelMode::Reuse)]
    channels: ChannelMode,
    /// Experts fetched ahead per layer; defaults to the model's top-k.
    #[arg(long)]
    prefetch: Option<usize>,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    /// Link bandwidth, bytes per second.
    #[arg(long, default_value_t = 25e9)]
    bandwidth: f64,
    /// Fixed cost per request, seconds.
    #[arg(long, default_value_t = 5e-6)]
    req_overhead: f64,
    /// Host-side gather rate, bytes per second.
    #[arg(long, default_value_t = 100e9)]
    pack_rate: f64,
    #[arg(long, default_value_t = 1)]
    streams: usize,
    /// Channel records per request.
    #[arg(long, default_value_t = 16)]
    chunk_size: usize,
    /// Nominal bytes per dense weight.
    #[arg(long, default_value_t = 2)]
    element_bytes: u64,
    /// Device bytes available for cached experts.
    #[arg(long)]
    vram_budget: u64,
    /// Ship gate columns and down channels as separate requests.
    #[arg(long)]
    split_layout: bool,
    /// Let first-layer experts be evicted like any other.
    #[arg(long)]
    no_pin_first_layer: bool,
    /// Fixed compute seconds per layer.
    #[arg(long, requires = "c1", conflicts_with = "bench_compute")]
    c0: Option<f64>,
    /// Compute seconds per flop.
    #[arg(long, required_unless_present = "bench_compute", conflicts_with = "bench_compute")]
    c1: Option<f64>,
    /// Fit c0 and c1 by timing one expert on this host (not reproducible).
    #[arg(long)]
    bench_compute: bool,
    /// Per-layer timeline CSV.
    #[arg(long)]
    timeline: Option<PathBuf>,
    /// Summary CSV.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Grid {
    Default,
}

#[derive(Args, Debug)]
struct TheoryArgs {
    #[arg(long, value_enum, default_value_t = Grid::Default)]
    grid: Grid,
    /// Also write Monte-Carlo pruning losses here.
    #[arg(long)]
    losses: Option<PathBuf>,
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    /// Rate of the shifted-exponential gate activation.
    #[arg(long, default_value_t = 11.0)]
    lambda: f64,
    /// Shift of the gate activation.
    #[arg(long, default_value_t = 0.28)]
    shift: f64,
    /// Standard deviation of the up activation.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 4096)]
    dh: usize,
    #[arg(long, default_value_t = 14336)]
    di: usize,
    #[arg(long, default_value_t = 0.9)]
    sparsity: f64,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Defaults to standard output.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

/// Independent sub-seeds for the token streams of one run.
fn stream_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const CALIBRATION_TOKENS: u64 = 1;
const RUN_TOKENS: u64 = 2;
const TRAIN_TOKENS: u64 = 3;
const EVAL_TOKENS: u64 = 4;
const SIM_TOKENS: u64 = 5;

/// Writes through a temp file in the target directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder
        .tempfile_in(dir)
        .with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

enum AnyModel {
    Dense(MoeModel),
    Compressed(CompressedModel),
}

fn load_any(path: &Path) -> Result<AnyModel> {
    let mut magic = [0u8; 4];
    File::open(path)
        .and_then(|f| BufReader::new(f).read_exact(&mut magic))
        .with_context(|| format!("reading {}", path.display()))?;
    if &magic == DENSE_MAGIC {
        Ok(AnyModel::Dense(load_dense(path)?))
    } else if &magic == COMPRESSED_MAGIC {
        Ok(AnyModel::Compressed(load_compressed(path)?))
    } else {
        bail!("{} is not a model file", path.display())
    }
}

fn load_dense(path: &Path) -> Result<MoeModel> {
    MoeModel::load(path).with_context(|| format!("loading dense model {}", path.display()))
}

fn load_compressed(path: &Path) -> Result<CompressedModel> {
    CompressedModel::load(path).with_context(|| format!("loading compressed model {}", path.display()))
}

fn gen_model_cmd(seed: u64, a: &GenModelArgs) -> Result<()> {
    let cfg = MoeConfig {
        layers: a.layers,
        experts: a.experts,
        top_k: a.topk,
        d_hidden: a.dh,
        d_intermediate: a.di,
        seed,
    };
    let model = gen_model_with(
        &cfg,
        &GenOptions {
            drift_scale: a.drift_scale,
        },
    )?;
    write_atomic(&a.output, &model.to_bytes())
}

fn calibrate_cmd(seed: u64, a: &CalibrateArgs) -> Result<()> {
    let model = load_dense(&a.model)?;
    let tokens = gen_tokens(model.config().d_hidden, a.tokens, stream_seed(seed, CALIBRATION_TOKENS));
    let (samples, sim) = collect_stats(&model, &tokens, a.reservoir, seed)?;
    let table = calibrate(&samples, a.k)?;
    write_atomic(&a.output, table.to_csv().as_bytes())?;
    if let Some(p) = &a.similarity {
        write_atomic(p, sim.to_csv().as_bytes())?;
    }
    Ok(())
}

fn compress_cmd(a: &CompressArgs) -> Result<()> {
    let model = load_dense(&a.model)?;
    let text = std::fs::read_to_string(&a.thresholds).with_context(|| format!("reading {}", a.thresholds.display()))?;
    let table = ThresholdTable::from_csv(&text)?;
    let q = compress_model(&model, &table, &QuantConfig::new(a.bits, a.group_size))?;
    write_atomic(&a.output, &q.to_bytes())
}

fn run_cmd(seed: u64, a: &RunArgs) -> Result<()> {
    let model = load_any(&a.model)?;
    let bank: &dyn ExpertBank = match &model {
        AnyModel::Dense(m) => m,
        AnyModel::Compressed(m) => m,
    };
    let cfg = *bank.config();
    let tokens = gen_tokens(cfg.d_hidden, a.tokens, stream_seed(seed, RUN_TOKENS));
    let mut csv = String::from("token,layer,expert,weight,active_channels,density,up_density\n");
    for (t, x) in tokens.iter().enumerate() {
        let trace = forward_token(bank, x)?;
        for (l, lt) in trace.layers.iter().enumerate() {
            for (slot, (&j, &w)) in lt.route.indices.iter().zip(&lt.route.weights).enumerate() {
                let active = lt.active[slot].len();
                let threshold = match &model {
                    AnyModel::Dense(_) => 0.0,
                    AnyModel::Compressed(m) => m.expert(l, j).threshold(),
                };
                let up_density = realized_density(&lt.up_activations[slot], threshold)?;
                csv.push_str(&format!(
                    "{t},{l},{j},{w},{active},{},{up_density}\n",
                    active as f64 / cfg.d_intermediate as f64
                ));
            }
        }
    }
    write_atomic(&a.output, csv.as_bytes())
}

fn predict_eval_cmd(seed: u64, a: &PredictEvalArgs) -> Result<()> {
    let model = load_compressed(&a.model)?;
    let cfg = *model.config();
    let traces = |n, tag| -> Result<Vec<_>> {
        gen_tokens(cfg.d_hidden, n, stream_seed(seed, tag))
            .iter()
            .map(|x| forward_token(&model, x).map_err(Into::into))
            .collect()
    };
    let train = traces(a.train_tokens, TRAIN_TOKENS)?;
    let held = traces(a.eval_tokens, EVAL_TOKENS)?;
    let (train_trace, held_trace) = (ExpertTrace::from_tokens(&train), ExpertTrace::from_tokens(&held));
    let predictor = match &a.predictor {
        Some(p) => InterExpertPredictor::load(p).with_context(|| format!("loading predictor {}", p.display()))?,
        None => {
            let tc = TrainConfig {
                learning_rate: a.lr,
                epochs: a.epochs,
                seed,
            };
            train_inter(&train_trace, cfg.experts, cfg.d_hidden, cfg.top_k, &tc)?
        }
    };
    let prefetch = a.prefetch.unwrap_or(cfg.top_k);
    let mut csv = String::from("predictor,split,layer,precision,recall,samples\n");
    let mut emit = |name: &str, split: &str, rows: Vec<(usize, floe_core::predictors::PredictionMetrics)>| {
        for (l, m) in rows {
            csv.push_str(&format!(
                "{name},{split},{l},{},{},{}\n",
                m.precision, m.recall, m.samples
            ));
        }
    };
    emit("inter", "train", eval_inter(&predictor, &train_trace, prefetch)?);
    emit("inter", "held_out", eval_inter(&predictor, &held_trace, prefetch)?);
    emit("reuse", "held_out", eval_reuse(&model, &held)?);
    write_atomic(&a.output, csv.as_bytes())?;
    if let Some(p) = &a.save_predictor {
        write_atomic(p, &predictor.to_bytes())?;
    }
    Ok(())
}

fn simulate_cmd(seed: u64, a: &SimulateArgs) -> Result<()> {
    let model = load_compressed(&a.model)?;
    let cfg = *model.config();
    let predictor = match (&a.predictor, a.experts) {
        (Some(p), _) => {
            Some(InterExpertPredictor::load(p).with_context(|| format!("loading predictor {}", p.display()))?)
        }
        (None, ExpertMode::Learned) => bail!("--experts learned needs --predictor"),
        (None, _) => None,
    };
    let experts = match a.experts {
        ExpertMode::Learned => ExpertPrefetch::Learned {
            predictor: predictor.as_ref().expect("checked above"),
            count: a.prefetch.unwrap_or(cfg.top_k),
        },
        ExpertMode::Oracle => ExpertPrefetch::Oracle,
        ExpertMode::None => ExpertPrefetch::Disabled,
    };
    let compute = if a.bench_compute {
        fit_compute_model(model.expert(0, 0), 5, seed)?
    } else {
        ComputeModel::new(a.c0.unwrap_or(0.0), a.c1.expect("clap requires --c1"))?
    };
    let sim = SimConfig {
        transfer: TransferModel::new(a.bandwidth, a.req_overhead, a.pack_rate, a.streams)?,
        layout: CompactLayout::new(a.element_bytes, a.chunk_size)?,
        compact: !a.split_layout,
        vram_budget: a.vram_budget,
        compute,
        experts,
        channels: match a.channels {
            ChannelMode::Reuse => ChannelPrefetch::Reuse,
            ChannelMode::Oracle => ChannelPrefetch::Oracle,
            ChannelMode::Full => ChannelPrefetch::Full,
        },
        pin_first_layer: !a.no_pin_first_layer,
    };
    let tokens = gen_tokens(cfg.d_hidden, a.tokens, stream_seed(seed, SIM_TOKENS));
    let traces = tokens
        .iter()
        .map(|x| forward_token(&model, x))
        .collect::<floe_core::Result<Vec<_>>>()?;
    let timeline = simulate_traces(&model, &traces, &sim)?;
    write_atomic(&a.output, report_tps(&timeline)?.as_bytes())?;
    if let Some(p) = &a.timeline {
        write_atomic(p, timeline_csv(&timeline).as_bytes())?;
    }
    Ok(())
}

fn theory_cmd(seed: u64, a: &TheoryArgs) -> Result<()> {
    let Grid::Default = a.grid;
    let etas = default_etas();
    write_atomic(&a.output, fg_table(&etas, &default_ps())?.as_bytes())?;
    if let Some(p) = &a.losses {
        let g = GaussianSpec::new(a.sigma)?;
        let e = ShiftedExpSpec::new(a.lambda, a.shift)?;
        let rows = etas
            .iter()
            .enumerate()
            .map(|(i, &eta)| mc_losses(&g, &e, eta, a.samples, stream_seed(seed, 100 + i as u64)))
            .collect::<floe_core::Result<Vec<_>>>()?;
        write_atomic(p, losses_table(&rows).as_bytes())?;
    }
    Ok(())
}

fn bench_cmd(seed: u64, a: &BenchArgs) -> Result<()> {
    let b = bench_masked_kernel(a.dh, a.di, a.sparsity, a.reps, seed)?;
    match &a.output {
        Some(p) => write_atomic(p, b.csv().as_bytes()),
        None => {
            print!("{}", b.csv());
            Ok(())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let seed = cli.seed;
    match &cli.command {
        Command::GenModel(a) => gen_model_cmd(seed, a),
        Command::Calibrate(a) => calibrate_cmd(seed, a),
        Command::Compress(a) => compress_cmd(a),
        Command::Run(a) => run_cmd(seed, a),
        Command::PredictEval(a) => predict_eval_cmd(seed, a),
        Command::Simulate(a) => simulate_cmd(seed, a),
        Command::Theory(a) => theory_cmd(seed, a),
        Command::Bench(a) => bench_cmd(seed, a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn sub_seeds_differ() {
        let s: Vec<u64> = (1..=5).map(|t| stream_seed(7, t)).collect();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
    }
}
