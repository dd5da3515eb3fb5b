use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use tfaccel_core::bundle::WeightBundle;
use tfaccel_core::calibrate::{calibrate_ffn, calibrate_mha, quantize_weights, scale_for, snap};
use tfaccel_core::plan::{plan_mha, qkt_mult_ratio, Block, HEAD_DIM};
use tfaccel_core::reference::ResBlockWeights;
use tfaccel_core::report::{
    simulate, timing_only, MaskKind, RunReport, SimOptions, TARGET_CLOCK_HZ,
};
use tfaccel_core::scheduler::{ffn_cycle_report, mha_cycle_report, RunStatus};
use tfaccel_core::workload::{random_activations, random_weights};
use tfaccel_core::{Error, ModelConfig, Preset, SaTiming};

const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_SCHEDULING_FAULT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "tfaccel",
    version,
    about = "Systolic-array Transformer ResBlock simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one ResBlock and emit a JSON run report.
    Run(RunArgs),
    /// Quantize float weights and calibrate activation scales into a weight bundle.
    Calibrate(CalibrateArgs),
    /// Tabulate QKT share and cycle counts for every preset.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BlockArg {
    Mha,
    Ffn,
}

impl From<BlockArg> for Block {
    fn from(b: BlockArg) -> Self {
        match b {
            BlockArg::Mha => Block::Mha,
            BlockArg::Ffn => Block::Ffn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigArg {
    TransformerBase,
    TransformerBig,
    BertBase,
    BertLarge,
    Custom,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    None,
    Causal,
    Random,
}

impl From<MaskArg> for MaskKind {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::None => MaskKind::None,
            MaskArg::Causal => MaskKind::Causal,
            MaskArg::Random => MaskKind::Random,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Model preset, or `custom` with --dmodel/--h.
    #[arg(long, value_enum, default_value = "transformer-base")]
    config: ConfigArg,
    /// Model width for `custom`; must be 64 * h.
    #[arg(long)]
    dmodel: Option<usize>,
    /// Number of heads for `custom`.
    #[arg(long)]
    h: Option<usize>,
    /// Sequence length.
    #[arg(long, default_value_t = 64)]
    s: usize,
}

impl ModelArgs {
    fn config(&self) -> tfaccel_core::Result<ModelConfig> {
        let preset = match self.config {
            ConfigArg::TransformerBase => Preset::TransformerBase,
            ConfigArg::TransformerBig => Preset::TransformerBig,
            ConfigArg::BertBase => Preset::BertBase,
            ConfigArg::BertLarge => Preset::BertLarge,
            ConfigArg::Custom => {
                let (d, h) = match (self.dmodel, self.h) {
                    (Some(d), Some(h)) => (d, h),
                    (Some(d), None) => (d, d / HEAD_DIM),
                    (None, Some(h)) => (HEAD_DIM * h, h),
                    (None, None) => {
                        return Err(Error::InvalidConfig(
                            "custom config needs --dmodel or --h".into(),
                        ))
                    }
                };
                return ModelConfig::new(d, 4 * d, h, self.s);
            }
        };
        if self.dmodel.is_some() || self.h.is_some() {
            return Err(Error::InvalidConfig(format!(
                "--dmodel/--h only apply to --config custom, not {preset}"
            )));
        }
        preset.config(self.s)
    }
}

#[derive(Args)]
struct TimingArgs {
    /// Weight values loaded per cycle.
    #[arg(long)]
    weight_load_bw: Option<u64>,
    #[arg(long)]
    fill_latency: Option<u64>,
    #[arg(long)]
    drain_latency: Option<u64>,
    /// Cycles from the last column of G to the LayerNorm output.
    #[arg(long)]
    layernorm_tail: Option<u64>,
    /// Softmax pipeline depth on top of its 4s row sweeps.
    #[arg(long)]
    softmax_depth: Option<u64>,
}

impl TimingArgs {
    fn timing(&self) -> SaTiming {
        let d = SaTiming::default();
        SaTiming {
            weight_load_bw: self.weight_load_bw.unwrap_or(d.weight_load_bw),
            fill_latency: self.fill_latency.unwrap_or(d.fill_latency),
            drain_latency: self.drain_latency.unwrap_or(d.drain_latency),
            layernorm_tail: self.layernorm_tail.unwrap_or(d.layernorm_tail),
            softmax_pipeline_depth: self.softmax_depth.unwrap_or(d.softmax_pipeline_depth),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    block: BlockArg,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    timing: TimingArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TARGET_CLOCK_HZ)]
    clock_hz: f64,
    /// Attention mask for MHA runs.
    #[arg(long, value_enum, default_value = "none")]
    mask: MaskArg,
    /// Weight bundle from `calibrate`; random weights from --seed otherwise.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Only count cycles; skip the functional run and oracle comparison.
    #[arg(long)]
    timing_only: bool,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Float weights as JSON; generated from --seed when absent.
    #[arg(long)]
    float_weights: Option<PathBuf>,
    /// Number of generated calibration inputs.
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bundle to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    #[command(flatten)]
    timing: TimingArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Calibrate(args) => cmd_calibrate(&args),
        Command::Sweep(args) => cmd_sweep(&args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io(_) => EXIT_FAILURE,
                _ => EXIT_VALIDATION,
            })
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> tfaccel_core::Result<()> {
    match out {
        Some(path) => fs::write(path, format!("{text}\n"))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
        }
    }
    Ok(())
}

fn cmd_run(args: &RunArgs) -> tfaccel_core::Result<u8> {
    let cfg = args.model.config()?;
    let timing = args.timing.timing();
    timing.validate()?;
    let block = Block::from(args.block);
    let report: RunReport = if args.timing_only {
        timing_only(block, &cfg, &timing, args.clock_hz)?
    } else {
        let bundle = match &args.weights {
            Some(path) => {
                let b = WeightBundle::load(path)?;
                if b.config != cfg {
                    return Err(Error::Bundle(format!(
                        "weights are for d_model {} h {} s {}, run requested d_model {} h {} s {}",
                        b.config.d_model(),
                        b.config.heads(),
                        b.config.seq_len(),
                        cfg.d_model(),
                        cfg.heads(),
                        cfg.seq_len()
                    )));
                }
                Some(b)
            }
            None => None,
        };
        let mut opts = SimOptions::new(block, cfg, args.seed);
        opts.timing = timing;
        opts.clock_hz = args.clock_hz;
        opts.mask = args.mask.into();
        opts.bundle = bundle;
        simulate(&opts)?.report
    };
    emit(&report.to_json(), args.out.as_deref())?;
    if report.status == RunStatus::SchedulingFault {
        eprintln!(
            "scheduling fault: {} overlap violation(s)",
            report.violations.len()
        );
        return Ok(EXIT_SCHEDULING_FAULT);
    }
    Ok(0)
}

fn cmd_calibrate(args: &CalibrateArgs) -> tfaccel_core::Result<u8> {
    let cfg = args.model.config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let float = match &args.float_weights {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str::<ResBlockWeights>(&text)
                .map_err(|e| Error::Bundle(format!("{}: {e}", path.display())))?
        }
        None => random_weights(&cfg, &mut rng),
    };
    let weights = quantize_weights(&float, &cfg)?;

    // Calibration inputs are snapped to INT8 exactly as the datapath sees them.
    let (s, d) = (cfg.seq_len(), cfg.d_model());
    let input = |rng: &mut ChaCha8Rng| {
        let m = random_activations(s, d, rng);
        snap(&m, scale_for(&m)?).map(|(_, real)| real)
    };
    let mut mha_batch = Vec::with_capacity(args.batch);
    let mut ffn_batch = Vec::with_capacity(args.batch);
    for _ in 0..args.batch {
        let (q, k, v) = (input(&mut rng)?, input(&mut rng)?, input(&mut rng)?);
        mha_batch.push((q, k, v, MaskKind::None.build(s, &mut rng)));
        ffn_batch.push(input(&mut rng)?);
    }
    let mha = calibrate_mha(&weights, &mha_batch)?;
    let ffn = calibrate_ffn(&weights, &ffn_batch)?;

    let bundle = WeightBundle {
        config: cfg,
        weights,
        mha_scales: Some(mha),
        ffn_scales: Some(ffn),
    };
    bundle.save(&args.out)?;
    let summary = json!({
        "bundle": args.out.display().to_string(),
        "batch": args.batch,
        "seed": args.seed,
        "weights": bundle.weights.named().iter().map(|(n, t)| json!({"name": n, "scale": t.scale()})).collect::<Vec<_>>(),
        "activations": {
            "mha": mha,
            "ffn": ffn,
            "softmax": "fixed point, scale 1/256",
        },
    });
    emit(
        &serde_json::to_string_pretty(&summary).expect("summary serialises"),
        None,
    )?;
    Ok(0)
}

fn cmd_sweep(args: &SweepArgs) -> tfaccel_core::Result<u8> {
    let timing = args.timing.timing();
    timing.validate()?;
    let mut rows = Vec::new();
    for p in Preset::ALL {
        for s in [16, 32, 64, 128] {
            let cfg = p.config(s)?;
            let plan = plan_mha(&cfg);
            let mha = mha_cycle_report(&cfg, &timing)?;
            let ffn = ffn_cycle_report(&cfg, &timing)?;
            rows.push(json!({
                "preset": p.name(),
                "s": s,
                "heads": cfg.heads(),
                "qkt_sub_passes": plan.qkt_strategy.sub_passes(),
                "qkt_mult_ratio": qkt_mult_ratio(s, cfg.heads()),
                "mha_lower_bound": mha.streaming_lower_bound,
                "ffn_lower_bound": ffn.streaming_lower_bound,
                "mha_cycles": mha.total_cycles,
                "ffn_cycles": ffn.total_cycles,
            }));
        }
    }
    let cols = [
        "preset",
        "s",
        "heads",
        "qkt_sub_passes",
        "qkt_mult_ratio",
        "mha_lower_bound",
        "ffn_lower_bound",
        "mha_cycles",
        "ffn_cycles",
    ];
    let cell = |row: &serde_json::Value, c: &str| match &row[c] {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Number(n) if c == "qkt_mult_ratio" => {
            format!("{:.6}", n.as_f64().unwrap_or(0.0))
        }
        v => v.to_string(),
    };
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&rows).expect("rows serialise"),
        Format::Csv => {
            let mut out = vec![cols.join(",")];
            out.extend(rows.iter().map(|r| {
                cols.iter()
                    .map(|c| cell(r, c))
                    .collect::<Vec<_>>()
                    .join(",")
            }));
            out.join("\n")
        }
        Format::Table => {
            let mut out = vec![format!(
                "{:<17} {:>4} {:>3} {:>4} {:>9} {:>9} {:>9} {:>9} {:>9}",
                "preset", "s", "h", "qkt", "ratio", "mha_lb", "ffn_lb", "mha", "ffn"
            )];
            out.extend(rows.iter().map(|r| {
                format!(
                    "{:<17} {:>4} {:>3} {:>4} {:>9} {:>9} {:>9} {:>9} {:>9}",
                    cell(r, "preset"),
                    cell(r, "s"),
                    cell(r, "heads"),
                    cell(r, "qkt_sub_passes"),
                    cell(r, "qkt_mult_ratio"),
                    cell(r, "mha_lower_bound"),
                    cell(r, "ffn_lower_bound"),
                    cell(r, "mha_cycles"),
                    cell(r, "ffn_cycles"),
                )
            }));
            out.join("\n")
        }
    };
    emit(&text, None)?;
    Ok(0)
}
