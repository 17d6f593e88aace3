//! `bof4`: design codebooks, quantize tensor files and reproduce the error
//! sweeps from the command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format error, 3 numeric failure.
//! `BOF4_THREADS` overrides the worker thread count.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use bof4::codebook::{fixtures, lloyd_design, CentroidMethod, Codebook, CodebookSpec, DesignSource, Metric, Objective};
use bof4::dist::{BlockMaxModel, NormalizationMode};
use bof4::metrics::{self, SweepSource};
use bof4::opq::{self, quantize_tensor_opq};
use bof4::quant::{dequantize_tensor, quantize_tensor, BlockLayout};
use bof4::{io, Error};

const DEFAULT_SWEEP_CODEBOOKS: &str = "nf4,af4,bof4-mae,bof4-mse,bof4s-mae,bof4s-mse";

#[derive(Parser)]
#[command(name = "bof4", version, about = "Block-wise optimal 4-bit float quantization")]
struct Cli {
    /// Print more detail (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Design a codebook and write it as JSON.
    Design(DesignArgs),
    /// Quantize a raw f32 tensor file into a BQT1 container.
    Quantize(QuantizeArgs),
    /// Decode a BQT1 container back to a raw f32 tensor file.
    Dequantize(DequantizeArgs),
    /// Error of several codebooks across block sizes, as CSV.
    Sweep(SweepArgs),
    /// BOF4 (MSE) under four constraint sets, as CSV.
    Ablation(AblationArgs),
    /// Outlier statistics of a raw f32 tensor file.
    OpqStats(OpqStatsArgs),
}

#[derive(Args)]
struct DesignArgs {
    #[arg(long, default_value = "absolute", value_parser = parse_from_str::<NormalizationMode>)]
    mode: NormalizationMode,
    #[arg(long, default_value = "mse", value_parser = parse_from_str::<Metric>)]
    metric: Metric,
    #[arg(long, default_value_t = 64)]
    block_size: usize,
    #[arg(long, default_value = "theoretical", value_parser = parse_from_str::<CentroidMethod>)]
    method: CentroidMethod,
    #[arg(long, default_value = "end_to_end", value_parser = parse_from_str::<Objective>)]
    objective: Objective,
    /// Comma-separated fixed levels, or `none`. Defaults to -1,0,1 (absolute)
    /// or 0,1 (signed).
    #[arg(long, allow_hyphen_values = true)]
    constraints: Option<String>,
    #[arg(long, default_value_t = 16)]
    levels: usize,
    /// Sample count for empirical designs.
    #[arg(long)]
    samples: Option<usize>,
    /// Seed for empirical designs.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    name: Option<String>,
    /// Output file; JSON goes to stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Builtin name or codebook JSON file.
    #[arg(long, default_value = "bof4-mse")]
    codebook: String,
    /// Defaults to 64 for builtin codebooks and to the codebook's own block
    /// size for JSON files.
    #[arg(long)]
    block_size: Option<usize>,
    /// Must agree with the codebook when given.
    #[arg(long, value_parser = parse_from_str::<NormalizationMode>)]
    mode: Option<NormalizationMode>,
    #[arg(long)]
    opq: bool,
    /// Outlier quantile (requires --opq, default 0.95).
    #[arg(long)]
    q: Option<f64>,
}

#[derive(Args)]
struct DequantizeArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated builtin names or codebook JSON files.
    #[arg(long, default_value = DEFAULT_SWEEP_CODEBOOKS)]
    codebooks: String,
    #[arg(long, default_value = "16,64,256,1024")]
    block_sizes: String,
    #[arg(long, default_value_t = metrics::DEFAULT_EVAL_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    opq: bool,
    #[arg(long)]
    q: Option<f64>,
    /// CSV file; stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long, default_value_t = 64)]
    block_size: usize,
    #[arg(long, default_value_t = metrics::DEFAULT_EVAL_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OpqStatsArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, default_value_t = 64)]
    block_size: usize,
    #[arg(long, default_value_t = opq::DEFAULT_Q)]
    q: f64,
    /// Also report the KS distance of normalized weights to the model.
    #[arg(long)]
    ks: bool,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_from_str<T: FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| usage(format!("invalid {what} '{t}'"))))
        .collect()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Ok(v) = std::env::var("BOF4_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: BOF4_THREADS must be a positive integer, got '{v}'");
                return ExitCode::from(1);
            }
        }
    }
    let verbose = cli.verbose;
    let result = match cli.command {
        Command::Design(a) => cmd_design(a, verbose),
        Command::Quantize(a) => cmd_quantize(a, verbose),
        Command::Dequantize(a) => cmd_dequantize(a),
        Command::Sweep(a) => cmd_sweep(a, verbose),
        Command::Ablation(a) => cmd_ablation(a),
        Command::OpqStats(a) => cmd_opq_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::EmptyRegion { .. } | Error::DegenerateBlock(_) => 3,
        _ => 2,
    }
}

fn fmt_levels(levels: &[f64]) -> String {
    levels.iter().map(|l| format!("{l}")).collect::<Vec<_>>().join(", ")
}

fn cmd_design(a: DesignArgs, verbose: u8) -> CmdResult {
    if a.method == CentroidMethod::Theoretical && (a.samples.is_some() || a.seed.is_some()) {
        return Err(usage("--samples and --seed only apply to --method empirical"));
    }
    let mut spec = CodebookSpec::new(a.mode, a.metric, a.block_size)
        .with_method(a.method)
        .with_objective(a.objective)
        .with_num_levels(a.levels);
    if let Some(c) = &a.constraints {
        spec.constrained_levels = if c.trim() == "none" { Vec::new() } else { parse_list(c, "constraint")? };
    }
    if let Some(n) = a.samples {
        spec.sample_count = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.max_iterations = a.max_iter;
    if let Some(e) = a.eps {
        spec.convergence_eps = e;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;

    let mut line = format!(
        "design: mode={} metric={} block_size={} method={} objective={} levels={} constraints=[{}] max_iter={} eps={:e}",
        spec.mode,
        spec.metric,
        spec.block_size,
        spec.centroid_method.as_str(),
        spec.objective.as_str(),
        spec.num_levels,
        fmt_levels(&spec.constrained_levels),
        spec.effective_max_iterations(),
        spec.convergence_eps
    );
    if spec.centroid_method == CentroidMethod::Empirical {
        line.push_str(&format!(" samples={} seed={}", spec.sample_count, spec.seed));
    }
    eprintln!("{line}");

    let mut cb = lloyd_design(&spec, DesignSource::gaussian())?;
    if let Some(name) = a.name {
        cb.name = name;
    }
    let json = io::write_codebook_json(&cb)?;
    match &a.out {
        Some(path) => std::fs::write(path, &json).map_err(Error::from)?,
        None => print!("{json}"),
    }
    let p = &cb.provenance;
    eprintln!("iterations: {}", p.iterations);
    eprintln!("final objective: {:.10e}", p.final_objective.unwrap_or(f64::NAN));
    eprintln!("levels: [{}]", fmt_levels(&cb.levels));
    if verbose > 0 {
        if let Some(path) = &a.out {
            eprintln!("wrote {}", path.display());
        }
    }
    if !p.converged {
        return Err(Error::Numeric(format!("design did not converge within {} iterations", p.iterations)).into());
    }
    Ok(())
}

/// A builtin name, or a JSON file when `arg` names an existing path.
fn resolve_codebook(arg: &str, block_size: Option<usize>, verbose: u8) -> Result<(Codebook, usize), Failure> {
    let path = Path::new(arg);
    if path.is_file() {
        let cb = io::read_codebook_file(path)?;
        let i = block_size.unwrap_or(cb.block_size());
        return Ok((cb, i));
    }
    let i = block_size.unwrap_or(64);
    if !fixtures::BUILTIN_NAMES.contains(&arg) {
        return Err(usage(format!(
            "'{arg}' is neither a codebook file nor a builtin name ({})",
            fixtures::BUILTIN_NAMES.join(", ")
        )));
    }
    match fixtures::builtin(arg, i)? {
        Some(cb) => Ok((cb, i)),
        None => {
            if verbose > 0 {
                eprintln!("no table for {arg} at block size {i}; designing it");
            }
            let mut cb = SweepSource::builtin(arg).resolve(i)?;
            cb.name = arg.to_string();
            Ok((cb, i))
        }
    }
}

fn cmd_quantize(a: QuantizeArgs, verbose: u8) -> CmdResult {
    if a.q.is_some() && !a.opq {
        return Err(usage("--q requires --opq"));
    }
    let (cb, block_size) = resolve_codebook(&a.codebook, a.block_size, verbose)?;
    if let Some(mode) = a.mode {
        if mode != cb.mode() {
            return Err(usage(format!("codebook '{}' uses {} normalization, not {mode}", cb.name, cb.mode())));
        }
    }
    let q = a.q.unwrap_or(opq::DEFAULT_Q);
    eprintln!(
        "quantize: codebook={} mode={} block_size={} opq={}{}",
        cb.name,
        cb.mode(),
        block_size,
        a.opq,
        if a.opq { format!(" q={q}") } else { String::new() }
    );
    let weights = io::read_tensor_file(&a.input)?;
    let qt = if a.opq {
        let model = BlockMaxModel::gaussian(block_size)?;
        quantize_tensor_opq(&weights, &cb, cb.mode(), q, &model)?
    } else {
        quantize_tensor(&weights, &cb, cb.mode(), block_size)?
    };
    io::write_quantized_file(&a.output, &qt)?;
    println!("elements: {}", qt.layout.element_count);
    println!("blocks: {}", qt.layout.block_count());
    if !weights.is_empty() {
        let out = dequantize_tensor(&qt)?;
        println!("mae: {:.8e}", metrics::tensor_mae(&weights, &out)?);
        println!("mse: {:.8e}", metrics::tensor_mse(&weights, &out)?);
    }
    if let Some(set) = &qt.opq {
        println!("outliers: {}", set.len());
        println!("memory overhead: {:.4}%", 100.0 * opq::memory_overhead(&qt));
    }
    Ok(())
}

fn cmd_dequantize(a: DequantizeArgs) -> CmdResult {
    let qt = io::read_quantized_file(&a.input)?;
    let out = dequantize_tensor(&qt)?;
    io::write_tensor_file(&a.output, &out)?;
    println!("elements: {}", out.len());
    println!("outliers: {}", qt.opq.as_ref().map_or(0, |s| s.len()));
    Ok(())
}

fn cmd_sweep(a: SweepArgs, verbose: u8) -> CmdResult {
    if a.q.is_some() && !a.opq {
        return Err(usage("--q requires --opq"));
    }
    let block_sizes: Vec<usize> = parse_list(&a.block_sizes, "block size")?;
    if block_sizes.is_empty() || block_sizes.contains(&0) {
        return Err(usage("block sizes must be positive"));
    }
    let mut sources = Vec::new();
    for name in a.codebooks.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if Path::new(name).is_file() {
            sources.push(SweepSource::Fixed(io::read_codebook_file(Path::new(name))?));
        } else if fixtures::BUILTIN_NAMES.contains(&name) {
            sources.push(SweepSource::builtin(name));
        } else {
            return Err(usage(format!("unknown codebook '{name}'")));
        }
    }
    if sources.is_empty() {
        return Err(usage("no codebooks given"));
    }
    let q = a.opq.then(|| a.q.unwrap_or(opq::DEFAULT_Q));
    eprintln!(
        "sweep: codebooks={} block_sizes={} samples={} seed={} opq={}{}",
        a.codebooks,
        a.block_sizes,
        a.samples,
        a.seed,
        a.opq,
        q.map(|q| format!(" q={q}")).unwrap_or_default()
    );
    let report = metrics::run_sweep(&sources, &block_sizes, a.samples, a.seed, q)?;
    if verbose > 0 {
        eprintln!("sampler: {}", report.sampler);
    }
    write_output(a.out.as_deref(), &report.to_csv())
}

fn cmd_ablation(a: AblationArgs) -> CmdResult {
    eprintln!("ablation: block_size={} samples={} seed={}", a.block_size, a.samples, a.seed);
    let report = metrics::constrained_ablation(a.block_size, a.samples, a.seed)?;
    for r in &report.rows {
        eprintln!("{:>8}: mse {:.6e}  levels [{}]", r.label, r.mse, fmt_levels(&r.codebook.levels));
    }
    if !report.ordering_holds() {
        eprintln!("note: the unconstrained design did not beat the {{0, -1, 1}} design on this tensor");
    }
    write_output(a.out.as_deref(), &report.to_csv())
}

fn cmd_opq_stats(a: OpqStatsArgs) -> CmdResult {
    let weights = io::read_tensor_file(&a.input)?;
    let model = BlockMaxModel::gaussian(a.block_size)?;
    let layout = BlockLayout::new(weights.len(), a.block_size)?;
    let flagged = opq::detect_outliers(&weights, &layout, a.q, &model)?;
    let n = weights.len().max(1) as f64;
    println!("elements: {}", weights.len());
    println!("blocks: {}", layout.block_count());
    println!("q: {}", a.q);
    println!("threshold (unit variance): {:.6}", opq::outlier_threshold(&model, a.q)?);
    println!("outliers: {}", flagged.len());
    println!("outlier fraction: {:.6e}", flagged.len() as f64 / n);
    println!("memory overhead: {:.4}%", 100.0 * opq::overhead_for(flagged.len(), &layout));
    if a.ks {
        let before = metrics::normalized_ks_distance(&weights, &model, None)?;
        let after = metrics::normalized_ks_distance(&weights, &model, Some(&flagged))?;
        println!("ks distance without opq: {before:.6e}");
        println!("ks distance with opq: {after:.6e}");
    }
    Ok(())
}

fn write_output(path: Option<&Path>, text: &str) -> CmdResult {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Lib(e.into())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
