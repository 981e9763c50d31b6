//! Command-line front end: presets, simulation runs, profiling, sweeps,
//! and report emission.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use acceltran_core::arch::{EnergyModel, HardwareConfig, ENERGY_14NM_DEFAULT_JSON};
use acceltran_core::model::{memory_footprint, validate_config, ModelConfig};
use acceltran_core::numerics::DEFAULT_FORMAT;
use acceltran_core::sim::{
    design_sweep, run, schedule_trace_csv, utilization_trace, SimError, SimOptions,
};
use acceltran_core::sparsity::{profile_thresholds, SparsityProfile};
use acceltran_core::tiling::{
    count_reuse, dataflow_energy, enumerate_dataflows, Dataflow, LanePolicy, DEFAULT_TILE_SPEC,
};

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const EXIT_CONFIG: i32 = 2;
const EXIT_DEADLOCK: i32 = 3;
const EXIT_IO: i32 = 4;

#[derive(Debug)]
enum CliError {
    Config(String),
    Deadlock(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Deadlock(_) => EXIT_DEADLOCK,
            CliError::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Deadlock(m) | CliError::Io(m) => m,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Deadlock { .. } => CliError::Deadlock(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "acceltran", version, about = "Sparsity-aware transformer accelerator simulator")]
struct Cli {
    /// RNG seed for weight and input generation.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Output directory for result files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Suppress the human-readable summary on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one cycle-accurate simulation and emit metrics.
    Simulate(SimulateArgs),
    /// Profile the threshold-to-sparsity curve for a model.
    Profile(ProfileArgs),
    /// Compare reuse and dynamic energy across all 24 dataflows.
    DataflowSweep(DataflowSweepArgs),
    /// Sweep PE count and buffer size, reporting stalls per point.
    DesignSweep(DesignSweepArgs),
    /// Report the main-memory footprint of a model.
    Size(SizeArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Model preset name (bert-tiny, bert-base) or config JSON path.
    #[arg(long, default_value = "bert-tiny")]
    model: String,
    /// Hardware preset name or config JSON path.
    #[arg(long, default_value = "acceltran-edge")]
    hw: String,
    /// Energy table JSON path; defaults to the shipped 14nm table.
    #[arg(long)]
    energy: Option<PathBuf>,
    /// Pruning threshold (mutually exclusive with --rho).
    #[arg(long)]
    tau: Option<f64>,
    /// Target activation sparsity, resolved via --profile.
    #[arg(long)]
    rho: Option<f64>,
    /// Profiled threshold curve (from the `profile` command).
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Override the model sequence length.
    #[arg(long)]
    seq_len: Option<usize>,
    /// Disable staggered head scheduling.
    #[arg(long)]
    no_stagger: bool,
    /// Tiled-matmul loop order, e.g. bijk.
    #[arg(long, default_value = "bijk")]
    dataflow: String,
    /// Emit schedule and utilization traces.
    #[arg(long)]
    trace: bool,
    /// Safety cap on simulated cycles.
    #[arg(long, default_value_t = 2_000_000_000)]
    max_cycles: u64,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long, default_value = "bert-tiny")]
    model: String,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Comma-separated threshold grid; default 16 points in [0, 0.1].
    #[arg(long)]
    grid: Option<String>,
}

#[derive(Args)]
struct DataflowSweepArgs {
    /// MAC lanes sharing the tiled work.
    #[arg(long, default_value_t = 4)]
    lanes: usize,
}

#[derive(Args)]
struct DesignSweepArgs {
    #[arg(long, default_value = "bert-tiny")]
    model: String,
    #[arg(long, default_value = "acceltran-edge")]
    hw: String,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Comma-separated PE counts.
    #[arg(long, default_value = "32,64,128,256")]
    pes: String,
    /// Comma-separated total buffer sizes in MB, split 4:8:1.
    #[arg(long, default_value = "10,12,14,16")]
    buffers_mb: String,
}

#[derive(Args)]
struct SizeArgs {
    #[arg(long, default_value = "bert-tiny")]
    model: String,
    /// Element width in bits.
    #[arg(long, default_value_t = DEFAULT_FORMAT.bits())]
    bits: u32,
    /// Static weight sparsity override.
    #[arg(long)]
    sparsity: Option<f64>,
}

fn main() {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Profile(a) => cmd_profile(cli, a),
        Command::DataflowSweep(a) => cmd_dataflow_sweep(cli, a),
        Command::DesignSweep(a) => cmd_design_sweep(cli, a),
        Command::Size(a) => cmd_size(cli, a),
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn load_model(spec: &str, seq_len: Option<usize>) -> Result<(ModelConfig, String), CliError> {
    let (mut cfg, raw) = match ModelConfig::preset(spec) {
        Some(c) => {
            let raw = serde_json::to_string(&c).unwrap();
            (c, raw)
        }
        None => {
            let raw = fs::read_to_string(spec)
                .map_err(|e| CliError::Config(format!("cannot read model '{spec}': {e}")))?;
            let c: ModelConfig = serde_json::from_str(&raw)
                .map_err(|e| CliError::Config(format!("bad model config '{spec}': {e}")))?;
            (c, raw)
        }
    };
    if let Some(s) = seq_len {
        cfg.seq_len = s;
    }
    let cfg = validate_config(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((cfg, sha_hex(raw.as_bytes())))
}

fn load_hw(spec: &str) -> Result<(HardwareConfig, String), CliError> {
    let (cfg, raw) = match HardwareConfig::preset(spec) {
        Ok(c) => (c, serde_json::to_string(&spec).unwrap()),
        Err(_) => {
            let raw = fs::read_to_string(spec)
                .map_err(|e| CliError::Config(format!("cannot read hardware '{spec}': {e}")))?;
            let c: HardwareConfig = serde_json::from_str(&raw)
                .map_err(|e| CliError::Config(format!("bad hardware config '{spec}': {e}")))?;
            c.validate().map_err(|e| CliError::Config(e.to_string()))?;
            (c, raw)
        }
    };
    Ok((cfg, sha_hex(raw.as_bytes())))
}

fn load_energy(path: &Option<PathBuf>) -> Result<(EnergyModel, String), CliError> {
    let raw = match path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read energy table: {e}")))?,
        None => ENERGY_14NM_DEFAULT_JSON.to_string(),
    };
    let em: EnergyModel = serde_json::from_str(&raw)
        .map_err(|e| CliError::Config(format!("bad energy table: {e}")))?;
    em.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok((em, sha_hex(raw.as_bytes())))
}

/// Atomic file emission: write a sibling temp file, then rename.
fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{name}.tmp"));
    let dst = dir.join(name);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, &dst)?;
    Ok(dst)
}

struct Provenance {
    seed: u64,
    hashes: Vec<(String, String)>,
}

impl Provenance {
    fn csv_header(&self) -> String {
        let mut s = format!("# tool_version={TOOL_VERSION} seed={}", self.seed);
        for (k, v) in &self.hashes {
            s.push_str(&format!(" {k}={v}"));
        }
        s.push('\n');
        s
    }

    fn json_value(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("tool_version".into(), TOOL_VERSION.into());
        map.insert("seed".into(), self.seed.into());
        for (k, v) in &self.hashes {
            map.insert(k.clone(), v.clone().into());
        }
        serde_json::Value::Object(map)
    }
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> Result<(), CliError> {
    let (cfg, model_sha) = load_model(&a.model, a.seq_len)?;
    let (hw, hw_sha) = load_hw(&a.hw)?;
    let (energy, energy_sha) = load_energy(&a.energy)?;

    let profile: Option<SparsityProfile> = match &a.profile {
        Some(p) => {
            let raw = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read profile: {e}")))?;
            Some(
                serde_json::from_str(&raw)
                    .map_err(|e| CliError::Config(format!("bad profile: {e}")))?,
            )
        }
        None => None,
    };
    if a.rho.is_some() && profile.is_none() {
        return Err(CliError::Config(
            "--rho needs a profiled threshold curve: run `acceltran profile` and pass --profile"
                .into(),
        ));
    }

    let mut opts = SimOptions::default();
    opts.tau = a.tau;
    opts.rho_target = a.rho;
    opts.profile = profile;
    opts.stagger = !a.no_stagger;
    opts.seed = cli.seed;
    opts.trace_enabled = a.trace;
    opts.dataflow =
        Dataflow::parse(&a.dataflow).map_err(|e| CliError::Config(e.to_string()))?;
    opts.max_cycles = a.max_cycles;

    let res = run(&cfg, &hw, &energy, &opts)?;

    let prov = Provenance {
        seed: cli.seed,
        hashes: vec![
            ("model_sha256".into(), model_sha),
            ("hw_sha256".into(), hw_sha),
            ("energy_sha256".into(), energy_sha),
        ],
    };

    let mut doc = serde_json::to_value(&res.metrics).unwrap();
    doc.as_object_mut()
        .unwrap()
        .insert("provenance".into(), prov.json_value());
    write_file(&cli.out, "metrics.json", &serde_json::to_string_pretty(&doc).unwrap())?;

    let summary = render_summary(&cfg, &hw, &res.metrics, &prov);
    write_file(&cli.out, "summary.txt", &summary)?;

    if let Some(trace) = &res.trace {
        write_file(
            &cli.out,
            "trace.csv",
            &format!("{}{}", prov.csv_header(), schedule_trace_csv(trace)),
        )?;
        write_file(
            &cli.out,
            "utilization.csv",
            &format!("{}{}", prov.csv_header(), utilization_trace(trace)),
        )?;
    }

    if !cli.quiet {
        print!("{summary}");
    }
    Ok(())
}

fn render_summary(
    cfg: &ModelConfig,
    hw: &HardwareConfig,
    m: &acceltran_core::sim::Metrics,
    prov: &Provenance,
) -> String {
    let mut s = String::new();
    s.push_str(&format!("{:<28} {}\n", "model", cfg.name));
    s.push_str(&format!("{:<28} {}\n", "hardware", hw.name));
    s.push_str(&format!("{:<28} {}\n", "total cycles", m.total_cycles));
    s.push_str(&format!("{:<28} {:.1}\n", "throughput (seq/s)", m.throughput_seq_per_s));
    s.push_str(&format!("{:<28} {:.3}\n", "total energy (uJ)", m.energy_total_fj as f64 * 1e-9));
    s.push_str(&format!("{:<28} {:.3}\n", "average power (W)", m.avg_power_w));
    s.push_str(&format!("{:<28} {}\n", "MACs total", m.macs_total));
    s.push_str(&format!("{:<28} {}\n", "MACs skipped", m.macs_skipped));
    s.push_str(&format!(
        "{:<28} {:.4}\n",
        "activation sparsity", m.achieved_activation_sparsity
    ));
    for (kind, util) in &m.utilization {
        s.push_str(&format!("{:<28} {:.4}\n", format!("utilization {kind:?}"), util));
    }
    for (reason, cycles) in &m.stall_cycles {
        s.push_str(&format!("{:<28} {}\n", format!("stall {reason}"), cycles));
    }
    s.push_str(&format!("{:<28} {}\n", "seed", prov.seed));
    s
}

fn cmd_profile(cli: &Cli, a: &ProfileArgs) -> Result<(), CliError> {
    let (cfg, model_sha) = load_model(&a.model, a.seq_len)?;
    let grid: Vec<f64> = match &a.grid {
        Some(g) => g
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| CliError::Config(format!("bad grid value '{s}': {e}")))
            })
            .collect::<Result<_, _>>()?,
        None => (0..16).map(|i| i as f64 * 0.1 / 15.0).collect(),
    };
    let profile = profile_thresholds(&cfg, DEFAULT_FORMAT, cli.seed, &grid)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let prov = Provenance {
        seed: cli.seed,
        hashes: vec![("model_sha256".into(), model_sha)],
    };
    let mut doc = serde_json::to_value(&profile).unwrap();
    doc.as_object_mut()
        .unwrap()
        .insert("provenance".into(), prov.json_value());
    let name = format!("{}-profile.json", cfg.name);
    let path = write_file(&cli.out, &name, &serde_json::to_string_pretty(&doc).unwrap())?;
    if !cli.quiet {
        println!("wrote {} ({} points)", path.display(), profile.points.len());
    }
    Ok(())
}

fn cmd_dataflow_sweep(cli: &Cli, a: &DataflowSweepArgs) -> Result<(), CliError> {
    let (energy, energy_sha) = load_energy(&None)?;
    let scenarios: [(&str, (usize, usize, usize, usize)); 3] = [
        ("a", (4, 64, 64, 64)),
        ("b", (4, 64, 64, 128)),
        ("c", (4, 128, 64, 64)),
    ];
    let dfs = enumerate_dataflows();
    let prov = Provenance {
        seed: cli.seed,
        hashes: vec![("energy_sha256".into(), energy_sha)],
    };
    let mut csv = prov.csv_header();
    csv.push_str("scenario,dataflow,reuse_instances,dynamic_energy_fj,reuse_argmax,energy_argmin\n");
    for (name, dims) in scenarios {
        let rows: Vec<(String, u64, u64)> = dfs
            .par_iter()
            .map(|&df| {
                let r = count_reuse(df, dims, DEFAULT_TILE_SPEC, a.lanes, LanePolicy::default());
                let e = dataflow_energy(
                    df,
                    dims,
                    DEFAULT_TILE_SPEC,
                    a.lanes,
                    DEFAULT_FORMAT,
                    &energy,
                    LanePolicy::default(),
                );
                (df.to_string(), r, e)
            })
            .collect();
        let max_r = rows.iter().map(|r| r.1).max().unwrap();
        let min_e = rows.iter().map(|r| r.2).min().unwrap();
        for (df, r, e) in rows {
            csv.push_str(&format!(
                "{name},{df},{r},{e},{},{}\n",
                (r == max_r) as u8,
                (e == min_e) as u8
            ));
        }
    }
    let path = write_file(&cli.out, "dataflow-sweep.csv", &csv)?;
    if !cli.quiet {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    let v: Result<Vec<T>, _> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| CliError::Config(format!("bad {what} '{p}': {e}")))
        })
        .collect();
    let v = v?;
    if v.is_empty() {
        return Err(CliError::Config(format!("{what} list is empty")));
    }
    Ok(v)
}

fn cmd_design_sweep(cli: &Cli, a: &DesignSweepArgs) -> Result<(), CliError> {
    let (cfg, model_sha) = load_model(&a.model, a.seq_len)?;
    let (hw, hw_sha) = load_hw(&a.hw)?;
    let (energy, energy_sha) = load_energy(&None)?;
    let pes: Vec<usize> = parse_list(&a.pes, "PE count")?;
    let buffers: Vec<u64> = parse_list::<u64>(&a.buffers_mb, "buffer size")?
        .into_iter()
        .map(|mb| mb << 20)
        .collect();

    // fan out independent runs; rows are sorted afterwards, not
    // arrival-ordered
    let grid: Vec<(usize, u64)> = pes
        .iter()
        .flat_map(|&p| buffers.iter().map(move |&b| (p, b)))
        .collect();
    let mut opts = SimOptions::default();
    opts.seed = cli.seed;
    let points: Result<Vec<_>, SimError> = grid
        .par_iter()
        .map(|&(pe, buf)| {
            design_sweep(&cfg, &hw, &energy, &opts, &[pe], &[buf])
                .map(|mut v| v.pop().unwrap())
        })
        .collect();
    let mut points = points.map_err(CliError::from)?;
    points.sort_by_key(|p| (p.pe_count, p.buffer_bytes));

    let prov = Provenance {
        seed: cli.seed,
        hashes: vec![
            ("model_sha256".into(), model_sha),
            ("hw_sha256".into(), hw_sha),
            ("energy_sha256".into(), energy_sha),
        ],
    };
    let mut csv = prov.csv_header();
    csv.push_str("pe_count,buffer_bytes,compute_stalls,memory_stalls,total_cycles\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            p.pe_count, p.buffer_bytes, p.compute_stalls, p.memory_stalls, p.total_cycles
        ));
    }
    let path = write_file(&cli.out, "design-sweep.csv", &csv)?;
    if !cli.quiet {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_size(cli: &Cli, a: &SizeArgs) -> Result<(), CliError> {
    let (mut cfg, _) = load_model(&a.model, None)?;
    if let Some(s) = a.sparsity {
        if !(0.0..=1.0).contains(&s) {
            return Err(CliError::Config(format!("sparsity {s} out of [0,1]")));
        }
        cfg.weight_sparsity = s;
    }
    let fp = memory_footprint(&cfg, a.bits);
    let mb = |b: u64| b as f64 / (1024.0 * 1024.0);
    let mut s = String::new();
    s.push_str(&format!(
        "memory footprint for {} ({} bits/elem, weight sparsity {:.2})\n",
        cfg.name, a.bits, cfg.weight_sparsity
    ));
    s.push_str(&format!("{:<16} {:>12.3} MB\n", "embeddings", mb(fp.embeddings_bytes)));
    s.push_str(&format!("{:<16} {:>12.3} MB\n", "weights", mb(fp.weights_bytes)));
    s.push_str(&format!("{:<16} {:>12.3} MB\n", "activations", mb(fp.activations_bytes)));
    s.push_str(&format!("{:<16} {:>12.3} MB\n", "masks", mb(fp.mask_bytes)));
    s.push_str(&format!("{:<16} {:>12.3} MB\n", "total", mb(fp.total_bytes)));
    if !cli.quiet {
        print!("{s}");
    }
    write_file(&cli.out, "size.txt", &s)?;
    Ok(())
}
