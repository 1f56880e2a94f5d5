//! `esmoe`: verification, benchmarking, simulation and allocation driver.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.

mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use esmoe::bench::{run_bench, BenchConfig};
use esmoe::hetero::{allocate_batches, allocate_hidden, capacity_proportions, probe_capacity, AllocationKind, DeviceProfile};
use esmoe::scenario::{run_scenario, Scenario, SchemeSelection};
use esmoe::verify::{run_gradcheck, run_verify, Dims, GradcheckConfig, VerifyConfig};
use esmoe::{Activation, RoutingDistribution, Scheme};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use report::{AllocateReport, ProbeReport, Rendered};

#[derive(Parser, Debug)]
#[command(name = "esmoe", version, about = "Zero-redundancy Mixture-of-Experts verification and simulation kit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the seeded equivalence suites; exit 1 if any deviation exceeds its tolerance.
    Verify(VerifyArgs),
    /// Compare analytic layer gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Count MACs, padding, drops and activation memory for k = 1..topk, and time each operator.
    Bench(BenchArgs),
    /// Run a multi-device scenario and compare it with a single-device run.
    Simulate(SimulateArgs),
    /// Time the capacity proxy task on this machine.
    Probe(ProbeArgs),
    /// Divide a batch or hidden dimension across devices in proportion to capacity.
    Allocate(AllocateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON configuration; flags given on the command line override its fields.
    #[arg(long, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
struct DimArgs {
    /// Tokens.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long = "din")]
    d_in: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long = "dout")]
    d_out: Option<usize>,
    /// Tile size of the re-index vector.
    #[arg(long)]
    blk: Option<usize>,
}

impl DimArgs {
    fn apply(&self, d: &mut Dims) {
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut d.n, self.n);
        set(&mut d.experts, self.experts);
        set(&mut d.topk, self.topk);
        set(&mut d.d_in, self.d_in);
        set(&mut d.hidden, self.hidden);
        set(&mut d.d_out, self.d_out);
        set(&mut d.blk, self.blk);
    }
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Upper bounds for the random instance sizes.
    #[command(flatten)]
    dims: DimArgs,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    activation: Option<Activation>,
    /// Corrupt one operator result so the suites must fail.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    dims: DimArgs,
    #[arg(long)]
    activation: Option<Activation>,
    /// Activation-memory scheme of the layer under test (naive or memory_efficient).
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Use a zero upstream gradient.
    #[arg(long)]
    zero_upstream: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    dims: DimArgs,
    /// uniform, balanced, zipf[:s] or fixed[:expert].
    #[arg(long)]
    routing: Option<RoutingDistribution>,
    /// Per-expert capacity multiplier of the dispatch/combine baseline; `inf` for unbounded.
    #[arg(long)]
    capacity_factor: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    DataCentric,
    ModelCentric,
    Both,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    dims: DimArgs,
    /// Number of identical devices when no configuration file is given.
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    /// Duration of the non-MoE stage parameter gathering can hide behind.
    #[arg(long)]
    non_moe_time: Option<f64>,
    /// Comma-separated global token counts for the cost-model sweep.
    #[arg(long, value_delimiter = ',')]
    crossover: Option<Vec<usize>>,
    #[arg(long)]
    routing: Option<RoutingDistribution>,
    #[arg(long)]
    activation: Option<Activation>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long, default_value_t = 0)]
    device: usize,
    #[arg(long, default_value_t = 8)]
    iterations: usize,
    /// Side of the square matrices multiplied.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Batch,
    Hidden,
}

#[derive(Args, Debug)]
struct AllocateArgs {
    /// JSON with `latencies` or `devices`, and optionally `kind` and `total`.
    #[arg(long, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Comma-separated proxy latencies in seconds, one per device.
    #[arg(long, value_delimiter = ',')]
    latencies: Option<Vec<f64>>,
    /// Global batch size or hidden dimension to divide.
    #[arg(long)]
    total: Option<usize>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AllocateRequest {
    kind: Option<AllocationKind>,
    total: Option<usize>,
    #[serde(default)]
    latencies: Vec<f64>,
    #[serde(default)]
    devices: Vec<DeviceProfile>,
}

/// A failed command; `Usage` maps to exit code 2.
enum Failure {
    Usage(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn emit(rendered: &Rendered, format: Format, out: Option<&Path>) -> Result<(), Failure> {
    let text = match format {
        Format::Json => rendered.json.clone(),
        Format::Csv => rendered.csv.clone(),
    };
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Returns whether the command's checks passed.
fn run(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::Verify(a) => {
            let mut cfg: VerifyConfig = load(a.common.config.as_deref())?;
            a.dims.apply(&mut cfg.dims);
            if let Some(s) = a.common.seed {
                cfg.seed = s;
            }
            if let Some(i) = a.instances {
                cfg.instances = i;
            }
            if let Some(act) = a.activation {
                cfg.activation = act;
            }
            cfg.inject_fault |= a.inject_fault;
            let rep = run_verify(&cfg)?;
            emit(&report::verify(&rep)?, a.common.format.unwrap_or(Format::Json), a.common.out.as_deref())?;
            Ok(rep.passed)
        }
        Command::Gradcheck(a) => {
            let mut cfg: GradcheckConfig = load(a.common.config.as_deref())?;
            a.dims.apply(&mut cfg.dims);
            if let Some(s) = a.common.seed {
                cfg.seed = s;
            }
            if let Some(act) = a.activation {
                cfg.activation = act;
            }
            if let Some(s) = a.scheme {
                cfg.scheme = s;
            }
            cfg.zero_upstream |= a.zero_upstream;
            let rep = run_gradcheck(&cfg)?;
            emit(&report::gradcheck(&rep)?, a.common.format.unwrap_or(Format::Json), a.common.out.as_deref())?;
            Ok(rep.passed)
        }
        Command::Bench(a) => {
            let mut cfg: BenchConfig = load(a.common.config.as_deref())?;
            a.dims.apply(&mut cfg.dims);
            if let Some(s) = a.common.seed {
                cfg.seed = s;
            }
            if let Some(r) = a.routing {
                cfg.routing = r;
            }
            if let Some(f) = a.capacity_factor {
                cfg.capacity_factor = f;
            }
            let rows = run_bench(&cfg)?;
            emit(&report::bench(&rows)?, a.common.format.unwrap_or(Format::Csv), a.common.out.as_deref())?;
            Ok(true)
        }
        Command::Simulate(a) => {
            let mut sc = match &a.common.config {
                Some(p) => load::<ScenarioFile>(Some(p))?.0,
                None => Scenario::uniform(a.devices.unwrap_or(2), Dims::default()),
            };
            if a.common.config.is_some() && a.devices.is_some() {
                return Err(Failure::Usage("--devices conflicts with a configuration file".into()));
            }
            if sc.devices.is_empty() {
                return Err(Failure::Usage("at least one device required".into()));
            }
            a.dims.apply(&mut sc.dims);
            if let Some(s) = a.common.seed {
                sc.seed = s;
            }
            if let Some(s) = a.scheme {
                sc.scheme = match s {
                    SchemeArg::DataCentric => SchemeSelection::DataCentric,
                    SchemeArg::ModelCentric => SchemeSelection::ModelCentric,
                    SchemeArg::Both => SchemeSelection::Both,
                };
            }
            if let Some(t) = a.non_moe_time {
                sc.non_moe_time = t;
            }
            if let Some(w) = a.crossover {
                sc.crossover_workloads = Some(w);
            }
            if let Some(r) = a.routing {
                sc.routing = r;
            }
            if let Some(act) = a.activation {
                sc.activation = act;
            }
            let rep = run_scenario(&sc)?;
            emit(&report::simulate(&rep)?, a.common.format.unwrap_or(Format::Json), a.common.out.as_deref())?;
            Ok(rep.passed)
        }
        Command::Probe(a) => {
            if a.size == 0 {
                return Err(Failure::Usage("--size must be positive".into()));
            }
            let elapsed = probe_capacity(a.iterations, a.size, a.seed);
            let rep = ProbeReport {
                device: a.device,
                elapsed_s: elapsed.as_secs_f64(),
            };
            emit(&report::probe(&rep)?, a.format.unwrap_or(Format::Json), a.out.as_deref())?;
            Ok(true)
        }
        Command::Allocate(a) => {
            let mut req: AllocateRequest = load(a.config.as_deref())?;
            if let Some(l) = a.latencies {
                req.latencies = l;
                req.devices.clear();
            }
            if let Some(t) = a.total {
                req.total = Some(t);
            }
            if let Some(k) = a.kind {
                req.kind = Some(match k {
                    KindArg::Batch => AllocationKind::Batch,
                    KindArg::Hidden => AllocationKind::Hidden,
                });
            }
            let devices: Vec<DeviceProfile> = if !req.latencies.is_empty() {
                req.latencies
                    .iter()
                    .enumerate()
                    .map(|(id, &latency)| DeviceProfile {
                        id,
                        latency,
                        label: None,
                    })
                    .collect()
            } else {
                req.devices
            };
            if devices.is_empty() {
                return Err(Failure::Usage("no latencies given".into()));
            }
            let total = req.total.ok_or_else(|| Failure::Usage("--total is required".into()))?;
            let latencies: Vec<f64> = devices.iter().map(|d| d.latency).collect();
            let plan = match req.kind.unwrap_or(AllocationKind::Batch) {
                AllocationKind::Batch => allocate_batches(&latencies, total)?,
                AllocationKind::Hidden => allocate_hidden(&latencies, total)?,
            };
            let rep = AllocateReport::new(&devices, &capacity_proportions(&latencies)?, &plan);
            emit(&report::allocate(&rep)?, a.format.unwrap_or(Format::Json), a.out.as_deref())?;
            Ok(true)
        }
    }
}

/// A scenario file must name its devices; everything else has defaults.
struct ScenarioFile(Scenario);

impl Default for ScenarioFile {
    fn default() -> Self {
        ScenarioFile(Scenario::uniform(1, Dims::default()))
    }
}

impl<'de> Deserialize<'de> for ScenarioFile {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Scenario::deserialize(d).map(ScenarioFile)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
