//! JSON and CSV renderings of every subcommand's report.
//!
//! CSV column sets are fixed; JSON shapes are described by the files in `schemas/`.

use std::error::Error;

use esmoe::bench::{write_bench_csv, BenchRow};
use esmoe::hetero::{AllocationKind, AllocationPlan, DeviceProfile};
use esmoe::scenario::ScenarioReport;
use esmoe::verify::{GradcheckReport, VerifyReport};
use serde::Serialize;

type Result<T> = std::result::Result<T, Box<dyn Error>>;

pub struct Rendered {
    pub json: String,
    pub csv: String,
}

pub const VERIFY_COLUMNS: [&str; 5] = ["suite", "instances", "max_deviation", "tolerance", "passed"];
pub const GRADCHECK_COLUMNS: [&str; 5] = ["tensor", "entries", "max_relative_error", "max_abs_analytic", "worst_index"];
pub const SIMULATE_COLUMNS: [&str; 14] = [
    "scheme",
    "devices",
    "local_batches",
    "hidden_shares",
    "output_delta",
    "gradient_delta",
    "equivalent",
    "max_compute_time",
    "comm_time",
    "overlap_savings",
    "makespan",
    "makespan_without_overlap",
    "max_peak_param_memory",
    "retain_all_param_memory",
];
pub const PROBE_COLUMNS: [&str; 2] = ["device", "elapsed_s"];
pub const ALLOCATE_COLUMNS: [&str; 5] = ["device", "latency", "proportion", "ideal", "share"];

fn json<T: Serialize + ?Sized>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn table<const N: usize>(header: [&str; N], rows: Vec<[String; N]>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn joined(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

pub fn verify(rep: &VerifyReport) -> Result<Rendered> {
    let rows = rep
        .suites
        .iter()
        .map(|s| {
            [
                s.name.clone(),
                s.instances.to_string(),
                s.max_deviation.to_string(),
                s.tolerance.to_string(),
                s.passed.to_string(),
            ]
        })
        .collect();
    Ok(Rendered {
        json: json(rep)?,
        csv: table(VERIFY_COLUMNS, rows)?,
    })
}

pub fn gradcheck(rep: &GradcheckReport) -> Result<Rendered> {
    let rows = rep
        .tensors
        .iter()
        .map(|t| {
            [
                t.tensor.clone(),
                t.entries.to_string(),
                t.max_relative_error.to_string(),
                t.max_abs_analytic.to_string(),
                t.worst_index.to_string(),
            ]
        })
        .collect();
    Ok(Rendered {
        json: json(rep)?,
        csv: table(GRADCHECK_COLUMNS, rows)?,
    })
}

pub fn bench(rows: &[BenchRow]) -> Result<Rendered> {
    let mut buf = Vec::new();
    write_bench_csv(rows, &mut buf)?;
    Ok(Rendered {
        json: json(rows)?,
        csv: String::from_utf8(buf)?,
    })
}

pub fn simulate(rep: &ScenarioReport) -> Result<Rendered> {
    let rows = rep
        .runs
        .iter()
        .map(|r| {
            let s = &r.report;
            Ok([
                serde_json::to_value(r.scheme)?.as_str().unwrap_or_default().to_string(),
                s.devices.to_string(),
                joined(&r.local_batches),
                joined(&r.hidden_shares),
                r.output_delta.to_string(),
                r.gradient_delta.to_string(),
                r.equivalent.to_string(),
                s.compute_time.iter().copied().fold(0.0, f64::max).to_string(),
                s.comm_time.to_string(),
                s.overlap_savings.to_string(),
                s.makespan.to_string(),
                s.makespan_without_overlap.to_string(),
                s.peak_param_memory.iter().max().copied().unwrap_or(0).to_string(),
                s.retain_all_param_memory.to_string(),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Rendered {
        json: json(rep)?,
        csv: table(SIMULATE_COLUMNS, rows)?,
    })
}

#[derive(Serialize)]
pub struct ProbeReport {
    pub device: usize,
    pub elapsed_s: f64,
}

pub fn probe(rep: &ProbeReport) -> Result<Rendered> {
    Ok(Rendered {
        json: json(rep)?,
        csv: table(PROBE_COLUMNS, vec![[rep.device.to_string(), rep.elapsed_s.to_string()]])?,
    })
}

#[derive(Serialize)]
pub struct AllocatedDevice {
    pub id: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub latency: f64,
    pub proportion: f64,
    pub ideal: f64,
    pub share: usize,
}

#[derive(Serialize)]
pub struct AllocateReport {
    pub kind: AllocationKind,
    pub total: usize,
    pub devices: Vec<AllocatedDevice>,
}

impl AllocateReport {
    pub fn new(devices: &[DeviceProfile], proportions: &[f64], plan: &AllocationPlan) -> Self {
        let devices = devices
            .iter()
            .zip(proportions)
            .zip(plan.ideal.iter().zip(&plan.shares))
            .map(|((d, &proportion), (&ideal, &share))| AllocatedDevice {
                id: d.id,
                label: d.label.clone(),
                latency: d.latency,
                proportion,
                ideal,
                share,
            })
            .collect();
        Self {
            kind: plan.kind,
            total: plan.total,
            devices,
        }
    }
}

pub fn allocate(rep: &AllocateReport) -> Result<Rendered> {
    let rows = rep
        .devices
        .iter()
        .map(|d| {
            [
                d.id.to_string(),
                d.latency.to_string(),
                d.proportion.to_string(),
                d.ideal.to_string(),
                d.share.to_string(),
            ]
        })
        .collect();
    Ok(Rendered {
        json: json(rep)?,
        csv: table(ALLOCATE_COLUMNS, rows)?,
    })
}
