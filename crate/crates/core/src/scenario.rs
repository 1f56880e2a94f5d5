//! JSON-described simulator scenarios checked against a single-device reference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{
    crossover_probe, run_data_centric, run_model_centric, shard_params, CostModel, CrossoverTable, DeviceSpec, DistRun,
    ExecScheme, PipelineSharedCache, SimReport, Workload,
};
use crate::error::{Error, Result};
use crate::hetero::{allocate_batches, allocate_hidden};
use crate::layer::{moe_backward, moe_forward, LayerConfig, MoeParams};
use crate::oracle::LayerDims;
use crate::routing::{synthesize_routing, RoutingDistribution};
use crate::tensor::{Activation, Matrix};
use crate::verify::Dims;

/// Largest scaled deviation from the single-device run that still counts as equivalent.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeSelection {
    DataCentric,
    ModelCentric,
    #[default]
    Both,
}

impl SchemeSelection {
    fn schemes(self) -> Vec<ExecScheme> {
        match self {
            Self::DataCentric => vec![ExecScheme::DataCentric],
            Self::ModelCentric => vec![ExecScheme::ModelCentric],
            Self::Both => vec![ExecScheme::DataCentric, ExecScheme::ModelCentric],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub non_moe_time: f64,
    #[serde(default = "one")]
    pub layers: usize,
    #[serde(default)]
    pub dims: Dims,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scheme: SchemeSelection,
    #[serde(default)]
    pub routing: RoutingDistribution,
    #[serde(default)]
    pub activation: Activation,
    /// Local batch sizes; derived from compute rates when absent.
    #[serde(default)]
    pub local_batches: Option<Vec<usize>>,
    /// Hidden slice widths; derived from compute rates when absent.
    #[serde(default)]
    pub hidden_shares: Option<Vec<usize>>,
    /// Global token counts for the cost-model sweep; no sweep when absent.
    #[serde(default)]
    pub crossover_workloads: Option<Vec<usize>>,
}

fn one() -> usize {
    1
}

impl Scenario {
    /// `devices` identical devices with everything else at defaults.
    pub fn uniform(devices: usize, dims: Dims) -> Self {
        let cost = CostModel::uniform(devices, 1e6, 1e5, 1e-3);
        Self {
            devices: cost.devices,
            non_moe_time: 0.0,
            layers: 1,
            dims,
            seed: 0,
            scheme: SchemeSelection::Both,
            routing: RoutingDistribution::Uniform,
            activation: Activation::Gelu,
            local_batches: None,
            hidden_shares: None,
            crossover_workloads: None,
        }
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel {
            devices: self.devices.clone(),
            non_moe_time: self.non_moe_time,
            layers: self.layers,
        }
    }

    /// Proxy latencies for allocation: the inverse of each compute rate.
    fn latencies(&self) -> Vec<f64> {
        self.devices.iter().map(|d| 1.0 / d.compute_rate).collect()
    }

    fn check_len(&self, what: &str, v: &[usize]) -> Result<()> {
        if v.len() != self.devices.len() {
            return Err(Error::InvalidArgument(format!(
                "{what} has {} entries for {} devices",
                v.len(),
                self.devices.len()
            )));
        }
        Ok(())
    }

    pub fn batch_split(&self) -> Result<Vec<usize>> {
        match &self.local_batches {
            Some(b) => {
                self.check_len("local_batches", b)?;
                Ok(b.clone())
            }
            None => Ok(allocate_batches(&self.latencies(), self.dims.n)?.shares),
        }
    }

    pub fn hidden_split(&self) -> Result<Vec<usize>> {
        match &self.hidden_shares {
            Some(h) => {
                self.check_len("hidden_shares", h)?;
                Ok(h.clone())
            }
            None => Ok(allocate_hidden(&self.latencies(), self.dims.hidden)?.shares),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchemeOutcome {
    pub scheme: ExecScheme,
    pub local_batches: Vec<usize>,
    pub hidden_shares: Vec<usize>,
    /// Scaled deviation of the concatenated outputs from the single-device run.
    pub output_delta: f64,
    /// Largest scaled deviation over the five gradients.
    pub gradient_delta: f64,
    pub equivalent: bool,
    pub report: SimReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub seed: u64,
    pub devices: usize,
    pub tolerance: f64,
    pub runs: Vec<SchemeOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crossover: Option<CrossoverTable>,
    pub passed: bool,
}

fn scaled_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.max_abs_diff(b) / (1.0 + b.max_abs())
}

fn param_delta(a: &MoeParams, b: &MoeParams) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .map(|(x, y)| {
            let diff = x.iter().zip(y).fold(0.0_f64, |m, (p, q)| m.max((p - q).abs()));
            let mag = y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            diff / (1.0 + mag)
        })
        .fold(0.0, f64::max)
}

pub fn run_scenario(sc: &Scenario) -> Result<ScenarioReport> {
    let d = sc.dims;
    d.validate()?;
    let cost = sc.cost_model();
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let params = MoeParams::random(d.experts, d.d_in, d.hidden, d.d_out, &mut rng);
    let x = Matrix::random(d.n, d.d_in, 1.0, &mut rng);
    let upstream = Matrix::random(d.n, d.d_out, 1.0, &mut rng);
    let routing = synthesize_routing(d.n, d.experts, d.topk, sc.routing, sc.seed)?;
    let config = LayerConfig {
        blk: d.blk,
        activation: sc.activation,
        ..Default::default()
    };

    let (y_ref, stash) = moe_forward(&x, &params, &routing, &config)?;
    let g_ref = moe_backward(&stash, &params, &upstream, false)?;

    let batches = sc.batch_split()?;
    let hidden = sc.hidden_split()?;
    let work = Workload::split(&x, &routing, &upstream, &batches)?;
    let shards = shard_params(&params, &hidden)?;

    let mut runs = Vec::new();
    for scheme in sc.scheme.schemes() {
        let run: DistRun = match scheme {
            ExecScheme::DataCentric => {
                let mut caches = vec![PipelineSharedCache::new(params.n_values()); sc.devices.len()];
                run_data_centric(&work, &shards, &mut caches, &config, &cost)?
            }
            ExecScheme::ModelCentric => run_model_centric(&work, &shards, &config, &cost)?,
        };
        let output_delta = scaled_diff(&Matrix::vstack(&run.outputs)?, &y_ref);
        let gradient_delta = param_delta(&run.param_grads, &g_ref.params)
            .max(scaled_diff(&Matrix::vstack(&run.input_grads)?, &g_ref.x));
        runs.push(SchemeOutcome {
            scheme,
            local_batches: batches.clone(),
            hidden_shares: hidden.clone(),
            output_delta,
            gradient_delta,
            equivalent: output_delta <= EQUIVALENCE_TOLERANCE && gradient_delta <= EQUIVALENCE_TOLERANCE,
            report: run.report,
        });
    }

    let crossover = match &sc.crossover_workloads {
        Some(w) => {
            let dims = LayerDims {
                d_in: d.d_in,
                hidden: d.hidden,
                d_out: d.d_out,
            };
            Some(crossover_probe(&cost, dims, d.experts, d.topk, w)?)
        }
        None => None,
    };
    let passed = runs.iter().all(|r| r.equivalent);
    Ok(ScenarioReport {
        seed: sc.seed,
        devices: sc.devices.len(),
        tolerance: EQUIVALENCE_TOLERANCE,
        runs,
        crossover,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims {
            n: 16,
            experts: 4,
            topk: 2,
            d_in: 4,
            hidden: 8,
            d_out: 4,
            blk: 4,
        }
    }

    #[test]
    fn two_devices_even_split_is_equivalent() {
        let rep = run_scenario(&Scenario::uniform(2, dims())).unwrap();
        assert!(rep.passed, "{rep:#?}");
        assert_eq!(rep.runs.len(), 2);
        assert_eq!(rep.runs[0].local_batches, vec![8, 8]);
        assert_eq!(rep.runs[1].hidden_shares, vec![4, 4]);
    }

    #[test]
    fn single_device_has_no_communication() {
        let rep = run_scenario(&Scenario::uniform(1, dims())).unwrap();
        for r in &rep.runs {
            assert_eq!(r.report.comm_time, 0.0);
            assert!(r.report.collectives.iter().all(|c| c.time == 0.0));
            assert_eq!(r.output_delta, 0.0);
        }
    }

    #[test]
    fn parses_minimal_json() {
        let sc: Scenario = serde_json::from_str(
            r#"{"devices": [{"compute_rate": 2.0, "link_bandwidth": 1.0, "link_latency": 0.0},
                            {"compute_rate": 1.0, "link_bandwidth": 1.0, "link_latency": 0.0}],
                "dims": {"n": 12, "hidden": 6}, "scheme": "model_centric"}"#,
        )
        .unwrap();
        assert_eq!(sc.dims.experts, Dims::default().experts);
        assert_eq!(sc.batch_split().unwrap(), vec![8, 4]);
        assert_eq!(sc.hidden_split().unwrap(), vec![4, 2]);
        let rep = run_scenario(&sc).unwrap();
        assert_eq!(rep.runs.len(), 1);
        assert!(rep.passed);
    }

    #[test]
    fn wrong_share_lengths_rejected() {
        let mut sc = Scenario::uniform(2, dims());
        sc.local_batches = Some(vec![16]);
        assert!(run_scenario(&sc).is_err());
        sc.local_batches = Some(vec![10, 5]);
        assert!(matches!(run_scenario(&sc), Err(Error::AllocationSum { .. })));
    }
}
