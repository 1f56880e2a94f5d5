//! Deterministic multi-device simulator.
//!
//! Devices run as sequential turns that meet at synchronous collectives.
//! Numerics are real; time is modeled:
//!
//! - compute time of a device is its multiply-accumulate count over its `compute_rate`;
//! - a collective costs `max latency + volume / min bandwidth` among the
//!   participants and is free on a single device.
//!
//! Two execution schemes are provided. In the data-centric scheme parameters
//! travel: every device all-gathers the hidden-dimension shards into a
//! pipeline-shared cache and runs the whole layer on its local tokens. In the
//! model-centric scheme tokens travel: every device sees the gathered global
//! batch, computes with its own hidden slice, and partial results are
//! all-reduced.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{moe_backward, moe_forward, LayerConfig, MoeParams};
use crate::oracle::LayerDims;
use crate::routing::RoutingChoice;
use crate::tensor::{Matrix, Tensor3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    #[serde(default)]
    pub id: usize,
    /// MACs per time unit.
    pub compute_rate: f64,
    /// Values per time unit.
    pub link_bandwidth: f64,
    /// Time units per collective.
    pub link_latency: f64,
}

impl DeviceSpec {
    pub fn new(id: usize, compute_rate: f64, link_bandwidth: f64, link_latency: f64) -> Self {
        Self {
            id,
            compute_rate,
            link_bandwidth,
            link_latency,
        }
    }

    fn check(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.compute_rate) || !ok(self.link_bandwidth) || !(self.link_latency.is_finite() && self.link_latency >= 0.0) {
            return Err(Error::InvalidArgument(format!("device {} has non-positive rates", self.id)));
        }
        Ok(())
    }
}

/// Device set plus the non-MoE stage that parameter gathering may overlap with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub devices: Vec<DeviceSpec>,
    /// Duration of the non-MoE work (attention, router) preceding the layer in each direction.
    #[serde(default)]
    pub non_moe_time: f64,
    /// Layer count used for the retain-everything memory baseline.
    #[serde(default = "default_layers")]
    pub layers: usize,
}

fn default_layers() -> usize {
    1
}

impl CostModel {
    pub fn new(devices: Vec<DeviceSpec>) -> Self {
        Self {
            devices,
            non_moe_time: 0.0,
            layers: 1,
        }
    }

    pub fn uniform(n: usize, compute_rate: f64, link_bandwidth: f64, link_latency: f64) -> Self {
        Self::new(
            (0..n)
                .map(|id| DeviceSpec::new(id, compute_rate, link_bandwidth, link_latency))
                .collect(),
        )
    }

    fn check(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::InvalidArgument("at least one device required".into()));
        }
        if !(self.non_moe_time.is_finite() && self.non_moe_time >= 0.0) {
            return Err(Error::InvalidArgument("non_moe_time must be non-negative".into()));
        }
        self.devices.iter().try_for_each(DeviceSpec::check)
    }

    /// Modeled duration of one collective moving `volume` values.
    pub fn collective_time(&self, volume: usize) -> f64 {
        if self.devices.len() <= 1 {
            return 0.0;
        }
        let latency = self.devices.iter().map(|d| d.link_latency).fold(0.0, f64::max);
        let bandwidth = self
            .devices
            .iter()
            .map(|d| d.link_bandwidth)
            .fold(f64::INFINITY, f64::min);
        latency + volume as f64 / bandwidth
    }

    /// Shares of the total compute rate per device.
    pub fn rate_shares(&self) -> Vec<f64> {
        let total: f64 = self.devices.iter().map(|d| d.compute_rate).sum();
        self.devices.iter().map(|d| d.compute_rate / total).collect()
    }
}

/// One device's slice of the layer parameters along the hidden axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamShard {
    pub offset: usize,
    pub w1: Tensor3,
    pub b1: Matrix,
    pub w2: Tensor3,
    /// Present only on the owner (rank 0).
    pub b2: Option<Matrix>,
}

impl ParamShard {
    pub fn width(&self) -> usize {
        self.w1.dims()[2]
    }

    pub fn n_values(&self) -> usize {
        self.w1.data().len() + self.b1.data().len() + self.w2.data().len() + self.b2.as_ref().map_or(0, |b| b.data().len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShardedParams {
    pub shards: Vec<ParamShard>,
}

/// Splits every expert's hidden dimension into consecutive slices of the given widths.
pub fn shard_params(params: &MoeParams, hidden_alloc: &[usize]) -> Result<ShardedParams> {
    let total: usize = hidden_alloc.iter().sum();
    if total != params.hidden() {
        return Err(Error::AllocationSum {
            expected: params.hidden(),
            actual: total,
        });
    }
    if hidden_alloc.contains(&0) {
        return Err(Error::InvalidArgument("every device needs a non-empty hidden slice".into()));
    }
    let mut offset = 0;
    let shards = hidden_alloc
        .iter()
        .enumerate()
        .map(|(rank, &h)| {
            let end = offset + h;
            let shard = ParamShard {
                offset,
                w1: params.w1.slice_last(offset, end),
                b1: params.b1.slice_cols(offset, end),
                w2: params.w2.slice_middle(offset, end),
                b2: (rank == 0).then(|| params.b2.clone()),
            };
            offset = end;
            shard
        })
        .collect();
    Ok(ShardedParams { shards })
}

impl ShardedParams {
    pub fn devices(&self) -> usize {
        self.shards.len()
    }

    /// Concatenates the slices back into full parameters.
    pub fn gather(&self) -> Result<MoeParams> {
        let w1: Vec<Tensor3> = self.shards.iter().map(|s| s.w1.clone()).collect();
        let b1: Vec<Matrix> = self.shards.iter().map(|s| s.b1.clone()).collect();
        let w2: Vec<Tensor3> = self.shards.iter().map(|s| s.w2.clone()).collect();
        let b2 = self
            .shards
            .iter()
            .find_map(|s| s.b2.clone())
            .ok_or_else(|| Error::InvalidArgument("no shard owns b2".into()))?;
        MoeParams::new(Tensor3::concat_last(&w1)?, Matrix::hstack(&b1)?, Tensor3::concat_middle(&w2)?, b2)
    }

    /// Parameters a device computes with in the model-centric scheme; non-owners use a zero `b2`.
    pub fn local_params(&self, rank: usize) -> Result<MoeParams> {
        let s = &self.shards[rank];
        let [e, _, d_o] = s.w2.dims();
        let b2 = s.b2.clone().unwrap_or_else(|| Matrix::zeros(e, d_o));
        MoeParams::new(s.w1.clone(), s.b1.clone(), s.w2.clone(), b2)
    }

    pub fn full_values(&self) -> usize {
        self.shards.iter().map(ParamShard::n_values).sum()
    }
}

/// Per-device buffer holding at most one layer's full parameters.
#[derive(Clone, Debug)]
pub struct PipelineSharedCache {
    capacity: usize,
    resident: Option<(usize, MoeParams)>,
    fills: usize,
}

impl PipelineSharedCache {
    /// `capacity` is measured in parameter values.
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            resident: None,
            fills: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Replaces the cached layer.
    pub fn fill(&mut self, layer: usize, params: MoeParams) -> Result<&MoeParams> {
        let requested = params.n_values();
        if requested > self.capacity {
            return Err(Error::CacheCapacity {
                capacity: self.capacity,
                requested,
            });
        }
        self.fills += 1;
        Ok(&self.resident.insert((layer, params)).1)
    }

    pub fn resident_layer(&self) -> Option<usize> {
        self.resident.as_ref().map(|(l, _)| *l)
    }

    /// Number of layers currently resident; never more than one.
    pub fn resident_layers(&self) -> usize {
        usize::from(self.resident.is_some())
    }

    pub fn fills(&self) -> usize {
        self.fills
    }

    pub fn release(&mut self) {
        self.resident = None;
    }
}

/// Row-concatenation of per-rank blocks, replicated on every rank.
pub fn all_gather(parts: &[Matrix]) -> Result<Vec<Matrix>> {
    let joined = Matrix::vstack(parts)?;
    Ok(vec![joined; parts.len()])
}

/// Elementwise sum combining ranks in ascending order, replicated on every rank.
pub fn all_reduce_sum(parts: &[Matrix]) -> Result<Vec<Matrix>> {
    let Some(first) = parts.first() else {
        return Ok(Vec::new());
    };
    let mut acc = first.clone();
    for p in &parts[1..] {
        acc.add_assign(p)?;
    }
    Ok(vec![acc; parts.len()])
}

fn all_reduce_params(parts: &[MoeParams]) -> Result<MoeParams> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc.add_assign(p)?;
    }
    Ok(acc)
}

/// Per-device token batches with their routing and upstream gradients.
#[derive(Clone, Debug)]
pub struct Workload {
    pub batches: Vec<Matrix>,
    pub routings: Vec<RoutingChoice>,
    pub upstream: Vec<Matrix>,
}

impl Workload {
    /// Splits a global batch into consecutive local batches of the given sizes.
    pub fn split(x: &Matrix, routing: &RoutingChoice, upstream: &Matrix, sizes: &[usize]) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        if total != x.rows() || routing.n_tokens() != x.rows() || upstream.rows() != x.rows() {
            return Err(Error::AllocationSum {
                expected: x.rows(),
                actual: total,
            });
        }
        let mut start = 0;
        let mut w = Workload {
            batches: Vec::new(),
            routings: Vec::new(),
            upstream: Vec::new(),
        };
        for &s in sizes {
            w.batches.push(x.slice_rows(start, start + s));
            w.routings.push(routing.slice_tokens(start..start + s));
            w.upstream.push(upstream.slice_rows(start, start + s));
            start += s;
        }
        Ok(w)
    }

    pub fn devices(&self) -> usize {
        self.batches.len()
    }

    pub fn local_sizes(&self) -> Vec<usize> {
        self.batches.iter().map(Matrix::rows).collect()
    }

    fn check(&self, devices: usize) -> Result<()> {
        if self.batches.len() != devices || self.routings.len() != devices || self.upstream.len() != devices {
            return Err(Error::InvalidArgument(format!(
                "workload covers {} devices, expected {devices}",
                self.batches.len()
            )));
        }
        for ((b, r), g) in self.batches.iter().zip(&self.routings).zip(&self.upstream) {
            if b.rows() != r.n_tokens() || g.rows() != b.rows() {
                return Err(Error::InvalidArgument("local batch, routing and gradient disagree".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecScheme {
    DataCentric,
    ModelCentric,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CollectiveRecord {
    pub name: String,
    pub volume: usize,
    pub time: f64,
    /// Portion hidden behind the non-MoE stage.
    pub overlapped: f64,
}

/// Modeled timeline and memory footprint of one layer's forward and backward.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub scheme: ExecScheme,
    pub devices: usize,
    /// Forward plus backward compute per device.
    pub compute_time: Vec<f64>,
    pub collectives: Vec<CollectiveRecord>,
    pub comm_time: f64,
    pub overlap_savings: f64,
    pub makespan: f64,
    pub makespan_without_overlap: f64,
    /// Parameter values resident per device at peak.
    pub peak_param_memory: Vec<usize>,
    /// Parameter values per device if every layer's gathered parameters were retained.
    pub retain_all_param_memory: usize,
    /// Activation values per device at peak.
    pub peak_activation_memory: Vec<usize>,
    pub max_resident_cache_layers: usize,
}

/// Output of a simulated distributed step.
#[derive(Clone, Debug)]
pub struct DistRun {
    pub outputs: Vec<Matrix>,
    pub input_grads: Vec<Matrix>,
    pub param_grads: MoeParams,
    pub report: SimReport,
}

fn forward_macs(dims: LayerDims, k: usize, tokens: f64, hidden: f64) -> f64 {
    k as f64 * tokens * (dims.d_in as f64 * hidden + hidden * dims.d_out as f64)
}

/// Backward does an input-gradient and a weight-gradient product per forward product.
const BACKWARD_FACTOR: f64 = 2.0;

/// Timeline of the data-centric scheme for real-valued local token counts.
pub fn data_centric_timeline(
    cost: &CostModel,
    dims: LayerDims,
    k: usize,
    local_tokens: &[f64],
    param_values: usize,
) -> (Vec<f64>, Vec<CollectiveRecord>, f64, f64) {
    let a = cost.non_moe_time;
    let fwd: Vec<f64> = cost
        .devices
        .iter()
        .zip(local_tokens)
        .map(|(d, &n)| forward_macs(dims, k, n, dims.hidden as f64) / d.compute_rate)
        .collect();
    let compute: Vec<f64> = fwd.iter().map(|f| f * (1.0 + BACKWARD_FACTOR)).collect();
    let max_fwd = fwd.iter().copied().fold(0.0, f64::max);
    let gather = cost.collective_time(param_values);
    let reduce = cost.collective_time(param_values);
    let overlapped = gather.min(a);
    let collectives = vec![
        CollectiveRecord {
            name: "all_gather_params_fwd".into(),
            volume: param_values,
            time: gather,
            overlapped,
        },
        CollectiveRecord {
            name: "all_gather_params_bwd".into(),
            volume: param_values,
            time: gather,
            overlapped,
        },
        CollectiveRecord {
            name: "all_reduce_param_grads".into(),
            volume: param_values,
            time: reduce,
            overlapped: 0.0,
        },
    ];
    let moe = max_fwd * (1.0 + BACKWARD_FACTOR) + reduce;
    let with = 2.0 * a.max(gather) + moe;
    let without = 2.0 * (a + gather) + moe;
    (compute, collectives, with, without)
}

/// Timeline of the model-centric scheme for a real-valued global token count.
pub fn model_centric_timeline(
    cost: &CostModel,
    dims: LayerDims,
    k: usize,
    global_tokens: f64,
    hidden_shares: &[f64],
) -> (Vec<f64>, Vec<CollectiveRecord>, f64) {
    let a = cost.non_moe_time;
    let fwd: Vec<f64> = cost
        .devices
        .iter()
        .zip(hidden_shares)
        .map(|(d, &h)| forward_macs(dims, k, global_tokens, h) / d.compute_rate)
        .collect();
    let compute: Vec<f64> = fwd.iter().map(|f| f * (1.0 + BACKWARD_FACTOR)).collect();
    let max_fwd = fwd.iter().copied().fold(0.0, f64::max);
    let n = global_tokens.round() as usize;
    let rec = |name: &str, volume: usize| CollectiveRecord {
        name: name.into(),
        volume,
        time: cost.collective_time(volume),
        overlapped: 0.0,
    };
    let collectives = vec![
        rec("all_gather_tokens", n * dims.d_in),
        rec("all_reduce_outputs", n * dims.d_out),
        rec("all_gather_output_grads", n * dims.d_out),
        rec("all_reduce_input_grads", n * dims.d_in),
    ];
    // Token volumes enter the time continuously so the model stays linear in the workload.
    let per_value = |v: f64| {
        if cost.devices.len() <= 1 {
            0.0
        } else {
            let latency = cost.devices.iter().map(|d| d.link_latency).fold(0.0, f64::max);
            let bw = cost.devices.iter().map(|d| d.link_bandwidth).fold(f64::INFINITY, f64::min);
            latency + v / bw
        }
    };
    let comm = 2.0 * per_value(global_tokens * dims.d_in as f64) + 2.0 * per_value(global_tokens * dims.d_out as f64);
    let makespan = 2.0 * a + max_fwd * (1.0 + BACKWARD_FACTOR) + comm;
    (compute, collectives, makespan)
}

fn moe_param_values(dims: LayerDims, experts: usize) -> usize {
    experts * (dims.d_in * dims.hidden + dims.hidden + dims.hidden * dims.d_out + dims.d_out)
}

fn layer_dims(p: &MoeParams) -> LayerDims {
    LayerDims {
        d_in: p.d_in(),
        hidden: p.hidden(),
        d_out: p.d_out(),
    }
}

/// Every device gathers the full parameters into its cache and runs the layer on its local tokens.
pub fn run_data_centric(
    work: &Workload,
    shards: &ShardedParams,
    caches: &mut [PipelineSharedCache],
    config: &LayerConfig,
    cost: &CostModel,
) -> Result<DistRun> {
    cost.check()?;
    let d = cost.devices.len();
    work.check(d)?;
    if shards.devices() != d || caches.len() != d {
        return Err(Error::InvalidArgument(format!(
            "{} shards and {} caches for {d} devices",
            shards.devices(),
            caches.len()
        )));
    }
    let k = work.routings[0].k();

    // Forward stage: fill every cache from the gathered shards.
    let full = shards.gather()?;
    let dims = layer_dims(&full);
    let mut outputs = Vec::with_capacity(d);
    let mut stashes = Vec::with_capacity(d);
    for (rank, cache) in caches.iter_mut().enumerate() {
        let params = cache.fill(0, full.clone())?;
        let (y, stash) = moe_forward(&work.batches[rank], params, &work.routings[rank], config)?;
        outputs.push(y);
        stashes.push(stash);
    }
    let mut max_resident = caches.iter().map(PipelineSharedCache::resident_layers).max().unwrap_or(0);
    for c in caches.iter_mut() {
        c.release();
    }

    // Backward stage: refill, compute local gradients, then all-reduce parameter gradients.
    let mut input_grads = Vec::with_capacity(d);
    let mut param_grads = Vec::with_capacity(d);
    for (rank, cache) in caches.iter_mut().enumerate() {
        let params = cache.fill(0, full.clone())?;
        let g = moe_backward(&stashes[rank], params, &work.upstream[rank], false)?;
        input_grads.push(g.x);
        param_grads.push(g.params);
    }
    max_resident = max_resident.max(caches.iter().map(PipelineSharedCache::resident_layers).max().unwrap_or(0));
    for c in caches.iter_mut() {
        c.release();
    }
    let param_grads = all_reduce_params(&param_grads)?;

    let param_values = full.n_values();
    let local: Vec<f64> = work.local_sizes().iter().map(|&n| n as f64).collect();
    let (compute_time, collectives, makespan, without) = data_centric_timeline(cost, dims, k, &local, param_values);
    let report = SimReport {
        scheme: ExecScheme::DataCentric,
        devices: d,
        compute_time,
        comm_time: collectives.iter().map(|c| c.time).sum(),
        overlap_savings: without - makespan,
        collectives,
        makespan,
        makespan_without_overlap: without,
        peak_param_memory: shards
            .shards
            .iter()
            .zip(caches.iter())
            .map(|(s, c)| s.n_values() + c.capacity())
            .collect(),
        retain_all_param_memory: cost.layers * param_values,
        peak_activation_memory: work
            .local_sizes()
            .iter()
            .map(|&n| n * dims.d_in + 2 * k * n * dims.hidden + n * dims.d_out)
            .collect(),
        max_resident_cache_layers: max_resident,
    };
    Ok(DistRun {
        outputs,
        input_grads,
        param_grads,
        report,
    })
}

/// Tokens are gathered to every device; each computes with its hidden slice and partial results are all-reduced.
pub fn run_model_centric(
    work: &Workload,
    shards: &ShardedParams,
    config: &LayerConfig,
    cost: &CostModel,
) -> Result<DistRun> {
    cost.check()?;
    let d = cost.devices.len();
    work.check(d)?;
    if shards.devices() != d {
        return Err(Error::InvalidArgument(format!("{} shards for {d} devices", shards.devices())));
    }
    let sizes = work.local_sizes();
    let k = work.routings[0].k();
    let x = all_gather(&work.batches)?.swap_remove(0);
    let routing = RoutingChoice::concat(&work.routings)?;
    let n = x.rows();

    let locals = (0..d).map(|r| shards.local_params(r)).collect::<Result<Vec<_>>>()?;
    let mut partials = Vec::with_capacity(d);
    let mut stashes = Vec::with_capacity(d);
    for p in &locals {
        let (y, stash) = moe_forward(&x, p, &routing, config)?;
        partials.push(y);
        stashes.push(stash);
    }
    let y = all_reduce_sum(&partials)?.swap_remove(0);

    let g = all_gather(&work.upstream)?.swap_remove(0);
    let mut gx_partials = Vec::with_capacity(d);
    let mut w1 = Vec::with_capacity(d);
    let mut b1 = Vec::with_capacity(d);
    let mut w2 = Vec::with_capacity(d);
    let mut b2 = None;
    for (rank, (p, stash)) in locals.iter().zip(&stashes).enumerate() {
        let grads = moe_backward(stash, p, &g, false)?;
        gx_partials.push(grads.x);
        w1.push(grads.params.w1);
        b1.push(grads.params.b1);
        w2.push(grads.params.w2);
        if shards.shards[rank].b2.is_some() {
            b2 = Some(grads.params.b2);
        }
    }
    let gx = all_reduce_sum(&gx_partials)?.swap_remove(0);
    let param_grads = MoeParams::new(
        Tensor3::concat_last(&w1)?,
        Matrix::hstack(&b1)?,
        Tensor3::concat_middle(&w2)?,
        b2.ok_or_else(|| Error::InvalidArgument("no shard owns b2".into()))?,
    )?;

    let mut outputs = Vec::with_capacity(d);
    let mut input_grads = Vec::with_capacity(d);
    let mut start = 0;
    for &s in &sizes {
        outputs.push(y.slice_rows(start, start + s));
        input_grads.push(gx.slice_rows(start, start + s));
        start += s;
    }

    let dims = layer_dims(&locals[0]);
    let dims = LayerDims {
        hidden: shards.shards.iter().map(ParamShard::width).sum(),
        ..dims
    };
    let widths: Vec<f64> = shards.shards.iter().map(|s| s.width() as f64).collect();
    let (compute_time, collectives, makespan) = model_centric_timeline(cost, dims, k, n as f64, &widths);
    let param_values = shards.full_values();
    let report = SimReport {
        scheme: ExecScheme::ModelCentric,
        devices: d,
        compute_time,
        comm_time: collectives.iter().map(|c| c.time).sum(),
        overlap_savings: 0.0,
        collectives,
        makespan,
        makespan_without_overlap: makespan,
        peak_param_memory: shards.shards.iter().map(ParamShard::n_values).collect(),
        retain_all_param_memory: cost.layers * param_values,
        peak_activation_memory: shards
            .shards
            .iter()
            .map(|s| n * dims.d_in + 2 * k * n * s.width() + n * dims.d_out)
            .collect(),
        max_resident_cache_layers: 0,
    };
    Ok(DistRun {
        outputs,
        input_grads,
        param_grads,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossoverRow {
    pub workload: usize,
    pub data_centric: f64,
    pub model_centric: f64,
    pub preferred: ExecScheme,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossoverTable {
    pub rows: Vec<CrossoverRow>,
    /// First listed workload from which data-centric is never more expensive.
    pub threshold: Option<usize>,
    /// Workload where the two linear cost lines intersect.
    pub analytic_crossover: Option<f64>,
}

/// Compares modeled makespans of both schemes over growing global token counts.
///
/// Tokens and hidden units are split in proportion to compute rates, so both
/// makespans are linear in the workload.
pub fn crossover_probe(
    cost: &CostModel,
    dims: LayerDims,
    experts: usize,
    k: usize,
    workloads: &[usize],
) -> Result<CrossoverTable> {
    cost.check()?;
    if workloads.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("workloads must be non-decreasing".into()));
    }
    let shares = cost.rate_shares();
    let params = moe_param_values(dims, experts);
    let eval = |n: f64| {
        let local: Vec<f64> = shares.iter().map(|s| s * n).collect();
        let hidden: Vec<f64> = shares.iter().map(|s| s * dims.hidden as f64).collect();
        let dc = data_centric_timeline(cost, dims, k, &local, params).2;
        let mc = model_centric_timeline(cost, dims, k, n, &hidden).2;
        (dc, mc)
    };
    let rows: Vec<CrossoverRow> = workloads
        .iter()
        .map(|&w| {
            let (dc, mc) = eval(w as f64);
            CrossoverRow {
                workload: w,
                data_centric: dc,
                model_centric: mc,
                preferred: if mc < dc {
                    ExecScheme::ModelCentric
                } else {
                    ExecScheme::DataCentric
                },
            }
        })
        .collect();
    let threshold = rows
        .iter()
        .position(|r| r.preferred == ExecScheme::DataCentric)
        .filter(|&i| rows[i..].iter().all(|r| r.preferred == ExecScheme::DataCentric))
        .map(|i| rows[i].workload);
    // diff(n) = dc - mc is affine in n; evaluate it at two points to recover the line.
    let (d0, m0) = eval(0.0);
    let (d1, m1) = eval(1.0);
    let intercept = d0 - m0;
    let slope = (d1 - m1) - intercept;
    let analytic_crossover = (slope != 0.0)
        .then(|| -intercept / slope)
        .filter(|x| x.is_finite() && *x >= 0.0);
    Ok(CrossoverTable {
        rows,
        threshold,
        analytic_crossover,
    })
}
