//! Desk-scale counters: token MACs, padding and drops, activation memory, operator wall time.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::es_ops::{esmm_macs, EsKernels, EsOutputMode};
use crate::layer::{estimate_activation_memory, moe_backward, moe_forward, LayerConfig, MoeParams, Scheme};
use crate::oracle::{count_redundancy, LayerDims};
use crate::routing::{build_reindex_all, synthesize_routing, RoutingDistribution};
use crate::tensor::Matrix;
use crate::verify::Dims;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub dims: Dims,
    pub seed: u64,
    pub routing: RoutingDistribution,
    pub capacity_factor: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dims: Dims::default(),
            seed: 0,
            routing: RoutingDistribution::Uniform,
            capacity_factor: 1.0,
        }
    }
}

/// One CSV row per top-k value from 1 to `dims.topk`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub k: usize,
    pub n: usize,
    pub experts: usize,
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub blk: usize,
    pub capacity_factor: f64,
    pub capacity: Option<usize>,
    pub es_token_macs: u64,
    pub es_tile_macs: u64,
    pub oracle_token_macs: u64,
    pub padded_rows: usize,
    pub dropped_tokens: usize,
    pub mem_naive: f64,
    pub mem_efficient: f64,
    pub esmm_us: f64,
    pub ess_us: f64,
    pub estmm_us: f64,
    pub forward_us: f64,
    pub backward_us: f64,
}

pub const BENCH_COLUMNS: [&str; 21] = [
    "k",
    "n",
    "experts",
    "d_in",
    "hidden",
    "d_out",
    "blk",
    "capacity_factor",
    "capacity",
    "es_token_macs",
    "es_tile_macs",
    "oracle_token_macs",
    "padded_rows",
    "dropped_tokens",
    "mem_naive",
    "mem_efficient",
    "esmm_us",
    "ess_us",
    "estmm_us",
    "forward_us",
    "backward_us",
];

fn micros(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e6
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let d = cfg.dims;
    d.validate()?;
    if cfg.capacity_factor.is_nan() || cfg.capacity_factor < 0.0 {
        return Err(Error::InvalidArgument(format!("capacity factor {}", cfg.capacity_factor)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = MoeParams::random(d.experts, d.d_in, d.hidden, d.d_out, &mut rng);
    let x = Matrix::random(d.n, d.d_in, 1.0, &mut rng);
    let g = Matrix::random(d.n, d.d_out, 1.0, &mut rng);
    let dims = LayerDims {
        d_in: d.d_in,
        hidden: d.hidden,
        d_out: d.d_out,
    };
    let ratio = d.hidden as f64 / d.d_in as f64;
    let ops = EsKernels::default();
    let mut rows = Vec::with_capacity(d.topk);
    for k in 1..=d.topk {
        let routing = synthesize_routing(d.n, d.experts, k, cfg.routing, cfg.seed)?;
        let reindex = build_reindex_all(&routing, d.blk)?;
        let red = count_redundancy(&routing, dims, cfg.capacity_factor);
        let (mut token_macs, mut tile_macs) = (0, 0);
        for rx in &reindex {
            for (a, b) in [(d.d_in, d.hidden), (d.hidden, d.d_out)] {
                let c = esmm_macs(rx, a, b);
                token_macs += c.token;
                tile_macs += c.tile;
            }
        }
        let rx = &reindex[0];
        let t = Instant::now();
        let h = ops.esmm(&x, &params.w1, Some(&params.b1), rx, EsOutputMode::Write, None)?;
        let esmm_us = micros(t);
        let t = Instant::now();
        ops.ess(&h, rx)?;
        let ess_us = micros(t);
        let t = Instant::now();
        ops.estmm(&x, &h, rx)?;
        let estmm_us = micros(t);

        let config = LayerConfig {
            blk: d.blk,
            ..Default::default()
        };
        let t = Instant::now();
        let (_, stash) = moe_forward(&x, &params, &routing, &config)?;
        let forward_us = micros(t);
        let t = Instant::now();
        moe_backward(&stash, &params, &g, true)?;
        let backward_us = micros(t);

        rows.push(BenchRow {
            k,
            n: d.n,
            experts: d.experts,
            d_in: d.d_in,
            hidden: d.hidden,
            d_out: d.d_out,
            blk: d.blk,
            capacity_factor: cfg.capacity_factor,
            capacity: red.capacity,
            es_token_macs: token_macs,
            es_tile_macs: tile_macs,
            oracle_token_macs: red.token_macs_oracle,
            padded_rows: red.padded_rows,
            dropped_tokens: red.dropped_tokens,
            mem_naive: estimate_activation_memory(d.n, k, ratio, Scheme::Naive),
            mem_efficient: estimate_activation_memory(d.n, k, ratio, Scheme::MemoryEfficient),
            esmm_us,
            ess_us,
            estmm_us,
            forward_us,
            backward_us,
        });
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wtr.write_record(BENCH_COLUMNS)?;
    }
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
