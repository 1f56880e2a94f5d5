//! Seeded equivalence suites and finite-difference gradient checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::es_ops::{EsKernels, EsOutputMode, TileOrder};
use crate::layer::{moe_backward, moe_forward, LayerConfig, MoeGrads, MoeParams, Scheme};
use crate::oracle::{oracle_backward, oracle_forward};
use crate::routing::{build_reindex, synthesize_routing, RoutingChoice, RoutingDistribution};
use crate::tensor::{Activation, Matrix, Tensor3};

/// Problem sizes shared by the verification workflows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dims {
    pub n: usize,
    pub experts: usize,
    pub topk: usize,
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub blk: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            n: 64,
            experts: 8,
            topk: 4,
            d_in: 8,
            hidden: 32,
            d_out: 8,
            blk: 8,
        }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        let all = [self.n, self.experts, self.topk, self.d_in, self.hidden, self.d_out, self.blk];
        if all.contains(&0) {
            return Err(Error::InvalidArgument("all dimensions must be positive".into()));
        }
        if self.topk > self.experts {
            return Err(Error::TopKExceedsExperts {
                k: self.topk,
                experts: self.experts,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    /// Upper bounds for the randomly sized instances.
    pub dims: Dims,
    pub seed: u64,
    pub instances: usize,
    pub activation: Activation,
    /// Perturbs the expert-specific matmul result so the operator suite must fail.
    #[serde(default)]
    pub inject_fault: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            dims: Dims::default(),
            seed: 0,
            instances: 50,
            activation: Activation::Gelu,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub suites: Vec<SuiteResult>,
    pub passed: bool,
}

/// A randomly sized layer instance no larger than the configured bounds.
#[derive(Clone, Debug)]
pub struct Instance {
    pub x: Matrix,
    pub params: MoeParams,
    pub routing: RoutingChoice,
    pub upstream: Matrix,
    pub blk: usize,
}

impl Instance {
    pub fn random<R: Rng + ?Sized>(bounds: &Dims, rng: &mut R) -> Result<Self> {
        let experts = rng.gen_range(1..=bounds.experts);
        let k = rng.gen_range(1..=bounds.topk.min(experts));
        let n = rng.gen_range(1..=bounds.n);
        let d_in = rng.gen_range(1..=bounds.d_in);
        let hidden = rng.gen_range(1..=bounds.hidden);
        let d_out = rng.gen_range(1..=bounds.d_out);
        let blk = *[2, 4, 8, bounds.blk].choose(rng).unwrap();
        let dist = match rng.gen_range(0..3) {
            0 => RoutingDistribution::Uniform,
            1 => RoutingDistribution::Zipf(1.5),
            _ => RoutingDistribution::Fixed(rng.gen_range(0..experts)),
        };
        Ok(Self {
            x: Matrix::random(n, d_in, 1.0, rng),
            params: MoeParams::random(experts, d_in, hidden, d_out, rng),
            routing: synthesize_routing(n, experts, k, dist, rng.gen())?,
            upstream: Matrix::random(n, d_out, 1.0, rng),
            blk,
        })
    }
}

fn scaled(diff: f64, magnitude: f64) -> f64 {
    diff / (1.0 + magnitude)
}

/// Brute-force per-token product used by the operator suite.
fn per_token_linear(x: &Matrix, w: &Tensor3, b: Option<&Matrix>, assignment: &[usize]) -> Matrix {
    let [_, d1, d2] = w.dims();
    let mut out = Matrix::zeros(x.rows(), d2);
    for (t, &e) in assignment.iter().enumerate() {
        for j in 0..d2 {
            let mut acc = 0.0;
            for i in 0..d1 {
                acc += x.get(t, i) * w.get(e, i, j);
            }
            out.set(t, j, acc + b.map_or(0.0, |b| b.get(e, j)));
        }
    }
    out
}

fn group_sum(x: &Matrix, assignment: &[usize], experts: usize) -> Matrix {
    let mut out = Matrix::zeros(experts, x.cols());
    for (t, &e) in assignment.iter().enumerate() {
        for (o, v) in out.row_mut(e).iter_mut().zip(x.row(t)) {
            *o += v;
        }
    }
    out
}

fn grouped_outer(x1: &Matrix, x2: &Matrix, assignment: &[usize], experts: usize) -> Result<Tensor3> {
    let slices = (0..experts)
        .map(|e| {
            let rows: Vec<&[f64]> = (0..x1.rows()).filter(|&t| assignment[t] == e).map(|t| x1.row(t)).collect();
            let rows2: Vec<&[f64]> = (0..x2.rows()).filter(|&t| assignment[t] == e).map(|t| x2.row(t)).collect();
            if rows.is_empty() {
                return Ok(Matrix::zeros(x1.cols(), x2.cols()));
            }
            Matrix::from_rows(&rows)?.transpose().matmul(&Matrix::from_rows(&rows2)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor3::from_slices(&slices)
}

struct Tracker {
    name: &'static str,
    tolerance: f64,
    max: f64,
    count: usize,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            max: 0.0,
            count: 0,
        }
    }

    fn record(&mut self, dev: f64) {
        // NaN must fail the suite.
        self.max = if dev.is_nan() { f64::INFINITY } else { self.max.max(dev) };
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name.into(),
            instances: self.count,
            max_deviation: self.max,
            tolerance: self.tolerance,
            passed: self.max <= self.tolerance,
        }
    }
}

/// Runs every suite; the report passes only if all suites do.
pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    cfg.dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ops = Tracker::new("operator_oracle", 1e-12);
    let mut layer = Tracker::new("layer_oracle", 1e-10);
    let mut scheme = Tracker::new("scheme_equivalence", 1e-12);
    let mut fused = Tracker::new("fused_equivalence", 0.0);
    let mut order = Tracker::new("tile_order_invariance", 0.0);
    let mut reindex = Tracker::new("reindex_invariants", 0.0);

    for _ in 0..cfg.instances {
        let inst = Instance::random(&cfg.dims, &mut rng)?;
        let e = inst.params.experts();

        // Operators against brute-force oracles, one routing choice at a time.
        for a in inst.routing.choices() {
            let rx = build_reindex(a, e, inst.blk)?;
            let mut y = EsKernels::default().esmm(&inst.x, &inst.params.w1, Some(&inst.params.b1), &rx, EsOutputMode::Write, None)?;
            if cfg.inject_fault {
                if let Some(v) = y.data_mut().first_mut() {
                    *v += 1e-6;
                }
            }
            let want = per_token_linear(&inst.x, &inst.params.w1, Some(&inst.params.b1), a);
            ops.record(scaled(y.max_abs_diff(&want), want.max_abs()));

            let s = EsKernels::default().ess(&inst.x, &rx)?;
            let want = group_sum(&inst.x, a, e);
            ops.record(scaled(s.max_abs_diff(&want), want.max_abs()));

            let t = EsKernels::default().estmm(&inst.x, &inst.upstream, &rx)?;
            let want = grouped_outer(&inst.x, &inst.upstream, a, e)?;
            ops.record(scaled(t.max_abs_diff(&want), want.max_abs()));

            for tile_order in [TileOrder::Descending, TileOrder::Shuffled(rng.gen()), TileOrder::Parallel] {
                let k = EsKernels::new(tile_order);
                let y2 = k.esmm(&inst.x, &inst.params.w1, Some(&inst.params.b1), &rx, EsOutputMode::Write, None)?;
                let want = EsKernels::default().esmm(&inst.x, &inst.params.w1, Some(&inst.params.b1), &rx, EsOutputMode::Write, None)?;
                order.record(y2.max_abs_diff(&want));
                order.record(k.estmm(&inst.x, &inst.upstream, &rx)?.max_abs_diff(&t));
            }

            reindex.record(if rx.validate(a).is_ok() { 0.0 } else { 1.0 });
        }

        // Layer against the dispatch/combine oracle at unbounded capacity.
        let base = LayerConfig {
            blk: inst.blk,
            activation: cfg.activation,
            ..Default::default()
        };
        let (y, stash) = moe_forward(&inst.x, &inst.params, &inst.routing, &base)?;
        let grads = moe_backward(&stash, &inst.params, &inst.upstream, false)?;
        let (oy, ostash) = oracle_forward(&inst.x, &inst.params, &inst.routing, None, cfg.activation)?;
        let og = oracle_backward(&ostash, &inst.params, &inst.upstream)?;
        layer.record(scaled(y.max_abs_diff(&oy), oy.max_abs()));
        layer.record(scaled(grads.max_abs_diff(&og), og.max_abs()));

        // Naive against memory-efficient.
        let naive = LayerConfig {
            scheme: Scheme::Naive,
            ..base
        };
        let (ny, nstash) = moe_forward(&inst.x, &inst.params, &inst.routing, &naive)?;
        let ng = moe_backward(&nstash, &inst.params, &inst.upstream, false)?;
        scheme.record(scaled(ny.max_abs_diff(&y), y.max_abs()));
        scheme.record(scaled(ng.max_abs_diff(&grads), grads.max_abs()));

        // Fused against unfused, exact.
        let fg = moe_backward(&stash, &inst.params, &inst.upstream, true)?;
        fused.record(fg.max_abs_diff(&grads));

        for t in [&mut ops, &mut layer, &mut scheme, &mut fused, &mut order, &mut reindex] {
            t.count += 1;
        }
    }

    let suites: Vec<SuiteResult> = [ops, layer, scheme, fused, order, reindex].into_iter().map(Tracker::finish).collect();
    let passed = suites.iter().all(|s| s.passed);
    Ok(VerifyReport {
        seed: cfg.seed,
        suites,
        passed,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub dims: Dims,
    pub seed: u64,
    pub activation: Activation,
    pub scheme: Scheme,
    /// Replace the all-ones upstream gradient (loss `Σ y`) with zeros.
    pub zero_upstream: bool,
}

impl Default for GradcheckConfig {
    /// Small enough for finite differences: 304 parameters.
    fn default() -> Self {
        Self {
            dims: Dims {
                n: 8,
                experts: 4,
                topk: 2,
                d_in: 4,
                hidden: 8,
                d_out: 4,
                blk: 4,
            },
            seed: 0,
            activation: Activation::Gelu,
            scheme: Scheme::MemoryEfficient,
            zero_upstream: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub entries: usize,
    pub max_relative_error: f64,
    pub max_abs_analytic: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub parameters: usize,
    pub tensors: Vec<TensorCheck>,
    /// Hidden pre-activations closer than `KINK_GUARD` to a non-differentiable point.
    pub near_kink: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
pub const KINK_GUARD: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1)`: relative for entries of magnitude above one, absolute below.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn loss(y: &Matrix, upstream: &Matrix) -> f64 {
    y.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
}

/// Central differences of `Σ upstream ⊙ y` with step `1e-6 · (1 + |θ|)`.
pub fn finite_difference_grads(
    x: &Matrix,
    params: &MoeParams,
    routing: &RoutingChoice,
    upstream: &Matrix,
    config: &LayerConfig,
) -> Result<MoeGrads> {
    let eval = |x: &Matrix, p: &MoeParams| -> Result<f64> {
        let (y, _) = moe_forward(x, p, routing, config)?;
        Ok(loss(&y, upstream))
    };
    let mut grads = params.zeros_like();
    let mut work = params.clone();
    for slot in 0..4 {
        for i in 0..work.tensors()[slot].len() {
            let theta = work.tensors()[slot][i];
            let h = 1e-6 * (1.0 + theta.abs());
            work.tensors_mut()[slot][i] = theta + h;
            let up = eval(x, &work)?;
            work.tensors_mut()[slot][i] = theta - h;
            let down = eval(x, &work)?;
            work.tensors_mut()[slot][i] = theta;
            grads.tensors_mut()[slot][i] = (up - down) / (2.0 * h);
        }
    }
    let mut gx = Matrix::zeros(x.rows(), x.cols());
    let mut xw = x.clone();
    for i in 0..x.data().len() {
        let theta = xw.data()[i];
        let h = 1e-6 * (1.0 + theta.abs());
        xw.data_mut()[i] = theta + h;
        let up = eval(&xw, params)?;
        xw.data_mut()[i] = theta - h;
        let down = eval(&xw, params)?;
        xw.data_mut()[i] = theta;
        gx.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(MoeGrads { params: grads, x: gx })
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> TensorCheck {
    let (worst_index, max_relative_error) = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |(bi, be), (i, e)| if e > be { (i, e) } else { (bi, be) });
    TensorCheck {
        tensor: name.into(),
        entries: analytic.len(),
        max_relative_error,
        max_abs_analytic: analytic.iter().fold(0.0, |m, v| m.max(v.abs())),
        worst_index,
    }
}

fn count_near_kink(stash_y1: &[Matrix], act: Activation) -> usize {
    if act != Activation::Relu {
        return 0;
    }
    stash_y1.iter().flat_map(|m| m.data()).filter(|v| v.abs() < KINK_GUARD).count()
}

/// Compares analytic layer gradients with central finite differences on one seeded instance.
///
/// For ReLU the instance is re-drawn (up to 32 times) until no hidden
/// pre-activation sits within [`KINK_GUARD`] of zero; the remaining count is reported.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let d = cfg.dims;
    d.validate()?;
    let config = LayerConfig {
        blk: d.blk,
        activation: cfg.activation,
        scheme: cfg.scheme,
        ..Default::default()
    };
    let mut attempt = 0u64;
    let (x, params, routing, upstream, stash) = loop {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(attempt));
        let x = Matrix::random(d.n, d.d_in, 1.0, &mut rng);
        let params = MoeParams::random(d.experts, d.d_in, d.hidden, d.d_out, &mut rng);
        let routing = synthesize_routing(d.n, d.experts, d.topk, RoutingDistribution::Uniform, rng.gen())?;
        let upstream = if cfg.zero_upstream {
            Matrix::zeros(d.n, d.d_out)
        } else {
            Matrix::new(d.n, d.d_out, vec![1.0; d.n * d.d_out])?
        };
        let (_, stash) = moe_forward(&x, &params, &routing, &config)?;
        attempt += 1;
        if count_near_kink(&stash.y1, cfg.activation) == 0 || attempt >= 32 {
            break (x, params, routing, upstream, stash);
        }
    };
    let analytic = moe_backward(&stash, &params, &upstream, false)?;
    let numeric = finite_difference_grads(&x, &params, &routing, &upstream, &config)?;
    let names = ["gW1", "gb1", "gW2", "gb2"];
    let mut tensors: Vec<TensorCheck> = names
        .iter()
        .zip(analytic.params.tensors())
        .zip(numeric.params.tensors())
        .map(|((n, a), b)| compare(n, a, b))
        .collect();
    tensors.push(compare("gx", analytic.x.data(), numeric.x.data()));
    let max_relative_error = tensors.iter().fold(0.0_f64, |m, t| m.max(t.max_relative_error));
    Ok(GradcheckReport {
        seed: cfg.seed,
        parameters: params.n_values(),
        tensors,
        near_kink: count_near_kink(&stash.y1, cfg.activation),
        max_relative_error,
        tolerance: GRADCHECK_TOLERANCE,
        passed: max_relative_error <= GRADCHECK_TOLERANCE,
    })
}
