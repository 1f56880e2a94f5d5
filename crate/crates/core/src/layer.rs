//! Forward and backward propagation of one MoE FFN built from expert-specific operators.
//!
//! Top-k output is the plain sum of the k per-choice second-MLP results, each
//! including `b2` of its expert. No gate scaling is applied.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::es_ops::{EsKernels, EsOutputMode};
use crate::routing::{build_reindex_all, ReIndex, RoutingChoice};
use crate::tensor::{Activation, Matrix, Tensor3};

/// Parameters of the expert FFNs: `W1 (E, D_i, H)`, `b1 (E, H)`, `W2 (E, H, D_o)`, `b2 (E, D_o)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeParams {
    pub w1: Tensor3,
    pub b1: Matrix,
    pub w2: Tensor3,
    pub b2: Matrix,
}

impl MoeParams {
    pub fn new(w1: Tensor3, b1: Matrix, w2: Tensor3, b2: Matrix) -> Result<Self> {
        let p = Self { w1, b1, w2, b2 };
        p.check()?;
        Ok(p)
    }

    pub fn random<R: Rng + ?Sized>(experts: usize, d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        let s1 = 1.0 / (d_in as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: Tensor3::random(experts, d_in, hidden, s1, rng),
            b1: Matrix::random(experts, hidden, s1, rng),
            w2: Tensor3::random(experts, hidden, d_out, s2, rng),
            b2: Matrix::random(experts, d_out, s2, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let [e, di, h] = self.w1.dims();
        let d_o = self.d_out();
        Self {
            w1: Tensor3::zeros(e, di, h),
            b1: Matrix::zeros(e, h),
            w2: Tensor3::zeros(e, h, d_o),
            b2: Matrix::zeros(e, d_o),
        }
    }

    fn check(&self) -> Result<()> {
        let [e, _, h] = self.w1.dims();
        let [e2, h2, d_o] = self.w2.dims();
        if e2 != e || h2 != h || self.b1.shape() != (e, h) || self.b2.shape() != (e, d_o) {
            return Err(shape_err(
                "MoeParams",
                format!("W1 (E={e}, _, H={h}) consistent with b1, W2, b2"),
                format!("b1 {:?}, W2 {:?}, b2 {:?}", self.b1.shape(), self.w2.dims(), self.b2.shape()),
            ));
        }
        Ok(())
    }

    pub fn experts(&self) -> usize {
        self.w1.dims()[0]
    }

    pub fn d_in(&self) -> usize {
        self.w1.dims()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.dims()[2]
    }

    pub fn d_out(&self) -> usize {
        self.w2.dims()[2]
    }

    pub fn n_values(&self) -> usize {
        self.w1.data().len() + self.b1.data().len() + self.w2.data().len() + self.b2.data().len()
    }

    /// Flat views of the four tensors, in `W1, b1, W2, b2` order.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [self.w1.data(), self.b1.data(), self.w2.data(), self.b2.data()]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.data_mut(),
            self.b1.data_mut(),
            self.w2.data_mut(),
            self.b2.data_mut(),
        ]
    }

    pub fn add_assign(&mut self, other: &MoeParams) -> Result<()> {
        self.w1.add_assign(&other.w1)?;
        self.b1.add_assign(&other.b1)?;
        self.w2.add_assign(&other.w2)?;
        self.b2.add_assign(&other.b2)
    }

    /// Largest absolute difference over all four tensors.
    pub fn max_abs_diff(&self, other: &MoeParams) -> f64 {
        self.w1
            .max_abs_diff(&other.w1)
            .max(self.b1.max_abs_diff(&other.b1))
            .max(self.w2.max_abs_diff(&other.w2))
            .max(self.b2.max_abs_diff(&other.b2))
    }

    pub fn max_abs(&self) -> f64 {
        self.w1
            .max_abs()
            .max(self.b1.max_abs())
            .max(self.w2.max_abs())
            .max(self.b2.max_abs())
    }
}

/// Gradients of a layer: parameter gradients mirror [`MoeParams`], plus the input gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeGrads {
    pub params: MoeParams,
    pub x: Matrix,
}

impl MoeGrads {
    /// Named max-abs differences per tensor: `W1, b1, W2, b2, x`.
    pub fn diffs(&self, other: &MoeGrads) -> [(&'static str, f64); 5] {
        [
            ("gW1", self.params.w1.max_abs_diff(&other.params.w1)),
            ("gb1", self.params.b1.max_abs_diff(&other.params.b1)),
            ("gW2", self.params.w2.max_abs_diff(&other.params.w2)),
            ("gb2", self.params.b2.max_abs_diff(&other.params.b2)),
            ("gx", self.x.max_abs_diff(&other.x)),
        ]
    }

    pub fn max_abs_diff(&self, other: &MoeGrads) -> f64 {
        self.diffs(other).iter().fold(0.0, |m, (_, d)| m.max(*d))
    }

    pub fn max_abs(&self) -> f64 {
        self.params.max_abs().max(self.x.max_abs())
    }
}

/// How the k per-choice results are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Each choice writes its own output buffer; buffers are summed afterwards.
    Naive,
    /// Each choice adds directly into one shared output buffer.
    #[default]
    MemoryEfficient,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Scheme::Naive),
            "memory_efficient" | "memory-efficient" | "efficient" => Ok(Scheme::MemoryEfficient),
            other => Err(Error::InvalidArgument(format!("unknown scheme `{other}`"))),
        }
    }
}

/// Execution settings of one layer call.
#[derive(Clone, Copy, Debug)]
pub struct LayerConfig {
    pub blk: usize,
    pub scheme: Scheme,
    pub activation: Activation,
    pub kernels: EsKernels,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            blk: 8,
            scheme: Scheme::MemoryEfficient,
            activation: Activation::Gelu,
            kernels: EsKernels::default(),
        }
    }
}

/// Everything backward needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardStash {
    pub x: Matrix,
    /// Hidden pre-activations, one per choice.
    pub y1: Vec<Matrix>,
    /// Hidden activations, one per choice.
    pub y2: Vec<Matrix>,
    pub reindex: Vec<ReIndex>,
    pub config: LayerConfig,
}

pub fn moe_forward(
    x: &Matrix,
    params: &MoeParams,
    routing: &RoutingChoice,
    config: &LayerConfig,
) -> Result<(Matrix, ForwardStash)> {
    params.check()?;
    if routing.k() > params.experts() {
        return Err(Error::TopKExceedsExperts {
            k: routing.k(),
            experts: params.experts(),
        });
    }
    if routing.n_experts() != params.experts() {
        return Err(shape_err("moe_forward", format!("{} experts", params.experts()), format!("routing over {}", routing.n_experts())));
    }
    if x.cols() != params.d_in() || x.rows() != routing.n_tokens() {
        return Err(shape_err(
            "moe_forward",
            format!("x of shape ({}, {})", routing.n_tokens(), params.d_in()),
            format!("{:?}", x.shape()),
        ));
    }
    let ops = config.kernels;
    let reindex = build_reindex_all(routing, config.blk)?;
    let mut y1s = Vec::with_capacity(routing.k());
    let mut y2s = Vec::with_capacity(routing.k());
    for rx in &reindex {
        let y1 = ops.esmm(x, &params.w1, Some(&params.b1), rx, EsOutputMode::Write, None)?;
        y2s.push(config.activation.apply(&y1));
        y1s.push(y1);
    }
    let y = match config.scheme {
        Scheme::Naive => {
            let mut partials = Vec::with_capacity(routing.k());
            for (y2, rx) in y2s.iter().zip(&reindex) {
                partials.push(ops.esmm(y2, &params.w2, Some(&params.b2), rx, EsOutputMode::Write, None)?);
            }
            sum_matrices(partials, x.rows(), params.d_out())
        }
        Scheme::MemoryEfficient => {
            let mut y = Matrix::zeros(x.rows(), params.d_out());
            for (y2, rx) in y2s.iter().zip(&reindex) {
                y = ops.esmm(y2, &params.w2, Some(&params.b2), rx, EsOutputMode::Accumulate, Some(y))?;
            }
            y
        }
    };
    let stash = ForwardStash {
        x: x.clone(),
        y1: y1s,
        y2: y2s,
        reindex,
        config: *config,
    };
    Ok((y, stash))
}

fn sum_matrices(parts: Vec<Matrix>, rows: usize, cols: usize) -> Matrix {
    let mut acc = Matrix::zeros(rows, cols);
    for p in &parts {
        acc.add_assign(p).expect("partials share a shape");
    }
    acc
}

pub fn moe_backward(stash: &ForwardStash, params: &MoeParams, g_y: &Matrix, use_fused: bool) -> Result<MoeGrads> {
    params.check()?;
    let n = stash.x.rows();
    if g_y.shape() != (n, params.d_out()) {
        return Err(shape_err("moe_backward", format!("g_y of shape ({n}, {})", params.d_out()), format!("{:?}", g_y.shape())));
    }
    if stash.x.cols() != params.d_in()
        || stash.y1.first().is_some_and(|y| y.cols() != params.hidden())
        || stash.reindex.first().is_some_and(|rx| rx.n_experts() != params.experts())
    {
        return Err(shape_err("moe_backward", "stash produced with these parameters", "mismatched stash"));
    }
    let ops = stash.config.kernels;
    let act = stash.config.activation;
    let w1_t = params.w1.transpose_inner();
    let w2_t = params.w2.transpose_inner();

    let mut grads = params.zeros_like();
    let mut gx_parts = Vec::new();
    let mut gx = Matrix::zeros(n, params.d_in());

    for ((y1, y2), rx) in stash.y1.iter().zip(&stash.y2).zip(&stash.reindex) {
        let (g_y2, gb2, gw2) = if use_fused {
            let f = ops.esfk(y2, g_y, &w2_t, rx)?;
            (f.grad_x, f.grad_b, f.grad_w)
        } else {
            (
                ops.esmm(g_y, &w2_t, None, rx, EsOutputMode::Write, None)?,
                ops.ess(g_y, rx)?,
                ops.estmm(y2, g_y, rx)?,
            )
        };
        grads.b2.add_assign(&gb2)?;
        grads.w2.add_assign(&gw2)?;

        let g_y1 = act.grad(y1, &g_y2)?;

        let (gb1, gw1) = if use_fused {
            let f = ops.esfk(&stash.x, &g_y1, &w1_t, rx)?;
            match stash.config.scheme {
                Scheme::Naive => gx_parts.push(f.grad_x),
                Scheme::MemoryEfficient => gx.add_assign(&f.grad_x)?,
            }
            (f.grad_b, f.grad_w)
        } else {
            match stash.config.scheme {
                Scheme::Naive => gx_parts.push(ops.esmm(&g_y1, &w1_t, None, rx, EsOutputMode::Write, None)?),
                Scheme::MemoryEfficient => {
                    gx = ops.esmm(&g_y1, &w1_t, None, rx, EsOutputMode::Accumulate, Some(gx))?;
                }
            }
            (ops.ess(&g_y1, rx)?, ops.estmm(&stash.x, &g_y1, rx)?)
        };
        grads.b1.add_assign(&gb1)?;
        grads.w1.add_assign(&gw1)?;
    }
    if stash.config.scheme == Scheme::Naive {
        gx = sum_matrices(gx_parts, n, params.d_in());
    }
    Ok(MoeGrads { params: grads, x: gx })
}

/// Activation-memory units of one layer's forward, with an input or output
/// token as one unit and a hidden token as `hidden_ratio` units.
///
/// Naive keeps k hidden batches, k pre-summed outputs and the final output;
/// the memory-efficient scheme drops the pre-summed outputs.
pub fn estimate_activation_memory(n_tokens: usize, k: usize, hidden_ratio: f64, scheme: Scheme) -> f64 {
    let n = n_tokens as f64;
    let k = k as f64;
    let hidden = k * hidden_ratio * n;
    match scheme {
        Scheme::Naive => hidden + k * n + n,
        Scheme::MemoryEfficient => hidden + n,
    }
}
