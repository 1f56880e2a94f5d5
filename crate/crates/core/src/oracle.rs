//! Conventional dispatch / dense-per-expert / combine formulation of the MoE layer.
//!
//! This path never touches the expert-specific operators and serves as the
//! reference they are checked against. It also models a finite per-expert
//! capacity, which pads short experts with zero rows and drops overflow.

use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::layer::{MoeGrads, MoeParams};
use crate::routing::RoutingChoice;
use crate::tensor::{Activation, Matrix, Tensor3};

/// Origin of a dispatched row: `(token, choice)`, or `None` for padding.
pub type RowOrigin = Option<(usize, usize)>;

/// Tokens regrouped per expert.
#[derive(Clone, Debug)]
pub struct DispatchedBatch {
    pub experts: Vec<Matrix>,
    pub origins: Vec<Vec<RowOrigin>>,
    /// `(token, choice)` pairs that did not fit their expert's capacity.
    pub dropped: Vec<(usize, usize)>,
    pub n_tokens: usize,
}

impl DispatchedBatch {
    pub fn padded_rows(&self) -> usize {
        self.origins.iter().flatten().filter(|o| o.is_none()).count()
    }

    pub fn total_rows(&self) -> usize {
        self.origins.iter().map(Vec::len).sum()
    }
}

/// Groups `(token, choice)` pairs by expert.
///
/// Pairs are visited choice-major and by ascending token, and an expert keeps
/// pairs until its `capacity` is reached; the rest are dropped. With a finite
/// capacity every expert is then zero-padded up to exactly `capacity` rows.
pub fn dispatch(x: &Matrix, routing: &RoutingChoice, capacity: Option<usize>) -> DispatchedBatch {
    let e = routing.n_experts();
    let mut origins: Vec<Vec<RowOrigin>> = vec![Vec::new(); e];
    let mut dropped = Vec::new();
    for (i, choice) in routing.choices().iter().enumerate() {
        for (t, &expert) in choice.iter().enumerate() {
            if capacity.is_some_and(|c| origins[expert].len() >= c) {
                dropped.push((t, i));
            } else {
                origins[expert].push(Some((t, i)));
            }
        }
    }
    if let Some(c) = capacity {
        for o in &mut origins {
            o.resize(c, None);
        }
    }
    let experts = origins
        .iter()
        .map(|rows| {
            let mut m = Matrix::zeros(rows.len(), x.cols());
            for (r, origin) in rows.iter().enumerate() {
                if let Some((t, _)) = origin {
                    m.row_mut(r).copy_from_slice(x.row(*t));
                }
            }
            m
        })
        .collect();
    DispatchedBatch {
        experts,
        origins,
        dropped,
        n_tokens: x.rows(),
    }
}

/// Returns every non-padding row to its token, summing over choices.
pub fn combine(batch: &DispatchedBatch, outputs: &[Matrix], d_out: usize) -> Result<Matrix> {
    if outputs.len() != batch.origins.len() {
        return Err(shape_err("combine", format!("{} expert outputs", batch.origins.len()), format!("{}", outputs.len())));
    }
    let mut y = Matrix::zeros(batch.n_tokens, d_out);
    for (e, (out, rows)) in outputs.iter().zip(&batch.origins).enumerate() {
        if out.rows() != rows.len() || out.cols() != d_out {
            return Err(shape_err(
                "combine",
                format!("expert {e} output ({}, {d_out})", rows.len()),
                format!("{:?}", out.shape()),
            ));
        }
        for (r, origin) in rows.iter().enumerate() {
            if let Some((t, _)) = origin {
                for (d, s) in y.row_mut(*t).iter_mut().zip(out.row(r)) {
                    *d += s;
                }
            }
        }
    }
    Ok(y)
}

/// Per-expert intermediates of [`oracle_forward`].
#[derive(Clone, Debug)]
pub struct OracleStash {
    pub batch: DispatchedBatch,
    pub y1: Vec<Matrix>,
    pub y2: Vec<Matrix>,
    pub activation: Activation,
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn oracle_forward(
    x: &Matrix,
    params: &MoeParams,
    routing: &RoutingChoice,
    capacity: Option<usize>,
    activation: Activation,
) -> Result<(Matrix, OracleStash)> {
    if x.cols() != params.d_in() || x.rows() != routing.n_tokens() || routing.n_experts() != params.experts() {
        return Err(shape_err(
            "oracle_forward",
            format!("x ({}, {}) over {} experts", routing.n_tokens(), params.d_in(), params.experts()),
            format!("{:?} over {}", x.shape(), routing.n_experts()),
        ));
    }
    let batch = dispatch(x, routing, capacity);
    let mut y1s = Vec::new();
    let mut y2s = Vec::new();
    let mut outs = Vec::new();
    for (e, xe) in batch.experts.iter().enumerate() {
        let mut y1 = xe.matmul(&params.w1.matrix(e))?;
        add_bias(&mut y1, params.b1.row(e));
        let y2 = activation.apply(&y1);
        let mut out = y2.matmul(&params.w2.matrix(e))?;
        add_bias(&mut out, params.b2.row(e));
        y1s.push(y1);
        y2s.push(y2);
        outs.push(out);
    }
    let y = combine(&batch, &outs, params.d_out())?;
    Ok((
        y,
        OracleStash {
            batch,
            y1: y1s,
            y2: y2s,
            activation,
        },
    ))
}

pub fn oracle_backward(stash: &OracleStash, params: &MoeParams, g_y: &Matrix) -> Result<MoeGrads> {
    if g_y.shape() != (stash.batch.n_tokens, params.d_out()) {
        return Err(shape_err(
            "oracle_backward",
            format!("({}, {})", stash.batch.n_tokens, params.d_out()),
            format!("{:?}", g_y.shape()),
        ));
    }
    let mut gw1 = Vec::new();
    let mut gb1 = Vec::new();
    let mut gw2 = Vec::new();
    let mut gb2 = Vec::new();
    let mut gx_parts = Vec::new();
    for (e, rows) in stash.batch.origins.iter().enumerate() {
        // Upstream gradient gathered into the dispatched layout; padding rows get zero.
        let mut g_out = Matrix::zeros(rows.len(), params.d_out());
        for (r, origin) in rows.iter().enumerate() {
            if let Some((t, _)) = origin {
                g_out.row_mut(r).copy_from_slice(g_y.row(*t));
            }
        }
        gb2.push(g_out.col_sums());
        gw2.push(stash.y2[e].transpose().matmul(&g_out)?);
        let g_y2 = g_out.matmul(&params.w2.matrix(e).transpose())?;
        let g_y1 = stash.activation.grad(&stash.y1[e], &g_y2)?;
        gb1.push(g_y1.col_sums());
        gw1.push(stash.batch.experts[e].transpose().matmul(&g_y1)?);
        gx_parts.push(g_y1.matmul(&params.w1.matrix(e).transpose())?);
    }
    let gx = combine(&stash.batch, &gx_parts, params.d_in())?;
    Ok(MoeGrads {
        params: MoeParams {
            w1: Tensor3::from_slices(&gw1)?,
            b1: Matrix::from_rows(&gb1)?,
            w2: Tensor3::from_slices(&gw2)?,
            b2: Matrix::from_rows(&gb2)?,
        },
        x: gx,
    })
}

/// Feature sizes of the two expert MLPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct LayerDims {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
}

impl LayerDims {
    /// MACs for one token through one expert.
    pub fn macs_per_token(&self) -> u64 {
        (self.d_in * self.hidden + self.hidden * self.d_out) as u64
    }
}

/// Compute and token-loss accounting of the padded per-expert formulation versus the in-place one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RedundancyReport {
    /// Per-expert row budget; `None` when unbounded.
    pub capacity: Option<usize>,
    pub token_macs_expert_specific: u64,
    pub token_macs_oracle: u64,
    pub padded_rows: usize,
    pub dropped_tokens: usize,
}

/// Per-expert capacity `ceil(f * k * N / E)`; infinite `f` means unbounded.
pub fn expert_capacity(capacity_factor: f64, k: usize, n_tokens: usize, n_experts: usize) -> Option<usize> {
    if capacity_factor.is_infinite() {
        return None;
    }
    Some((capacity_factor * (k * n_tokens) as f64 / n_experts as f64).ceil() as usize)
}

/// Counts MACs, padding and drops without materializing any data.
pub fn count_redundancy(routing: &RoutingChoice, dims: LayerDims, capacity_factor: f64) -> RedundancyReport {
    let per_row = dims.macs_per_token();
    let capacity = expert_capacity(capacity_factor, routing.k(), routing.n_tokens(), routing.n_experts());
    let loads = routing.expert_loads();
    let (mut rows, mut padded, mut dropped) = (0usize, 0usize, 0usize);
    for &load in &loads {
        match capacity {
            Some(c) => {
                rows += c;
                padded += c.saturating_sub(load);
                dropped += load.saturating_sub(c);
            }
            None => rows += load,
        }
    }
    RedundancyReport {
        capacity,
        token_macs_expert_specific: (routing.k() * routing.n_tokens()) as u64 * per_row,
        token_macs_oracle: rows as u64 * per_row,
        padded_rows: padded,
        dropped_tokens: dropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::{synthesize_routing, RoutingDistribution};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(n: usize, d: usize) -> Matrix {
        Matrix::new(n, d, (0..n * d).map(|v| v as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn unbounded_dispatch_groups_tokens() {
        let r = RoutingChoice::top1(2, vec![0, 1, 0]).unwrap();
        let b = dispatch(&tokens(3, 2), &r, None);
        assert_eq!(b.origins[0], vec![Some((0, 0)), Some((2, 0))]);
        assert_eq!(b.origins[1], vec![Some((1, 0))]);
        assert_eq!(b.padded_rows(), 0);
        assert!(b.dropped.is_empty());
        assert_eq!(b.experts[0].row(1), &[5.0, 6.0]);
    }

    #[test]
    fn capacity_drops_later_tokens() {
        let r = RoutingChoice::top1(1, vec![0, 0]).unwrap();
        let b = dispatch(&tokens(2, 1), &r, Some(1));
        assert_eq!(b.dropped, vec![(1, 0)]);
        assert_eq!(b.origins[0], vec![Some((0, 0))]);
    }

    #[test]
    fn capacity_pads_short_experts() {
        let r = RoutingChoice::top1(1, vec![0]).unwrap();
        let b = dispatch(&tokens(1, 2), &r, Some(2));
        assert_eq!(b.experts[0].rows(), 2);
        assert_eq!(b.experts[0].row(1), &[0.0, 0.0]);
        assert_eq!(b.padded_rows(), 1);
    }

    #[test]
    fn combine_identity_and_drops() {
        let x = tokens(4, 3);
        let r = RoutingChoice::top1(3, vec![2, 0, 2, 1]).unwrap();
        let b = dispatch(&x, &r, None);
        assert_eq!(combine(&b, &b.experts, 3).unwrap(), x);

        let r = RoutingChoice::top1(1, vec![0, 0, 0, 0]).unwrap();
        let b = dispatch(&x, &r, Some(3));
        let y = combine(&b, &b.experts, 3).unwrap();
        assert_eq!(y.row(3), &[0.0, 0.0, 0.0]);
        assert_eq!(y.row(2), x.row(2));
        assert!(combine(&b, &[], 3).is_err());
    }

    #[test]
    fn combine_top2_sums_choices() {
        let x = tokens(3, 2);
        let r = RoutingChoice::new(3, vec![vec![0, 1, 2], vec![1, 2, 0]]).unwrap();
        let b = dispatch(&x, &r, None);
        let y = combine(&b, &b.experts, 2).unwrap();
        let mut twice = x.clone();
        twice.add_assign(&x).unwrap();
        assert_eq!(y, twice);
    }

    #[test]
    fn zero_capacity_zeroes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MoeParams::random(3, 2, 4, 2, &mut rng);
        let x = Matrix::random(5, 2, 1.0, &mut rng);
        let r = synthesize_routing(5, 3, 2, RoutingDistribution::Uniform, 1).unwrap();
        let (y, stash) = oracle_forward(&x, &p, &r, Some(0), Activation::Gelu).unwrap();
        assert_eq!(y.max_abs(), 0.0);
        let g = oracle_backward(&stash, &p, &Matrix::random(5, 2, 1.0, &mut rng)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn single_expert_is_dense_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = MoeParams::random(1, 3, 4, 2, &mut rng);
        let x = Matrix::random(6, 3, 1.0, &mut rng);
        let r = RoutingChoice::top1(1, vec![0; 6]).unwrap();
        let (y, _) = oracle_forward(&x, &p, &r, None, Activation::Relu).unwrap();
        let mut h = x.matmul(&p.w1.matrix(0)).unwrap();
        add_bias(&mut h, p.b1.row(0));
        let mut dense = Activation::Relu.apply(&h).matmul(&p.w2.matrix(0)).unwrap();
        add_bias(&mut dense, p.b2.row(0));
        assert!(y.max_abs_diff(&dense) < 1e-14);
    }

    #[test]
    fn redundancy_balanced_and_skewed() {
        let dims = LayerDims {
            d_in: 4,
            hidden: 16,
            d_out: 4,
        };
        let balanced = synthesize_routing(64, 8, 2, RoutingDistribution::Balanced, 0).unwrap();
        let rep = count_redundancy(&balanced, dims, 1.0);
        assert_eq!((rep.padded_rows, rep.dropped_tokens), (0, 0));
        assert_eq!(rep.token_macs_oracle, rep.token_macs_expert_specific);

        let skew = synthesize_routing(64, 4, 1, RoutingDistribution::Fixed(0), 0).unwrap();
        let rep = count_redundancy(&skew, dims, 1.0);
        assert_eq!(rep.dropped_tokens, 48);
        assert_eq!(rep.padded_rows, 48);

        let rep = count_redundancy(&skew, dims, f64::INFINITY);
        assert_eq!(rep.capacity, None);
        assert_eq!(rep.token_macs_oracle, rep.token_macs_expert_specific);
    }

    #[test]
    fn redundancy_matches_brute_force_rows() {
        let dims = LayerDims {
            d_in: 3,
            hidden: 5,
            d_out: 2,
        };
        let r = synthesize_routing(1024, 8, 2, RoutingDistribution::Uniform, 17).unwrap();
        let rep = count_redundancy(&r, dims, 1.25);
        let cap = expert_capacity(1.25, 2, 1024, 8);
        assert_eq!(cap, Some(320));
        let b = dispatch(&Matrix::zeros(1024, 1), &r, cap);
        assert_eq!(rep.padded_rows, b.padded_rows());
        assert_eq!(rep.dropped_tokens, b.dropped.len());
        assert_eq!(rep.token_macs_oracle, b.total_rows() as u64 * dims.macs_per_token());
        assert_eq!(rep.dropped_tokens, 0);
        assert!(rep.token_macs_oracle > rep.token_macs_expert_specific);
    }
}
