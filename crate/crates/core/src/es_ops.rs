//! Expert-specific operators over a re-index vector.
//!
//! Every operator walks the padded re-index in tiles of `BLK` slots. A tile
//! only touches tokens routed to a single expert, so only one expert's
//! parameters are read per tile and padding slots are skipped. Tiles write
//! disjoint output regions, which makes the result independent of the order
//! in which tiles run.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::routing::ReIndex;
use crate::tensor::{Matrix, Tensor3};

/// Whether an operator overwrites routed rows of a fresh buffer or adds into an existing one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EsOutputMode {
    #[default]
    Write,
    Accumulate,
}

/// Order in which tiles of a single call are executed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TileOrder {
    /// Deterministic reference order.
    #[default]
    Ascending,
    Descending,
    Shuffled(u64),
    /// Tiles computed concurrently on the rayon pool, scattered afterwards.
    Parallel,
}

/// Token-level and tile-level multiply-accumulate counts of one `esmm` call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MacCount {
    pub token: u64,
    pub tile: u64,
}

/// Operator set bound to a tile execution order.
#[derive(Clone, Copy, Debug, Default)]
pub struct EsKernels {
    pub order: TileOrder,
}

#[derive(Clone, Copy, Debug)]
struct ColBlock {
    start: usize,
    width: usize,
}

fn col_blocks(dim: usize, blk: usize) -> impl Iterator<Item = ColBlock> {
    (0..dim).step_by(blk.max(1)).map(move |start| ColBlock {
        start,
        width: blk.min(dim - start),
    })
}

#[derive(Clone, Copy, Debug)]
enum Tile {
    /// Slots `[slot, slot + BLK)` of `expert`, output columns `cols`.
    Mm { expert: usize, slot: usize, cols: ColBlock },
    /// Summation over one expert's segment for columns `cols`.
    Sum { expert: usize, cols: ColBlock },
    /// Outer-product accumulation for one expert over a `rows x cols` block.
    Tmm { expert: usize, rows: ColBlock, cols: ColBlock },
}

struct TileResult {
    tile: Tile,
    values: Vec<f64>,
}

fn mm_tiles(rx: &ReIndex, d_out: usize) -> Vec<Tile> {
    let blk = rx.blk();
    rx.tiles()
        .flat_map(|(expert, slot)| col_blocks(d_out, blk).map(move |cols| Tile::Mm { expert, slot, cols }))
        .collect()
}

fn sum_tiles(rx: &ReIndex, d: usize) -> Vec<Tile> {
    let blk = rx.blk();
    (0..rx.n_experts())
        .flat_map(|expert| col_blocks(d, blk).map(move |cols| Tile::Sum { expert, cols }))
        .collect()
}

fn tmm_tiles(rx: &ReIndex, d1: usize, d2: usize) -> Vec<Tile> {
    let blk = rx.blk();
    (0..rx.n_experts())
        .flat_map(|expert| {
            col_blocks(d1, blk).flat_map(move |rows| col_blocks(d2, blk).map(move |cols| Tile::Tmm { expert, rows, cols }))
        })
        .collect()
}

/// Read-only operands shared by all tiles of one call.
struct Operands<'a> {
    rx: &'a ReIndex,
    // esmm: input tokens, weights (E, D1, D2), optional bias.
    mm_x: Option<&'a Matrix>,
    mm_w: Option<&'a Tensor3>,
    mm_b: Option<&'a Matrix>,
    // ess input.
    sum_x: Option<&'a Matrix>,
    // estmm inputs.
    tmm_x1: Option<&'a Matrix>,
    tmm_x2: Option<&'a Matrix>,
}

impl Operands<'_> {
    fn compute(&self, tile: Tile) -> TileResult {
        let rx = self.rx;
        let values = match tile {
            Tile::Mm { expert, slot, cols } => {
                let x = self.mm_x.expect("esmm input");
                let w = self.mm_w.expect("esmm weight");
                let [_, d1, d2] = w.dims();
                let we = w.slice(expert);
                let blk = rx.blk();
                let mut c = vec![0.0; blk * cols.width];
                for (t, token) in rx.slots()[slot..slot + blk].iter().enumerate() {
                    let Some(token) = *token else { continue };
                    let row = &mut c[t * cols.width..(t + 1) * cols.width];
                    if let Some(b) = self.mm_b {
                        row.copy_from_slice(&b.row(expert)[cols.start..cols.start + cols.width]);
                    }
                    let xr = x.row(token);
                    for (d, &a) in xr.iter().enumerate().take(d1) {
                        let wr = &we[d * d2 + cols.start..d * d2 + cols.start + cols.width];
                        for (o, &b) in row.iter_mut().zip(wr) {
                            *o += a * b;
                        }
                    }
                }
                c
            }
            Tile::Sum { expert, cols } => {
                let x = self.sum_x.expect("ess input");
                let mut c = vec![0.0; cols.width];
                for token in rx.segment_slots(expert).iter().flatten() {
                    let xr = &x.row(*token)[cols.start..cols.start + cols.width];
                    for (o, v) in c.iter_mut().zip(xr) {
                        *o += v;
                    }
                }
                c
            }
            Tile::Tmm { expert, rows, cols } => {
                let x1 = self.tmm_x1.expect("estmm lhs");
                let x2 = self.tmm_x2.expect("estmm rhs");
                let mut c = vec![0.0; rows.width * cols.width];
                for token in rx.segment_slots(expert).iter().flatten() {
                    let a = &x1.row(*token)[rows.start..rows.start + rows.width];
                    let b = &x2.row(*token)[cols.start..cols.start + cols.width];
                    for (m, &am) in a.iter().enumerate() {
                        for (o, &bn) in c[m * cols.width..(m + 1) * cols.width].iter_mut().zip(b) {
                            *o += am * bn;
                        }
                    }
                }
                c
            }
        };
        TileResult { tile, values }
    }
}

/// Destination buffers for scattered tile results.
struct Sinks<'a> {
    mm: Option<&'a mut Matrix>,
    mm_mode: EsOutputMode,
    sum: Option<&'a mut Matrix>,
    tmm: Option<&'a mut Tensor3>,
}

impl Sinks<'_> {
    fn scatter(&mut self, rx: &ReIndex, res: TileResult) {
        match res.tile {
            Tile::Mm { slot, cols, .. } => {
                let out = self.mm.as_deref_mut().expect("esmm sink");
                for (t, token) in rx.slots()[slot..slot + rx.blk()].iter().enumerate() {
                    let Some(token) = *token else { continue };
                    let src = &res.values[t * cols.width..(t + 1) * cols.width];
                    let dst = &mut out.row_mut(token)[cols.start..cols.start + cols.width];
                    match self.mm_mode {
                        EsOutputMode::Write => dst.copy_from_slice(src),
                        EsOutputMode::Accumulate => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Tile::Sum { expert, cols } => {
                let out = self.sum.as_deref_mut().expect("ess sink");
                out.row_mut(expert)[cols.start..cols.start + cols.width].copy_from_slice(&res.values);
            }
            Tile::Tmm { expert, rows, cols } => {
                let out = self.tmm.as_deref_mut().expect("estmm sink");
                let d2 = out.dims()[2];
                let slice = out.slice_mut(expert);
                for m in 0..rows.width {
                    let off = (rows.start + m) * d2 + cols.start;
                    slice[off..off + cols.width].copy_from_slice(&res.values[m * cols.width..(m + 1) * cols.width]);
                }
            }
        }
    }
}

impl EsKernels {
    pub fn new(order: TileOrder) -> Self {
        Self { order }
    }

    fn execute(&self, mut tiles: Vec<Tile>, ops: &Operands<'_>, sinks: &mut Sinks<'_>) {
        match self.order {
            TileOrder::Ascending => {}
            TileOrder::Descending => tiles.reverse(),
            TileOrder::Shuffled(seed) => tiles.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
            TileOrder::Parallel => {
                let results: Vec<TileResult> = tiles.par_iter().map(|&t| ops.compute(t)).collect();
                for r in results {
                    sinks.scatter(ops.rx, r);
                }
                return;
            }
        }
        for t in tiles {
            let r = ops.compute(t);
            sinks.scatter(ops.rx, r);
        }
    }

    /// Per-token expert matmul: `out[t] = x[t] · W[e] + b[e]` for the expert `e` of token `t`.
    ///
    /// In [`EsOutputMode::Accumulate`] the result is added into `dest`, which is required;
    /// in [`EsOutputMode::Write`] a fresh zero buffer is filled and `dest` must be `None`.
    pub fn esmm(
        &self,
        x: &Matrix,
        w: &Tensor3,
        bias: Option<&Matrix>,
        rx: &ReIndex,
        mode: EsOutputMode,
        dest: Option<Matrix>,
    ) -> Result<Matrix> {
        check_mm(x, w, bias, rx)?;
        let [_, _, d2] = w.dims();
        let mut out = match (mode, dest) {
            (EsOutputMode::Write, None) => Matrix::zeros(x.rows(), d2),
            (EsOutputMode::Write, Some(_)) => return Err(Error::UnexpectedDestination),
            (EsOutputMode::Accumulate, None) => return Err(Error::MissingDestination),
            (EsOutputMode::Accumulate, Some(d)) => {
                if d.shape() != (x.rows(), d2) {
                    return Err(shape_err("esmm dest", format!("{:?}", (x.rows(), d2)), format!("{:?}", d.shape())));
                }
                d
            }
        };
        let ops = Operands {
            rx,
            mm_x: Some(x),
            mm_w: Some(w),
            mm_b: bias,
            sum_x: None,
            tmm_x1: None,
            tmm_x2: None,
        };
        let mut sinks = Sinks {
            mm: Some(&mut out),
            mm_mode: mode,
            sum: None,
            tmm: None,
        };
        self.execute(mm_tiles(rx, d2), &ops, &mut sinks);
        Ok(out)
    }

    /// Per-expert row sums: `out[e] = Σ x[t]` over tokens routed to `e`.
    pub fn ess(&self, x: &Matrix, rx: &ReIndex) -> Result<Matrix> {
        check_tokens("ess", x, rx)?;
        let mut out = Matrix::zeros(rx.n_experts(), x.cols());
        let ops = Operands {
            rx,
            mm_x: None,
            mm_w: None,
            mm_b: None,
            sum_x: Some(x),
            tmm_x1: None,
            tmm_x2: None,
        };
        let mut sinks = Sinks {
            mm: None,
            mm_mode: EsOutputMode::Write,
            sum: Some(&mut out),
            tmm: None,
        };
        self.execute(sum_tiles(rx, x.cols()), &ops, &mut sinks);
        Ok(out)
    }

    /// Per-expert transposed product: `out[e] = Σ x1[t]ᵀ x2[t]` over tokens routed to `e`.
    pub fn estmm(&self, x1: &Matrix, x2: &Matrix, rx: &ReIndex) -> Result<Tensor3> {
        check_tokens("estmm", x1, rx)?;
        check_tokens("estmm", x2, rx)?;
        let mut out = Tensor3::zeros(rx.n_experts(), x1.cols(), x2.cols());
        let ops = Operands {
            rx,
            mm_x: None,
            mm_w: None,
            mm_b: None,
            sum_x: None,
            tmm_x1: Some(x1),
            tmm_x2: Some(x2),
        };
        let mut sinks = Sinks {
            mm: None,
            mm_mode: EsOutputMode::Write,
            sum: None,
            tmm: Some(&mut out),
        };
        self.execute(tmm_tiles(rx, x1.cols(), x2.cols()), &ops, &mut sinks);
        Ok(out)
    }

    /// Fused backward of one expert-specific linear layer.
    ///
    /// Given layer input `x` (N x D1), upstream gradient `g` (N x D2) and the
    /// per-expert transposed weight `w_t` (E x D2 x D1), returns the input,
    /// bias and weight gradients from a single combined tile list.
    pub fn esfk(&self, x: &Matrix, g: &Matrix, w_t: &Tensor3, rx: &ReIndex) -> Result<EsfkOutput> {
        check_mm(g, w_t, None, rx)?;
        check_tokens("esfk", x, rx)?;
        let [_, d2, d1] = w_t.dims();
        if x.cols() != d1 {
            return Err(shape_err("esfk", format!("x with {d1} columns"), format!("{}", x.cols())));
        }
        let mut grad_x = Matrix::zeros(x.rows(), d1);
        let mut grad_b = Matrix::zeros(rx.n_experts(), d2);
        let mut grad_w = Tensor3::zeros(rx.n_experts(), d1, d2);

        let mut tiles = mm_tiles(rx, d1);
        tiles.extend(sum_tiles(rx, d2));
        tiles.extend(tmm_tiles(rx, d1, d2));

        let ops = Operands {
            rx,
            mm_x: Some(g),
            mm_w: Some(w_t),
            mm_b: None,
            sum_x: Some(g),
            tmm_x1: Some(x),
            tmm_x2: Some(g),
        };
        let mut sinks = Sinks {
            mm: Some(&mut grad_x),
            mm_mode: EsOutputMode::Write,
            sum: Some(&mut grad_b),
            tmm: Some(&mut grad_w),
        };
        self.execute(tiles, &ops, &mut sinks);
        Ok(EsfkOutput {
            grad_x,
            grad_b,
            grad_w,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EsfkOutput {
    pub grad_x: Matrix,
    pub grad_b: Matrix,
    pub grad_w: Tensor3,
}

fn check_tokens(op: &'static str, x: &Matrix, rx: &ReIndex) -> Result<()> {
    if x.rows() != rx.n_tokens() {
        return Err(shape_err(op, format!("{} token rows", rx.n_tokens()), format!("{}", x.rows())));
    }
    Ok(())
}

fn check_mm(x: &Matrix, w: &Tensor3, bias: Option<&Matrix>, rx: &ReIndex) -> Result<()> {
    check_tokens("esmm", x, rx)?;
    let [e, d1, d2] = w.dims();
    if e != rx.n_experts() {
        return Err(shape_err("esmm", format!("{} experts", rx.n_experts()), format!("{e}")));
    }
    if x.cols() != d1 {
        return Err(shape_err("esmm", format!("x with {d1} columns"), format!("{}", x.cols())));
    }
    if let Some(b) = bias {
        if b.shape() != (e, d2) {
            return Err(shape_err("esmm bias", format!("{:?}", (e, d2)), format!("{:?}", b.shape())));
        }
    }
    Ok(())
}

/// See [`EsKernels::esmm`]; runs in ascending tile order.
pub fn esmm(
    x: &Matrix,
    w: &Tensor3,
    bias: Option<&Matrix>,
    rx: &ReIndex,
    mode: EsOutputMode,
    dest: Option<Matrix>,
) -> Result<Matrix> {
    EsKernels::default().esmm(x, w, bias, rx, mode, dest)
}

/// See [`EsKernels::ess`].
pub fn ess(x: &Matrix, rx: &ReIndex) -> Result<Matrix> {
    EsKernels::default().ess(x, rx)
}

/// See [`EsKernels::estmm`].
pub fn estmm(x1: &Matrix, x2: &Matrix, rx: &ReIndex) -> Result<Tensor3> {
    EsKernels::default().estmm(x1, x2, rx)
}

/// See [`EsKernels::esfk`].
pub fn esfk(x: &Matrix, g: &Matrix, w_t: &Tensor3, rx: &ReIndex) -> Result<EsfkOutput> {
    EsKernels::default().esfk(x, g, w_t, rx)
}

/// Multiply-accumulates performed by `esmm` on `rx` with a `d1 x d2` weight:
/// `token` counts only real token rows, `tile` includes padded slots.
pub fn esmm_macs(rx: &ReIndex, d1: usize, d2: usize) -> MacCount {
    let per_row = (d1 * d2) as u64;
    let mut token = 0;
    let mut tile = 0;
    for (_, slot) in rx.tiles() {
        for s in &rx.slots()[slot..slot + rx.blk()] {
            tile += per_row;
            if s.is_some() {
                token += per_row;
            }
        }
    }
    MacCount { token, tile }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::build_reindex;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn esmm_two_experts() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let w = Tensor3::new(2, 2, 1, vec![1.0, 1.0, 2.0, 0.0]).unwrap();
        let b = m(&[&[0.0], &[1.0]]);
        let rx = build_reindex(&[1, 0], 2, 2).unwrap();
        let y = esmm(&x, &w, Some(&b), &rx, EsOutputMode::Write, None).unwrap();
        assert_eq!(y, m(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn esmm_identity_weights() {
        let x = m(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, 9.0], &[4.0, 4.0, 4.0]]);
        let eye = Matrix::identity(3);
        let w = Tensor3::from_slices(&[eye.clone(), eye]).unwrap();
        let rx = build_reindex(&[1, 0, 1], 2, 4).unwrap();
        let y = esmm(&x, &w, None, &rx, EsOutputMode::Write, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn esmm_mode_requires_matching_destination() {
        let x = Matrix::zeros(2, 2);
        let w = Tensor3::zeros(1, 2, 3);
        let rx = build_reindex(&[0, 0], 1, 2).unwrap();
        assert!(matches!(
            esmm(&x, &w, None, &rx, EsOutputMode::Accumulate, None),
            Err(Error::MissingDestination)
        ));
        assert!(matches!(
            esmm(&x, &w, None, &rx, EsOutputMode::Write, Some(Matrix::zeros(2, 3))),
            Err(Error::UnexpectedDestination)
        ));
        assert!(esmm(&x, &w, None, &rx, EsOutputMode::Accumulate, Some(Matrix::zeros(3, 3))).is_err());
    }

    #[test]
    fn esmm_shape_errors() {
        let rx = build_reindex(&[0, 1], 2, 2).unwrap();
        let w = Tensor3::zeros(2, 3, 1);
        assert!(esmm(&Matrix::zeros(2, 2), &w, None, &rx, EsOutputMode::Write, None).is_err());
        assert!(esmm(&Matrix::zeros(3, 3), &w, None, &rx, EsOutputMode::Write, None).is_err());
        let bad_bias = Matrix::zeros(1, 1);
        assert!(esmm(&Matrix::zeros(2, 3), &w, Some(&bad_bias), &rx, EsOutputMode::Write, None).is_err());
    }

    #[test]
    fn ess_examples() {
        let rx = build_reindex(&[0, 0], 2, 2).unwrap();
        assert_eq!(ess(&m(&[&[1.0], &[2.0]]), &rx).unwrap(), m(&[&[3.0], &[0.0]]));

        let x = m(&[&[1.0, 1.0], &[2.0, 2.0], &[4.0, 8.0]]);
        let rx = build_reindex(&[0, 1, 0], 2, 2).unwrap();
        assert_eq!(ess(&x, &rx).unwrap(), m(&[&[5.0, 9.0], &[2.0, 2.0]]));
    }

    #[test]
    fn ess_bijective_routing_permutes_rows() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let rx = build_reindex(&[2, 0, 1], 3, 2).unwrap();
        assert_eq!(ess(&x, &rx).unwrap(), m(&[&[3.0, 4.0], &[5.0, 6.0], &[1.0, 2.0]]));
    }

    #[test]
    fn estmm_outer_products() {
        let x1 = m(&[&[2.0], &[3.0]]);
        let x2 = m(&[&[5.0], &[7.0]]);
        let rx = build_reindex(&[0, 1], 2, 2).unwrap();
        let out = estmm(&x1, &x2, &rx).unwrap();
        assert_eq!(out.data(), &[10.0, 21.0]);
        let zero = estmm(&x1, &Matrix::zeros(2, 3), &rx).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(estmm(&x1, &Matrix::zeros(3, 1), &rx).is_err());
    }

    #[test]
    fn estmm_single_expert_is_dense_transpose_product() {
        let x1 = m(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 4.0]]);
        let x2 = m(&[&[2.0, 0.0, 1.0], &[-1.0, 1.0, 1.0], &[2.0, 2.0, -3.0]]);
        let rx = build_reindex(&[0, 0, 0], 1, 2).unwrap();
        let out = estmm(&x1, &x2, &rx).unwrap();
        let dense = x1.transpose().matmul(&x2).unwrap();
        assert!(out.matrix(0).max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn esfk_single_token() {
        let x = m(&[&[2.0, -1.0]]);
        let g = m(&[&[3.0, 5.0, 7.0]]);
        let w_t = Tensor3::zeros(2, 3, 2);
        let rx = build_reindex(&[1], 2, 4).unwrap();
        let out = esfk(&x, &g, &w_t, &rx).unwrap();
        assert!(out.grad_w.slice(0).iter().all(|&v| v == 0.0));
        assert_eq!(out.grad_w.slice(1), &[6.0, 10.0, 14.0, -3.0, -5.0, -7.0]);
        assert_eq!(out.grad_b, m(&[&[0.0, 0.0, 0.0], &[3.0, 5.0, 7.0]]));
    }

    #[test]
    fn esfk_zero_gradient() {
        let mut rng = rand::thread_rng();
        let x = Matrix::random(5, 3, 1.0, &mut rng);
        let w_t = Tensor3::random(2, 4, 3, 1.0, &mut rng);
        let rx = build_reindex(&[0, 1, 1, 0, 1], 2, 2).unwrap();
        let out = esfk(&x, &Matrix::zeros(5, 4), &w_t, &rx).unwrap();
        assert_eq!(out.grad_x.max_abs(), 0.0);
        assert_eq!(out.grad_b.max_abs(), 0.0);
        assert_eq!(out.grad_w.max_abs(), 0.0);
    }

    #[test]
    fn mac_count_excludes_padding() {
        let rx = build_reindex(&[0, 1, 0, 0, 1], 2, 2).unwrap();
        let c = esmm_macs(&rx, 3, 5);
        assert_eq!(c.token, 5 * 15);
        assert_eq!(c.tile, 6 * 15);
    }
}
