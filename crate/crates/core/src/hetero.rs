//! Workload division across devices of unequal speed.
//!
//! A device's capacity is the inverse of its latency on a fixed proxy task.
//! Batch sizes (data-centric) or hidden sub-dimensions (model-centric) are
//! assigned in proportion to capacity and rounded so the total is exact.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: usize,
    /// Average proxy-task latency in seconds.
    pub latency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationKind {
    Batch,
    Hidden,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AllocationPlan {
    pub kind: AllocationKind,
    pub shares: Vec<usize>,
    pub total: usize,
    pub ideal: Vec<f64>,
}

/// Times `iterations` dense `size x size` products. Only meaningful on an otherwise idle machine.
pub fn probe_capacity(iterations: usize, size: usize, seed: u64) -> Duration {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::random(size, size, 1.0, &mut rng);
    let b = Matrix::random(size, size, 1.0, &mut rng);
    let start = Instant::now();
    let mut checksum = 0.0;
    for _ in 0..iterations {
        let c = a.matmul(&b).expect("square operands");
        checksum += c.get(0, 0);
    }
    let elapsed = start.elapsed();
    std::hint::black_box(checksum);
    elapsed
}

/// `R_i = (1 / t_i) / Σ_j (1 / t_j)`.
pub fn capacity_proportions(latencies: &[f64]) -> Result<Vec<f64>> {
    if latencies.is_empty() {
        return Err(Error::InvalidArgument("no devices".into()));
    }
    if let Some((device, &value)) = latencies
        .iter()
        .enumerate()
        .find(|(_, &t)| !(t.is_finite() && t > 0.0))
    {
        return Err(Error::NonPositiveLatency { device, value });
    }
    let inv: Vec<f64> = latencies.iter().map(|t| 1.0 / t).collect();
    let sum: f64 = inv.iter().sum();
    Ok(inv.iter().map(|v| v / sum).collect())
}

/// Largest-remainder rounding: floor every share, then hand the leftover
/// units to the largest fractional parts, lower index first on ties.
pub fn round_preserving_sum(ideal: &[f64], total: usize) -> Result<Vec<usize>> {
    if let Some((index, &value)) = ideal.iter().enumerate().find(|(_, &v)| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::NegativeShare { index, value });
    }
    let sum: f64 = ideal.iter().sum();
    if (sum - total as f64).abs() > 1e-9 * (1.0 + total as f64) {
        return Err(Error::InvalidArgument(format!("ideal shares sum to {sum}, expected {total}")));
    }
    let mut shares: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = shares.iter().sum();
    let mut order: Vec<usize> = (0..ideal.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        shares[i] += 1;
    }
    // Floating error in the ideals can leave the floors one unit above the total.
    let mut excess = shares.iter().sum::<usize>().saturating_sub(total);
    for &i in order.iter().rev() {
        if excess == 0 {
            break;
        }
        if shares[i] > 0 && (shares[i] as f64) > ideal[i] {
            shares[i] -= 1;
            excess -= 1;
        }
    }
    Ok(shares)
}

fn allocate(latencies: &[f64], total: usize, kind: AllocationKind) -> Result<AllocationPlan> {
    let ideal: Vec<f64> = capacity_proportions(latencies)?
        .into_iter()
        .map(|r| r * total as f64)
        .collect();
    let shares = round_preserving_sum(&ideal, total)?;
    Ok(AllocationPlan {
        kind,
        shares,
        total,
        ideal,
    })
}

/// Local batch sizes `B_i ≈ R_i · B_global`.
pub fn allocate_batches(latencies: &[f64], global_batch: usize) -> Result<AllocationPlan> {
    allocate(latencies, global_batch, AllocationKind::Batch)
}

/// Hidden sub-dimensions `h_i ≈ R_i · H`.
pub fn allocate_hidden(latencies: &[f64], hidden: usize) -> Result<AllocationPlan> {
    allocate(latencies, hidden, AllocationKind::Hidden)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn proportions_sum_to_one() {
        let r = capacity_proportions(&[1.0, 2.0, 4.0]).unwrap();
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((r[0] - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_latency() {
        assert!(matches!(
            capacity_proportions(&[1.0, 0.0]),
            Err(Error::NonPositiveLatency { device: 1, .. })
        ));
        assert!(allocate_batches(&[-1.0], 4).is_err());
        assert!(capacity_proportions(&[]).is_err());
    }

    #[test]
    fn batch_split_case_one() {
        assert_eq!(allocate_batches(&[4.58, 3.06], 100).unwrap().shares, vec![40, 60]);
    }

    #[test]
    fn hidden_split_case_three() {
        assert_eq!(allocate_hidden(&[3.28, 9.42], 100).unwrap().shares, vec![74, 26]);
    }

    #[test]
    fn exact_ideal_needs_no_rounding() {
        let plan = allocate_hidden(&[1.0, 3.0], 8).unwrap();
        assert!((plan.ideal[0] - 6.0).abs() < 1e-12 && (plan.ideal[1] - 2.0).abs() < 1e-12);
        assert_eq!(plan.shares, vec![6, 2]);
    }

    #[test]
    fn symmetric_and_single_device() {
        assert_eq!(allocate_batches(&[2.0; 4], 64).unwrap().shares, vec![16; 4]);
        assert_eq!(allocate_hidden(&[3.0, 3.0], 10).unwrap().shares, vec![5, 5]);
        assert_eq!(allocate_batches(&[7.5], 33).unwrap().shares, vec![33]);
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(round_preserving_sum(&[2.5, 2.5], 5).unwrap(), vec![3, 2]);
        assert_eq!(round_preserving_sum(&[1.9, 1.9, 1.2], 5).unwrap(), vec![2, 2, 1]);
        assert_eq!(round_preserving_sum(&[3.0, 0.0, 4.0], 7).unwrap(), vec![3, 0, 4]);
        assert!(matches!(
            round_preserving_sum(&[-1.0, 2.0], 1),
            Err(Error::NegativeShare { index: 0, .. })
        ));
    }

    #[test]
    fn probe_zero_iterations_is_fast() {
        assert!(probe_capacity(0, 32, 1) < Duration::from_millis(50));
    }

    proptest! {
        #[test]
        fn allocation_invariants(
            latencies in prop::collection::vec(0.01f64..100.0, 1..8),
            total in 0usize..5000,
            scale in 0.001f64..1000.0,
        ) {
            let plan = allocate_batches(&latencies, total).unwrap();
            prop_assert_eq!(plan.shares.iter().sum::<usize>(), total);
            for (s, i) in plan.shares.iter().zip(&plan.ideal) {
                prop_assert!((*s as f64 - i).abs() < 1.0);
            }
            for a in 0..latencies.len() {
                for b in 0..latencies.len() {
                    if latencies[a] < latencies[b] {
                        prop_assert!(plan.shares[a] >= plan.shares[b]);
                    }
                }
            }
            let scaled: Vec<f64> = latencies.iter().map(|t| t * scale).collect();
            let r1 = capacity_proportions(&latencies).unwrap();
            let r2 = capacity_proportions(&scaled).unwrap();
            for (a, b) in r1.iter().zip(&r2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
