//! Top-k routing choices and the padded re-index vector.

use std::io::{Read, Write};
use std::ops::Range;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Expert assignments for every token under top-k routing.
///
/// `assignments[i][t]` is the expert chosen by token `t` in its `i`-th choice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingChoice {
    n_tokens: usize,
    n_experts: usize,
    assignments: Vec<Vec<usize>>,
}

impl RoutingChoice {
    pub fn new(n_experts: usize, assignments: Vec<Vec<usize>>) -> Result<Self> {
        let k = assignments.len();
        if k == 0 {
            return Err(Error::InvalidArgument("routing needs at least one choice".into()));
        }
        if k > n_experts {
            return Err(Error::TopKExceedsExperts { k, experts: n_experts });
        }
        let n_tokens = assignments[0].len();
        if assignments.iter().any(|a| a.len() != n_tokens) {
            return Err(Error::InvalidArgument("choice vectors differ in length".into()));
        }
        for t in 0..n_tokens {
            for i in 0..k {
                let e = assignments[i][t];
                if e >= n_experts {
                    return Err(Error::ExpertOutOfRange {
                        token: t,
                        expert: e,
                        experts: n_experts,
                    });
                }
                if assignments[..i].iter().any(|a| a[t] == e) {
                    return Err(Error::DuplicateExpert { token: t, expert: e });
                }
            }
        }
        Ok(Self {
            n_tokens,
            n_experts,
            assignments,
        })
    }

    pub fn top1(n_experts: usize, assignment: Vec<usize>) -> Result<Self> {
        Self::new(n_experts, vec![assignment])
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn k(&self) -> usize {
        self.assignments.len()
    }

    pub fn choice(&self, i: usize) -> &[usize] {
        &self.assignments[i]
    }

    pub fn choices(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    /// Number of (token, choice) pairs routed to each expert.
    pub fn expert_loads(&self) -> Vec<usize> {
        let mut loads = vec![0; self.n_experts];
        for a in &self.assignments {
            for &e in a {
                loads[e] += 1;
            }
        }
        loads
    }

    /// Concatenates routings of consecutive token batches.
    pub fn concat(parts: &[RoutingChoice]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("no routing parts".into()))?;
        let (k, e) = (first.k(), first.n_experts);
        let mut assignments = vec![Vec::new(); k];
        for p in parts {
            if p.k() != k || p.n_experts != e {
                return Err(Error::InvalidArgument("routing parts disagree on k or E".into()));
            }
            for (dst, src) in assignments.iter_mut().zip(&p.assignments) {
                dst.extend_from_slice(src);
            }
        }
        Self::new(e, assignments)
    }

    /// Routing of tokens `[start, end)`.
    pub fn slice_tokens(&self, range: Range<usize>) -> Self {
        Self {
            n_tokens: range.len(),
            n_experts: self.n_experts,
            assignments: self.assignments.iter().map(|a| a[range.clone()].to_vec()).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["token_index", "choice_index", "expert_id"])?;
        for t in 0..self.n_tokens {
            for (i, a) in self.assignments.iter().enumerate() {
                wtr.serialize((t, i, a[t]))?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, n_experts: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut rows: Vec<(usize, usize, usize)> = Vec::new();
        for rec in rdr.deserialize() {
            rows.push(rec?);
        }
        let n = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let k = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        if rows.len() != n * k {
            return Err(Error::InvalidArgument(format!(
                "expected {} rows for {n} tokens x {k} choices, found {}",
                n * k,
                rows.len()
            )));
        }
        let mut assignments = vec![vec![usize::MAX; n]; k];
        for (t, i, e) in rows {
            if assignments[i][t] != usize::MAX {
                return Err(Error::InvalidArgument(format!("duplicate row for token {t} choice {i}")));
            }
            assignments[i][t] = e;
        }
        Self::new(n_experts, assignments)
    }
}

/// Token indices grouped per expert, each group padded to a multiple of the tile size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReIndex {
    slots: Vec<Option<usize>>,
    offsets: Vec<usize>,
    blk: usize,
    n_tokens: usize,
}

impl ReIndex {
    /// Padded token slots; `None` marks padding.
    pub fn slots(&self) -> &[Option<usize>] {
        &self.slots
    }

    /// Segment boundaries, length `E + 1`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn blk(&self) -> usize {
        self.blk
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_experts(&self) -> usize {
        self.offsets.len() - 1
    }

    /// `N'`, the padded length.
    pub fn padded_len(&self) -> usize {
        self.slots.len()
    }

    pub fn segment(&self, expert: usize) -> Range<usize> {
        self.offsets[expert]..self.offsets[expert + 1]
    }

    /// Slots of one expert's segment.
    pub fn segment_slots(&self, expert: usize) -> &[Option<usize>] {
        &self.slots[self.segment(expert)]
    }

    /// Slots as signed integers with `-1` for padding.
    pub fn signed_slots(&self) -> Vec<i64> {
        self.slots.iter().map(|s| s.map_or(-1, |t| t as i64)).collect()
    }

    /// `(expert, start)` for every tile of `blk` slots, in ascending slot order.
    pub fn tiles(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_experts()).flat_map(move |e| self.segment(e).step_by(self.blk).map(move |p| (e, p)))
    }

    /// Expert of every token, recovered from the segments.
    pub fn token_experts(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.n_tokens];
        for e in 0..self.n_experts() {
            for t in self.segment_slots(e).iter().flatten() {
                out[*t] = Some(e);
            }
        }
        out
    }

    /// Checks every structural invariant against the source assignment.
    pub fn validate(&self, assignment: &[usize]) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        let e = self.n_experts();
        if self.offsets[0] != 0 || self.offsets[e] != self.slots.len() {
            return fail("offsets do not span the slot vector".into());
        }
        if self.offsets.windows(2).any(|w| w[0] > w[1]) {
            return fail("offsets decrease".into());
        }
        if assignment.len() != self.n_tokens {
            return fail("assignment length differs from token count".into());
        }
        let mut seen = vec![false; self.n_tokens];
        for x in 0..e {
            let seg = self.segment_slots(x);
            if !seg.len().is_multiple_of(self.blk) {
                return fail(format!("segment {x} length {} not divisible by {}", seg.len(), self.blk));
            }
            let mut prev = None;
            for &t in seg.iter().flatten() {
                if t >= self.n_tokens || seen[t] {
                    return fail(format!("token {t} repeated or out of range"));
                }
                seen[t] = true;
                if assignment[t] != x {
                    return fail(format!("token {t} in segment {x} but routed to {}", assignment[t]));
                }
                if prev.is_some_and(|p| p >= t) {
                    return fail(format!("segment {x} not in ascending token order"));
                }
                prev = Some(t);
            }
        }
        if seen.iter().any(|s| !s) {
            return fail("some token missing from re-index".into());
        }
        if self.slots.len() - self.n_tokens > e * (self.blk - 1) {
            return fail("padding exceeds E * (BLK - 1)".into());
        }
        Ok(())
    }
}

/// Groups tokens by expert and pads each group up to a multiple of `blk` with empty slots.
///
/// Within a segment tokens keep ascending order, so the result is fully deterministic.
pub fn build_reindex(assignment: &[usize], n_experts: usize, blk: usize) -> Result<ReIndex> {
    if blk == 0 {
        return Err(Error::InvalidArgument("BLK must be at least 1".into()));
    }
    let mut counts = vec![0usize; n_experts];
    for (t, &e) in assignment.iter().enumerate() {
        if e >= n_experts {
            return Err(Error::ExpertOutOfRange {
                token: t,
                expert: e,
                experts: n_experts,
            });
        }
        counts[e] += 1;
    }
    let mut offsets = Vec::with_capacity(n_experts + 1);
    offsets.push(0);
    for &c in &counts {
        let padded = c.div_ceil(blk) * blk;
        offsets.push(offsets.last().unwrap() + padded);
    }
    let mut slots = vec![None; *offsets.last().unwrap()];
    let mut cursor = offsets[..n_experts].to_vec();
    for (t, &e) in assignment.iter().enumerate() {
        slots[cursor[e]] = Some(t);
        cursor[e] += 1;
    }
    Ok(ReIndex {
        slots,
        offsets,
        blk,
        n_tokens: assignment.len(),
    })
}

/// One re-index per routing choice.
pub fn build_reindex_all(routing: &RoutingChoice, blk: usize) -> Result<Vec<ReIndex>> {
    routing
        .choices()
        .iter()
        .map(|a| build_reindex(a, routing.n_experts(), blk))
        .collect()
}

/// How synthetic routings pick experts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "param")]
pub enum RoutingDistribution {
    #[default]
    Uniform,
    /// Expert `e` weighted by `1 / (e + 1)^s`.
    Zipf(f64),
    /// First choice is always the given expert; later choices take the following ids.
    Fixed(usize),
    /// Token `t` choice `i` goes to `(t + i) mod E`; perfectly even when `E` divides `N`.
    Balanced,
}

impl FromStr for RoutingDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let bad = || Error::InvalidArgument(format!("bad routing distribution `{s}`"));
        match (name, param) {
            ("uniform", None) => Ok(Self::Uniform),
            ("balanced", None) => Ok(Self::Balanced),
            ("zipf", p) => Ok(Self::Zipf(p.map_or(Ok(1.0), |p| p.parse().map_err(|_| bad()))?)),
            ("fixed", p) => Ok(Self::Fixed(p.map_or(Ok(0), |p| p.parse().map_err(|_| bad()))?)),
            _ => Err(bad()),
        }
    }
}

/// Deterministic synthetic routing; the k experts of each token are sampled without replacement.
pub fn synthesize_routing(
    n_tokens: usize,
    n_experts: usize,
    k: usize,
    dist: RoutingDistribution,
    seed: u64,
) -> Result<RoutingChoice> {
    if k == 0 || k > n_experts {
        return Err(Error::TopKExceedsExperts { k, experts: n_experts });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![vec![0usize; n_tokens]; k];
    match dist {
        RoutingDistribution::Uniform => {
            for t in 0..n_tokens {
                for (i, e) in index::sample(&mut rng, n_experts, k).into_iter().enumerate() {
                    assignments[i][t] = e;
                }
            }
        }
        RoutingDistribution::Zipf(s) => {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::InvalidArgument(format!("zipf exponent {s}")));
            }
            let base: Vec<f64> = (0..n_experts).map(|e| 1.0 / ((e + 1) as f64).powf(s)).collect();
            for t in 0..n_tokens {
                let mut weights = base.clone();
                for choice in assignments.iter_mut() {
                    let dist = WeightedIndex::new(&weights)
                        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    let e = dist.sample(&mut rng);
                    choice[t] = e;
                    weights[e] = 0.0;
                }
            }
        }
        RoutingDistribution::Fixed(e0) => {
            if e0 >= n_experts {
                return Err(Error::ExpertOutOfRange {
                    token: 0,
                    expert: e0,
                    experts: n_experts,
                });
            }
            for (i, choice) in assignments.iter_mut().enumerate() {
                choice.fill((e0 + i) % n_experts);
            }
        }
        RoutingDistribution::Balanced => {
            for (i, choice) in assignments.iter_mut().enumerate() {
                for (t, e) in choice.iter_mut().enumerate() {
                    *e = (t + i) % n_experts;
                }
            }
        }
    }
    RoutingChoice::new(n_experts, assignments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reindex_pads_each_segment() {
        let rx = build_reindex(&[0, 1, 0, 0, 1], 2, 2).unwrap();
        assert_eq!(rx.offsets(), &[0, 4, 6]);
        assert_eq!(rx.signed_slots(), vec![0, 2, 3, -1, 1, 4]);
    }

    #[test]
    fn reindex_exact_fit() {
        let rx = build_reindex(&[0, 0, 0, 0], 1, 4).unwrap();
        assert_eq!(rx.offsets(), &[0, 4]);
        assert_eq!(rx.signed_slots(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn reindex_empty_experts() {
        let rx = build_reindex(&[1, 1], 3, 2).unwrap();
        assert_eq!(rx.offsets(), &[0, 0, 2, 2]);
        assert_eq!(rx.signed_slots(), vec![0, 1]);
    }

    #[test]
    fn reindex_rejects_bad_expert() {
        assert!(matches!(
            build_reindex(&[0, 3], 2, 2),
            Err(Error::ExpertOutOfRange { token: 1, expert: 3, .. })
        ));
        assert!(build_reindex(&[0], 1, 0).is_err());
    }

    #[test]
    fn reindex_all_per_choice() {
        let r = RoutingChoice::new(2, vec![vec![0, 0, 1], vec![1, 1, 0]]).unwrap();
        let all = build_reindex_all(&r, 2).unwrap();
        assert_eq!(all.len(), 2);
        for rx in &all {
            assert_eq!(rx.segment(0).len(), 2);
            assert_eq!(rx.segment(1).len(), 2);
        }
        let top1 = RoutingChoice::top1(2, vec![0, 1, 1]).unwrap();
        assert_eq!(build_reindex_all(&top1, 2).unwrap()[0], build_reindex(&[0, 1, 1], 2, 2).unwrap());
    }

    #[test]
    fn reindex_all_identical_choices_are_identical() {
        let r = RoutingChoice {
            n_tokens: 3,
            n_experts: 3,
            assignments: vec![vec![2, 0, 1], vec![2, 0, 1]],
        };
        let all = build_reindex_all(&r, 4).unwrap();
        assert_eq!(all[0], all[1]);
    }

    #[test]
    fn routing_rejects_duplicates_and_large_k() {
        assert!(matches!(
            RoutingChoice::new(3, vec![vec![0, 1], vec![0, 2]]),
            Err(Error::DuplicateExpert { token: 0, expert: 0 })
        ));
        assert!(matches!(
            RoutingChoice::new(1, vec![vec![0], vec![0]]),
            Err(Error::TopKExceedsExperts { .. })
        ));
    }

    #[test]
    fn fixed_routing() {
        let r = synthesize_routing(4, 3, 1, RoutingDistribution::Fixed(0), 7).unwrap();
        assert_eq!(r.choice(0), &[0, 0, 0, 0]);
    }

    #[test]
    fn uniform_is_deterministic() {
        let a = synthesize_routing(50, 8, 3, RoutingDistribution::Uniform, 11).unwrap();
        let b = synthesize_routing(50, 8, 3, RoutingDistribution::Uniform, 11).unwrap();
        assert_eq!(a, b);
        let c = synthesize_routing(50, 8, 3, RoutingDistribution::Uniform, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zipf_favours_expert_zero() {
        let r = synthesize_routing(10_000, 8, 1, RoutingDistribution::Zipf(1.0), 3).unwrap();
        let loads = r.expert_loads();
        assert!(loads[1..].iter().all(|&l| l < loads[0]), "{loads:?}");
    }

    #[test]
    fn k_above_experts_rejected() {
        assert!(synthesize_routing(4, 2, 3, RoutingDistribution::Uniform, 0).is_err());
    }

    #[test]
    fn distribution_parsing() {
        assert_eq!("zipf:1.5".parse::<RoutingDistribution>().unwrap(), RoutingDistribution::Zipf(1.5));
        assert_eq!("fixed:2".parse::<RoutingDistribution>().unwrap(), RoutingDistribution::Fixed(2));
        assert!("gauss".parse::<RoutingDistribution>().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let r = synthesize_routing(9, 5, 2, RoutingDistribution::Uniform, 1).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("token_index,choice_index,expert_id\n"));
        assert_eq!(RoutingChoice::read_csv(&buf[..], 5).unwrap(), r);
    }

    proptest! {
        #[test]
        fn reindex_invariants(
            assignment in prop::collection::vec(0usize..8, 0..80),
            blk in 1usize..9,
        ) {
            let rx = build_reindex(&assignment, 8, blk).unwrap();
            rx.validate(&assignment).unwrap();
            let mut tokens: Vec<usize> = rx.slots().iter().flatten().copied().collect();
            tokens.sort_unstable();
            prop_assert_eq!(tokens, (0..assignment.len()).collect::<Vec<_>>());
            for e in 0..8 {
                let n_e = assignment.iter().filter(|&&x| x == e).count();
                prop_assert_eq!(rx.segment(e).len(), blk * n_e.div_ceil(blk));
            }
        }

        #[test]
        fn synthesized_experts_distinct(n in 1usize..40, e in 1usize..9, seed in any::<u64>()) {
            let k = 1 + (seed as usize) % e;
            for dist in [RoutingDistribution::Uniform, RoutingDistribution::Zipf(1.2), RoutingDistribution::Balanced] {
                let r = synthesize_routing(n, e, k, dist, seed).unwrap();
                prop_assert_eq!(r.k(), k);
            }
        }
    }
}
