use esmoe::dist::{
    run_data_centric, run_model_centric, shard_params, CostModel, DistRun, PipelineSharedCache, Workload,
};
use esmoe::{synthesize_routing, LayerConfig, Matrix, MoeParams, RoutingDistribution};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Case {
    work: Workload,
    params: MoeParams,
}

fn case(seed: u64, batches: &[usize]) -> Case {
    let n: usize = batches.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::random(n, 5, 1.0, &mut rng);
    let params = MoeParams::random(4, 5, 8, 3, &mut rng);
    let g = Matrix::random(n, 3, 1.0, &mut rng);
    let routing = synthesize_routing(n, 4, 2, RoutingDistribution::Zipf(1.0), seed).unwrap();
    Case {
        work: Workload::split(&x, &routing, &g, batches).unwrap(),
        params,
    }
}

fn run_both(c: &Case, hidden: &[usize], cost: &CostModel) -> (DistRun, DistRun) {
    let shards = shard_params(&c.params, hidden).unwrap();
    let mut caches = vec![PipelineSharedCache::new(c.params.n_values()); hidden.len()];
    let config = LayerConfig {
        blk: 4,
        ..Default::default()
    };
    let dc = run_data_centric(&c.work, &shards, &mut caches, &config, cost).unwrap();
    let mc = run_model_centric(&c.work, &shards, &config, cost).unwrap();
    (dc, mc)
}

fn bits(run: &DistRun) -> Vec<u64> {
    run.outputs
        .iter()
        .chain(&run.input_grads)
        .flat_map(|m| m.data().iter())
        .chain(run.param_grads.tensors().into_iter().flatten())
        .map(|v| v.to_bits())
        .collect()
}

#[test]
fn repeated_runs_are_bit_identical() {
    let c = case(1, &[7, 3, 6]);
    let cost = CostModel::uniform(3, 1e6, 1e5, 1e-3);
    let (a1, b1) = run_both(&c, &[3, 3, 2], &cost);
    let (a2, b2) = run_both(&c, &[3, 3, 2], &cost);
    assert_eq!(bits(&a1), bits(&a2));
    assert_eq!(bits(&b1), bits(&b2));
    assert_eq!(a1.report, a2.report);
}

#[test]
fn overlap_never_hurts_and_only_helps_with_a_non_moe_stage() {
    let c = case(2, &[8, 8]);
    let mut cost = CostModel::uniform(2, 1e6, 1e5, 1e-3);
    let (dc, _) = run_both(&c, &[4, 4], &cost);
    assert_eq!(dc.report.makespan, dc.report.makespan_without_overlap);
    assert_eq!(dc.report.overlap_savings, 0.0);

    cost.non_moe_time = 0.5;
    let (dc, mc) = run_both(&c, &[4, 4], &cost);
    assert!(dc.report.makespan < dc.report.makespan_without_overlap);
    assert!(dc.report.overlap_savings > 0.0);
    for r in [&dc.report, &mc.report] {
        let max_compute = r.compute_time.iter().copied().fold(0.0, f64::max);
        assert!(r.makespan >= max_compute);
        assert!(r.comm_time >= 0.0 && r.compute_time.iter().all(|&t| t >= 0.0));
    }
}

#[test]
fn cache_memory_beats_retaining_every_layer() {
    let c = case(3, &[5, 5, 5, 5]);
    let cost = CostModel {
        layers: 2,
        ..CostModel::uniform(4, 1e6, 1e5, 1e-3)
    };
    let (dc, _) = run_both(&c, &[2, 2, 2, 2], &cost);
    assert_eq!(dc.report.max_resident_cache_layers, 1);
    assert!(dc.report.peak_param_memory.iter().all(|&m| m < dc.report.retain_all_param_memory));
}

#[test]
fn single_device_matches_plain_layer_without_communication() {
    let c = case(4, &[12]);
    let cost = CostModel::uniform(1, 1e6, 1e5, 1e-3);
    let (dc, mc) = run_both(&c, &[8], &cost);
    assert_eq!(bits(&dc), bits(&mc));
    for r in [dc.report, mc.report] {
        assert_eq!(r.comm_time, 0.0);
    }
}

#[test]
fn idle_device_with_empty_batch() {
    let c = case(5, &[0, 9]);
    let cost = CostModel::uniform(2, 1e6, 1e5, 1e-3);
    let (dc, mc) = run_both(&c, &[4, 4], &cost);
    assert_eq!(dc.outputs[0].rows(), 0);
    assert_eq!(dc.report.compute_time[0], 0.0);
    let y_dc = Matrix::vstack(&dc.outputs).unwrap();
    let y_mc = Matrix::vstack(&mc.outputs).unwrap();
    assert!(y_dc.max_abs_diff(&y_mc) <= 1e-12);
}

#[test]
fn undersized_cache_is_rejected() {
    let c = case(6, &[4, 4]);
    let shards = shard_params(&c.params, &[4, 4]).unwrap();
    let mut caches = vec![PipelineSharedCache::new(c.params.n_values() - 1); 2];
    let cost = CostModel::uniform(2, 1e6, 1e5, 1e-3);
    assert!(run_data_centric(&c.work, &shards, &mut caches, &LayerConfig::default(), &cost).is_err());
}

proptest! {
    #[test]
    fn shard_then_gather_is_exact(seed in 0u64..1000, cuts in prop::collection::vec(1usize..5, 1..5)) {
        let h: usize = cuts.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MoeParams::random(3, 4, h, 2, &mut rng);
        let s = shard_params(&p, &cuts).unwrap();
        prop_assert_eq!(s.gather().unwrap(), p);
    }
}
