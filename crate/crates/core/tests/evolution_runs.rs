use std::collections::HashMap;

use nasquant::evaluator::{SurrogateConfig, SurrogateEvaluator};
use nasquant::evolution::{
    population_stats, run_search, run_sweep, EvaluatorConfig, Search, SearchConfig, SearchMode, SweepConfig,
};
use nasquant::search_space::{SearchSpace, SpaceConfig, StackingProfile};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn surrogate_config(seed: u64) -> (SearchConfig, SurrogateEvaluator) {
    let cfg = SearchConfig {
        population_size: 10,
        sample_size: 4,
        max_iterations: 150,
        target_bytes: 3_000,
        evaluator: EvaluatorConfig::Surrogate(SurrogateConfig::default()),
        seed,
        ..Default::default()
    };
    let eval = SurrogateEvaluator::new(SurrogateConfig::default(), cfg.search_profile.clone()).unwrap();
    (cfg, eval)
}

proptest! {
    #[test]
    fn stats_match_two_pass_recomputation(f in proptest::collection::vec(0.0f64..=1.0, 1..100)) {
        let (mean, std, max) = population_stats(&f);
        let n = f.len() as f64;
        let m = f.iter().sum::<f64>() / n;
        let mut sq = 0.0;
        for x in &f {
            sq += (x - m) * (x - m);
        }
        prop_assert!((mean - m).abs() < 1e-12);
        prop_assert!((std - (sq / n).sqrt()).abs() < 1e-12);
        prop_assert_eq!(max, f.iter().copied().fold(0.0, f64::max));
    }
}

#[test]
fn stats_examples() {
    assert_eq!(population_stats(&[0.5; 4]), (0.5, 0.0, 0.5));
    assert_eq!(population_stats(&[0.0, 1.0]), (0.5, 0.5, 1.0));
}

#[test]
fn history_invariants() {
    for seed in 0..5 {
        let (cfg, eval) = surrogate_config(seed);
        let h = run_search(&cfg, &eval).unwrap();
        let mut alive: HashMap<u64, f64> = HashMap::new();
        for ind in h.records[0].population.as_ref().unwrap() {
            alive.insert(ind.id, ind.fitness);
        }
        let mut running = f64::NEG_INFINITY;
        for r in &h.records {
            assert_eq!(r.population_size, cfg.population_size);
            assert!(r.running_best_fitness >= running);
            running = r.running_best_fitness;
            if let (Some(child), Some(evicted)) = (&r.child, r.evicted_id) {
                assert_ne!(child.id, evicted);
                alive.remove(&evicted).expect("evicted an existing individual");
                alive.insert(child.id, child.fitness);
            }
            let fits: Vec<f64> = alive.values().copied().collect();
            let (mean, _, best) = population_stats(&fits);
            assert!((mean - r.mean_fitness).abs() < 1e-12);
            assert_eq!(best, r.best_fitness);
        }
        let best_ever = h.records.iter().flat_map(|r| r.evaluated()).map(|i| i.fitness).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best_ever, h.best.fitness());
        assert_eq!(running, best_ever);
    }
}

#[test]
fn policy_only_runs_keep_the_architecture() {
    let (mut cfg, eval) = surrogate_config(3);
    cfg.mode = SearchMode::PolicyOnly;
    let space = SearchSpace::for_profile(SpaceConfig::default(), &cfg.search_profile).unwrap();
    let frozen = space.random_genome(&mut ChaCha8Rng::seed_from_u64(3));
    let h = Search::new(cfg, &eval).unwrap().with_frozen_architecture(frozen.clone()).run().unwrap();
    for ind in h.records.iter().flat_map(|r| r.evaluated()) {
        assert_eq!(ind.genome.normal, frozen.normal);
        assert_eq!(ind.genome.reduction, frozen.reduction);
    }
}

#[test]
fn sweep_examples() {
    let profile = StackingProfile::cifar(1, 8);
    let eval = SurrogateEvaluator::new(SurrogateConfig::default(), profile).unwrap();
    let (base, _) = surrogate_config(21);
    let base = SearchConfig { max_iterations: 100, ..base };

    let single = SweepConfig { base: base.clone(), grid: vec![(16, 16)] };
    let curves = run_sweep(&single, &eval).unwrap();
    let direct = run_search(
        &SearchConfig { population_size: 16, sample_size: 16, seed: curves[0].seed, ..base.clone() },
        &eval,
    )
    .unwrap();
    assert_eq!(curves[0].points.len(), direct.records.len());
    for (p, r) in curves[0].points.iter().zip(&direct.records) {
        assert_eq!((p.mean_fitness, p.std_fitness, p.best_fitness), (r.mean_fitness, r.std_fitness, r.best_fitness));
    }

    let four = SweepConfig { base, grid: vec![(4, 2), (8, 4), (8, 8), (12, 6)] };
    let curves = run_sweep(&four, &eval).unwrap();
    assert_eq!(curves.len(), 4);
    assert!(curves.iter().all(|c| c.points.len() == 101));
    assert_eq!(run_sweep(&four, &eval).unwrap(), curves);
}
