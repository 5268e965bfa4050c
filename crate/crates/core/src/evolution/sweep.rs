use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_search, SearchConfig};
use crate::error::{Error, Result};
use crate::evaluator::Evaluator;

pub const CURVE_CSV_HEADER: [&str; 4] = ["iteration", "mean_fitness", "std_fitness", "best_fitness"];

/// Grid of `(population_size, sample_size)` pairs over one base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub base: SearchConfig,
    pub grid: Vec<(usize, usize)>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        for &(p, s) in &self.grid {
            SearchConfig {
                population_size: p,
                sample_size: s,
                ..self.base.clone()
            }
            .validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_fitness: f64,
    pub std_fitness: f64,
    pub best_fitness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCurve {
    pub population_size: usize,
    pub sample_size: usize,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
}

/// Seed of one grid cell, derived from the base seed and the pair.
pub fn sweep_seed(base: u64, population_size: usize, sample_size: usize) -> u64 {
    let mut z = base ^ ((population_size as u64) << 32) ^ sample_size as u64;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Runs every grid cell (in parallel) and returns curves in grid order.
pub fn run_sweep(config: &SweepConfig, evaluator: &dyn Evaluator) -> Result<Vec<SweepCurve>> {
    config.validate()?;
    config
        .grid
        .par_iter()
        .map(|&(p, s)| {
            let seed = sweep_seed(config.base.seed, p, s);
            let cfg = SearchConfig {
                population_size: p,
                sample_size: s,
                seed,
                ..config.base.clone()
            };
            let history = run_search(&cfg, evaluator)?;
            let points = history
                .records
                .iter()
                .map(|r| CurvePoint {
                    iteration: r.iteration,
                    mean_fitness: r.mean_fitness,
                    std_fitness: r.std_fitness,
                    best_fitness: r.best_fitness,
                })
                .collect();
            Ok(SweepCurve {
                population_size: p,
                sample_size: s,
                seed,
                points,
            })
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(points: &[CurvePoint], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(CURVE_CSV_HEADER)?;
    for p in points {
        w.write_record([
            p.iteration.to_string(),
            format!("{:.6}", p.mean_fitness),
            format!("{:.6}", p.std_fitness),
            format!("{:.6}", p.best_fitness),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{SurrogateConfig, SurrogateEvaluator};
    use crate::evolution::EvaluatorConfig;
    use crate::search_space::StackingProfile;

    fn sweep(grid: Vec<(usize, usize)>) -> (SweepConfig, SurrogateEvaluator) {
        let profile = StackingProfile::cifar(1, 8);
        let base = SearchConfig {
            max_iterations: 20,
            target_bytes: 3_000,
            evaluator: EvaluatorConfig::Surrogate(SurrogateConfig::default()),
            search_profile: profile.clone(),
            seed: 11,
            ..Default::default()
        };
        let eval = SurrogateEvaluator::new(SurrogateConfig::default(), profile).unwrap();
        (SweepConfig { base, grid }, eval)
    }

    #[test]
    fn curves_have_one_point_per_iteration() {
        let (cfg, eval) = sweep(vec![(4, 2), (6, 6)]);
        let curves = run_sweep(&cfg, &eval).unwrap();
        assert_eq!(curves.len(), 2);
        assert!(curves.iter().all(|c| c.points.len() == 21));
        assert_eq!(run_sweep(&cfg, &eval).unwrap(), curves);
        assert_ne!(curves[0].seed, curves[1].seed);

        let mut buf = Vec::new();
        write_curve_csv(&curves[0].points, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,mean_fitness,std_fitness,best_fitness\n"));
        assert_eq!(text.lines().count(), 22);
    }

    #[test]
    fn invalid_grids() {
        let (cfg, eval) = sweep(vec![]);
        assert!(run_sweep(&cfg, &eval).is_err());
        let (cfg, eval) = sweep(vec![(4, 8)]);
        assert!(run_sweep(&cfg, &eval).is_err());
    }
}
