//! Tournament-selection evolution over genomes.
//!
//! Each iteration samples `#S` individuals without replacement, mutates the
//! fittest of the sample into a child, adds the child and evicts the least fit
//! of the sample. Ties in either selection go to the lower id.

mod config;
mod sweep;

pub use config::{EvaluatorConfig, SearchConfig, SearchMode, ToyConfig};
pub use sweep::{run_sweep, sweep_seed, write_curve_csv, CurvePoint, SweepConfig, SweepCurve, CURVE_CSV_HEADER};

use std::io::{BufRead, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{EvalResult, Evaluator};
use crate::objective::{fitness, FitnessRecord};
use crate::search_space::{ModelGenome, SearchSpace};

/// Failed child evaluations tolerated per iteration before giving up.
pub const MAX_RETRIES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub id: u64,
    pub genome: ModelGenome,
    pub result: EvalResult,
    pub fitness_record: FitnessRecord,
    pub birth_iteration: usize,
}

impl Individual {
    pub fn fitness(&self) -> f64 {
        self.fitness_record.fitness
    }

    pub fn record(&self) -> IndividualRecord {
        IndividualRecord {
            id: self.id,
            genome: self.genome.clone(),
            accuracy: self.result.accuracy,
            size_bytes: self.result.size_bytes,
            fitness: self.fitness(),
            birth_iteration: self.birth_iteration,
        }
    }
}

/// Serialized form of an individual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub id: u64,
    pub genome: ModelGenome,
    pub accuracy: f64,
    pub size_bytes: u64,
    pub fitness: f64,
    pub birth_iteration: usize,
}

/// One line of the run history. Iteration 0 lists the initial population;
/// later iterations describe the child and the evicted individual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child: Option<IndividualRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evicted_id: Option<u64>,
    /// Failed evaluations retried in this iteration.
    #[serde(default)]
    pub failures: usize,
    pub population_size: usize,
    pub mean_fitness: f64,
    pub std_fitness: f64,
    /// Best fitness in the current population.
    pub best_fitness: f64,
    /// Best fitness of any individual evaluated so far.
    pub running_best_fitness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<Vec<IndividualRecord>>,
}

impl HistoryRecord {
    /// Every individual first evaluated in this record.
    pub fn evaluated(&self) -> Vec<&IndividualRecord> {
        match (&self.population, &self.child) {
            (Some(p), _) => p.iter().collect(),
            (None, Some(c)) => vec![c],
            (None, None) => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchHistory {
    pub records: Vec<HistoryRecord>,
    pub final_population: Vec<Individual>,
    /// Fittest individual ever evaluated (lowest id on ties).
    pub best: Individual,
}

/// Mean, population standard deviation and maximum of the fitness values.
pub fn population_stats(fitness: &[f64]) -> (f64, f64, f64) {
    let n = fitness.len() as f64;
    let mean = fitness.iter().sum::<f64>() / n;
    let var = fitness.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n;
    let max = fitness.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), max)
}

/// Indices of the fittest and least fit sampled individuals.
fn select(population: &[Individual], sample: &[usize]) -> (usize, usize) {
    let key = |i: usize| (population[i].fitness(), population[i].id);
    let mut best = sample[0];
    let mut worst = sample[0];
    for &i in &sample[1..] {
        let (f, id) = key(i);
        let (bf, bid) = key(best);
        if f > bf || (f == bf && id < bid) {
            best = i;
        }
        let (wf, wid) = key(worst);
        if f < wf || (f == wf && id < wid) {
            worst = i;
        }
    }
    (best, worst)
}

/// A search run in progress.
pub struct Search<'a> {
    config: SearchConfig,
    space: SearchSpace,
    evaluator: &'a dyn Evaluator,
    frozen: Option<ModelGenome>,
    rng: ChaCha8Rng,
    population: Vec<Individual>,
    next_id: u64,
    iteration: usize,
    best: Option<Individual>,
}

impl<'a> Search<'a> {
    pub fn new(config: SearchConfig, evaluator: &'a dyn Evaluator) -> Result<Self> {
        config.validate()?;
        let space = SearchSpace::for_profile(config.space.clone(), &config.search_profile)?;
        for g in &config.seed_individuals {
            if let Some(d) = space.validate(g).first() {
                return Err(Error::Config(format!("invalid seed individual: {d}")));
            }
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            space,
            evaluator,
            frozen: None,
            rng,
            population: Vec::new(),
            next_id: 0,
            iteration: 0,
            best: None,
        })
    }

    /// Architecture used for randomly initialized individuals in
    /// policy-only mode.
    pub fn with_frozen_architecture(mut self, genome: ModelGenome) -> Self {
        self.frozen = Some(genome);
        self
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn population(&self) -> &[Individual] {
        &self.population
    }

    fn score(&mut self, genome: ModelGenome, result: EvalResult) -> Result<Individual> {
        let fitness_record = fitness(result.accuracy, result.size_bytes, self.config.target_bytes)?;
        let ind = Individual {
            id: self.next_id,
            genome,
            result,
            fitness_record,
            birth_iteration: self.iteration,
        };
        self.next_id += 1;
        if self.best.as_ref().is_none_or(|b| ind.fitness() > b.fitness()) {
            self.best = Some(ind.clone());
        }
        Ok(ind)
    }

    fn stats_record(&self, child: Option<IndividualRecord>, evicted_id: Option<u64>, failures: usize) -> HistoryRecord {
        let f: Vec<f64> = self.population.iter().map(Individual::fitness).collect();
        let (mean_fitness, std_fitness, best_fitness) = population_stats(&f);
        HistoryRecord {
            iteration: self.iteration,
            child,
            evicted_id,
            failures,
            population_size: self.population.len(),
            mean_fitness,
            std_fitness,
            best_fitness,
            running_best_fitness: self.best.as_ref().map_or(f64::NAN, Individual::fitness),
            population: None,
        }
    }

    fn random_member(&mut self) -> ModelGenome {
        let mut g = self.space.random_genome(&mut self.rng);
        if self.config.mode == SearchMode::PolicyOnly {
            if let Some(base) = self.frozen.as_ref().or(self.config.seed_individuals.first()) {
                g.normal = base.normal.clone();
                g.reduction = base.reduction.clone();
            }
        }
        g
    }

    /// Seeds first, then random genomes, all evaluated.
    pub fn init_population(&mut self) -> Result<HistoryRecord> {
        if self.config.mode == SearchMode::PolicyOnly && self.frozen.is_none() && self.config.seed_individuals.is_empty() {
            return Err(Error::Config("policy-only search needs a frozen architecture or a seed individual".into()));
        }
        self.population.clear();
        let mut genomes = self.config.seed_individuals.clone();
        while genomes.len() < self.config.population_size {
            genomes.push(self.random_member());
        }
        for g in genomes {
            let result = self.evaluator.evaluate(&g)?;
            let ind = self.score(g, result)?;
            self.population.push(ind);
        }
        let mut rec = self.stats_record(None, None, 0);
        rec.population = Some(self.population.iter().map(Individual::record).collect());
        Ok(rec)
    }

    fn mutate(&mut self, parent: &ModelGenome) -> Result<ModelGenome> {
        match self.config.mode {
            SearchMode::Joint => {
                let g = self.space.mutate_architecture(parent, &mut self.rng)?;
                self.space.mutate_policy(&g, &mut self.rng)
            }
            SearchMode::PolicyOnly => self.space.mutate_policy(parent, &mut self.rng),
        }
    }

    /// One tournament iteration.
    pub fn step(&mut self) -> Result<HistoryRecord> {
        self.iteration += 1;
        let n = self.population.len();
        let sample = index::sample(&mut self.rng, n, self.config.sample_size).into_vec();
        let (best, worst) = select(&self.population, &sample);
        let parent = self.population[best].genome.clone();
        let mut failures = 0;
        let (genome, result) = loop {
            let child = self.mutate(&parent)?;
            match self.evaluator.evaluate(&child) {
                Ok(r) => break (child, r),
                Err(_) if failures < MAX_RETRIES => failures += 1,
                Err(e) => {
                    return Err(Error::RetriesExhausted {
                        attempts: failures + 1,
                        last: Box::new(e),
                    })
                }
            }
        };
        let child = self.score(genome, result)?;
        let evicted = self.population.remove(worst);
        let child_rec = child.record();
        self.population.push(child);
        Ok(self.stats_record(Some(child_rec), Some(evicted.id), failures))
    }

    /// Initializes, runs every iteration and hands each record to `sink`.
    pub fn run_with(mut self, mut sink: impl FnMut(&HistoryRecord) -> Result<()>) -> Result<SearchHistory> {
        let mut records = Vec::with_capacity(self.config.max_iterations + 1);
        let first = self.init_population()?;
        sink(&first)?;
        records.push(first);
        for _ in 0..self.config.max_iterations {
            let rec = self.step()?;
            sink(&rec)?;
            records.push(rec);
        }
        Ok(SearchHistory {
            records,
            final_population: self.population,
            best: self.best.expect("population is nonempty"),
        })
    }

    pub fn run(self) -> Result<SearchHistory> {
        self.run_with(|_| Ok(()))
    }
}

pub fn run_search(config: &SearchConfig, evaluator: &dyn Evaluator) -> Result<SearchHistory> {
    Search::new(config.clone(), evaluator)?.run()
}

/// Writes one JSON object per line.
pub fn write_history<W: Write>(records: &[HistoryRecord], mut sink: W) -> Result<()> {
    for r in records {
        write_record(r, &mut sink)?;
    }
    sink.flush()?;
    Ok(())
}

pub fn write_record<W: Write>(record: &HistoryRecord, mut sink: W) -> Result<()> {
    serde_json::to_writer(&mut sink, record)?;
    sink.write_all(b"\n")?;
    Ok(())
}

pub fn read_history<R: BufRead>(source: R) -> Result<Vec<HistoryRecord>> {
    let mut out = Vec::new();
    for line in source.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
