//! Evolutionary search over rescale-factor genomes: the population is seeded
//! with the linear/ntk/yarn baselines, offspring are produced by grid
//! mutation and uniform crossover under the non-decreasing constraint, and
//! an elitist top-k carries the best genomes forward. Fitness (perplexity)
//! comes from a pluggable oracle and is cached per genome.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Token;
use crate::rope::{
    ntk_factors, pi_factors, validate_factors, yarn_factors, RescaleFactors, RopeError,
    RotaryConfig, LAMBDA_BOUND_MULTIPLIER, YARN_RAMP_HIGH, YARN_RAMP_LOW,
};
use crate::tinyformer::{self, ModelCheckpoint};

/// Start-token candidate pool; entries at or beyond the target length are
/// dropped per search.
pub const START_TOKEN_CANDIDATES: &[usize] =
    &[0, 1, 2, 4, 8, 12, 16, 20, 24, 28, 32, 64, 128, 256];

#[derive(Debug, Error)]
pub enum SearchConfigError {
    #[error("population must be >= 3 to hold the three baseline seeds, got {0}")]
    PopulationTooSmall(usize),
    #[error("top-k {topk} must be in [1, population {population}]")]
    BadTopK { topk: usize, population: usize },
    #[error("population {population} != mutation {n1} + crossover {n2} + topk {topk}")]
    SizesInconsistent {
        population: usize,
        n1: usize,
        n2: usize,
        topk: usize,
    },
    #[error("mutate probability {0} outside [0, 1]")]
    BadProb(f64),
    #[error("lambda grid invalid: min {min}, max {max}, step {step}")]
    BadGrid { min: f64, max: f64, step: f64 },
    #[error("max_iterations must be >= 1")]
    NoIterations,
}

/// Evolution hyperparameters plus the factor grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub population: usize,
    pub mutation_size: usize,
    pub crossover_size: usize,
    pub max_iterations: usize,
    pub mutate_prob: f64,
    pub topk: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_step: f64,
    pub start_token_candidates: Vec<usize>,
    pub seed: u64,
}

impl SearchConfig {
    /// Desk-scale preset: P=16, N1=N2=4, K=8, T=20, p=0.3, with the factor
    /// grid spanning [1.0, 1.25*s] at step 0.01.
    pub fn desk(extension_ratio: f64, seed: u64) -> Self {
        Self {
            population: 16,
            mutation_size: 4,
            crossover_size: 4,
            max_iterations: 20,
            mutate_prob: 0.3,
            topk: 8,
            lambda_min: 1.0,
            lambda_max: LAMBDA_BOUND_MULTIPLIER * extension_ratio,
            lambda_step: 0.01,
            start_token_candidates: START_TOKEN_CANDIDATES.to_vec(),
            seed,
        }
    }

    /// Reference preset for primary targets: P=64, N1=N2=16, K=32, T=40.
    pub fn paper(extension_ratio: f64, seed: u64) -> Self {
        Self {
            population: 64,
            mutation_size: 16,
            crossover_size: 16,
            max_iterations: 40,
            mutate_prob: 0.3,
            topk: 32,
            lambda_min: 1.0,
            lambda_max: LAMBDA_BOUND_MULTIPLIER * extension_ratio,
            lambda_step: 0.01,
            start_token_candidates: START_TOKEN_CANDIDATES.to_vec(),
            seed,
        }
    }

    /// Halved population/mutation/crossover for very large targets.
    pub fn large_target(extension_ratio: f64, seed: u64) -> Self {
        Self {
            population: 32,
            mutation_size: 8,
            crossover_size: 8,
            topk: 16,
            ..Self::paper(extension_ratio, seed)
        }
    }

    /// Desk analog of the halving rule for extreme targets: P=8, N1=N2=2,
    /// K=4, T=20.
    pub fn desk_large_target(extension_ratio: f64, seed: u64) -> Self {
        Self {
            population: 8,
            mutation_size: 2,
            crossover_size: 2,
            topk: 4,
            ..Self::desk(extension_ratio, seed)
        }
    }

    pub fn validate(&self) -> Result<(), SearchConfigError> {
        if self.population < 3 {
            return Err(SearchConfigError::PopulationTooSmall(self.population));
        }
        if self.topk == 0 || self.topk > self.population {
            return Err(SearchConfigError::BadTopK {
                topk: self.topk,
                population: self.population,
            });
        }
        if self.mutation_size + self.crossover_size + self.topk != self.population {
            return Err(SearchConfigError::SizesInconsistent {
                population: self.population,
                n1: self.mutation_size,
                n2: self.crossover_size,
                topk: self.topk,
            });
        }
        if !(0.0..=1.0).contains(&self.mutate_prob) {
            return Err(SearchConfigError::BadProb(self.mutate_prob));
        }
        if !(self.lambda_step > 0.0) || self.lambda_min > self.lambda_max || self.lambda_min < 0.0
        {
            return Err(SearchConfigError::BadGrid {
                min: self.lambda_min,
                max: self.lambda_max,
                step: self.lambda_step,
            });
        }
        if self.max_iterations == 0 {
            return Err(SearchConfigError::NoIterations);
        }
        Ok(())
    }

    /// Largest grid index (inclusive).
    pub fn grid_max_index(&self) -> u32 {
        (((self.lambda_max - self.lambda_min) / self.lambda_step) + 1e-9).floor() as u32
    }

    /// Grid value at index k.
    pub fn grid_value(&self, k: u32) -> f64 {
        self.lambda_min + k as f64 * self.lambda_step
    }

    /// Nearest grid index (round half up, clamped).
    pub fn snap_index(&self, value: f64) -> u32 {
        let k = ((value - self.lambda_min) / self.lambda_step).round();
        (k.max(0.0) as u32).min(self.grid_max_index())
    }

    fn start_tokens_for(&self, target_len: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .start_token_candidates
            .iter()
            .copied()
            .filter(|&n| n < target_len)
            .collect();
        if v.is_empty() {
            v.push(0);
        }
        v
    }
}

/// Where an individual came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    SeedPi,
    SeedNtk,
    SeedYarn,
    Mutation,
    Crossover,
}

impl Provenance {
    pub fn label(&self) -> &'static str {
        match self {
            Provenance::SeedPi => "seed-pi",
            Provenance::SeedNtk => "seed-ntk",
            Provenance::SeedYarn => "seed-yarn",
            Provenance::Mutation => "mutation",
            Provenance::Crossover => "crossover",
        }
    }
}

/// Genome paired with its (lazily computed) fitness.
#[derive(Debug, Clone)]
pub struct Individual {
    pub genome: RescaleFactors,
    fitness: Option<f64>,
    pub provenance: Provenance,
}

impl Individual {
    fn new(genome: RescaleFactors, provenance: Provenance) -> Self {
        Self {
            genome,
            fitness: None,
            provenance,
        }
    }

    pub fn fitness(&self) -> Option<f64> {
        self.fitness
    }

    fn set_fitness(&mut self, fitness: f64) {
        assert!(
            self.fitness.is_none() || self.fitness == Some(fitness),
            "fitness is write-once"
        );
        self.fitness = Some(fitness);
    }
}

/// Exact genome identity on the grid: factor indices plus threshold and
/// target length.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GenomeKey {
    grid: Vec<u32>,
    start_token: usize,
    target_len: usize,
}

pub fn genome_key(sc: &SearchConfig, rf: &RescaleFactors) -> GenomeKey {
    GenomeKey {
        grid: rf.factors().iter().map(|&f| sc.snap_index(f)).collect(),
        start_token: rf.start_token(),
        target_len: rf.target_len(),
    }
}

#[derive(Debug, Error)]
#[error("fitness oracle failed: {0}")]
pub struct OracleError(pub String);

/// Fitness provider; evaluations of distinct genomes may run concurrently,
/// and identical genomes must map to identical fitness within one run.
pub trait FitnessOracle: Sync {
    fn evaluate(&self, genome: &RescaleFactors) -> Result<f64, OracleError>;
}

/// Perplexity of a fixed document sample set, each truncated to the target
/// length. NLL is pooled across documents before exponentiation.
pub struct PerplexityOracle<'a> {
    ckpt: &'a ModelCheckpoint,
    docs: Vec<Vec<Token>>,
}

impl<'a> PerplexityOracle<'a> {
    pub fn new(
        ckpt: &'a ModelCheckpoint,
        docs: Vec<Vec<Token>>,
        target_len: usize,
    ) -> Result<Self, OracleError> {
        if docs.is_empty() {
            return Err(OracleError("oracle needs at least one document".into()));
        }
        let mut truncated = Vec::with_capacity(docs.len());
        for (i, mut doc) in docs.into_iter().enumerate() {
            if doc.len() < target_len {
                return Err(OracleError(format!(
                    "document {i} has {} tokens, below target length {target_len}",
                    doc.len()
                )));
            }
            doc.truncate(target_len);
            truncated.push(doc);
        }
        Ok(Self {
            ckpt,
            docs: truncated,
        })
    }
}

impl FitnessOracle for PerplexityOracle<'_> {
    fn evaluate(&self, genome: &RescaleFactors) -> Result<f64, OracleError> {
        let per_doc: Vec<Result<(f64, usize), OracleError>> = self
            .docs
            .par_iter()
            .map(|doc| {
                let loss =
                    tinyformer::model::compute_loss(&self.ckpt.config, &self.ckpt.params, doc, Some(genome))
                        .map_err(|e| OracleError(e.to_string()))?;
                Ok((loss * (doc.len() - 1) as f64, doc.len() - 1))
            })
            .collect();
        let mut nll = 0.0f64;
        let mut count = 0usize;
        for r in per_doc {
            let (l, c) = r?;
            nll += l;
            count += c;
        }
        Ok((nll / count as f64).exp())
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Config(#[from] SearchConfigError),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error("genome shapes differ: {a} vs {b} factors")]
    ShapeMismatch { a: usize, b: usize },
    #[error("search aborted at iteration {iteration}: {source}")]
    OracleFailed {
        iteration: usize,
        source: OracleError,
        partial_history: Vec<IterationRecord>,
    },
}

/// One history row, written to the search log CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub best_ppl: f64,
    pub median_ppl: f64,
    pub evals_total: usize,
}

/// CSV with header `iteration,best_ppl,median_ppl,evals_total`.
pub fn history_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,best_ppl,median_ppl,evals_total\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration, r.best_ppl, r.median_ppl, r.evals_total
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: Individual,
    pub history: Vec<IterationRecord>,
    /// Fitness of the three grid-snapped baseline seeds.
    pub seed_fitness: Vec<(Provenance, f64)>,
    pub evals_total: usize,
    pub distinct_genomes: usize,
}

/// The three baseline seeds at `target_len`, in (pi, ntk, yarn) order.
pub fn baseline_seeds(
    cfg: &RotaryConfig,
    target_len: usize,
) -> Result<Vec<(Provenance, RescaleFactors)>, RopeError> {
    let s = target_len as f64 / cfg.original_len() as f64;
    if s < 1.0 {
        return Err(RopeError::InvalidRatio(s));
    }
    let retarget = |rf: RescaleFactors| {
        RescaleFactors::new(
            rf.factors().to_vec(),
            rf.start_token(),
            target_len,
            cfg.original_len(),
        )
    };
    Ok(vec![
        (Provenance::SeedPi, retarget(pi_factors(cfg, s)?)?),
        (Provenance::SeedNtk, retarget(ntk_factors(cfg, s)?)?),
        (
            Provenance::SeedYarn,
            retarget(yarn_factors(cfg, s, YARN_RAMP_LOW, YARN_RAMP_HIGH)?)?,
        ),
    ])
}

/// Baseline seeds for a model already fine-tuned under `prior` factors: the
/// generators run relative to the fine-tuned window (its target length acts
/// as the original length) and compose multiplicatively with the prior.
pub fn composed_baseline_seeds(
    cfg: &RotaryConfig,
    prior: &RescaleFactors,
    target_len: usize,
) -> Result<Vec<(Provenance, RescaleFactors)>, RopeError> {
    let ft_window = prior.target_len();
    let relative = RotaryConfig::new(cfg.head_dim(), cfg.base(), ft_window)?;
    let seeds = baseline_seeds(&relative, target_len)?;
    seeds
        .into_iter()
        .map(|(prov, rf)| {
            let factors: Vec<f64> = rf
                .factors()
                .iter()
                .zip(prior.factors().iter())
                .map(|(&g, &p)| g * p)
                .collect();
            Ok((
                prov,
                RescaleFactors::new(factors, 0, target_len, cfg.original_len())?,
            ))
        })
        .collect()
}

fn stream_rng(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha12Rng {
    // splitmix64 over a stable composite index.
    let mut z = seed
        .wrapping_add(domain.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(a.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(b.wrapping_mul(0x94d0_49bb_1331_11eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha12Rng::seed_from_u64(z)
}

fn is_monotone(grid: &[u32]) -> bool {
    grid.windows(2).all(|w| w[0] <= w[1])
}

fn genome_from_grid(
    sc: &SearchConfig,
    grid: &[u32],
    start_token: usize,
    target_len: usize,
    original_len: usize,
) -> RescaleFactors {
    let factors = grid.iter().map(|&k| sc.grid_value(k)).collect();
    RescaleFactors::new(factors, start_token, target_len, original_len)
        .expect("grid genomes are constructible")
}

fn snap_genome(sc: &SearchConfig, rf: &RescaleFactors, original_len: usize) -> RescaleFactors {
    let mut grid: Vec<u32> = rf.factors().iter().map(|&f| sc.snap_index(f)).collect();
    if !is_monotone(&grid) {
        grid.sort_unstable();
    }
    genome_from_grid(sc, &grid, rf.start_token(), rf.target_len(), original_len)
}

const MUTATE_RETRIES: usize = 16;
const DEDUPE_RETRIES: usize = 8;

fn mutate_with_constraint(
    sc: &SearchConfig,
    parent: &RescaleFactors,
    original_len: usize,
    rng: &mut ChaCha12Rng,
) -> RescaleFactors {
    let parent_grid: Vec<u32> = parent.factors().iter().map(|&f| sc.snap_index(f)).collect();
    let kmax = sc.grid_max_index();
    let starts = sc.start_tokens_for(parent.target_len());
    let mut last: Option<(Vec<u32>, usize)> = None;
    for _ in 0..MUTATE_RETRIES {
        let mut grid = parent_grid.clone();
        for g in grid.iter_mut() {
            if rng.gen::<f64>() < sc.mutate_prob {
                *g = rng.gen_range(0..=kmax);
            }
        }
        let mut start = parent.start_token();
        if rng.gen::<f64>() < sc.mutate_prob {
            start = starts[rng.gen_range(0..starts.len())];
        }
        if is_monotone(&grid) {
            return genome_from_grid(sc, &grid, start, parent.target_len(), original_len);
        }
        last = Some((grid, start));
    }
    // Deterministic repair: sort the factor indices non-decreasing.
    let (mut grid, start) = last.expect("at least one attempt");
    grid.sort_unstable();
    genome_from_grid(sc, &grid, start, parent.target_len(), original_len)
}

fn crossover_with_constraint(
    sc: &SearchConfig,
    a: &RescaleFactors,
    b: &RescaleFactors,
    original_len: usize,
    rng: &mut ChaCha12Rng,
) -> Result<RescaleFactors, SearchError> {
    if a.factors().len() != b.factors().len() || a.target_len() != b.target_len() {
        return Err(SearchError::ShapeMismatch {
            a: a.factors().len(),
            b: b.factors().len(),
        });
    }
    let ga: Vec<u32> = a.factors().iter().map(|&f| sc.snap_index(f)).collect();
    let gb: Vec<u32> = b.factors().iter().map(|&f| sc.snap_index(f)).collect();
    let mut last: Option<(Vec<u32>, usize)> = None;
    for _ in 0..MUTATE_RETRIES {
        let grid: Vec<u32> = ga
            .iter()
            .zip(gb.iter())
            .map(|(&x, &y)| if rng.gen::<bool>() { x } else { y })
            .collect();
        let start = if rng.gen::<bool>() {
            a.start_token()
        } else {
            b.start_token()
        };
        if is_monotone(&grid) {
            return Ok(genome_from_grid(
                sc,
                &grid,
                start,
                a.target_len(),
                original_len,
            ));
        }
        last = Some((grid, start));
    }
    let (mut grid, start) = last.expect("at least one attempt");
    grid.sort_unstable();
    Ok(genome_from_grid(
        sc,
        &grid,
        start,
        a.target_len(),
        original_len,
    ))
}

/// Public mutation operator (per-dimension grid resample with probability p,
/// threshold resample with probability p, monotonicity enforced).
pub fn mutate(parent: &Individual, sc: &SearchConfig, original_len: usize, stream: u64) -> Individual {
    let mut rng = stream_rng(sc.seed, 0xA1, stream, 0);
    Individual::new(
        mutate_with_constraint(sc, &parent.genome, original_len, &mut rng),
        Provenance::Mutation,
    )
}

/// Public crossover operator (per-dimension uniform parent choice).
pub fn crossover(
    a: &Individual,
    b: &Individual,
    sc: &SearchConfig,
    original_len: usize,
    stream: u64,
) -> Result<Individual, SearchError> {
    let mut rng = stream_rng(sc.seed, 0xB2, stream, 0);
    Ok(Individual::new(
        crossover_with_constraint(sc, &a.genome, &b.genome, original_len, &mut rng)?,
        Provenance::Crossover,
    ))
}

/// Initial population: the three snapped baselines plus P-3 mutated copies.
/// Duplicate genomes are resampled a few times, then admitted (the fitness
/// cache makes duplicates cheap).
pub fn seed_population(
    cfg: &RotaryConfig,
    target_len: usize,
    sc: &SearchConfig,
) -> Result<Vec<Individual>, SearchError> {
    let seeds = baseline_seeds(cfg, target_len)?;
    seed_population_from(cfg, sc, &seeds)
}

fn seed_population_from(
    cfg: &RotaryConfig,
    sc: &SearchConfig,
    seeds: &[(Provenance, RescaleFactors)],
) -> Result<Vec<Individual>, SearchError> {
    sc.validate()?;
    let original_len = cfg.original_len();
    let mut population: Vec<Individual> = seeds
        .iter()
        .map(|(prov, rf)| Individual::new(snap_genome(sc, rf, original_len), *prov))
        .collect();
    let mut seen: HashSet<GenomeKey> = population
        .iter()
        .map(|ind| genome_key(sc, &ind.genome))
        .collect();

    for slot in population.len()..sc.population {
        let parent = &population[slot % seeds.len()].genome.clone();
        let mut child = None;
        for retry in 0..DEDUPE_RETRIES {
            let mut rng = stream_rng(sc.seed, 0xC3, slot as u64, retry as u64);
            let candidate = mutate_with_constraint(sc, parent, original_len, &mut rng);
            let key = genome_key(sc, &candidate);
            if !seen.contains(&key) {
                seen.insert(key);
                child = Some(candidate);
                break;
            }
            child = Some(candidate);
        }
        population.push(Individual::new(
            child.expect("dedupe loop ran"),
            Provenance::Mutation,
        ));
    }
    for ind in &population {
        debug_assert!(validate_factors(cfg, &ind.genome, true).is_ok());
    }
    Ok(population)
}

/// Full evolutionary loop with the default baseline seeds.
pub fn run_search(
    oracle: &dyn FitnessOracle,
    cfg: &RotaryConfig,
    target_len: usize,
    sc: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    let seeds = baseline_seeds(cfg, target_len)?;
    run_search_with_seeds(oracle, cfg, sc, &seeds)
}

/// Evolutionary loop with explicit baseline seeds (used for secondary
/// searches on fine-tuned checkpoints, where the seeds compose with the
/// factors the model was tuned under).
pub fn run_search_with_seeds(
    oracle: &dyn FitnessOracle,
    cfg: &RotaryConfig,
    sc: &SearchConfig,
    seeds: &[(Provenance, RescaleFactors)],
) -> Result<SearchOutcome, SearchError> {
    sc.validate()?;
    let original_len = cfg.original_len();
    let mut population = seed_population_from(cfg, sc, seeds)?;
    let mut cache: HashMap<GenomeKey, f64> = HashMap::new();
    let mut distinct: HashSet<GenomeKey> = population
        .iter()
        .map(|ind| genome_key(sc, &ind.genome))
        .collect();
    let mut top_k: Vec<Individual> = Vec::new();
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut evals_total = 0usize;
    let mut seed_fitness: Vec<(Provenance, f64)> = Vec::new();

    for iteration in 1..=sc.max_iterations {
        // Evaluate the population through the cache; merge results in
        // individual-index order so concurrency cannot reorder anything.
        let mut to_eval: Vec<(GenomeKey, RescaleFactors)> = Vec::new();
        let mut batch_keys: HashSet<GenomeKey> = HashSet::new();
        for ind in &population {
            debug_assert!(validate_factors(cfg, &ind.genome, true).is_ok());
            let key = genome_key(sc, &ind.genome);
            if ind.fitness().is_none() && !cache.contains_key(&key) && !batch_keys.contains(&key)
            {
                batch_keys.insert(key.clone());
                to_eval.push((key, ind.genome.clone()));
            }
        }
        let results: Vec<Result<f64, OracleError>> = to_eval
            .par_iter()
            .map(|(_, genome)| oracle.evaluate(genome))
            .collect();
        for ((key, _), result) in to_eval.iter().zip(results.into_iter()) {
            match result {
                Ok(f) if f.is_finite() => {
                    cache.insert(key.clone(), f);
                    evals_total += 1;
                }
                Ok(f) => {
                    return Err(SearchError::OracleFailed {
                        iteration,
                        source: OracleError(format!("non-finite fitness {f}")),
                        partial_history: history,
                    })
                }
                Err(source) => {
                    return Err(SearchError::OracleFailed {
                        iteration,
                        source,
                        partial_history: history,
                    })
                }
            }
        }
        for ind in population.iter_mut() {
            if ind.fitness().is_none() {
                let key = genome_key(sc, &ind.genome);
                ind.set_fitness(cache[&key]);
            }
        }
        if iteration == 1 {
            seed_fitness = population
                .iter()
                .take(seeds.len())
                .map(|ind| (ind.provenance, ind.fitness().expect("evaluated")))
                .collect();
        }

        // Elitist top-k update over the union of survivors and newcomers.
        let mut pool: Vec<Individual> = Vec::with_capacity(top_k.len() + population.len());
        pool.append(&mut top_k);
        pool.extend(population.iter().cloned());
        let mut seen_pool: HashSet<GenomeKey> = HashSet::new();
        pool.retain(|ind| seen_pool.insert(genome_key(sc, &ind.genome)));
        pool.sort_by(|a, b| {
            a.fitness()
                .partial_cmp(&b.fitness())
                .expect("finite fitness")
                .then_with(|| genome_cmp(sc, &a.genome, &b.genome))
        });
        pool.truncate(sc.topk);
        top_k = pool;

        let mut fits: Vec<f64> = population.iter().filter_map(|i| i.fitness()).collect();
        fits.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if fits.len() % 2 == 1 {
            fits[fits.len() / 2]
        } else {
            0.5 * (fits[fits.len() / 2 - 1] + fits[fits.len() / 2])
        };
        history.push(IterationRecord {
            iteration,
            best_ppl: top_k[0].fitness().expect("top-k evaluated"),
            median_ppl: median,
            evals_total,
        });

        if iteration == sc.max_iterations {
            break;
        }

        // Next generation: N1 mutants and N2 crossovers of top-k parents,
        // plus the top-k itself. Each offspring draws from its own RNG
        // stream keyed by (iteration, slot).
        let mut next: Vec<Individual> = Vec::with_capacity(sc.population);
        for slot in 0..sc.mutation_size {
            let mut rng = stream_rng(sc.seed, 0xD4, iteration as u64, slot as u64);
            let parent = &top_k[rng.gen_range(0..top_k.len())];
            let genome = mutate_with_constraint(sc, &parent.genome, original_len, &mut rng);
            distinct.insert(genome_key(sc, &genome));
            next.push(Individual::new(genome, Provenance::Mutation));
        }
        for slot in 0..sc.crossover_size {
            let mut rng = stream_rng(sc.seed, 0xE5, iteration as u64, slot as u64);
            let i = rng.gen_range(0..top_k.len());
            let j = if top_k.len() > 1 {
                let mut j = rng.gen_range(0..top_k.len() - 1);
                if j >= i {
                    j += 1;
                }
                j
            } else {
                i
            };
            let genome = crossover_with_constraint(
                sc,
                &top_k[i].genome,
                &top_k[j].genome,
                original_len,
                &mut rng,
            )?;
            distinct.insert(genome_key(sc, &genome));
            next.push(Individual::new(genome, Provenance::Crossover));
        }
        next.extend(top_k.iter().cloned());
        population = next;
    }

    Ok(SearchOutcome {
        best: top_k[0].clone(),
        history,
        seed_fitness,
        evals_total,
        distinct_genomes: distinct.len(),
    })
}

fn genome_cmp(sc: &SearchConfig, a: &RescaleFactors, b: &RescaleFactors) -> std::cmp::Ordering {
    let ka = genome_key(sc, a);
    let kb = genome_key(sc, b);
    ka.grid
        .cmp(&kb.grid)
        .then(ka.start_token.cmp(&kb.start_token))
}

/// Sidecar metadata persisted next to a winning genome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSidecar {
    pub config: SearchConfig,
    pub target_len: usize,
    pub seed_fitness: Vec<(String, f64)>,
    pub best_fitness: f64,
    pub evals_total: usize,
    pub distinct_genomes: usize,
}

impl SearchSidecar {
    pub fn from_outcome(outcome: &SearchOutcome, sc: &SearchConfig, target_len: usize) -> Self {
        Self {
            config: sc.clone(),
            target_len,
            seed_fitness: outcome
                .seed_fitness
                .iter()
                .map(|(p, f)| (p.label().to_string(), *f))
                .collect(),
            best_fitness: outcome.best.fitness().expect("search returns evaluated best"),
            evals_total: outcome.evals_total,
            distinct_genomes: outcome.distinct_genomes,
        }
    }
}
