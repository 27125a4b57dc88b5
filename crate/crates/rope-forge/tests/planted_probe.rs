// temporary: calibrate planted-optimum recovery before freezing criterion 4
use rope_forge::rope::{validate_factors, RescaleFactors, RotaryConfig};
use rope_forge::search::{run_search, FitnessOracle, OracleError, SearchConfig};

struct Planted {
    target: Vec<f64>,
}

impl FitnessOracle for Planted {
    fn evaluate(&self, genome: &RescaleFactors) -> Result<f64, OracleError> {
        let d: f64 = genome
            .factors()
            .iter()
            .zip(self.target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(d.sqrt() + 1.0)
    }
}

#[test]
fn planted_recovery_rate() {
    let cfg = RotaryConfig::with_default_base(8, 128).unwrap();
    let target_len = 256; // s = 2, grid [1.0, 2.5]
    let planted = Planted {
        target: vec![1.15, 1.40, 1.85, 2.20],
    };
    let mut successes = 0;
    for seed in 0..10u64 {
        let mut sc = SearchConfig::desk(2.0, seed);
        sc.max_iterations = 40;
        sc.lambda_step = 0.05;
        sc.start_token_candidates = vec![0];
        let out = run_search(&planted, &cfg, target_len, &sc).unwrap();
        let best = &out.best.genome;
        assert!(validate_factors(&cfg, best, true).is_ok());
        let ok = best
            .factors()
            .iter()
            .zip(planted.target.iter())
            .all(|(a, b)| (a - b).abs() <= 2.0 * sc.lambda_step + 1e-9);
        let dist: Vec<f64> = best
            .factors()
            .iter()
            .zip(planted.target.iter())
            .map(|(a, b)| ((a - b) / sc.lambda_step).round())
            .collect();
        println!("seed {seed}: ok={ok} offsets={dist:?} evals={}", out.evals_total);
        if ok {
            successes += 1;
        }
    }
    println!("successes: {successes}/10");
    assert!(successes >= 9, "only {successes}/10 runs recovered the optimum");
}
