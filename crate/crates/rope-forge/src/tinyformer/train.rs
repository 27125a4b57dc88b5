//! Adam training loop over fixed-length corpus chunks, plus the two-stage
//! progressive fine-tune that swaps rescale factors between stages.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::compute_loss_and_grads;
use super::{ModelCheckpoint, ModelError, Params};
use crate::corpus::{Corpus, Split};
use crate::rope::RescaleFactors;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("corpus yields {chunks} chunks at seq_len {seq_len}, need at least {needed}")]
    Data {
        chunks: usize,
        seq_len: usize,
        needed: usize,
    },
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("progressive stages must grow: first target {first} >= second target {second}")]
    StageOrder { first: usize, second: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            seq_len: 128,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::LinearDecay,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.seq_len < 2 {
            return Err(TrainError::Config("seq_len must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// CSV with header `step,loss,lr`.
pub fn train_log_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<TrainLogRow>,
}

struct AdamState {
    m: Params<f32>,
    v: Params<f32>,
    t: u64,
}

impl AdamState {
    fn new(ckpt: &ModelCheckpoint) -> Self {
        Self {
            m: Params::zeros(&ckpt.config),
            v: Params::zeros(&ckpt.config),
            t: 0,
        }
    }

    fn update(&mut self, params: &mut Params<f32>, grads: &Params<f32>, tc: &TrainConfig, lr: f64) {
        self.t += 1;
        let b1 = tc.adam_beta1;
        let b2 = tc.adam_beta2;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        let mut p_tensors = params.named_tensors_mut();
        let mut m_tensors = self.m.named_tensors_mut();
        let mut v_tensors = self.v.named_tensors_mut();
        let g_tensors = grads.named_tensors();
        for i in 0..p_tensors.len() {
            let p = &mut p_tensors[i].1;
            let m = &mut m_tensors[i].1;
            let v = &mut v_tensors[i].1;
            let g = g_tensors[i].1;
            for j in 0..p.len() {
                let gj = g[j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let m_hat = mj / bias1;
                let v_hat = vj / bias2;
                p[j] = (p[j] as f64 - lr * m_hat / (v_hat.sqrt() + tc.adam_eps)) as f32;
            }
        }
    }
}

fn clip_global_norm(grads: &mut Params<f32>, max_norm: f64) {
    if !(max_norm > 0.0) {
        return;
    }
    let mut sq = 0.0f64;
    for (_, data) in grads.named_tensors() {
        for &g in data {
            sq += (g as f64) * (g as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for (_, data) in grads.named_tensors_mut() {
            for g in data.iter_mut() {
                *g *= scale;
            }
        }
    }
}

fn accumulate(into: &mut Params<f32>, from: &Params<f32>, scale: f32) {
    let mut dst = into.named_tensors_mut();
    let src = from.named_tensors();
    for i in 0..dst.len() {
        for (d, s) in dst[i].1.iter_mut().zip(src[i].1.iter()) {
            *d += s * scale;
        }
    }
}

/// Adam training for `tc.steps` over training-split chunks. Deterministic in
/// the seed: batches are drawn from a reshuffled epoch order and gradients
/// are averaged element-by-element in batch index order.
pub fn train(
    ckpt: &ModelCheckpoint,
    corpus: &Corpus,
    tc: &TrainConfig,
    rf: Option<&RescaleFactors>,
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    if let Some(rf) = rf {
        if tc.seq_len > rf.target_len() {
            return Err(TrainError::Config(format!(
                "seq_len {} exceeds factor target_len {}",
                tc.seq_len,
                rf.target_len()
            )));
        }
    } else if tc.seq_len > ckpt.config.trained_len {
        return Err(TrainError::Config(format!(
            "seq_len {} exceeds trained_len {} and no factors were given",
            tc.seq_len, ckpt.config.trained_len
        )));
    }

    let chunks = corpus.chunks(Split::Train, tc.seq_len);
    if chunks.len() < tc.batch_size {
        return Err(TrainError::Data {
            chunks: chunks.len(),
            seq_len: tc.seq_len,
            needed: tc.batch_size,
        });
    }

    let mut params = ckpt.params.clone();
    let mut adam = AdamState::new(ckpt);
    let mut rng = ChaCha12Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut log = Vec::with_capacity(tc.steps);

    for step in 0..tc.steps {
        let mut batch: Vec<&[crate::corpus::Token]> = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&chunks[order[cursor]]);
            cursor += 1;
        }

        let mut grad_sum = Params::zeros(&ckpt.config);
        let mut loss_sum = 0.0f64;
        for tokens in &batch {
            let (loss, grads) = compute_loss_and_grads(&ckpt.config, &params, tokens, rf)?;
            loss_sum += loss;
            accumulate(&mut grad_sum, &grads, 1.0);
        }
        let loss = loss_sum / tc.batch_size as f64;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, loss });
        }
        let inv_b = 1.0 / tc.batch_size as f32;
        for (_, data) in grad_sum.named_tensors_mut() {
            for g in data.iter_mut() {
                *g *= inv_b;
            }
        }
        clip_global_norm(&mut grad_sum, tc.grad_clip);

        let lr = match tc.lr_schedule {
            LrSchedule::Constant => tc.learning_rate,
            LrSchedule::LinearDecay => tc.learning_rate * (1.0 - step as f64 / tc.steps as f64),
        };
        adam.update(&mut params, &grad_sum, tc, lr);
        log.push(TrainLogRow { step, loss, lr });
    }

    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint {
            config: ckpt.config.clone(),
            params,
            train_steps: ckpt.train_steps + tc.steps as u64,
            rescale_used: rf.cloned(),
            rng_seed: ckpt.rng_seed,
        },
        log,
    })
}

/// Two-stage fine-tune: first at the intermediate factors' target length,
/// then continuing from that checkpoint with the larger factors at their
/// target length. The returned checkpoint records the second factors.
pub fn finetune_progressive(
    base: &ModelCheckpoint,
    rf1: &RescaleFactors,
    steps1: usize,
    rf2: &RescaleFactors,
    steps2: usize,
    corpus: &Corpus,
    tc: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if rf1.target_len() >= rf2.target_len() {
        return Err(TrainError::StageOrder {
            first: rf1.target_len(),
            second: rf2.target_len(),
        });
    }
    if steps1 == 0 || steps2 == 0 {
        return Err(TrainError::Config(
            "both progressive stages need steps >= 1".into(),
        ));
    }
    let tc1 = TrainConfig {
        steps: steps1,
        seq_len: rf1.target_len(),
        ..tc.clone()
    };
    let stage1 = train(base, corpus, &tc1, Some(rf1))?;

    let tc2 = TrainConfig {
        steps: steps2,
        seq_len: rf2.target_len(),
        seed: tc.seed.wrapping_add(1),
        ..tc.clone()
    };
    let stage2 = train(&stage1.checkpoint, corpus, &tc2, Some(rf2))?;

    let mut log = stage1.log;
    let offset = log.len();
    log.extend(stage2.log.into_iter().map(|mut r| {
        r.step += offset;
        r
    }));
    Ok(TrainOutcome {
        checkpoint: stage2.checkpoint,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Token;
    use crate::rope::{pi_factors, RotaryConfig};
    use crate::tinyformer::init_model;
    use crate::tinyformer::ModelConfig;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            vocab_size: 258,
            trained_len: 32,
            tied_embeddings: true,
            rotary: RotaryConfig::with_default_base(8, 32).unwrap(),
        }
    }

    fn repeating_corpus() -> Corpus {
        let text = b"the quick brown fox jumps over the lazy dog. ".repeat(80);
        Corpus::from_documents(vec![crate::corpus::tokenize(&text)], (1.0, 0.0, 0.0), 0).unwrap()
    }

    fn tiny_tc(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            seq_len: 32,
            learning_rate: 3e-3,
            lr_schedule: LrSchedule::LinearDecay,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let ckpt = init_model(&tiny_config(), 0).unwrap();
        let err = train(&ckpt, &repeating_corpus(), &tiny_tc(0), None).unwrap_err();
        assert!(matches!(err, TrainError::Config(_)));
    }

    #[test]
    fn loss_decreases_on_repeating_text() {
        let ckpt = init_model(&tiny_config(), 1).unwrap();
        let out = train(&ckpt, &repeating_corpus(), &tiny_tc(60), None).unwrap();
        let first = out.log.first().unwrap().loss;
        let last = out.log.last().unwrap().loss;
        assert!(
            last < first,
            "expected improvement, got {first} -> {last}"
        );
        assert_eq!(out.checkpoint.train_steps, 60);
        assert!(out.checkpoint.rescale_used.is_none());
    }

    #[test]
    fn training_is_deterministic() {
        let ckpt = init_model(&tiny_config(), 2).unwrap();
        let corpus = repeating_corpus();
        let a = train(&ckpt, &corpus, &tiny_tc(10), None).unwrap();
        let b = train(&ckpt, &corpus, &tiny_tc(10), None).unwrap();
        for ((name, ta), (_, tb)) in a
            .checkpoint
            .params
            .named_tensors()
            .iter()
            .zip(b.checkpoint.params.named_tensors())
        {
            assert_eq!(ta, &tb, "tensor {name} differs between identical runs");
        }
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn empty_corpus_is_a_data_error() {
        let ckpt = init_model(&tiny_config(), 0).unwrap();
        let little =
            Corpus::from_documents(vec![vec![1 as Token; 8]], (1.0, 0.0, 0.0), 0).unwrap();
        assert!(matches!(
            train(&ckpt, &little, &tiny_tc(1), None),
            Err(TrainError::Data { .. })
        ));
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let mut ckpt = init_model(&tiny_config(), 0).unwrap();
        ckpt.params.wte.data[0] = f32::MAX;
        ckpt.params.wte.data[1] = f32::MAX;
        let err = train(&ckpt, &repeating_corpus(), &tiny_tc(3), None).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { .. }), "got {err:?}");
    }

    #[test]
    fn progressive_stage_contract() {
        let cfg = tiny_config();
        let ckpt = init_model(&cfg, 3).unwrap();
        let corpus = repeating_corpus();
        let rf1 = pi_factors(&cfg.rotary, 2.0).unwrap(); // target 64
        let rf2 = pi_factors(&cfg.rotary, 4.0).unwrap(); // target 128

        assert!(matches!(
            finetune_progressive(&ckpt, &rf2, 2, &rf1, 2, &corpus, &tiny_tc(1)),
            Err(TrainError::StageOrder { .. })
        ));
        assert!(matches!(
            finetune_progressive(&ckpt, &rf1, 2, &rf2, 0, &corpus, &tiny_tc(1)),
            Err(TrainError::Config(_))
        ));

        let out = finetune_progressive(&ckpt, &rf1, 2, &rf2, 3, &corpus, &tiny_tc(1)).unwrap();
        let used = out.checkpoint.rescale_used.as_ref().unwrap();
        assert_eq!(used.target_len(), rf2.target_len());
        assert_eq!(out.log.len(), 5);
        assert_eq!(out.checkpoint.train_steps, 5);
    }
}
