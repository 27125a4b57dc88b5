//! Evaluation harnesses: sliding-window perplexity across context lengths
//! and the synthetic passkey-retrieval task, with CSV / table reports.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{tokenize, Corpus, CorpusError, Split, Token};
use crate::pipeline::FactorBundle;
use crate::rope::RescaleFactors;
use crate::tinyformer::model::compute_loss_window;
use crate::tinyformer::{generate_greedy, ModelCheckpoint, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("document of {doc_len} tokens is shorter than the {window}-token window")]
    DocTooShort { doc_len: usize, window: usize },
    #[error("stride must be >= 1")]
    BadStride,
    #[error("context length {context_len} cannot fit the passkey template plus {max_new} generated tokens")]
    ContextTooSmall { context_len: usize, max_new: usize },
    #[error("passkey must be exactly 5 ascii digits, got {key:?}")]
    BadKey { key: String },
    #[error("evaluation at context length {context_len} failed: {source}")]
    AtLength {
        context_len: usize,
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Data(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Stride selection: a fraction of the window (desk default, window/16) or
/// a fixed token count (256 mirrors the reference protocol).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StrideRule {
    Fraction(usize),
    Fixed(usize),
}

impl StrideRule {
    pub const DESK: StrideRule = StrideRule::Fraction(16);
    pub const PAPER: StrideRule = StrideRule::Fixed(256);

    pub fn stride_for(&self, window: usize) -> usize {
        match *self {
            StrideRule::Fraction(div) => (window / div.max(1)).max(1),
            StrideRule::Fixed(s) => s.max(1),
        }
    }
}

/// Window start offsets: multiples of `stride` while a full window fits,
/// plus a final clamped start so the last tokens are covered.
pub fn window_starts(doc_len: usize, window: usize, stride: usize) -> Vec<usize> {
    debug_assert!(doc_len >= window && stride >= 1);
    let last = doc_len - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("start 0 always present") != last {
        starts.push(last);
    }
    starts
}

/// Pooled NLL result of one sliding-window pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowScore {
    pub nll_total: f64,
    pub scored_tokens: usize,
}

impl WindowScore {
    pub fn perplexity(&self) -> f64 {
        (self.nll_total / self.scored_tokens as f64).exp()
    }
}

/// Sliding-window perplexity: the first window scores every position except
/// the first; each later window scores only the positions no earlier window
/// reached. Every target position is scored exactly once.
pub fn sliding_window_ppl(
    ckpt: &ModelCheckpoint,
    doc: &[Token],
    context_len: usize,
    rf: Option<&RescaleFactors>,
    stride: usize,
) -> Result<WindowScore, EvalError> {
    if stride == 0 {
        return Err(EvalError::BadStride);
    }
    if context_len < 2 {
        return Err(EvalError::DocTooShort {
            doc_len: doc.len(),
            window: context_len,
        });
    }
    if doc.len() < context_len {
        return Err(EvalError::DocTooShort {
            doc_len: doc.len(),
            window: context_len,
        });
    }
    let starts = window_starts(doc.len(), context_len, stride);
    let mut nll_total = 0.0f64;
    let mut scored_tokens = 0usize;
    let mut scored_until = 1usize; // target positions below this are done
    for &s in &starts {
        let window = &doc[s..s + context_len];
        let first_target = scored_until.max(s + 1);
        let window_end = s + context_len;
        if first_target >= window_end {
            continue;
        }
        // Local target range within this window.
        let lo = first_target - s;
        let nll = compute_loss_window(&ckpt.config, &ckpt.params, window, rf, lo)?;
        nll_total += nll;
        scored_tokens += context_len - lo;
        scored_until = window_end;
    }
    Ok(WindowScore {
        nll_total,
        scored_tokens,
    })
}

/// One row of a perplexity sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PplRow {
    pub context_len: usize,
    pub perplexity: f64,
    pub docs: usize,
    pub scored_tokens: usize,
}

/// Perplexity per requested context length, ascending.
#[derive(Debug, Clone, Default)]
pub struct PplReport {
    pub rows: Vec<PplRow>,
}

impl PplReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("context_len,perplexity,docs,scored_tokens\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.context_len, r.perplexity, r.docs, r.scored_tokens
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>12} {:>14} {:>6} {:>14}\n",
            "context_len", "perplexity", "docs", "scored_tokens"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:>12} {:>14.4} {:>6} {:>14}\n",
                r.context_len, r.perplexity, r.docs, r.scored_tokens
            ));
        }
        out
    }

    /// Parse a report back from its own CSV form.
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "context_len,perplexity,docs,scored_tokens" {
                    return Err(format!("unexpected header {line:?}"));
                }
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(format!("bad row {line:?}"));
            }
            rows.push(PplRow {
                context_len: parts[0].parse().map_err(|e| format!("{e}"))?,
                perplexity: parts[1].parse().map_err(|e| format!("{e}"))?,
                docs: parts[2].parse().map_err(|e| format!("{e}"))?,
                scored_tokens: parts[3].parse().map_err(|e| format!("{e}"))?,
            });
        }
        Ok(Self { rows })
    }
}

/// Tokens scored per document in a sweep, as a multiple of the window; a
/// desk-scale cap so very long documents do not dominate wall clock.
pub const SWEEP_DOC_SPAN: f64 = 1.5;

/// Sweep perplexity across context lengths, choosing factors per length from
/// the bundle. Documents are sampled fresh per length (they must be at least
/// that long) and truncated to [`SWEEP_DOC_SPAN`] windows; per-document
/// scores run concurrently and merge in document order.
#[allow(clippy::too_many_arguments)]
pub fn ppl_sweep(
    ckpt: &ModelCheckpoint,
    corpus: &Corpus,
    context_lens: &[usize],
    bundle: &FactorBundle,
    split: Split,
    k_docs: usize,
    stride_rule: StrideRule,
    seed: u64,
) -> Result<PplReport, EvalError> {
    let mut lens: Vec<usize> = context_lens.to_vec();
    lens.sort_unstable();
    lens.dedup();
    let mut rows = Vec::with_capacity(lens.len());
    for (i, &len) in lens.iter().enumerate() {
        let at_len = |source: EvalError| EvalError::AtLength {
            context_len: len,
            source: Box::new(source),
        };
        let rf = bundle.select(len);
        let docs = corpus
            .sample_eval_docs(split, k_docs, len, seed.wrapping_add(i as u64))
            .map_err(|e| at_len(EvalError::Data(e)))?;
        let stride = stride_rule.stride_for(len);
        let span = ((len as f64 * SWEEP_DOC_SPAN) as usize).max(len);
        let scores: Vec<Result<WindowScore, EvalError>> = docs
            .par_iter()
            .map(|doc| {
                let doc = &doc[..doc.len().min(span)];
                sliding_window_ppl(ckpt, doc, len, Some(rf), stride)
            })
            .collect();
        let mut nll = 0.0f64;
        let mut scored = 0usize;
        for s in scores {
            let s = s.map_err(at_len)?;
            nll += s.nll_total;
            scored += s.scored_tokens;
        }
        rows.push(PplRow {
            context_len: len,
            perplexity: (nll / scored as f64).exp(),
            docs: docs.len(),
            scored_tokens: scored,
        });
    }
    Ok(PplReport { rows })
}

// Passkey prompt template.
const PREAMBLE: &str = "There is an important info hidden inside a lot of irrelevant text. \
Find it and memorize them. I will quiz you about the important information there.";
const FILLER: &str =
    "The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again.";
const QUESTION: &str = "What is the pass key? The pass key is";

fn key_block(key: &str) -> String {
    format!("The pass key is {key}. Remember it. {key} is the pass key.")
}

fn check_key(key: &str) -> Result<(), EvalError> {
    if key.len() != 5 || !key.bytes().all(|b| b.is_ascii_digit()) {
        return Err(EvalError::BadKey {
            key: key.to_string(),
        });
    }
    Ok(())
}

/// Render the passkey document: preamble, `x` filler repeats, the key
/// sentences, `y` filler repeats, and the final question prefix. Filler
/// repeats join with single spaces and segments with single newlines.
/// Returns the byte-level tokens and the token index where the key block
/// starts.
pub fn make_passkey_doc(x: usize, y: usize, key: &str) -> Result<(Vec<Token>, usize), EvalError> {
    check_key(key)?;
    let mut segments: Vec<String> = vec![PREAMBLE.to_string()];
    if x > 0 {
        segments.push(vec![FILLER; x].join(" "));
    }
    let key_position_segment = segments.iter().map(|s| s.len() + 1).sum::<usize>();
    segments.push(key_block(key));
    if y > 0 {
        segments.push(vec![FILLER; y].join(" "));
    }
    segments.push(QUESTION.to_string());
    let text = segments.join("\n");
    Ok((tokenize(text.as_bytes()), key_position_segment))
}

/// Anything that can continue a token prompt; the trial harness treats it as
/// a black box so mock models can exercise the scoring logic.
pub trait Generator: Sync {
    /// Returns only the newly generated tokens.
    fn generate(&self, prompt: &[Token], max_new: usize) -> Result<Vec<Token>, String>;
}

/// The real model behind a factor bundle: factors are selected by the full
/// sequence length the trial will reach.
pub struct CheckpointGenerator<'a> {
    pub ckpt: &'a ModelCheckpoint,
    pub bundle: &'a FactorBundle,
}

impl Generator for CheckpointGenerator<'_> {
    fn generate(&self, prompt: &[Token], max_new: usize) -> Result<Vec<Token>, String> {
        let rf = self.bundle.select(prompt.len() + max_new);
        let full = generate_greedy(self.ckpt, prompt, Some(rf), max_new)
            .map_err(|e| e.to_string())?;
        Ok(full[prompt.len()..].to_vec())
    }
}

/// Tokens generated per trial: five digits plus slack for stray bytes.
pub const PASSKEY_MAX_NEW: usize = 12;

/// One placement solved for a target context length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub x: usize,
    pub y: usize,
    pub key_position: usize,
    pub prompt_len: usize,
}

/// Choose filler repeat counts so the prompt plus generation budget fits the
/// context length, with the key's position uniform over the feasible range.
/// Lengths are matched to within one filler block.
pub fn sample_placement(
    context_len: usize,
    max_new: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Placement, EvalError> {
    let (base_tokens, _) = make_passkey_doc(0, 0, "00000").expect("template renders");
    let (one_tokens, _) = make_passkey_doc(1, 0, "00000").expect("template renders");
    let block = one_tokens.len() - base_tokens.len();
    let budget = context_len.saturating_sub(max_new);
    if budget < base_tokens.len() {
        return Err(EvalError::ContextTooSmall {
            context_len,
            max_new,
        });
    }
    let total = (budget - base_tokens.len()) / block;
    let x = rng.gen_range(0..=total);
    let y = total - x;
    let (tokens, key_position) = make_passkey_doc(x, y, "00000").expect("template renders");
    Ok(Placement {
        x,
        y,
        key_position,
        prompt_len: tokens.len(),
    })
}

/// Outcome of a single retrieval trial.
#[derive(Debug, Clone, PartialEq)]
pub struct PasskeyTrial {
    pub context_len: usize,
    pub key: String,
    pub key_position: usize,
    pub retrieved: String,
    pub success: bool,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PasskeyRow {
    pub context_len: usize,
    pub accuracy: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PasskeyReport {
    pub rows: Vec<PasskeyRow>,
    pub trials: Vec<PasskeyTrial>,
}

impl PasskeyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("context_len,accuracy,iterations\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.context_len, r.accuracy, r.iterations));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>12} {:>10} {:>10}\n",
            "context_len", "accuracy", "iterations"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:>12} {:>10.2} {:>10}\n",
                r.context_len, r.accuracy, r.iterations
            ));
        }
        out
    }

    /// Parse accuracy rows back from CSV (trial detail is not persisted).
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "context_len,accuracy,iterations" {
                    return Err(format!("unexpected header {line:?}"));
                }
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(format!("bad row {line:?}"));
            }
            rows.push(PasskeyRow {
                context_len: parts[0].parse().map_err(|e| format!("{e}"))?,
                accuracy: parts[1].parse().map_err(|e| format!("{e}"))?,
                iterations: parts[2].parse().map_err(|e| format!("{e}"))?,
            });
        }
        Ok(Self {
            rows,
            trials: Vec::new(),
        })
    }
}

/// First run of five or more consecutive digit bytes; the first five digits
/// of that run are the retrieved key.
pub fn extract_passkey(bytes: &[u8]) -> Option<String> {
    let mut run_start = None;
    let mut i = 0;
    while i <= bytes.len() {
        let digit = i < bytes.len() && bytes[i].is_ascii_digit();
        match (digit, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                if i - s >= 5 {
                    return Some(String::from_utf8_lossy(&bytes[s..s + 5]).into_owned());
                }
                run_start = None;
            }
            _ => {}
        }
        i += 1;
    }
    None
}

/// Passkey retrieval at each context length: random 5-digit key, uniform
/// placement, greedy generation, exact string comparison. Generation
/// failures mark the trial failed but do not abort the run.
pub fn passkey_eval(
    generator: &dyn Generator,
    context_lens: &[usize],
    iterations: usize,
    seed: u64,
) -> Result<PasskeyReport, EvalError> {
    let mut report = PasskeyReport::default();
    for &context_len in context_lens {
        let mut successes = 0usize;
        for iter in 0..iterations {
            let mut rng = ChaCha12Rng::seed_from_u64(
                seed ^ (context_len as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    ^ (iter as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9),
            );
            let placement = sample_placement(context_len, PASSKEY_MAX_NEW, &mut rng)
                .map_err(|source| EvalError::AtLength {
                    context_len,
                    source: Box::new(source),
                })?;
            let key = format!("{:05}", rng.gen_range(0..100000u32));
            let (prompt, key_position) = make_passkey_doc(placement.x, placement.y, &key)?;
            let trial = match generator.generate(&prompt, PASSKEY_MAX_NEW) {
                Ok(new_tokens) => {
                    let bytes = crate::corpus::detokenize(&new_tokens);
                    let retrieved = extract_passkey(&bytes).unwrap_or_default();
                    let success = retrieved == key;
                    PasskeyTrial {
                        context_len,
                        key,
                        key_position,
                        retrieved,
                        success,
                        diagnostic: None,
                    }
                }
                Err(msg) => PasskeyTrial {
                    context_len,
                    key,
                    key_position,
                    retrieved: String::new(),
                    success: false,
                    diagnostic: Some(msg),
                },
            };
            if trial.success {
                successes += 1;
            }
            report.trials.push(trial);
        }
        report.rows.push(PasskeyRow {
            context_len,
            accuracy: successes as f64 / iterations.max(1) as f64,
            iterations,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::RotaryConfig;
    use crate::tinyformer::{init_model, ModelConfig, Params};

    fn tiny_ckpt(seed: u64) -> ModelCheckpoint {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            vocab_size: 258,
            trained_len: 32,
            tied_embeddings: true,
            rotary: RotaryConfig::with_default_base(8, 32).unwrap(),
        };
        init_model(&cfg, seed).unwrap()
    }

    fn doc(n: usize) -> Vec<Token> {
        (0..n).map(|i| ((i * 37 + 11) % 91 + 32) as Token).collect()
    }

    /// Brute-force oracle: every target position is rescored independently
    /// with its maximal left context among the allowed window starts.
    fn brute_force_ppl(
        ckpt: &ModelCheckpoint,
        doc: &[Token],
        window: usize,
        rf: Option<&RescaleFactors>,
        stride: usize,
    ) -> (f64, usize) {
        let starts = window_starts(doc.len(), window, stride);
        let mut nll = 0.0f64;
        let mut scored = 0usize;
        for t in 1..doc.len() {
            // Maximal context: smallest allowed start with t inside the
            // window. Targets no window reaches (block boundaries when the
            // stride equals the window) are unscorable and skipped.
            let Some(&s) = starts.iter().find(|&&s| s + 1 <= t && t < s + window) else {
                continue;
            };
            let win = &doc[s..s + window];
            let local = t - s;
            let logits = crate::tinyformer::forward(ckpt, win, rf).unwrap();
            let row = logits.row(local - 1);
            let row64: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let max = row64.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row64.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - row64[win[local] as usize];
            scored += 1;
        }
        (nll, scored)
    }

    #[test]
    fn sliding_window_matches_brute_force_oracle() {
        let ckpt = tiny_ckpt(5);
        let doc = doc(16);
        let got = sliding_window_ppl(&ckpt, &doc, 8, None, 2).unwrap();
        let (nll, scored) = brute_force_ppl(&ckpt, &doc, 8, None, 2);
        assert_eq!(got.scored_tokens, scored);
        let oracle_ppl = (nll / scored as f64).exp();
        assert!(
            (got.perplexity() - oracle_ppl).abs() <= 1e-9 * oracle_ppl,
            "{} vs {}",
            got.perplexity(),
            oracle_ppl
        );
    }

    #[test]
    fn sliding_window_odd_stride_and_clamp() {
        // doc length chosen so the final window is clamped.
        let ckpt = tiny_ckpt(6);
        let doc = doc(19);
        for stride in [1usize, 2, 3, 5, 8] {
            let got = sliding_window_ppl(&ckpt, &doc, 8, None, stride).unwrap();
            let (nll, scored) = brute_force_ppl(&ckpt, &doc, 8, None, stride);
            assert_eq!(got.scored_tokens, scored, "stride {stride}");
            if stride < 8 {
                // Strides below the window leave no gaps.
                assert_eq!(got.scored_tokens, doc.len() - 1);
            }
            let want = (nll / scored as f64).exp();
            assert!((got.perplexity() - want).abs() <= 1e-9 * want, "stride {stride}");
        }
    }

    #[test]
    fn degenerate_stride_equals_disjoint_blocks() {
        let ckpt = tiny_ckpt(7);
        let doc = doc(24);
        let got = sliding_window_ppl(&ckpt, &doc, 8, None, 8).unwrap();
        // Disjoint blocks [0..8), [8..16), [16..24): each scores its own 7
        // internal targets; block-boundary tokens have no context.
        assert_eq!(got.scored_tokens, 21);
        let mut nll = 0.0f64;
        for block in doc.chunks_exact(8) {
            let ppl = crate::tinyformer::perplexity(&ckpt, block, None).unwrap();
            nll += ppl.ln() * 7.0;
        }
        let want = (nll / 21.0).exp();
        assert!((got.perplexity() - want).abs() < 1e-9 * want);
    }

    #[test]
    fn exact_length_doc_equals_plain_perplexity() {
        let ckpt = tiny_ckpt(8);
        let doc = doc(8);
        let got = sliding_window_ppl(&ckpt, &doc, 8, None, 2).unwrap();
        let plain = crate::tinyformer::perplexity(&ckpt, &doc, None).unwrap();
        assert!((got.perplexity() - plain).abs() < 1e-9 * plain);
    }

    #[test]
    fn short_doc_is_an_error() {
        let ckpt = tiny_ckpt(9);
        assert!(matches!(
            sliding_window_ppl(&ckpt, &doc(5), 8, None, 2),
            Err(EvalError::DocTooShort { doc_len: 5, window: 8 })
        ));
    }

    #[test]
    fn uniform_model_sweep_rows_equal_vocab_size() {
        let cfg = tiny_ckpt(0).config;
        let ckpt = ModelCheckpoint {
            params: Params::zeros(&cfg),
            config: cfg,
            train_steps: 0,
            rescale_used: None,
            rng_seed: 0,
        };
        let docs: Vec<Vec<Token>> = (0..4).map(|_| doc(80)).collect();
        let corpus = Corpus::from_documents(docs, (0.0, 1.0, 0.0), 1).unwrap();
        let bundle = FactorBundle::single(RescaleFactors::identity(
            &ckpt.config.rotary,
            64,
        ));
        let report = ppl_sweep(
            &ckpt,
            &corpus,
            &[16, 32, 64],
            &bundle,
            Split::Val,
            2,
            StrideRule::DESK,
            3,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 3);
        for w in report.rows.windows(2) {
            assert!(w[0].context_len < w[1].context_len);
        }
        for row in &report.rows {
            assert!((row.perplexity - 258.0).abs() < 1e-6);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("context_len,perplexity,docs,scored_tokens\n"));
    }

    #[test]
    fn passkey_doc_template() {
        let (tokens, pos) = make_passkey_doc(0, 0, "17865").unwrap();
        let text = String::from_utf8(crate::corpus::detokenize(&tokens)).unwrap();
        assert!(text.contains("The pass key is 17865. Remember it. 17865 is the pass key."));
        assert!(text.ends_with("What is the pass key? The pass key is"));
        assert_eq!(text.matches("17865").count(), 2);
        assert!(text[pos..].starts_with("The pass key is 17865."));

        let (t1, _) = make_passkey_doc(1, 0, "17865").unwrap();
        let (t2, _) = make_passkey_doc(2, 0, "17865").unwrap();
        let (t3, _) = make_passkey_doc(2, 1, "17865").unwrap();
        assert!(t1.len() > tokens.len());
        assert!(t2.len() > t1.len());
        assert!(t3.len() > t2.len());

        assert!(matches!(
            make_passkey_doc(0, 0, "123"),
            Err(EvalError::BadKey { .. })
        ));
        assert!(matches!(
            make_passkey_doc(0, 0, "12a45"),
            Err(EvalError::BadKey { .. })
        ));
    }

    #[test]
    fn digit_run_extraction() {
        assert_eq!(extract_passkey(b" 17865."), Some("17865".into()));
        assert_eq!(extract_passkey(b"ab 123 456789xy"), Some("45678".into()));
        assert_eq!(extract_passkey(b"1234"), None);
        assert_eq!(extract_passkey(b"no digits"), None);
        assert_eq!(extract_passkey(b"98765"), Some("98765".into()));
    }

    /// Mock that finds the key in its prompt and echoes it back.
    struct EchoModel;
    impl Generator for EchoModel {
        fn generate(&self, prompt: &[Token], _max_new: usize) -> Result<Vec<Token>, String> {
            let bytes = crate::corpus::detokenize(prompt);
            let key = extract_passkey(&bytes).ok_or("no key in prompt")?;
            Ok(tokenize(format!(" {key}.").as_bytes()))
        }
    }

    struct MumbleModel;
    impl Generator for MumbleModel {
        fn generate(&self, _prompt: &[Token], max_new: usize) -> Result<Vec<Token>, String> {
            Ok(tokenize(&vec![b'x'; max_new]))
        }
    }

    #[test]
    fn echo_model_scores_perfect_accuracy() {
        let report = passkey_eval(&EchoModel, &[512, 1024], 10, 77).unwrap();
        for row in &report.rows {
            assert_eq!(row.accuracy, 1.0, "length {}", row.context_len);
            assert_eq!(row.iterations, 10);
        }
        assert_eq!(report.trials.len(), 20);
        for trial in &report.trials {
            assert!(trial.success);
            assert_eq!(trial.retrieved, trial.key);
        }
    }

    #[test]
    fn non_digit_model_scores_zero() {
        let report = passkey_eval(&MumbleModel, &[512], 10, 78).unwrap();
        assert_eq!(report.rows[0].accuracy, 0.0);
        assert!(report.trials.iter().all(|t| !t.success));
        let csv = report.to_csv();
        assert!(csv.starts_with("context_len,accuracy,iterations\n"));
        assert!(csv.contains("512,0,10"));
    }

    #[test]
    fn placement_positions_are_roughly_uniform() {
        let context_len = 4096usize;
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let (base, _) = make_passkey_doc(0, 0, "00000").unwrap();
        let template_len = base.len();
        let range = (context_len - template_len) as f64;
        let mut decile_counts = [0usize; 10];
        let n = 1000;
        for _ in 0..n {
            let p = sample_placement(context_len, PASSKEY_MAX_NEW, &mut rng).unwrap();
            assert!(p.prompt_len + PASSKEY_MAX_NEW <= context_len);
            let decile = ((p.key_position as f64 / range) * 10.0).min(9.0) as usize;
            decile_counts[decile] += 1;
        }
        for (d, &count) in decile_counts.iter().enumerate() {
            assert!(
                count * 20 >= n,
                "decile {d} got {count}/{n} placements (< 5%)"
            );
        }
    }

    #[test]
    fn generation_failure_marks_trial_failed() {
        struct Broken;
        impl Generator for Broken {
            fn generate(&self, _p: &[Token], _m: usize) -> Result<Vec<Token>, String> {
                Err("context overflow".into())
            }
        }
        let report = passkey_eval(&Broken, &[512], 3, 5).unwrap();
        assert_eq!(report.rows[0].accuracy, 0.0);
        assert!(report
            .trials
            .iter()
            .all(|t| t.diagnostic.as_deref() == Some("context overflow")));
    }
}
