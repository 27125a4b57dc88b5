//! Rotary position embedding math: original angles, piecewise rescaled
//! angles, pairwise rotation, and the linear / ntk / yarn baseline
//! factor generators.
//!
//! Positions are real-valued (`f64`) so fractional-position identities can
//! be expressed directly; token indices convert losslessly. All angle math
//! runs in 64-bit floats regardless of what precision the model activations
//! use downstream.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default rotary base frequency.
pub const DEFAULT_BASE: f64 = 10000.0;

/// Hard bound multiplier on rescale factors relative to the extension ratio.
pub const LAMBDA_BOUND_MULTIPLIER: f64 = 1.25;

#[derive(Debug, Error)]
pub enum RopeError {
    #[error("head_dim must be even and >= 2, got {0}")]
    BadHeadDim(usize),
    #[error("rotary base must be > 1, got {0}")]
    BadBase(f64),
    #[error("original context length must be >= 1")]
    BadOriginalLen,
    #[error("target length must be >= 1")]
    BadTargetLen,
    #[error("start_token {start_token} must be < target_len {target_len}")]
    BadStartToken { start_token: usize, target_len: usize },
    #[error("rescale factors must be non-empty")]
    EmptyFactors,
    #[error("rescale factor at index {0} must be finite and > 0, got {1}")]
    BadFactor(usize, f64),
    #[error("extension ratio must be >= 1, got {0}")]
    InvalidRatio(f64),
    #[error("ntk factors require head_dim >= 4, got {0}")]
    NtkHeadDim(usize),
    #[error("yarn ramp requires 0 < low < high, got low={0} high={1}")]
    BadRamp(f64, f64),
    #[error("input vector has length {got}, expected head_dim {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed factor file {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

/// Rotary geometry of one attention head: pair count, base frequency, and
/// the context length the owning model was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotaryConfig {
    head_dim: usize,
    base: f64,
    original_len: usize,
}

impl RotaryConfig {
    pub fn new(head_dim: usize, base: f64, original_len: usize) -> Result<Self, RopeError> {
        if head_dim < 2 || head_dim % 2 != 0 {
            return Err(RopeError::BadHeadDim(head_dim));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(RopeError::BadBase(base));
        }
        if original_len == 0 {
            return Err(RopeError::BadOriginalLen);
        }
        Ok(Self {
            head_dim,
            base,
            original_len,
        })
    }

    /// Config with the conventional base of 10000.
    pub fn with_default_base(head_dim: usize, original_len: usize) -> Result<Self, RopeError> {
        Self::new(head_dim, DEFAULT_BASE, original_len)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }

    /// Number of rotary coordinate pairs, d/2.
    pub fn num_pairs(&self) -> usize {
        self.head_dim / 2
    }

    /// Per-pair frequency ratio beta = base^(2/d), always > 1.
    pub fn beta(&self) -> f64 {
        self.base.powf(2.0 / self.head_dim as f64)
    }

    /// Rotation frequency of pair `i`: base^(-2i/d).
    pub fn frequency(&self, i: usize) -> f64 {
        self.base.powf(-2.0 * i as f64 / self.head_dim as f64)
    }

    /// Re-validate after deserialization.
    pub fn validated(self) -> Result<Self, RopeError> {
        Self::new(self.head_dim, self.base, self.original_len)
    }
}

/// Per-dimension rescale divisors plus the start-token threshold below which
/// positions keep their original angles. One of these is the genome the
/// evolutionary search optimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaleFactors {
    factors: Vec<f64>,
    start_token: usize,
    target_len: usize,
    extension_ratio: f64,
}

impl RescaleFactors {
    /// Build from raw parts. Factors must be finite and positive; bound and
    /// monotonicity checks are deferred to [`validate_factors`] so that
    /// out-of-range candidates can still be constructed and reported on.
    pub fn new(
        factors: Vec<f64>,
        start_token: usize,
        target_len: usize,
        original_len: usize,
    ) -> Result<Self, RopeError> {
        if factors.is_empty() {
            return Err(RopeError::EmptyFactors);
        }
        for (i, &f) in factors.iter().enumerate() {
            if !f.is_finite() || f <= 0.0 {
                return Err(RopeError::BadFactor(i, f));
            }
        }
        if target_len == 0 {
            return Err(RopeError::BadTargetLen);
        }
        if original_len == 0 {
            return Err(RopeError::BadOriginalLen);
        }
        if start_token >= target_len {
            return Err(RopeError::BadStartToken {
                start_token,
                target_len,
            });
        }
        Ok(Self {
            factors,
            start_token,
            target_len,
            extension_ratio: target_len as f64 / original_len as f64,
        })
    }

    /// All-ones factors: pure extrapolation out to `target_len`.
    pub fn identity(cfg: &RotaryConfig, target_len: usize) -> Self {
        Self::new(
            vec![1.0; cfg.num_pairs()],
            0,
            target_len,
            cfg.original_len,
        )
        .expect("identity factors are always valid")
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn start_token(&self) -> usize {
        self.start_token
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }

    pub fn extension_ratio(&self) -> f64 {
        self.extension_ratio
    }

    /// Upper bound for every factor: 1.25 times the extension ratio.
    pub fn lambda_upper_bound(&self) -> f64 {
        LAMBDA_BOUND_MULTIPLIER * self.extension_ratio
    }

    /// Copy with a different start-token threshold.
    pub fn with_start_token(&self, start_token: usize) -> Result<Self, RopeError> {
        if start_token >= self.target_len {
            return Err(RopeError::BadStartToken {
                start_token,
                target_len: self.target_len,
            });
        }
        let mut out = self.clone();
        out.start_token = start_token;
        Ok(out)
    }

    /// Re-validate after deserialization, reconstructing the cached ratio
    /// from the supplied original length.
    pub fn validated(self, original_len: usize) -> Result<Self, RopeError> {
        Self::new(self.factors, self.start_token, self.target_len, original_len)
    }
}

/// First violated constraint in a factor vector.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FactorViolation {
    #[error("factor count {got} does not match head_dim/2 = {expected}")]
    Length { expected: usize, got: usize },
    #[error("factor {value} at index {index} outside [{min}, {max}]")]
    Bounds {
        index: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("factors decrease at index {index}")]
    Monotonicity { index: usize },
}

/// Check length, the [1.0, 1.25*s] bounds, and optionally the
/// non-decreasing constraint. Reports the first violated index.
pub fn validate_factors(
    cfg: &RotaryConfig,
    rf: &RescaleFactors,
    require_monotone: bool,
) -> Result<(), FactorViolation> {
    let expected = cfg.num_pairs();
    if rf.factors.len() != expected {
        return Err(FactorViolation::Length {
            expected,
            got: rf.factors.len(),
        });
    }
    let max = rf.lambda_upper_bound();
    for (i, &f) in rf.factors.iter().enumerate() {
        if f < 1.0 || f > max {
            return Err(FactorViolation::Bounds {
                index: i,
                value: f,
                min: 1.0,
                max,
            });
        }
    }
    if require_monotone {
        for i in 1..rf.factors.len() {
            if rf.factors[i] < rf.factors[i - 1] {
                return Err(FactorViolation::Monotonicity { index: i });
            }
        }
    }
    Ok(())
}

/// Original rotary angles at position `n`: angle_i = n * base^(-2i/d).
pub fn rope_angles(cfg: &RotaryConfig, n: f64) -> Vec<f64> {
    (0..cfg.num_pairs()).map(|i| n * cfg.frequency(i)).collect()
}

/// Piecewise rescaled angles: positions below the start-token threshold keep
/// the original angles; at and above it each angle is divided by its factor.
pub fn rescaled_angles(cfg: &RotaryConfig, rf: &RescaleFactors, n: f64) -> Vec<f64> {
    let original = rope_angles(cfg, n);
    if n < rf.start_token as f64 {
        return original;
    }
    original
        .iter()
        .zip(rf.factors.iter())
        .map(|(&angle, &lambda)| angle / lambda)
        .collect()
}

/// Rotate each coordinate pair (v[2i], v[2i+1]) by the (rescaled) angle of
/// pair `i`. Pure rotation, so per-pair Euclidean norms are preserved.
pub fn apply_rope(
    cfg: &RotaryConfig,
    rf: Option<&RescaleFactors>,
    v: &[f64],
    n: f64,
) -> Result<Vec<f64>, RopeError> {
    if v.len() != cfg.head_dim {
        return Err(RopeError::DimMismatch {
            expected: cfg.head_dim,
            got: v.len(),
        });
    }
    let angles = match rf {
        Some(rf) => rescaled_angles(cfg, rf, n),
        None => rope_angles(cfg, n),
    };
    let mut out = Vec::with_capacity(v.len());
    for (i, &angle) in angles.iter().enumerate() {
        let (sin, cos) = angle.sin_cos();
        let a = v[2 * i];
        let b = v[2 * i + 1];
        out.push(a * cos - b * sin);
        out.push(a * sin + b * cos);
    }
    Ok(out)
}

fn check_ratio(s: f64) -> Result<(), RopeError> {
    if !(s >= 1.0) || !s.is_finite() {
        return Err(RopeError::InvalidRatio(s));
    }
    Ok(())
}

fn target_for_ratio(cfg: &RotaryConfig, s: f64) -> usize {
    (s * cfg.original_len as f64).round().max(1.0) as usize
}

/// Uniform linear interpolation: every factor equals the extension ratio.
pub fn pi_factors(cfg: &RotaryConfig, s: f64) -> Result<RescaleFactors, RopeError> {
    check_ratio(s)?;
    RescaleFactors::new(
        vec![s; cfg.num_pairs()],
        0,
        target_for_ratio(cfg, s),
        cfg.original_len,
    )
}

/// Frequency-dependent interpolation: factor_i = s^(2i/(d-2)), so the
/// highest-frequency pair extrapolates (factor 1) and the lowest-frequency
/// pair interpolates fully (factor s). Equivalent to multiplying the base
/// by s^(d/(d-2)).
pub fn ntk_factors(cfg: &RotaryConfig, s: f64) -> Result<RescaleFactors, RopeError> {
    check_ratio(s)?;
    if cfg.head_dim < 4 {
        return Err(RopeError::NtkHeadDim(cfg.head_dim));
    }
    let d = cfg.head_dim as f64;
    let factors = (0..cfg.num_pairs())
        .map(|i| s.powf(2.0 * i as f64 / (d - 2.0)))
        .collect();
    RescaleFactors::new(factors, 0, target_for_ratio(cfg, s), cfg.original_len)
}

/// Three-regime blend keyed on how many full rotations a pair completes
/// within the trained context: fast-rotating pairs extrapolate, slow pairs
/// interpolate linearly, and the ramp in between mixes the two.
pub fn yarn_factors(
    cfg: &RotaryConfig,
    s: f64,
    ramp_low: f64,
    ramp_high: f64,
) -> Result<RescaleFactors, RopeError> {
    check_ratio(s)?;
    if !(ramp_low > 0.0 && ramp_low < ramp_high) {
        return Err(RopeError::BadRamp(ramp_low, ramp_high));
    }
    let beta = cfg.beta();
    let factors = (0..cfg.num_pairs())
        .map(|i| {
            let wavelength = 2.0 * std::f64::consts::PI * beta.powi(i as i32);
            let rotations = cfg.original_len as f64 / wavelength;
            let gamma = ((rotations - ramp_low) / (ramp_high - ramp_low)).clamp(0.0, 1.0);
            1.0 / ((1.0 - gamma) / s + gamma)
        })
        .collect();
    RescaleFactors::new(factors, 0, target_for_ratio(cfg, s), cfg.original_len)
}

/// Default yarn ramp endpoints (rotation counts bounding the blend region).
pub const YARN_RAMP_LOW: f64 = 1.0;
pub const YARN_RAMP_HIGH: f64 = 32.0;

/// Base scheme for length-dependent factor selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DynamicBase {
    Pi,
    Ntk,
}

/// Recompute baseline factors for the current sequence length: the effective
/// ratio is current_len/original_len, floored at 1 so sequences within the
/// trained window are untouched.
pub fn dynamic_factors(
    generator: DynamicBase,
    cfg: &RotaryConfig,
    current_len: usize,
) -> Result<RescaleFactors, RopeError> {
    let s = (current_len as f64 / cfg.original_len as f64).max(1.0);
    let rf = match generator {
        DynamicBase::Pi => pi_factors(cfg, s)?,
        DynamicBase::Ntk => ntk_factors(cfg, s)?,
    };
    Ok(rf)
}

/// On-disk factor representation; round-trips bit-exact through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorFile {
    pub head_dim: usize,
    pub base: f64,
    pub original_len: usize,
    pub target_len: usize,
    pub start_token: usize,
    pub factors: Vec<f64>,
}

impl FactorFile {
    pub fn from_parts(cfg: &RotaryConfig, rf: &RescaleFactors) -> Self {
        Self {
            head_dim: cfg.head_dim,
            base: cfg.base,
            original_len: cfg.original_len,
            target_len: rf.target_len,
            start_token: rf.start_token,
            factors: rf.factors.clone(),
        }
    }

    pub fn into_parts(self) -> Result<(RotaryConfig, RescaleFactors), RopeError> {
        let cfg = RotaryConfig::new(self.head_dim, self.base, self.original_len)?;
        let rf = RescaleFactors::new(
            self.factors,
            self.start_token,
            self.target_len,
            self.original_len,
        )?;
        Ok((cfg, rf))
    }

    pub fn save(&self, path: &Path) -> Result<(), RopeError> {
        let text = serde_json::to_string_pretty(self).expect("factor file serializes");
        std::fs::write(path, text + "\n").map_err(|source| RopeError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RopeError> {
        let text = std::fs::read_to_string(path).map_err(|source| RopeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| RopeError::Parse {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, base: f64, len: usize) -> RotaryConfig {
        RotaryConfig::new(d, base, len).unwrap()
    }

    /// Independent angle oracle going through beta = base^(2/d) instead of
    /// the direct base^(-2i/d) route the implementation uses.
    fn beta_route_angle(base: f64, d: usize, i: usize, n: f64) -> f64 {
        let beta = base.powf(2.0 / d as f64);
        n / beta.powi(i as i32)
    }

    #[test]
    fn rope_angles_zero_position() {
        let c = cfg(4, 10000.0, 128);
        assert_eq!(rope_angles(&c, 0.0), vec![0.0, 0.0]);
    }

    #[test]
    fn rope_angles_match_scalar_oracle() {
        let c = cfg(4, 10000.0, 128);
        let angles = rope_angles(&c, 2.0);
        assert!((angles[0] - 2.0).abs() < 1e-12);
        assert!((angles[1] - 0.02).abs() < 1e-12);

        let c8 = cfg(8, 10000.0, 128);
        let angles = rope_angles(&c8, 1.0);
        let expected = [1.0, 0.1, 0.01, 0.001];
        for (i, &e) in expected.iter().enumerate() {
            assert!(
                (angles[i] - e).abs() < 1e-12,
                "pair {i}: {} vs {e}",
                angles[i]
            );
            let oracle = beta_route_angle(10000.0, 8, i, 1.0);
            assert!((angles[i] - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn rescaled_identity_equals_original_bitwise() {
        let c = cfg(8, 10000.0, 16);
        let rf = RescaleFactors::identity(&c, 64);
        for n in 0..64 {
            assert_eq!(rescaled_angles(&c, &rf, n as f64), rope_angles(&c, n as f64));
        }
    }

    #[test]
    fn rescaled_below_threshold_uses_original() {
        let c = cfg(4, 10000.0, 128);
        let rf = RescaleFactors::new(vec![2.0, 2.0], 4, 256, 128).unwrap();
        let angles = rescaled_angles(&c, &rf, 2.0);
        assert_eq!(angles, rope_angles(&c, 2.0));
        assert!((angles[0] - 2.0).abs() < 1e-12);
        assert!((angles[1] - 0.02).abs() < 1e-12);
    }

    #[test]
    fn rescaled_divides_by_factors() {
        let c = cfg(4, 10000.0, 128);
        let rf = RescaleFactors::new(vec![2.0, 4.0], 0, 256, 128).unwrap();
        let angles = rescaled_angles(&c, &rf, 2.0);
        assert!((angles[0] - 1.0).abs() < 1e-12);
        assert!((angles[1] - 0.005).abs() < 1e-12);
    }

    #[test]
    fn apply_rope_zero_position_is_identity() {
        let c = cfg(4, 10000.0, 128);
        let v = vec![0.3, -1.2, 0.7, 2.5];
        assert_eq!(apply_rope(&c, None, &v, 0.0).unwrap(), v);
    }

    #[test]
    fn apply_rope_quarter_turn() {
        // d=2 has frequency 1, so position pi/2 rotates by exactly pi/2.
        let c = cfg(2, 10000.0, 128);
        let out = apply_rope(&c, None, &[1.0, 0.0], std::f64::consts::FRAC_PI_2).unwrap();
        assert!(out[0].abs() < 1e-12);
        assert!((out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn apply_rope_dim_mismatch() {
        let c = cfg(4, 10000.0, 128);
        assert!(matches!(
            apply_rope(&c, None, &[1.0, 2.0], 3.0),
            Err(RopeError::DimMismatch { expected: 4, got: 2 })
        ));
    }

    #[test]
    fn pi_factors_constant() {
        let c = cfg(32, 10000.0, 128);
        let rf = pi_factors(&c, 4.0).unwrap();
        assert_eq!(rf.factors().len(), 16);
        assert!(rf.factors().iter().all(|&f| f == 4.0));
        assert_eq!(rf.start_token(), 0);
        assert_eq!(rf.target_len(), 512);

        let id = pi_factors(&c, 1.0).unwrap();
        assert!(id.factors().iter().all(|&f| f == 1.0));
        assert!(matches!(pi_factors(&c, 0.5), Err(RopeError::InvalidRatio(_))));
    }

    #[test]
    fn pi_crowding_property() {
        // Under uniform factors s, the rescaled angle at n equals the
        // original angle at the fractional position n/s.
        let c = cfg(8, 10000.0, 128);
        let s = 4.0;
        let rf = pi_factors(&c, s).unwrap();
        for n in [1.0, 7.0, 100.0, 511.0] {
            let rescaled = rescaled_angles(&c, &rf, n);
            let shifted = rope_angles(&c, n / s);
            for (a, b) in rescaled.iter().zip(shifted.iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn ntk_factors_closed_form() {
        let c = cfg(8, 10000.0, 128);
        let rf = ntk_factors(&c, 4.0).unwrap();
        let expected = [1.0, 4.0_f64.powf(1.0 / 3.0), 4.0_f64.powf(2.0 / 3.0), 4.0];
        for (got, want) in rf.factors().iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!((rf.factors()[1] - 1.5874010519681994).abs() < 1e-12);
        assert!((rf.factors()[2] - 2.5198420997897464).abs() < 1e-12);

        let id = ntk_factors(&c, 1.0).unwrap();
        assert!(id.factors().iter().all(|&f| f == 1.0));
        assert!(validate_factors(&c, &rf, true).is_ok());
    }

    #[test]
    fn ntk_rejects_tiny_head_dim() {
        let c = cfg(2, 10000.0, 128);
        assert!(matches!(ntk_factors(&c, 2.0), Err(RopeError::NtkHeadDim(2))));
    }

    #[test]
    fn yarn_branch_values() {
        let c = cfg(32, 10000.0, 4096);
        let rf = yarn_factors(&c, 4.0, YARN_RAMP_LOW, YARN_RAMP_HIGH).unwrap();
        // Fast pairs (many rotations inside the trained window) extrapolate.
        assert!((rf.factors()[0] - 1.0).abs() < 1e-12);
        // Slow pairs interpolate fully.
        assert!((rf.factors().last().unwrap() - 4.0).abs() < 1e-9);
        assert!(validate_factors(&c, &rf, true).is_ok());

        // gamma = 0.5 blend at s = 4 gives 1/(0.125 + 0.5) = 1.6.
        let gamma = 0.5_f64;
        let s = 4.0;
        let blend = 1.0 / ((1.0 - gamma) / s + gamma);
        assert!((blend - 1.6).abs() < 1e-12);
    }

    #[test]
    fn yarn_gamma_midpoint_hits_blend_formula() {
        // Pick a config where some pair lands strictly inside the ramp and
        // verify the factor matches the hand-evaluated blend.
        let c = cfg(8, 10000.0, 512);
        let rf = yarn_factors(&c, 4.0, 1.0, 32.0).unwrap();
        let beta = c.beta();
        for (i, &f) in rf.factors().iter().enumerate() {
            let wavelength = 2.0 * std::f64::consts::PI * beta.powi(i as i32);
            let rotations = 512.0 / wavelength;
            let gamma = ((rotations - 1.0) / 31.0).clamp(0.0, 1.0);
            let want = 1.0 / ((1.0 - gamma) / 4.0 + gamma);
            assert!((f - want).abs() < 1e-12);
        }
    }

    #[test]
    fn dynamic_factors_by_current_len() {
        let c = cfg(8, 10000.0, 128);
        let rf = dynamic_factors(DynamicBase::Pi, &c, 64).unwrap();
        assert!(rf.factors().iter().all(|&f| f == 1.0));

        let rf = dynamic_factors(DynamicBase::Pi, &c, 256).unwrap();
        assert!(rf.factors().iter().all(|&f| f == 2.0));
        assert_eq!(rf.target_len(), 256);

        let rf = dynamic_factors(DynamicBase::Ntk, &c, 512).unwrap();
        let want = ntk_factors(&c, 4.0).unwrap();
        assert_eq!(rf.factors(), want.factors());
    }

    #[test]
    fn validate_reports_first_violation() {
        let c = cfg(4, 10000.0, 128);
        let ok = pi_factors(&c, 4.0).unwrap();
        assert!(validate_factors(&c, &ok, true).is_ok());

        let desc = RescaleFactors::new(vec![2.0, 1.5], 0, 512, 128).unwrap();
        assert_eq!(
            validate_factors(&c, &desc, true),
            Err(FactorViolation::Monotonicity { index: 1 })
        );
        // Without the flag the descent is allowed.
        assert!(validate_factors(&c, &desc, false).is_ok());

        let low = RescaleFactors::new(vec![0.5, 1.0], 0, 512, 128).unwrap();
        assert!(matches!(
            validate_factors(&c, &low, true),
            Err(FactorViolation::Bounds { index: 0, .. })
        ));

        let wrong_len = RescaleFactors::new(vec![1.0; 3], 0, 512, 128).unwrap();
        assert_eq!(
            validate_factors(&c, &wrong_len, false),
            Err(FactorViolation::Length { expected: 2, got: 3 })
        );
    }

    #[test]
    fn start_token_must_be_below_target() {
        assert!(matches!(
            RescaleFactors::new(vec![1.0], 256, 256, 128),
            Err(RopeError::BadStartToken { .. })
        ));
    }

    #[test]
    fn base_modification_equivalence() {
        // Dividing the angle by lambda equals computing the angle with the
        // per-pair frequency divided by lambda.
        let c = cfg(8, 10000.0, 128);
        let rf = RescaleFactors::new(vec![1.0, 2.0, 3.5, 8.0], 0, 1024, 128).unwrap();
        for n in [1.0, 17.0, 500.0, 1023.0] {
            let rescaled = rescaled_angles(&c, &rf, n);
            for i in 0..c.num_pairs() {
                let modified = n * (c.frequency(i) / rf.factors()[i]);
                let denom = modified.abs().max(1e-300);
                assert!((rescaled[i] - modified).abs() / denom < 1e-12);
            }
        }
    }

    #[test]
    fn factor_file_roundtrip() {
        let c = cfg(8, 10000.0, 128);
        let rf = ntk_factors(&c, 3.7).unwrap();
        let file = FactorFile::from_parts(&c, &rf);
        let json = serde_json::to_string(&file).unwrap();
        let back: FactorFile = serde_json::from_str(&json).unwrap();
        assert_eq!(file, back);
        let (c2, rf2) = back.into_parts().unwrap();
        assert_eq!(c, c2);
        assert_eq!(rf.factors(), rf2.factors());
        assert_eq!(rf.extension_ratio(), rf2.extension_ratio());
    }
}
