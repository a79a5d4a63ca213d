//! Positional encodings: none, learnable sinusoidal added at the encoder
//! input, and rotary rotations applied to queries/keys per head.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PosEncError {
    #[error("unknown positional encoding scheme '{0}' (expected nopos|sine|rotary)")]
    UnknownScheme(String),
    #[error("feature dimension {0} must be even")]
    OddDim(usize),
    #[error("rotary theta {0} outside the admitted range [1e4, 1e7]")]
    ThetaOutOfRange(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

pub const ROTARY_THETA_DEFAULT: f64 = 10_000.0;
/// Long-context preset for the base frequency.
pub const ROTARY_THETA_LONG: f64 = 1.5e6;
pub const ROTARY_THETA_MIN: f64 = 1e4;
pub const ROTARY_THETA_MAX: f64 = 1e7;

/// Rotary parameters for one head dimension. Plane j (1-based) of the
/// feature vector rotates by angle n * theta^(-2(j-1)/d) at position n.
#[derive(Debug, Clone)]
pub struct RotaryParams {
    pub theta: f64,
    pub d: usize,
    freqs: Vec<f64>,
}

impl RotaryParams {
    pub fn new(d: usize, theta: f64) -> Result<Self, PosEncError> {
        if d % 2 != 0 {
            return Err(PosEncError::OddDim(d));
        }
        if !(ROTARY_THETA_MIN..=ROTARY_THETA_MAX).contains(&theta) {
            return Err(PosEncError::ThetaOutOfRange(theta));
        }
        let half = d / 2;
        let freqs = (0..half)
            .map(|j| theta.powf(-2.0 * j as f64 / d as f64))
            .collect();
        Ok(RotaryParams { theta, d, freqs })
    }

    pub fn preset_long(d: usize) -> Result<Self, PosEncError> {
        Self::new(d, ROTARY_THETA_LONG)
    }

    #[inline]
    pub fn freq(&self, plane: usize) -> f64 {
        self.freqs[plane]
    }
}

/// Rotate each 2-plane of `x` by position-scaled angles, in place.
pub fn rotary_apply_inplace(x: &mut [f32], n: i64, params: &RotaryParams) {
    debug_assert_eq!(x.len(), params.d);
    for j in 0..params.d / 2 {
        let ang = n as f64 * params.freqs[j];
        let (s, c) = ang.sin_cos();
        let a = x[2 * j] as f64;
        let b = x[2 * j + 1] as f64;
        x[2 * j] = (a * c - b * s) as f32;
        x[2 * j + 1] = (a * s + b * c) as f32;
    }
}

pub fn rotary_apply(x: &[f32], n: i64, params: &RotaryParams) -> Result<Vec<f32>, PosEncError> {
    if x.len() != params.d {
        return Err(PosEncError::DimMismatch { expected: params.d, got: x.len() });
    }
    let mut out = x.to_vec();
    rotary_apply_inplace(&mut out, n, params);
    Ok(out)
}

/// Precomputed sin/cos table so long sequences rotate without re-evaluating
/// trig per element. Rotations are orthogonal, so the backward pass is the
/// same table applied with the angle negated.
#[derive(Debug, Clone)]
pub struct RotaryTable {
    pub d: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RotaryTable {
    pub fn new(params: &RotaryParams, max_pos: usize) -> Self {
        let half = params.d / 2;
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        for n in 0..max_pos {
            for j in 0..half {
                let ang = n as f64 * params.freqs[j];
                let (s, c) = ang.sin_cos();
                cos.push(c as f32);
                sin.push(s as f32);
            }
        }
        RotaryTable { d: params.d, cos, sin }
    }

    #[inline]
    pub fn rotate_row(&self, x: &mut [f32], n: usize, inverse: bool) {
        let half = self.d / 2;
        let base = n * half;
        for j in 0..half {
            let c = self.cos[base + j];
            let s = if inverse { -self.sin[base + j] } else { self.sin[base + j] };
            let a = x[2 * j];
            let b = x[2 * j + 1];
            x[2 * j] = a * c - b * s;
            x[2 * j + 1] = a * s + b * c;
        }
    }
}

/// Learnable per-frequency vector for the sinusoidal scheme.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinusoidalParams {
    pub w_r: Vec<f32>,
    pub d: usize,
}

impl SinusoidalParams {
    /// Initialized from the classic geometric frequency ladder, then trained.
    pub fn new(d: usize) -> Result<Self, PosEncError> {
        if d % 2 != 0 {
            return Err(PosEncError::OddDim(d));
        }
        let half = d / 2;
        let w_r = (0..half)
            .map(|j| (10_000.0f64.powf(-2.0 * j as f64 / d as f64)) as f32)
            .collect();
        Ok(SinusoidalParams { w_r, d })
    }
}

/// x + concat(sin(n*w_r), cos(n*w_r)) / sqrt(d)
pub fn sinusoidal_add(x: &[f32], n: i64, params: &SinusoidalParams) -> Result<Vec<f32>, PosEncError> {
    if x.len() != params.d {
        return Err(PosEncError::DimMismatch { expected: params.d, got: x.len() });
    }
    let half = params.d / 2;
    let inv_sqrt_d = 1.0 / (params.d as f64).sqrt();
    let mut out = x.to_vec();
    for j in 0..half {
        let ang = n as f64 * params.w_r[j] as f64;
        let (s, c) = ang.sin_cos();
        out[j] += (s * inv_sqrt_d) as f32;
        out[half + j] += (c * inv_sqrt_d) as f32;
    }
    Ok(out)
}

/// Gradient of the added component with respect to w_r, accumulated over one
/// frame. `dy` is the upstream gradient at that frame.
pub fn sinusoidal_backward_wr(dy: &[f32], n: i64, params: &SinusoidalParams, dw_r: &mut [f32]) {
    let half = params.d / 2;
    let inv_sqrt_d = 1.0 / (params.d as f64).sqrt();
    for j in 0..half {
        let ang = n as f64 * params.w_r[j] as f64;
        let (s, c) = ang.sin_cos();
        // d/dw of sin(n w)/sqrt(d) is n cos(n w)/sqrt(d); of cos is -n sin.
        let g = (dy[j] as f64) * (n as f64) * c * inv_sqrt_d
            - (dy[half + j] as f64) * (n as f64) * s * inv_sqrt_d;
        dw_r[j] += g as f32;
    }
}

/// Scheme selector used in model configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    NoPos,
    Sine,
    Rotary,
}

impl std::str::FromStr for SchemeKind {
    type Err = PosEncError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nopos" => Ok(SchemeKind::NoPos),
            "sine" => Ok(SchemeKind::Sine),
            "rotary" => Ok(SchemeKind::Rotary),
            other => Err(PosEncError::UnknownScheme(other.to_string())),
        }
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SchemeKind::NoPos => write!(f, "nopos"),
            SchemeKind::Sine => write!(f, "sine"),
            SchemeKind::Rotary => write!(f, "rotary"),
        }
    }
}

/// A constructed scheme handle. NoPos application is the identity.
pub enum Scheme {
    NoPos,
    Sine(SinusoidalParams),
    Rotary(RotaryParams),
}

pub fn make_scheme(name: &str, d: usize, theta: Option<f64>) -> Result<Scheme, PosEncError> {
    match name.parse::<SchemeKind>()? {
        SchemeKind::NoPos => Ok(Scheme::NoPos),
        SchemeKind::Sine => Ok(Scheme::Sine(SinusoidalParams::new(d)?)),
        SchemeKind::Rotary => Ok(Scheme::Rotary(RotaryParams::new(
            d,
            theta.unwrap_or(ROTARY_THETA_DEFAULT),
        )?)),
    }
}

impl Scheme {
    /// Apply the scheme to one frame. NoPos returns the input unchanged;
    /// rotary rotates (for q/k use), sine adds its wave.
    pub fn apply(&self, x: &[f32], n: i64) -> Result<Vec<f32>, PosEncError> {
        match self {
            Scheme::NoPos => Ok(x.to_vec()),
            Scheme::Sine(p) => sinusoidal_add(x, n, p),
            Scheme::Rotary(p) => rotary_apply(x, n, p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot_f64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sinusoidal_zero_position() {
        let p = SinusoidalParams::new(4).unwrap();
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y = sinusoidal_add(&x, 0, &p).unwrap();
        let inv = 1.0 / 2.0; // 1/sqrt(4)
        assert_eq!(y, vec![1.0, 2.0, 3.0 + inv, 4.0 + inv]);
    }

    #[test]
    fn sinusoidal_hand_value_d2() {
        let p = SinusoidalParams { w_r: vec![std::f32::consts::FRAC_PI_2], d: 2 };
        let y = sinusoidal_add(&[0.0, 0.0], 1, &p).unwrap();
        let inv = 1.0 / 2.0f64.sqrt();
        assert!((y[0] as f64 - inv).abs() < 1e-7);
        assert!((y[1] as f64).abs() < 1e-7);
        // added component norm is sqrt((sin^2 + cos^2)/d) = sqrt(1/2)
        let norm = ((y[0] as f64).powi(2) + (y[1] as f64).powi(2)).sqrt();
        assert!((norm - inv).abs() < 1e-7);
    }

    #[test]
    fn sinusoidal_is_pure_translation() {
        let p = SinusoidalParams::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x1: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x2: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d1: Vec<f32> = sinusoidal_add(&x1, 7, &p)
            .unwrap()
            .iter()
            .zip(&x1)
            .map(|(y, x)| y - x)
            .collect();
        let d2: Vec<f32> = sinusoidal_add(&x2, 7, &p)
            .unwrap()
            .iter()
            .zip(&x2)
            .map(|(y, x)| y - x)
            .collect();
        for (a, b) in d1.iter().zip(&d2) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn rotary_zero_position_is_identity() {
        let p = RotaryParams::new(6, 10_000.0).unwrap();
        let x = vec![0.5, -0.25, 1.0, 2.0, -3.0, 0.125];
        assert_eq!(rotary_apply(&x, 0, &p).unwrap(), x);
        assert_eq!(p.freq(0), 1.0); // theta_1 = theta^0
    }

    #[test]
    fn rotary_d2_is_plane_rotation() {
        let p = RotaryParams::new(2, 10_000.0).unwrap();
        let y = rotary_apply(&[1.0, 0.0], 1, &p).unwrap();
        assert!((y[0] as f64 - 1.0f64.cos()).abs() < 1e-7);
        assert!((y[1] as f64 - 1.0f64.sin()).abs() < 1e-7);
    }

    #[test]
    fn rotary_preserves_norm() {
        let p = RotaryParams::new(16, ROTARY_THETA_LONG).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let x: Vec<f32> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let n = rng.gen_range(0..100000);
            let y = rotary_apply(&x, n, &p).unwrap();
            let nx = dot_f64(&x, &x).sqrt();
            let ny = dot_f64(&y, &y).sqrt();
            assert!((nx - ny).abs() <= 1e-6 * nx.max(1.0));
        }
    }

    #[test]
    fn rotary_dot_products_are_shift_invariant() {
        let p = RotaryParams::new(8, 10_000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = rng.gen_range(0..2000i64);
            let n = rng.gen_range(0..2000i64);
            let t = rng.gen_range(0..1000i64);
            let a = dot_f64(
                &rotary_apply(&q, m, &p).unwrap(),
                &rotary_apply(&k, n, &p).unwrap(),
            );
            let b = dot_f64(
                &rotary_apply(&q, m + t, &p).unwrap(),
                &rotary_apply(&k, n + t, &p).unwrap(),
            );
            assert!((a - b).abs() < 1e-5, "shift variance: {a} vs {b}");
        }
    }

    #[test]
    fn rotary_table_matches_direct_and_inverts() {
        let p = RotaryParams::new(8, ROTARY_THETA_LONG).unwrap();
        let table = RotaryTable::new(&p, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = x.clone();
        table.rotate_row(&mut y, 17, false);
        let direct = rotary_apply(&x, 17, &p).unwrap();
        for (a, b) in y.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-5);
        }
        table.rotate_row(&mut y, 17, true);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn scheme_construction_rules() {
        assert!(matches!(make_scheme("nopos", 8, None).unwrap(), Scheme::NoPos));
        let x = vec![1.0, -1.0, 0.5, 2.0];
        if let Scheme::NoPos = make_scheme("nopos", 4, None).unwrap() {
            let s = make_scheme("nopos", 4, None).unwrap();
            assert_eq!(s.apply(&x, 1234).unwrap(), x);
        }
        match make_scheme("rotary", 4, Some(ROTARY_THETA_LONG)).unwrap() {
            Scheme::Rotary(p) => assert_eq!(p.theta, 1_500_000.0),
            _ => panic!("expected rotary"),
        }
        match make_scheme("rotary", 4, None).unwrap() {
            Scheme::Rotary(p) => assert_eq!(p.theta, ROTARY_THETA_DEFAULT),
            _ => panic!("expected rotary"),
        }
        assert!(make_scheme("rotary", 4, Some(5e3)).is_err());
        assert!(make_scheme("rotary", 4, Some(2e7)).is_err());
        assert!(make_scheme("rotary", 4, Some(1e4)).is_ok());
        assert!(make_scheme("rotary", 4, Some(1e7)).is_ok());
        assert!(make_scheme("alibi", 4, None).is_err());
        assert!(make_scheme("rotary", 5, None).is_err());
    }
}
