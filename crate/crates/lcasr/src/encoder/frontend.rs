//! Subsampling frontend: stacks of stride-2 depthwise-separable 2-D
//! convolutions over the time×frequency plane that cut the frame rate by 4×
//! (two stages) or 8× (three stages), followed by a flatten and a linear
//! projection up to the model width. Stage channel count stays below the
//! model width; every stage halves both axes with `ceil` length semantics,
//! so the overall length law is `T_out = ceil(T_in / factor)`.

use rand_chacha::ChaCha8Rng;

use crate::params::{join, HasParams, Param};
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b, Mat};

use super::layers::{swish, swish_backward, Linear};
use super::EncoderError;

/// Channels-last 3-D activation block: index `(t, f, c)` maps to
/// `data[(t·f_len + f)·c_len + c]`, so the channel vector at each
/// time–frequency position is contiguous and pointwise mixing is a plain
/// matrix product over `(t·f)` rows.
#[derive(Debug, Clone)]
pub struct Tensor3 {
    pub t: usize,
    pub f: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(t: usize, f: usize, c: usize) -> Self {
        Tensor3 {
            t,
            f,
            c,
            data: vec![0.0; t * f * c],
        }
    }

    #[inline]
    pub fn at(&self, t: usize, f: usize, c: usize) -> f32 {
        self.data[(t * self.f + f) * self.c + c]
    }

    #[inline]
    pub fn at_mut(&mut self, t: usize, f: usize, c: usize) -> &mut f32 {
        &mut self.data[(t * self.f + f) * self.c + c]
    }

    /// Borrow as a `(t·f) × c` matrix (same memory layout).
    fn as_mat(&self) -> Mat {
        Mat::from_vec(self.t * self.f, self.c, self.data.clone())
    }
}

/// Halved length under kernel 3 / stride 2 / padding 1 on both axes.
#[inline]
pub fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

/// One depthwise-separable stage: per-channel 3×3 stride-2 convolution,
/// then a 1×1 pointwise channel mix. The nonlinearity lives in the caller.
#[derive(Debug, Clone)]
pub struct ConvStage {
    /// Depthwise kernels, `c_in × 9` (3×3 row-major per channel).
    pub dw: Param,
    pub dw_b: Param,
    /// Pointwise mix, `c_in × c_out`.
    pub pw: Param,
    pub pw_b: Param,
}

impl ConvStage {
    fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        // Identity-preserving start: the depthwise kernel passes the center
        // tap through, and a square pointwise mix starts as the identity.
        let mut dw = Mat::zeros(c_in, 9);
        for ch in 0..c_in {
            *dw.at_mut(ch, 4) = 1.0;
        }
        let pw = if c_in == c_out {
            let mut m = Mat::zeros(c_in, c_out);
            for j in 0..c_in {
                *m.at_mut(j, j) = 1.0;
            }
            m
        } else {
            Mat::randn_trunc(c_in, c_out, 0.02, rng)
        };
        ConvStage {
            dw: Param::new(dw),
            dw_b: Param::new(Mat::zeros(1, c_in)),
            pw: Param::new(pw),
            pw_b: Param::new(Mat::zeros(1, c_out)),
        }
    }

    fn depthwise_forward(&self, x: &Tensor3) -> Tensor3 {
        let (t_out, f_out) = (halve(x.t), halve(x.f));
        let mut y = Tensor3::zeros(t_out, f_out, x.c);
        for to in 0..t_out {
            for fo in 0..f_out {
                for ch in 0..x.c {
                    let mut acc = self.dw_b.v.data[ch] as f64;
                    for ki in 0..3 {
                        let ti = (2 * to + ki) as i64 - 1;
                        if ti < 0 || ti as usize >= x.t {
                            continue;
                        }
                        for kj in 0..3 {
                            let fi = (2 * fo + kj) as i64 - 1;
                            if fi < 0 || fi as usize >= x.f {
                                continue;
                            }
                            acc += self.dw.v.at(ch, ki * 3 + kj) as f64
                                * x.at(ti as usize, fi as usize, ch) as f64;
                        }
                    }
                    *y.at_mut(to, fo, ch) = acc as f32;
                }
            }
        }
        y
    }

    fn depthwise_backward(&mut self, x: &Tensor3, dy: &Tensor3) -> Tensor3 {
        let mut dx = Tensor3::zeros(x.t, x.f, x.c);
        for to in 0..dy.t {
            for fo in 0..dy.f {
                for ch in 0..x.c {
                    let g = dy.at(to, fo, ch) as f64;
                    self.dw_b.g.data[ch] += g as f32;
                    for ki in 0..3 {
                        let ti = (2 * to + ki) as i64 - 1;
                        if ti < 0 || ti as usize >= x.t {
                            continue;
                        }
                        for kj in 0..3 {
                            let fi = (2 * fo + kj) as i64 - 1;
                            if fi < 0 || fi as usize >= x.f {
                                continue;
                            }
                            let (ti, fi) = (ti as usize, fi as usize);
                            *self.dw.g.at_mut(ch, ki * 3 + kj) +=
                                (g * x.at(ti, fi, ch) as f64) as f32;
                            *dx.at_mut(ti, fi, ch) +=
                                (g * self.dw.v.at(ch, ki * 3 + kj) as f64) as f32;
                        }
                    }
                }
            }
        }
        dx
    }

    fn pointwise_forward(&self, x: &Tensor3) -> Tensor3 {
        let mut y = matmul(&x.as_mat(), &self.pw.v);
        for r in 0..y.rows {
            for j in 0..y.cols {
                y.data[r * y.cols + j] += self.pw_b.v.data[j];
            }
        }
        Tensor3 {
            t: x.t,
            f: x.f,
            c: self.pw.v.cols,
            data: y.data,
        }
    }

    fn pointwise_backward(&mut self, x: &Tensor3, dy: &Tensor3) -> Tensor3 {
        let xm = x.as_mat();
        let dym = Mat::from_vec(dy.t * dy.f, dy.c, dy.data.clone());
        self.pw.g.add_assign(&matmul_at_b(&xm, &dym));
        self.pw_b.g.add_assign(&dym.col_sums());
        let dxm = matmul_a_bt(&dym, &self.pw.v);
        Tensor3 {
            t: x.t,
            f: x.f,
            c: x.c,
            data: dxm.data,
        }
    }
}

impl HasParams for ConvStage {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "dw"), &mut self.dw);
        f(join(prefix, "dw_b"), &mut self.dw_b);
        f(join(prefix, "pw"), &mut self.pw);
        f(join(prefix, "pw_b"), &mut self.pw_b);
    }
}

/// Standardize features per channel over time: zero mean, unit variance,
/// epsilon-guarded. Applied once to the log-mel input before the first
/// convolution; it is data conditioning, not a trainable layer.
pub fn standardize_features(x: &Mat) -> Mat {
    let mut y = Mat::zeros(x.rows, x.cols);
    for j in 0..x.cols {
        let mut mean = 0.0f64;
        for t in 0..x.rows {
            mean += x.at(t, j) as f64;
        }
        mean /= x.rows as f64;
        let mut var = 0.0f64;
        for t in 0..x.rows {
            var += (x.at(t, j) as f64 - mean).powi(2);
        }
        var /= x.rows as f64;
        let inv = 1.0 / (var + 1e-8).sqrt();
        for t in 0..x.rows {
            y.data[t * x.cols + j] = ((x.at(t, j) as f64 - mean) * inv) as f32;
        }
    }
    y
}

/// The full frontend: 2 or 3 depthwise-separable stages with swish between,
/// then flatten (frequency × channels) and project to the model width.
#[derive(Debug, Clone)]
pub struct SubsampleFrontend {
    pub stages: Vec<ConvStage>,
    pub proj: Linear,
    pub factor: usize,
    pub d_sub: usize,
    pub in_f: usize,
}

#[derive(Debug)]
struct StageCache {
    input: Tensor3,
    dw_out: Tensor3,
    pw_out: Tensor3,
}

#[derive(Debug)]
pub struct FrontendCache {
    stages: Vec<StageCache>,
    flat: Mat,
}

/// Stage channel count: narrower than the model for wide models, matching
/// it otherwise.
pub fn stage_channels(d: usize) -> usize {
    if d >= 512 {
        256
    } else {
        d
    }
}

impl SubsampleFrontend {
    pub fn new(
        d: usize,
        factor: usize,
        in_f: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, EncoderError> {
        let n_stages = match factor {
            4 => 2,
            8 => 3,
            other => return Err(EncoderError::BadFactor(other)),
        };
        let d_sub = stage_channels(d);
        let mut stages = Vec::with_capacity(n_stages);
        let mut c_in = 1;
        for _ in 0..n_stages {
            stages.push(ConvStage::new(c_in, d_sub, rng));
            c_in = d_sub;
        }
        let mut f_out = in_f;
        for _ in 0..n_stages {
            f_out = halve(f_out);
        }
        Ok(SubsampleFrontend {
            stages,
            proj: Linear::new(f_out * d_sub, d, rng),
            factor,
            d_sub,
            in_f,
        })
    }

    /// Output length for a given input length: `ceil(t_in / factor)`.
    pub fn output_len(&self, t_in: usize) -> usize {
        t_in.div_ceil(self.factor)
    }

    /// `x` is a `T × in_f` feature matrix (already standardized).
    pub fn forward(&self, x: &Mat) -> Result<(Mat, FrontendCache), EncoderError> {
        if x.rows < self.factor {
            return Err(EncoderError::InputTooShort {
                got: x.rows,
                need: self.factor,
            });
        }
        if x.cols != self.in_f {
            return Err(EncoderError::BadConfig(format!(
                "expected {} feature bins, got {}",
                self.in_f, x.cols
            )));
        }
        let mut cur = Tensor3 {
            t: x.rows,
            f: x.cols,
            c: 1,
            data: x.data.clone(),
        };
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let input = cur;
            let dw_out = stage.depthwise_forward(&input);
            let pw_out = stage.pointwise_forward(&dw_out);
            let act = Mat::from_vec(1, pw_out.data.len(), pw_out.data.clone());
            let act = swish(&act);
            cur = Tensor3 {
                t: pw_out.t,
                f: pw_out.f,
                c: pw_out.c,
                data: act.data,
            };
            caches.push(StageCache {
                input,
                dw_out,
                pw_out,
            });
        }
        let flat = Mat::from_vec(cur.t, cur.f * cur.c, cur.data);
        let out = self.proj.forward(&flat);
        Ok((
            out,
            FrontendCache {
                stages: caches,
                flat,
            },
        ))
    }

    /// Returns the gradient with respect to the (standardized) input
    /// features and accumulates parameter gradients.
    pub fn backward(&mut self, cache: &FrontendCache, dy: &Mat) -> Mat {
        let dflat = self.proj.backward(&cache.flat, dy);
        let last = cache.stages.last().expect("frontend has stages");
        let mut dcur = Tensor3 {
            t: last.pw_out.t,
            f: last.pw_out.f,
            c: last.pw_out.c,
            data: dflat.data,
        };
        for (stage, sc) in self.stages.iter_mut().zip(&cache.stages).rev() {
            let pre = Mat::from_vec(1, sc.pw_out.data.len(), sc.pw_out.data.clone());
            let dyf = Mat::from_vec(1, dcur.data.len(), dcur.data);
            let dact = swish_backward(&pre, &dyf);
            let dpw = Tensor3 {
                t: sc.pw_out.t,
                f: sc.pw_out.f,
                c: sc.pw_out.c,
                data: dact.data,
            };
            let ddw = stage.pointwise_backward(&sc.dw_out, &dpw);
            dcur = stage.depthwise_backward(&sc.input, &ddw);
        }
        Mat::from_vec(dcur.t, dcur.f, dcur.data)
    }
}

impl HasParams for SubsampleFrontend {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.visit_params(&join(prefix, &format!("stage{i}")), f);
        }
        self.proj.visit_params(&join(prefix, "proj"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn randm(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::randn_trunc(rows, cols, 1.0, rng)
    }

    #[test]
    fn length_law_holds_for_both_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for factor in [4usize, 8] {
            let fe = SubsampleFrontend::new(8, factor, 8, &mut rng).unwrap();
            for t_in in factor..60 {
                let x = randm(t_in, 8, &mut rng);
                let (y, _) = fe.forward(&x).unwrap();
                assert_eq!(y.rows, t_in.div_ceil(factor), "t_in {t_in} factor {factor}");
                assert_eq!(y.rows, fe.output_len(t_in));
                assert_eq!(y.cols, 8);
            }
        }
    }

    #[test]
    fn known_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fe8 = SubsampleFrontend::new(8, 8, 8, &mut rng).unwrap();
        assert_eq!(fe8.forward(&randm(800, 8, &mut rng)).unwrap().0.rows, 100);
        assert_eq!(fe8.forward(&randm(801, 8, &mut rng)).unwrap().0.rows, 101);
        let fe4 = SubsampleFrontend::new(8, 4, 8, &mut rng).unwrap();
        assert_eq!(fe4.forward(&randm(800, 8, &mut rng)).unwrap().0.rows, 200);
    }

    #[test]
    fn rejects_too_short_input_and_bad_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fe = SubsampleFrontend::new(8, 8, 8, &mut rng).unwrap();
        let x = randm(7, 8, &mut rng);
        assert!(matches!(
            fe.forward(&x),
            Err(EncoderError::InputTooShort { got: 7, need: 8 })
        ));
        assert!(matches!(
            SubsampleFrontend::new(8, 16, 8, &mut rng),
            Err(EncoderError::BadFactor(16))
        ));
    }

    #[test]
    fn standardization_zeroes_mean_and_scales_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = randm(50, 4, &mut rng);
        for t in 0..50 {
            *x.at_mut(t, 1) = 7.0; // constant channel
        }
        let y = standardize_features(&x);
        for j in 0..4 {
            let mean: f64 = (0..50).map(|t| y.at(t, j) as f64).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-5, "channel {j} mean {mean}");
        }
        let var1: f64 = (0..50).map(|t| (y.at(t, 1) as f64).powi(2)).sum::<f64>() / 50.0;
        assert!(var1 < 1e-6, "constant channel must map to zeros");
        let var0: f64 = (0..50).map(|t| (y.at(t, 0) as f64).powi(2)).sum::<f64>() / 50.0;
        assert!((var0 - 1.0).abs() < 1e-3, "channel 0 var {var0}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d, factor, in_f, t_in) = (6, 4, 4, 9);
        let mut fe = SubsampleFrontend::new(d, factor, in_f, &mut rng).unwrap();
        // Break the identity inits so every parameter sees a generic point.
        fe.stages[1].pw.v = Mat::randn_trunc(6, 6, 0.3, &mut rng);
        for s in &mut fe.stages {
            s.dw.v = Mat::randn_trunc(s.dw.v.rows, 9, 0.3, &mut rng);
        }
        let x = randm(t_in, in_f, &mut rng);
        let t_out = t_in.div_ceil(factor);
        let c = randm(t_out, d, &mut rng);
        let mut work = fe.clone();
        let (_, cache) = work.forward(&x).unwrap();
        let dx = work.backward(&cache, &c);

        let loss_of = |fe: &SubsampleFrontend, x: &Mat| -> f64 {
            let (y, _) = fe.forward(x).unwrap();
            y.data
                .iter()
                .zip(&c.data)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        let h = 1e-3f32;
        let mut err2 = 0.0f64;
        let mut norm2 = 0.0f64;
        for idx in 0..x.data.len() {
            let mut plus = x.clone();
            plus.data[idx] += h;
            let mut minus = x.clone();
            minus.data[idx] -= h;
            let h_eff = (plus.data[idx] - minus.data[idx]) as f64;
            let fd = (loss_of(&fe, &plus) - loss_of(&fe, &minus)) / h_eff;
            let an = dx.data[idx] as f64;
            err2 += (fd - an) * (fd - an);
            norm2 += fd * fd;
        }
        assert!(err2.sqrt() / norm2.sqrt() <= 1e-3, "input grad mismatch");

        // All parameters, via the visitor.
        let mut param_err2 = 0.0f64;
        let mut param_norm2 = 0.0f64;
        let mut names = Vec::new();
        work.visit_params("fe", &mut |name, _| names.push(name));
        for name in names {
            let n_entries = {
                let mut n = 0;
                work.visit_params("fe", &mut |nm, p| {
                    if nm == name {
                        n = p.v.data.len();
                    }
                });
                n
            };
            for idx in 0..n_entries {
                let probe = |delta: f32| -> f64 {
                    let mut m = fe.clone();
                    m.visit_params("fe", &mut |nm, p| {
                        if nm == name {
                            p.v.data[idx] += delta;
                        }
                    });
                    loss_of(&m, &x)
                };
                let fd = (probe(h) - probe(-h)) / (2.0 * h as f64);
                let mut an = 0.0f64;
                work.visit_params("fe", &mut |nm, p| {
                    if nm == name {
                        an = p.g.data[idx] as f64;
                    }
                });
                param_err2 += (fd - an) * (fd - an);
                param_norm2 += fd * fd;
            }
        }
        assert!(
            param_err2.sqrt() / param_norm2.sqrt() <= 1e-3,
            "param grad mismatch: {} vs {}",
            param_err2.sqrt(),
            param_norm2.sqrt()
        );
    }
}
