//! Batch renormalization over the channel dimension. Training normalizes by
//! batch statistics corrected toward the running statistics with clipped
//! factors r = σ_B/σ_run and d = (μ_B − μ_run)/σ_run (both treated as
//! constants in the backward pass); inference uses the running statistics
//! alone, so one sample's output never depends on its batch mates. The clip
//! limits ramp from plain batch normalization (r_max = 1, d_max = 0) to
//! r_max = 3, d_max = 5 over the first 1000 steps.

use crate::params::{join, HasParams, Param};
use crate::tensor::Mat;

pub const RENORM_EPS: f64 = 1e-5;
/// Steps over which the clip limits relax to their final values.
pub const RENORM_RAMP_STEPS: u64 = 1000;

/// Clip limits at a given training step: r_max 1→3, d_max 0→5.
pub fn clip_limits(step: u64) -> (f64, f64) {
    let t = (step as f64 / RENORM_RAMP_STEPS as f64).min(1.0);
    (1.0 + 2.0 * t, 5.0 * t)
}

#[derive(Debug, Clone)]
pub struct BatchRenorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Mat,
    pub running_var: Mat,
    /// Steps taken, drives the clip-limit ramp. Stored as a tensor so it
    /// rides along in checkpoints.
    steps: Mat,
    pub momentum: f64,
    channels: usize,
}

/// Per-item cache for the backward pass.
#[derive(Debug)]
pub struct RenormCache {
    /// z = (x − μ_B)/σ_B for every item.
    z: Vec<Mat>,
    sigma_b: Vec<f64>,
    r: Vec<f64>,
    d: Vec<f64>,
    total_frames: usize,
}

impl BatchRenorm {
    pub fn new(channels: usize) -> Self {
        BatchRenorm {
            gamma: Param::new(Mat::filled(1, channels, 1.0)),
            beta: Param::new(Mat::zeros(1, channels)),
            running_mean: Mat::zeros(1, channels),
            running_var: Mat::filled(1, channels, 1.0),
            steps: Mat::zeros(1, 1),
            momentum: 0.1,
            channels,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps.data[0] as u64
    }

    /// Training forward over a whole batch in lockstep: statistics are
    /// gathered per channel across every frame of every item.
    pub fn forward_train(&mut self, xs: &[Mat]) -> (Vec<Mat>, RenormCache) {
        let c = self.channels;
        let total: usize = xs.iter().map(|x| x.rows).sum();
        debug_assert!(total > 0);
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for x in xs {
            for t in 0..x.rows {
                for (m, &v) in mean.iter_mut().zip(x.row(t)) {
                    *m += v as f64;
                }
            }
        }
        for m in &mut mean {
            *m /= total as f64;
        }
        for x in xs {
            for t in 0..x.rows {
                for (j, &v) in x.row(t).iter().enumerate() {
                    let d = v as f64 - mean[j];
                    var[j] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= total as f64;
        }

        let (r_max, d_max) = clip_limits(self.steps());
        let mut sigma_b = vec![0.0f64; c];
        let mut r = vec![0.0f64; c];
        let mut d = vec![0.0f64; c];
        for j in 0..c {
            sigma_b[j] = (var[j] + RENORM_EPS).sqrt();
            let sigma_run = (self.running_var.data[j] as f64 + RENORM_EPS).sqrt();
            r[j] = (sigma_b[j] / sigma_run).clamp(1.0 / r_max, r_max);
            d[j] = ((mean[j] - self.running_mean.data[j] as f64) / sigma_run)
                .clamp(-d_max, d_max);
        }

        let mut outs = Vec::with_capacity(xs.len());
        let mut zs = Vec::with_capacity(xs.len());
        for x in xs {
            let mut z = Mat::zeros(x.rows, c);
            let mut y = Mat::zeros(x.rows, c);
            for t in 0..x.rows {
                let xr = x.row(t);
                let zr = z.row_mut(t);
                let yr = y.row_mut(t);
                for j in 0..c {
                    let zj = (xr[j] as f64 - mean[j]) / sigma_b[j];
                    let xhat = r[j] * zj + d[j];
                    zr[j] = zj as f32;
                    yr[j] = (self.gamma.v.data[j] as f64 * xhat
                        + self.beta.v.data[j] as f64) as f32;
                }
            }
            zs.push(z);
            outs.push(y);
        }

        // Running statistics move toward the batch statistics.
        for j in 0..c {
            let m = self.momentum;
            let rm = self.running_mean.data[j] as f64;
            let rv = self.running_var.data[j] as f64;
            self.running_mean.data[j] = (rm + m * (mean[j] - rm)) as f32;
            self.running_var.data[j] = (rv + m * (var[j] - rv)) as f32;
        }
        self.steps.data[0] += 1.0;

        (outs, RenormCache { z: zs, sigma_b, r, d, total_frames: total })
    }

    /// Inference forward: running statistics only, one item at a time.
    pub fn forward_eval(&self, x: &Mat) -> Mat {
        let c = self.channels;
        let mut y = Mat::zeros(x.rows, c);
        for t in 0..x.rows {
            let xr = x.row(t);
            let yr = y.row_mut(t);
            for j in 0..c {
                let sigma = (self.running_var.data[j] as f64 + RENORM_EPS).sqrt();
                let xhat = (xr[j] as f64 - self.running_mean.data[j] as f64) / sigma;
                yr[j] =
                    (self.gamma.v.data[j] as f64 * xhat + self.beta.v.data[j] as f64) as f32;
            }
        }
        y
    }

    /// Backward over the same batch. r and d are constants; gradients still
    /// flow through the batch mean and variance:
    /// dx = (r·γ/σ_B)·(dxhat − mean(dxhat) − z·mean(dxhat∘z)).
    pub fn backward(&mut self, cache: &RenormCache, dys: &[Mat]) -> Vec<Mat> {
        let c = self.channels;
        let n = cache.total_frames as f64;
        let mut sum_dxhat = vec![0.0f64; c];
        let mut sum_dxhat_z = vec![0.0f64; c];
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for (i, dy) in dys.iter().enumerate() {
            for t in 0..dy.rows {
                let dr = dy.row(t);
                let zr = cache.z[i].row(t);
                for j in 0..c {
                    let dyv = dr[j] as f64;
                    let zv = zr[j] as f64;
                    dgamma[j] += dyv * (cache.r[j] * zv + cache.d[j]);
                    dbeta[j] += dyv;
                    let dxhat = dyv * self.gamma.v.data[j] as f64;
                    sum_dxhat[j] += dxhat;
                    sum_dxhat_z[j] += dxhat * zv;
                }
            }
        }
        for j in 0..c {
            self.gamma.g.data[j] += dgamma[j] as f32;
            self.beta.g.data[j] += dbeta[j] as f32;
        }
        let mut dxs = Vec::with_capacity(dys.len());
        for (i, dy) in dys.iter().enumerate() {
            let mut dx = Mat::zeros(dy.rows, c);
            for t in 0..dy.rows {
                let dr = dy.row(t);
                let zr = cache.z[i].row(t);
                let dxr = dx.row_mut(t);
                for j in 0..c {
                    let dxhat = dr[j] as f64 * self.gamma.v.data[j] as f64;
                    let term = dxhat - sum_dxhat[j] / n - zr[j] as f64 * sum_dxhat_z[j] / n;
                    dxr[j] = (cache.r[j] / cache.sigma_b[j] * term) as f32;
                }
            }
            dxs.push(dx);
        }
        dxs
    }
}

impl HasParams for BatchRenorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
        f(join(prefix, "steps"), &mut self.steps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randm(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
    }

    #[test]
    fn clip_limit_ramp() {
        assert_eq!(clip_limits(0), (1.0, 0.0));
        assert_eq!(clip_limits(500), (2.0, 2.5));
        assert_eq!(clip_limits(1000), (3.0, 5.0));
        assert_eq!(clip_limits(1_000_000_000), (3.0, 5.0));
    }

    #[test]
    fn step_zero_is_plain_batch_normalization() {
        // At step 0 the limits pin r = 1 and d = 0 regardless of the running
        // statistics, so the transform must equal plain batch norm.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bn = BatchRenorm::new(3);
        // Perturb the running stats to prove they cannot leak in.
        bn.running_mean.data.copy_from_slice(&[5.0, -3.0, 9.0]);
        bn.running_var.data.copy_from_slice(&[4.0, 0.25, 7.0]);
        let xs = vec![randm(6, 3, &mut rng), randm(4, 3, &mut rng)];
        let (ys, _) = bn.forward_train(&xs);
        // Independent plain-BN oracle.
        let total = 10usize;
        for j in 0..3 {
            let mut vals = Vec::new();
            for x in &xs {
                for t in 0..x.rows {
                    vals.push(x.at(t, j) as f64);
                }
            }
            let mean = vals.iter().sum::<f64>() / total as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / total as f64;
            let sigma = (var + RENORM_EPS).sqrt();
            let mut idx = 0;
            for (i, x) in xs.iter().enumerate() {
                for t in 0..x.rows {
                    let expect = (x.at(t, j) as f64 - mean) / sigma;
                    assert!(
                        (ys[i].at(t, j) as f64 - expect).abs() < 1e-6,
                        "item {i} frame {t} ch {j}"
                    );
                    idx += 1;
                }
            }
            assert_eq!(idx, total);
        }
    }

    #[test]
    fn inference_ignores_batch_mates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bn = BatchRenorm::new(4);
        for _ in 0..5 {
            let xs = vec![randm(8, 4, &mut rng), randm(3, 4, &mut rng)];
            bn.forward_train(&xs);
        }
        let x = randm(7, 4, &mut rng);
        let alone = bn.forward_eval(&x);
        // Evaluate other items in between; the output for x must not move.
        for _ in 0..3 {
            let other = randm(9, 4, &mut rng);
            bn.forward_eval(&other);
        }
        let again = bn.forward_eval(&x);
        assert_eq!(alone.data, again.data);
    }

    #[test]
    fn running_stats_converge_to_repeated_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchRenorm::new(2);
        let xs = vec![randm(32, 2, &mut rng)];
        // Batch statistics of the fixed batch.
        let mut mean = [0.0f64; 2];
        let mut var = [0.0f64; 2];
        for t in 0..32 {
            for j in 0..2 {
                mean[j] += xs[0].at(t, j) as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= 32.0);
        for t in 0..32 {
            for j in 0..2 {
                let d = xs[0].at(t, j) as f64 - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= 32.0);
        let n = 100u32;
        for _ in 0..n {
            bn.forward_train(&xs);
        }
        let decay = (1.0 - bn.momentum).powi(n as i32);
        for j in 0..2 {
            // Closed-form EMA: run = batch + (init − batch)·(1−m)^N.
            let expect_mean = mean[j] * (1.0 - decay);
            let expect_var = var[j] + (1.0 - var[j]) * decay;
            assert!((bn.running_mean.data[j] as f64 - expect_mean).abs() < 1e-4);
            assert!((bn.running_var.data[j] as f64 - expect_var).abs() < 1e-4);
            assert!((bn.running_mean.data[j] as f64 - mean[j]).abs() < 1e-3);
            assert!((bn.running_var.data[j] as f64 - var[j]).abs() < 1e-3);
        }
    }

    /// Finite-difference check of dx, dγ, dβ against an independent
    /// reimplementation of the transform with r and d frozen at the base
    /// point — matching their stop-gradient treatment. Gradients still flow
    /// through the batch mean and variance inside z.
    fn fd_check(warm_steps: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 3;
        let mut bn = BatchRenorm::new(c);
        for _ in 0..warm_steps {
            let xs = vec![randm(10, c, &mut rng)];
            bn.forward_train(&xs);
        }
        let xs = vec![randm(5, c, &mut rng), randm(4, c, &mut rng)];
        let cs = vec![randm(5, c, &mut rng), randm(4, c, &mut rng)];
        let mut work = bn.clone();
        let (_ys, cache) = work.forward_train(&xs);
        let dxs = work.backward(&cache, &cs);
        let frozen_loss = |gamma: &[f32], beta: &[f32], xs: &[Mat]| -> f64 {
            let total: usize = xs.iter().map(|x| x.rows).sum();
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for x in xs {
                for t in 0..x.rows {
                    for (m, &v) in mean.iter_mut().zip(x.row(t)) {
                        *m += v as f64;
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= total as f64);
            for x in xs {
                for t in 0..x.rows {
                    for (j, &v) in x.row(t).iter().enumerate() {
                        var[j] += (v as f64 - mean[j]).powi(2);
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= total as f64);
            let mut loss = 0.0f64;
            for (x, cc) in xs.iter().zip(&cs) {
                for t in 0..x.rows {
                    for j in 0..c {
                        let sigma = (var[j] + RENORM_EPS).sqrt();
                        let z = (x.at(t, j) as f64 - mean[j]) / sigma;
                        let xhat = cache.r[j] * z + cache.d[j];
                        let y = gamma[j] as f64 * xhat + beta[j] as f64;
                        loss += y * cc.at(t, j) as f64;
                    }
                }
            }
            loss
        };
        let gv = bn.gamma.v.data.clone();
        let bv = bn.beta.v.data.clone();
        let h = 1e-3f32;
        // dx check (norm-wise).
        let mut err2 = 0.0;
        let mut norm2 = 0.0;
        for i in 0..xs.len() {
            for idx in 0..xs[i].data.len() {
                let mut plus = xs.clone();
                plus[i].data[idx] += h;
                let mut minus = xs.clone();
                minus[i].data[idx] -= h;
                let fd = (frozen_loss(&gv, &bv, &plus) - frozen_loss(&gv, &bv, &minus))
                    / (2.0 * h as f64);
                let an = dxs[i].data[idx] as f64;
                err2 += (fd - an) * (fd - an);
                norm2 += fd * fd;
            }
        }
        assert!(err2.sqrt() / norm2.sqrt() <= 1e-3, "dx rel err");
        // dγ, dβ.
        for j in 0..c {
            for (pick, an) in [(0, work.gamma.g.data[j]), (1, work.beta.g.data[j])] {
                let mut gp = gv.clone();
                let mut gm = gv.clone();
                let mut bp = bv.clone();
                let mut bm = bv.clone();
                if pick == 0 {
                    gp[j] += h;
                    gm[j] -= h;
                } else {
                    bp[j] += h;
                    bm[j] -= h;
                }
                let fd = (frozen_loss(&gp, &bp, &xs) - frozen_loss(&gm, &bm, &xs))
                    / (2.0 * h as f64);
                assert!(
                    (fd - an as f64).abs() / fd.abs().max(an.abs() as f64).max(1e-3) <= 1e-3,
                    "param {pick} ch {j}: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_at_step_zero() {
        fd_check(0, 11);
    }

    #[test]
    fn gradients_match_finite_differences_with_active_correction() {
        // After warm steps the clip limits are loose and r, d bite.
        fd_check(40, 13);
    }
}
