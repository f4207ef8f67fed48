//! Discrete-time Gaussian diffusion: variance schedule, closed-form forward
//! corruption, training-target construction, and the single reverse update
//! used by the samplers.
//!
//! Timesteps are 1-based (`t` in `1..=T`); `alpha_bar(t)` is the cumulative
//! product of `1 - beta` up to and including step `t`.

use crate::error::{Error, Result};
use crate::volume::{FieldKind, VoxelField};
use rand::Rng;
use rand_distr::StandardNormal;

/// Per-step noise variances with their derived cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas; each must lie in (0, 1).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        for (i, &b) in beta.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Parameter(format!(
                    "beta[{}] = {b} outside (0, 1)",
                    i + 1
                )));
            }
        }
        let alpha: Vec<f64> = beta.iter().map(|&b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn num_steps(&self) -> usize {
        self.beta.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.num_steps() {
            return Err(Error::Parameter(format!(
                "timestep {t} outside [1, {}]",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// True when the terminal marginal is close enough to a unit Gaussian
    /// for the prior swap at `t = T` to be sound.
    pub fn terminal_is_noise(&self) -> bool {
        *self.alpha_bar.last().unwrap() < 1e-2
    }
}

/// Linear beta ramp from `beta_start` (t=1) to `beta_end` (t=T).
pub fn linear_schedule(t_total: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_total < 2 {
        return Err(Error::Parameter(format!(
            "linear schedule needs T >= 2, got {t_total}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let denom = (t_total - 1) as f64;
    let beta = (0..t_total)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / denom)
        .collect();
    NoiseSchedule::from_betas(beta)
}

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// The default schedule used everywhere unless overridden in config.
pub fn default_schedule() -> NoiseSchedule {
    linear_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap()
}

fn check_latent_pair(a: &VoxelField, b: &VoxelField) -> Result<()> {
    if a.kind() != FieldKind::Latent || b.kind() != FieldKind::Latent {
        return Err(Error::KindMismatch {
            expected: "LATENT",
            got: if a.kind() != FieldKind::Latent {
                a.kind()
            } else {
                b.kind()
            },
        });
    }
    if a.resolution() != b.resolution() {
        return Err(Error::Shape(format!(
            "resolution mismatch: {} vs {}",
            a.resolution(),
            b.resolution()
        )));
    }
    Ok(())
}

/// Closed-form forward corruption:
/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn q_sample(
    x0: &VoxelField,
    t: usize,
    eps: &VoxelField,
    sched: &NoiseSchedule,
) -> Result<VoxelField> {
    sched.check_t(t)?;
    check_latent_pair(x0, eps)?;
    let ab = sched.alpha_bar(t);
    let c0 = ab.sqrt() as f32;
    let ce = (1.0 - ab).sqrt() as f32;
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| c0 * x + ce * e)
        .collect();
    VoxelField::new(x0.resolution(), FieldKind::Latent, x0.truncation(), data)
}

/// One ancestral reverse update:
/// `x_{t-1} = (x_t - beta_t/sqrt(1-alpha_bar_t) * eps_hat)/sqrt(alpha_t)
///            + sqrt(beta_t) * z`,
/// with `z = 0` at `t = 1`.
pub fn reverse_step(
    x_t: &VoxelField,
    t: usize,
    eps_hat: &VoxelField,
    z: Option<&VoxelField>,
    sched: &NoiseSchedule,
) -> Result<VoxelField> {
    sched.check_t(t)?;
    check_latent_pair(x_t, eps_hat)?;
    if let Some(zf) = z {
        check_latent_pair(x_t, zf)?;
    }
    let beta = sched.beta(t);
    let inv_sqrt_a = (1.0 / sched.alpha(t).sqrt()) as f32;
    let coef_eps = (beta / (1.0 - sched.alpha_bar(t)).sqrt()) as f32;
    let sigma = beta.sqrt() as f32;
    let mut data: Vec<f32> = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| inv_sqrt_a * (x - coef_eps * e))
        .collect();
    if let Some(zf) = z {
        for (d, &zv) in data.iter_mut().zip(zf.data()) {
            *d += sigma * zv;
        }
    }
    VoxelField::new(x_t.resolution(), FieldKind::Latent, x_t.truncation(), data)
}

/// A sampled training triple: the corrupted state, its timestep, and the
/// noise the denoiser must recover.
#[derive(Debug, Clone)]
pub struct TrainingTarget {
    pub x_t: VoxelField,
    pub t: usize,
    pub eps: VoxelField,
}

/// Draws a standard-normal latent field.
pub fn sample_noise_field<R: Rng>(resolution: usize, truncation: f32, rng: &mut R) -> VoxelField {
    let n = resolution * resolution * resolution;
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            v as f32
        })
        .collect();
    VoxelField::new(resolution, FieldKind::Latent, truncation, data).unwrap()
}

/// Uniform `t`, per-voxel standard-normal `eps`, and the corrupted state
/// `x_t = q_sample(x0, t, eps)`. The triple defines the denoising loss
/// `||eps - eps_theta(x_t, t, c)||²`.
pub fn training_target<R: Rng>(
    x0: &VoxelField,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<TrainingTarget> {
    if x0.kind() != FieldKind::Latent {
        return Err(Error::KindMismatch {
            expected: "LATENT",
            got: x0.kind(),
        });
    }
    let t = rng.gen_range(1..=sched.num_steps());
    let eps = sample_noise_field(x0.resolution(), x0.truncation(), rng);
    let x_t = q_sample(x0, t, &eps, sched)?;
    Ok(TrainingTarget { x_t, t, eps })
}

/// Mean squared error per voxel between predicted and true noise.
pub fn noise_mse(eps_hat: &[f32], eps: &[f32]) -> f64 {
    debug_assert_eq!(eps_hat.len(), eps.len());
    let mut acc = 0.0f64;
    for (&a, &b) in eps_hat.iter().zip(eps) {
        let d = (a - b) as f64;
        acc += d * d;
    }
    acc / eps.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn latent(res: usize, data: Vec<f32>) -> VoxelField {
        VoxelField::new(res, FieldKind::Latent, 3.0, data).unwrap()
    }

    #[test]
    fn default_schedule_terminal_is_noise() {
        let s = default_schedule();
        assert_eq!(s.num_steps(), 1000);
        assert!(s.alpha_bar(1000) < 1e-2);
        assert!(s.terminal_is_noise());
    }

    #[test]
    fn linear_schedule_endpoints_and_first_step() {
        let s = linear_schedule(2, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(2), 0.02);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
    }

    #[test]
    fn schedule_alpha_bar_strictly_decreasing_and_consistent() {
        let s = default_schedule();
        for t in 2..=s.num_steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let expect = s.alpha_bar(t - 1) * (1.0 - s.beta(t));
            assert_eq!(s.alpha_bar(t), expect, "exact cumulative product");
        }
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(linear_schedule(1, 1e-4, 0.02).is_err());
        assert!(linear_schedule(10, 0.0, 0.02).is_err());
        assert!(linear_schedule(10, 0.5, 0.2).is_err());
        assert!(linear_schedule(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn q_sample_zero_noise_limit() {
        let s = default_schedule();
        let x0 = latent(4, (0..64).map(|i| (i as f32) / 64.0 - 0.5).collect());
        let eps = latent(4, vec![0.0; 64]);
        let t = 333;
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let c = s.alpha_bar(t).sqrt() as f32;
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert!((a - c * b).abs() < 1e-7);
        }
    }

    #[test]
    fn q_sample_terminal_decorrelates_from_x0() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = sample_noise_field(32, 3.0, &mut rng);
        let eps = sample_noise_field(32, 3.0, &mut rng);
        let xt = q_sample(&x0, 1000, &eps, &s).unwrap();
        // Pearson correlation between x0 and x_T.
        let n = x0.num_voxels() as f64;
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&a, &b) in x0.data().iter().zip(xt.data()) {
            let (a, b) = (a as f64, b as f64);
            sx += a;
            sy += b;
            sxx += a * a;
            syy += b * b;
            sxy += a * b;
        }
        let corr = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        assert!(corr.abs() < 0.15, "corr = {corr}");
    }

    #[test]
    fn q_sample_monte_carlo_moments() {
        // Empirical mean/std of q_sample at fixed t over many draws must
        // match (sqrt(ab)*x0, sqrt(1-ab)) within 3 standard errors.
        let s = default_schedule();
        let t = 400;
        let x0v = 0.73f32;
        let res = 4;
        let n_draws = 10_000;
        let x0 = latent(res, vec![x0v; res * res * res]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut all = Vec::with_capacity(n_draws * res * res * res);
        for _ in 0..n_draws {
            let eps = sample_noise_field(res, 3.0, &mut rng);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            all.extend(xt.data().iter().map(|&v| v as f64));
        }
        let n = all.len() as f64;
        let mean: f64 = all.iter().sum::<f64>() / n;
        let var: f64 = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let ab = s.alpha_bar(t);
        let want_mean = ab.sqrt() * x0v as f64;
        let want_var = 1.0 - ab;
        let se_mean = (want_var / n).sqrt();
        // Var of the sample variance of a Gaussian: 2*sigma^4/(n-1).
        let se_var = (2.0 * want_var * want_var / (n - 1.0)).sqrt();
        assert!(
            (mean - want_mean).abs() < 3.0 * se_mean,
            "mean {mean} vs {want_mean} (3se {})",
            3.0 * se_mean
        );
        assert!(
            (var - want_var).abs() < 3.0 * se_var,
            "var {var} vs {want_var} (3se {})",
            3.0 * se_var
        );
    }

    #[test]
    fn reverse_step_inverts_single_step_schedule() {
        // One-step schedule with a terminal-noise beta: recover x0 exactly.
        let s = NoiseSchedule::from_betas(vec![0.995]).unwrap();
        assert!(s.terminal_is_noise());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = sample_noise_field(8, 3.0, &mut rng);
        let eps = sample_noise_field(8, 3.0, &mut rng);
        let x1 = q_sample(&x0, 1, &eps, &s).unwrap();
        let rec = reverse_step(&x1, 1, &eps, None, &s).unwrap();
        for (a, b) in rec.data().iter().zip(x0.data()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn reverse_step_small_beta_keeps_state() {
        let s = NoiseSchedule::from_betas(vec![1e-9, 1e-9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xt = sample_noise_field(8, 3.0, &mut rng);
        let eps = sample_noise_field(8, 3.0, &mut rng);
        let prev = reverse_step(&xt, 2, &eps, None, &s).unwrap();
        for (a, b) in prev.data().iter().zip(xt.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn reverse_step_stochastic_variance_matches_beta() {
        let s = default_schedule();
        let t = 700;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xt = sample_noise_field(4, 3.0, &mut rng);
        let eps_hat = sample_noise_field(4, 3.0, &mut rng);
        let base = reverse_step(&xt, t, &eps_hat, None, &s).unwrap();
        let n_draws = 4000;
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for _ in 0..n_draws {
            let z = sample_noise_field(4, 3.0, &mut rng);
            let xp = reverse_step(&xt, t, &eps_hat, Some(&z), &s).unwrap();
            for (a, b) in xp.data().iter().zip(base.data()) {
                let d = (a - b) as f64;
                acc += d * d;
                count += 1;
            }
        }
        let var = acc / count as f64;
        let want = s.beta(t);
        assert!(
            (var - want).abs() / want < 0.05,
            "stochastic variance {var} vs beta {want}"
        );
    }

    #[test]
    fn reverse_step_rejects_bad_t() {
        let s = default_schedule();
        let x = latent(2, vec![0.0; 8]);
        assert!(reverse_step(&x, 0, &x, None, &s).is_err());
        assert!(reverse_step(&x, 1001, &x, None, &s).is_err());
        assert!(q_sample(&x, 0, &x, &s).is_err());
    }

    #[test]
    fn training_target_deterministic_and_loss_baselines() {
        let s = default_schedule();
        let x0 = latent(8, vec![0.25; 512]);
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let a = training_target(&x0, &s, &mut r1).unwrap();
        let b = training_target(&x0, &s, &mut r2).unwrap();
        assert_eq!(a.t, b.t);
        assert_eq!(a.eps.data(), b.eps.data());
        assert_eq!(a.x_t.data(), b.x_t.data());

        // Oracle predictor: zero loss.
        assert_eq!(noise_mse(a.eps.data(), a.eps.data()), 0.0);

        // Zero predictor: E||eps||²/n = 1, checked over many batches.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zeros = vec![0.0f32; 512];
        let mut acc = 0.0;
        let n_batches = 200;
        for _ in 0..n_batches {
            let tt = training_target(&x0, &s, &mut rng).unwrap();
            acc += noise_mse(&zeros, tt.eps.data());
        }
        let mean = acc / n_batches as f64;
        assert!((mean - 1.0).abs() < 0.02, "zero-predictor loss {mean}");
    }
}
