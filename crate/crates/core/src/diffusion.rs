//! Noise schedules, the forward corruption process and the deterministic
//! reverse process of a DDPM.
//!
//! # Timestep convention
//!
//! Timesteps are *conceptual*: `t = 0` is clean data and `t = T` is the start
//! of the reverse chain. The cumulative signal level is
//! `alpha_bar(0) = 1` and `alpha_bar(t) = alphas_bar[t - 1]` for `t >= 1`,
//! where `alphas_bar[k]` is the running product of `1 - beta` over the first
//! `k + 1` schedule entries. A noise predictor is always queried with a
//! conceptual `t >= 1`; implementations that index a T-row time-embedding
//! table use row `t - 1`.
//!
//! The reverse update implements the printed pair of equations
//!
//! ```text
//! x_hat0  = (x_t - sqrt(1 - abar_prev) * eps_hat) / sqrt(abar_t)   (as printed)
//! x_{t-1} = sqrt(abar_prev) * x_hat0 + sqrt(1 - abar_prev) * eps_hat
//! ```
//!
//! where the `as printed` estimate uses `abar_{t-1}` inside the numerator
//! radical. With that index the composition of the forward closed form and
//! the reverse estimate does not cancel exactly; the conventional variant
//! that uses `abar_t` in the numerator is available as
//! [`ReverseConvention::Ddim`] and inverts the forward process exactly when
//! fed the true noise. [`ReverseConvention::AsPrinted`] is the default.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::rng::Rng;
use crate::{Error, Result};

/// Which index the predicted-clean-image estimate uses inside its numerator
/// radical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseConvention {
    /// `sqrt(1 - abar_{t-1})` in the numerator, exactly as printed.
    #[default]
    AsPrinted,
    /// `sqrt(1 - abar_t)` in the numerator; inverts the forward closed form.
    Ddim,
}

/// Linear-beta noise schedule with precomputed cumulative alpha products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// Per-step variances, length `T`, each in `(0, 1)`.
    pub betas: Vec<f64>,
    /// Running products of `1 - beta`, length `T`, strictly non-increasing.
    pub alphas_bar: Vec<f64>,
    /// Step count.
    pub t_count: usize,
}

impl NoiseSchedule {
    /// Signal level at conceptual timestep `t` in `[0, T]`.
    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_bar[t - 1]
        }
    }

    /// Signal level of the state one step earlier (saturates at `t = 0`).
    #[inline]
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        self.alpha_bar(t.saturating_sub(1))
    }
}

/// Build a linear schedule interpolating `beta_start..=beta_end` over `T`
/// steps, with cumulative products computed alongside.
pub fn build_schedule(t_count: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_count < 1 {
        return Err(Error::Config {
            field: "schedule.t_count",
            reason: "must be >= 1".to_string(),
        });
    }
    if !(beta_start > 0.0) {
        return Err(Error::Config {
            field: "schedule.beta_start",
            reason: format!("must be > 0, got {beta_start}"),
        });
    }
    if !(beta_end < 1.0) {
        return Err(Error::Config {
            field: "schedule.beta_end",
            reason: format!("must be < 1, got {beta_end}"),
        });
    }
    if beta_start > beta_end {
        return Err(Error::Config {
            field: "schedule.beta_start",
            reason: format!("must be <= beta_end, got {beta_start} > {beta_end}"),
        });
    }
    let mut betas = Vec::with_capacity(t_count);
    if t_count == 1 {
        betas.push(beta_start);
    } else {
        let step = (beta_end - beta_start) / (t_count - 1) as f64;
        for i in 0..t_count {
            betas.push(beta_start + step * i as f64);
        }
    }
    let mut alphas_bar = Vec::with_capacity(t_count);
    let mut acc = 1.0;
    for beta in &betas {
        acc *= 1.0 - beta;
        alphas_bar.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas_bar,
        t_count,
    })
}

/// A conditional noise predictor `eps(x_t, t, prompt_emb)`.
///
/// `t` is the conceptual timestep in `[1, T]`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &[f64], t: usize, prompt_emb: &[f64]) -> Vec<f64>;
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Forward closed form: `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len("q_sample eps", x0.len(), eps.len())?;
    if t > sched.t_count {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} beyond schedule length {}",
            sched.t_count
        )));
    }
    let abar = sched.alpha_bar(t);
    let signal = math::sqrt(abar);
    let noise = math::sqrt(1.0 - abar);
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| signal * x + noise * e)
        .collect())
}

/// Estimate of the clean image from `x_t` and a predicted noise.
pub fn predict_x0(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    convention: ReverseConvention,
) -> Result<Vec<f64>> {
    check_len("predict_x0 eps_hat", x_t.len(), eps_hat.len())?;
    let abar_t = sched.alpha_bar(t);
    if abar_t == 0.0 {
        return Err(Error::SingularSchedule { t });
    }
    let abar_num = match convention {
        ReverseConvention::AsPrinted => sched.alpha_bar_prev(t),
        ReverseConvention::Ddim => abar_t,
    };
    let noise_coeff = math::sqrt(1.0 - abar_num);
    let inv_signal = 1.0 / math::sqrt(abar_t);
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| (x - noise_coeff * e) * inv_signal)
        .collect())
}

/// Deterministic reverse update from timestep `t` to `t - 1`.
pub fn reverse_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    convention: ReverseConvention,
) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::AlreadyTerminal);
    }
    if t > sched.t_count {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} beyond schedule length {}",
            sched.t_count
        )));
    }
    let x_hat0 = predict_x0(x_t, eps_hat, t, sched, convention)?;
    let abar_prev = sched.alpha_bar_prev(t);
    let signal = math::sqrt(abar_prev);
    let noise = math::sqrt(1.0 - abar_prev);
    Ok(x_hat0
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| signal * x + noise * e)
        .collect())
}

/// Run the full reverse chain from a seeded Gaussian start and clamp the
/// final image to `[-1, 1]`.
///
/// Output is a pure function of the model parameters, the prompt embedding
/// and the seed.
pub fn generate<M: NoisePredictor + ?Sized>(
    model: &M,
    prompt_emb: &[f64],
    image_dim: usize,
    sched: &NoiseSchedule,
    seed: u64,
    convention: ReverseConvention,
) -> Result<Vec<f64>> {
    let mut rng = Rng::new(seed);
    let mut x = rng.normal_vec(image_dim);
    for t in (1..=sched.t_count).rev() {
        let eps_hat = model.predict(&x, t, prompt_emb);
        x = reverse_step(&x, &eps_hat, t, sched, convention)?;
    }
    for v in &mut x {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// Degenerate schedules used only by tests; not constructible through
    /// `build_schedule`.
    fn raw_schedule(alphas_bar: Vec<f64>) -> NoiseSchedule {
        let t_count = alphas_bar.len();
        NoiseSchedule {
            betas: vec![f64::NAN; t_count],
            alphas_bar,
            t_count,
        }
    }

    struct ZeroPredictor;
    impl NoisePredictor for ZeroPredictor {
        fn predict(&self, x_t: &[f64], _t: usize, _p: &[f64]) -> Vec<f64> {
            vec![0.0; x_t.len()]
        }
    }

    #[test]
    fn schedule_single_step() {
        let s = build_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas, vec![0.1]);
        assert!((s.alphas_bar[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn schedule_two_steps() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.betas[0] - 0.1).abs() < 1e-15);
        assert!((s.betas[1] - 0.2).abs() < 1e-15);
        assert!((s.alphas_bar[0] - 0.9).abs() < 1e-15);
        assert!((s.alphas_bar[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn schedule_matches_independent_product() {
        let s = build_schedule(50, 1e-4, 0.02).unwrap();
        // Independent cumulative product loop.
        let mut expect = 1.0;
        for i in 0..50 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 49.0;
            expect *= 1.0 - beta;
        }
        let rel = ((s.alphas_bar[49] - expect) / expect).abs();
        assert!(rel < 1e-12, "relative error {rel}");
    }

    #[test]
    fn schedule_invariants() {
        for (t, lo, hi) in [(1, 0.5, 0.5), (7, 1e-4, 0.3), (50, 1e-4, 0.02), (200, 0.01, 0.9)] {
            let s = build_schedule(t, lo, hi).unwrap();
            assert_eq!(s.betas.len(), t);
            let mut prod = 1.0;
            for (i, (beta, abar)) in s.betas.iter().zip(&s.alphas_bar).enumerate() {
                assert!(*beta > 0.0 && *beta < 1.0);
                prod *= 1.0 - beta;
                assert!(((abar - prod) / prod).abs() < 1e-12, "product identity at {i}");
                assert!(*abar > 0.0 && *abar <= 1.0);
            }
            for w in s.alphas_bar.windows(2) {
                assert!(w[1] < w[0], "alphas_bar must strictly decrease");
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(matches!(
            build_schedule(0, 0.1, 0.2),
            Err(Error::Config { field: "schedule.t_count", .. })
        ));
        assert!(matches!(
            build_schedule(5, 0.0, 0.2),
            Err(Error::Config { field: "schedule.beta_start", .. })
        ));
        assert!(matches!(
            build_schedule(5, 0.1, 1.0),
            Err(Error::Config { field: "schedule.beta_end", .. })
        ));
        assert!(matches!(
            build_schedule(5, 0.3, 0.2),
            Err(Error::Config { field: "schedule.beta_start", .. })
        ));
    }

    #[test]
    fn q_sample_identity_at_full_signal() {
        // alpha_bar == 1 throughout: a degenerate all-zero-beta schedule.
        let s = raw_schedule(vec![1.0, 1.0]);
        let x0 = [0.3, -0.7];
        let eps = [5.0, -5.0];
        let x = q_sample(&x0, 2, &eps, &s).unwrap();
        assert_eq!(x, vec![0.3, -0.7]);
    }

    #[test]
    fn q_sample_pure_noise_coefficient() {
        let s = raw_schedule(vec![0.36]);
        let x0 = [0.0, 0.0, 0.0];
        let eps = [1.0, -2.0, 0.5];
        let x = q_sample(&x0, 1, &eps, &s).unwrap();
        for (got, e) in x.iter().zip(eps) {
            assert!((got - 0.8 * e).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_mixed_coefficients() {
        let s = raw_schedule(vec![0.64]);
        let x = q_sample(&[1.0, 0.0], 1, &[0.0, 1.0], &s).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-15);
        assert!((x[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn q_sample_shape_error() {
        let s = raw_schedule(vec![0.5]);
        assert!(matches!(
            q_sample(&[1.0, 2.0], 1, &[1.0], &s),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn predict_x0_zero_noise() {
        let s = raw_schedule(vec![0.25]);
        let x = predict_x0(&[1.0, -0.5], &[0.0, 0.0], 1, &s, ReverseConvention::AsPrinted).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-15);
        assert!((x[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn predict_x0_direct_substitution_as_printed() {
        // abar_t = 0.64, abar_{t-1} = 0.36 (degenerate, increasing on purpose).
        let s = raw_schedule(vec![0.36, 0.64]);
        let x = predict_x0(&[0.8, 0.6], &[0.0, 1.0], 2, &s, ReverseConvention::AsPrinted).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15);
        assert!((x[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn predict_x0_round_trip_residual() {
        // Symbolic recomposition of the forward closed form with the printed
        // estimate: feeding the true eps recovers
        //   as-printed: x0 * sqrt(abar_t / abar_t) only when the numerator
        //   index matches the forward coefficient. With the forward noised at
        //   t and the printed numerator using abar_{t-1}, the residual is
        //   x_hat0 - x0 = (sqrt(1-abar_t) - sqrt(1-abar_prev))/sqrt(abar_t) * eps.
        let s = build_schedule(10, 0.05, 0.3).unwrap();
        let x0 = [0.4, -0.2, 0.9, -1.0];
        let eps = [0.3, -1.2, 0.7, 0.1];
        for t in 1..=10usize {
            let x_t = q_sample(&x0, t, &eps, &s).unwrap();

            // Ddim numerator uses abar_t: exact recovery.
            let rec = predict_x0(&x_t, &eps, t, &s, ReverseConvention::Ddim).unwrap();
            for (r, x) in rec.iter().zip(&x0) {
                assert!((r - x).abs() < 1e-12, "ddim should invert exactly");
            }

            // As printed: residual predicted symbolically.
            let abar_t = s.alpha_bar(t);
            let abar_prev = s.alpha_bar_prev(t);
            let coeff = (math::sqrt(1.0 - abar_t) - math::sqrt(1.0 - abar_prev)) / math::sqrt(abar_t);
            let rec = predict_x0(&x_t, &eps, t, &s, ReverseConvention::AsPrinted).unwrap();
            for ((r, x), e) in rec.iter().zip(&x0).zip(&eps) {
                let expect = x + coeff * e;
                assert!((r - expect).abs() < 1e-12, "printed-residual mismatch at t={t}");
            }
        }
    }

    #[test]
    fn predict_x0_singular_schedule() {
        let s = raw_schedule(vec![0.0]);
        assert!(matches!(
            predict_x0(&[1.0], &[0.0], 1, &s, ReverseConvention::AsPrinted),
            Err(Error::SingularSchedule { t: 1 })
        ));
    }

    #[test]
    fn reverse_step_zero_noise_formula() {
        let s = build_schedule(5, 0.1, 0.3).unwrap();
        let x = [0.5, -0.25, 1.5];
        for t in 1..=5usize {
            let out = reverse_step(&x, &[0.0; 3], t, &s, ReverseConvention::AsPrinted).unwrap();
            let factor = math::sqrt(s.alpha_bar_prev(t)) / math::sqrt(s.alpha_bar(t));
            for (o, xi) in out.iter().zip(&x) {
                assert!((o - factor * xi).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn reverse_step_terminal_error() {
        let s = build_schedule(3, 0.1, 0.2).unwrap();
        assert!(matches!(
            reverse_step(&[1.0], &[0.0], 0, &s, ReverseConvention::AsPrinted),
            Err(Error::AlreadyTerminal)
        ));
    }

    #[test]
    fn reverse_rollout_inverts_forward_with_oracle_noise() {
        // Loop-inversion oracle on a 4-pixel image: noise x0 to the deepest
        // level with a single eps, then walk the chain back feeding that same
        // eps as the prediction. Under the Ddim numerator every step lands
        // exactly on the forward marginal one level down, terminating at x0.
        let s = build_schedule(8, 0.02, 0.25).unwrap();
        let x0 = [0.9, -0.4, 0.05, -1.0];
        let eps = [1.3, -0.2, 0.55, -0.8];
        let mut x = q_sample(&x0, 8, &eps, &s).unwrap();
        for t in (1..=8usize).rev() {
            x = reverse_step(&x, &eps, t, &s, ReverseConvention::Ddim).unwrap();
        }
        for (got, want) in x.iter().zip(&x0) {
            assert!((got - want).abs() < 1e-6, "rollout residual {}", got - want);
        }
    }

    #[test]
    fn reverse_single_step_perfect_prediction() {
        // T = 1: one reverse step with the true eps returns x0 exactly under
        // the Ddim numerator (abar_prev = 1 kills the noise term).
        let s = build_schedule(1, 0.2, 0.2).unwrap();
        let x0 = [0.25, -0.75];
        let eps = [0.4, 1.1];
        let x1 = q_sample(&x0, 1, &eps, &s).unwrap();
        let back = reverse_step(&x1, &eps, 1, &s, ReverseConvention::Ddim).unwrap();
        for (got, want) in back.iter().zip(&x0) {
            assert!((got - want).abs() < 1e-12);
        }
        // As printed the numerator uses abar_0 = 1, so the noise is not
        // removed before rescaling; the residual is the symbolic one.
        let back = reverse_step(&x1, &eps, 1, &s, ReverseConvention::AsPrinted).unwrap();
        let abar = s.alpha_bar(1);
        for ((got, want), e) in back.iter().zip(&x0).zip(&eps) {
            let expect = want + math::sqrt(1.0 - abar) / math::sqrt(abar) * e;
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let s = build_schedule(10, 1e-3, 0.1).unwrap();
        let a = generate(&ZeroPredictor, &[], 6, &s, 42, ReverseConvention::AsPrinted).unwrap();
        let b = generate(&ZeroPredictor, &[], 6, &s, 42, ReverseConvention::AsPrinted).unwrap();
        assert_eq!(a, b);
        let c = generate(&ZeroPredictor, &[], 6, &s, 43, ReverseConvention::AsPrinted).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generate_zero_predictor_matches_closed_form() {
        // With eps_hat == 0 every reverse step multiplies by
        // sqrt(abar_{t-1}/abar_t); the chain telescopes to x_T / sqrt(abar_T)
        // followed by the final clamp. Verified per seed against the closed
        // form, and in distribution over 1000 seeds via moments.
        let s = build_schedule(20, 1e-3, 0.08).unwrap();
        let d = 4;
        let scale = 1.0 / math::sqrt(s.alpha_bar(20));

        let n_seeds = 1000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for seed in 0..n_seeds {
            let out = generate(&ZeroPredictor, &[], d, &s, seed, ReverseConvention::AsPrinted)
                .unwrap();
            // Reproduce the start of the chain and push it through the
            // telescoped closed form.
            let x_t = Rng::new(seed).normal_vec(d);
            for (o, z) in out.iter().zip(&x_t) {
                let expect = (scale * z).clamp(-1.0, 1.0);
                assert!((o - expect).abs() < 1e-9, "closed-form residual");
            }
            for o in &out {
                sum += o;
                sum_sq += o * o;
            }
        }
        let n = (n_seeds as usize * d) as f64;
        let mean = sum / n;
        let var = sum_sq / n - mean * mean;

        // Independent oracle for the clamped scaled normal's moments.
        let mut oracle = Rng::new(987_654);
        let m = 2_000_000;
        let mut osum = 0.0;
        let mut osum_sq = 0.0;
        for _ in 0..m {
            let v = (scale * oracle.normal()).clamp(-1.0, 1.0);
            osum += v;
            osum_sq += v * v;
        }
        let omean = osum / m as f64;
        let ovar = osum_sq / m as f64 - omean * omean;

        let se_mean = math::sqrt(ovar / n);
        assert!((mean - omean).abs() < 3.0 * se_mean, "mean {mean} vs {omean}");
        assert!((var - ovar).abs() / ovar < 0.05, "var {var} vs {ovar}");
    }

    #[test]
    fn forward_marginal_moments() {
        let s = build_schedule(12, 0.01, 0.2).unwrap();
        let x0 = [0.8, -0.3, 0.1, -0.9];
        let t = 7;
        let abar = s.alpha_bar(t);
        let n = 10_000;
        let mut rng = Rng::new(31);
        let mut sums = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        for _ in 0..n {
            let eps = rng.normal_vec(4);
            let x = q_sample(&x0, t, &eps, &s).unwrap();
            for i in 0..4 {
                sums[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        let nf = n as f64;
        for i in 0..4 {
            let mean = sums[i] / nf;
            let var = sq[i] / nf - mean * mean;
            let want_mean = math::sqrt(abar) * x0[i];
            let want_var = 1.0 - abar;
            let se = math::sqrt(want_var / nf);
            assert!((mean - want_mean).abs() < 3.0 * se, "mean off at {i}");
            assert!((var - want_var).abs() / want_var < 0.05, "variance off at {i}");
        }
    }
}
