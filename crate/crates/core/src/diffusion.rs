//! Noise schedules, forward corruption, the ancestral reverse step and the
//! variance-weighted training loss.
//!
//! Step indices follow the usual convention: steps run `1..=n_steps`,
//! `alpha_bar(0) = 1`, and the reverse process walks from `n_steps` down to 1.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Signal level reached by the last step of the sampling schedule.
pub const SAMPLING_FINAL_ALPHA_BAR: f64 = 1e-7;

/// Per-step β, α, ᾱ and σ of a discrete diffusion process.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// On-disk form of a schedule: the β sequence determines the rest; α is
/// stored alongside so schedules built from α reload bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub n_steps: usize,
    pub beta: Vec<f64>,
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
}

fn check_unit_interval(what: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Parameter("schedule needs at least one step".into()));
    }
    if let Some((i, v)) = values
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v > 0.0 && v < 1.0))
    {
        return Err(Error::Parameter(format!(
            "{what} at step {} is {v}, expected a value in (0, 1)",
            i + 1
        )));
    }
    Ok(())
}

impl NoiseSchedule {
    /// Builds a schedule from its β sequence (`beta[0]` is step 1).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        check_unit_interval("beta", &beta)?;
        let alpha = beta.iter().map(|b| 1.0 - b).collect();
        Ok(Self::from_parts(beta, alpha))
    }

    /// Builds a schedule from per-step α; preferred when α is known more
    /// precisely than `1 − β` (α close to 0).
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        check_unit_interval("alpha", &alpha)?;
        let beta = alpha.iter().map(|a| 1.0 - a).collect();
        Ok(Self::from_parts(beta, alpha))
    }

    fn from_parts(beta: Vec<f64>, alpha: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        let mut sigma = Vec::with_capacity(beta.len());
        for n in 1..=beta.len() {
            if n == 1 {
                sigma.push(0.0);
            } else {
                let var = (1.0 - alpha_bar[n - 1]) / (1.0 - alpha_bar[n]) * beta[n - 1];
                sigma.push(var.max(0.0).sqrt());
            }
        }
        Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.beta.len()
    }

    /// β of step `n` (1-based).
    pub fn beta(&self, n: usize) -> f64 {
        self.beta[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alpha[n - 1]
    }

    /// Cumulative signal fraction after `n` steps; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    /// Reverse-step noise scale of step `n`; zero at `n == 1`.
    pub fn sigma(&self, n: usize) -> f64 {
        self.sigma[n - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn to_file(&self) -> ScheduleFile {
        ScheduleFile {
            n_steps: self.n_steps(),
            beta: self.beta.clone(),
            alpha: Some(self.alpha.clone()),
        }
    }

    pub fn from_file(file: ScheduleFile) -> Result<Self> {
        if file.n_steps != file.beta.len() {
            return Err(Error::Parameter(format!(
                "schedule file declares {} steps but lists {} betas",
                file.n_steps,
                file.beta.len()
            )));
        }
        match file.alpha {
            Some(alpha) => {
                if alpha.len() != file.beta.len()
                    || alpha
                        .iter()
                        .zip(&file.beta)
                        .any(|(a, b)| (1.0 - a - b).abs() > 1e-12)
                {
                    return Err(Error::Parameter(
                        "schedule file alpha and beta disagree".into(),
                    ));
                }
                check_unit_interval("beta", &file.beta)?;
                check_unit_interval("alpha", &alpha)?;
                Ok(Self::from_parts(file.beta, alpha))
            }
            None => Self::from_betas(file.beta),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("schedule serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ScheduleFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("schedule file: {e}")))?;
        Self::from_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Linear β schedule from `beta_min` to `beta_max`.
pub fn build_training_schedule(
    n_steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if n_steps < 1 {
        return Err(Error::Parameter("n_steps must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )));
    }
    let beta = (0..n_steps)
        .map(|i| {
            if n_steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (n_steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

/// Target ᾱ of the sampling schedule at step `n` of `n_steps`:
/// `exp(ln(1e-7) · (1 − cos(n/N · π/2))^{3/2})`.
pub fn sampling_alpha_bar(n: usize, n_steps: usize) -> f64 {
    let phase = n as f64 / n_steps as f64 * std::f64::consts::FRAC_PI_2;
    (SAMPLING_FINAL_ALPHA_BAR.ln() * (1.0 - phase.cos()).powf(1.5)).exp()
}

/// Sampling schedule whose cumulative ᾱ follows [`sampling_alpha_bar`].
pub fn build_inference_schedule(n_steps: usize) -> Result<NoiseSchedule> {
    if n_steps < 1 {
        return Err(Error::Parameter("n_steps must be at least 1".into()));
    }
    let targets: Vec<f64> = (0..=n_steps)
        .map(|n| sampling_alpha_bar(n, n_steps))
        .collect();
    NoiseSchedule::from_alphas(targets.windows(2).map(|w| w[1] / w[0]).collect())
}

/// Draws a continuous noise level √ᾱ: a step `n` uniformly from
/// `1..=n_steps`, then √ᾱ uniformly between √ᾱ_n and √ᾱ_{n−1}.
pub fn sample_noise_level<R: Rng + ?Sized>(schedule: &NoiseSchedule, rng: &mut R) -> f64 {
    let n = rng.gen_range(1..=schedule.n_steps());
    let lo = schedule.alpha_bar(n).sqrt();
    let hi = schedule.alpha_bar(n - 1).sqrt();
    let u: f64 = rng.gen();
    // (lo, hi]
    lo + (hi - lo) * (1.0 - u)
}

fn check_same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

/// `√ᾱ·y0 + √(1 − ᾱ)·ε`, elementwise.
pub fn forward_diffuse(y0: &[f64], sqrt_alpha_bar: f64, epsilon: &[f64]) -> Result<Vec<f64>> {
    check_same_len("forward_diffuse", y0.len(), epsilon.len())?;
    if !(sqrt_alpha_bar > 0.0 && sqrt_alpha_bar <= 1.0) {
        return Err(Error::Parameter(format!(
            "sqrt_alpha_bar must lie in (0, 1], got {sqrt_alpha_bar}"
        )));
    }
    let noise_scale = (1.0 - sqrt_alpha_bar * sqrt_alpha_bar).max(0.0).sqrt();
    Ok(y0
        .iter()
        .zip(epsilon)
        .map(|(y, e)| sqrt_alpha_bar * y + noise_scale * e)
        .collect())
}

/// One ancestral update from step `n` to `n − 1`:
/// `(y_n − β_n/√(1−ᾱ_n)·ε̂)/√α_n + σ_n·z`.
pub fn reverse_step(
    y_n: &[f64],
    epsilon_pred: &[f64],
    schedule: &NoiseSchedule,
    n: usize,
    z: &[f64],
) -> Result<Vec<f64>> {
    if n < 1 || n > schedule.n_steps() {
        return Err(Error::Parameter(format!(
            "step {n} outside 1..={}",
            schedule.n_steps()
        )));
    }
    check_same_len("reverse_step prediction", y_n.len(), epsilon_pred.len())?;
    check_same_len("reverse_step noise", y_n.len(), z.len())?;
    let inv_sqrt_alpha = 1.0 / schedule.alpha(n).sqrt();
    let eps_coef = schedule.beta(n) / (1.0 - schedule.alpha_bar(n)).sqrt();
    let sigma = schedule.sigma(n);
    Ok(y_n
        .iter()
        .zip(epsilon_pred)
        .zip(z)
        .map(|((y, e), z)| inv_sqrt_alpha * (y - eps_coef * e) + sigma * z)
        .collect())
}

/// Components of the variance-weighted ε loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `residual / omega + log_omega`
    pub total: f64,
    /// Weighted mean squared ε error.
    pub residual: f64,
    pub omega: f64,
    pub log_omega: f64,
}

impl LossBreakdown {
    pub fn from_parts(residual: f64, log_omega: f64) -> Self {
        let omega = log_omega.exp();
        Self {
            total: residual / omega + log_omega,
            residual,
            omega,
            log_omega,
        }
    }
}

/// `Σ w·(ε̂ − ε)² / Σ w`
pub fn weighted_residual(
    epsilon_pred: &[f64],
    epsilon_true: &[f64],
    sample_weights: &[f64],
) -> Result<f64> {
    check_same_len(
        "loss prediction/target",
        epsilon_pred.len(),
        epsilon_true.len(),
    )?;
    check_same_len(
        "loss prediction/weights",
        epsilon_pred.len(),
        sample_weights.len(),
    )?;
    let wsum: f64 = sample_weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::Domain(
            "sample weights must have positive sum".into(),
        ));
    }
    let num: f64 = epsilon_pred
        .iter()
        .zip(epsilon_true)
        .zip(sample_weights)
        .map(|((p, t), w)| w * (p - t) * (p - t))
        .sum();
    Ok(num / wsum)
}

/// Variance-weighted ε loss `residual/ω + ln ω`.
pub fn weighted_kl_loss(
    epsilon_pred: &[f64],
    epsilon_true: &[f64],
    omega: f64,
    sample_weights: &[f64],
) -> Result<LossBreakdown> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(Error::Domain(format!(
            "omega must be positive, got {omega}"
        )));
    }
    let residual = weighted_residual(epsilon_pred, epsilon_true, sample_weights)?;
    Ok(LossBreakdown {
        total: residual / omega + omega.ln(),
        residual,
        omega,
        log_omega: omega.ln(),
    })
}

/// Score of the noisy marginal implied by an ε prediction: `−ε/√(1 − ᾱ)`.
pub fn score_from_epsilon(epsilon: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::Domain(format!(
            "score needs alpha_bar in (0, 1), got {alpha_bar}"
        )));
    }
    let k = -1.0 / (1.0 - alpha_bar).sqrt();
    Ok(epsilon.iter().map(|e| k * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_training_schedule() {
        let s = build_training_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn two_step_product() {
        let s = build_training_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn linear_betas_interpolate_endpoints() {
        let s = build_training_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert!((s.beta(500) - (1e-4 + (0.02 - 1e-4) * 499.0 / 999.0)).abs() < 1e-15);
    }

    #[test]
    fn sigma_is_posterior_std() {
        let s = build_training_schedule(3, 0.1, 0.3).unwrap();
        for n in 2..=3 {
            let var = (1.0 - s.alpha_bar(n - 1)) / (1.0 - s.alpha_bar(n)) * s.beta(n);
            assert!((s.sigma(n) - var.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_schedule_bounds() {
        assert!(matches!(
            build_training_schedule(0, 0.1, 0.2),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            build_training_schedule(10, 0.0, 0.2),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            build_training_schedule(10, 0.3, 0.2),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            build_training_schedule(10, 0.1, 1.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            build_inference_schedule(0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn inference_schedule_values() {
        let s = build_inference_schedule(1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1000) / 1e-7 - 1.0).abs() < 1e-12);
        // (1 - cos(pi/4))^1.5 * ln(1e-7) = -2.5553 -> 0.0777
        assert!((s.alpha_bar(500) / 0.0777 - 1.0).abs() < 1e-3);
        assert!((s.alpha_bar(500) / sampling_alpha_bar(500, 1000) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_level_in_single_interval() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let v = sample_noise_level(&s, &mut rng);
            assert!((0.5..=1.0).contains(&v) && v > 0.5);
        }
    }

    #[test]
    fn noise_level_near_one_for_tiny_betas() {
        let s = build_training_schedule(10, 1e-9, 1e-9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!(sample_noise_level(&s, &mut rng) > 1.0 - 1e-7);
        }
    }

    #[test]
    fn forward_diffuse_cases() {
        let y0 = [0.3, -0.2];
        let eps = [1.0, 2.0];
        assert_eq!(forward_diffuse(&y0, 1.0, &eps).unwrap(), y0.to_vec());
        let near_noise = forward_diffuse(&y0, 1e-9, &eps).unwrap();
        assert!((near_noise[1] - 2.0).abs() < 1e-8);
        let v = forward_diffuse(&[1.0], 0.5, &[1.0]).unwrap();
        assert!((v[0] - 1.3660254037844386).abs() < 1e-12);
        assert!(matches!(
            forward_diffuse(&[1.0], 0.5, &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));
        assert!(forward_diffuse(&[1.0], 0.0, &[1.0]).is_err());
    }

    #[test]
    fn reverse_step_cases() {
        // Step 2 has beta = 1e-300, so alpha_2 == 1.0 in floating point.
        let s = NoiseSchedule::from_betas(vec![0.5, 1e-300]).unwrap();
        assert_eq!(s.alpha(2), 1.0);
        let y = [0.25, -1.5, 3.0];
        assert_eq!(
            reverse_step(&y, &[0.7, 0.1, -0.2], &s, 2, &[0.0; 3]).unwrap(),
            y.to_vec()
        );
        assert_eq!(
            reverse_step(&[0.0], &[0.0], &s, 2, &[0.0]).unwrap(),
            vec![0.0]
        );
        assert!(matches!(
            reverse_step(&[0.0], &[0.0], &s, 0, &[0.0]),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            reverse_step(&[0.0], &[0.0], &s, 3, &[0.0]),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            reverse_step(&[0.0], &[0.0, 1.0], &s, 1, &[0.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn reverse_step_matches_hand_value() {
        // alpha_2 = 0.99, alpha_bar_2 = 0.5, y = 1, eps = 0.5, z = 0:
        // (1 - 0.01 / sqrt(0.5) * 0.5) / sqrt(0.99) = 0.99292893 / 0.99498744
        let s = NoiseSchedule::from_betas(vec![1.0 - 0.5 / 0.99, 0.01]).unwrap();
        assert!((s.alpha(2) - 0.99).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.5).abs() < 1e-15);
        let out = reverse_step(&[1.0], &[0.5], &s, 2, &[0.0]).unwrap();
        assert!((out[0] - 0.997_931_1).abs() < 1e-7, "{}", out[0]);
    }

    #[test]
    fn reverse_of_forward_recovers_signal_on_one_step() {
        let s = NoiseSchedule::from_betas(vec![0.36]).unwrap();
        let y0 = [0.7, -0.4, 0.1];
        let eps = [0.3, 1.2, -0.8];
        let noisy = forward_diffuse(&y0, s.alpha_bar(1).sqrt(), &eps).unwrap();
        let back = reverse_step(&noisy, &eps, &s, 1, &[0.0; 3]).unwrap();
        for (b, y) in back.iter().zip(y0) {
            assert!((b - y).abs() < 1e-14);
        }
    }

    #[test]
    fn kl_loss_cases() {
        let w = [1.0, 1.0, 0.1];
        let e = [0.1, 0.2, 0.3];
        let l = weighted_kl_loss(&e, &e, 1.0, &w).unwrap();
        assert_eq!(l.total, 0.0);
        let l = weighted_kl_loss(&[1.0], &[0.0], 1.0, &[1.0]).unwrap();
        assert_eq!(l.total, 1.0);
        let r = weighted_residual(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let l = weighted_kl_loss(&[1.0, 0.0], &[0.0, 0.0], r, &[1.0, 1.0]).unwrap();
        assert!((l.total - (1.0 + r.ln())).abs() < 1e-15);
        assert!(matches!(
            weighted_kl_loss(&e, &e, 0.0, &w),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            weighted_kl_loss(&e, &e, -1.0, &w),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kl_loss_minimised_at_residual() {
        let pred = [0.5, -0.3, 0.9, 0.0];
        let truth = [0.1, 0.2, 0.4, -0.6];
        let weights = [1.0, 1.0, 0.1, 0.1];
        let r = weighted_residual(&pred, &truth, &weights).unwrap();
        let best = weighted_kl_loss(&pred, &truth, r, &weights).unwrap().total;
        for i in 1..400 {
            let omega = i as f64 * 0.005;
            let l = weighted_kl_loss(&pred, &truth, omega, &weights)
                .unwrap()
                .total;
            assert!(l >= best - 1e-12, "omega {omega}: {l} < {best}");
        }
    }

    #[test]
    fn score_cases() {
        assert_eq!(score_from_epsilon(&[0.0], 0.5).unwrap(), vec![-0.0]);
        let s = score_from_epsilon(&[1.0], 0.75).unwrap();
        assert!((s[0] + 2.0).abs() < 1e-12);
        assert!(matches!(
            score_from_epsilon(&[1.0], 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn schedule_file_round_trip_is_exact() {
        for s in [
            build_inference_schedule(1000).unwrap(),
            build_training_schedule(1000, 1e-4, 0.02).unwrap(),
        ] {
            let back = NoiseSchedule::from_toml(&s.to_toml()).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn mismatched_schedule_file_rejected() {
        let text = "n_steps = 3\nbeta = [0.1, 0.2]\n";
        assert!(matches!(
            NoiseSchedule::from_toml(text),
            Err(Error::Parameter(_))
        ));
    }

    proptest! {
        #[test]
        fn alpha_bar_strictly_decreasing(n in 1usize..300, lo in 1e-6f64..0.5, span in 0.0f64..0.49) {
            let s = build_training_schedule(n, lo, lo + span).unwrap();
            for w in s.alpha_bars().windows(2) {
                prop_assert!(w[1] < w[0]);
                prop_assert!(w[1] > 0.0 && w[0] <= 1.0);
            }
            for k in 1..=n {
                prop_assert_eq!(s.alpha_bar(k), s.alpha_bar(k - 1) * s.alpha(k));
                prop_assert!(s.sigma(k) >= 0.0);
            }
        }

        #[test]
        fn inference_schedule_monotone(n in 1usize..2000) {
            let s = build_inference_schedule(n).unwrap();
            prop_assert_eq!(s.alpha_bar(0), 1.0);
            prop_assert!((s.alpha_bar(n) / 1e-7 - 1.0).abs() < 1e-12);
            for w in s.alpha_bars().windows(2) {
                prop_assert!(w[1] < w[0]);
            }
        }

        #[test]
        fn sampled_level_within_schedule_range(seed in any::<u64>()) {
            let s = build_training_schedule(50, 1e-3, 0.2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = sample_noise_level(&s, &mut rng);
            prop_assert!(v > s.alpha_bar(50).sqrt() && v <= 1.0);
        }
    }
}
