//! Generator backends and the ancestral-sampling kernel.
//!
//! Enhanced prompts reach image/3D/video backends through the
//! [`GeneratorAdapter`] interface; the backends themselves are remote. The
//! diffusion update rule those backends run internally is reproduced here as
//! a standalone kernel over a pluggable noise predictor, so the math is
//! executable and testable without model weights: one step computes
//!
//! ```text
//! z_{i-1} = (1/sqrt(alpha_i)) * (z_i - ((1 - alpha_i)/sqrt(1 - alpha_bar_i)) * eps_hat)
//!           + sigma_i * eps,   eps ~ N(0, I)
//! ```
//!
//! Gaussian draws come from a ChaCha8 stream with an explicit seed, sampled
//! through the standard-normal distribution, so stochastic runs replay
//! exactly.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::EnhancedPrompt;
use crate::error::{Error, Result};

/// Output modality of a generator backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenModality {
    #[serde(rename = "image")]
    Image,
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "video")]
    Video,
}

/// A text-driven generator backend.
///
/// The adapter's name doubles as the `<Generator>` substitution in the
/// aggregation instruction; passthrough config (e.g. FreeU parameters
/// `b1/b2/s1/s2`) rides to the backend opaquely — its mechanism lives inside
/// the remote model.
pub trait GeneratorAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn modality(&self) -> GenModality;
    fn passthrough(&self) -> &BTreeMap<String, String>;
    fn generate(&self, prompt: &EnhancedPrompt) -> Result<GeneratedArtifact>;
}

/// A backend's output plus the provenance of the prompt chain that produced
/// it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedArtifact {
    pub modality: GenModality,
    pub payload: Vec<u8>,
    pub prompt_provenance: crate::aggregate::Provenance,
    pub backend_metadata: BTreeMap<String, String>,
}

/// Soft contract: warn (in metadata) when the adapter is not the generator
/// the prompt was enhanced for, but proceed.
fn name_mismatch_metadata(adapter_name: &str, prompt: &EnhancedPrompt) -> Option<String> {
    (adapter_name != prompt.provenance.generator_name).then(|| {
        format!(
            "prompt was enhanced for {:?}, dispatched to {adapter_name:?}",
            prompt.provenance.generator_name
        )
    })
}

/// Offline backend. The payload is the SHA-256 digest bytes of the prompt
/// text: 32 deterministic bytes per distinct prompt.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    name: String,
    modality: GenModality,
    passthrough: BTreeMap<String, String>,
}

impl MockGenerator {
    pub fn new(name: impl Into<String>, modality: GenModality) -> MockGenerator {
        MockGenerator {
            name: name.into(),
            modality,
            passthrough: BTreeMap::new(),
        }
    }

    pub fn with_passthrough(mut self, config: BTreeMap<String, String>) -> MockGenerator {
        self.passthrough = config;
        self
    }
}

impl GeneratorAdapter for MockGenerator {
    fn name(&self) -> &str {
        &self.name
    }

    fn modality(&self) -> GenModality {
        self.modality
    }

    fn passthrough(&self) -> &BTreeMap<String, String> {
        &self.passthrough
    }

    fn generate(&self, prompt: &EnhancedPrompt) -> Result<GeneratedArtifact> {
        let payload = Sha256::digest(prompt.text.as_bytes()).to_vec();
        let mut backend_metadata = BTreeMap::new();
        backend_metadata.insert("backend".to_string(), "mock".to_string());
        if let Some(warning) = name_mismatch_metadata(&self.name, prompt) {
            backend_metadata.insert("generator_name_mismatch".to_string(), warning);
        }
        Ok(GeneratedArtifact {
            modality: self.modality,
            payload,
            prompt_provenance: prompt.provenance.clone(),
            backend_metadata,
        })
    }
}

/// Noise schedule for the sampling kernel. `alpha_bars[i]` is the running
/// product of `alphas[..=i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl DiffusionSchedule {
    /// Build a schedule from per-step alphas in `(0, 1]` and sigmas `>= 0`,
    /// deriving the cumulative products.
    pub fn new(alphas: Vec<f64>, sigmas: Vec<f64>) -> Result<DiffusionSchedule> {
        if alphas.len() != sigmas.len() {
            return Err(Error::InvalidSchedule(format!(
                "{} alphas but {} sigmas",
                alphas.len(),
                sigmas.len()
            )));
        }
        if alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::InvalidSchedule("alphas must lie in (0, 1]".into()));
        }
        if sigmas.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(Error::InvalidSchedule(
                "sigmas must be finite and >= 0".into(),
            ));
        }
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut running = 1.0f64;
        for &a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        Ok(DiffusionSchedule {
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    /// Number of steps K.
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// `alpha_i`, 1-based as in the update rule.
    pub fn alpha(&self, i: usize) -> f64 {
        self.alphas[i - 1]
    }

    /// `alpha_bar_i`, 1-based.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bars[i - 1]
    }

    /// `sigma_i`, 1-based.
    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas[i - 1]
    }
}

/// One ancestral update: `z_i -> z_{i-1}` given the predicted noise and a
/// standard-normal draw. Linear in `(z_i, predicted_noise, gaussian_draw)`
/// jointly.
///
/// `alpha_bar_i = 1` makes the noise coefficient 0/0; that is fine when the
/// predicted noise is exactly zero (the term vanishes) and an error
/// otherwise.
pub fn ancestral_step(
    z_i: &[f64],
    i: usize,
    schedule: &DiffusionSchedule,
    predicted_noise: &[f64],
    gaussian_draw: &[f64],
) -> Result<Vec<f64>> {
    if i < 1 || i > schedule.len() {
        return Err(Error::InvalidSchedule(format!(
            "step {i} outside 1..={}",
            schedule.len()
        )));
    }
    if z_i.len() != predicted_noise.len() || z_i.len() != gaussian_draw.len() {
        return Err(Error::DimensionMismatch {
            left: z_i.len(),
            right: predicted_noise.len().max(gaussian_draw.len()),
        });
    }
    let alpha = schedule.alpha(i);
    let alpha_bar = schedule.alpha_bar(i);
    let sigma = schedule.sigma(i);

    let noise_scale = if alpha_bar < 1.0 {
        (1.0 - alpha) / (1.0 - alpha_bar).sqrt()
    } else if predicted_noise.iter().all(|&x| x == 0.0) {
        0.0
    } else {
        return Err(Error::DegenerateStep { step: i });
    };

    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    Ok(z_i
        .iter()
        .zip(predicted_noise)
        .zip(gaussian_draw)
        .map(|((&z, &eps_hat), &eps)| inv_sqrt_alpha * (z - noise_scale * eps_hat) + sigma * eps)
        .collect())
}

/// Run the kernel from `z_K` down to `z_0`.
///
/// The predictor sees `(z_i, i, prompt)` each step; per-step Gaussian draws
/// come from `ChaCha8Rng::seed_from_u64(seed)`, so a fixed seed replays the
/// trajectory exactly. A zero-length schedule returns `z_K` unchanged.
pub fn sample_latent<F>(
    z_k: &[f64],
    schedule: &DiffusionSchedule,
    noise_predictor: F,
    prompt: &str,
    seed: u64,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], usize, &str) -> Result<Vec<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = z_k.to_vec();
    for i in (1..=schedule.len()).rev() {
        let predicted = noise_predictor(&z, i, prompt).map_err(|e| Error::PredictorFailed {
            step: i,
            source: Box::new(e),
        })?;
        let draw: Vec<f64> = (0..z.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        z = ancestral_step(&z, i, schedule, &predicted, &draw)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::Provenance;

    fn enhanced(text: &str, generator: &str) -> EnhancedPrompt {
        EnhancedPrompt {
            text: text.to_string(),
            variants: Vec::new(),
            provenance: Provenance {
                fact_ids: vec!["f0".into()],
                instruction_sha256: "0".repeat(64),
                provider_name: "mock:echo".into(),
                generator_name: generator.to_string(),
            },
        }
    }

    #[test]
    fn mock_payload_is_the_documented_prompt_hash() {
        let adapter = MockGenerator::new("mock", GenModality::Image);
        let artifact = adapter.generate(&enhanced("a sea eagle", "mock")).unwrap();
        assert_eq!(
            artifact.payload,
            Sha256::digest("a sea eagle".as_bytes()).to_vec()
        );
        let again = adapter.generate(&enhanced("a sea eagle", "mock")).unwrap();
        assert_eq!(artifact, again);
    }

    #[test]
    fn name_mismatch_warns_but_proceeds() {
        let adapter = MockGenerator::new("mock", GenModality::Image);
        let artifact = adapter
            .generate(&enhanced("a sea eagle", "Stable Diffusion XL"))
            .unwrap();
        assert!(artifact
            .backend_metadata
            .contains_key("generator_name_mismatch"));
        assert!(!artifact.payload.is_empty());
    }

    #[test]
    fn schedule_cumulative_products_hold() {
        let schedule = DiffusionSchedule::new(vec![0.9, 0.8, 0.7], vec![0.0, 0.1, 0.2]).unwrap();
        assert!((schedule.alpha_bar(1) - 0.9).abs() < 1e-12);
        assert!((schedule.alpha_bar(2) - 0.9 * 0.8).abs() < 1e-12);
        assert!((schedule.alpha_bar(3) - 0.9 * 0.8 * 0.7).abs() < 1e-12);
        for i in 2..=3 {
            let recomposed = schedule.alpha_bar(i - 1) * schedule.alpha(i);
            assert!((schedule.alpha_bar(i) - recomposed).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(DiffusionSchedule::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiffusionSchedule::new(vec![1.1], vec![0.0]).is_err());
        assert!(DiffusionSchedule::new(vec![0.5], vec![-0.1]).is_err());
        assert!(DiffusionSchedule::new(vec![0.5, 0.5], vec![0.0]).is_err());
    }

    #[test]
    fn zero_noise_zero_sigma_reduces_to_rescaling() {
        let schedule = DiffusionSchedule::new(vec![0.25], vec![0.0]).unwrap();
        let z = vec![1.0, -2.0, 0.5];
        let out = ancestral_step(&z, 1, &schedule, &[0.0; 3], &[0.0; 3]).unwrap();
        // 1/sqrt(0.25) = 2
        assert_eq!(out, vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn hand_computed_single_step() {
        // alpha_1 = 0.5 so alpha_bar_1 = 0.5; sigma = 0; z = (1, 0),
        // eps_hat = (1, 1). Closed form gives (sqrt(2) - 1, -1).
        let schedule = DiffusionSchedule::new(vec![0.5], vec![0.0]).unwrap();
        let out = ancestral_step(&[1.0, 0.0], 1, &schedule, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((out[0] - (2.0f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!((out[1] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_first_step_guard() {
        // alpha = 1 makes alpha_bar = 1: zero predicted noise passes through,
        // nonzero errors.
        let schedule = DiffusionSchedule::new(vec![1.0], vec![0.0]).unwrap();
        assert!(ancestral_step(&[1.0], 1, &schedule, &[0.0], &[0.0]).is_ok());
        assert!(matches!(
            ancestral_step(&[1.0], 1, &schedule, &[0.5], &[0.0]),
            Err(Error::DegenerateStep { step: 1 })
        ));
    }

    #[test]
    fn zero_noise_run_telescopes_to_the_closed_form() {
        let alphas = vec![0.95, 0.9, 0.85, 0.8, 0.75];
        let schedule = DiffusionSchedule::new(alphas, vec![0.0; 5]).unwrap();
        let z_k = vec![1.0, -0.5, 2.0];
        let zero = |z: &[f64], _i: usize, _p: &str| Ok(vec![0.0; z.len()]);
        let z0 = sample_latent(&z_k, &schedule, zero, "p", 0).unwrap();
        let scale = 1.0 / schedule.alpha_bar(5).sqrt();
        for (a, b) in z0.iter().zip(&z_k) {
            assert!((a - b * scale).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_schedule_returns_input() {
        let schedule = DiffusionSchedule::new(vec![], vec![]).unwrap();
        let z = vec![3.0, 4.0];
        let zero = |z: &[f64], _i: usize, _p: &str| Ok(vec![0.0; z.len()]);
        assert_eq!(sample_latent(&z, &schedule, zero, "p", 9).unwrap(), z);
    }

    #[test]
    fn fixed_seed_replays_exactly() {
        let schedule = DiffusionSchedule::new(vec![0.9, 0.8], vec![0.3, 0.4]).unwrap();
        let zero = |z: &[f64], _i: usize, _p: &str| Ok(vec![0.0; z.len()]);
        let a = sample_latent(&[1.0, 2.0], &schedule, zero, "p", 42).unwrap();
        let b = sample_latent(&[1.0, 2.0], &schedule, zero, "p", 42).unwrap();
        let c = sample_latent(&[1.0, 2.0], &schedule, zero, "p", 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stochastic_run_matches_independent_recurrence() {
        // Oracle: a second implementation of the loop, replaying the same
        // seeded draws.
        let schedule = DiffusionSchedule::new(vec![0.9, 0.8, 0.7], vec![0.5, 0.25, 0.1]).unwrap();
        let z_k = vec![0.3, -1.2];
        let zero = |z: &[f64], _i: usize, _p: &str| Ok(vec![0.0; z.len()]);
        let got = sample_latent(&z_k, &schedule, zero, "p", 7).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut z = z_k.clone();
        for i in (1..=3usize).rev() {
            let draw: Vec<f64> = (0..z.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let a = schedule.alpha(i);
            let ab = schedule.alpha_bar(i);
            let s = schedule.sigma(i);
            z = z
                .iter()
                .zip(&draw)
                .map(|(&zi, &e)| {
                    (1.0 / a.sqrt()) * (zi - ((1.0 - a) / (1.0 - ab).sqrt()) * 0.0) + s * e
                })
                .collect();
        }
        for (a, b) in got.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn predictor_failure_reports_the_step() {
        let schedule = DiffusionSchedule::new(vec![0.9, 0.8], vec![0.0, 0.0]).unwrap();
        let failing = |_z: &[f64], i: usize, _p: &str| {
            if i == 1 {
                Err(Error::EmptyText)
            } else {
                Ok(vec![0.0, 0.0])
            }
        };
        match sample_latent(&[1.0, 1.0], &schedule, failing, "p", 0) {
            Err(Error::PredictorFailed { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected predictor failure, got {other:?}"),
        }
    }

    #[test]
    fn step_is_jointly_linear() {
        let schedule = DiffusionSchedule::new(vec![0.6], vec![0.8]).unwrap();
        let (a, b) = (1.7, -0.4);
        let z1 = [0.2, -0.9];
        let z2 = [1.1, 0.3];
        let n1 = [0.5, 0.1];
        let n2 = [-0.2, 0.7];
        let g1 = [0.9, -0.3];
        let g2 = [0.0, 1.3];

        let combined_inputs: Vec<f64> = (0..2).map(|d| a * z1[d] + b * z2[d]).collect();
        let combined_noise: Vec<f64> = (0..2).map(|d| a * n1[d] + b * n2[d]).collect();
        let combined_draw: Vec<f64> = (0..2).map(|d| a * g1[d] + b * g2[d]).collect();

        let lhs = ancestral_step(
            &combined_inputs,
            1,
            &schedule,
            &combined_noise,
            &combined_draw,
        )
        .unwrap();
        let r1 = ancestral_step(&z1, 1, &schedule, &n1, &g1).unwrap();
        let r2 = ancestral_step(&z2, 1, &schedule, &n2, &g2).unwrap();
        for d in 0..2 {
            assert!((lhs[d] - (a * r1[d] + b * r2[d])).abs() < 1e-9);
        }
    }
}
