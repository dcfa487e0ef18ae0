use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Domain, FeatureDims, Label, VideoRecord};

/// Token the stub reasoning client reads as evidence of fabrication.
pub const FABRICATED_MARKER: &str = "#fabricated";
/// Token the stub reasoning client reads as evidence of authenticity.
pub const VERIFIED_MARKER: &str = "#verified";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    /// How far fake text features drift from the visual/audio latent, in [0, 1].
    pub separability: f64,
    /// Probability that a record's text carries its label marker, in [0, 1].
    pub leak: f64,
    pub seed: u64,
    pub fake_ratio: f64,
    pub dims: FeatureDims,
    pub latent_dim: usize,
    pub noise: f64,
    /// Drift magnitude at separability 1, relative to the latent norm.
    pub shift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            separability: 0.9,
            leak: 0.7,
            seed: 0,
            fake_ratio: 0.25,
            dims: FeatureDims::synthetic(),
            latent_dim: 8,
            noise: 0.3,
            shift: 2.0,
        }
    }
}

const FILLER: [&str; 24] = [
    "footage", "report", "claims", "officials", "viral", "residents", "video", "shows", "city",
    "scene", "breaking", "update", "witness", "crowd", "statement", "local", "today", "warning",
    "rumor", "source", "camera", "night", "reaction", "interview",
];

fn topic_words(d: Domain) -> [&'static str; 3] {
    match d {
        Domain::Society => ["community", "neighbors", "festival"],
        Domain::Health => ["vaccine", "hospital", "doctor"],
        Domain::Disaster => ["earthquake", "flood", "rescue"],
        Domain::Culture => ["museum", "concert", "heritage"],
        Domain::Education => ["school", "exam", "students"],
        Domain::Finance => ["market", "bank", "stocks"],
        Domain::Politics => ["election", "minister", "parliament"],
        Domain::Science => ["laboratory", "discovery", "research"],
        Domain::Military => ["troops", "border", "drill"],
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = crate::numerics::norm(v);
    v.iter().map(|x| x / n).collect()
}

fn tile_with_noise(latent: &[f64], dim: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim)
        .map(|i| latent[i % latent.len()] + noise * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Generates a labelled corpus in which fakes show cross-modal inconsistency.
///
/// Every record draws one latent vector; visual and audio features tile it
/// with noise. For fakes the text latent is rotated towards a per-domain
/// campaign direction by an amount proportional to `separability`, keeping
/// its norm, so only cross-modal agreement separates the classes.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<VideoRecord>, CorpusError> {
    if cfg.n < 18 {
        return Err(CorpusError::TooSmall(cfg.n));
    }
    for (name, v) in [("separability", cfg.separability), ("leak", cfg.leak)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CorpusError::BadSynthSetting(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    if !(cfg.fake_ratio > 0.0 && cfg.fake_ratio < 1.0) {
        return Err(CorpusError::BadSynthSetting(format!(
            "fake_ratio must lie in (0, 1), got {}",
            cfg.fake_ratio
        )));
    }
    if cfg.latent_dim == 0 || cfg.dims.visual == 0 || cfg.dims.text == 0 || cfg.dims.audio == 0 {
        return Err(CorpusError::BadSynthSetting("dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = cfg.latent_dim;
    let campaigns: Vec<Vec<f64>> = Domain::ALL.iter().map(|_| unit(&gaussian(&mut rng, l))).collect();

    let per_class_min = Domain::ALL.len();
    let n_fake = ((cfg.n as f64 * cfg.fake_ratio).round() as usize).clamp(per_class_min, cfg.n - per_class_min);
    let mut slots: Vec<(Label, Domain)> = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n - n_fake {
        slots.push((Label::Real, Domain::ALL[i % 9]));
    }
    for i in 0..n_fake {
        slots.push((Label::Fake, Domain::ALL[i % 9]));
    }
    slots.shuffle(&mut rng);

    let mut out = Vec::with_capacity(cfg.n);
    for (k, (label, domain)) in slots.into_iter().enumerate() {
        let z = gaussian(&mut rng, l);
        let mut zt = z.clone();
        if label == Label::Fake {
            // Jitter norm is about half the unit campaign direction.
            let jitter = gaussian(&mut rng, l);
            let js = 0.5 / (l as f64).sqrt();
            let dir: Vec<f64> = campaigns[domain.index()]
                .iter()
                .zip(&jitter)
                .map(|(c, j)| c + js * j)
                .collect();
            let dir = unit(&dir);
            let zn = crate::numerics::norm(&z);
            let magnitude = cfg.separability * cfg.shift * rng.random_range(0.75..1.25) * zn;
            let moved: Vec<f64> = z.iter().zip(&dir).map(|(a, b)| a + magnitude * b).collect();
            let mn = crate::numerics::norm(&moved);
            zt = moved.iter().map(|v| v * zn / mn).collect();
        }
        let visual = tile_with_noise(&z, cfg.dims.visual, cfg.noise, &mut rng);
        let textual = tile_with_noise(&zt, cfg.dims.text, cfg.noise, &mut rng);
        let audio = tile_with_noise(&z, cfg.dims.audio, cfg.noise, &mut rng);

        let topic = topic_words(domain);
        let mut words = vec![topic[rng.random_range(0..3)].to_string()];
        for _ in 0..5 {
            words.push(FILLER[rng.random_range(0..FILLER.len())].to_string());
        }
        words.push(topic[rng.random_range(0..3)].to_string());
        if rng.random_bool(cfg.leak) {
            words.push(
                match label {
                    Label::Fake => FABRICATED_MARKER,
                    Label::Real => VERIFIED_MARKER,
                }
                .to_string(),
            );
        }
        out.push(VideoRecord {
            id: format!("syn-{k:05}"),
            domain,
            label,
            text: words.join(" "),
            visual,
            textual,
            audio,
            reports: None,
        });
    }
    Ok(out)
}
