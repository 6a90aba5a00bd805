//! Synthetic word-aligned corpus with controllable cross-modal coupling.
//!
//! Every segment carries a shared latent AR(1) trajectory `z` and private
//! AR(1) trajectories, all with unit stationary variance. Audio and video
//! feature `j` is an affine map of `c z + sqrt(1 - c^2) u_j`, with its own
//! private `u_j`. Text has a single private trajectory: tokens quantise
//! `tanh(c z + sqrt(1 - c^2) u)` into the vocabulary and text features embed
//! the token's bin centre. The label is `3 tanh(k * mean_t z_t)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AlignedSegment, DataError, Dataset, DatasetHeader, Modality, ModalityDims, ModalitySequence};
use crate::autodiff::DenseArray;
use crate::train::stream_rng;

const RHO: f64 = 0.5;
const LABEL_GAIN: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_segments: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub dims: ModalityDims,
    pub vocab: usize,
    pub coupling: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_segments: 8,
            t_min: 3,
            t_max: 6,
            dims: ModalityDims {
                text: 4,
                audio: 3,
                video: 3,
            },
            vocab: 16,
            coupling: 0.9,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let d = self.dims;
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.n_segments == 0 || self.t_min == 0 || d.text == 0 || d.audio == 0 || d.video == 0 || self.vocab == 0 {
            return bad("segment count, lengths, dimensions and vocabulary must all be >= 1".into());
        }
        if self.t_min > self.t_max {
            return bad(format!("t_min {} exceeds t_max {}", self.t_min, self.t_max));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return bad(format!("coupling must lie in [0, 1], got {}", self.coupling));
        }
        Ok(())
    }
}

/// Per-dimension gains in [0.5, 1.5] and offsets in [-0.2, 0.2].
struct Affine {
    gain: Vec<f64>,
    offset: Vec<f64>,
}

impl Affine {
    fn draw(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            gain: (0..d).map(|_| rng.gen_range(0.5..=1.5)).collect(),
            offset: (0..d).map(|_| rng.gen_range(-0.2..=0.2)).collect(),
        }
    }

    /// Row `t` maps `s[j][t]` through dimension `j`; a single channel feeds every dimension.
    fn rows(&self, s: &[Vec<f64>]) -> DenseArray<f64> {
        let (d, t) = (self.gain.len(), s[0].len());
        let values = (0..t)
            .flat_map(|step| (0..d).map(move |j| self.gain[j] * s[j % s.len()][step] + self.offset[j]))
            .collect();
        DenseArray::matrix(t, d, values)
    }
}

fn ar1(t: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let innovation = (1.0 - RHO * RHO).sqrt();
    let mut x: f64 = rng.sample(StandardNormal);
    let mut out = Vec::with_capacity(t);
    for step in 0..t {
        if step > 0 {
            let e: f64 = rng.sample(StandardNormal);
            x = RHO * x + innovation * e;
        }
        out.push(x);
    }
    out
}

fn token_of(s: f64, vocab: usize) -> usize {
    let unit = (s.tanh() + 1.0) / 2.0;
    ((unit * vocab as f64) as usize).min(vocab - 1)
}

/// `atanh` of the token's bin centre, i.e. the latent value the token stands for.
fn bin_latent(token: usize, vocab: usize) -> f64 {
    let centre = (token as f64 + 0.5) / vocab as f64;
    (2.0 * centre - 1.0).atanh()
}

/// Deterministic corpus for `config.seed`; ids are zero-padded so id order
/// equals generation order.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let mut prng = stream_rng(config.seed, "synth-params", 0);
    let text_map = Affine::draw(config.dims.text, &mut prng);
    let audio_map = Affine::draw(config.dims.audio, &mut prng);
    let video_map = Affine::draw(config.dims.video, &mut prng);
    let c = config.coupling;
    let private = (1.0 - c * c).sqrt();
    let width = (config.n_segments.saturating_sub(1)).to_string().len().max(4);

    let segments = (0..config.n_segments)
        .map(|i| {
            let mut rng = stream_rng(config.seed, "synth-segment", i as u64);
            let t = rng.gen_range(config.t_min..=config.t_max);
            let z = ar1(t, &mut rng);
            let mut observe = || -> Vec<f64> {
                let u = ar1(t, &mut rng);
                z.iter().zip(u).map(|(&z, u)| c * z + private * u).collect()
            };
            let s_text = observe();
            let s_audio: Vec<Vec<f64>> = (0..config.dims.audio).map(|_| observe()).collect();
            let s_video: Vec<Vec<f64>> = (0..config.dims.video).map(|_| observe()).collect();
            let tokens: Vec<usize> = s_text.iter().map(|&s| token_of(s, config.vocab)).collect();
            let embedded: Vec<f64> = tokens.iter().map(|&k| bin_latent(k, config.vocab)).collect();
            let mean_z = z.iter().sum::<f64>() / t as f64;
            AlignedSegment {
                id: format!("seg{i:0width$}"),
                label: 3.0 * (LABEL_GAIN * mean_z).tanh(),
                text: ModalitySequence {
                    modality: Modality::Text,
                    features: text_map.rows(&[embedded]),
                    tokens: Some(tokens),
                },
                audio: ModalitySequence {
                    modality: Modality::Audio,
                    features: audio_map.rows(&s_audio),
                    tokens: None,
                },
                video: ModalitySequence {
                    modality: Modality::Video,
                    features: video_map.rows(&s_video),
                    tokens: None,
                },
            }
        })
        .collect();
    Ok(Dataset {
        header: Some(DatasetHeader::new(config.dims, config.vocab)),
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::super::validate_segment;
    use super::*;

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
        }
        sxy / (sxx * syy).sqrt()
    }

    fn column(d: &Dataset, m: Modality, j: usize) -> Vec<f64> {
        d.segments
            .iter()
            .flat_map(|s| {
                let f = &s.modality(m).features;
                (0..f.rows()).map(move |t| f.get(t, j))
            })
            .collect()
    }

    fn corpus(coupling: f64, seed: u64) -> Dataset {
        generate_synthetic(&SynthConfig {
            n_segments: 200,
            t_min: 5,
            t_max: 15,
            coupling,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn pair_correlations(d: &Dataset) -> Vec<f64> {
        let pairs = [(Modality::Text, Modality::Audio), (Modality::Text, Modality::Video), (Modality::Audio, Modality::Video)];
        pairs.iter().map(|&(a, b)| pearson(&column(d, a, 0), &column(d, b, 0))).collect()
    }

    #[test]
    fn uncoupled_modalities_are_uncorrelated() {
        for seed in 0..3 {
            for r in pair_correlations(&corpus(0.0, seed)) {
                assert!(r.abs() < 0.1, "seed {seed}: r = {r}");
            }
        }
    }

    #[test]
    fn fully_coupled_modalities_are_correlated() {
        for seed in 0..3 {
            for r in pair_correlations(&corpus(1.0, seed)) {
                assert!(r > 0.9, "seed {seed}: r = {r}");
            }
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = corpus(0.7, 5);
        assert_eq!(a, corpus(0.7, 5));
        assert_ne!(a, corpus(0.7, 6));
        let header = a.header.as_ref();
        assert!(a.segments.iter().all(|s| validate_segment(s, header).is_empty()));
        assert!(a.segments.iter().all(|s| (5..=15).contains(&s.len())));
        assert!(a.segments.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn labels_span_the_range() {
        let d = corpus(0.9, 1);
        let labels: Vec<f64> = d.segments.iter().map(|s| s.label).collect();
        assert!(labels.iter().all(|l| l.abs() < 3.0));
        assert!(labels.iter().any(|&l| l > 1.5) && labels.iter().any(|&l| l < -1.5));
    }

    #[test]
    fn tokens_cover_vocabulary_and_embed_monotonically() {
        let v = 16;
        assert_eq!(token_of(-50.0, v), 0);
        assert_eq!(token_of(50.0, v), v - 1);
        assert!((0..v - 1).all(|k| bin_latent(k, v) < bin_latent(k + 1, v)));
        assert!(bin_latent(0, v).is_finite() && bin_latent(v - 1, v).is_finite());
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            SynthConfig { coupling: 1.5, ..SynthConfig::default() },
            SynthConfig { t_min: 4, t_max: 2, ..SynthConfig::default() },
            SynthConfig { n_segments: 0, ..SynthConfig::default() },
        ] {
            assert!(matches!(generate_synthetic(&cfg), Err(DataError::InvalidConfig(_))));
        }
    }
}
