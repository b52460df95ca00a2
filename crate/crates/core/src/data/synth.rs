//! Toy image renderer and the MOS-biased synthetic suite.
//!
//! Every image carries five quality attributes in [0, 1]. Each dataset
//! defines its latent quality as its own weighting of those attributes, so
//! the same picture is judged differently by different datasets, and then
//! maps the latent value through its own monotone label profile.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{denormalize_mos, normalize_mos, Dataset, DatasetSpec, Polarity, Sample};
use crate::error::{GammaError, Result};
use crate::prompts::Scene;
use crate::seed;
use crate::tensor::Tensor;

pub const ATTRIBUTE_NAMES: [&str; 5] = ["noise", "contrast", "color", "sharpness", "composition"];

/// Quality attributes, each in [0, 1] with 1 best.
pub type Attributes = [f64; 5];

/// Channels the renderer writes: four appearance channels, four scene
/// texture channels.
pub const RENDER_CHANNELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Curve {
    Identity,
    Square,
    Sqrt,
    Smoothstep,
    Power { exponent: f64 },
}

impl Curve {
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Curve::Identity => z,
            Curve::Square => z * z,
            Curve::Sqrt => z.sqrt(),
            Curve::Smoothstep => z * z * (3.0 - 2.0 * z),
            Curve::Power { exponent } => z.powf(exponent),
        }
    }
}

/// Label map `offset + gain * curve(z)` plus Gaussian label noise, in
/// normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasProfile {
    pub offset: f64,
    pub gain: f64,
    pub curve: Curve,
    pub noise: f64,
}

impl BiasProfile {
    pub fn new(curve: Curve, noise: f64) -> Self {
        Self {
            offset: 0.0,
            gain: 1.0,
            curve,
            noise,
        }
    }

    pub fn affine(offset: f64, gain: f64, noise: f64) -> Self {
        Self {
            offset,
            gain,
            curve: Curve::Identity,
            noise,
        }
    }

    /// Noise-free label.
    pub fn map(&self, z: f64) -> f64 {
        self.offset + self.gain * self.curve.eval(z)
    }

    /// Rejects maps that are not strictly increasing on [0, 1] or leave it.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GammaError::Config(m));
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("label noise {} must be finite and non-negative", self.noise));
        }
        if let Curve::Power { exponent } = self.curve {
            if !(exponent > 0.0 && exponent.is_finite()) {
                return bad(format!("power curve exponent {exponent} is not positive"));
            }
        }
        let grid: Vec<f64> = (0..=256).map(|i| self.map(i as f64 / 256.0)).collect();
        if !grid.windows(2).all(|w| w[1] > w[0]) {
            return bad("bias profile is not strictly increasing".into());
        }
        if grid[0] < 0.0 || grid[256] > 1.0 {
            return bad(format!(
                "bias profile maps [0, 1] onto [{}, {}], outside [0, 1]",
                grid[0], grid[256]
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Per-element noise standard deviation at the worst noise attribute.
    pub noise_amp: f64,
    /// Content amplitude at the lowest contrast, as a fraction of full.
    pub contrast_floor: f64,
    pub content_amp: f64,
    /// Neighbour blending at the worst sharpness.
    pub blur_max: f64,
    pub cast_amp: f64,
    pub composition_amp: f64,
    /// Strength of the scene texture channels.
    pub scene_amp: f64,
    /// Per-element jitter on every channel.
    pub jitter: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            noise_amp: 0.3,
            contrast_floor: 0.4,
            content_amp: 1.0,
            blur_max: 0.5,
            cast_amp: 1.0,
            composition_amp: 1.0,
            scene_amp: 0.8,
            jitter: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDataset {
    pub name: String,
    pub scene: Scene,
    pub size: usize,
    pub mos_range: (f64, f64),
    pub polarity: Polarity,
    pub profile: BiasProfile,
    /// How much each attribute counts toward this dataset's latent quality;
    /// normalized to sum to 1.
    pub weights: Attributes,
}

impl SyntheticDataset {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            name: self.name.clone(),
            scene: self.scene,
            mos_range: self.mos_range,
            polarity: self.polarity,
            size: self.size,
        }
    }

    pub fn latent(&self, a: &Attributes) -> f64 {
        let total: f64 = self.weights.iter().sum();
        let z: f64 = self.weights.iter().zip(a).map(|(w, v)| w * v).sum::<f64>() / total;
        z.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub patch_grid: usize,
    pub channels: usize,
    pub render: RenderConfig,
    pub datasets: Vec<SyntheticDataset>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self::with_size(500, 0.05)
    }
}

impl SuiteConfig {
    /// The five-scene default suite with `size` samples per dataset and
    /// label noise `noise`.
    pub fn with_size(size: usize, noise: f64) -> Self {
        let ds = |name: &str, scene, range, polarity, profile, weights| SyntheticDataset {
            name: name.into(),
            scene,
            size,
            mos_range: range,
            polarity,
            profile,
            weights,
        };
        Self {
            patch_grid: 4,
            channels: RENDER_CHANNELS,
            render: RenderConfig::default(),
            datasets: vec![
                ds(
                    "syn-natural",
                    Scene::NaturalQuality,
                    (1.0, 100.0),
                    Polarity::Dmos,
                    BiasProfile::new(Curve::Identity, noise),
                    [0.5, 0.2, 0.0, 0.3, 0.0],
                ),
                ds(
                    "syn-aigc",
                    Scene::AiGeneratedQuality,
                    (0.0, 5.0),
                    Polarity::Mos,
                    BiasProfile::new(Curve::Square, noise),
                    [0.0, 0.2, 0.3, 0.0, 0.5],
                ),
                ds(
                    "syn-underwater",
                    Scene::UnderwaterQuality,
                    (0.0, 1.0),
                    Polarity::Mos,
                    BiasProfile::new(Curve::Sqrt, noise),
                    [0.1, 0.3, 0.6, 0.0, 0.0],
                ),
                ds(
                    "syn-face",
                    Scene::FaceQuality,
                    (0.0, 1.0),
                    Polarity::Mos,
                    BiasProfile::affine(0.2, 0.6, noise),
                    [0.3, 0.0, 0.0, 0.7, 0.0],
                ),
                ds(
                    "syn-aesthetics",
                    Scene::NaturalAesthetics,
                    (1.0, 10.0),
                    Polarity::Mos,
                    BiasProfile::new(Curve::Smoothstep, noise),
                    [0.0, 0.4, 0.1, 0.0, 0.5],
                ),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GammaError::Config(m));
        if self.channels != RENDER_CHANNELS {
            return bad(format!("the renderer writes {RENDER_CHANNELS} channels, config asks for {}", self.channels));
        }
        if self.patch_grid < 2 {
            return bad("patch_grid must be at least 2".into());
        }
        let mut scenes: Vec<Scene> = self.datasets.iter().map(|d| d.scene).collect();
        scenes.sort();
        scenes.dedup();
        if scenes.len() < 2 {
            return bad("a biased suite needs datasets from at least two scenes".into());
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if d.size < 100 {
                return bad(format!("dataset {} has {} samples; the suite needs at least 100", d.name, d.size));
            }
            if self.datasets[..i].iter().any(|o| o.name == d.name) {
                return bad(format!("duplicate dataset name {}", d.name));
            }
            if d.weights.iter().any(|&w| !(w >= 0.0)) || d.weights.iter().sum::<f64>() <= 0.0 {
                return bad(format!("dataset {} needs non-negative attribute weights with a positive sum", d.name));
            }
            d.spec().validate()?;
            d.profile
                .validate()
                .map_err(|e| GammaError::Config(format!("dataset {}: {e}", d.name)))?;
        }
        Ok(())
    }
}

/// Everything needed to regenerate a suite exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub seed: u64,
    pub suite: SuiteConfig,
}

impl SuiteManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| GammaError::Input(format!("bad suite manifest: {e}")))
    }
}

fn scene_signature(scene: Scene) -> ([f64; 4], fn(usize, usize, usize) -> f64) {
    fn checker(r: usize, c: usize, _: usize) -> f64 {
        if (r + c) % 2 == 0 { 1.0 } else { -1.0 }
    }
    fn rows(r: usize, _: usize, _: usize) -> f64 {
        if r % 2 == 0 { 1.0 } else { -1.0 }
    }
    fn cols(_: usize, c: usize, _: usize) -> f64 {
        if c % 2 == 0 { 1.0 } else { -1.0 }
    }
    fn ring(r: usize, c: usize, g: usize) -> f64 {
        if r == 0 || c == 0 || r + 1 == g || c + 1 == g { 1.0 } else { -1.0 }
    }
    fn flat(_: usize, _: usize, _: usize) -> f64 {
        0.0
    }
    match scene {
        Scene::NaturalQuality => ([1.0, 0.0, 0.0, 0.0], checker),
        Scene::AiGeneratedQuality => ([0.0, 1.0, 0.0, 0.0], rows),
        Scene::UnderwaterQuality => ([0.0, 0.0, 1.0, 0.0], cols),
        Scene::FaceQuality => ([0.0, 0.0, 0.0, 1.0], ring),
        Scene::NaturalAesthetics => ([0.7, 0.0, 0.0, 0.7], flat),
        Scene::General => ([0.0; 4], flat),
    }
}

/// Centre-versus-surround mask with zero mean over the grid.
fn composition_mask(g: usize) -> Vec<f64> {
    let lo = (g - 1) / 2;
    let hi = g / 2;
    let center = |r: usize, c: usize| (lo..=hi).contains(&r) && (lo..=hi).contains(&c);
    let n_center = (hi - lo + 1) * (hi - lo + 1);
    let n = g * g;
    let mut m = Vec::with_capacity(n);
    for r in 0..g {
        for c in 0..g {
            m.push(if center(r, c) { 1.0 } else { -(n_center as f64) / ((n - n_center) as f64) });
        }
    }
    m
}

/// Fixed content field: a checker (fine detail) plus a diagonal ramp
/// (coarse structure), each with unit mean square.
fn content_field(g: usize, transform: u8) -> Vec<f64> {
    let mid = (g as f64 - 1.0) / 2.0;
    let ramp_norm = {
        let s: f64 = (0..g)
            .flat_map(|r| (0..g).map(move |c| (r as f64 - mid + c as f64 - mid).powi(2)))
            .sum();
        (s / (g * g) as f64).sqrt()
    };
    let mut out = vec![0.0; g * g];
    for r in 0..g {
        for c in 0..g {
            // one of 8 grid symmetries
            let (mut rr, mut cc) = (r, c);
            if transform & 1 == 1 {
                std::mem::swap(&mut rr, &mut cc);
            }
            if transform & 2 == 2 {
                rr = g - 1 - rr;
            }
            if transform & 4 == 4 {
                cc = g - 1 - cc;
            }
            let checker = if (rr + cc) % 2 == 0 { 1.0 } else { -1.0 };
            let ramp = (rr as f64 - mid + cc as f64 - mid) / ramp_norm;
            out[r * g + c] = (checker + ramp) / 2f64.sqrt();
        }
    }
    out
}

/// Renders a `g² × 8` image from quality attributes and a scene.
pub fn render_image(a: &Attributes, scene: Scene, g: usize, cfg: &RenderConfig, rng: &mut impl Rng) -> Tensor {
    let n = g * g;
    let mut gauss = || -> f64 { StandardNormal.sample(&mut *rng) };
    let [a_noise, a_contrast, a_color, a_sharp, a_comp] = *a;

    let transform = (gauss().to_bits() % 8) as u8;
    let u = content_field(g, transform);
    let b = cfg.blur_max * (1.0 - a_sharp);
    let mut v = vec![0.0; n];
    for r in 0..g {
        for c in 0..g {
            let mut acc = 0.0;
            let mut k = 0.0;
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nc >= 0 && (nr as usize) < g && (nc as usize) < g {
                    acc += u[nr as usize * g + nc as usize];
                    k += 1.0;
                }
            }
            v[r * g + c] = (1.0 - b) * u[r * g + c] + b * acc / k;
        }
    }
    let contrast = cfg.content_amp * (cfg.contrast_floor + (1.0 - cfg.contrast_floor) * a_contrast);
    let mask = composition_mask(g);
    let lum: Vec<f64> = (0..n)
        .map(|p| contrast * v[p] + cfg.composition_amp * (a_comp - 0.5) * mask[p])
        .collect();

    let dir = {
        let d = [gauss(), gauss(), gauss()];
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        d.map(|x| x / norm)
    };
    let cast = dir.map(|x| cfg.cast_amp * (1.0 - a_color) * x);
    let noise = cfg.noise_amp * (1.0 - a_noise);
    let (sig, pattern) = scene_signature(scene);

    let mut data = Vec::with_capacity(n * RENDER_CHANNELS);
    for r in 0..g {
        for c in 0..g {
            let p = r * g + c;
            for (k, cast_k) in cast.iter().enumerate() {
                let _ = k;
                data.push(lum[p] + cast_k + noise * gauss() + cfg.jitter * gauss());
            }
            data.push(lum[p] + noise * gauss() + cfg.jitter * gauss());
            let t = pattern(r, c, g);
            for s in sig {
                data.push(cfg.scene_amp * s * (1.0 + 0.5 * t) + cfg.jitter * gauss());
            }
        }
    }
    Tensor::matrix(n, RENDER_CHANNELS, data).expect("render shape")
}

/// Hand-crafted statistics that recover the attributes from an image:
/// noise level, contrast, fine-detail energy, colour-cast magnitude and
/// centre-surround difference.
pub fn oracle_features(image: &Tensor, g: usize) -> [f64; 5] {
    let n = g * g;
    let x = image.data();
    let w = image.cols();
    let at = |p: usize, k: usize| x[p * w + k];
    let ch_mean: Vec<f64> = (0..4).map(|k| (0..n).map(|p| at(p, k)).sum::<f64>() / n as f64).collect();
    // within-patch spread of the centred appearance channels: noise only
    let mut noise = 0.0;
    for p in 0..n {
        let r: Vec<f64> = (0..4).map(|k| at(p, k) - ch_mean[k]).collect();
        let m = r.iter().sum::<f64>() / 4.0;
        noise += r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 3.0;
    }
    let noise = (noise / n as f64).sqrt();
    let lum: Vec<f64> = (0..n).map(|p| (0..4).map(|k| at(p, k)).sum::<f64>() / 4.0).collect();
    let mask = composition_mask(g);
    let mm: f64 = mask.iter().map(|v| v * v).sum();
    let comp = lum.iter().zip(&mask).map(|(l, m)| l * m).sum::<f64>() / mm;
    // project out composition, then split the rest into checker and ramp
    let lum_mean = lum.iter().sum::<f64>() / n as f64;
    let rest: Vec<f64> = lum.iter().zip(&mask).map(|(l, m)| l - lum_mean - comp * m).collect();
    let checker: Vec<f64> = (0..n).map(|p| if (p / g + p % g) % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let fine = rest.iter().zip(&checker).map(|(a, b)| a * b).sum::<f64>().abs() / n as f64;
    // luminance averages four channels, so a quarter of the noise variance remains
    let total = (rest.iter().map(|v| v * v).sum::<f64>() / n as f64 - noise * noise / 4.0)
        .max(0.0)
        .sqrt();
    let cast = (0..3).map(|k| (ch_mean[k] - ch_mean[3]).powi(2)).sum::<f64>().sqrt();
    let coarse = (total * total - fine * fine).max(0.0).sqrt();
    [noise, coarse, cast, fine / (total + 0.1), comp]
}

fn draw_attributes(rng: &mut impl Rng) -> Attributes {
    std::array::from_fn(|_| rng.random_range(0.0..=1.0))
}

/// Generic corpus with the attributes behind every image.
#[derive(Clone, Debug)]
pub struct GenericCorpus {
    pub dataset: Dataset,
    pub attributes: Vec<Attributes>,
}

/// Generic quality corpus: every attribute counts equally, labels are the
/// latent quality itself, and images cycle through the suite's scenes.
pub fn generic_corpus(config: &SuiteConfig, size: usize, noise: f64, seed: u64) -> Result<GenericCorpus> {
    config.validate()?;
    let mut scenes: Vec<Scene> = config.datasets.iter().map(|d| d.scene).collect();
    scenes.sort();
    scenes.dedup();
    let spec = DatasetSpec {
        name: "generic".into(),
        scene: Scene::General,
        mos_range: (0.0, 1.0),
        polarity: Polarity::Mos,
        size,
    };
    let mut attributes = Vec::with_capacity(size);
    let samples = (0..size)
        .map(|i| {
            let mut rng = seed::rng_indexed(seed, &["generic"], i as u64);
            let a = draw_attributes(&mut rng);
            let z = a.iter().sum::<f64>() / a.len() as f64;
            let scene = scenes[i % scenes.len()];
            let image = render_image(&a, scene, config.patch_grid, &config.render, &mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let label = (z + noise * e).clamp(0.0, 1.0);
            attributes.push(a);
            Sample {
                id: format!("generic-{i:05}"),
                image,
                raw_mos: label,
                norm_mos: label,
                dataset: spec.name.clone(),
                scene,
                latent: Some(z),
            }
        })
        .collect();
    Ok(GenericCorpus {
        dataset: Dataset { spec, samples },
        attributes,
    })
}

/// Renders every dataset of the suite. Randomness is keyed by
/// `(seed, dataset name, sample index)`, so suites are reproducible
/// and datasets independent of each other's sizes.
pub fn synthesize_biased_suite(config: &SuiteConfig, seed: u64) -> Result<Vec<Dataset>> {
    config.validate()?;
    config
        .datasets
        .iter()
        .map(|d| {
            let spec = d.spec();
            let samples = (0..d.size)
                .map(|i| {
                    let mut rng = seed::rng_indexed(seed, &["suite", &d.name], i as u64);
                    let a = draw_attributes(&mut rng);
                    let z = d.latent(&a);
                    let image = render_image(&a, d.scene, config.patch_grid, &config.render, &mut rng);
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let label = (d.profile.map(z) + d.profile.noise * noise).clamp(0.0, 1.0);
                    let raw = denormalize_mos(&spec, label).clamp(spec.mos_range.0, spec.mos_range.1);
                    Ok(Sample {
                        id: format!("{}-{i:04}", d.name),
                        image,
                        raw_mos: raw,
                        norm_mos: normalize_mos(&spec, raw)?,
                        dataset: d.name.clone(),
                        scene: d.scene,
                        latent: Some(z),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset { spec, samples })
        })
        .collect()
}
