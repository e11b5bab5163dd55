//! Deterministic synthetic scenes: coloured rectangles on a flat background,
//! with indicator features, identity classifier weights, ground truth, and a
//! colour-similarity attention stack.

use afa_core::attention::{mhsa_forward, AttentionParams, AttentionStack, HeadProjection};
use afa_core::cam::ClassifierWeights;
use afa_core::{LabelImage, RgbImage, Tensor, BACKGROUND};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("blob {index} leaves the {height}x{width} canvas")]
    OutOfBounds {
        index: usize,
        height: usize,
        width: usize,
    },
    #[error("blobs {first} and {second} overlap")]
    Overlap { first: usize, second: usize },
    #[error("blob {index} has class {class}, expected 1..={classes}")]
    BadClass {
        index: usize,
        class: u8,
        classes: usize,
    },
    #[error("invalid scene: {0}")]
    Invalid(&'static str),
    #[error(transparent)]
    Core(#[from] afa_core::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// 8-bit RGB so the scene survives a PPM round trip unchanged.
    pub color: [u8; 3],
    pub class: u8,
}

impl Blob {
    fn overlaps(&self, other: &Blob) -> bool {
        self.top < other.top + other.height
            && other.top < self.top + self.height
            && self.left < other.left + other.width
            && other.left < self.left + self.width
    }

    fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.height).contains(&row)
            && (self.left..self.left + self.width).contains(&col)
    }

    /// Centred sub-rectangle covering roughly `fraction` of the blob's area.
    fn seed_region(&self, fraction: f64) -> Blob {
        let side = |len: usize| ((len as f64 * fraction.sqrt()).round() as usize).clamp(1, len);
        let (h, w) = (side(self.height), side(self.width));
        Blob {
            top: self.top + (self.height - h) / 2,
            left: self.left + (self.width - w) / 2,
            height: h,
            width: w,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: [u8; 3],
    pub blobs: Vec<Blob>,
    /// Foreground class count `C`.
    pub classes: usize,
    /// Fraction of each blob's area, centred, where the class feature fires.
    pub seed_fraction: f64,
    /// Amplitude of uniform noise added to every feature.
    pub noise: f32,
    pub seed: u64,
    /// Projection gain of the colour-similarity attention head.
    pub attention_scale: f32,
}

impl Default for SceneSpec {
    /// Two 8×8 blobs (red, class 1; green, class 2) on a grey 32×32 canvas.
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            background: [51, 51, 51],
            blobs: vec![
                Blob {
                    top: 6,
                    left: 6,
                    height: 8,
                    width: 8,
                    color: [255, 0, 0],
                    class: 1,
                },
                Blob {
                    top: 18,
                    left: 18,
                    height: 8,
                    width: 8,
                    color: [0, 255, 0],
                    class: 2,
                },
            ],
            classes: 2,
            seed_fraction: 1.0,
            noise: 0.0,
            seed: 0,
            attention_scale: 8.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RgbImage,
    /// `[h, w, C]`: channel `c` is the indicator of class `c + 1`'s seed region.
    pub features: Tensor,
    /// Identity `[C, C]`.
    pub weights: ClassifierWeights,
    pub truth: LabelImage,
    pub attention: AttentionStack,
    pub classes_present: Vec<u8>,
}

pub fn make_synthetic(spec: &SceneSpec) -> Result<Scene, SynthError> {
    validate(spec)?;
    let (h, w, c) = (spec.height, spec.width, spec.classes);
    let level = |v: u8| f32::from(v) / 255.0;
    let rgb = |color: [u8; 3]| [level(color[0]), level(color[1]), level(color[2])];

    let mut pixels = vec![rgb(spec.background); h * w];
    let mut truth = vec![BACKGROUND; h * w];
    for blob in &spec.blobs {
        for row in blob.top..blob.top + blob.height {
            for col in blob.left..blob.left + blob.width {
                pixels[row * w + col] = rgb(blob.color);
                truth[row * w + col] = blob.class;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let seeds: Vec<Blob> = spec
        .blobs
        .iter()
        .map(|b| b.seed_region(spec.seed_fraction))
        .collect();
    let mut features = Vec::with_capacity(h * w * c);
    for row in 0..h {
        for col in 0..w {
            for class in 1..=c {
                let on = seeds
                    .iter()
                    .any(|s| usize::from(s.class) == class && s.contains(row, col));
                let noise = if spec.noise > 0.0 {
                    spec.noise * rng.random::<f32>()
                } else {
                    0.0
                };
                features.push(if on { 1.0 } else { 0.0 } + noise);
            }
        }
    }
    let features = Tensor::new(vec![h, w, c], features)?;
    let mut identity = vec![0.0; c * c];
    for i in 0..c {
        identity[i * c + i] = 1.0;
    }
    let weights = ClassifierWeights::new(Tensor::new(vec![c, c], identity)?)?;

    let image = RgbImage::new(h, w, pixels)?;
    let attention = colour_attention(&image, spec.attention_scale)?;
    let mut classes_present: Vec<u8> = spec.blobs.iter().map(|b| b.class).collect();
    classes_present.sort_unstable();
    classes_present.dedup();

    Ok(Scene {
        image,
        features,
        weights,
        truth: LabelImage::new(h, w, truth)?,
        attention,
        classes_present,
    })
}

/// One attention head whose scores are `-s² ‖c_p - c_q‖² / (2√5)`.
///
/// Tokens are `[r, g, b, -‖c‖²/2, 1]`; the query projection swaps the last
/// two slots so that `q_p · k_q = c_p·c_q - ‖c_q‖²/2 - ‖c_p‖²/2`.
pub fn colour_attention(image: &RgbImage, scale: f32) -> Result<AttentionStack, SynthError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(SynthError::Invalid("attention scale must be positive"));
    }
    const D: usize = 5;
    let tokens: Vec<f32> = image
        .pixels()
        .iter()
        .flat_map(|&[r, g, b]| [r, g, b, -(r * r + g * g + b * b) / 2.0, 1.0])
        .collect();
    let tokens = Tensor::new(vec![image.height() * image.width(), D], tokens)?;
    let mut query = vec![0.0; D * D];
    let mut key = vec![0.0; D * D];
    let mut unit = vec![0.0; D * D];
    for i in 0..3 {
        query[i * D + i] = scale;
    }
    query[3 * D + 4] = scale;
    query[4 * D + 3] = scale;
    for i in 0..D {
        key[i * D + i] = scale;
        unit[i * D + i] = 1.0;
    }
    let params = AttentionParams::new(
        vec![HeadProjection {
            query: Tensor::new(vec![D, D], query)?,
            key: Tensor::new(vec![D, D], key)?,
            value: Tensor::new(vec![D, D], unit.clone())?,
        }],
        Tensor::new(vec![D, D], unit)?,
        Tensor::zeros(vec![D])?,
    )?;
    let (_, stack) = mhsa_forward(&tokens, image.height(), image.width(), &params)?;
    Ok(stack)
}

fn validate(spec: &SceneSpec) -> Result<(), SynthError> {
    if spec.height == 0 || spec.width == 0 {
        return Err(SynthError::Invalid("canvas must be non-empty"));
    }
    if spec.classes == 0 || spec.classes > afa_core::cam::MAX_CLASSES {
        return Err(SynthError::Invalid("class count must lie in 1..=254"));
    }
    if !(spec.seed_fraction > 0.0 && spec.seed_fraction <= 1.0) {
        return Err(SynthError::Invalid("seed fraction must lie in (0, 1]"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(SynthError::Invalid("noise must be non-negative"));
    }
    if spec.blobs.is_empty() {
        return Err(SynthError::Invalid("at least one blob is required"));
    }
    for (index, b) in spec.blobs.iter().enumerate() {
        if b.height == 0
            || b.width == 0
            || b.top + b.height > spec.height
            || b.left + b.width > spec.width
        {
            return Err(SynthError::OutOfBounds {
                index,
                height: spec.height,
                width: spec.width,
            });
        }
        if b.class == 0 || usize::from(b.class) > spec.classes {
            return Err(SynthError::BadClass {
                index,
                class: b.class,
                classes: spec.classes,
            });
        }
        for (first, other) in spec.blobs[..index].iter().enumerate() {
            if b.overlaps(other) {
                return Err(SynthError::Overlap {
                    first,
                    second: index,
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use afa_core::cam::generate_cam;

    fn one_blob() -> SceneSpec {
        SceneSpec {
            height: 6,
            width: 6,
            blobs: vec![Blob {
                top: 1,
                left: 2,
                height: 2,
                width: 3,
                color: [255, 0, 0],
                class: 1,
            }],
            classes: 1,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn single_blob_truth() {
        let scene = make_synthetic(&one_blob()).unwrap();
        let labelled: Vec<usize> = (0..36).filter(|&p| scene.truth.labels()[p] == 1).collect();
        assert_eq!(labelled, vec![8, 9, 10, 14, 15, 16]);
        assert!(scene.truth.labels().iter().all(|&l| l == 0 || l == 1));
        assert_eq!(scene.image.pixel(1, 2), [1.0, 0.0, 0.0]);
        assert_eq!(scene.classes_present, vec![1]);
    }

    #[test]
    fn noiseless_cam_matches_truth_inside_blobs() {
        let scene = make_synthetic(&SceneSpec::default()).unwrap();
        let cam = generate_cam(&scene.features, &scene.weights, &scene.classes_present).unwrap();
        for p in 0..32 * 32 {
            let t = scene.truth.labels()[p];
            if t != 0 {
                let px = cam.pixel(p);
                let best = (0..2).max_by(|&a, &b| px[a].total_cmp(&px[b])).unwrap();
                assert_eq!(best + 1, usize::from(t));
                assert_eq!(px[best], 1.0);
            }
        }
    }

    #[test]
    fn seed_region_is_centred() {
        let spec = SceneSpec {
            seed_fraction: 0.5,
            ..SceneSpec::default()
        };
        let scene = make_synthetic(&spec).unwrap();
        let on: usize = scene.features.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(on, 2 * 36);
        // blob at (6,6) with a 6x6 seed starting at (7,7)
        assert_eq!(scene.features.data()[(7 * 32 + 7) * 2], 1.0);
        assert_eq!(scene.features.data()[(6 * 32 + 6) * 2], 0.0);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = SceneSpec {
            noise: 0.2,
            seed: 42,
            ..SceneSpec::default()
        };
        let a = make_synthetic(&spec).unwrap();
        let b = make_synthetic(&spec).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.attention, b.attention);
        let c = make_synthetic(&SceneSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn colour_attention_scores() {
        let scene = make_synthetic(&SceneSpec::default()).unwrap();
        let s = &scene.attention;
        let red = 6 * 32 + 6;
        let red2 = 13 * 32 + 13;
        let grey = 0;
        assert!(s.score(red, red2, 0).abs() < 1e-5);
        // ‖(1,0,0) - (0.2,0.2,0.2)‖² = 0.72
        let expected = -64.0 * 0.72 / (2.0 * 5f32.sqrt());
        assert!((s.score(red, grey, 0) - expected).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = SceneSpec::default();
        spec.blobs[1].top = 10;
        spec.blobs[1].left = 10;
        assert!(matches!(
            make_synthetic(&spec),
            Err(SynthError::Overlap {
                first: 0,
                second: 1
            })
        ));
        let mut spec = SceneSpec::default();
        spec.blobs[0].left = 30;
        assert!(matches!(
            make_synthetic(&spec),
            Err(SynthError::OutOfBounds { .. })
        ));
        let mut spec = SceneSpec::default();
        spec.blobs[0].class = 3;
        assert!(matches!(
            make_synthetic(&spec),
            Err(SynthError::BadClass { .. })
        ));
    }
}
