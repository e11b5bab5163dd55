//! Finite-difference verification of the analytic loss gradients on random
//! instances.

use std::fmt;

use afa_core::affinity::{affinity_loss_values, derive_affinity_label};
use afa_core::gradcheck::{max_relative_error, numerical_gradient, DEFAULT_STEP};
use afa_core::losses::{classification_loss, segmentation_loss_values};
use afa_core::{LabelImage, IGNORE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradcheckSizes {
    pub instances: usize,
    /// Side of the square label map whose pixel pairs form the affinity matrix.
    pub affinity_side: usize,
    /// Class count of the classification instances.
    pub classes: usize,
    /// Pixels and classes of the segmentation instances.
    pub seg_pixels: usize,
    pub seg_classes: usize,
}

impl Default for GradcheckSizes {
    fn default() -> Self {
        Self {
            instances: 50,
            affinity_side: 2,
            classes: 4,
            seg_pixels: 2,
            seg_classes: 3,
        }
    }
}

/// Value and analytic gradient of a loss at a point.
pub type Evaluated = (f64, Vec<f64>);

/// A differentiable function of a flat parameter vector.
pub trait LossProbe {
    fn eval(&self, x: &[f64]) -> Evaluated;
}

impl<F: Fn(&[f64]) -> Evaluated> LossProbe for F {
    fn eval(&self, x: &[f64]) -> Evaluated {
        self(x)
    }
}

/// Maximum relative error between the probe's analytic gradient and central
/// differences of its value at `point`.
pub fn check_probe(probe: &dyn LossProbe, point: &[f64], step: f64) -> f64 {
    let (_, analytic) = probe.eval(point);
    let numeric = numerical_gradient(|x| probe.eval(x).0, point, step);
    max_relative_error(&analytic, &numeric)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<LossCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_error < TOLERANCE)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed={}", self.seed)?;
        for c in &self.checks {
            writeln!(f, "{}.instances={}", c.name, c.instances)?;
            writeln!(f, "{}.max_rel_error={:e}", c.name, c.max_rel_error)?;
        }
        writeln!(f, "tolerance={TOLERANCE:e}")?;
        writeln!(f, "passed={}", self.passed())
    }
}

/// One random instance of each loss: the probe and the point to test at.
pub struct Instances {
    pub affinity: (Box<dyn LossProbe>, Vec<f64>),
    pub classification: (Box<dyn LossProbe>, Vec<f64>),
    pub segmentation: (Box<dyn LossProbe>, Vec<f64>),
}

pub fn sample_instances(rng: &mut ChaCha8Rng, sizes: &GradcheckSizes) -> Instances {
    let side = sizes.affinity_side.max(1);
    let n = side * side;
    let yp: Vec<u8> = (0..n)
        .map(|_| match rng.random_range(0..4) {
            0 => 0,
            1 => 1,
            2 => 2,
            _ => IGNORE,
        })
        .collect();
    let yp = LabelImage::new(side, side, yp).expect("non-empty label map");
    let radius = rng.random_range(1..=side.max(1));
    let labels = derive_affinity_label(&yp, radius, side, side).expect("valid radius");
    let logits: Vec<f64> = (0..n * n).map(|_| rng.random_range(-4.0..4.0)).collect();
    let affinity = move |x: &[f64]| {
        let r = affinity_loss_values(x, &labels).expect("matching sizes");
        (r.loss, r.grad)
    };

    let c = sizes.classes.max(1);
    let y: Vec<bool> = (0..c).map(|_| rng.random_bool(0.5)).collect();
    let p: Vec<f64> = (0..c).map(|_| rng.random_range(0.15..0.85)).collect();
    let classification = move |x: &[f64]| {
        let r = classification_loss(x, &y).expect("matching sizes");
        (r.loss, r.grad)
    };

    let (pixels, classes) = (sizes.seg_pixels.max(1), sizes.seg_classes.max(1));
    let target: Vec<u8> = (0..pixels)
        .map(|_| {
            if rng.random_bool(0.2) {
                IGNORE
            } else {
                rng.random_range(0..classes) as u8
            }
        })
        .collect();
    let target = LabelImage::new(1, pixels, target).expect("non-empty target");
    let z: Vec<f64> = (0..pixels * classes)
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    let segmentation = move |x: &[f64]| {
        let r = segmentation_loss_values(x, classes, &target).expect("matching sizes");
        (r.loss, r.grad)
    };

    Instances {
        affinity: (Box::new(affinity), logits),
        classification: (Box::new(classification), p),
        segmentation: (Box::new(segmentation), z),
    }
}

/// Runs every check with an optional wrapper around each probe, which tests
/// use to inject faulty gradients.
pub fn run_with(
    seed: u64,
    sizes: &GradcheckSizes,
    wrap: &dyn Fn(&'static str, Box<dyn LossProbe>) -> Box<dyn LossProbe>,
) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 3];
    for _ in 0..sizes.instances {
        let inst = sample_instances(&mut rng, sizes);
        for (i, (name, (probe, point))) in [
            ("affinity", inst.affinity),
            ("classification", inst.classification),
            ("segmentation", inst.segmentation),
        ]
        .into_iter()
        .enumerate()
        {
            let probe = wrap(name, probe);
            let err = check_probe(probe.as_ref(), &point, DEFAULT_STEP);
            worst[i] = worst[i].max(if err.is_nan() { f64::INFINITY } else { err });
        }
    }
    let checks = ["affinity", "classification", "segmentation"]
        .into_iter()
        .zip(worst)
        .map(|(name, max_rel_error)| LossCheck {
            name,
            instances: sizes.instances,
            max_rel_error,
        })
        .collect();
    GradcheckReport { seed, checks }
}

pub fn run(seed: u64, sizes: &GradcheckSizes) -> GradcheckReport {
    run_with(seed, sizes, &|_, probe| probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes() {
        let report = run(0, &GradcheckSizes::default());
        assert!(report.passed(), "{report}");
        assert_eq!(report.checks.len(), 3);
    }

    #[test]
    fn repeated_runs_agree() {
        let sizes = GradcheckSizes {
            instances: 5,
            ..GradcheckSizes::default()
        };
        assert_eq!(run(9, &sizes), run(9, &sizes));
        assert_eq!(run(9, &sizes).to_string(), run(9, &sizes).to_string());
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        struct Skewed(Box<dyn LossProbe>);
        impl LossProbe for Skewed {
            fn eval(&self, x: &[f64]) -> Evaluated {
                let (v, g) = self.0.eval(x);
                (v, g.into_iter().map(|d| d * 1.01).collect())
            }
        }
        let sizes = GradcheckSizes {
            instances: 3,
            ..GradcheckSizes::default()
        };
        let report = run_with(0, &sizes, &|name, probe| {
            if name == "segmentation" {
                Box::new(Skewed(probe))
            } else {
                probe
            }
        });
        assert!(!report.passed());
        assert!(report.checks[2].max_rel_error > TOLERANCE);
        assert!(report.checks[0].max_rel_error < TOLERANCE);
    }
}
