//! The end-to-end refinement dataflow.
//!
//! CAM → PAR → dual threshold → pairwise labels → head combination →
//! affinity loss → transition matrix → propagation → PAR → final threshold.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use afa_core::affinity::{
    affinity_loss, derive_affinity_label, propagate, transition_matrix, AffinityLabel,
    AffinityLoss, AffinityMatrix, TransitionMatrix,
};
use afa_core::attention::{symmetrize_combine, AttentionStack, HeadCombiner};
use afa_core::cam::{
    generate_cam, threshold_dual, threshold_single, ActivationMap, ClassifierWeights,
};
use afa_core::par::refine_with_image;
use afa_core::{LabelImage, RgbImage, Tensor};
use anyhow::Context;
use thiserror::Error;

use crate::config::{PipelineConfig, PipelineParams};
use crate::container::{read_tensor, write_tensor};
use crate::pnm::{read_image, write_labels};

/// A failure tagged with the stage that produced it.
#[derive(Debug, Error)]
#[error("stage `{stage}` failed")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: anyhow::Error,
}

trait AtStage<T> {
    fn at(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T, E: Into<anyhow::Error>> AtStage<T> for Result<T, E> {
    fn at(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError {
            stage,
            source: e.into(),
        })
    }
}

pub struct PipelineInputs {
    pub image: RgbImage,
    pub features: Tensor,
    pub weights: ClassifierWeights,
    pub classes: Vec<u8>,
}

/// Every intermediate product, in dataflow order.
#[derive(Debug, Clone)]
pub struct StageArtifacts {
    pub cam: ActivationMap,
    pub cam_refined: ActivationMap,
    pub pseudo_label: LabelImage,
    pub affinity_label: AffinityLabel,
    pub affinity: AffinityMatrix,
    pub affinity_loss: AffinityLoss<f32>,
    pub transition: TransitionMatrix,
    pub propagated: ActivationMap,
    pub propagated_refined: ActivationMap,
    pub final_labels: LabelImage,
}

/// Runs the dataflow in memory. `attention` is called with the CAM grid
/// once the affinity stage is reached.
pub fn execute(
    inputs: &PipelineInputs,
    params: &PipelineParams,
    attention: impl FnOnce(usize, usize) -> anyhow::Result<AttentionStack>,
) -> Result<StageArtifacts, StageError> {
    let cam = generate_cam(&inputs.features, &inputs.weights, &inputs.classes).at("cam")?;
    let cam_refined = refine_with_image(&cam, &inputs.image, &params.par).at("par")?;
    let pseudo_label = threshold_dual(&cam_refined, params.thresholds);
    let (h, w) = (cam.height(), cam.width());
    let affinity_label =
        derive_affinity_label(&pseudo_label, params.radius, h, w).at("affinity-label")?;

    let stack = attention(h, w).at("affinity")?;
    if (stack.height(), stack.width()) != (h, w) {
        return Err(anyhow::anyhow!(
            "attention grid {}x{} differs from the {h}x{w} activation grid",
            stack.height(),
            stack.width()
        ))
        .at("affinity");
    }
    let combiner = combiner_for(params, stack.num_heads());
    let affinity = symmetrize_combine(&stack, &combiner).at("affinity")?;
    let loss = affinity_loss(&affinity, &affinity_label).at("affinity-loss")?;

    let transition = transition_matrix(&affinity, params.alpha).at("propagate")?;
    let propagated = propagate(&cam, &transition).at("propagate")?;
    let propagated_refined =
        refine_with_image(&propagated, &inputs.image, &params.par).at("refine")?;
    let final_labels = threshold_single(&propagated_refined, params.beta);

    Ok(StageArtifacts {
        cam,
        cam_refined,
        pseudo_label,
        affinity_label,
        affinity,
        affinity_loss: loss,
        transition,
        propagated,
        propagated_refined,
        final_labels,
    })
}

/// The configured head weights, or uniform weights for `heads` heads.
pub fn combiner_for(params: &PipelineParams, heads: usize) -> HeadCombiner {
    let weights = params
        .head_weights
        .clone()
        .unwrap_or_else(|| HeadCombiner::uniform(heads).weights);
    HeadCombiner {
        weights,
        bias: params.head_bias,
    }
}

/// Reads an attention stack laid out on an `h × w` grid.
pub fn load_attention(path: &Path, height: usize, width: usize) -> anyhow::Result<AttentionStack> {
    let t =
        read_tensor(path).with_context(|| format!("reading attention stack {}", path.display()))?;
    AttentionStack::from_tensor(t, height, width).with_context(|| {
        format!(
            "attention stack {} does not match the {height}x{width} grid",
            path.display()
        )
    })
}

pub fn load_inputs(cfg: &PipelineConfig) -> anyhow::Result<PipelineInputs> {
    let image = read_image(&cfg.image)?;
    let features = read_tensor(&cfg.features)?;
    let weights = ClassifierWeights::new(read_tensor(&cfg.weights)?)?;
    Ok(PipelineInputs {
        image,
        features,
        weights,
        classes: cfg.classes.clone(),
    })
}

/// File names of the dumped intermediates inside the output directory.
pub mod files {
    pub const CAM: &str = "cam.ten";
    pub const CAM_REFINED: &str = "cam_par.ten";
    pub const PSEUDO_LABEL: &str = "pseudo_label.pgm";
    pub const AFFINITY_LABEL: &str = "affinity_label.ten";
    pub const AFFINITY: &str = "affinity.ten";
    pub const AFFINITY_GRAD: &str = "affinity_grad.ten";
    pub const TRANSITION: &str = "transition.ten";
    pub const PROPAGATED: &str = "propagated.ten";
    pub const PROPAGATED_REFINED: &str = "propagated_par.ten";
    pub const FINAL_LABELS: &str = "final_labels.pgm";
    pub const REPORT: &str = "report.txt";
}

/// Loads inputs, executes, and writes the final labels and report (plus
/// every intermediate when `dump_stages` is set).
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(StageArtifacts, String), StageError> {
    let inputs = load_inputs(cfg).at("load")?;
    let artifacts = execute(&inputs, &cfg.params, |h, w| {
        load_attention(&cfg.attention, h, w)
    })?;
    let report = report(&artifacts, &cfg.params);
    write_outputs(&cfg.out_dir, &artifacts, &report, cfg.dump_stages).at("write")?;
    Ok((artifacts, report))
}

fn write_outputs(dir: &Path, a: &StageArtifacts, report: &str, dump: bool) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let at = |name: &str| -> PathBuf { dir.join(name) };
    write_labels(&a.final_labels, at(files::FINAL_LABELS))?;
    fs::write(at(files::REPORT), report).with_context(|| format!("writing {}", files::REPORT))?;
    if dump {
        write_tensor(&a.cam.to_tensor(), at(files::CAM))?;
        write_tensor(&a.cam_refined.to_tensor(), at(files::CAM_REFINED))?;
        write_labels(&a.pseudo_label, at(files::PSEUDO_LABEL))?;
        write_tensor(&a.affinity_label.to_tensor(), at(files::AFFINITY_LABEL))?;
        write_tensor(&a.affinity.to_tensor(), at(files::AFFINITY))?;
        let n = a.affinity.size();
        let grad = Tensor::new(vec![n, n], a.affinity_loss.grad.clone())?;
        write_tensor(&grad, at(files::AFFINITY_GRAD))?;
        write_tensor(&a.transition.to_tensor(), at(files::TRANSITION))?;
        write_tensor(&a.propagated.to_tensor(), at(files::PROPAGATED))?;
        write_tensor(
            &a.propagated_refined.to_tensor(),
            at(files::PROPAGATED_REFINED),
        )?;
    }
    Ok(())
}

/// Plain-text `key=value` summary of a run.
pub fn report(a: &StageArtifacts, params: &PipelineParams) -> String {
    let loss = &a.affinity_loss;
    let grad_norm = loss
        .grad
        .iter()
        .map(|&g| f64::from(g) * f64::from(g))
        .sum::<f64>()
        .sqrt();
    let mut out = String::new();
    let mut line = |k: &str, v: &dyn std::fmt::Display| {
        let _ = writeln!(out, "{k}={v}");
    };
    line("height", &a.cam.height());
    line("width", &a.cam.width());
    line("classes", &a.cam.classes());
    line("aff_loss", &loss.loss);
    line(
        "aff_weighted",
        &(params.loss_weights.aff * f64::from(loss.loss)),
    );
    line("aff_grad_norm", &grad_norm);
    line("aff_positives", &loss.positives);
    line("aff_negatives", &loss.negatives);
    line("aff_degenerate", &loss.is_degenerate());
    line("pseudo_ignored", &count(&a.pseudo_label, afa_core::IGNORE));
    for c in 0..=a.cam.classes() {
        line(
            &format!("final_class_{c}"),
            &count(&a.final_labels, c as u8),
        );
    }
    out
}

fn count(labels: &LabelImage, value: u8) -> usize {
    labels.labels().iter().filter(|&&l| l == value).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_synthetic, SceneSpec};
    use afa_core::cam::threshold_single;

    fn inputs() -> (PipelineInputs, AttentionStack) {
        let scene = make_synthetic(&SceneSpec::default()).unwrap();
        (
            PipelineInputs {
                image: scene.image,
                features: scene.features,
                weights: scene.weights,
                classes: scene.classes_present,
            },
            scene.attention,
        )
    }

    fn small_params() -> PipelineParams {
        let mut p = PipelineParams::default();
        p.par.dilations = vec![1, 2, 4];
        p
    }

    #[test]
    fn identity_propagation_reduces_to_refined_threshold() {
        let (inputs, stack) = inputs();
        let params = small_params();
        // A huge diagonal and very negative off-diagonal make T the identity.
        let n = stack.tokens();
        let mut scores = vec![-1.0e4f32; n * n];
        for p in 0..n {
            scores[p * n + p] = 1.0e4;
        }
        let identity = AttentionStack::from_tensor(
            Tensor::new(vec![n, n, 1], scores).unwrap(),
            stack.height(),
            stack.width(),
        )
        .unwrap();
        let a = execute(&inputs, &params, |_, _| Ok(identity)).unwrap();
        assert_eq!(a.propagated, a.cam);
        assert_eq!(a.propagated_refined, a.cam_refined);
        assert_eq!(
            a.final_labels,
            threshold_single(&a.cam_refined, params.beta)
        );
    }

    #[test]
    fn attention_failure_names_stage() {
        let (inputs, _) = inputs();
        let err = execute(&inputs, &small_params(), |_, _| {
            load_attention(Path::new("/nonexistent/att.ten"), 32, 32)
        })
        .unwrap_err();
        assert_eq!(err.stage, "affinity");
        let text = format!("{:#}", anyhow::Error::new(err));
        assert!(
            text.contains("affinity") && text.contains("/nonexistent/att.ten"),
            "{text}"
        );
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let (inputs, _) = inputs();
        let small =
            AttentionStack::from_tensor(Tensor::zeros(vec![4, 4, 1]).unwrap(), 2, 2).unwrap();
        let err = execute(&inputs, &small_params(), |_, _| Ok(small)).unwrap_err();
        assert_eq!(err.stage, "affinity");
    }

    #[test]
    fn repeated_runs_agree() {
        let (inputs, stack) = inputs();
        let params = small_params();
        let a = execute(&inputs, &params, |_, _| Ok(stack.clone())).unwrap();
        let b = execute(&inputs, &params, |_, _| Ok(stack.clone())).unwrap();
        assert_eq!(a.final_labels, b.final_labels);
        assert_eq!(report(&a, &params), report(&b, &params));
    }
}
