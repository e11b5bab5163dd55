use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use afa_core::affinity::{
    affinity_loss, derive_affinity_label, propagate, transition_matrix, AffinityLabel,
    AffinityMatrix,
};
use afa_core::attention::{symmetrize_combine, HeadCombiner};
use afa_core::cam::{
    generate_cam, threshold_dual, threshold_single, ActivationMap, BackgroundScore,
    BackgroundThresholds, ClassifierWeights,
};
use afa_core::eval::ConfusionMatrix;
use afa_core::losses::{classification_loss, combine, segmentation_loss, LossWeights};
use afa_core::par::{refine_with_image, ParConfig};
use afa_core::{LabelImage, Tensor};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::ConfigBuilder;
use crate::container::{read_tensor, write_tensor};
use crate::gradcheck::{self, GradcheckSizes};
use crate::pipeline::run_pipeline;
use crate::pnm::{read_image, read_labels, write_image, write_labels};
use crate::synth::{make_synthetic, SceneSpec};

#[derive(Debug, Parser)]
#[command(
    name = "afa",
    version,
    about = "Pseudo-label refinement from attention affinity"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Class activation maps and dual-threshold pseudo labels.
    Cam(CamArgs),
    /// Pixel-adaptive refinement of an activation map.
    Par(ParArgs),
    /// Threshold an activation map into a label image.
    Threshold(ThresholdArgs),
    /// Pairwise affinity labels from a pseudo label image.
    AffinityLabel(AffinityLabelArgs),
    /// Affinity loss and its gradient.
    AffLoss(AffLossArgs),
    /// Random-walk propagation of an activation map.
    RwPropagate(RwPropagateArgs),
    /// Classification and segmentation losses and their weighted total.
    Loss(LossArgs),
    /// Per-class IoU and mean IoU over a directory of label images.
    EvalMiou(EvalArgs),
    /// Run the full refinement dataflow.
    Pipeline(PipelineArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic scene and a matching pipeline config.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CamArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Foreground classes present in the image, e.g. `1,5`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub classes: Vec<u8>,
    #[arg(long, default_value_t = 0.35)]
    pub beta_low: f32,
    #[arg(long, default_value_t = 0.55)]
    pub beta_high: f32,
    #[arg(long)]
    pub out_map: PathBuf,
    #[arg(long)]
    pub out_labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub iters: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,12,24")]
    pub dilations: Vec<usize>,
    #[arg(long, default_value_t = 0.3)]
    pub w1: f32,
    #[arg(long, default_value_t = 0.3)]
    pub w2: f32,
    #[arg(long, default_value_t = 0.01)]
    pub w3: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ThresholdMode {
    Single,
    Dual,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, value_enum, default_value_t = ThresholdMode::Single)]
    pub mode: ThresholdMode,
    #[arg(long, default_value_t = 0.45)]
    pub beta: f32,
    #[arg(long, default_value_t = 0.35)]
    pub beta_low: f32,
    #[arg(long, default_value_t = 0.55)]
    pub beta_high: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AffinityLabelArgs {
    /// Pseudo label image (PGM).
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub radius: usize,
    /// Target grid `HxW`; defaults to the label image size.
    #[arg(long, value_parser = grid)]
    pub grid: Option<(usize, usize)>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where the affinity logits come from: a ready `[n, n]` matrix, or an
/// attention stack combined on the fly.
#[derive(Debug, Args)]
pub struct AffinitySource {
    #[arg(long, conflicts_with = "attention")]
    pub affinity: Option<PathBuf>,
    /// Pre-softmax attention stack `[hw, hw, m]`.
    #[arg(long, requires = "grid")]
    pub attention: Option<PathBuf>,
    /// Token grid `HxW` of the attention stack.
    #[arg(long, value_parser = grid)]
    pub grid: Option<(usize, usize)>,
    /// Per-head weights; uniform `1/m` when omitted.
    #[arg(long, value_delimiter = ',')]
    pub head_weights: Option<Vec<f32>>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub head_bias: f32,
}

impl AffinitySource {
    fn load(&self) -> Result<AffinityMatrix> {
        match (&self.affinity, &self.attention, self.grid) {
            (Some(path), None, _) => Ok(AffinityMatrix::from_tensor(read_tensor(path)?)?),
            (None, Some(path), Some((h, w))) => {
                let stack = crate::pipeline::load_attention(path, h, w)?;
                let combiner = HeadCombiner {
                    weights: self
                        .head_weights
                        .clone()
                        .unwrap_or_else(|| HeadCombiner::uniform(stack.num_heads()).weights),
                    bias: self.head_bias,
                };
                Ok(symmetrize_combine(&stack, &combiner)?)
            }
            _ => bail!("give either --affinity, or --attention with --grid"),
        }
    }
}

#[derive(Debug, Args)]
pub struct AffLossArgs {
    #[command(flatten)]
    pub source: AffinitySource,
    /// Pairwise label tensor from `affinity-label`.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out_grad: Option<PathBuf>,
    /// Also write the combined affinity matrix.
    #[arg(long)]
    pub out_affinity: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RwPropagateArgs {
    #[command(flatten)]
    pub source: AffinitySource,
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f32,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub out_transition: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Class probabilities `[C]`.
    #[arg(long, requires = "cls_targets")]
    pub cls_probs: Option<PathBuf>,
    /// Multi-hot targets `[C]` with entries 0 or 1.
    #[arg(long)]
    pub cls_targets: Option<PathBuf>,
    /// Segmentation logits `[h, w, C]`.
    #[arg(long, requires = "seg_labels")]
    pub seg_logits: Option<PathBuf>,
    #[arg(long)]
    pub seg_labels: Option<PathBuf>,
    /// Externally computed affinity loss value.
    #[arg(long, default_value_t = 0.0)]
    pub aff: f64,
    /// Externally computed regularisation loss value.
    #[arg(long, default_value_t = 0.0)]
    pub reg: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lambda3: f64,
    #[arg(long)]
    pub out_cls_grad: Option<PathBuf>,
    #[arg(long)]
    pub out_seg_grad: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub truth_dir: PathBuf,
    /// Class count including background.
    #[arg(long, default_value_t = 21)]
    pub classes: usize,
    /// Print an aligned table instead of key=value lines.
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set alpha=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub attention: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub dump_stages: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f32,
    /// Fraction of each blob's area where its class feature fires.
    #[arg(long, default_value_t = 1.0)]
    pub seed_fraction: f64,
    #[arg(long, default_value_t = 8.0)]
    pub attention_scale: f32,
}

fn grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("`{s}` is not HxW"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
    Ok((parse(h)?, parse(w)?))
}

/// Collects `key=value` report lines.
#[derive(Default)]
struct Report(Vec<String>);

impl Report {
    fn put(&mut self, key: impl Display, value: impl Display) -> &mut Self {
        self.0.push(format!("{key}={value}"));
        self
    }

    fn emit(&self, out: &mut dyn Write) -> Result<()> {
        for line in &self.0 {
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

fn map_summary(r: &mut Report, map: &ActivationMap) {
    r.put("height", map.height())
        .put("width", map.width())
        .put("classes", map.classes());
}

fn label_counts(r: &mut Report, prefix: &str, labels: &LabelImage) {
    let mut counts = BTreeMap::new();
    for &l in labels.labels() {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    for (l, n) in counts {
        r.put(format!("{prefix}_{l}"), n);
    }
}

fn read_map(path: &Path) -> Result<ActivationMap> {
    ActivationMap::from_tensor(read_tensor(path)?)
        .with_context(|| format!("{} is not an activation map", path.display()))
}

/// Parses `args` (program name first) and runs the command, writing reports
/// to `out`. Returns `Ok(false)` when a check ran but failed.
pub fn run_from<I, T>(args: I, out: &mut dyn Write) -> Result<bool>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    run(cli.command, out)
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<bool> {
    let mut r = Report::default();
    match command {
        Command::Cam(a) => {
            let weights = ClassifierWeights::new(read_tensor(&a.weights)?)?;
            let map = generate_cam(&read_tensor(&a.features)?, &weights, &a.classes)?;
            write_tensor(&map.to_tensor(), &a.out_map)?;
            map_summary(&mut r, &map);
            if let Some(path) = &a.out_labels {
                let t = BackgroundThresholds::new(a.beta_low, a.beta_high)?;
                let labels = threshold_dual(&map, t);
                write_labels(&labels, path)?;
                label_counts(&mut r, "label", &labels);
            }
        }
        Command::Par(a) => {
            let cfg = ParConfig {
                dilations: a.dilations,
                w1: a.w1,
                w2: a.w2,
                w3: a.w3,
                iterations: a.iters,
                ..ParConfig::default()
            };
            cfg.validate()?;
            let refined = refine_with_image(&read_map(&a.map)?, &read_image(&a.image)?, &cfg)?;
            write_tensor(&refined.to_tensor(), &a.out)?;
            map_summary(&mut r, &refined);
            r.put("iterations", cfg.iterations);
        }
        Command::Threshold(a) => {
            let map = read_map(&a.map)?;
            let labels = match a.mode {
                ThresholdMode::Single => threshold_single(&map, BackgroundScore::new(a.beta)?),
                ThresholdMode::Dual => {
                    threshold_dual(&map, BackgroundThresholds::new(a.beta_low, a.beta_high)?)
                }
            };
            write_labels(&labels, &a.out)?;
            label_counts(&mut r, "label", &labels);
        }
        Command::AffinityLabel(a) => {
            let yp = read_labels(&a.labels, None)?;
            let (h, w) = a.grid.unwrap_or((yp.height(), yp.width()));
            let y = derive_affinity_label(&yp, a.radius, h, w)?;
            write_tensor(&y.to_tensor(), &a.out)?;
            r.put("size", y.size())
                .put("positive", y.count(afa_core::affinity::PairLabel::Positive))
                .put("negative", y.count(afa_core::affinity::PairLabel::Negative))
                .put("ignored", y.count(afa_core::affinity::PairLabel::Ignored));
        }
        Command::AffLoss(a) => {
            let affinity = a.source.load()?;
            let labels = AffinityLabel::from_tensor(&read_tensor(&a.labels)?)?;
            let loss = affinity_loss(&affinity, &labels)?;
            let n = affinity.size();
            if let Some(path) = &a.out_grad {
                write_tensor(&Tensor::new(vec![n, n], loss.grad.clone())?, path)?;
            }
            if let Some(path) = &a.out_affinity {
                write_tensor(&affinity.to_tensor(), path)?;
            }
            let norm = loss
                .grad
                .iter()
                .map(|&g| f64::from(g).powi(2))
                .sum::<f64>()
                .sqrt();
            r.put("loss", loss.loss)
                .put("grad_norm", norm)
                .put("positives", loss.positives)
                .put("negatives", loss.negatives)
                .put("degenerate", loss.is_degenerate());
        }
        Command::RwPropagate(a) => {
            let affinity = a.source.load()?;
            let t = transition_matrix(&affinity, a.alpha)?;
            let out_map = propagate(&read_map(&a.map)?, &t)?;
            write_tensor(&out_map.to_tensor(), &a.out)?;
            if let Some(path) = &a.out_transition {
                write_tensor(&t.to_tensor(), path)?;
            }
            map_summary(&mut r, &out_map);
            r.put("alpha", t.alpha());
        }
        Command::Loss(a) => {
            let weights = LossWeights::new(a.lambda1, a.lambda2, a.lambda3)?;
            let mut cls = 0.0;
            if let (Some(p), Some(y)) = (&a.cls_probs, &a.cls_targets) {
                let p = read_tensor(p)?;
                let y = read_tensor(y)?;
                let targets = y
                    .data()
                    .iter()
                    .map(|&v| match v {
                        0.0 => Ok(false),
                        1.0 => Ok(true),
                        other => Err(anyhow!("classification target {other} is not 0 or 1")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let l = classification_loss(p.data(), &targets)?;
                if let Some(path) = &a.out_cls_grad {
                    write_tensor(&Tensor::new(p.shape().to_vec(), l.grad.clone())?, path)?;
                }
                cls = f64::from(l.loss);
                r.put("cls_loss", l.loss)
                    .put("cls_grad_norm", l.grad_norm());
            }
            let mut seg = 0.0;
            if let (Some(z), Some(t)) = (&a.seg_logits, &a.seg_labels) {
                let z = read_tensor(z)?;
                let l = segmentation_loss(&z, &read_labels(t, None)?)?;
                if let Some(path) = &a.out_seg_grad {
                    write_tensor(&Tensor::new(z.shape().to_vec(), l.grad.clone())?, path)?;
                }
                seg = f64::from(l.loss);
                r.put("seg_loss", l.loss)
                    .put("seg_grad_norm", l.grad_norm());
            }
            let total = combine(cls, seg, a.aff, a.reg, &weights)?;
            r.put("aff_loss", a.aff)
                .put("reg_loss", a.reg)
                .put("total", total);
        }
        Command::EvalMiou(a) => eval_miou(&a, out)?,
        Command::Pipeline(a) => {
            let mut b = ConfigBuilder::new();
            if let Some(path) = &a.config {
                b.load_file(path)?;
            }
            let paths = [
                ("image", &a.image),
                ("features", &a.features),
                ("weights", &a.weights),
                ("attention", &a.attention),
                ("out_dir", &a.out_dir),
            ];
            for (key, value) in paths {
                if let Some(v) = value {
                    b.set(key, &v.to_string_lossy());
                }
            }
            if let Some(c) = &a.classes {
                b.set("classes", c);
            }
            if a.dump_stages {
                b.set("dump_stages", "true");
            }
            for pair in &a.overrides {
                b.set_pair(pair)?;
            }
            let cfg = b.build()?;
            let (_, report) = run_pipeline(&cfg)?;
            out.write_all(report.as_bytes())?;
        }
        Command::Gradcheck(a) => {
            let sizes = GradcheckSizes {
                instances: a.instances,
                ..GradcheckSizes::default()
            };
            let report = gradcheck::run(a.seed, &sizes);
            write!(out, "{report}")?;
            return Ok(report.passed());
        }
        Command::Synth(a) => synth(&a, &mut r)?,
    }
    r.emit(out)?;
    Ok(true)
}

fn eval_miou(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut names: Vec<_> = fs::read_dir(&a.truth_dir)
        .with_context(|| format!("listing {}", a.truth_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no .pgm files in {}", a.truth_dir.display());
    }
    let mut cm = ConfusionMatrix::new(a.classes);
    for truth_path in &names {
        let name = truth_path.file_name().expect("listed file");
        let pred_path = a.pred_dir.join(name);
        let truth = read_labels(truth_path, Some(a.classes))?;
        let pred = read_labels(&pred_path, Some(a.classes))?;
        cm.accumulate(&pred, &truth)
            .with_context(|| format!("comparing {}", pred_path.display()))?;
    }
    let report = cm.miou()?;
    if a.table {
        writeln!(out, "{:>6}  {:>8}", "class", "IoU")?;
        for (c, iou) in report.per_class.iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "{c:>6}  {:>8.2}", v * 100.0)?,
                None => writeln!(out, "{c:>6}  {:>8}", "-")?,
            }
        }
        writeln!(out, "{:>6}  {:>8.2}", "mIoU", report.mean * 100.0)?;
    } else {
        let mut r = Report::default();
        r.put("images", names.len());
        for (c, iou) in report.per_class.iter().enumerate() {
            if let Some(v) = iou {
                r.put(format!("iou_{c}"), v);
            }
        }
        r.put("miou", report.mean);
        r.emit(out)?;
    }
    Ok(())
}

pub mod synth_files {
    pub const IMAGE: &str = "image.ppm";
    pub const FEATURES: &str = "features.ten";
    pub const WEIGHTS: &str = "weights.ten";
    pub const TRUTH: &str = "truth.pgm";
    pub const ATTENTION: &str = "attention.ten";
    pub const CONFIG: &str = "pipeline.cfg";
}

fn synth(a: &SynthArgs, r: &mut Report) -> Result<()> {
    let spec = SceneSpec {
        seed: a.seed,
        noise: a.noise,
        seed_fraction: a.seed_fraction,
        attention_scale: a.attention_scale,
        ..SceneSpec::default()
    };
    let scene = make_synthetic(&spec)?;
    let dir = &a.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_image(&scene.image, dir.join(synth_files::IMAGE))?;
    write_tensor(&scene.features, dir.join(synth_files::FEATURES))?;
    write_tensor(scene.weights.tensor(), dir.join(synth_files::WEIGHTS))?;
    write_labels(&scene.truth, dir.join(synth_files::TRUTH))?;
    write_tensor(
        &scene.attention.to_tensor(),
        dir.join(synth_files::ATTENTION),
    )?;
    let classes: Vec<String> = scene.classes_present.iter().map(u8::to_string).collect();
    let config = format!(
        "image = {}\nfeatures = {}\nweights = {}\nattention = {}\nclasses = {}\nout_dir = {}\n",
        dir.join(synth_files::IMAGE).display(),
        dir.join(synth_files::FEATURES).display(),
        dir.join(synth_files::WEIGHTS).display(),
        dir.join(synth_files::ATTENTION).display(),
        classes.join(","),
        dir.join("out").display(),
    );
    fs::write(dir.join(synth_files::CONFIG), config)?;
    r.put("height", spec.height)
        .put("width", spec.width)
        .put("classes", classes.join(","));
    Ok(())
}
