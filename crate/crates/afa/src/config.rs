//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and `#` comments are skipped. Later assignments win, so
//! command-line overrides are applied after the file.

use std::fs;
use std::path::{Path, PathBuf};

use afa_core::cam::{BackgroundScore, BackgroundThresholds};
use afa_core::losses::LossWeights;
use afa_core::par::ParConfig;
use anyhow::{anyhow, bail, Context, Result};

/// Numerical settings of every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams {
    pub thresholds: BackgroundThresholds,
    /// Background score of the final single-threshold labelling.
    pub beta: BackgroundScore,
    pub radius: usize,
    pub alpha: f32,
    pub par: ParConfig,
    pub loss_weights: LossWeights,
    /// Head combiner weights; `None` means uniform `1/m`.
    pub head_weights: Option<Vec<f32>>,
    pub head_bias: f32,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            thresholds: BackgroundThresholds::default(),
            beta: BackgroundScore::new(0.45).expect("valid default"),
            radius: 8,
            alpha: 2.0,
            par: ParConfig::default(),
            loss_weights: LossWeights::default(),
            head_weights: None,
            head_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub image: PathBuf,
    pub features: PathBuf,
    pub weights: PathBuf,
    pub attention: PathBuf,
    pub classes: Vec<u8>,
    pub out_dir: PathBuf,
    pub dump_stages: bool,
    pub params: PipelineParams,
}

/// Accumulates assignments, then validates them into a [`PipelineConfig`].
#[derive(Debug, Default, Clone)]
pub struct ConfigBuilder {
    entries: Vec<(String, String)>,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load_file(&mut self, path: &Path) -> Result<&mut Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.parse_str(&text)
            .with_context(|| format!("in config {}", path.display()))?;
        Ok(self)
    }

    pub fn parse_str(&mut self, text: &str) -> Result<&mut Self> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            self.set(k.trim(), v.trim());
        }
        Ok(self)
    }

    /// Parses a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<&mut Self> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{pair}` is not key=value"))?;
        self.set(k.trim(), v.trim());
        Ok(self)
    }

    pub fn set(&mut self, key: &str, value: &str) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn build(&self) -> Result<PipelineConfig> {
        let mut image = None;
        let mut features = None;
        let mut weights = None;
        let mut attention = None;
        let mut classes = None;
        let mut out_dir = None;
        let mut dump_stages = false;
        let mut params = PipelineParams::default();
        let (mut beta_low, mut beta_high) = (params.thresholds.low(), params.thresholds.high());
        let mut beta = params.beta.get();
        let (mut l1, mut l2, mut l3) = (
            params.loss_weights.seg,
            params.loss_weights.aff,
            params.loss_weights.reg,
        );

        for (key, value) in &self.entries {
            let ctx = || format!("config key `{key}` = `{value}`");
            match key.as_str() {
                "image" => image = Some(PathBuf::from(value)),
                "features" => features = Some(PathBuf::from(value)),
                "weights" => weights = Some(PathBuf::from(value)),
                "attention" => attention = Some(PathBuf::from(value)),
                "out_dir" => out_dir = Some(PathBuf::from(value)),
                "classes" => classes = Some(parse_list::<u8>(value).with_context(ctx)?),
                "dump_stages" => dump_stages = value.parse().with_context(ctx)?,
                "beta" => beta = value.parse().with_context(ctx)?,
                "beta_low" => beta_low = value.parse().with_context(ctx)?,
                "beta_high" => beta_high = value.parse().with_context(ctx)?,
                "radius" => params.radius = value.parse().with_context(ctx)?,
                "alpha" => params.alpha = value.parse().with_context(ctx)?,
                "dilations" => params.par.dilations = parse_list(value).with_context(ctx)?,
                "w1" => params.par.w1 = value.parse().with_context(ctx)?,
                "w2" => params.par.w2 = value.parse().with_context(ctx)?,
                "w3" => params.par.w3 = value.parse().with_context(ctx)?,
                "iterations" => params.par.iterations = value.parse().with_context(ctx)?,
                "sigma_floor" => params.par.sigma_floor = value.parse().with_context(ctx)?,
                "lambda1" => l1 = value.parse().with_context(ctx)?,
                "lambda2" => l2 = value.parse().with_context(ctx)?,
                "lambda3" => l3 = value.parse().with_context(ctx)?,
                "head_weights" => params.head_weights = Some(parse_list(value).with_context(ctx)?),
                "head_bias" => params.head_bias = value.parse().with_context(ctx)?,
                other => bail!("unknown config key `{other}`"),
            }
        }

        params.thresholds = BackgroundThresholds::new(beta_low, beta_high)?;
        params.beta = BackgroundScore::new(beta)?;
        params.loss_weights = LossWeights::new(l1, l2, l3)?;
        params.par.validate()?;
        if params.radius == 0 {
            bail!("radius must be at least 1");
        }
        if !(params.alpha >= 1.0 && params.alpha.is_finite()) {
            bail!("alpha must be finite and at least 1");
        }
        let classes = classes.ok_or_else(|| anyhow!("missing config key `classes`"))?;
        if classes.is_empty() || classes.contains(&0) || classes.contains(&afa_core::IGNORE) {
            bail!("classes must be a non-empty list of foreground ids");
        }
        let need =
            |v: Option<PathBuf>, k: &str| v.ok_or_else(|| anyhow!("missing config key `{k}`"));
        Ok(PipelineConfig {
            image: need(image, "image")?,
            features: need(features, "features")?,
            weights: need(weights, "weights")?,
            attention: need(attention, "attention")?,
            classes,
            out_dir: need(out_dir, "out_dir")?,
            dump_stages,
            params,
        })
    }
}

/// Comma-separated list, e.g. `1,2,4`.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    s.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .with_context(|| format!("bad list item `{p}`"))
        })
        .collect()
}
