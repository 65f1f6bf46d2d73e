//! Flag definitions and run configurations. Every command accepts an
//! optional JSON `--config` file; flags given on the command line override
//! its values, and the merged configuration is echoed next to the outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use patchconv::inference::{DEFAULT_MARGIN, DEFAULT_THRESHOLD_K};
use patchconv::train::TrainConfig;
use patchconv::{Error, ModelConfig, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "patchconv", version, about = "Multimodal volume segmentation with 3D-to-2D patch conversion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic subject (four modalities plus labels).
    Phantom(PhantomArgs),
    /// Train a model on one or more subject directories.
    Train(TrainArgs),
    /// Segment a subject with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        field: path.display().to_string(),
        message: e.to_string(),
    })
}

macro_rules! override_with {
    ($dst:expr, $( $field:ident => $target:expr ),* $(,)?) => {
        $( if let Some(v) = $dst.$field.clone() { $target = v; } )*
    };
}

fn require_out(out: &Option<PathBuf>) -> Result<PathBuf> {
    out.clone()
        .ok_or_else(|| Error::Usage("an output directory is required (--out or `out` in the config file)".into()))
}

// ---------------------------------------------------------------- phantom

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output subject directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Volume extent as D,H,W (each at least 32).
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_std: Option<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomRun {
    pub out: Option<PathBuf>,
    pub dims: [usize; 3],
    pub seed: u64,
    pub noise_std: f32,
}

impl Default for PhantomRun {
    fn default() -> Self {
        PhantomRun {
            out: None,
            dims: [48, 48, 48],
            seed: 0,
            noise_std: patchconv::data::PhantomSpec::default().noise_std,
        }
    }
}

impl PhantomArgs {
    pub fn resolve(&self) -> Result<(PhantomRun, PathBuf)> {
        let mut run: PhantomRun = load(self.config.as_deref())?;
        if let Some(d) = &self.dims {
            run.dims = d
                .as_slice()
                .try_into()
                .map_err(|_| Error::Usage(format!("--dims needs three values, got {}", d.len())))?;
        }
        override_with!(self, seed => run.seed, noise_std => run.noise_std);
        if self.out.is_some() {
            run.out = self.out.clone();
        }
        let out = require_out(&run.out)?;
        Ok((run, out))
    }
}

// ---------------------------------------------------------------- train

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Subject directory; repeat for several subjects.
    #[arg(long = "subject")]
    pub subjects: Vec<PathBuf>,
    /// Output directory for the checkpoint, log and config echo.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// In-plane patch extent ω (odd).
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Slices per patch L (odd).
    #[arg(long)]
    pub slices: Option<usize>,
    #[arg(long)]
    pub reduction_ratio: Option<usize>,
    #[arg(long)]
    pub bottleneck_channels: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Bypass slice calibration in the conversion block.
    #[arg(long)]
    pub no_se: bool,
    /// Use the small verification geometry (ω=9, L=3, narrow layers).
    #[arg(long)]
    pub shrunken: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patches_per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stop_at_accuracy: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub subjects: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub patches_per_class: usize,
    pub workers: usize,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            subjects: Vec::new(),
            out: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            patches_per_class: 320,
            workers: 1,
        }
    }
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<(TrainRun, PathBuf)> {
        let mut run: TrainRun = load(self.config.as_deref())?;
        if self.shrunken {
            run.model = ModelConfig {
                classes: run.model.classes,
                ..ModelConfig::shrunken()
            };
        }
        if !self.subjects.is_empty() {
            run.subjects = self.subjects.clone();
        }
        if self.out.is_some() {
            run.out = self.out.clone();
        }
        override_with!(self,
            patch_size => run.model.patch_size,
            slices => run.model.slices,
            reduction_ratio => run.model.reduction_ratio,
            bottleneck_channels => run.model.bottleneck_channels,
            classes => run.model.classes,
            dropout => run.model.dropout_p,
            batch_size => run.train.batch_size,
            epochs => run.train.epochs,
            seed => run.train.seed,
            learning_rate => run.train.optimizer.learning_rate,
            rho => run.train.optimizer.rho,
            epsilon => run.train.optimizer.epsilon,
            patches_per_class => run.patches_per_class,
            workers => run.workers,
        );
        if self.no_se {
            run.model.se_enabled = false;
        }
        if self.stop_at_accuracy.is_some() {
            run.train.stop_at_accuracy = self.stop_at_accuracy;
        }
        let out = require_out(&run.out)?;
        Ok((run, out))
    }
}

// ---------------------------------------------------------------- predict

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BboxChoice {
    Full,
    FlairThreshold,
    ProvidedMask,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Subject directory with the four modality containers.
    #[arg(long)]
    pub subject: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub bbox: Option<BboxChoice>,
    /// Label container whose nonzero voxels define the box (provided-mask mode).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// FLAIR threshold is mean + k·std of the nonzero voxels.
    #[arg(long)]
    pub threshold_k: Option<f64>,
    #[arg(long)]
    pub margin: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overlay slice as AXIS:INDEX (axis 0 axial, 1 coronal, 2 sagittal); repeatable.
    #[arg(long = "overlay")]
    pub overlays: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictRun {
    pub checkpoint: Option<PathBuf>,
    pub subject: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub bbox: BboxChoice,
    pub mask: Option<PathBuf>,
    pub threshold_k: f64,
    pub margin: usize,
    pub workers: usize,
    pub overlays: Vec<String>,
}

impl Default for PredictRun {
    fn default() -> Self {
        PredictRun {
            checkpoint: None,
            subject: None,
            out: None,
            bbox: BboxChoice::FlairThreshold,
            mask: None,
            threshold_k: DEFAULT_THRESHOLD_K,
            margin: DEFAULT_MARGIN,
            workers: 0,
            overlays: Vec::new(),
        }
    }
}

impl PredictArgs {
    pub fn resolve(&self) -> Result<(PredictRun, PathBuf)> {
        let mut run: PredictRun = load(self.config.as_deref())?;
        for (flag, slot) in [
            (&self.checkpoint, &mut run.checkpoint),
            (&self.subject, &mut run.subject),
            (&self.out, &mut run.out),
            (&self.mask, &mut run.mask),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        override_with!(self,
            bbox => run.bbox,
            threshold_k => run.threshold_k,
            margin => run.margin,
            workers => run.workers,
        );
        if !self.overlays.is_empty() {
            run.overlays = self.overlays.clone();
        }
        let out = require_out(&run.out)?;
        Ok((run, out))
    }
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Predicted label container (or a directory holding `prediction.mvol.json`); repeatable.
    #[arg(long = "pred")]
    pub predictions: Vec<PathBuf>,
    /// Ground-truth label container (or subject directory); one per `--pred`.
    #[arg(long = "truth")]
    pub truths: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateRun {
    pub predictions: Vec<PathBuf>,
    pub truths: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

impl EvaluateArgs {
    pub fn resolve(&self) -> Result<(EvaluateRun, PathBuf)> {
        let mut run: EvaluateRun = load(self.config.as_deref())?;
        if !self.predictions.is_empty() {
            run.predictions = self.predictions.clone();
        }
        if !self.truths.is_empty() {
            run.truths = self.truths.clone();
        }
        if self.out.is_some() {
            run.out = self.out.clone();
        }
        let out = require_out(&run.out)?;
        Ok((run, out))
    }
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Corrupt the conv kernel gradient to prove the suite catches it.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckRun {
    pub out: Option<PathBuf>,
    pub seeds: usize,
    pub step: f64,
    pub threshold: f64,
    pub inject_fault: bool,
}

impl Default for GradcheckRun {
    fn default() -> Self {
        use patchconv::verify::{DEFAULT_SEEDS, DEFAULT_STEP, DEFAULT_THRESHOLD};
        GradcheckRun {
            out: None,
            seeds: DEFAULT_SEEDS,
            step: DEFAULT_STEP,
            threshold: DEFAULT_THRESHOLD,
            inject_fault: false,
        }
    }
}

impl GradcheckArgs {
    pub fn resolve(&self) -> Result<GradcheckRun> {
        let mut run: GradcheckRun = load(self.config.as_deref())?;
        if self.out.is_some() {
            run.out = self.out.clone();
        }
        override_with!(self, seeds => run.seeds, step => run.step, threshold => run.threshold);
        run.inject_fault |= self.inject_fault;
        Ok(run)
    }
}
