//! Central-voxel classifier over the four converted modality maps.
//!
//! Pipeline: convert each modality → concatenate (FLAIR, T1, T1c, T2) →
//! blocks of 3×3 same-padded conv+ReLU, each block closed by a 2×2 max-pool →
//! flatten → hidden dense+ReLU+dropout layers → dense → softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Padding, Var};
use crate::conversion::{ConversionParams, ConversionVars};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// In-plane patch extent ω.
    pub patch_size: usize,
    /// Slices per patch L.
    pub slices: usize,
    pub reduction_ratio: usize,
    /// 1×1 bottleneck output maps per modality.
    pub bottleneck_channels: usize,
    pub se_enabled: bool,
    /// Output channels of each 3×3 conv, grouped by pooling block.
    pub conv_blocks: Vec<Vec<usize>>,
    pub hidden_units: Vec<usize>,
    pub classes: usize,
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 33,
            slices: 7,
            reduction_ratio: 2,
            bottleneck_channels: 1,
            se_enabled: true,
            conv_blocks: vec![vec![32, 32, 32], vec![64, 64, 64]],
            hidden_units: vec![64, 32],
            classes: 4,
            dropout_p: 0.5,
        }
    }
}

impl ModelConfig {
    /// Small geometry used by gradient checks and overfit tests.
    pub fn shrunken() -> Self {
        ModelConfig {
            patch_size: 9,
            slices: 3,
            conv_blocks: vec![vec![2, 2, 2], vec![3, 3, 3]],
            hidden_units: vec![8, 4],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.patch_size.is_multiple_of(2) || self.slices.is_multiple_of(2) {
            return bad(format!(
                "patch extents must be odd, got ω={} L={}",
                self.patch_size, self.slices
            ));
        }
        if self.reduction_ratio == 0 || self.bottleneck_channels == 0 {
            return bad("reduction ratio and bottleneck channels must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout_p));
        }
        if self.conv_blocks.is_empty() || self.conv_blocks.iter().any(|b| b.is_empty() || b.contains(&0)) {
            return bad(format!("invalid conv blocks {:?}", self.conv_blocks));
        }
        if self.hidden_units.contains(&0) {
            return bad(format!("invalid hidden units {:?}", self.hidden_units));
        }
        let mut s = self.patch_size;
        for _ in &self.conv_blocks {
            if s < 2 {
                return bad(format!("patch size {} too small for {} pools", self.patch_size, self.conv_blocks.len()));
            }
            s /= 2;
        }
        Ok(())
    }

    /// Spatial extent after all pooling blocks.
    pub fn final_extent(&self) -> usize {
        self.conv_blocks.iter().fold(self.patch_size, |s, _| s / 2)
    }

    pub fn flatten_len(&self) -> usize {
        let last = *self.conv_blocks.last().and_then(|b| b.last()).unwrap_or(&0);
        last * self.final_extent().pow(2)
    }

    pub fn input_channels(&self) -> usize {
        Modality::ALL.len() * self.bottleneck_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T: Scalar> {
    /// `[C_out×C_in×3×3]`
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T: Scalar> {
    /// `[out×in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T: Scalar> {
    pub convs: Vec<ConvLayer<T>>,
    /// Hidden layers followed by the output layer.
    pub dense: Vec<DenseLayer<T>>,
    pub dropout_p: f64,
}

/// Every trainable weight: one conversion block per modality plus the shared classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    /// Indexed by [`Modality::index`].
    pub conversion: Vec<ConversionParams<T>>,
    pub classifier: ClassifierParams<T>,
}

fn he<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng).with_grad()
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let conversion = Modality::ALL
            .iter()
            .map(|_| {
                ConversionParams::zeros(
                    config.slices,
                    config.reduction_ratio,
                    config.bottleneck_channels,
                    config.se_enabled,
                )
            })
            .collect();
        let mut convs = Vec::new();
        let mut c_in = config.input_channels();
        for &c_out in config.conv_blocks.iter().flatten() {
            convs.push(ConvLayer {
                kernels: Tensor::zeros(&[c_out, c_in, 3, 3]).with_grad(),
                bias: Tensor::zeros(&[c_out]).with_grad(),
            });
            c_in = c_out;
        }
        let mut dense = Vec::new();
        let mut n_in = config.flatten_len();
        for &n_out in config.hidden_units.iter().chain(std::iter::once(&config.classes)) {
            dense.push(DenseLayer {
                weight: Tensor::zeros(&[n_out, n_in]).with_grad(),
                bias: Tensor::zeros(&[n_out]).with_grad(),
            });
            n_in = n_out;
        }
        Ok(ModelParams {
            config: config.clone(),
            conversion,
            classifier: ClassifierParams {
                convs,
                dense,
                dropout_p: config.dropout_p,
            },
        })
    }

    /// He-initialised weights (`N(0, 2/fan_in)`), zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in p.conversion.iter_mut() {
            *block = ConversionParams::init(
                config.slices,
                config.reduction_ratio,
                config.bottleneck_channels,
                config.se_enabled,
                &mut rng,
            );
        }
        for layer in p.classifier.convs.iter_mut() {
            let s = layer.kernels.shape().to_vec();
            layer.kernels = he(&s, s[1] * 9, &mut rng);
        }
        for layer in p.classifier.dense.iter_mut() {
            let s = layer.weight.shape().to_vec();
            layer.weight = he(&s, s[1], &mut rng);
        }
        Ok(p)
    }

    /// Stable, unique names in the canonical parameter order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for m in Modality::ALL {
            for part in ["w1", "w2", "bottleneck.kernels", "bottleneck.bias"] {
                names.push(format!("conversion.{m}.{part}"));
            }
        }
        for i in 0..self.classifier.convs.len() {
            names.push(format!("classifier.conv{i}.kernels"));
            names.push(format!("classifier.conv{i}.bias"));
        }
        let last = self.classifier.dense.len() - 1;
        for i in 0..self.classifier.dense.len() {
            let layer = if i == last { "out".to_string() } else { format!("fc{}", i + 1) };
            names.push(format!("classifier.{layer}.weight"));
            names.push(format!("classifier.{layer}.bias"));
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = Vec::new();
        for c in &self.conversion {
            out.extend(c.tensors());
        }
        for l in &self.classifier.convs {
            out.push(&l.kernels);
            out.push(&l.bias);
        }
        for l in &self.classifier.dense {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for c in &mut self.conversion {
            out.extend(c.tensors_mut());
        }
        for l in &mut self.classifier.convs {
            out.push(&mut l.kernels);
            out.push(&mut l.bias);
        }
        for l in &mut self.classifier.dense {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.names().into_iter().zip(self.tensors()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            conversion: self.conversion.iter().map(|c| c.cast()).collect(),
            classifier: ClassifierParams {
                convs: self
                    .classifier
                    .convs
                    .iter()
                    .map(|l| ConvLayer {
                        kernels: l.kernels.cast(),
                        bias: l.bias.cast(),
                    })
                    .collect(),
                dense: self
                    .classifier
                    .dense
                    .iter()
                    .map(|l| DenseLayer {
                        weight: l.weight.cast(),
                        bias: l.bias.cast(),
                    })
                    .collect(),
                dropout_p: self.classifier.dropout_p,
            },
        }
    }

    /// Toggles slice calibration in every conversion block.
    pub fn set_se_enabled(&mut self, enabled: bool) {
        self.config.se_enabled = enabled;
        for c in &mut self.conversion {
            c.se_enabled = enabled;
        }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> ModelVars {
        let conversion: Vec<ConversionVars> = self.conversion.iter().map(|c| c.bind(g)).collect();
        let convs = self
            .classifier
            .convs
            .iter()
            .map(|l| (g.leaf(&l.kernels), g.leaf(&l.bias)))
            .collect();
        let dense = self
            .classifier
            .dense
            .iter()
            .map(|l| (g.leaf(&l.weight), g.leaf(&l.bias)))
            .collect();
        ModelVars {
            conversion,
            convs,
            dense,
        }
    }
}

/// Model parameters bound into a graph.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub conversion: Vec<ConversionVars>,
    pub convs: Vec<(Var, Var)>,
    pub dense: Vec<(Var, Var)>,
}

impl ModelVars {
    /// Vars in the canonical parameter order (matches [`ModelParams::tensors`]).
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for c in &self.conversion {
            out.extend(c.as_array());
        }
        for &(k, b) in &self.convs {
            out.extend([k, b]);
        }
        for &(w, b) in &self.dense {
            out.extend([w, b]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub logits: Var,
    pub probs: Var,
}

fn dense<T: Scalar>(g: &mut Graph<'_, T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let n = g.value(x).len();
    let col = g.reshape(x, &[n, 1])?;
    let y = g.matmul(w, col)?;
    let m = g.shape(y)[0];
    let y = g.reshape(y, &[m])?;
    g.add(y, b)
}

pub(crate) fn check_patches<T: Scalar>(config: &ModelConfig, patches: &[Tensor<T>]) -> Result<()> {
    if patches.len() != Modality::ALL.len() {
        return Err(Error::Usage(format!(
            "expected {} modality patches (FLAIR, T1, T1c, T2), got {}",
            Modality::ALL.len(),
            patches.len()
        )));
    }
    let want = [config.slices, config.patch_size, config.patch_size];
    for (m, p) in Modality::ALL.iter().zip(patches) {
        if p.shape() != want {
            return Err(Error::Dimension(format!(
                "{m} patch {:?}, model expects {want:?}",
                p.shape()
            )));
        }
    }
    Ok(())
}

/// Builds the forward pass on already-bound inputs.
pub fn forward_graph<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<'_, T>,
    vars: &ModelVars,
    config: &ModelConfig,
    inputs: &[Var],
    training: bool,
    rng: &mut R,
) -> Result<ForwardVars> {
    let maps = vars
        .conversion
        .iter()
        .zip(inputs)
        .map(|(cv, &x)| cv.convert(g, x))
        .collect::<Result<Vec<_>>>()?;
    let mut h = g.concat_channels(&maps)?;
    let mut layer = 0;
    for block in &config.conv_blocks {
        for _ in block {
            let (k, b) = vars.convs[layer];
            h = g.conv2d(h, k, b, Padding::Same)?;
            h = g.relu(h)?;
            layer += 1;
        }
        h = g.maxpool2d(h)?;
    }
    let n = g.value(h).len();
    h = g.reshape(h, &[n])?;
    let (hidden, out) = vars.dense.split_at(vars.dense.len() - 1);
    for &layer in hidden {
        h = dense(g, h, layer)?;
        h = g.relu(h)?;
        h = g.dropout(h, config.dropout_p, training, rng)?;
    }
    let logits = dense(g, h, out[0])?;
    let probs = g.softmax(logits)?;
    Ok(ForwardVars { logits, probs })
}

/// Class-probability vector for one set of modality patches.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    patches: &[Tensor<T>],
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_patches(&params.config, patches)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let inputs: Vec<Var> = patches.iter().map(|p| g.leaf(p)).collect();
    let out = forward_graph(&mut g, &vars, &params.config, &inputs, training, rng)?;
    Ok(g.to_tensor(out.probs))
}

/// Evaluation-mode pre-softmax scores.
pub fn logits<T: Scalar>(params: &ModelParams<T>, patches: &[Tensor<T>]) -> Result<Tensor<T>> {
    check_patches(&params.config, patches)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let inputs: Vec<Var> = patches.iter().map(|p| g.leaf(p)).collect();
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let out = forward_graph(&mut g, &vars, &params.config, &inputs, false, &mut unused)?;
    Ok(g.to_tensor(out.logits))
}

/// Training-mode cross-entropy against the centre-voxel label.
pub fn loss<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    patches: &[Tensor<T>],
    target: usize,
    rng: &mut R,
) -> Result<T> {
    check_patches(&params.config, patches)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let inputs: Vec<Var> = patches.iter().map(|p| g.leaf(p)).collect();
    let out = forward_graph(&mut g, &vars, &params.config, &inputs, true, rng)?;
    let l = g.cross_entropy(out.probs, target)?;
    Ok(g.value(l)[0])
}

/// Loss, per-parameter gradients (canonical order) and the training-mode
/// prediction for one sample.
#[derive(Debug, Clone)]
pub struct SampleGradient<T> {
    pub loss: T,
    pub grads: Vec<Vec<T>>,
    pub predicted: usize,
}

pub fn loss_and_grads<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    patches: &[Tensor<T>],
    target: usize,
    rng: &mut R,
) -> Result<SampleGradient<T>> {
    check_patches(&params.config, patches)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let inputs: Vec<Var> = patches.iter().map(|p| g.leaf(p)).collect();
    let out = forward_graph(&mut g, &vars, &params.config, &inputs, true, rng)?;
    let l = g.cross_entropy(out.probs, target)?;
    let mut grads = g.backward(l)?;
    let all = vars.all();
    let tensors = params.tensors();
    let grads = all
        .iter()
        .zip(&tensors)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![T::zero(); t.len()]))
        .collect();
    Ok(SampleGradient {
        loss: g.value(l)[0],
        grads,
        predicted: argmax(g.value(out.probs)),
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Evaluation-mode class prediction.
pub fn predict<T: Scalar>(params: &ModelParams<T>, patches: &[Tensor<T>]) -> Result<usize> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let probs = forward(params, patches, false, &mut unused)?;
    Ok(argmax(probs.data()))
}
