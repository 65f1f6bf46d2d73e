//! Slice calibration and 3D-to-2D conversion of a single-modality patch.
//!
//! A patch `x [L×ω×ω]` is squeezed to one mean per slice, passed through a
//! bias-free `L → h → L` excitation (ReLU then sigmoid), and every slice is
//! rescaled by its gate `u_l ∈ (0, 1)`. A 1×1 convolution with ReLU then mixes
//! the `L` calibrated slices into `C_out` 2D maps.

use rand::Rng;

use crate::autodiff::{Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Width of the excitation bottleneck, `max(1, ⌊L / r⌋)`.
pub fn hidden_width(slices: usize, reduction_ratio: usize) -> usize {
    (slices / reduction_ratio.max(1)).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversionParams<T: Scalar> {
    /// Excitation contraction, `[h×L]`.
    pub w1: Tensor<T>,
    /// Excitation expansion, `[L×h]`.
    pub w2: Tensor<T>,
    /// `[C_out×L×1×1]`
    pub bottleneck_kernels: Tensor<T>,
    /// `[C_out]`
    pub bottleneck_bias: Tensor<T>,
    pub reduction_ratio: usize,
    /// When false the gates are forced to one and `x′ = x`.
    pub se_enabled: bool,
}

/// Calibrated patch `x′` together with the gates that produced it.
#[derive(Debug, Clone)]
pub struct CalibratedPatch<T: Scalar> {
    pub x_prime: Tensor<T>,
    pub u: Tensor<T>,
}

impl<T: Scalar> ConversionParams<T> {
    /// All-zero weights with the given geometry.
    pub fn zeros(slices: usize, reduction_ratio: usize, out_channels: usize, se_enabled: bool) -> Self {
        assert!(slices >= 1 && reduction_ratio >= 1 && out_channels >= 1);
        let h = hidden_width(slices, reduction_ratio);
        ConversionParams {
            w1: Tensor::zeros(&[h, slices]).with_grad(),
            w2: Tensor::zeros(&[slices, h]).with_grad(),
            bottleneck_kernels: Tensor::zeros(&[out_channels, slices, 1, 1]).with_grad(),
            bottleneck_bias: Tensor::zeros(&[out_channels]).with_grad(),
            reduction_ratio,
            se_enabled,
        }
    }

    /// Gaussian weights scaled by `√(2 / fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(
        slices: usize,
        reduction_ratio: usize,
        out_channels: usize,
        se_enabled: bool,
        rng: &mut R,
    ) -> Self {
        let h = hidden_width(slices, reduction_ratio);
        let mut p = Self::zeros(slices, reduction_ratio, out_channels, se_enabled);
        p.w1 = Tensor::randn(&[h, slices], (2.0 / slices as f64).sqrt(), rng).with_grad();
        p.w2 = Tensor::randn(&[slices, h], (2.0 / h as f64).sqrt(), rng).with_grad();
        p.bottleneck_kernels =
            Tensor::randn(&[out_channels, slices, 1, 1], (2.0 / slices as f64).sqrt(), rng).with_grad();
        p
    }

    pub fn slices(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.bottleneck_kernels.shape()[0]
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.w1, &self.w2, &self.bottleneck_kernels, &self.bottleneck_bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [
            &mut self.w1,
            &mut self.w2,
            &mut self.bottleneck_kernels,
            &mut self.bottleneck_bias,
        ]
    }

    pub fn cast<U: Scalar>(&self) -> ConversionParams<U> {
        ConversionParams {
            w1: self.w1.cast(),
            w2: self.w2.cast(),
            bottleneck_kernels: self.bottleneck_kernels.cast(),
            bottleneck_bias: self.bottleneck_bias.cast(),
            reduction_ratio: self.reduction_ratio,
            se_enabled: self.se_enabled,
        }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> ConversionVars {
        ConversionVars {
            w1: g.leaf(&self.w1),
            w2: g.leaf(&self.w2),
            kernels: g.leaf(&self.bottleneck_kernels),
            bias: g.leaf(&self.bottleneck_bias),
            slices: self.slices(),
            se_enabled: self.se_enabled,
        }
    }

    /// Wraps already-created graph nodes `[w1, w2, kernels, bias]`.
    pub fn bind_vars(&self, vars: [Var; 4]) -> ConversionVars {
        ConversionVars {
            w1: vars[0],
            w2: vars[1],
            kernels: vars[2],
            bias: vars[3],
            slices: self.slices(),
            se_enabled: self.se_enabled,
        }
    }

    fn check_patch(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.slices() {
            return Err(Error::Dimension(format!(
                "conversion block expects {}×ω×ω patches, got {s:?}",
                self.slices()
            )));
        }
        Ok(())
    }
}

/// Conversion parameters bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct ConversionVars {
    pub w1: Var,
    pub w2: Var,
    pub kernels: Var,
    pub bias: Var,
    slices: usize,
    se_enabled: bool,
}

impl ConversionVars {
    pub fn as_array(&self) -> [Var; 4] {
        [self.w1, self.w2, self.kernels, self.bias]
    }

    /// Per-slice spatial mean, `[L×ω×ω] → [L]`.
    pub fn squeeze<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.slice_mean(x)
    }

    /// `u = σ(W₂ · relu(W₁ · z))`
    pub fn excite<T: Scalar>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        if g.value(z).len() != self.slices {
            return Err(Error::Dimension(format!(
                "excitation expects {} slice descriptors, got {:?}",
                self.slices,
                g.shape(z)
            )));
        }
        let col = g.reshape(z, &[self.slices, 1])?;
        let hidden = g.matmul(self.w1, col)?;
        let hidden = g.relu(hidden)?;
        let gates = g.matmul(self.w2, hidden)?;
        let gates = g.sigmoid(gates)?;
        g.reshape(gates, &[self.slices])
    }

    /// Returns `x′` and, when SE is enabled, the gates `u`.
    pub fn calibrate<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Option<Var>)> {
        if !self.se_enabled {
            return Ok((x, None));
        }
        let z = self.squeeze(g, x)?;
        let u = self.excite(g, z)?;
        let x_prime = g.scale_slices(x, u)?;
        Ok((x_prime, Some(u)))
    }

    /// `x″ = relu(conv1×1(x′))`, `[L×ω×ω] → [C_out×ω×ω]`.
    pub fn convert<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (x_prime, _) = self.calibrate(g, x)?;
        let mixed = g.conv2d(x_prime, self.kernels, self.bias, Padding::Same)?;
        g.relu(mixed)
    }
}

pub fn squeeze<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let z = g.slice_mean(xv)?;
    Ok(g.to_tensor(z))
}

pub fn excite<T: Scalar>(z: &Tensor<T>, params: &ConversionParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let zv = g.leaf(z);
    let u = vars.excite(&mut g, zv)?;
    Ok(g.to_tensor(u))
}

pub fn calibrate<T: Scalar>(x: &Tensor<T>, params: &ConversionParams<T>) -> Result<CalibratedPatch<T>> {
    params.check_patch(x)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let xv = g.leaf(x);
    let (x_prime, u) = vars.calibrate(&mut g, xv)?;
    let u = match u {
        Some(u) => g.to_tensor(u),
        None => Tensor::full(&[params.slices()], T::one()),
    };
    Ok(CalibratedPatch {
        x_prime: g.to_tensor(x_prime),
        u,
    })
}

pub fn convert<T: Scalar>(x: &Tensor<T>, params: &ConversionParams<T>) -> Result<Tensor<T>> {
    params.check_patch(x)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let xv = g.leaf(x);
    let out = vars.convert(&mut g, xv)?;
    Ok(g.to_tensor(out))
}
