//! Finite-difference verification of every differentiable primitive, the
//! conversion block and the end-to-end shrunken model, all in `f64`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{check_graph_fn, relative_error};
use crate::autodiff::{Fault, Graph, Padding, Var};
use crate::classifier::{forward_graph, ModelConfig, ModelParams};
use crate::conversion::ConversionParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::mix_seed;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;

pub const PRIMITIVES: [&str; 17] = [
    "matmul",
    "add",
    "sum",
    "reshape",
    "conv2d_same",
    "conv2d_valid",
    "conv2d_1x1",
    "maxpool2d",
    "relu",
    "sigmoid",
    "softmax",
    "slice_mean",
    "scale_slices",
    "concat_channels",
    "dropout",
    "cross_entropy",
    "softmax_cross_entropy",
];

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seeds: usize,
    pub step: f64,
    pub threshold: f64,
    pub include_model: bool,
    pub fault: Option<Fault>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seeds: DEFAULT_SEEDS,
            step: DEFAULT_STEP,
            threshold: DEFAULT_THRESHOLD,
            include_model: true,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub threshold: f64,
    pub checks: Vec<CheckResult>,
    pub runtime_s: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    /// Worst error per check name, in first-seen order.
    pub fn by_name(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for c in &self.checks {
            match out.iter_mut().find(|(n, _)| *n == c.name) {
                Some((_, e)) => *e = e.max(c.max_rel_error),
                None => out.push((c.name.clone(), c.max_rel_error)),
            }
        }
        out
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Worst relative error of one primitive on inputs drawn from `seed`.
pub fn check_primitive(name: &str, seed: u64, h: f64, fault: Option<Fault>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let (c, hw) = (r.random_range(1..4usize), r.random_range(3..7usize));
    let (inputs, build): (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>) = match name {
        "matmul" => {
            let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            (vec![randn(&[m, k], r), randn(&[k, n], r)], Box::new(|g, v| g.matmul(v[0], v[1])))
        }
        "add" => (vec![randn(&[c, hw], r), randn(&[c, hw], r)], Box::new(|g, v| g.add(v[0], v[1]))),
        "sum" => (vec![randn(&[c, hw, 2], r)], Box::new(|g, v| Ok(g.sum(v[0])))),
        "reshape" => (
            vec![randn(&[c, hw, 2], r)],
            Box::new(move |g, v| g.reshape(v[0], &[2 * hw, c])),
        ),
        "conv2d_same" | "conv2d_valid" | "conv2d_1x1" => {
            let (k, padding) = match name {
                "conv2d_same" => (3, Padding::Same),
                "conv2d_valid" => (3, Padding::Valid),
                _ => (1, Padding::Same),
            };
            let c_out = r.random_range(1..4);
            (
                vec![randn(&[c, hw, hw], r), randn(&[c_out, c, k, k], r), randn(&[c_out], r)],
                Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], padding)),
            )
        }
        "maxpool2d" => (vec![randn(&[c, hw, hw + 1], r)], Box::new(|g, v| g.maxpool2d(v[0]))),
        "relu" => (vec![randn(&[c, hw], r)], Box::new(|g, v| g.relu(v[0]))),
        "sigmoid" => (vec![randn(&[c, hw], r)], Box::new(|g, v| g.sigmoid(v[0]))),
        "softmax" => (vec![randn(&[hw], r)], Box::new(|g, v| g.softmax(v[0]))),
        "slice_mean" => (vec![randn(&[c, hw, hw], r)], Box::new(|g, v| g.slice_mean(v[0]))),
        "scale_slices" => (
            vec![randn(&[c, hw, hw], r), randn(&[c], r)],
            Box::new(|g, v| g.scale_slices(v[0], v[1])),
        ),
        "concat_channels" => (
            vec![randn(&[c, hw, hw], r), randn(&[1, hw, hw], r), randn(&[2, hw, hw], r)],
            Box::new(|g, v| g.concat_channels(v)),
        ),
        "dropout" => {
            let mask_seed = r.random::<u64>();
            (
                vec![randn(&[c, hw], r)],
                Box::new(move |g, v| {
                    let mut m = ChaCha8Rng::seed_from_u64(mask_seed);
                    g.dropout(v[0], 0.5, true, &mut m)
                }),
            )
        }
        "cross_entropy" => {
            let target = r.random_range(0..hw);
            (
                vec![randn(&[hw], r)],
                Box::new(move |g, v| {
                    let p = g.sigmoid(v[0])?;
                    g.cross_entropy(p, target)
                }),
            )
        }
        "softmax_cross_entropy" => {
            let target = r.random_range(0..hw);
            (
                vec![randn(&[hw], r)],
                Box::new(move |g, v| {
                    let p = g.softmax(v[0])?;
                    g.cross_entropy(p, target)
                }),
            )
        }
        other => {
            return Err(Error::Usage(format!("unknown primitive `{other}`")));
        }
    };
    check_graph_fn(&inputs, build, h, fault)
}

/// Conversion block (SE on or off) w.r.t. its parameters and the patch.
pub fn check_conversion(seed: u64, se_enabled: bool, h: f64, fault: Option<Fault>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (slices, size) = (5, 5);
    let p = ConversionParams::<f64>::init(slices, 2, 2, se_enabled, &mut rng);
    let mut inputs: Vec<Tensor<f64>> = p.tensors().into_iter().cloned().collect();
    inputs.push(randn(&[slices, size, size], &mut rng));
    check_graph_fn(
        &inputs,
        |g, v| {
            let vars = p.bind_vars([v[0], v[1], v[2], v[3]]);
            vars.convert(g, v[4])
        },
        h,
        fault,
    )
}

/// End-to-end training-mode loss of the shrunken model w.r.t. every
/// parameter, with the dropout mask pinned by a fixed seed.
pub fn check_model(seed: u64, h: f64, fault: Option<Fault>) -> Result<f64> {
    let config = ModelConfig::shrunken();
    let mut params = ModelParams::<f64>::init(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1]));
    // zero biases over dead inputs put pre-activations exactly on the ReLU kink
    for t in params.tensors_mut().into_iter().filter(|t| t.shape().len() == 1) {
        let noise = randn(t.shape(), &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(b, n)| *b += 0.1 * n);
    }
    let patches: Vec<Tensor<f64>> = (0..4)
        .map(|_| randn(&[config.slices, config.patch_size, config.patch_size], &mut rng))
        .collect();
    let target = rng.random_range(0..config.classes);
    let dropout_seed = mix_seed(&[seed, 2]);

    let eval = |p: &ModelParams<f64>, grads: bool| -> Result<(f64, Vec<Vec<f64>>, Vec<u32>)> {
        let mut g = Graph::new();
        if let Some(f) = fault {
            g.inject_fault(f);
        }
        let vars = p.bind(&mut g);
        let inputs: Vec<Var> = patches.iter().map(|t| g.leaf(t)).collect();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let out = forward_graph(&mut g, &vars, &p.config, &inputs, true, &mut drop_rng)?;
        let loss = g.cross_entropy(out.probs, target)?;
        let value = g.value(loss)[0];
        let pattern = g.switch_pattern();
        if !grads {
            return Ok((value, Vec::new(), pattern));
        }
        let gr = g.backward(loss)?;
        let all = vars.all();
        let per = all
            .iter()
            .zip(p.tensors())
            .map(|(&v, t)| gr.get_or_zeros(v, t.len()))
            .collect();
        Ok((value, per, pattern))
    };

    let (_, analytic, base) = eval(&params, true)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let (mut total, mut straddled) = (0usize, 0usize);
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let x = params.tensors()[ti].data()[i];
            total += 1;
            // a central difference across a ReLU or pooling switch measures the
            // kink, not the gradient; shrink the step until both sides match
            let mut compared = false;
            for step in [h, h / 10.0, h / 100.0] {
                probe.tensors_mut()[ti].data_mut()[i] = x + step;
                let (up, _, up_pattern) = eval(&probe, false)?;
                probe.tensors_mut()[ti].data_mut()[i] = x - step;
                let (down, _, down_pattern) = eval(&probe, false)?;
                probe.tensors_mut()[ti].data_mut()[i] = x;
                if up_pattern == base && down_pattern == base {
                    worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * step)));
                    compared = true;
                    break;
                }
            }
            straddled += usize::from(!compared);
        }
    }
    if straddled * 100 > total {
        log::warn!("model check seed {seed}: {straddled} of {total} coordinates straddle a kink");
        return Err(Error::Numeric("model check: too many coordinates on a non-differentiable point"));
    }
    Ok(worst)
}

/// Runs every check for `config.seeds` seeds.
pub fn run_gradcheck(config: &VerifyConfig) -> Result<VerifyReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    let mut record = |name: &str, seed: u64, err: f64| {
        checks.push(CheckResult {
            name: name.to_string(),
            seed,
            max_rel_error: err,
            passed: err < config.threshold,
        });
    };
    for s in 0..config.seeds as u64 {
        for name in PRIMITIVES {
            let err = check_primitive(name, mix_seed(&[s, name.len() as u64]), config.step, config.fault)?;
            record(name, s, err);
        }
        for (name, se) in [("conversion_se", true), ("conversion_no_se", false)] {
            record(name, s, check_conversion(s, se, config.step, config.fault)?);
        }
        if config.include_model {
            record("model_shrunken", s, check_model(s, config.step, config.fault)?);
        }
    }
    Ok(VerifyReport {
        threshold: config.threshold,
        checks,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_single_seed() {
        for name in PRIMITIVES {
            let err = check_primitive(name, 7, DEFAULT_STEP, None).unwrap();
            assert!(err < DEFAULT_THRESHOLD, "{name}: {err}");
        }
    }

    #[test]
    fn conversion_and_model_pass() {
        assert!(check_conversion(3, true, DEFAULT_STEP, None).unwrap() < DEFAULT_THRESHOLD);
        assert!(check_conversion(3, false, DEFAULT_STEP, None).unwrap() < DEFAULT_THRESHOLD);
        assert!(check_model(3, DEFAULT_STEP, None).unwrap() < DEFAULT_THRESHOLD);
    }

    #[test]
    fn flipped_kernel_gradient_is_caught() {
        let err = check_primitive("conv2d_same", 1, DEFAULT_STEP, Some(Fault::FlipConvKernelGrad)).unwrap();
        assert!(err > 0.5, "{err}");
    }

    #[test]
    fn unknown_primitive() {
        assert!(check_primitive("nope", 0, DEFAULT_STEP, None).is_err());
    }
}
