//! Independent reference implementations used as test oracles. None of this
//! calls into the library code it checks.

#![allow(dead_code)]

use rand::Rng;

pub fn squeeze_oracle(x: &[f64], slices: usize, size: usize) -> Vec<f64> {
    let mut z = vec![0.0; slices];
    for l in 0..slices {
        let mut acc = 0.0;
        for i in 0..size {
            for j in 0..size {
                acc += x[l * size * size + i * size + j];
            }
        }
        z[l] = acc / (size * size) as f64;
    }
    z
}

/// `σ(W₂ · max(0, W₁ · z))` with row-major `w1: [h×L]`, `w2: [L×h]`.
pub fn excite_oracle(z: &[f64], w1: &[f64], w2: &[f64], hidden: usize) -> Vec<f64> {
    let l = z.len();
    let mut s = vec![0.0; hidden];
    for r in 0..hidden {
        let mut acc = 0.0;
        for c in 0..l {
            acc += w1[r * l + c] * z[c];
        }
        s[r] = if acc > 0.0 { acc } else { 0.0 };
    }
    let mut u = vec![0.0; l];
    for r in 0..l {
        let mut acc = 0.0;
        for c in 0..hidden {
            acc += w2[r * hidden + c] * s[c];
        }
        u[r] = 1.0 / (1.0 + (-acc).exp());
    }
    u
}

/// Plain ADADELTA on one scalar; returns `x` after every step.
pub fn adadelta_reference(x0: f64, grads: &[f64], lr: f64, rho: f64, eps: f64) -> Vec<f64> {
    let (mut x, mut eg2, mut edx2) = (x0, 0.0f64, 0.0f64);
    let mut out = Vec::with_capacity(grads.len());
    for &g in grads {
        eg2 = rho * eg2 + (1.0 - rho) * g * g;
        let dx = -((edx2 + eps).sqrt() / (eg2 + eps).sqrt()) * g;
        edx2 = rho * edx2 + (1.0 - rho) * dx * dx;
        x += lr * dx;
        out.push(x);
    }
    out
}

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn count_oracle(pred: &[bool], truth: &[bool]) -> Counts {
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count() as u64;
    let fp = pred.iter().zip(truth).filter(|(p, t)| **p && !**t).count() as u64;
    let fn_ = pred.iter().zip(truth).filter(|(p, t)| !**p && **t).count() as u64;
    let tn = pred.iter().zip(truth).filter(|(p, t)| !**p && !**t).count() as u64;
    Counts { tp, fp, fn_, tn }
}

fn idx(d: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * d[1] + y) * d[2] + x
}

/// Mask voxels touching a non-mask voxel or the volume edge across a face.
pub fn boundary_oracle(mask: &[bool], d: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                if !mask[idx(d, z, y, x)] {
                    continue;
                }
                let edge = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == d[0]
                    || y + 1 == d[1]
                    || x + 1 == d[2]
                    || !mask[idx(d, z - 1, y, x)]
                    || !mask[idx(d, z + 1, y, x)]
                    || !mask[idx(d, z, y - 1, x)]
                    || !mask[idx(d, z, y + 1, x)]
                    || !mask[idx(d, z, y, x - 1)]
                    || !mask[idx(d, z, y, x + 1)];
                if edge {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn percentile95(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // smallest value with at least 95% of the list at or below it
    let n = v.len();
    let mut k = 0;
    while (k + 1) * 100 < 95 * n {
        k += 1;
    }
    v[k]
}

/// All-pairs HD95 between boundary sets.
pub fn hd95_bruteforce(a: &[bool], b: &[bool], d: [usize; 3], spacing: [f64; 3]) -> Option<f64> {
    let ba = boundary_oracle(a, d);
    let bb = boundary_oracle(b, d);
    if ba.is_empty() && bb.is_empty() {
        return Some(0.0);
    }
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let dist = |p: [usize; 3], q: [usize; 3]| {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * spacing[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        let mins: Vec<f64> = from
            .iter()
            .map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .collect();
        percentile95(mins)
    };
    Some(directed(&ba, &bb).max(directed(&bb, &ba)))
}

/// Random mask: a few boxes and balls, optionally speckled.
pub fn random_blob_mask<R: Rng>(d: [usize; 3], rng: &mut R) -> Vec<bool> {
    let mut m = vec![false; d[0] * d[1] * d[2]];
    let shapes = rng.random_range(0..4);
    for _ in 0..shapes {
        let c: [f64; 3] = std::array::from_fn(|k| rng.random_range(0.0..d[k] as f64));
        let r: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..4.0));
        let ball = rng.random_bool(0.5);
        for z in 0..d[0] {
            for y in 0..d[1] {
                for x in 0..d[2] {
                    let p = [z as f64, y as f64, x as f64];
                    let inside = if ball {
                        (0..3).map(|k| ((p[k] - c[k]) / r[k]).powi(2)).sum::<f64>() <= 1.0
                    } else {
                        (0..3).all(|k| (p[k] - c[k]).abs() <= r[k])
                    };
                    if inside {
                        m[idx(d, z, y, x)] = true;
                    }
                }
            }
        }
    }
    if rng.random_bool(0.3) {
        for v in m.iter_mut() {
            if rng.random_bool(0.02) {
                *v = !*v;
            }
        }
    }
    m
}
