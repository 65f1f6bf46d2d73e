//! Overlap and surface-distance scores over the composite tumour regions.
//!
//! Regions: WT = classes {1,2,3}, TC = {2,3}, ET = {3}. Undefined ratios
//! (0/0) are `None` and serialise as JSON `null`.
//!
//! HD95 uses boundary voxels (mask voxels with a face neighbour outside the
//! mask or the volume), spacing-scaled Euclidean distances to the nearest
//! boundary voxel of the other mask, the nearest-rank 95th percentile of
//! each directed distance list, and the larger of the two directions.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Grid, LabelVolume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    ET,
    WT,
    TC,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::ET, Region::WT, Region::TC];

    pub fn contains_class(self, class: u8) -> bool {
        match self {
            Region::WT => (1..=3).contains(&class),
            Region::TC => class == 2 || class == 3,
            Region::ET => class == 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub mask: Grid<bool>,
    pub kind: Region,
    pub spacing_mm: [f64; 3],
}

impl RegionMask {
    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&b| b).count()
    }
}

pub fn region_mask(labels: &LabelVolume, kind: Region) -> RegionMask {
    RegionMask {
        mask: labels.labels.map(|&c| kind.contains_class(c)),
        kind,
        spacing_mm: labels.spacing_mm,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den != 0).then(|| num as f64 / den as f64)
}

impl Confusion {
    /// `2TP / (FP + 2TP + FN)`
    pub fn dsc(&self) -> Option<f64> {
        ratio(2 * self.tp, self.fp + 2 * self.tp + self.fn_)
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn ppv(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn same_geometry(a: &RegionMask, b: &RegionMask) -> Result<()> {
    if a.mask.dims() != b.mask.dims() {
        return Err(Error::Dimension(format!(
            "mask dims {:?} vs {:?}",
            a.mask.dims(),
            b.mask.dims()
        )));
    }
    if a.spacing_mm != b.spacing_mm {
        return Err(Error::Dimension(format!(
            "mask spacing {:?} vs {:?}",
            a.spacing_mm, b.spacing_mm
        )));
    }
    Ok(())
}

pub fn confusion(pred: &RegionMask, truth: &RegionMask) -> Result<Confusion> {
    if pred.mask.dims() != truth.mask.dims() {
        return Err(Error::Dimension(format!(
            "mask dims {:?} vs {:?}",
            pred.mask.dims(),
            truth.mask.dims()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &t) in pred.mask.data().iter().zip(truth.mask.data()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Mask voxels with at least one face neighbour outside the mask or the grid.
pub fn boundary(mask: &Grid<bool>) -> Grid<bool> {
    let [d, h, w] = mask.dims();
    let mut out = Grid::filled(mask.dims(), false);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let o = (z * h + y) * w + x;
                if !mask.data()[o] {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let edge = [
                    (zi - 1, yi, xi),
                    (zi + 1, yi, xi),
                    (zi, yi - 1, xi),
                    (zi, yi + 1, xi),
                    (zi, yi, xi - 1),
                    (zi, yi, xi + 1),
                ]
                .iter()
                .any(|&(a, b, c)| mask.get_signed(a, b, c) != Some(true));
                out.data_mut()[o] = edge;
            }
        }
    }
    out
}

/// Lower-envelope squared distance transform of one line (Felzenszwalb &
/// Huttenlocher) with sample spacing `step`. Infinite entries are not seeds.
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * step;
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
            z.push(f64::INFINITY);
            continue;
        }
        loop {
            let r = *v.last().expect("non-empty envelope");
            let s = ((fq + pos(q).powi(2)) - (f[r] + pos(r).powi(2))) / (2.0 * (pos(q) - pos(r)));
            let k = v.len() - 1;
            if s <= z[k] {
                v.pop();
                z.pop();
                continue;
            }
            z[k + 1] = s;
            v.push(q);
            z.push(f64::INFINITY);
            break;
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let x = pos(p);
        while z[k + 1] < x {
            k += 1;
        }
        *o = (x - pos(v[k])).powi(2) + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// `true` voxel of `seeds`; infinite when there are no seeds.
pub fn squared_distance_transform(seeds: &Grid<bool>, spacing_mm: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = seeds.dims();
    let mut dist: Vec<f64> = seeds
        .data()
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let longest = d.max(h).max(w);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    // axis 2 (x), then 1 (y), then 0 (z)
    for (axis, n, stride) in [(2usize, w, 1usize), (1, h, w), (0, d, h * w)] {
        let step = spacing_mm[axis];
        let starts: Vec<usize> = (0..d * h * w)
            .filter(|&o| {
                let idx = [o / (h * w), (o / w) % h, o % w];
                idx[axis] == 0
            })
            .collect();
        for s in starts {
            for i in 0..n {
                line[i] = dist[s + i * stride];
            }
            edt_line(&line[..n], step, &mut out[..n], &mut v, &mut z);
            for i in 0..n {
                dist[s + i * stride] = out[i];
            }
        }
    }
    dist
}

/// Nearest-rank percentile (`pct` in (0, 100]) of an unsorted list.
pub fn nearest_rank(values: &mut [f64], pct: usize) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let rank = (pct * values.len()).div_ceil(100).max(1);
    Some(values[rank - 1])
}

fn directed_distances(from: &Grid<bool>, to: &Grid<bool>, spacing_mm: [f64; 3]) -> Vec<f64> {
    let dt = squared_distance_transform(to, spacing_mm);
    from.data()
        .iter()
        .zip(&dt)
        .filter(|(&b, _)| b)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

fn surface_distance(pred: &RegionMask, truth: &RegionMask, pct: usize) -> Result<Option<f64>> {
    same_geometry(pred, truth)?;
    let bp = boundary(&pred.mask);
    let bt = boundary(&truth.mask);
    let (np, nt) = (
        bp.data().iter().any(|&b| b),
        bt.data().iter().any(|&b| b),
    );
    match (np, nt) {
        (false, false) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let mut ab = directed_distances(&bp, &bt, pred.spacing_mm);
    let mut ba = directed_distances(&bt, &bp, pred.spacing_mm);
    let a = nearest_rank(&mut ab, pct).expect("non-empty boundary");
    let b = nearest_rank(&mut ba, pct).expect("non-empty boundary");
    Ok(Some(a.max(b)))
}

/// 95th-percentile symmetric Hausdorff distance in mm; `None` when exactly
/// one mask is empty, `0` when both are.
pub fn hd95(pred: &RegionMask, truth: &RegionMask) -> Result<Option<f64>> {
    surface_distance(pred, truth, 95)
}

/// Maximum (100th percentile) boundary Hausdorff distance.
pub fn hausdorff(pred: &RegionMask, truth: &RegionMask) -> Result<Option<f64>> {
    surface_distance(pred, truth, 100)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub dsc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub ppv: Option<f64>,
    pub specificity: Option<f64>,
    pub hd95_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subject: String,
    #[serde(flatten)]
    pub regions: BTreeMap<Region, RegionMetrics>,
    pub voxels: usize,
    pub predicted_voxels: BTreeMap<Region, usize>,
    pub truth_voxels: BTreeMap<Region, usize>,
    pub runtime_s: f64,
}

pub fn region_metrics(pred: &RegionMask, truth: &RegionMask) -> Result<RegionMetrics> {
    let c = confusion(pred, truth)?;
    Ok(RegionMetrics {
        dsc: c.dsc(),
        sensitivity: c.sensitivity(),
        ppv: c.ppv(),
        specificity: c.specificity(),
        hd95_mm: hd95(pred, truth)?,
    })
}

pub fn evaluate(pred: &LabelVolume, truth: &LabelVolume, spacing_mm: [f64; 3]) -> Result<MetricsReport> {
    if pred.dims() != truth.dims() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs truth {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let start = Instant::now();
    let mut regions = BTreeMap::new();
    let mut predicted_voxels = BTreeMap::new();
    let mut truth_voxels = BTreeMap::new();
    for kind in Region::ALL {
        let mut p = region_mask(pred, kind);
        let mut t = region_mask(truth, kind);
        p.spacing_mm = spacing_mm;
        t.spacing_mm = spacing_mm;
        predicted_voxels.insert(kind, p.count());
        truth_voxels.insert(kind, t.count());
        regions.insert(kind, region_metrics(&p, &t)?);
    }
    Ok(MetricsReport {
        subject: String::new(),
        regions,
        voxels: truth.labels.len(),
        predicted_voxels,
        truth_voxels,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// Mean, population standard deviation, median and quartiles of the defined
/// values (linear interpolation between order statistics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub median: Option<f64>,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(values: impl IntoIterator<Item = Option<f64>>) -> Summary {
    let mut v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return Summary {
            n: 0,
            mean: None,
            std: None,
            median: None,
            q25: None,
            q75: None,
        };
    }
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Summary {
        n: v.len(),
        mean: Some(mean),
        std: Some(var.sqrt()),
        median: Some(quantile(&v, 0.5)),
        q25: Some(quantile(&v, 0.25)),
        q75: Some(quantile(&v, 0.75)),
    }
}

pub type Aggregate = BTreeMap<Region, BTreeMap<String, Summary>>;

/// Per-region, per-metric summaries across subjects.
pub fn aggregate(reports: &[MetricsReport]) -> Aggregate {
    let mut out = BTreeMap::new();
    for kind in Region::ALL {
        let rows: Vec<&RegionMetrics> = reports.iter().filter_map(|r| r.regions.get(&kind)).collect();
        let mut per = BTreeMap::new();
        let fields: [(&str, fn(&RegionMetrics) -> Option<f64>); 5] = [
            ("dsc", |m| m.dsc),
            ("sensitivity", |m| m.sensitivity),
            ("ppv", |m| m.ppv),
            ("specificity", |m| m.specificity),
            ("hd95_mm", |m| m.hd95_mm),
        ];
        for (name, get) in fields {
            per.insert(name.to_string(), summarize(rows.iter().map(|m| get(m))));
        }
        out.insert(kind, per);
    }
    out
}
