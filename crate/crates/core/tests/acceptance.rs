//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Tolerances are fixed; do not relax them.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{adadelta_reference, count_oracle, excite_oracle, hd95_bruteforce, random_blob_mask, squeeze_oracle};
use patchconv::autodiff::Fault;
use patchconv::checkpoint::encode;
use patchconv::classifier::{logits, ModelConfig, ModelParams};
use patchconv::conversion::{calibrate, excite, hidden_width, squeeze, ConversionParams};
use patchconv::data::{generate_phantom, sample_subjects, sample_training_set, Grid, PhantomSpec, SamplingPlan, Voxel};
use patchconv::inference::{compute_bbox, segment_volume, BboxMode, DEFAULT_MARGIN, DEFAULT_THRESHOLD_K};
use patchconv::metrics::{confusion, evaluate, hd95, Confusion, Region, RegionMask};
use patchconv::optimizer::{AdadeltaConfig, AdadeltaState};
use patchconv::parallel::Workers;
use patchconv::train::{train, EpochLog, TrainConfig};
use patchconv::verify::{check_primitive, run_gradcheck, VerifyConfig, DEFAULT_STEP};
use patchconv::{LabelVolume, Patch3D, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_TIME_LIMIT_S: f64 = 60.0;
const SE_TOL: f64 = 1e-7;
const ADADELTA_TOL: f64 = 1e-12;
const ADADELTA_FIRST_STEP: f64 = -4.472091234e-3;
const HD95_TOL: f64 = 1e-9;
const SHRUNKEN_STEPS: u64 = 300;
const FULL_ACCURACY: f64 = 0.98;
const FULL_EPOCHS: usize = 50;
const FULL_TIME_LIMIT_S: f64 = 600.0;
const WT_MIN: f64 = 0.85;
const TC_MIN: f64 = 0.70;
const ET_MIN: f64 = 0.60;

struct Line {
    id: &'static str,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn emit(lines: &mut Vec<Line>, id: &'static str, title: &'static str, passed: bool, detail: String) {
    println!("{} [{id}] {title}: {detail}", if passed { "PASS" } else { "FAIL" });
    lines.push(Line {
        id,
        title,
        passed,
        detail,
    });
}

fn gradient_correctness(lines: &mut Vec<Line>) {
    let report = run_gradcheck(&VerifyConfig::default()).expect("gradcheck runs");
    let worst = report.worst();
    let mutant = check_primitive("conv2d_same", 0, DEFAULT_STEP, Some(Fault::FlipConvKernelGrad)).unwrap();
    let ok = report.passed() && worst < GRAD_REL_TOL && report.runtime_s < GRAD_TIME_LIMIT_S && mutant > GRAD_REL_TOL;
    emit(
        lines,
        "1",
        "gradient correctness",
        ok,
        format!(
            "{} checks, worst rel err {worst:.2e} (< {GRAD_REL_TOL:e}), runtime {:.1} s (< {GRAD_TIME_LIMIT_S} s), \
             sign-flipped conv grad caught with rel err {mutant:.2}",
            report.checks.len(),
            report.runtime_s
        ),
    );
}

fn squeeze_excite_fidelity(lines: &mut Vec<Line>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_z, mut worst_u) = (0.0f64, 0.0f64);
    let (mut gates_ok, mut draws) = (true, 0);
    for i in 0..1000 {
        let (slices, size) = ([3, 5, 7, 9][i % 4], [5, 9, 17, 33][i % 4]);
        let p = ConversionParams::<f64>::init(slices, 2, 1, true, &mut rng);
        let x = Tensor::<f64>::randn(&[slices, size, size], 2.0, &mut rng);
        let z = squeeze(&x).unwrap();
        let zo = squeeze_oracle(x.data(), slices, size);
        let u = excite(&z, &p).unwrap();
        let uo = excite_oracle(&zo, p.w1.data(), p.w2.data(), hidden_width(slices, 2));
        for (a, b) in z.data().iter().zip(&zo) {
            worst_z = worst_z.max((a - b).abs());
        }
        for (a, b) in u.data().iter().zip(&uo) {
            worst_u = worst_u.max((a - b).abs());
        }
        let gates = calibrate(&x, &p).unwrap().u;
        gates_ok &= gates.data().iter().all(|&g| g > 0.0 && g < 1.0);
        draws += 1;
    }
    emit(
        lines,
        "2",
        "squeeze/excite fidelity",
        worst_z < SE_TOL && worst_u < SE_TOL && gates_ok,
        format!(
            "squeeze max err {worst_z:.1e}, excite max err {worst_u:.1e} (< {SE_TOL:e}); gates in (0,1) on {draws} draws: {gates_ok}"
        ),
    );
}

fn adadelta_fidelity(lines: &mut Vec<Line>) {
    let cfg = AdadeltaConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let grads: Vec<f64> = (0..100).map(|_| rng.random_range(-3.0..3.0)).collect();
    let reference = adadelta_reference(-0.4, &grads, cfg.learning_rate, cfg.rho, cfg.epsilon);
    let mut x = Tensor::<f64>::new(&[1], vec![-0.4]).unwrap();
    let mut st = AdadeltaState::<f64>::new(cfg, &[1]);
    let mut worst = 0.0f64;
    for (g, r) in grads.iter().zip(&reference) {
        st.step(&mut [&mut x], &[vec![*g]]).unwrap();
        worst = worst.max((x.data()[0] - r).abs());
    }
    let mut y = Tensor::<f64>::new(&[1], vec![0.0]).unwrap();
    let mut fresh = AdadeltaState::<f64>::new(cfg, &[1]);
    fresh.step(&mut [&mut y], &[vec![1.0]]).unwrap();
    let first = y.data()[0];
    emit(
        lines,
        "3",
        "ADADELTA fidelity",
        worst < ADADELTA_TOL && (first - ADADELTA_FIRST_STEP).abs() < ADADELTA_TOL,
        format!("100-step max deviation {worst:.1e} (< {ADADELTA_TOL:e}); first step {first:.12e} (expected {ADADELTA_FIRST_STEP:e})"),
    );
}

fn mask(d: [usize; 3], m: Vec<bool>, spacing: [f64; 3]) -> RegionMask {
    RegionMask {
        mask: Grid::new(d, m).unwrap(),
        kind: Region::WT,
        spacing_mm: spacing,
    }
}

fn metric_fidelity(lines: &mut Vec<Line>) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d8 = [8, 8, 8];
    let mut exact = 0;
    for _ in 0..100 {
        let density = rng.random_range(0.05..0.6);
        let p: Vec<bool> = (0..512).map(|_| rng.random_bool(density)).collect();
        let t: Vec<bool> = (0..512).map(|_| rng.random_bool(density)).collect();
        let o = count_oracle(&p, &t);
        let c = confusion(&mask(d8, p, [1.0; 3]), &mask(d8, t, [1.0; 3])).unwrap();
        let same = (c.tp, c.fp, c.fn_, c.tn) == (o.tp, o.fp, o.fn_, o.tn)
            && c.dsc() == Some(2.0 * o.tp as f64 / (o.fp + 2 * o.tp + o.fn_) as f64)
            && c.sensitivity() == Some(o.tp as f64 / (o.tp + o.fn_) as f64)
            && c.ppv() == Some(o.tp as f64 / (o.tp + o.fp) as f64)
            && c.specificity() == Some(o.tn as f64 / (o.tn + o.fp) as f64);
        exact += usize::from(same);
    }

    let d12 = [12, 12, 12];
    let (mut pairs, mut worst, mut agree) = (0, 0.0f64, true);
    while pairs < 20 {
        let spacing = if pairs % 2 == 0 { [1.0; 3] } else { [1.5, 0.8, 1.2] };
        let a = random_blob_mask(d12, &mut rng);
        let b = random_blob_mask(d12, &mut rng);
        if !a.iter().any(|&v| v) || !b.iter().any(|&v| v) {
            continue;
        }
        let want = hd95_bruteforce(&a, &b, d12, spacing).unwrap();
        match hd95(&mask(d12, a, spacing), &mask(d12, b, spacing)).unwrap() {
            Some(got) => worst = worst.max((got - want).abs()),
            None => agree = false,
        }
        pairs += 1;
    }
    let blob = random_blob_mask(d12, &mut rng);
    let self_zero = hd95(&mask(d12, blob.clone(), [1.0; 3]), &mask(d12, blob, [1.0; 3])).unwrap() == Some(0.0);
    let formula = Confusion {
        tp: 2,
        fp: 1,
        fn_: 1,
        tn: 0,
    }
    .dsc()
        == Some(2.0 / 3.0);
    emit(
        lines,
        "4",
        "metric fidelity",
        exact == 100 && agree && worst < HD95_TOL && self_zero && formula,
        format!(
            "{exact}/100 8^3 pairs exact; HD95 max err {worst:.1e} on {pairs} 12^3 pairs (< {HD95_TOL:e}); \
             hd95(a,a)=0: {self_zero}; TP=2,FP=1,FN=1 gives 2/3: {formula}"
        ),
    );
}

fn random_patches(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Patch3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Patch3D {
            modalities: std::array::from_fn(|_| Tensor::randn(&[cfg.slices, cfg.patch_size, cfg.patch_size], 1.0, &mut rng)),
            center: Voxel::new(0, 0, 0),
            label: Some(rng.random_range(0..cfg.classes) as u8),
            augmentation: None,
        })
        .collect()
}

fn overfit(lines: &mut Vec<Line>) {
    // memorisation run: 64 random patch/label pairs, full batch, no dropout
    let cfg = ModelConfig {
        dropout_p: 0.0,
        ..ModelConfig::shrunken()
    };
    let set = random_patches(&cfg, 64, 64);
    let mut params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let mut st = AdadeltaState::for_tensors(AdadeltaConfig::default(), &params.tensors());
    let tc = TrainConfig {
        batch_size: 64,
        epochs: SHRUNKEN_STEPS as usize,
        seed: 0,
        stop_at_accuracy: Some(1.0),
        ..TrainConfig::default()
    };
    let logs = train(&mut params, &mut st, &set, &tc, &Workers::sequential(), |_| {}).unwrap();
    let last = logs.last().unwrap();
    emit(
        lines,
        "5a",
        "shrunken overfit",
        last.accuracy == 1.0 && last.steps <= SHRUNKEN_STEPS,
        format!(
            "training accuracy {:.4} after {} steps (need 1.0 within {SHRUNKEN_STEPS})",
            last.accuracy, last.steps
        ),
    );

    let cfg = ModelConfig::default();
    let (vol, labels) = generate_phantom([40, 40, 40], 11, &PhantomSpec::default()).unwrap();
    let set = sample_training_set(&vol.normalized(), &labels, &SamplingPlan::balanced(125, 4, 3), cfg.patch_size, cfg.slices)
        .unwrap();
    let mut params = ModelParams::<f32>::init(&cfg, 5).unwrap();
    let mut st = AdadeltaState::for_tensors(AdadeltaConfig::default(), &params.tensors());
    let tc = TrainConfig {
        batch_size: 32,
        epochs: FULL_EPOCHS,
        seed: 1,
        stop_at_accuracy: Some(FULL_ACCURACY),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let logs = train(&mut params, &mut st, &set, &tc, &Workers::new(0), |_| {}).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let best = logs.iter().map(|l| l.accuracy).fold(0.0, f64::max);
    emit(
        lines,
        "5b",
        "full-size overfit",
        set.len() == 500 && best >= FULL_ACCURACY && logs.len() <= FULL_EPOCHS && secs < FULL_TIME_LIMIT_S,
        format!(
            "{} patches, accuracy {best:.3} after {} epochs (need >= {FULL_ACCURACY} within {FULL_EPOCHS}), {secs:.0} s (< {FULL_TIME_LIMIT_S} s)",
            set.len(),
            logs.len()
        ),
    );
}

fn end_to_end(lines: &mut Vec<Line>) -> (ModelParams<f32>, patchconv::MultimodalVolume) {
    let spec = PhantomSpec::default();
    let subjects: Vec<_> = [1, 2]
        .iter()
        .map(|&s| {
            let (v, l) = generate_phantom([40, 40, 40], s, &spec).unwrap();
            (v.normalized(), l)
        })
        .collect();
    let cfg = ModelConfig::default();
    let set = sample_subjects(&subjects, &SamplingPlan::balanced(150, 4, 3), cfg.patch_size, cfg.slices).unwrap();
    let mut params = ModelParams::<f32>::init(&cfg, 5).unwrap();
    let mut st = AdadeltaState::for_tensors(AdadeltaConfig::default(), &params.tensors());
    let tc = TrainConfig {
        batch_size: 32,
        epochs: 20,
        seed: 1,
        stop_at_accuracy: Some(0.99),
        ..TrainConfig::default()
    };
    let workers = Workers::new(0);
    train(&mut params, &mut st, &set, &tc, &workers, |_| {}).unwrap();

    let (vol, truth) = generate_phantom([40, 40, 40], 3, &spec).unwrap();
    let vol = vol.normalized();
    let bbox = compute_bbox(&vol, &BboxMode::FlairThreshold { k: DEFAULT_THRESHOLD_K }, DEFAULT_MARGIN).unwrap();
    let (pred, _) = segment_volume(&vol, &params, &bbox, &workers).unwrap();
    let report = evaluate(&pred, &truth, truth.spacing_mm).unwrap();
    let r = |k: Region| &report.regions[&k];
    let dsc = |k: Region| r(k).dsc.unwrap_or(0.0);
    let hd_defined = Region::ALL.iter().all(|&k| r(k).hd95_mm.is_some());
    let fmt_hd = |k: Region| r(k).hd95_mm.map_or("undefined".to_string(), |h| format!("{h:.2}"));
    emit(
        lines,
        "6",
        "end-to-end phantom",
        dsc(Region::WT) >= WT_MIN && dsc(Region::TC) >= TC_MIN && dsc(Region::ET) >= ET_MIN && hd_defined,
        format!(
            "DSC WT {:.3} (>= {WT_MIN}), TC {:.3} (>= {TC_MIN}), ET {:.3} (>= {ET_MIN}); HD95 mm WT {} TC {} ET {}",
            dsc(Region::WT),
            dsc(Region::TC),
            dsc(Region::ET),
            fmt_hd(Region::WT),
            fmt_hd(Region::TC),
            fmt_hd(Region::ET)
        ),
    );
    (params, vol)
}

fn inference_invariants(lines: &mut Vec<Line>, params: &ModelParams<f32>, vol: &patchconv::MultimodalVolume) {
    let bbox = compute_bbox(vol, &BboxMode::FlairThreshold { k: DEFAULT_THRESHOLD_K }, DEFAULT_MARGIN).unwrap();
    let (one, s1) = segment_volume(vol, params, &bbox, &Workers::new(1)).unwrap();
    let (four, s4) = segment_volume(vol, params, &bbox, &Workers::new(4)).unwrap();
    let expected_calls = bbox.voxels().filter(|&v| !vol.is_background(vol.scans[0].offset(v))).count();
    let identical = one == four && s1 == s4;

    let mut off = params.clone();
    off.set_se_enabled(false);
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let cfg = &params.config;
    let x: Vec<Tensor<f32>> = (0..4)
        .map(|_| Tensor::randn(&[cfg.slices, cfg.patch_size, cfg.patch_size], 1.0, &mut rng))
        .collect();
    let a = logits(params, &x).unwrap();
    let b = logits(&off, &x).unwrap();
    let differing = a.data().iter().zip(b.data()).filter(|(p, q)| p != q).count();
    let (off_labels, _) = segment_volume(vol, &off, &bbox, &Workers::new(1)).unwrap();
    let shapes = a.shape() == b.shape() && off_labels.dims() == one.dims();
    let zero: LabelVolume = {
        let blank = patchconv::MultimodalVolume::new(
            std::array::from_fn(|_| Grid::filled([8, 8, 8], 0.0)),
            [1.0; 3],
            "blank",
        )
        .unwrap();
        let (l, s) = segment_volume(&blank, params, &compute_bbox(&blank, &BboxMode::Full, 0).unwrap(), &Workers::new(1)).unwrap();
        assert_eq!(s.network_calls, 0);
        l
    };
    let zero_ok = zero.labels.data().iter().all(|&c| c == 0);
    emit(
        lines,
        "7",
        "inference invariants",
        s1.network_calls == expected_calls && identical && differing >= 1 && shapes && zero_ok,
        format!(
            "network calls {} == nonzero voxels in box {expected_calls}; 1 vs 4 workers identical: {identical}; \
             SE bypass changes {differing}/{} logits, shapes preserved: {shapes}; all-zero volume gives 0 calls",
            s1.network_calls,
            a.len()
        ),
    );
}

fn train_run(cfg: &ModelConfig, set: &[Patch3D], workers: usize) -> (Vec<u8>, String) {
    let mut params = ModelParams::<f32>::init(cfg, 9).unwrap();
    let mut st = AdadeltaState::for_tensors(AdadeltaConfig::default(), &params.tensors());
    let tc = TrainConfig {
        batch_size: 16,
        epochs: 4,
        seed: 2,
        ..TrainConfig::default()
    };
    let logs: Vec<EpochLog> = train(&mut params, &mut st, set, &tc, &Workers::new(workers), |_| {}).unwrap();
    let jsonl: String = logs.iter().map(|l| serde_json::to_string(l).unwrap() + "\n").collect();
    (encode(&params, Some(&st)), jsonl)
}

fn reproducibility(lines: &mut Vec<Line>) {
    let cfg = ModelConfig::shrunken();
    let (vol, labels) = generate_phantom([32, 32, 32], 8, &PhantomSpec::default()).unwrap();
    let set = sample_training_set(&vol.normalized(), &labels, &SamplingPlan::balanced(12, 4, 6), cfg.patch_size, cfg.slices)
        .unwrap();
    let a = train_run(&cfg, &set, 1);
    let b = train_run(&cfg, &set, 1);
    let c = train_run(&cfg, &set, 3);
    emit(
        lines,
        "8",
        "reproducibility",
        a == b && a == c,
        format!(
            "checkpoint {} bytes and {}-line log identical across reruns: {}; across worker counts: {}",
            a.0.len(),
            a.1.lines().count(),
            a == b,
            a == c
        ),
    );
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut lines = Vec::new();
    gradient_correctness(&mut lines);
    squeeze_excite_fidelity(&mut lines);
    adadelta_fidelity(&mut lines);
    metric_fidelity(&mut lines);
    overfit(&mut lines);
    let (params, vol) = end_to_end(&mut lines);
    inference_invariants(&mut lines, &params, &vol);
    reproducibility(&mut lines);
    let failed: Vec<&Line> = lines.iter().filter(|l| !l.passed).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0} s",
        lines.len() - failed.len(),
        lines.len(),
        start.elapsed().as_secs_f64()
    );
    for l in &failed {
        println!("  failed [{}] {}: {}", l.id, l.title, l.detail);
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
