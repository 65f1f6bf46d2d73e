use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use patchconv::autodiff::Fault;
use patchconv::checkpoint::{load_checkpoint, save_checkpoint};
use patchconv::data::{
    generate_phantom, labels_header, load_labels, load_volume, sample_subjects, save_labels, save_subject,
    PhantomSpec, SamplingPlan,
};
use patchconv::inference::{compute_bbox, export_overlay, segment_volume, BboxMode};
use patchconv::metrics::{aggregate, evaluate, Aggregate, MetricsReport, Region};
use patchconv::parallel::Workers;
use patchconv::train::{mix_seed, train};
use patchconv::verify::{run_gradcheck, VerifyConfig};
use patchconv::{AdadeltaState, Error, ModelParams, Result};
use serde::Serialize;

use crate::config::{BboxChoice, Command};

pub const CONFIG_ECHO: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const PREDICTION_FILE: &str = "prediction.mvol.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

/// `Ok(false)` means the command ran but a verification failed.
pub fn run(command: Command) -> Result<bool> {
    match command {
        Command::Phantom(a) => phantom(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Predict(a) => predict(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    write_file(path, text + "\n")
}

fn require_existing(what: &str, path: Option<&PathBuf>) -> Result<PathBuf> {
    match path {
        None => Err(Error::Usage(format!("missing --{what}"))),
        Some(p) if !p.exists() => Err(Error::Usage(format!("{what} `{}` does not exist", p.display()))),
        Some(p) => Ok(p.clone()),
    }
}

fn phantom(args: &crate::config::PhantomArgs) -> Result<bool> {
    let (run, out) = args.resolve()?;
    let spec = PhantomSpec {
        noise_std: run.noise_std,
        ..PhantomSpec::default()
    };
    let (mut vol, labels) = generate_phantom(run.dims, run.seed, &spec)?;
    vol.subject_id = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    save_subject(&out, &vol, &labels)?;
    write_json(&out.join(CONFIG_ECHO), &run)?;
    println!(
        "phantom out={} dims={:?} seed={} histogram={:?}",
        out.display(),
        run.dims,
        run.seed,
        labels.histogram()
    );
    Ok(true)
}

fn train_cmd(args: &crate::config::TrainArgs) -> Result<bool> {
    let (run, out) = args.resolve()?;
    run.model.validate()?;
    if run.subjects.is_empty() {
        return Err(Error::Usage("no training subjects given (--subject)".into()));
    }
    let mut subjects = Vec::new();
    for dir in &run.subjects {
        let dir = require_existing("subject", Some(dir))?;
        let vol = load_volume(&dir)?.normalized();
        let labels = load_labels(&labels_header(&dir))?;
        subjects.push((vol, labels));
    }
    let plan = SamplingPlan::balanced(run.patches_per_class, run.model.classes, mix_seed(&[run.train.seed, 1]));
    let patches = sample_subjects(&subjects, &plan, run.model.patch_size, run.model.slices)?;
    if patches.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let mut params = ModelParams::<f32>::init(&run.model, run.train.seed)?;
    let mut state = AdadeltaState::for_tensors(run.train.optimizer, &params.tensors());
    create_dir(&out)?;
    write_json(&out.join(CONFIG_ECHO), &run)?;

    let workers = Workers::new(run.workers);
    let start = Instant::now();
    let mut log = String::new();
    println!(
        "train patches={} params={} seed={} workers={}",
        patches.len(),
        params.param_count(),
        run.train.seed,
        workers.count()
    );
    train(&mut params, &mut state, &patches, &run.train, &workers, |e| {
        let line = serde_json::to_string(e).expect("serialisable");
        println!("epoch {line} elapsed_s={:.1}", start.elapsed().as_secs_f64());
        log.push_str(&line);
        log.push('\n');
    })?;
    write_file(&out.join(TRAIN_LOG), &log)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &params, Some(&state))?;
    println!(
        "train checkpoint={} steps={} wall_s={:.1}",
        out.join(CHECKPOINT_FILE).display(),
        state.steps,
        start.elapsed().as_secs_f64()
    );
    Ok(true)
}

fn parse_overlay(spec: &str) -> Result<(usize, usize)> {
    let bad = || Error::Usage(format!("overlay `{spec}` is not AXIS:INDEX"));
    let (a, i) = spec.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, i.trim().parse().map_err(|_| bad())?))
}

fn predict(args: &crate::config::PredictArgs) -> Result<bool> {
    let (run, out) = args.resolve()?;
    let ckpt = require_existing("checkpoint", run.checkpoint.as_ref())?;
    let subject = require_existing("subject", run.subject.as_ref())?;
    let overlays = run.overlays.iter().map(|s| parse_overlay(s)).collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let (params, _) = load_checkpoint(&ckpt)?;
    let vol = load_volume(&subject)?.normalized();
    let mode = match run.bbox {
        BboxChoice::Full => BboxMode::Full,
        BboxChoice::FlairThreshold => BboxMode::FlairThreshold { k: run.threshold_k },
        BboxChoice::ProvidedMask => {
            let mask = require_existing("mask", run.mask.as_ref())?;
            BboxMode::ProvidedMask(load_labels(&mask)?.labels.map(|&c| c != 0))
        }
    };
    let bbox = compute_bbox(&vol, &mode, run.margin)?;
    let workers = Workers::new(run.workers);
    let (pred, stats) = segment_volume(&vol, &params, &bbox, &workers)?;
    create_dir(&out)?;
    save_labels(&out.join(PREDICTION_FILE), &pred)?;
    write_json(&out.join(CONFIG_ECHO), &run)?;
    for (axis, index) in overlays {
        export_overlay(&vol, &pred, axis, index, &out.join(format!("overlay_axis{axis}_{index}.ppm")))?;
    }
    println!(
        "predict subject={} bbox_min={:?} bbox_max={:?} network_calls={} skipped_zero={} outside_box={} histogram={:?} wall_s={:.2}",
        subject.display(),
        bbox.min,
        bbox.max,
        stats.network_calls,
        stats.skipped_zero,
        stats.outside_box,
        pred.histogram(),
        start.elapsed().as_secs_f64()
    );
    Ok(true)
}

fn label_path(p: &Path, prefer_prediction: bool) -> PathBuf {
    if !p.is_dir() {
        return p.to_path_buf();
    }
    let pred = p.join(PREDICTION_FILE);
    if prefer_prediction && pred.exists() {
        pred
    } else {
        labels_header(p)
    }
}

#[derive(Serialize)]
struct EvaluationFile {
    subjects: Vec<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    aggregate: Option<Aggregate>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |x| format!("{x:.4}"))
}

fn evaluate_cmd(args: &crate::config::EvaluateArgs) -> Result<bool> {
    let (run, out) = args.resolve()?;
    if run.predictions.is_empty() || run.predictions.len() != run.truths.len() {
        return Err(Error::Usage(format!(
            "need matching --pred/--truth pairs, got {} and {}",
            run.predictions.len(),
            run.truths.len()
        )));
    }
    let mut reports = Vec::new();
    for (p, t) in run.predictions.iter().zip(&run.truths) {
        let p = label_path(&require_existing("pred", Some(p))?, true);
        let t = label_path(&require_existing("truth", Some(t))?, false);
        let pred = load_labels(&p)?;
        let truth = load_labels(&t)?;
        let mut report = evaluate(&pred, &truth, truth.spacing_mm)?;
        report.subject = t
            .parent()
            .and_then(|d| d.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let line: Vec<String> = Region::ALL
            .iter()
            .map(|r| {
                let m = &report.regions[r];
                format!("{r:?}_dsc={} {r:?}_hd95={}", fmt_opt(m.dsc), fmt_opt(m.hd95_mm))
            })
            .collect();
        println!("evaluate subject={} {}", report.subject, line.join(" "));
        reports.push(report);
    }
    let aggregate = (reports.len() > 1).then(|| aggregate(&reports));
    create_dir(&out)?;
    write_json(
        &out.join(METRICS_FILE),
        &EvaluationFile {
            subjects: reports,
            aggregate,
        },
    )?;
    write_json(&out.join(CONFIG_ECHO), &run)?;
    Ok(true)
}

fn gradcheck(args: &crate::config::GradcheckArgs) -> Result<bool> {
    let run = args.resolve()?;
    let config = VerifyConfig {
        seeds: run.seeds,
        step: run.step,
        threshold: run.threshold,
        include_model: true,
        fault: run.inject_fault.then_some(Fault::FlipConvKernelGrad),
    };
    let report = run_gradcheck(&config)?;
    for (name, err) in report.by_name() {
        let status = if err < report.threshold { "pass" } else { "FAIL" };
        println!("gradcheck check={name} max_rel_error={err:.3e} status={status}");
    }
    println!(
        "gradcheck checks={} worst={:.3e} threshold={:e} runtime_s={:.2} result={}",
        report.checks.len(),
        report.worst(),
        report.threshold,
        report.runtime_s,
        if report.passed() { "pass" } else { "FAIL" }
    );
    if let Some(out) = &run.out {
        create_dir(out)?;
        write_json(&out.join(GRADCHECK_FILE), &report)?;
        write_json(&out.join(CONFIG_ECHO), &run)?;
    }
    Ok(report.passed())
}
