//! Command implementations. Every command validates the merged
//! configuration before computing, writes deterministic artifacts
//! (anything volatile goes to the `.meta.json` sidecar), and leans on
//! the library crate for all real work.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use lesiontrack::error::{Error, Result};
use lesiontrack::eval::{
    aggregate, emit_report, read_metrics_json, write_success_svg, MetricsSummary, PairOutcome,
    SuccessSeries,
};
use lesiontrack::pipeline::{track, PipelineConfig, Stage, TrackDiagnostics, TrackResult};
use lesiontrack::refine::{train_refiner, Refiner};
use lesiontrack::registration::{map_box, register};
use lesiontrack::sampling::{
    enumerate_pairs, synth_generate_case, write_manifest, LesionType, Manifest, SynthConfig,
};
use lesiontrack::tracknet::Tracker;

use crate::config::{stage_seed, RunConfig, SeedStage};
use crate::data::{build_training_pairs, load_exam_pair, Dataset, ExamPair, ImageCache};
use crate::records::{
    read_jsonl, write_jsonl, write_sidecar, ErrorRecord, OkRecord, Sidecar, TrackRecord,
};

/// Tracking method selector mirroring the benchmark's method rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Registration only: the mapped box is the prediction.
    Affine,
    /// Registration plus local tracking, no refinement.
    Tracker,
    /// The full cascade.
    Full,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Affine => "affine",
            Method::Tracker => "tracker",
            Method::Full => "full",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

// ---------------------------------------------------------------- generate

fn generate_split(cfg: &SynthConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    // Cases draw from independent seed streams, so parallel order
    // cannot change the bytes.
    let cases = (0..cfg.num_cases)
        .into_par_iter()
        .map(|i| synth_generate_case(cfg, seed, i, dir))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        spacing_mm: cfg.spacing_mm,
        cases,
    };
    write_manifest(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn split_summary(label: &str, m: &Manifest, out: &mut String) {
    for ty in [LesionType::Mass, LesionType::Calcification] {
        let sub = Manifest {
            spacing_mm: m.spacing_mm,
            cases: m.cases.iter().filter(|c| c.lesion_type == ty).cloned().collect(),
        };
        let (cases, lesions, pairs) = sub.stats();
        let name = match ty {
            LesionType::Mass => "mass",
            LesionType::Calcification => "calcification",
        };
        let _ = writeln!(out, "{label:<6} {name:<14} {cases:>6} {lesions:>6} {pairs:>6}");
    }
    let (cases, lesions, pairs) = m.stats();
    let _ = writeln!(out, "{label:<6} {:<14} {cases:>6} {lesions:>6} {pairs:>6}", "total");
}

pub fn cmd_generate(cfg: &RunConfig, seed: u64, out: &Path, force: bool, jobs: usize) -> Result<()> {
    cfg.validate()?;
    if out.exists() {
        let nonempty = std::fs::read_dir(out).map_err(io_err(out))?.next().is_some();
        if nonempty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
    }
    let start = Instant::now();
    let train = generate_split(&cfg.synth, stage_seed(seed, SeedStage::GenerateTrain), &out.join("train"))?;
    let test_cfg = SynthConfig {
        num_cases: cfg.test_cases,
        ..cfg.synth.clone()
    };
    let test = generate_split(&test_cfg, stage_seed(seed, SeedStage::GenerateTest), &out.join("test"))?;

    let mut summary = format!(
        "{:<6} {:<14} {:>6} {:>6} {:>6}\n",
        "split", "type", "cases", "views", "pairs"
    );
    split_summary("train", &train, &mut summary);
    split_summary("test", &test, &mut summary);
    print!("{summary}");
    if train.stats().2 == 0 || test.stats().2 == 0 {
        eprintln!(
            "warning: a split has zero exam pairs (views need at least two time points)"
        );
    }
    write_sidecar(
        &out.join("generate"),
        &Sidecar {
            command: "generate",
            elapsed_seconds: start.elapsed().as_secs_f64(),
            jobs,
            items: train.stats().0 + test.stats().0,
        },
    )
}

// ------------------------------------------------------------------- train

fn write_loss_trace(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(text, "{i},{l}");
    }
    write_text(path, &text)
}

pub fn cmd_train_tracker(
    cfg: &RunConfig,
    seed: u64,
    data: &Path,
    out: &Path,
    trace: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    let ds = Dataset::load(data)?;
    let pairs = build_training_pairs(&ds, cfg, stage_seed(seed, SeedStage::PairJitter))?;
    let mut tracker = Tracker::init(cfg.tracker.clone(), stage_seed(seed, SeedStage::TrackerInit))?;
    let start = Instant::now();
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = stage_seed(seed, SeedStage::TrackerTrain);
    let report = tracker.train(&pairs, &train_cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    tracker.save(out)?;
    if let Some(trace) = trace {
        write_loss_trace(trace, &report.epoch_loss)?;
    }
    println!(
        "trained tracker on {} pairs for {} epochs (skipped {}); final loss {}",
        pairs.len(),
        report.epoch_loss.len(),
        report.skipped_pairs,
        report.epoch_loss.last().map_or("n/a".into(), |l| format!("{l:.6}")),
    );
    write_sidecar(
        out,
        &Sidecar {
            command: "train-tracker",
            elapsed_seconds: start.elapsed().as_secs_f64(),
            jobs: 1,
            items: pairs.len(),
        },
    )
}

pub fn cmd_train_refiner(
    cfg: &RunConfig,
    seed: u64,
    data: &Path,
    tracker_path: &Path,
    out: &Path,
    trace: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    let ds = Dataset::load(data)?;
    let tracker = Tracker::load(tracker_path)?;
    let pairs = build_training_pairs(&ds, cfg, stage_seed(seed, SeedStage::PairJitter))?;
    let mut refiner = Refiner::init(cfg.refiner.clone(), stage_seed(seed, SeedStage::RefinerInit))?;
    let start = Instant::now();
    let mut train_cfg = cfg.refine_train.clone();
    train_cfg.seed = stage_seed(seed, SeedStage::RefinerTrain);
    let (report, candidates) = train_refiner(&mut refiner, &tracker, &pairs, &train_cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    refiner.save(out)?;
    if let Some(trace) = trace {
        write_loss_trace(trace, &report.epoch_loss)?;
    }
    println!(
        "trained refiner on {} candidates ({} positive, {} negative, {} injected, {} ignored); final BCE {}",
        candidates.len(),
        report.positives,
        report.negatives,
        report.injected,
        report.ignored,
        report.epoch_loss.last().map_or("n/a".into(), |l| format!("{l:.6}")),
    );
    write_sidecar(
        out,
        &Sidecar {
            command: "train-refiner",
            elapsed_seconds: start.elapsed().as_secs_f64(),
            jobs: 1,
            items: candidates.len(),
        },
    )
}

// ------------------------------------------------------------------- track

/// Registration-only baseline: the mapped template box is final, like
/// a bypass for every lesion.
fn affine_only(exams: &ExamPair, cfg: &PipelineConfig) -> Result<TrackResult> {
    let reg = register(&exams.template, &exams.search, &cfg.registration)?;
    let mapped = map_box(&reg.transform, &exams.template_box).unwrap_or(exams.template_box);
    Ok(TrackResult {
        bbox: mapped,
        cls_score: None,
        similarity: None,
        stage: Stage::Bypass,
        diagnostics: TrackDiagnostics {
            registration_objective: Some(reg.objective),
            registration_fallback: reg.fell_back_to_identity,
            candidates: 0,
        },
    })
}

pub struct TrackArgs<'a> {
    pub data: &'a Path,
    pub tracker: Option<&'a Path>,
    pub refiner: Option<&'a Path>,
    pub out: &'a Path,
    pub method: Method,
    pub jobs: usize,
}

pub fn cmd_track(cfg: &RunConfig, args: &TrackArgs) -> Result<()> {
    cfg.validate()?;
    let ds = Dataset::load_lenient(args.data)?;
    let refs = enumerate_pairs(&ds.manifest, cfg.orientation);
    if refs.is_empty() {
        return Err(Error::EmptyInput("dataset contains no exam pairs"));
    }

    let pipe_cfg = PipelineConfig {
        patch: cfg.patch,
        variant: cfg.variant,
        registration: cfg.registration.clone(),
        use_centerness: cfg.use_centerness,
        refine: args.method == Method::Full,
        assume_registered: false,
    };

    let (tracker, refiner) = match args.method {
        Method::Affine => (None, None),
        Method::Tracker | Method::Full => {
            let path = args.tracker.ok_or_else(|| {
                Error::Config("--tracker weights are required for this method".into())
            })?;
            let tracker = Tracker::load(path)?;
            let want = if cfg.variant.uses_mask() { 2 } else { 1 };
            if tracker.config().in_channels != want {
                return Err(Error::Config(format!(
                    "tracker weights expect {} input channel(s) but the {:?} variant provides {want}",
                    tracker.config().in_channels,
                    cfg.variant
                )));
            }
            let refiner = match (args.method, args.refiner) {
                (Method::Full, Some(path)) => Refiner::load(path)?,
                (Method::Full, None) => {
                    return Err(Error::Config(
                        "--refiner weights are required for the full method".into(),
                    ))
                }
                // Unused when refinement is off; a fresh instance
                // keeps the call signature uniform.
                _ => Refiner::init(cfg.refiner.clone(), 0)?,
            };
            (Some(tracker), Some(refiner))
        }
    };

    // Load every exam up front (views share files); a pair whose
    // image is missing becomes an error record, not a run failure.
    let mut cache = ImageCache::default();
    let loaded: Vec<std::result::Result<ExamPair, (String, LesionType, String)>> = refs
        .iter()
        .map(|pr| {
            load_exam_pair(&ds, &mut cache, pr).map_err(|e| {
                (pr.id(&ds.manifest), ds.lesion_type(pr), e.to_string())
            })
        })
        .collect();
    drop(cache);

    let method = args.method;
    let start = Instant::now();
    let records = loaded
        .par_iter()
        .map(|entry| -> Result<TrackRecord> {
            let exams = match entry {
                Ok(e) => e,
                Err((id, ty, message)) => {
                    return Ok(TrackRecord::Error(ErrorRecord {
                        id: id.clone(),
                        lesion_type: *ty,
                        method: method.name().into(),
                        message: message.clone(),
                    }))
                }
            };
            let result = match method {
                Method::Affine => affine_only(exams, &pipe_cfg)?,
                Method::Tracker | Method::Full => track(
                    &exams.template,
                    &exams.template_box,
                    &exams.search,
                    tracker.as_ref().expect("loaded for this method"),
                    refiner.as_ref().expect("loaded for this method"),
                    &pipe_cfg,
                )?,
            };
            Ok(TrackRecord::Ok(OkRecord::from_result(
                &exams.id,
                exams.lesion_type,
                method.name(),
                &result,
            )))
        })
        .collect::<Result<Vec<_>>>()?;
    let elapsed = start.elapsed().as_secs_f64();

    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_jsonl(args.out, &records)?;
    let failures = records
        .iter()
        .filter(|r| matches!(r, TrackRecord::Error(_)))
        .count();
    println!(
        "tracked {} pairs with method {} ({} failures) -> {}",
        records.len(),
        method.name(),
        failures,
        args.out.display()
    );
    write_sidecar(
        args.out,
        &Sidecar {
            command: "track",
            elapsed_seconds: elapsed,
            jobs: args.jobs,
            items: records.len(),
        },
    )
}

// -------------------------------------------------------------------- eval

fn print_summary(name: &str, s: &MetricsSummary) {
    println!(
        "{name:<14} pairs {:>4}  ao {:.4}  accuracy {:.4}  robustness {:.4}  l2 {:.3} mm  auc {:.4}",
        s.pairs, s.ao, s.accuracy, s.robustness, s.mean_l2_mm, s.auc
    );
}

pub fn cmd_eval(
    cfg: &RunConfig,
    results: &Path,
    data: &Path,
    out: &Path,
    label: &str,
) -> Result<()> {
    cfg.validate()?;
    let ds = Dataset::load_lenient(data)?;
    let records = read_jsonl(results)?;
    if records.is_empty() {
        return Err(Error::EmptyInput("results file holds no records"));
    }

    // Ground truth per pair id.
    let mut gt = std::collections::HashMap::new();
    for pr in enumerate_pairs(&ds.manifest, cfg.orientation) {
        let view = &ds.manifest.cases[pr.case].views[pr.view];
        let sbox = view.timepoints[pr.search_tp].lesion_box.to_box()?;
        gt.insert(pr.id(&ds.manifest), (sbox, ds.lesion_type(&pr)));
    }

    let start = Instant::now();
    let mut outcomes = Vec::with_capacity(records.len());
    for record in &records {
        let Some((gt_box, lesion_type)) = gt.get(record.id()) else {
            return Err(Error::Schema {
                context: format!("results {}", results.display()),
                message: format!("pair {} is not in the manifest", record.id()),
            });
        };
        match record {
            TrackRecord::Ok(ok) => {
                let result = ok.to_result()?;
                outcomes.push(lesiontrack::eval::score_pair(
                    &ok.id,
                    *lesion_type,
                    &result,
                    gt_box,
                    ds.manifest.spacing_mm,
                )?);
            }
            TrackRecord::Error(err) => {
                // Failure outcome: zero overlap, and a center miss of
                // the whole search window (the lesion was lost beyond
                // it).
                outcomes.push(PairOutcome {
                    id: err.id.clone(),
                    lesion_type: *lesion_type,
                    iou: 0.0,
                    center_l2_mm: cfg.patch.search_extent_mm,
                });
            }
        }
    }
    let report = aggregate(&outcomes)?;
    let files = emit_report(&report, label, out)?;
    print_summary("overall", &report.overall);
    for (name, summary) in &report.per_type {
        print_summary(name, summary);
    }
    println!(
        "wrote {}",
        files
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    write_sidecar(
        &out.join("metrics.json"),
        &Sidecar {
            command: "eval",
            elapsed_seconds: start.elapsed().as_secs_f64(),
            jobs: 1,
            items: outcomes.len(),
        },
    )
}

// -------------------------------------------------------------------- plot

pub fn cmd_plot(out: &Path, series_args: &[String]) -> Result<()> {
    if series_args.is_empty() {
        return Err(Error::Config(
            "plot needs at least one LABEL=METRICS.json argument".into(),
        ));
    }
    let mut series = Vec::with_capacity(series_args.len());
    for arg in series_args {
        let Some((label, path)) = arg.split_once('=') else {
            return Err(Error::Config(format!(
                "expected LABEL=METRICS.json, got {arg:?}"
            )));
        };
        let report = read_metrics_json(Path::new(path))?;
        series.push(SuccessSeries {
            label: label.to_string(),
            curve: report.curve,
            auc: report.overall.auc,
        });
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_success_svg(out, &series)?;
    println!("wrote {}", out.display());
    Ok(())
}
