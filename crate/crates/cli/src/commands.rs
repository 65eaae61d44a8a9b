use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use panoptic_core::metrics::{
    ap_inputs_from_panoptic, ApAccumulator, ApParams, IouAccumulator, MeanOver, PqAccumulator,
};
use panoptic_core::postprocess::{
    extract_centers, filter_small_stuff_with, group_pixels, keypoint_nms, merge_panoptic, thing_mask_from_semantic,
};
use panoptic_core::selftest::{faulty_nms_off_by_one, run_selftest, SelftestConfig};
use panoptic_core::synth::bench_inputs;
use panoptic_core::targets::{semantic_labels, TargetError};
use panoptic_core::tensor_io::{read_instances, read_spec, read_tensor, write_instances, write_tensor, Tensor};
use panoptic_core::types::{validate, GridRef, Violation};
use panoptic_core::{
    encode_targets, panoptic_inference, DatasetSpec, Dims, InstanceRecord, LabelMap, PostprocParams, SemanticInput,
    TargetParams,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::CliError;
use crate::{thread_pool, BenchArgs, Cli, Command, EvalArgs, EvalMode, Fault, FuseArgs, SelftestArgs, TargetsArgs};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let spec = match &cli.spec {
        Some(path) => read_spec(path)?,
        None => DatasetSpec::cityscapes(),
    };
    let pool = thread_pool(cli.threads)?;
    let threads = cli.threads;
    let work = move || match cli.command {
        Command::Targets(a) => targets(&a, &spec),
        Command::Fuse(a) => fuse(&a, &spec),
        Command::Eval(a) => eval(&a, &spec),
        Command::Bench(a) => bench(&a, &spec, threads),
        Command::Selftest(a) => selftest(&a, &spec),
    };
    let (report, outcome) = match pool {
        Some(pool) => pool.install(work),
        None => work(),
    }?;
    emit(cli.report.as_deref(), &report)?;
    outcome
}

/// A report to emit plus the command's final status. Property failures still
/// produce a report.
type Outcome = Result<(Value, Result<(), CliError>), CliError>;

fn emit(path: Option<&Path>, report: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report).map_err(CliError::validation)? + "\n";
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn check(violations: Vec<Violation>, what: &str, path: &Path) -> Result<(), CliError> {
    if violations.is_empty() {
        return Ok(());
    }
    let shown: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
    let more = violations.len().saturating_sub(shown.len());
    Err(CliError::Validation(format!(
        "{} ({what}): {}{}",
        path.display(),
        shown.join("; "),
        if more > 0 { format!(" and {more} more") } else { String::new() }
    )))
}

fn read_panoptic(path: &Path, spec: &DatasetSpec, expected: Option<Dims>) -> Result<LabelMap, CliError> {
    let map = read_tensor(path)?.to_label_map()?;
    check(validate(GridRef::Panoptic(&map), expected, spec), "panoptic map", path)?;
    Ok(map)
}

fn targets(a: &TargetsArgs, spec: &DatasetSpec) -> Outcome {
    let params = TargetParams {
        sigma: a.sigma,
        truncation_radius: a.truncation,
        small_instance_area: a.small_instance_area,
        small_instance_weight: a.small_instance_weight,
        round_centers: a.round_centers,
    };
    let gt = read_tensor(&a.gt)?.to_label_map()?;
    let bundle = encode_targets(&gt, spec, &params).map_err(|e| match e {
        TargetError::InvalidAnnotation(v) => check(v, "groundtruth", &a.gt).unwrap_err(),
        other => CliError::validation(other),
    })?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Io(format!("{}: {e}", a.out_dir.display())))?;
    let files: [(&str, Tensor); 5] = [
        ("heatmap", Tensor::from_heatmap(&bundle.heatmap)),
        ("offsets", Tensor::from_offsets(&bundle.offsets)),
        ("weights", Tensor::from_heatmap(&bundle.semantic_weights)),
        ("semantic", Tensor::from_label_map(&bundle.semantic_labels)),
        ("thing_mask", Tensor::from_bool_grid(&bundle.thing_mask)),
    ];
    let mut written = serde_json::Map::new();
    for (name, tensor) in &files {
        let path = a.out_dir.join(format!("{name}.pdlt"));
        write_tensor(&path, tensor)?;
        written.insert(name.to_string(), json!(path));
    }
    let div = spec.label_divisor();
    let instances: Vec<Value> = bundle
        .centers
        .iter()
        .map(|m| {
            eprintln!(
                "instance {}: category {} center ({:.3}, {:.3}) area {}",
                m.id,
                m.id / div,
                m.center.row,
                m.center.col,
                m.area
            );
            json!({"id": m.id, "category": m.id / div, "center": [m.center.row, m.center.col], "area": m.area})
        })
        .collect();
    let dims = gt.dims();
    Ok((
        json!({"dims": [dims.height, dims.width], "files": written, "instances": instances}),
        Ok(()),
    ))
}

fn postproc_params(a: &FuseArgs) -> PostprocParams {
    PostprocParams {
        nms_kernel: a.nms_kernel,
        center_threshold: a.center_threshold,
        top_k: a.top_k,
        stuff_area_threshold: a.stuff_area_threshold,
        stuff_segments: a.stuff_segments.into(),
        score_mode: a.score_mode.into(),
    }
}

fn fuse(a: &FuseArgs, spec: &DatasetSpec) -> Outcome {
    let params = postproc_params(a);
    params.check(spec).map_err(CliError::validation)?;
    let semantic = read_tensor(&a.semantic)?;
    let heatmap = read_tensor(&a.heatmap)?.to_heatmap()?;
    let dims = heatmap.dims();
    check(validate(GridRef::Heatmap(&heatmap), None, spec), "heatmap", &a.heatmap)?;
    let offsets = read_tensor(&a.offsets)?.to_offsets()?;
    check(validate(GridRef::Offsets(&offsets), Some(dims), spec), "offsets", &a.offsets)?;

    let (labels, probs);
    let input = if semantic.shape.len() == 3 {
        probs = semantic.to_volume()?;
        if probs.dims() != dims {
            return Err(CliError::Validation(format!(
                "{} (probabilities): dimension mismatch: expected {dims}, found {}",
                a.semantic.display(),
                probs.dims()
            )));
        }
        SemanticInput::Probabilities(&probs)
    } else {
        labels = semantic.to_label_map()?;
        check(validate(GridRef::Semantic(&labels), Some(dims), spec), "semantic labels", &a.semantic)?;
        SemanticInput::Labels(&labels)
    };
    let result = panoptic_inference(input, &heatmap, &offsets, spec, &params).map_err(CliError::validation)?;
    write_tensor(&a.out, &Tensor::from_label_map(&result.panoptic))?;
    if let Some(path) = &a.instances {
        write_instances(path, &result.instances)?;
    }
    log::info!("{} instances", result.instances.len());
    Ok((
        json!({
            "panoptic": a.out,
            "dims": [dims.height, dims.width],
            "score_mode": params.score_mode,
            "instances": result.instances,
        }),
        Ok(()),
    ))
}

#[derive(Serialize)]
struct ImageReport {
    pred: PathBuf,
    gt: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pq: Option<panoptic_core::PqReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    miou: Option<panoptic_core::IoUReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ap: Option<panoptic_core::ApReport>,
}

struct ImageResult {
    report: ImageReport,
    pq: PqAccumulator,
    iou: IouAccumulator,
    ap_inputs: Option<(Vec<panoptic_core::metrics::ApPrediction>, Vec<panoptic_core::metrics::ApGroundTruth>)>,
}

fn eval(a: &EvalArgs, spec: &DatasetSpec) -> Outcome {
    if a.pred.len() != a.gt.len() {
        return Err(CliError::Validation(format!(
            "{} prediction files but {} groundtruth files",
            a.pred.len(),
            a.gt.len()
        )));
    }
    if !a.pred_instances.is_empty() && a.pred_instances.len() != a.pred.len() {
        return Err(CliError::Validation(format!(
            "{} instance files for {} predictions",
            a.pred_instances.len(),
            a.pred.len()
        )));
    }
    let want = |m: EvalMode| a.mode == m || a.mode == EvalMode::All;
    let ap_params = ApParams::default();

    let per_image: Vec<ImageResult> = (0..a.pred.len())
        .into_par_iter()
        .map(|i| -> Result<ImageResult, CliError> {
            let gt = read_panoptic(&a.gt[i], spec, None)?;
            let pred = read_panoptic(&a.pred[i], spec, Some(gt.dims()))?;
            let mut pq = PqAccumulator::new();
            let mut iou = IouAccumulator::new();
            let mut report = ImageReport {
                pred: a.pred[i].clone(),
                gt: a.gt[i].clone(),
                pq: None,
                miou: None,
                ap: None,
            };
            if want(EvalMode::Pq) {
                pq.add_image(&pred, &gt, spec).map_err(CliError::validation)?;
                report.pq = Some(pq.report(spec));
            }
            if want(EvalMode::Miou) {
                iou.add_image(&semantic_labels(&pred, spec), &semantic_labels(&gt, spec), spec)
                    .map_err(CliError::validation)?;
                report.miou = Some(iou.report(MeanOver::GtPresent));
            }
            let mut ap_inputs = None;
            if want(EvalMode::Ap) {
                let records: Option<Vec<InstanceRecord>> =
                    a.pred_instances.get(i).map(|p| read_instances(p)).transpose()?;
                let (p, g) = ap_inputs_from_panoptic(&pred, records.as_deref(), &gt, spec)
                    .map_err(CliError::validation)?;
                report.ap = Some(panoptic_core::mask_ap(&p, &g, &ap_params));
                ap_inputs = Some((p, g));
            }
            Ok(ImageResult {
                report,
                pq,
                iou,
                ap_inputs,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut pq = PqAccumulator::new();
    let mut iou = IouAccumulator::new();
    let mut ap = ApAccumulator::new(ap_params);
    let mut images = Vec::with_capacity(per_image.len());
    for r in per_image {
        pq.merge(&r.pq);
        iou.merge(&r.iou);
        if let Some((p, g)) = &r.ap_inputs {
            ap.add_image(p, g);
        }
        images.push(r.report);
    }
    let mut aggregate = serde_json::Map::new();
    if want(EvalMode::Pq) {
        aggregate.insert("pq".into(), json!(pq.report(spec)));
    }
    if want(EvalMode::Miou) {
        aggregate.insert("miou".into(), json!(iou.report(MeanOver::GtPresent)));
    }
    if want(EvalMode::Ap) {
        aggregate.insert("ap".into(), json!(ap.report()));
    }
    Ok((json!({"images": images, "aggregate": aggregate}), Ok(())))
}

fn median_ms(mut samples: Vec<Duration>) -> f64 {
    samples.sort_unstable();
    let n = samples.len();
    let mid = if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    };
    mid.as_secs_f64() * 1e3
}

/// FNV-1a over the output bytes, to compare outputs across runs.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn bench(a: &BenchArgs, spec: &DatasetSpec, threads: Option<usize>) -> Outcome {
    let dims = Dims::new(a.height, a.width).map_err(CliError::validation)?;
    if a.repetitions == 0 {
        return Err(CliError::Validation("--repetitions must be at least 1".into()));
    }
    let inputs = bench_inputs(dims, a.centers, a.seed, spec);
    let params = PostprocParams::default();
    params.check(spec).map_err(CliError::validation)?;
    let threshold = spec.stuff_area_threshold();
    let (mut nms_t, mut group_t, mut merge_t, mut full_t) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut digest = None;
    let mut instances = 0;
    for _ in 0..a.repetitions {
        let t = Instant::now();
        let nms = keypoint_nms(&inputs.heatmap, params.nms_kernel).map_err(CliError::validation)?;
        nms_t.push(t.elapsed());

        let t = Instant::now();
        let centers = extract_centers(&nms, params.center_threshold, params.top_k);
        let mask = thing_mask_from_semantic(&inputs.semantic, spec);
        let ids = group_pixels(&centers, &inputs.offsets, &mask).map_err(CliError::validation)?;
        group_t.push(t.elapsed());

        let t = Instant::now();
        let merged = merge_panoptic(&inputs.semantic, &ids, &centers, spec).map_err(CliError::validation)?;
        merge_t.push(t.elapsed());
        let _ = filter_small_stuff_with(&merged, spec, threshold, params.stuff_segments);

        let t = Instant::now();
        let full = panoptic_inference(
            SemanticInput::Labels(&inputs.semantic),
            &inputs.heatmap,
            &inputs.offsets,
            spec,
            &params,
        )
        .map_err(CliError::validation)?;
        full_t.push(t.elapsed());
        instances = full.instances.len();
        let h = fnv1a(&Tensor::from_label_map(&full.panoptic).to_bytes());
        if digest.is_some_and(|d| d != h) {
            return Ok((json!({}), Err(CliError::Property("pipeline output changed between repetitions".into()))));
        }
        digest = Some(h);
    }
    let (full_ms, merge_ms) = (median_ms(full_t), median_ms(merge_t));
    let report = json!({
        "dims": [dims.height, dims.width],
        "centers": a.centers,
        "instances": instances,
        "repetitions": a.repetitions,
        "threads": threads.unwrap_or_else(rayon::current_num_threads),
        "median_ms": {
            "nms": median_ms(nms_t),
            "grouping": median_ms(group_t),
            "merge": merge_ms,
            "full": full_ms,
        },
        "output_fnv1a": format!("{:016x}", digest.unwrap_or(0)),
    });
    let status = if a.assert_budget && (full_ms >= 1000.0 || merge_ms >= 100.0) {
        Err(CliError::Property(format!(
            "over budget: full {full_ms:.1} ms (limit 1000), merge {merge_ms:.1} ms (limit 100)"
        )))
    } else {
        Ok(())
    };
    Ok((report, status))
}

fn selftest(a: &SelftestArgs, spec: &DatasetSpec) -> Outcome {
    let mut cfg = SelftestConfig {
        seed: a.seed,
        cases: a.cases,
        ..SelftestConfig::default()
    };
    if let Some(Fault::NmsOffByOne) = a.inject_fault {
        cfg.nms = faulty_nms_off_by_one;
    }
    let report = run_selftest(&cfg, spec);
    for c in &report.checks {
        eprintln!("{} {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    let status = match report.checks.iter().find(|c| !c.passed) {
        Some(c) => Err(CliError::Property(format!("{}: {}", c.name, c.detail))),
        None => Ok(()),
    };
    Ok((serde_json::to_value(&report).map_err(CliError::validation)?, status))
}
