//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with a plain `main` so the lines show up in `cargo test` output
//! without `--nocapture`. Exits non-zero when any asserted criterion fails.
//! The performance budget is only asserted when `PANOPTIC_ASSERT_PERF` is set.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use panoptic_core::metrics::{
    ap_inputs_from_panoptic, mask_ap, match_segments, mean_iou, panoptic_quality, ApParams,
};
use panoptic_core::oracle::{self, gradient_check_ce, gradient_check_l1, gradient_check_mse};
use panoptic_core::postprocess::{
    extract_centers, group_pixels, keypoint_nms, merge_panoptic, panoptic_inference, thing_mask_from_semantic,
    PostprocParams, ScoreMode, SemanticInput,
};
use panoptic_core::selftest::{random_grouping_case, random_heatmap, round_trip_pq};
use panoptic_core::synth::{bench_inputs, random_scene};
use panoptic_core::targets::{compute_mass_centers, encode_center_heatmap, encode_targets, TargetParams};
use panoptic_core::tensor_io::Tensor;
use panoptic_core::{
    l1_offset_loss, mse_heatmap_loss, weighted_bootstrapped_ce, BoolGrid, CategorySpec, DatasetSpec, Dims, Grid,
    Heatmap, InstanceCenter, LabelMap, OffsetField, ScoreVolume, Volume,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    /// Measured but not asserted.
    Report(String),
}

fn run(name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Verdict::Fail(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match verdict {
        Verdict::Pass(d) => ("PASS", d, true),
        Verdict::Fail(d) => ("FAIL", d, false),
        Verdict::Report(d) => ("PASS", format!("reported, not asserted: {d}"), true),
    };
    println!("{tag} {name}: {detail} [{secs:.2}s]");
    ok
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn round_trip() -> Verdict {
    let spec = DatasetSpec::cityscapes();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let start = Instant::now();
    let n_scenes = 120;
    let mut failures = Vec::new();
    for seed in 0..n_scenes {
        let dims = Dims::new(rng.random_range(64..=256), rng.random_range(64..=256)).unwrap();
        let n = rng.random_range(1..=20);
        let gt = random_scene(seed, dims, n, &spec);
        let got = compute_mass_centers(&gt, &spec).len();
        let stuff: std::collections::BTreeSet<u32> =
            gt.as_slice().iter().map(|&id| id / 1000).filter(|&c| spec.is_stuff(c)).collect();
        if got != n || stuff.len() < 3 {
            failures.push(format!("seed {seed}: generator gave {got}/{n} instances, {} stuff", stuff.len()));
            continue;
        }
        match round_trip_pq(&gt, &spec) {
            Ok(r) if r.all.pq == 1.0 => {}
            Ok(r) => failures.push(format!("seed {seed} ({dims}, {n} instances): PQ {}", r.all.pq)),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    verdict(
        failures.is_empty() && elapsed < Duration::from_secs(30),
        format!(
            "{n_scenes} scenes, {} failures{}, {:.2}s (limit 30s)",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    )
}

fn grouping_oracle() -> Verdict {
    let dims = Dims::new(4, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2000);
    let mut exhaustive = 0usize;
    let mut mismatches = 0usize;
    for bits in 0u32..1 << 16 {
        let mask = BoolGrid::from_fn(dims, |r, c| bits >> (r * 4 + c) & 1 == 1);
        for n in 0..=3 {
            let centers: Vec<InstanceCenter> = (0..n)
                .map(|_| InstanceCenter::new(rng.random_range(0..4) as f64, rng.random_range(0..4) as f64, 1.0))
                .collect();
            let offsets = OffsetField::from_fn(dims, |_, _| {
                [rng.random_range(-4..=4) as f32 * 0.5, rng.random_range(-4..=4) as f32 * 0.5]
            });
            exhaustive += 1;
            if group_pixels(&centers, &offsets, &mask).unwrap() != oracle::naive_group(&centers, &offsets, &mask) {
                mismatches += 1;
            }
        }
    }
    let big = Dims::new(16, 16).unwrap();
    for _ in 0..1000 {
        let (centers, offsets, mask) = random_grouping_case(&mut rng, big);
        if group_pixels(&centers, &offsets, &mask).unwrap() != oracle::naive_group(&centers, &offsets, &mask) {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("{exhaustive} exhaustive 4x4 cases + 1000 random 16x16 cases, {mismatches} mismatches"),
    )
}

fn nms_oracle() -> Verdict {
    let dims = Dims::new(16, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let mut mismatches = 0;
    for i in 0..1000 {
        let h = if i % 2 == 0 {
            random_heatmap(&mut rng, dims)
        } else {
            Heatmap::from_fn(dims, |_, _| rng.random_range(0.0..1.0f32))
        };
        for k in [1, 3, 5, 7] {
            if keypoint_nms(&h, k).unwrap() != oracle::naive_nms(&h, k) {
                mismatches += 1;
            }
        }
    }
    verdict(mismatches == 0, format!("1000 heatmaps x kernels {{1,3,5,7}}, {mismatches} mismatches"))
}

fn gradient_checks() -> Verdict {
    let mut worst = [0.0f64; 3];
    let mut compared = [0usize; 3];
    let mut skipped = [0usize; 3];
    for seed in 0..50 {
        for (i, g) in [gradient_check_ce(seed, 0.15), gradient_check_mse(seed), gradient_check_l1(seed)]
            .into_iter()
            .enumerate()
        {
            worst[i] = worst[i].max(g.max_rel_error);
            compared[i] += g.compared;
            skipped[i] += g.skipped;
        }
    }
    verdict(
        worst.iter().all(|&w| w < 1e-4) && compared.iter().all(|&c| c > 0),
        format!(
            "max rel error ce {:.2e} ({} coords, {} skipped), mse {:.2e} ({}), l1 {:.2e} ({} coords, {} skipped)",
            worst[0], compared[0], skipped[0], worst[1], compared[1], worst[2], compared[2], skipped[2]
        ),
    )
}

fn pq_formula() -> Verdict {
    let spec = DatasetSpec::new(
        vec![CategorySpec::new(0, "road", false), CategorySpec::new(1, "car", true)],
        255,
        1000,
        0,
    )
    .unwrap();
    let dims = Dims::new(4, 10).unwrap();
    // Car A spans row 0 (10 px) and is predicted on 8 of them (IoU 0.8);
    // car B (5 px) gets no prediction.
    let gt = LabelMap::from_fn(dims, |r, c| match r {
        0 => 1001,
        1 if c < 5 => 1002,
        _ => 0,
    });
    let pred = LabelMap::from_fn(dims, |r, c| match r {
        0 if c < 8 => 1003,
        1 if c < 5 => 255_000,
        0 => 255_000,
        _ => 0,
    });
    let r = panoptic_quality(&pred, &gt, &spec).unwrap();
    let car = r.per_category.iter().find(|c| c.category == 1).unwrap();
    let target = 0.8 / 1.5;
    let formula_ok = (car.pq - target).abs() < 1e-9 && (r.things.pq - target).abs() < 1e-9;

    let full = DatasetSpec::cityscapes();
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let mut identity_violations = 0;
    let mut uniqueness_panics = 0;
    for _ in 0..1000 {
        let d = Dims::new(rng.random_range(1..24), rng.random_range(1..24)).unwrap();
        let ids = [0, 1000, 2000, 11_001, 11_002, 13_001, 13_002, 13_003, 255_000];
        let base: LabelMap = Grid::from_fn(d, |r, c| ids[(r / 4 * 3 + c / 5) % ids.len()]);
        let mut noisy = |m: &LabelMap| m.map(|&v| if rng.random_bool(0.2) { ids[rng.random_range(0..ids.len())] } else { v });
        let (p, g) = (noisy(&base), noisy(&base));
        match catch_unwind(|| (match_segments(&p, &g, &full).unwrap(), panoptic_quality(&p, &g, &full).unwrap())) {
            Ok((_, report)) => {
                identity_violations += report.per_category.iter().filter(|c| c.pq != c.sq * c.rq).count();
            }
            Err(_) => uniqueness_panics += 1,
        }
    }
    verdict(
        formula_ok && identity_violations == 0 && uniqueness_panics == 0,
        format!(
            "PQ {:.12} (expected {target:.12}); 1000 random pairs: {identity_violations} PQ != SQ*RQ, {uniqueness_panics} uniqueness failures",
            car.pq
        ),
    )
}

/// Soft class probabilities whose argmax is `labels` (ignore pixels get a
/// flat distribution, which argmaxes to channel 0).
fn probabilities_for(labels: &LabelMap, channels: usize, rng: &mut ChaCha8Rng) -> ScoreVolume {
    let mut data = Vec::with_capacity(labels.as_slice().len() * channels);
    for &l in labels.as_slice() {
        let mut px: Vec<f32> = (0..channels).map(|_| rng.random_range(0.0..0.4f32)).collect();
        if (l as usize) < channels {
            px[l as usize] = rng.random_range(0.5..1.0);
        }
        let z: f32 = px.iter().sum();
        data.extend(px.iter().map(|v| v / z));
    }
    Volume::from_vec(labels.dims(), channels, data).unwrap()
}

fn score_mode_invariance() -> Verdict {
    let spec = DatasetSpec::cityscapes();
    let mut rng = ChaCha8Rng::seed_from_u64(5000);
    let mut mismatches = Vec::new();
    let mut ap_differs = 0;
    for seed in 0..20u64 {
        let dims = Dims::new(rng.random_range(64..=160), rng.random_range(64..=160)).unwrap();
        let gt = random_scene(7000 + seed, dims, rng.random_range(1..=15), &spec);
        let t = encode_targets(&gt, &spec, &TargetParams::default()).unwrap();
        let probs = probabilities_for(&t.semantic_labels, 19, &mut rng);
        let heat = t.heatmap.map(|&v| (v * rng.random_range(0.8..1.0f32)).min(1.0));
        let mut outputs = Vec::new();
        for mode in ScoreMode::ALL {
            let params = PostprocParams {
                score_mode: mode,
                ..PostprocParams::default()
            };
            let res = panoptic_inference(SemanticInput::Probabilities(&probs), &heat, &t.offsets, &spec, &params).unwrap();
            let pq = panoptic_quality(&res.panoptic, &gt, &spec).unwrap();
            let miou = mean_iou(&res.semantic(&spec), &t.semantic_labels, &spec).unwrap();
            let (p, g) = ap_inputs_from_panoptic(&res.panoptic, Some(&res.instances), &gt, &spec).unwrap();
            let ap = mask_ap(&p, &g, &ApParams::default());
            outputs.push((Tensor::from_label_map(&res.panoptic).to_bytes(), pq, miou, ap));
        }
        for o in &outputs[1..] {
            if o.0 != outputs[0].0 || o.1 != outputs[0].1 || o.2 != outputs[0].2 {
                mismatches.push(seed);
            }
            if o.3 != outputs[0].3 {
                ap_differs += 1;
            }
        }
    }
    verdict(
        mismatches.is_empty(),
        format!(
            "20 scenes x 3 modes: {} panoptic/PQ/mIoU mismatches, AP differed in {ap_differs} comparisons",
            mismatches.len()
        ),
    )
}

fn heatmap_encoding() -> Verdict {
    let dims = Dims::new(48, 48).unwrap();
    let h = encode_center_heatmap(&[InstanceCenter::new(20.0, 20.0, 1.0)], dims, &TargetParams::default());
    let expected = (-0.5f64).exp();
    let vals = [h[(28, 20)], h[(12, 20)], h[(20, 28)], h[(20, 12)]];
    let err = vals.iter().map(|&v| (v as f64 - expected).abs()).fold(0.0, f64::max);
    verdict(err < 1e-6 && h[(20, 20)] == 1.0, format!("value at distance 8: {:.9}, |error| {err:.2e}", vals[0]))
}

fn performance() -> Verdict {
    let spec = DatasetSpec::cityscapes();
    let dims = Dims::new(1025, 2049).unwrap();
    let inputs = bench_inputs(dims, 200, 42, &spec);
    let params = PostprocParams::default();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (full, merge, n) = pool.install(|| {
        let mut full = Duration::MAX;
        let mut merge = Duration::MAX;
        let mut n = 0;
        for _ in 0..3 {
            let t = Instant::now();
            let res = panoptic_inference(
                SemanticInput::Labels(&inputs.semantic),
                &inputs.heatmap,
                &inputs.offsets,
                &spec,
                &params,
            )
            .unwrap();
            full = full.min(t.elapsed());
            n = res.instances.len();

            let nms = keypoint_nms(&inputs.heatmap, params.nms_kernel).unwrap();
            let centers = extract_centers(&nms, params.center_threshold, params.top_k);
            let mask = thing_mask_from_semantic(&inputs.semantic, &spec);
            let ids = group_pixels(&centers, &inputs.offsets, &mask).unwrap();
            let t = Instant::now();
            merge_panoptic(&inputs.semantic, &ids, &centers, &spec).unwrap();
            merge = merge.min(t.elapsed());
        }
        (full, merge, n)
    });
    let ok = full < Duration::from_secs(1) && merge < Duration::from_millis(100) && n == 200;
    let detail = format!(
        "1025x2049, {n} instances, 1 thread: full {:.1} ms (budget 1000), merge {:.1} ms (budget 100)",
        full.as_secs_f64() * 1e3,
        merge.as_secs_f64() * 1e3
    );
    if std::env::var_os("PANOPTIC_ASSERT_PERF").is_some() {
        verdict(ok, detail)
    } else {
        Verdict::Report(format!("{detail}, within budget: {ok}"))
    }
}

/// Serialises every pipeline and metric output of one scene.
fn fingerprint(seed: u64, spec: &DatasetSpec) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::new(rng.random_range(64..=200), rng.random_range(64..=200)).unwrap();
    let gt = random_scene(seed, dims, rng.random_range(1..=20), spec);
    let t = encode_targets(&gt, spec, &TargetParams::default()).unwrap();
    let probs = probabilities_for(&t.semantic_labels, 19, &mut rng);
    let heat = t.heatmap.map(|&v| v * rng.random_range(0.7..1.0f32));
    let offsets = t.offsets.map(|o| [o[0] + rng.random_range(-1.5..1.5f32), o[1] + rng.random_range(-1.5..1.5f32)]);

    let mut out = Vec::new();
    out.extend(Tensor::from_heatmap(&t.heatmap).to_bytes());
    out.extend(Tensor::from_offsets(&t.offsets).to_bytes());
    out.extend(Tensor::from_heatmap(&t.semantic_weights).to_bytes());

    let res = panoptic_inference(SemanticInput::Probabilities(&probs), &heat, &offsets, spec, &PostprocParams::default())
        .unwrap();
    out.extend(Tensor::from_label_map(&res.panoptic).to_bytes());
    out.extend(serde_json::to_vec(&res.instances).unwrap());
    out.extend(serde_json::to_vec(&panoptic_quality(&res.panoptic, &gt, spec).unwrap()).unwrap());
    out.extend(serde_json::to_vec(&mean_iou(&res.semantic(spec), &t.semantic_labels, spec).unwrap()).unwrap());
    let (p, g) = ap_inputs_from_panoptic(&res.panoptic, Some(&res.instances), &gt, spec).unwrap();
    out.extend(serde_json::to_vec(&mask_ap(&p, &g, &ApParams::default())).unwrap());

    let logits = probs.clone();
    let ce = weighted_bootstrapped_ce(&logits, &t.semantic_labels, &t.semantic_weights, 255, 0.15).unwrap();
    let mse = mse_heatmap_loss(&heat, &t.heatmap).unwrap();
    let l1 = l1_offset_loss(&offsets, &t.offsets, &t.thing_mask).unwrap();
    for l in [ce, mse, l1] {
        out.extend(l.value.to_bits().to_le_bytes());
        for g in l.gradient.unwrap_or_default() {
            out.extend(g.to_bits().to_le_bytes());
        }
    }
    out
}

fn determinism() -> Verdict {
    let spec = DatasetSpec::cityscapes();
    let in_pool = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| (0..8u64).map(|s| fingerprint(9000 + s, &spec)).collect::<Vec<_>>())
    };
    let one = in_pool(1);
    let four = in_pool(4);
    let again = in_pool(4);
    let bytes: usize = one.iter().map(Vec::len).sum();
    verdict(
        one == four && four == again,
        format!("8 scenes, {bytes} output bytes each run; 1 vs 4 threads identical: {}, repeat identical: {}", one == four, four == again),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 9] = [
        ("round-trip oracle", round_trip),
        ("grouping oracle", grouping_oracle),
        ("NMS oracle", nms_oracle),
        ("gradient checks", gradient_checks),
        ("PQ formula", pq_formula),
        ("score-mode invariance", score_mode_invariance),
        ("heatmap encoding", heatmap_encoding),
        ("performance", performance),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !run(name, f) {
            failed += 1;
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
