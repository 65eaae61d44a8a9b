//! Runtime property checks: the fast paths against the brute-force oracles,
//! a synthetic round trip and gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::metrics::{match_segments, panoptic_quality, PqReport};
use crate::oracle;
use crate::postprocess::{
    group_pixels, keypoint_nms, panoptic_inference, PostprocError, PostprocParams, SemanticInput,
};
use crate::synth::random_scene;
use crate::targets::{encode_targets, TargetParams};
use crate::types::{BoolGrid, DatasetSpec, Dims, Grid, Heatmap, InstanceCenter, LabelMap, OffsetField};

pub type NmsFn = fn(&Heatmap, usize) -> Result<Heatmap, PostprocError>;

/// Deliberately wrong NMS that uses a window one pixel too narrow on each
/// side. Used to confirm the self-test notices a broken implementation.
pub fn faulty_nms_off_by_one(heatmap: &Heatmap, kernel: usize) -> Result<Heatmap, PostprocError> {
    keypoint_nms(heatmap, kernel.saturating_sub(2).max(1))
}

#[derive(Debug, Clone, Copy)]
pub struct SelftestConfig {
    pub seed: u64,
    pub nms: NmsFn,
    /// Random cases per oracle check.
    pub cases: usize,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        SelftestConfig {
            seed: 0,
            nms: keypoint_nms,
            cases: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
}

/// Full fusion of groundtruth-derived targets, scored against the
/// groundtruth. Heatmap peaks sit on rounded mass centers and stuff
/// filtering is off, so a correct pipeline reproduces the segmentation.
pub fn round_trip_pq(gt: &LabelMap, spec: &DatasetSpec) -> Result<PqReport, String> {
    let targets = encode_targets(
        gt,
        spec,
        &TargetParams {
            round_centers: true,
            ..TargetParams::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let params = PostprocParams {
        stuff_area_threshold: Some(0),
        ..PostprocParams::default()
    };
    let result = panoptic_inference(
        SemanticInput::Labels(&targets.semantic_labels),
        &targets.heatmap,
        &targets.offsets,
        spec,
        &params,
    )
    .map_err(|e| e.to_string())?;
    panoptic_quality(&result.panoptic, gt, spec).map_err(|e| e.to_string())
}

/// Random heatmap with plateaus: values drawn from a few levels.
pub fn random_heatmap(rng: &mut impl Rng, dims: Dims) -> Heatmap {
    let levels = rng.random_range(2..6);
    Grid::from_fn(dims, |_, _| rng.random_range(0..levels) as f32 / levels as f32)
}

/// Random centers, offsets and mask for grouping checks.
pub fn random_grouping_case(rng: &mut impl Rng, dims: Dims) -> (Vec<InstanceCenter>, OffsetField, BoolGrid) {
    let n = rng.random_range(0..8);
    let (h, w) = (dims.height as f64, dims.width as f64);
    let centers = (0..n)
        .map(|_| InstanceCenter::new(rng.random_range(0.0..h).floor(), rng.random_range(0.0..w).floor(), 1.0))
        .collect();
    let offsets = Grid::from_fn(dims, |_, _| {
        // Half-integer offsets make exact distance ties common.
        [rng.random_range(-8..=8) as f32 * 0.5, rng.random_range(-8..=8) as f32 * 0.5]
    });
    let mask = Grid::from_fn(dims, |_, _| rng.random_bool(0.7));
    (centers, offsets, mask)
}

fn outcome(name: &'static str, cases: usize, failure: Option<String>) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: failure.is_none(),
        cases,
        detail: failure.unwrap_or_else(|| "ok".to_string()),
    }
}

fn check_nms(cfg: &SelftestConfig, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut failure = None;
    let mut n = 0;
    'outer: for _ in 0..cfg.cases {
        let dims = Dims::new(rng.random_range(1..24), rng.random_range(1..24)).unwrap();
        let h = random_heatmap(rng, dims);
        for k in [1, 3, 5, 7] {
            n += 1;
            match (cfg.nms)(&h, k) {
                Ok(fast) if fast == oracle::naive_nms(&h, k) => {}
                Ok(_) => {
                    failure = Some(format!("NMS differs from the window-max scan on a {dims} heatmap, kernel {k}"));
                    break 'outer;
                }
                Err(e) => {
                    failure = Some(format!("NMS failed on kernel {k}: {e}"));
                    break 'outer;
                }
            }
        }
    }
    outcome("nms_oracle", n, failure)
}

fn check_grouping(cfg: &SelftestConfig, rng: &mut ChaCha8Rng) -> CheckOutcome {
    let mut failure = None;
    for i in 0..cfg.cases {
        let dims = Dims::new(16, 16).unwrap();
        let (centers, offsets, mask) = random_grouping_case(rng, dims);
        let fast = group_pixels(&centers, &offsets, &mask);
        if fast.as_ref().ok() != Some(&oracle::naive_group(&centers, &offsets, &mask)) {
            failure = Some(format!("grouping differs from the linear scan in case {i}"));
            break;
        }
    }
    outcome("grouping_oracle", cfg.cases, failure)
}

fn check_round_trip(cfg: &SelftestConfig, spec: &DatasetSpec) -> CheckOutcome {
    let mut failure = None;
    for s in 0..5 {
        let seed = cfg.seed.wrapping_add(s);
        let dims = Dims::new(64 + 16 * s as usize, 96).unwrap();
        let gt = random_scene(seed, dims, 4 + 3 * s as usize, spec);
        match round_trip_pq(&gt, spec) {
            Ok(r) if r.all.pq == 1.0 => {}
            Ok(r) => {
                failure = Some(format!("scene seed {seed}: PQ {} instead of 1", r.all.pq));
                break;
            }
            Err(e) => {
                failure = Some(format!("scene seed {seed}: {e}"));
                break;
            }
        }
    }
    outcome("round_trip", 5, failure)
}

fn check_gradients(cfg: &SelftestConfig) -> CheckOutcome {
    let n = 5;
    let mut failure = None;
    for s in 0..n as u64 {
        let seed = cfg.seed.wrapping_add(s);
        for (name, g) in [
            ("cross-entropy", oracle::gradient_check_ce(seed, 0.15)),
            ("mse", oracle::gradient_check_mse(seed)),
            ("l1", oracle::gradient_check_l1(seed)),
        ] {
            if !(g.max_rel_error < 1e-4) || g.compared == 0 {
                failure = Some(format!(
                    "{name} seed {seed}: max relative error {:.3e} over {} coordinates",
                    g.max_rel_error, g.compared
                ));
            }
        }
    }
    outcome("gradients", 3 * n, failure)
}

fn random_pair(rng: &mut ChaCha8Rng, spec: &DatasetSpec) -> (LabelMap, LabelMap) {
    let dims = Dims::new(rng.random_range(1..12), rng.random_range(1..12)).unwrap();
    let div = spec.label_divisor();
    let cats: Vec<u32> = spec.categories().iter().map(|c| c.id).take(4).collect();
    let pick = |rng: &mut ChaCha8Rng| -> LabelMap {
        let split = rng.random_range(0..=dims.width);
        let a = cats[rng.random_range(0..cats.len())] * div + rng.random_range(0..3);
        let b = cats[rng.random_range(0..cats.len())] * div + rng.random_range(0..3);
        Grid::from_fn(dims, |_, c| {
            if rng.random_bool(0.1) {
                spec.void_id()
            } else if c < split {
                a
            } else {
                b
            }
        })
    };
    (pick(rng), pick(rng))
}

fn check_matching(cfg: &SelftestConfig, rng: &mut ChaCha8Rng, spec: &DatasetSpec) -> (CheckOutcome, CheckOutcome) {
    let mut match_failure = None;
    let mut pq_failure = None;
    for i in 0..cfg.cases {
        let (p, g) = random_pair(rng, spec);
        let fast = match match_segments(&p, &g, spec) {
            Ok(m) => m,
            Err(e) => {
                match_failure = Some(e.to_string());
                break;
            }
        };
        let mut fast: Vec<(u32, u32, f64)> = fast.into_iter().map(|m| (m.pred, m.gt, m.iou)).collect();
        fast.sort_by_key(|m| (m.0, m.1));
        if match_failure.is_none() && fast != oracle::naive_match(&p, &g, spec) {
            match_failure = Some(format!("matching differs from the pairwise scan in case {i}"));
        }
        if let Ok(r) = panoptic_quality(&p, &g, spec) {
            if pq_failure.is_none() && r.per_category.iter().any(|c| c.pq != c.sq * c.rq) {
                pq_failure = Some(format!("PQ != SQ * RQ in case {i}"));
            }
        }
    }
    (
        outcome("match_oracle", cfg.cases, match_failure),
        outcome("pq_identity", cfg.cases, pq_failure),
    )
}

pub fn run_selftest(cfg: &SelftestConfig, spec: &DatasetSpec) -> SelftestReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = vec![
        check_nms(cfg, &mut rng),
        check_grouping(cfg, &mut rng),
        check_round_trip(cfg, spec),
        check_gradients(cfg),
    ];
    let (m, pq) = check_matching(cfg, &mut rng, spec);
    checks.push(m);
    checks.push(pq);
    for c in &checks {
        log::info!("selftest {}: {} ({})", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
    }
    SelftestReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}
