//! Brute-force reference implementations.
//!
//! Nothing here calls into the optimised code paths; each function is the
//! literal definition of the operation it checks, written for clarity over
//! speed. Used by the unit tests, the acceptance suite and `selftest`.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::{BoolGrid, DatasetSpec, Dims, Grid, Heatmap, InstanceCenter, LabelMap, OffsetField};

/// Window-max scan: a pixel survives iff no pixel in its clipped window is larger.
pub fn naive_nms(heatmap: &Heatmap, kernel: usize) -> Heatmap {
    let dims = heatmap.dims();
    let rad = (kernel / 2) as isize;
    Grid::from_fn(dims, |r, c| {
        let v = heatmap[(r, c)];
        for dr in -rad..=rad {
            for dc in -rad..=rad {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= dims.height as isize || cc >= dims.width as isize {
                    continue;
                }
                if heatmap[(rr as usize, cc as usize)] > v {
                    return 0.0;
                }
            }
        }
        v
    })
}

/// Per-pixel linear scan over all centers; first minimum wins.
pub fn naive_group(centers: &[InstanceCenter], offsets: &OffsetField, mask: &BoolGrid) -> LabelMap {
    Grid::from_fn(offsets.dims(), |r, c| {
        if !mask[(r, c)] {
            return 0;
        }
        let o = offsets[(r, c)];
        let qr = r as f64 + o[0] as f64;
        let qc = c as f64 + o[1] as f64;
        let mut best = f64::INFINITY;
        let mut best_k = None;
        for (k, ctr) in centers.iter().enumerate() {
            let dr = ctr.row - qr;
            let dc = ctr.col - qc;
            let d2 = dr * dr + dc * dc;
            if d2 < best || (best_k.is_none() && d2 == best) {
                best = d2;
                best_k = Some(k);
            }
        }
        best_k.map_or(0, |k| k as u32 + 1)
    })
}

/// Segment id used for matching: stuff collapses to one id per category,
/// VOID and unknown categories give `None`.
fn segment_key(id: u32, spec: &DatasetSpec) -> Option<u32> {
    let div = spec.label_divisor();
    let cat = id / div;
    if spec.is_stuff(cat) {
        Some(cat * div)
    } else if spec.is_thing(cat) {
        Some(id)
    } else {
        None
    }
}

/// All same-category pairs with IoU > 0.5, excluding predictions lying mostly
/// on VOID, by rescanning the whole image for every pair. Sorted by
/// `(pred, gt)`.
pub fn naive_match(pred: &LabelMap, gt: &LabelMap, spec: &DatasetSpec) -> Vec<(u32, u32, f64)> {
    let div = spec.label_divisor();
    let pred_ids: BTreeSet<u32> = pred.as_slice().iter().filter_map(|&v| segment_key(v, spec)).collect();
    let gt_ids: BTreeSet<u32> = gt.as_slice().iter().filter_map(|&v| segment_key(v, spec)).collect();
    let mut out = Vec::new();
    for &p in &pred_ids {
        let mut area = 0u64;
        let mut on_void = 0u64;
        for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
            if segment_key(a, spec) == Some(p) {
                area += 1;
                if segment_key(b, spec).is_none() {
                    on_void += 1;
                }
            }
        }
        if on_void * 2 > area {
            continue;
        }
        for &g in &gt_ids {
            if p / div != g / div {
                continue;
            }
            let mut inter = 0u64;
            let mut union = 0u64;
            for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
                let in_p = segment_key(a, spec) == Some(p);
                let in_g = segment_key(b, spec) == Some(g);
                let void = segment_key(b, spec).is_none();
                if in_p && in_g {
                    inter += 1;
                }
                if in_g || (in_p && !void) {
                    union += 1;
                }
            }
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                out.push((p, g, iou));
            }
        }
    }
    out
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Summary of one analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub compared: usize,
    pub skipped: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps exact zeros comparable.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub const FD_STEP: f64 = 1e-4;

fn compare(analytic: &[f64], numeric: &[f64], skip: impl Fn(usize) -> bool) -> GradCheck {
    let mut out = GradCheck {
        max_rel_error: 0.0,
        compared: 0,
        skipped: 0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        if skip(i) {
            out.skipped += 1;
            continue;
        }
        out.compared += 1;
        out.max_rel_error = out.max_rel_error.max(relative_error(a, n));
    }
    out
}

/// Naive weighted cross-entropy per pixel, straight from the softmax.
fn naive_ce_terms(logits: &[f64], labels: &[u32], weights: &[f64], channels: usize, ignore: u32) -> Vec<Option<f64>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l == ignore {
                return None;
            }
            let px = &logits[i * channels..(i + 1) * channels];
            let m = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = px.iter().map(|v| (v - m).exp()).sum();
            Some(weights[i] * -((px[l as usize] - m).exp() / z).ln())
        })
        .collect()
}

/// Pixels kept by hard top-K selection (stable descending sort).
fn naive_topk(terms: &[Option<f64>], fraction: f64) -> BTreeSet<usize> {
    let mut v: Vec<(usize, f64)> = terms.iter().enumerate().filter_map(|(i, t)| t.map(|t| (i, t))).collect();
    let k = ((fraction * v.len() as f64).ceil() as usize).max(1).min(v.len());
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    v[..k].iter().map(|p| p.0).collect()
}

/// Random 8x8 bootstrapped cross-entropy instance checked against central
/// differences. Coordinates whose perturbation changes the selected pixel
/// set are skipped (the loss is not differentiable there).
pub fn gradient_check_ce(seed: u64, fraction: f64) -> GradCheck {
    use crate::losses::weighted_bootstrapped_ce;
    use crate::types::Volume;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::new(8, 8).unwrap();
    let channels = 5;
    let ignore = 255;
    let logits: Vec<f64> = (0..dims.len() * channels).map(|_| rng.random_range(-4.0..4.0)).collect();
    let labels: Vec<u32> = (0..dims.len())
        .map(|_| if rng.random_bool(0.1) { ignore } else { rng.random_range(0..channels as u32) })
        .collect();
    let weights: Vec<f64> = (0..dims.len()).map(|_| if rng.random_bool(0.2) { 3.0 } else { 1.0 }).collect();

    let label_map = LabelMap::from_vec(dims, labels.clone()).unwrap();
    let weight_map = Grid::from_vec(dims, weights.clone()).unwrap();
    let eval = |x: &[f64]| {
        let v = Volume::from_vec(dims, channels, x.to_vec()).unwrap();
        weighted_bootstrapped_ce(&v, &label_map, &weight_map, ignore, fraction).unwrap()
    };
    let analytic = eval(&logits).gradient.unwrap();
    let numeric = central_difference(|x| eval(x).value, &logits, FD_STEP);

    let base = naive_topk(&naive_ce_terms(&logits, &labels, &weights, channels, ignore), fraction);
    let unstable = |i: usize| {
        let mut probe = logits.clone();
        [FD_STEP, -FD_STEP].iter().any(|&h| {
            probe[i] = logits[i] + h;
            naive_topk(&naive_ce_terms(&probe, &labels, &weights, channels, ignore), fraction) != base
        })
    };
    compare(&analytic, &numeric, unstable)
}

/// Random 8x8 MSE instance checked against central differences.
pub fn gradient_check_mse(seed: u64) -> GradCheck {
    use crate::losses::mse_heatmap_loss;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::new(8, 8).unwrap();
    let pred: Vec<f64> = (0..dims.len()).map(|_| rng.random_range(-0.5..1.5)).collect();
    let target = Grid::from_fn(dims, |_, _| rng.random_range(0.0..1.0f64));
    let eval = |x: &[f64]| mse_heatmap_loss(&Grid::from_vec(dims, x.to_vec()).unwrap(), &target).unwrap();
    let analytic = eval(&pred).gradient.unwrap();
    let numeric = central_difference(|x| eval(x).value, &pred, FD_STEP);
    compare(&analytic, &numeric, |_| false)
}

/// Random 8x8 L1 offset instance checked against central differences.
/// Coordinates within one step of a sign change are skipped.
pub fn gradient_check_l1(seed: u64) -> GradCheck {
    use crate::losses::l1_offset_loss;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::new(8, 8).unwrap();
    let pred: Vec<f64> = (0..2 * dims.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
    let target: Vec<[f64; 2]> = (0..dims.len())
        .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
        .collect();
    let target = Grid::from_vec(dims, target).unwrap();
    let mask = Grid::from_fn(dims, |_, _| rng.random_bool(0.6));
    let to_grid = |x: &[f64]| Grid::from_vec(dims, x.chunks_exact(2).map(|p| [p[0], p[1]]).collect()).unwrap();
    let eval = |x: &[f64]| l1_offset_loss(&to_grid(x), &target, &mask).unwrap();
    let analytic = eval(&pred).gradient.unwrap();
    let numeric = central_difference(|x| eval(x).value, &pred, FD_STEP);
    let near_kink = |i: usize| {
        let t = target.as_slice()[i / 2][i % 2];
        (pred[i] - t).abs() <= FD_STEP
    };
    compare(&analytic, &numeric, near_kink)
}
