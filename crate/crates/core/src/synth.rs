//! Seeded synthetic panoptic scenes for tests, the self-test and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::targets::{compute_mass_centers, encode_center_heatmap, encode_offsets, semantic_labels, TargetParams};
use crate::types::{Dims, DatasetSpec, Heatmap, InstanceCenter, LabelMap, OffsetField};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub n_instances: usize,
    /// Smallest area an accepted instance may keep after later overlaps.
    pub min_instance_area: u64,
    /// Smallest Euclidean distance between rounded mass centers.
    pub min_center_distance: f64,
    /// Upper bound on rectangular VOID patches painted before the things.
    pub max_void_patches: usize,
    pub max_attempts_per_instance: usize,
    /// Distinct stuff categories that must stay visible (capped by the spec).
    pub min_stuff_categories: usize,
}

impl SceneParams {
    pub fn with_instances(n_instances: usize) -> Self {
        SceneParams {
            n_instances,
            min_instance_area: 12,
            min_center_distance: 3.0,
            max_void_patches: 2,
            max_attempts_per_instance: 60,
            min_stuff_categories: 3,
        }
    }
}

/// A random scene with `n_instances` thing segments (fewer only if the
/// image cannot fit them) over a Voronoi partition of stuff categories.
pub fn random_scene(seed: u64, dims: Dims, n_instances: usize, spec: &DatasetSpec) -> LabelMap {
    random_scene_with(seed, dims, &SceneParams::with_instances(n_instances), spec)
}

pub fn random_scene_with(seed: u64, dims: Dims, params: &SceneParams, spec: &DatasetSpec) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let div = spec.label_divisor();
    let stuff: Vec<u32> = spec.categories().iter().filter(|c| !c.is_thing).map(|c| c.id).collect();
    let things: Vec<u32> = spec.categories().iter().filter(|c| c.is_thing).map(|c| c.id).collect();
    let (h, w) = (dims.height, dims.width);

    let mut map = if stuff.is_empty() {
        LabelMap::filled(dims, spec.void_id())
    } else {
        let n_sites = stuff.len().clamp(1, 3) + rng.random_range(0..3);
        let sites: Vec<(f64, f64, u32)> = (0..n_sites)
            .map(|i| {
                let cat = if i < stuff.len().min(3) {
                    stuff[i]
                } else {
                    stuff[rng.random_range(0..stuff.len())]
                };
                (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), cat)
            })
            .collect();
        LabelMap::from_fn(dims, |r, c| {
            let mut best = (f64::INFINITY, 0);
            for &(sr, sc, cat) in &sites {
                let d = (r as f64 - sr).powi(2) + (c as f64 - sc).powi(2);
                if d < best.0 {
                    best = (d, cat);
                }
            }
            best.1 * div
        })
    };

    let min_stuff = params.min_stuff_categories.min(stuff_categories(&map, spec));
    for _ in 0..rng.random_range(0..=params.max_void_patches) {
        let ph = rng.random_range(1..=(h / 6).max(1));
        let pw = rng.random_range(1..=(w / 6).max(1));
        let r0 = rng.random_range(0..=h - ph);
        let c0 = rng.random_range(0..=w - pw);
        let mut candidate = map.clone();
        for r in r0..r0 + ph {
            for c in c0..c0 + pw {
                candidate[(r, c)] = spec.void_id();
            }
        }
        if stuff_categories(&candidate, spec) >= min_stuff {
            map = candidate;
        }
    }

    if things.is_empty() {
        return map;
    }
    let mut next_instance = vec![1u32; spec.num_label_slots()];
    let max_extent = (h.min(w) / 3).max(3);
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < params.n_instances && attempts < params.n_instances * params.max_attempts_per_instance {
        attempts += 1;
        let cat = things[rng.random_range(0..things.len())];
        let id = cat * div + next_instance[cat as usize];
        if next_instance[cat as usize] >= div {
            continue;
        }
        let eh = rng.random_range(2..=max_extent) as f64;
        let ew = rng.random_range(2..=max_extent) as f64;
        let cr = rng.random_range(0.0..h as f64);
        let cc = rng.random_range(0.0..w as f64);
        let ellipse = rng.random_bool(0.5);
        let mut candidate = map.clone();
        let r0 = (cr - eh).floor().max(0.0) as usize;
        let r1 = ((cr + eh).ceil() as usize).min(h - 1);
        let c0 = (cc - ew).floor().max(0.0) as usize;
        let c1 = ((cc + ew).ceil() as usize).min(w - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let (dr, dc) = ((r as f64 - cr) / eh, (c as f64 - cc) / ew);
                let inside = if ellipse {
                    dr * dr + dc * dc <= 1.0
                } else {
                    dr.abs() <= 1.0 && dc.abs() <= 1.0
                };
                if inside {
                    candidate[(r, c)] = id;
                }
            }
        }
        if scene_is_acceptable(&candidate, spec, params)
            && instance_count(&candidate, spec) == accepted + 1
            && stuff_categories(&candidate, spec) >= min_stuff
        {
            map = candidate;
            next_instance[cat as usize] += 1;
            accepted += 1;
        }
    }
    map
}

fn stuff_categories(map: &LabelMap, spec: &DatasetSpec) -> usize {
    let mut seen = vec![false; spec.num_label_slots()];
    for &id in map.as_slice() {
        if let Some(cat) = spec.panoptic_category(id).filter(|&c| spec.is_stuff(c)) {
            seen[cat as usize] = true;
        }
    }
    seen.into_iter().filter(|&b| b).count()
}

fn instance_count(map: &LabelMap, spec: &DatasetSpec) -> usize {
    compute_mass_centers(map, spec).len()
}

fn scene_is_acceptable(map: &LabelMap, spec: &DatasetSpec, params: &SceneParams) -> bool {
    let centers = compute_mass_centers(map, spec);
    if centers.iter().any(|m| m.area < params.min_instance_area) {
        return false;
    }
    let rounded: Vec<InstanceCenter> = centers.iter().map(|m| m.center.rounded()).collect();
    let min_sq = params.min_center_distance * params.min_center_distance;
    for (i, a) in rounded.iter().enumerate() {
        for b in &rounded[i + 1..] {
            if (a.row - b.row).powi(2) + (a.col - b.col).powi(2) < min_sq {
                return false;
            }
        }
    }
    true
}

/// Network-shaped inputs derived from a groundtruth scene.
#[derive(Debug, Clone)]
pub struct BenchInputs {
    pub groundtruth: LabelMap,
    pub semantic: LabelMap,
    pub heatmap: Heatmap,
    pub offsets: OffsetField,
}

/// Large inputs with `n_centers` thing instances, one per cell of a grid
/// tiled over the image.
pub fn bench_inputs(dims: Dims, n_centers: usize, seed: u64, spec: &DatasetSpec) -> BenchInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let div = spec.label_divisor();
    let stuff: Vec<u32> = spec.categories().iter().filter(|c| !c.is_thing).map(|c| c.id).collect();
    let things: Vec<u32> = spec.categories().iter().filter(|c| c.is_thing).map(|c| c.id).collect();
    let (h, w) = (dims.height, dims.width);
    let band = (h / stuff.len().max(1)).max(1);
    let mut gt = LabelMap::from_fn(dims, |r, _| {
        stuff.get((r / band).min(stuff.len().saturating_sub(1))).map_or(spec.void_id(), |&s| s * div)
    });

    if !things.is_empty() && n_centers > 0 {
        let cols = ((n_centers as f64 * w as f64 / h as f64).sqrt().ceil() as usize).max(1);
        let rows = n_centers.div_ceil(cols);
        let (cell_h, cell_w) = (h as f64 / rows as f64, w as f64 / cols as f64);
        let mut next_instance = vec![1u32; spec.num_label_slots()];
        for k in 0..n_centers {
            let (gr, gc) = (k / cols, k % cols);
            let cat = things[rng.random_range(0..things.len())];
            let inst = next_instance[cat as usize];
            next_instance[cat as usize] += 1;
            let id = cat * div + inst;
            let cr = (gr as f64 + rng.random_range(0.4..0.6)) * cell_h;
            let cc = (gc as f64 + rng.random_range(0.4..0.6)) * cell_w;
            let eh = (cell_h * rng.random_range(0.2..0.35)).max(1.0);
            let ew = (cell_w * rng.random_range(0.2..0.35)).max(1.0);
            let r0 = (cr - eh).floor().max(0.0) as usize;
            let r1 = ((cr + eh).ceil() as usize).min(h - 1);
            let c0 = (cc - ew).floor().max(0.0) as usize;
            let c1 = ((cc + ew).ceil() as usize).min(w - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let (dr, dc) = ((r as f64 - cr) / eh, (c as f64 - cc) / ew);
                    if dr * dr + dc * dc <= 1.0 {
                        gt[(r, c)] = id;
                    }
                }
            }
        }
    }

    let centers: Vec<InstanceCenter> = compute_mass_centers(&gt, spec).iter().map(|m| m.center).collect();
    let heatmap = encode_center_heatmap(
        &centers,
        dims,
        &TargetParams {
            round_centers: true,
            ..TargetParams::default()
        },
    );
    let (offsets, _) = encode_offsets(&gt, spec);
    BenchInputs {
        semantic: semantic_labels(&gt, spec),
        groundtruth: gt,
        heatmap,
        offsets,
    }
}
