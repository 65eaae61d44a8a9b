//! Inference-time fusion: center extraction from the heatmap, offset-based
//! pixel grouping, majority-vote merging with semantic labels, small-stuff
//! filtering and instance scoring.
//!
//! Every stage is integer or comparison based, so the row-parallel code
//! paths produce the same bytes as a sequential run.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{
    decode_panoptic_id, ensure_same_dims, BoolGrid, DatasetSpec, Heatmap, InstanceCenter,
    LabelMap, OffsetField, ScoreVolume, ShapeError,
};

/// How an instance's confidence is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Center heatmap value.
    Objectness,
    /// Mean probability of the voted category over the instance mask.
    Class,
    #[default]
    Product,
}

impl ScoreMode {
    pub const ALL: [ScoreMode; 3] = [ScoreMode::Objectness, ScoreMode::Class, ScoreMode::Product];

    pub fn needs_class_score(self) -> bool {
        !matches!(self, ScoreMode::Objectness)
    }

    pub fn combine(self, objectness: f64, class: f64) -> f64 {
        match self {
            ScoreMode::Objectness => objectness,
            ScoreMode::Class => class,
            ScoreMode::Product => objectness * class,
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Objectness => "objectness",
            ScoreMode::Class => "class",
            ScoreMode::Product => "product",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "objectness" => Ok(ScoreMode::Objectness),
            "class" => Ok(ScoreMode::Class),
            "product" => Ok(ScoreMode::Product),
            other => Err(format!("unknown score mode `{other}`")),
        }
    }
}

/// What counts as one stuff segment when filtering by area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StuffSegments {
    /// All pixels of a stuff category form one segment.
    #[default]
    Category,
    /// Each 4-connected component of a stuff category is its own segment.
    Component,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostprocParams {
    pub nms_kernel: usize,
    pub center_threshold: f32,
    pub top_k: usize,
    /// Overrides the dataset's stuff area threshold when set.
    pub stuff_area_threshold: Option<u64>,
    pub stuff_segments: StuffSegments,
    pub score_mode: ScoreMode,
}

impl Default for PostprocParams {
    fn default() -> Self {
        PostprocParams {
            nms_kernel: 7,
            center_threshold: 0.1,
            top_k: 200,
            stuff_area_threshold: None,
            stuff_segments: StuffSegments::Category,
            score_mode: ScoreMode::Product,
        }
    }
}

impl PostprocParams {
    pub fn check(&self, spec: &DatasetSpec) -> Result<(), PostprocError> {
        if self.nms_kernel % 2 == 0 {
            return Err(PostprocError::EvenKernel(self.nms_kernel));
        }
        if self.top_k == 0 {
            return Err(PostprocError::InvalidParams("top_k must be at least 1".into()));
        }
        if !(self.center_threshold >= 0.0) {
            return Err(PostprocError::InvalidParams(format!(
                "center_threshold must be non-negative, got {}",
                self.center_threshold
            )));
        }
        if self.top_k as u64 >= spec.label_divisor() as u64 {
            return Err(PostprocError::TooManyInstances {
                top_k: self.top_k,
                divisor: spec.label_divisor(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PostprocError {
    #[error("NMS kernel must be odd and positive, got {0}")]
    EvenKernel(usize),
    #[error("invalid post-processing parameters: {0}")]
    InvalidParams(String),
    #[error("top_k {top_k} instances cannot be encoded below label divisor {divisor}")]
    TooManyInstances { top_k: usize, divisor: u32 },
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("score mode `{0}` needs per-pixel class probabilities")]
    MissingProbabilities(ScoreMode),
    #[error("category {category} has no probability channel (volume has {channels})")]
    ChannelOutOfRange { category: u32, channels: usize },
    #[error("{expected} center scores required, got {actual}")]
    CenterScores { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    /// Instance part of the panoptic id; `1 + ` the center's rank.
    pub instance_index: u32,
    pub category: u32,
    pub center: InstanceCenter,
    pub area: u64,
    pub score: f64,
}

impl InstanceRecord {
    pub fn panoptic_id(&self, divisor: u32) -> u32 {
        self.category * divisor + self.instance_index
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanopticResult {
    pub panoptic: LabelMap,
    pub instances: Vec<InstanceRecord>,
}

impl PanopticResult {
    /// Category per pixel; VOID becomes the ignore label.
    pub fn semantic(&self, spec: &DatasetSpec) -> LabelMap {
        self.panoptic.map(|&id| {
            spec.panoptic_category(id)
                .unwrap_or_else(|| spec.ignore_label())
        })
    }
}

/// Keeps pixels equal to the maximum of the `kernel`x`kernel` window centred
/// on them (window clipped at the borders) and zeroes the rest.
pub fn keypoint_nms(heatmap: &Heatmap, kernel: usize) -> Result<Heatmap, PostprocError> {
    if kernel % 2 == 0 {
        return Err(PostprocError::EvenKernel(kernel));
    }
    let dims = heatmap.dims();
    let (h, w) = (dims.height, dims.width);
    let rad = kernel / 2;
    let src = heatmap.as_slice();

    // Separable max filter: horizontal pass, then vertical.
    let mut row_max = vec![0f32; dims.len()];
    row_max
        .par_chunks_mut(w)
        .zip(src.par_chunks(w))
        .for_each(|(out, row)| {
            for (c, slot) in out.iter_mut().enumerate() {
                let lo = c.saturating_sub(rad);
                let hi = (c + rad).min(w - 1);
                *slot = row[lo..=hi].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            }
        });

    let mut out = vec![0f32; dims.len()];
    out.par_chunks_mut(w).enumerate().for_each(|(r, out_row)| {
        let lo = r.saturating_sub(rad);
        let hi = (r + rad).min(h - 1);
        let mut win = row_max[lo * w..(lo + 1) * w].to_vec();
        for rr in lo + 1..=hi {
            for (m, &v) in win.iter_mut().zip(&row_max[rr * w..(rr + 1) * w]) {
                *m = m.max(v);
            }
        }
        let row = &src[r * w..(r + 1) * w];
        for ((o, &v), &m) in out_row.iter_mut().zip(row).zip(&win) {
            *o = if v == m { v } else { 0.0 };
        }
    });
    Ok(Heatmap::from_vec(dims, out)?)
}

/// Pixels of an NMS-filtered heatmap strictly above `threshold`, highest
/// first (ties in row-major order), truncated to `top_k`.
pub fn extract_centers(nms_heatmap: &Heatmap, threshold: f32, top_k: usize) -> Vec<InstanceCenter> {
    let dims = nms_heatmap.dims();
    let mut found: Vec<(usize, f32)> = nms_heatmap
        .as_slice()
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v > threshold)
        .map(|(i, &v)| (i, v))
        .collect();
    found.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    found.truncate(top_k);
    found
        .into_iter()
        .map(|(i, v)| {
            let (r, c) = dims.coords(i);
            InstanceCenter::new(r as f64, c as f64, v as f64)
        })
        .collect()
}

/// True where the semantic label is a thing category.
pub fn thing_mask_from_semantic(semantic: &LabelMap, spec: &DatasetSpec) -> BoolGrid {
    semantic.map(|&l| spec.is_thing(l))
}

/// Uniform bucket grid over the center bounding box for exact nearest-center
/// queries. Results equal a linear scan that keeps the lowest index on ties.
struct CenterIndex<'a> {
    centers: &'a [InstanceCenter],
    origin: (f64, f64),
    cell: f64,
    rows: usize,
    cols: usize,
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl<'a> CenterIndex<'a> {
    fn new(centers: &'a [InstanceCenter]) -> Self {
        debug_assert!(!centers.is_empty());
        let (mut r0, mut r1, mut c0, mut c1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for c in centers {
            r0 = r0.min(c.row);
            r1 = r1.max(c.row);
            c0 = c0.min(c.col);
            c1 = c1.max(c.col);
        }
        let area = (r1 - r0 + 1.0) * (c1 - c0 + 1.0);
        let cell = (area / centers.len() as f64).sqrt().max(1.0);
        let rows = ((r1 - r0) / cell) as usize + 1;
        let cols = ((c1 - c0) / cell) as usize + 1;
        let mut index = CenterIndex {
            centers,
            origin: (r0, c0),
            cell,
            rows,
            cols,
            starts: Vec::new(),
            items: Vec::new(),
        };
        let slot = |c: &InstanceCenter| {
            let (i, j) = index.cell_of(c.row, c.col);
            i * cols + j
        };
        let mut counts = vec![0u32; rows * cols + 1];
        for c in centers {
            counts[slot(c) + 1] += 1;
        }
        for k in 1..counts.len() {
            counts[k] += counts[k - 1];
        }
        let mut fill = counts.clone();
        let mut items = vec![0u32; centers.len()];
        for (k, c) in centers.iter().enumerate() {
            let s = slot(c);
            items[fill[s] as usize] = k as u32;
            fill[s] += 1;
        }
        index.starts = counts;
        index.items = items;
        index
    }

    fn cell_of(&self, row: f64, col: f64) -> (usize, usize) {
        let i = ((row - self.origin.0) / self.cell).floor();
        let j = ((col - self.origin.1) / self.cell).floor();
        (
            (i.max(0.0) as usize).min(self.rows - 1),
            (j.max(0.0) as usize).min(self.cols - 1),
        )
    }

    /// Lower bound on the distance from `q` to any point in a cell at
    /// Chebyshev ring `>= ring` around `(ci, cj)`; `None` when no such cell
    /// exists.
    fn ring_bound(&self, q: (f64, f64), ci: usize, cj: usize, ring: usize) -> Option<f64> {
        let inner = ring - 1;
        let mut bound = f64::INFINITY;
        let mut any = false;
        // Cells with row index < ci - inner.
        if ci > inner {
            any = true;
            let edge = self.origin.0 + (ci - inner) as f64 * self.cell;
            bound = bound.min((q.0 - edge).max(0.0));
        }
        if ci + inner + 1 < self.rows {
            any = true;
            let edge = self.origin.0 + (ci + inner + 1) as f64 * self.cell;
            bound = bound.min((edge - q.0).max(0.0));
        }
        if cj > inner {
            any = true;
            let edge = self.origin.1 + (cj - inner) as f64 * self.cell;
            bound = bound.min((q.1 - edge).max(0.0));
        }
        if cj + inner + 1 < self.cols {
            any = true;
            let edge = self.origin.1 + (cj + inner + 1) as f64 * self.cell;
            bound = bound.min((edge - q.1).max(0.0));
        }
        // Slack for rounding in the bucket assignment.
        any.then(|| (bound - 1e-9 * (1.0 + self.cell)).max(0.0))
    }

    fn visit(&self, i: usize, j: usize, q: (f64, f64), best: &mut Option<(f64, u32)>) {
        let s = i * self.cols + j;
        for &k in &self.items[self.starts[s] as usize..self.starts[s + 1] as usize] {
            let c = &self.centers[k as usize];
            let d2 = squared_distance(c, q.0, q.1);
            consider(best, d2, k);
        }
    }

    fn nearest(&self, qr: f64, qc: f64) -> Option<u32> {
        let q = (qr, qc);
        let (ci, cj) = self.cell_of(qr, qc);
        let mut best: Option<(f64, u32)> = None;
        self.visit(ci, cj, q, &mut best);
        let mut ring = 1;
        while let Some(bound) = self.ring_bound(q, ci, cj, ring) {
            if let Some((d2, _)) = best {
                if bound * bound > d2 {
                    break;
                }
            }
            let (i0, i1) = (ci as isize - ring as isize, ci + ring);
            let (j0, j1) = (cj as isize - ring as isize, cj + ring);
            for i in i0.max(0) as usize..=i1.min(self.rows - 1) {
                let edge_row = i as isize == i0 || i == i1;
                if edge_row {
                    for j in j0.max(0) as usize..=j1.min(self.cols - 1) {
                        self.visit(i, j, q, &mut best);
                    }
                } else {
                    if j0 >= 0 {
                        self.visit(i, j0 as usize, q, &mut best);
                    }
                    if j1 < self.cols {
                        self.visit(i, j1, q, &mut best);
                    }
                }
            }
            ring += 1;
        }
        best.map(|(_, k)| k)
    }
}

#[inline]
pub(crate) fn squared_distance(c: &InstanceCenter, qr: f64, qc: f64) -> f64 {
    let dr = c.row - qr;
    let dc = c.col - qc;
    dr * dr + dc * dc
}

/// Argmin update: smaller distance wins, equal distance keeps the lower index,
/// NaN never wins.
#[inline]
pub(crate) fn consider(best: &mut Option<(f64, u32)>, d2: f64, k: u32) {
    if d2.is_nan() {
        return;
    }
    match *best {
        Some((bd, bk)) if d2 > bd || (d2 == bd && k >= bk) => {}
        _ => *best = Some((d2, k)),
    }
}

/// Assigns every thing pixel to the nearest center after moving it by its
/// offset. Output holds `1 + center index`, or 0 at non-thing pixels and when
/// there are no centers.
pub fn group_pixels(
    centers: &[InstanceCenter],
    offsets: &OffsetField,
    thing_mask: &BoolGrid,
) -> Result<LabelMap, PostprocError> {
    ensure_same_dims(offsets.dims(), thing_mask.dims())?;
    let dims = offsets.dims();
    let w = dims.width;
    let mut out = vec![0u32; dims.len()];
    if centers.is_empty() {
        return Ok(LabelMap::from_vec(dims, out)?);
    }
    let index = CenterIndex::new(centers);
    out.par_chunks_mut(w).enumerate().for_each(|(r, out_row)| {
        let offs = &offsets.as_slice()[r * w..(r + 1) * w];
        let mask = &thing_mask.as_slice()[r * w..(r + 1) * w];
        for (c, slot) in out_row.iter_mut().enumerate() {
            if !mask[c] {
                continue;
            }
            let qr = r as f64 + offs[c][0] as f64;
            let qc = c as f64 + offs[c][1] as f64;
            if let Some(k) = index.nearest(qr, qc) {
                *slot = k + 1;
            }
        }
    });
    Ok(LabelMap::from_vec(dims, out)?)
}

/// Labels each grouped instance with the most frequent thing category among
/// its pixels (ties go to the smaller id) and writes the panoptic map.
///
/// Stuff pixels keep their category with instance 0. Ungrouped thing pixels,
/// ignored pixels and unknown labels become VOID. `centers[k]` describes
/// instance index `k + 1`.
pub fn merge_panoptic(
    semantic: &LabelMap,
    instance_ids: &LabelMap,
    centers: &[InstanceCenter],
    spec: &DatasetSpec,
) -> Result<PanopticResult, PostprocError> {
    ensure_same_dims(semantic.dims(), instance_ids.dims())?;
    let dims = semantic.dims();
    let divisor = spec.label_divisor();
    let n_inst = centers.len();
    if n_inst as u64 >= divisor as u64 {
        return Err(PostprocError::TooManyInstances {
            top_k: n_inst,
            divisor,
        });
    }
    if let Some(&bad) = instance_ids.as_slice().iter().find(|&&k| k as usize > n_inst) {
        return Err(PostprocError::InvalidParams(format!(
            "instance index {bad} exceeds the {n_inst} available centers"
        )));
    }

    // Dense slots for thing categories, ascending by id.
    let mut slot_of = vec![u32::MAX; spec.num_label_slots()];
    let mut thing_ids = Vec::new();
    for id in 0..spec.num_label_slots() as u32 {
        if spec.is_thing(id) {
            slot_of[id as usize] = thing_ids.len() as u32;
            thing_ids.push(id);
        }
    }
    let n_slots = thing_ids.len();
    let stride = n_slots + 1; // last column counts pixels

    let w = dims.width;
    let votes = semantic
        .as_slice()
        .par_chunks(w)
        .zip(instance_ids.as_slice().par_chunks(w))
        .fold(
            || vec![0u32; (n_inst + 1) * stride],
            |mut acc, (sem_row, inst_row)| {
                for (&l, &k) in sem_row.iter().zip(inst_row) {
                    if k == 0 {
                        continue;
                    }
                    let base = k as usize * stride;
                    acc[base + n_slots] += 1;
                    if let Some(&s) = slot_of.get(l as usize) {
                        if s != u32::MAX {
                            acc[base + s as usize] += 1;
                        }
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![0u32; (n_inst + 1) * stride],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );

    let mut category = vec![None; n_inst + 1];
    let mut instances = Vec::new();
    for k in 1..=n_inst {
        let row = &votes[k * stride..(k + 1) * stride];
        let area = row[n_slots];
        let mut best: Option<(usize, u32)> = None;
        for (s, &count) in row[..n_slots].iter().enumerate() {
            if count > 0 && best.is_none_or(|(_, b)| count > b) {
                best = Some((s, count));
            }
        }
        if let Some((s, _)) = best {
            let cat = thing_ids[s];
            category[k] = Some(cat);
            instances.push(InstanceRecord {
                instance_index: k as u32,
                category: cat,
                center: centers[k - 1],
                area: area as u64,
                score: centers[k - 1].score,
            });
        }
    }

    let void = spec.void_id();
    let mut panoptic = vec![0u32; dims.len()];
    panoptic
        .par_chunks_mut(w)
        .zip(semantic.as_slice().par_chunks(w))
        .zip(instance_ids.as_slice().par_chunks(w))
        .for_each(|((out, sem_row), inst_row)| {
            for ((o, &l), &k) in out.iter_mut().zip(sem_row).zip(inst_row) {
                *o = if k > 0 {
                    match category[k as usize] {
                        Some(cat) => cat * divisor + k,
                        None => void,
                    }
                } else if spec.is_stuff(l) {
                    l * divisor
                } else {
                    void
                };
            }
        });
    Ok(PanopticResult {
        panoptic: LabelMap::from_vec(dims, panoptic)?,
        instances,
    })
}

/// Rewrites stuff segments smaller than the dataset threshold to VOID.
pub fn filter_small_stuff(result: &PanopticResult, spec: &DatasetSpec) -> PanopticResult {
    filter_small_stuff_with(
        result,
        spec,
        spec.stuff_area_threshold(),
        StuffSegments::Category,
    )
}

pub fn filter_small_stuff_with(
    result: &PanopticResult,
    spec: &DatasetSpec,
    threshold: u64,
    segments: StuffSegments,
) -> PanopticResult {
    if threshold == 0 {
        return result.clone();
    }
    let divisor = spec.label_divisor();
    let void = spec.void_id();
    let is_stuff = |id: u32| spec.is_stuff(decode_panoptic_id(id, divisor).0);
    let mut panoptic = result.panoptic.clone();
    match segments {
        StuffSegments::Category => {
            let mut area = vec![0u64; spec.num_label_slots()];
            for &id in panoptic.as_slice() {
                if is_stuff(id) {
                    area[(id / divisor) as usize] += 1;
                }
            }
            for id in panoptic.as_mut_slice() {
                if is_stuff(*id) && area[(*id / divisor) as usize] < threshold {
                    *id = void;
                }
            }
        }
        StuffSegments::Component => {
            let (labels, sizes) = connected_components(&result.panoptic, is_stuff);
            for (id, &comp) in panoptic.as_mut_slice().iter_mut().zip(labels.as_slice()) {
                if comp != 0 && sizes[comp as usize] < threshold {
                    *id = void;
                }
            }
        }
    }
    PanopticResult {
        panoptic,
        instances: result.instances.clone(),
    }
}

/// 4-connected components of equal-valued pixels accepted by `keep`.
/// Component labels start at 1; `sizes[label]` is the pixel count.
pub fn connected_components(
    map: &LabelMap,
    keep: impl Fn(u32) -> bool,
) -> (LabelMap, Vec<u64>) {
    let dims = map.dims();
    let (h, w) = (dims.height, dims.width);
    let src = map.as_slice();
    let mut labels = vec![0u32; dims.len()];
    let mut sizes = vec![0u64];
    let mut stack = Vec::new();
    for start in 0..dims.len() {
        if labels[start] != 0 || !keep(src[start]) {
            continue;
        }
        let label = sizes.len() as u32;
        let value = src[start];
        let mut size = 0u64;
        labels[start] = label;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = (p / w, p % w);
            let mut push = |q: usize| {
                if labels[q] == 0 && src[q] == value {
                    labels[q] = label;
                    stack.push(q);
                }
            };
            if r > 0 {
                push(p - w);
            }
            if r + 1 < h {
                push(p + w);
            }
            if c > 0 {
                push(p - 1);
            }
            if c + 1 < w {
                push(p + 1);
            }
        }
        sizes.push(size);
    }
    (
        LabelMap::from_vec(dims, labels).expect("same dims"),
        sizes,
    )
}

/// Sums `evidence(pixel, category)` over each instance's pixels in row-major
/// order and divides by the instance area.
fn mean_class_evidence(
    result: &PanopticResult,
    spec: &DatasetSpec,
    mut evidence: impl FnMut(usize, u32) -> Result<f64, PostprocError>,
) -> Result<Vec<f64>, PostprocError> {
    let divisor = spec.label_divisor();
    let max_index = result
        .instances
        .iter()
        .map(|r| r.instance_index as usize)
        .max()
        .unwrap_or(0);
    let mut slot = vec![usize::MAX; max_index + 1];
    for (i, rec) in result.instances.iter().enumerate() {
        slot[rec.instance_index as usize] = i;
    }
    let mut sums = vec![0.0f64; result.instances.len()];
    let mut counts = vec![0u64; result.instances.len()];
    for (p, &id) in result.panoptic.as_slice().iter().enumerate() {
        let (cat, k) = decode_panoptic_id(id, divisor);
        if k == 0 || k as usize > max_index || !spec.is_thing(cat) {
            continue;
        }
        let s = slot[k as usize];
        if s == usize::MAX || result.instances[s].category != cat {
            continue;
        }
        sums[s] += evidence(p, cat)?;
        counts[s] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect())
}

/// Sets each instance's score from its center confidence and, when the mode
/// needs it, the mean probability of its voted category.
///
/// `center_scores[k - 1]` is the objectness of instance index `k`.
pub fn score_instances(
    result: &PanopticResult,
    spec: &DatasetSpec,
    center_scores: &[f64],
    semantic_probs: Option<&ScoreVolume>,
    mode: ScoreMode,
) -> Result<PanopticResult, PostprocError> {
    let class = if mode.needs_class_score() {
        let probs = semantic_probs.ok_or(PostprocError::MissingProbabilities(mode))?;
        ensure_same_dims(result.panoptic.dims(), probs.dims())?;
        let channels = probs.channels();
        mean_class_evidence(result, spec, |p, cat| {
            probs
                .pixel(p)
                .get(cat as usize)
                .map(|&v| v as f64)
                .ok_or(PostprocError::ChannelOutOfRange {
                    category: cat,
                    channels,
                })
        })?
    } else {
        vec![0.0; result.instances.len()]
    };
    apply_scores(result, center_scores, &class, mode)
}

fn apply_scores(
    result: &PanopticResult,
    center_scores: &[f64],
    class: &[f64],
    mode: ScoreMode,
) -> Result<PanopticResult, PostprocError> {
    let mut out = result.clone();
    for (rec, &cls) in out.instances.iter_mut().zip(class) {
        let k = rec.instance_index as usize;
        let objectness = *center_scores
            .get(k - 1)
            .ok_or(PostprocError::CenterScores {
                expected: k,
                actual: center_scores.len(),
            })?;
        rec.score = mode.combine(objectness, cls);
    }
    Ok(out)
}

/// Semantic evidence for [`panoptic_inference`].
#[derive(Debug, Clone, Copy)]
pub enum SemanticInput<'a> {
    /// Hard labels. Class scores use one-hot probabilities, i.e. the fraction
    /// of the instance whose label equals the voted category.
    Labels(&'a LabelMap),
    /// Per-pixel class probabilities; labels are the per-pixel argmax.
    Probabilities(&'a ScoreVolume),
}

/// The full fusion pipeline: NMS, center extraction, grouping, majority-vote
/// merge, small-stuff filtering and scoring.
pub fn panoptic_inference(
    semantic: SemanticInput<'_>,
    heatmap: &Heatmap,
    offsets: &OffsetField,
    spec: &DatasetSpec,
    params: &PostprocParams,
) -> Result<PanopticResult, PostprocError> {
    params.check(spec)?;
    let argmax;
    let labels = match semantic {
        SemanticInput::Labels(l) => l,
        SemanticInput::Probabilities(p) => {
            argmax = p.argmax();
            &argmax
        }
    };
    ensure_same_dims(labels.dims(), heatmap.dims())?;
    ensure_same_dims(labels.dims(), offsets.dims())?;

    let nms = keypoint_nms(heatmap, params.nms_kernel)?;
    let centers = extract_centers(&nms, params.center_threshold, params.top_k);
    let thing_mask = thing_mask_from_semantic(labels, spec);
    let instance_ids = group_pixels(&centers, offsets, &thing_mask)?;
    let merged = merge_panoptic(labels, &instance_ids, &centers, spec)?;
    let threshold = params
        .stuff_area_threshold
        .unwrap_or(spec.stuff_area_threshold());
    let filtered = filter_small_stuff_with(&merged, spec, threshold, params.stuff_segments);

    let center_scores: Vec<f64> = centers.iter().map(|c| c.score).collect();
    match semantic {
        SemanticInput::Probabilities(p) => {
            score_instances(&filtered, spec, &center_scores, Some(p), params.score_mode)
        }
        SemanticInput::Labels(l) => {
            let class = if params.score_mode.needs_class_score() {
                mean_class_evidence(&filtered, spec, |p, cat| {
                    Ok(if l.as_slice()[p] == cat { 1.0 } else { 0.0 })
                })?
            } else {
                vec![0.0; filtered.instances.len()]
            };
            apply_scores(&filtered, &center_scores, &class, params.score_mode)
        }
    }
}
