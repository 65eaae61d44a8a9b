//! Evaluation metrics: panoptic quality, semantic mean IoU and COCO-style
//! instance mask AP.
//!
//! Each metric has an accumulator that sums raw counts over images; ratios
//! are only formed when a report is produced, so multi-image scores equal a
//! recomputation from the summed counts.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::postprocess::InstanceRecord;
use crate::types::{decode_panoptic_id, ensure_same_dims, BoolGrid, DatasetSpec, Dims, LabelMap, ShapeError};

/// Matching key of a panoptic id. Stuff ids collapse to one segment per
/// category; VOID and unknown categories have no segment.
#[inline]
fn segment_key(id: u32, spec: &DatasetSpec) -> Option<u32> {
    let div = spec.label_divisor();
    let cat = id / div;
    if spec.is_thing(cat) {
        Some(id)
    } else if spec.is_stuff(cat) {
        Some(cat * div)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentMatch {
    pub pred: u32,
    pub gt: u32,
    pub iou: f64,
}

/// Pixel statistics shared by matching and PQ.
struct Overlap {
    pred_area: HashMap<u32, u64>,
    gt_area: HashMap<u32, u64>,
    /// Predicted pixels lying on groundtruth VOID.
    pred_on_void: HashMap<u32, u64>,
    inter: HashMap<(u32, u32), u64>,
}

impl Overlap {
    fn compute(pred: &LabelMap, gt: &LabelMap, spec: &DatasetSpec) -> Result<Self, ShapeError> {
        ensure_same_dims(gt.dims(), pred.dims())?;
        let mut o = Overlap {
            pred_area: HashMap::new(),
            gt_area: HashMap::new(),
            pred_on_void: HashMap::new(),
            inter: HashMap::new(),
        };
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            let pk = segment_key(p, spec);
            let gk = segment_key(g, spec);
            if let Some(gk) = gk {
                *o.gt_area.entry(gk).or_insert(0) += 1;
            }
            if let Some(pk) = pk {
                *o.pred_area.entry(pk).or_insert(0) += 1;
                match gk {
                    Some(gk) => *o.inter.entry((pk, gk)).or_insert(0) += 1,
                    None => *o.pred_on_void.entry(pk).or_insert(0) += 1,
                }
            }
        }
        Ok(o)
    }

    fn mostly_void(&self, pred: u32) -> bool {
        let void = self.pred_on_void.get(&pred).copied().unwrap_or(0);
        void * 2 > self.pred_area[&pred]
    }

    fn matches(&self, spec: &DatasetSpec) -> Vec<SegmentMatch> {
        let div = spec.label_divisor();
        let mut out: Vec<SegmentMatch> = self
            .inter
            .iter()
            .filter(|(&(p, g), _)| p / div == g / div && !self.mostly_void(p))
            .filter_map(|(&(p, g), &i)| {
                let void = self.pred_on_void.get(&p).copied().unwrap_or(0);
                let union = self.pred_area[&p] + self.gt_area[&g] - i - void;
                let iou = i as f64 / union as f64;
                (iou > 0.5).then_some(SegmentMatch { pred: p, gt: g, iou })
            })
            .collect();
        out.sort_unstable_by_key(|m| (m.gt, m.pred));
        let mut seen_pred: Vec<u32> = out.iter().map(|m| m.pred).collect();
        seen_pred.sort_unstable();
        let before = seen_pred.len();
        seen_pred.dedup();
        assert_eq!(before, seen_pred.len(), "a predicted segment matched twice");
        assert!(
            out.windows(2).all(|w| w[0].gt != w[1].gt),
            "a groundtruth segment matched twice"
        );
        out
    }
}

/// Same-category segment pairs with IoU > 0.5, sorted by groundtruth id.
///
/// Stuff segments are keyed by `category * divisor`. Groundtruth VOID pixels
/// are removed from every union, and predicted segments with more than half
/// of their area on VOID are never matched.
pub fn match_segments(pred: &LabelMap, gt: &LabelMap, spec: &DatasetSpec) -> Result<Vec<SegmentMatch>, ShapeError> {
    Ok(Overlap::compute(pred, gt, spec)?.matches(spec))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PqCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

impl PqCounts {
    fn add(&mut self, other: &PqCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }

    /// `(pq, sq, rq)`, with `pq` formed as `sq * rq`.
    pub fn scores(&self) -> (f64, f64, f64) {
        if self.tp == 0 {
            return (0.0, 0.0, 0.0);
        }
        let sq = self.iou_sum / self.tp as f64;
        let rq = self.tp as f64 / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64);
        (sq * rq, sq, rq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryPq {
    pub category: u32,
    pub is_thing: bool,
    #[serde(flatten)]
    pub counts: PqCounts,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PqAggregate {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// Categories averaged (those with any tp, fp or fn).
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    pub per_category: Vec<CategoryPq>,
    pub all: PqAggregate,
    pub things: PqAggregate,
    pub stuff: PqAggregate,
}

/// Per-category PQ counts summed over images.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PqAccumulator {
    counts: BTreeMap<u32, PqCounts>,
}

impl PqAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_image(&mut self, pred: &LabelMap, gt: &LabelMap, spec: &DatasetSpec) -> Result<(), ShapeError> {
        let overlap = Overlap::compute(pred, gt, spec)?;
        let matches = overlap.matches(spec);
        let div = spec.label_divisor();
        let mut matched_pred = std::collections::HashSet::new();
        let mut matched_gt = std::collections::HashSet::new();
        for m in &matches {
            let c = self.counts.entry(m.gt / div).or_default();
            c.tp += 1;
            c.iou_sum += m.iou;
            matched_pred.insert(m.pred);
            matched_gt.insert(m.gt);
        }
        let mut gt_ids: Vec<u32> = overlap.gt_area.keys().copied().collect();
        gt_ids.sort_unstable();
        for g in gt_ids {
            if !matched_gt.contains(&g) {
                self.counts.entry(g / div).or_default().fn_ += 1;
            }
        }
        let mut pred_ids: Vec<u32> = overlap.pred_area.keys().copied().collect();
        pred_ids.sort_unstable();
        for p in pred_ids {
            if !matched_pred.contains(&p) && !overlap.mostly_void(p) {
                self.counts.entry(p / div).or_default().fp += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PqAccumulator) {
        for (&cat, c) in &other.counts {
            self.counts.entry(cat).or_default().add(c);
        }
    }

    pub fn counts(&self) -> &BTreeMap<u32, PqCounts> {
        &self.counts
    }

    pub fn report(&self, spec: &DatasetSpec) -> PqReport {
        let per_category: Vec<CategoryPq> = self
            .counts
            .iter()
            .filter(|(_, c)| c.tp + c.fp + c.fn_ > 0)
            .map(|(&category, c)| {
                let (pq, sq, rq) = c.scores();
                CategoryPq {
                    category,
                    is_thing: spec.is_thing(category),
                    counts: *c,
                    pq,
                    sq,
                    rq,
                }
            })
            .collect();
        let aggregate = |keep: &dyn Fn(&CategoryPq) -> bool| {
            let picked: Vec<&CategoryPq> = per_category.iter().filter(|c| keep(c)).collect();
            let n = picked.len();
            if n == 0 {
                return PqAggregate::default();
            }
            let mean = |f: &dyn Fn(&CategoryPq) -> f64| picked.iter().map(|c| f(c)).sum::<f64>() / n as f64;
            PqAggregate {
                pq: mean(&|c| c.pq),
                sq: mean(&|c| c.sq),
                rq: mean(&|c| c.rq),
                n,
            }
        };
        PqReport {
            all: aggregate(&|_| true),
            things: aggregate(&|c| c.is_thing),
            stuff: aggregate(&|c| !c.is_thing),
            per_category,
        }
    }
}

/// Panoptic quality of one prediction against one groundtruth map.
pub fn panoptic_quality(pred: &LabelMap, gt: &LabelMap, spec: &DatasetSpec) -> Result<PqReport, ShapeError> {
    let mut acc = PqAccumulator::new();
    acc.add_image(pred, gt, spec)?;
    Ok(acc.report(spec))
}

/// Which categories enter the mean IoU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanOver {
    /// Categories with at least one groundtruth pixel.
    #[default]
    GtPresent,
    /// Categories present in either groundtruth or prediction.
    AnyPresent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryIou {
    pub category: u32,
    pub intersection: u64,
    pub gt_pixels: u64,
    pub pred_pixels: u64,
    /// `None` when the category appears in neither map.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub per_category: Vec<CategoryIou>,
    pub mean_iou: f64,
}

/// Confusion counts over the spec's categories; groundtruth ignore pixels are
/// skipped, predictions outside the category set count as misses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IouAccumulator {
    intersection: BTreeMap<u32, u64>,
    gt_pixels: BTreeMap<u32, u64>,
    pred_pixels: BTreeMap<u32, u64>,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_image(&mut self, pred: &LabelMap, gt: &LabelMap, spec: &DatasetSpec) -> Result<(), ShapeError> {
        ensure_same_dims(gt.dims(), pred.dims())?;
        let slots = spec.num_label_slots();
        let mut inter = vec![0u64; slots];
        let mut gts = vec![0u64; slots];
        let mut preds = vec![0u64; slots];
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            if !spec.is_category(g) {
                continue;
            }
            gts[g as usize] += 1;
            if spec.is_category(p) {
                preds[p as usize] += 1;
                if p == g {
                    inter[g as usize] += 1;
                }
            }
        }
        for cat in spec.categories().iter().map(|c| c.id) {
            let i = cat as usize;
            *self.intersection.entry(cat).or_insert(0) += inter[i];
            *self.gt_pixels.entry(cat).or_insert(0) += gts[i];
            *self.pred_pixels.entry(cat).or_insert(0) += preds[i];
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (dst, src) in [
            (&mut self.intersection, &other.intersection),
            (&mut self.gt_pixels, &other.gt_pixels),
            (&mut self.pred_pixels, &other.pred_pixels),
        ] {
            for (&k, &v) in src {
                *dst.entry(k).or_insert(0) += v;
            }
        }
    }

    pub fn report(&self, mean_over: MeanOver) -> IoUReport {
        let per_category: Vec<CategoryIou> = self
            .gt_pixels
            .iter()
            .map(|(&category, &gt_pixels)| {
                let intersection = self.intersection[&category];
                let pred_pixels = self.pred_pixels[&category];
                let union = gt_pixels + pred_pixels - intersection;
                CategoryIou {
                    category,
                    intersection,
                    gt_pixels,
                    pred_pixels,
                    iou: (union > 0).then(|| intersection as f64 / union as f64),
                }
            })
            .collect();
        let picked: Vec<f64> = per_category
            .iter()
            .filter(|c| match mean_over {
                MeanOver::GtPresent => c.gt_pixels > 0,
                MeanOver::AnyPresent => c.iou.is_some(),
            })
            .filter_map(|c| c.iou)
            .collect();
        let mean_iou = if picked.is_empty() {
            0.0
        } else {
            picked.iter().sum::<f64>() / picked.len() as f64
        };
        IoUReport { per_category, mean_iou }
    }
}

/// Semantic mean IoU of two label maps (category ids, ignore label allowed).
pub fn mean_iou(pred: &LabelMap, gt: &LabelMap, spec: &DatasetSpec) -> Result<IoUReport, ShapeError> {
    let mut acc = IouAccumulator::new();
    acc.add_image(pred, gt, spec)?;
    Ok(acc.report(MeanOver::GtPresent))
}

/// A binary instance mask stored as sorted pixel indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    dims: Dims,
    pixels: Vec<u32>,
}

impl InstanceMask {
    pub fn from_indices(dims: Dims, mut pixels: Vec<u32>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        debug_assert!(pixels.last().is_none_or(|&p| (p as usize) < dims.len()));
        InstanceMask { dims, pixels }
    }

    pub fn from_grid(grid: &BoolGrid) -> Self {
        let pixels = grid
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i as u32)
            .collect();
        InstanceMask {
            dims: grid.dims(),
            pixels,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn area(&self) -> u64 {
        self.pixels.len() as u64
    }

    pub fn intersection(&self, other: &InstanceMask) -> u64 {
        let (mut i, mut j, mut n) = (0, 0, 0u64);
        let (a, b) = (&self.pixels, &other.pixels);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApPrediction {
    pub mask: InstanceMask,
    pub category: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApGroundTruth {
    pub mask: InstanceMask,
    pub category: u32,
    pub crowd: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApParams {
    pub iou_thresholds: Vec<f64>,
    /// Detections kept per image and category, highest score first.
    pub max_detections: usize,
    pub recall_points: usize,
}

impl Default for ApParams {
    fn default() -> Self {
        ApParams {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            max_detections: 200,
            recall_points: 101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: u32,
    pub num_gt: u64,
    pub ap_per_threshold: Vec<Option<f64>>,
    pub mean_ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub iou_thresholds: Vec<f64>,
    /// Mean over categories with groundtruth, per threshold.
    pub ap_per_threshold: Vec<Option<f64>>,
    /// `None` when no category has non-crowd groundtruth.
    pub mean_ap: Option<f64>,
    pub per_category: Vec<CategoryAp>,
}

/// Detections of one category across images, one list per threshold.
#[derive(Debug, Clone, Default)]
struct CategoryDetections {
    num_gt: u64,
    /// `(score, is_tp)` per threshold; crowd-absorbed detections are dropped.
    per_threshold: Vec<Vec<(f64, bool)>>,
}

/// COCO-style mask AP accumulated over images.
#[derive(Debug, Clone)]
pub struct ApAccumulator {
    params: ApParams,
    categories: BTreeMap<u32, CategoryDetections>,
}

impl ApAccumulator {
    pub fn new(params: ApParams) -> Self {
        ApAccumulator {
            params,
            categories: BTreeMap::new(),
        }
    }

    pub fn add_image(&mut self, preds: &[ApPrediction], gts: &[ApGroundTruth]) {
        let mut cats: Vec<u32> = preds.iter().map(|p| p.category).chain(gts.iter().map(|g| g.category)).collect();
        cats.sort_unstable();
        cats.dedup();
        let n_thr = self.params.iou_thresholds.len();
        for cat in cats {
            // Non-crowd groundtruth first, insertion order otherwise.
            let mut g: Vec<&ApGroundTruth> = gts.iter().filter(|g| g.category == cat).collect();
            g.sort_by_key(|g| g.crowd);
            let mut d: Vec<&ApPrediction> = preds.iter().filter(|p| p.category == cat).collect();
            d.sort_by(|a, b| b.score.total_cmp(&a.score));
            d.truncate(self.params.max_detections);

            let ious: Vec<Vec<f64>> = d
                .iter()
                .map(|det| {
                    g.iter()
                        .map(|gt| {
                            let inter = det.mask.intersection(&gt.mask) as f64;
                            let denom = if gt.crowd {
                                det.mask.area() as f64
                            } else {
                                (det.mask.area() + gt.mask.area()) as f64 - inter
                            };
                            if denom > 0.0 { inter / denom } else { 0.0 }
                        })
                        .collect()
                })
                .collect();

            let entry = self.categories.entry(cat).or_insert_with(|| CategoryDetections {
                num_gt: 0,
                per_threshold: vec![Vec::new(); n_thr],
            });
            entry.num_gt += g.iter().filter(|g| !g.crowd).count() as u64;
            for (t, &thr) in self.params.iou_thresholds.iter().enumerate() {
                let mut gt_taken = vec![false; g.len()];
                for (di, det) in d.iter().enumerate() {
                    let mut best_iou = thr.min(1.0 - 1e-10);
                    let mut m: Option<usize> = None;
                    for (gi, gt) in g.iter().enumerate() {
                        if gt_taken[gi] && !gt.crowd {
                            continue;
                        }
                        // Once matched to real groundtruth, stop at the crowd tail.
                        if m.is_some_and(|mi| !g[mi].crowd) && gt.crowd {
                            break;
                        }
                        if ious[di][gi] < best_iou {
                            continue;
                        }
                        best_iou = ious[di][gi];
                        m = Some(gi);
                    }
                    match m {
                        Some(gi) if g[gi].crowd => {}
                        Some(gi) => {
                            gt_taken[gi] = true;
                            entry.per_threshold[t].push((det.score, true));
                        }
                        None => entry.per_threshold[t].push((det.score, false)),
                    }
                }
            }
        }
    }

    pub fn report(&self) -> ApReport {
        let thresholds = self.params.iou_thresholds.clone();
        let per_category: Vec<CategoryAp> = self
            .categories
            .iter()
            .map(|(&category, det)| {
                let ap_per_threshold: Vec<Option<f64>> = det
                    .per_threshold
                    .iter()
                    .map(|list| interpolated_ap(list, det.num_gt, self.params.recall_points))
                    .collect();
                CategoryAp {
                    category,
                    num_gt: det.num_gt,
                    mean_ap: mean_some(&ap_per_threshold),
                    ap_per_threshold,
                }
            })
            .collect();
        let ap_per_threshold: Vec<Option<f64>> = (0..thresholds.len())
            .map(|t| mean_some(&per_category.iter().map(|c| c.ap_per_threshold[t]).collect::<Vec<_>>()))
            .collect();
        let all: Vec<Option<f64>> = per_category.iter().flat_map(|c| c.ap_per_threshold.iter().copied()).collect();
        ApReport {
            iou_thresholds: thresholds,
            ap_per_threshold,
            mean_ap: mean_some(&all),
            per_category,
        }
    }
}

fn mean_some(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Area under the interpolated precision/recall curve sampled at
/// `recall_points` evenly spaced recall levels.
fn interpolated_ap(detections: &[(f64, bool)], num_gt: u64, recall_points: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut sorted = detections.to_vec();
    // Stable: ties keep image order, then within-image rank.
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut recall = Vec::with_capacity(sorted.len());
    let mut precision = Vec::with_capacity(sorted.len());
    for &(_, is_tp) in &sorted {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let steps = recall_points.max(2) - 1;
    let mut total = 0.0;
    for k in 0..=steps {
        let level = k as f64 / steps as f64;
        let idx = recall.partition_point(|&r| r < level);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    Some(total / (steps + 1) as f64)
}

/// Mask AP of one image.
pub fn mask_ap(preds: &[ApPrediction], gts: &[ApGroundTruth], params: &ApParams) -> ApReport {
    let mut acc = ApAccumulator::new(params.clone());
    acc.add_image(preds, gts);
    acc.report()
}

/// Builds AP inputs from panoptic maps.
///
/// Predictions are the thing segments of `pred`; scores come from `instances`
/// (matched by panoptic id) and default to 1. Groundtruth thing segments with
/// instance part 0 are treated as crowd regions.
pub fn ap_inputs_from_panoptic(
    pred: &LabelMap,
    instances: Option<&[InstanceRecord]>,
    gt: &LabelMap,
    spec: &DatasetSpec,
) -> Result<(Vec<ApPrediction>, Vec<ApGroundTruth>), ShapeError> {
    ensure_same_dims(gt.dims(), pred.dims())?;
    let dims = pred.dims();
    let div = spec.label_divisor();
    let collect = |map: &LabelMap| {
        let mut segs: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (i, &id) in map.as_slice().iter().enumerate() {
            if spec.is_thing(id / div) {
                segs.entry(id).or_default().push(i as u32);
            }
        }
        segs
    };
    let scores: HashMap<u32, f64> = instances
        .unwrap_or(&[])
        .iter()
        .map(|r| (r.panoptic_id(div), r.score))
        .collect();
    let mut pred_segments: Vec<(u32, Vec<u32>)> = collect(pred).into_iter().collect();
    // Present predictions in record order when available.
    if let Some(records) = instances {
        let order: HashMap<u32, usize> =
            records.iter().enumerate().map(|(i, r)| (r.panoptic_id(div), i)).collect();
        pred_segments.sort_by_key(|(id, _)| (order.get(id).copied().unwrap_or(usize::MAX), *id));
    }
    let preds = pred_segments
        .into_iter()
        .map(|(id, px)| ApPrediction {
            mask: InstanceMask { dims, pixels: px },
            category: id / div,
            score: scores.get(&id).copied().unwrap_or(1.0),
        })
        .collect();
    let gts = collect(gt)
        .into_iter()
        .map(|(id, px)| {
            let (category, instance) = decode_panoptic_id(id, div);
            ApGroundTruth {
                mask: InstanceMask { dims, pixels: px },
                category,
                crowd: instance == 0,
            }
        })
        .collect();
    Ok((preds, gts))
}
