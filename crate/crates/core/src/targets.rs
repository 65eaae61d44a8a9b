//! Training targets derived from a groundtruth panoptic map: the center
//! heatmap, the per-pixel center offsets and the semantic loss weights.

use std::collections::HashMap;

use thiserror::Error;

use crate::types::{
    decode_panoptic_id, validate, BoolGrid, DatasetSpec, Dims, GridRef, Heatmap, InstanceCenter,
    LabelMap, OffsetField, Violation, WeightMap,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetParams {
    /// Gaussian standard deviation in pixels.
    pub sigma: f64,
    /// Cutoff radius as a multiple of `sigma`.
    pub truncation_radius: f64,
    /// Thing segments with strictly fewer pixels get `small_instance_weight`.
    pub small_instance_area: u64,
    pub small_instance_weight: f64,
    /// Place heatmap peaks on the nearest pixel instead of the real mass center.
    pub round_centers: bool,
}

impl Default for TargetParams {
    fn default() -> Self {
        TargetParams {
            sigma: 8.0,
            truncation_radius: 3.0,
            small_instance_area: 64 * 64,
            small_instance_weight: 3.0,
            round_centers: false,
        }
    }
}

impl TargetParams {
    pub fn check(&self) -> Result<(), TargetError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(TargetError::InvalidParams(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.truncation_radius > 0.0) {
            return Err(TargetError::InvalidParams(format!(
                "truncation_radius must be positive, got {}",
                self.truncation_radius
            )));
        }
        if !(self.small_instance_weight >= 1.0) {
            return Err(TargetError::InvalidParams(format!(
                "small_instance_weight must be at least 1, got {}",
                self.small_instance_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TargetError {
    #[error("invalid target parameters: {0}")]
    InvalidParams(String),
    #[error("invalid panoptic annotation: {} violation(s), first: {}", .0.len(), .0[0])]
    InvalidAnnotation(Vec<Violation>),
}

/// Mass center of one thing segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassCenter {
    pub id: u32,
    pub center: InstanceCenter,
    pub area: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetBundle {
    pub heatmap: Heatmap,
    pub offsets: OffsetField,
    pub semantic_weights: WeightMap,
    pub semantic_labels: LabelMap,
    pub thing_mask: BoolGrid,
    pub centers: Vec<MassCenter>,
}

/// One entry per thing segment, sorted by panoptic id. Centers are the exact
/// mean pixel coordinate; sums are accumulated in integers so the result does
/// not depend on traversal order.
pub fn compute_mass_centers(panoptic: &LabelMap, spec: &DatasetSpec) -> Vec<MassCenter> {
    let dims = panoptic.dims();
    let mut acc: HashMap<u32, (u64, u64, u64)> = HashMap::new();
    for (r, row) in panoptic.rows().enumerate() {
        for (c, &id) in row.iter().enumerate() {
            let (cat, _) = decode_panoptic_id(id, spec.label_divisor());
            if spec.is_thing(cat) {
                let e = acc.entry(id).or_insert((0, 0, 0));
                e.0 += 1;
                e.1 += r as u64;
                e.2 += c as u64;
            }
        }
    }
    debug_assert!(acc.values().all(|e| e.0 <= dims.len() as u64));
    let mut out: Vec<MassCenter> = acc
        .into_iter()
        .map(|(id, (n, sr, sc))| MassCenter {
            id,
            center: InstanceCenter::new(sr as f64 / n as f64, sc as f64 / n as f64, 1.0),
            area: n,
        })
        .collect();
    out.sort_unstable_by_key(|m| m.id);
    out
}

/// Max-combined truncated Gaussians, one per center.
pub fn encode_center_heatmap(
    centers: &[InstanceCenter],
    dims: Dims,
    params: &TargetParams,
) -> Heatmap {
    let mut heat = Heatmap::filled(dims, 0.0);
    let radius = params.truncation_radius * params.sigma;
    let radius_sq = radius * radius;
    let denom = 2.0 * params.sigma * params.sigma;
    let width = dims.width;
    let data = heat.as_mut_slice();
    for c in centers {
        let (cr, cc) = if params.round_centers {
            (c.row.round(), c.col.round())
        } else {
            (c.row, c.col)
        };
        let r0 = (cr - radius).ceil().max(0.0) as usize;
        let c0 = (cc - radius).ceil().max(0.0) as usize;
        let r1 = ((cr + radius).floor().min(dims.height as f64 - 1.0)).max(-1.0);
        let c1 = ((cc + radius).floor().min(dims.width as f64 - 1.0)).max(-1.0);
        if r1 < 0.0 || c1 < 0.0 {
            continue;
        }
        for r in r0..=r1 as usize {
            let dr = r as f64 - cr;
            for col in c0..=c1 as usize {
                let dc = col as f64 - cc;
                let d2 = dr * dr + dc * dc;
                if d2 <= radius_sq {
                    let v = (-d2 / denom).exp() as f32;
                    let slot = &mut data[r * width + col];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
    }
    heat
}

/// Offsets from every thing pixel to its segment's mass center, with the
/// matching thing mask. Non-thing pixels get a zero offset.
pub fn encode_offsets(panoptic: &LabelMap, spec: &DatasetSpec) -> (OffsetField, BoolGrid) {
    let centers = compute_mass_centers(panoptic, spec);
    encode_offsets_with(panoptic, &centers)
}

pub fn encode_offsets_with(
    panoptic: &LabelMap,
    centers: &[MassCenter],
) -> (OffsetField, BoolGrid) {
    let lookup: HashMap<u32, InstanceCenter> = centers.iter().map(|m| (m.id, m.center)).collect();
    let dims = panoptic.dims();
    let mut offsets = OffsetField::filled(dims, [0.0, 0.0]);
    let mut mask = BoolGrid::filled(dims, false);
    for (i, &id) in panoptic.as_slice().iter().enumerate() {
        if let Some(c) = lookup.get(&id) {
            let (r, col) = dims.coords(i);
            offsets.as_mut_slice()[i] = [(c.row - r as f64) as f32, (c.col - col as f64) as f32];
            mask.as_mut_slice()[i] = true;
        }
    }
    (offsets, mask)
}

/// Per-pixel semantic category, with VOID and unknown ids mapped to the
/// ignore label.
pub fn semantic_labels(panoptic: &LabelMap, spec: &DatasetSpec) -> LabelMap {
    panoptic.map(|&id| {
        spec.panoptic_category(id)
            .unwrap_or_else(|| spec.ignore_label())
    })
}

/// Loss weights: `small_instance_weight` on thing segments smaller than
/// `small_instance_area`, 0 on ignored pixels, 1 elsewhere.
pub fn semantic_weight_map(
    panoptic: &LabelMap,
    spec: &DatasetSpec,
    params: &TargetParams,
) -> WeightMap {
    let mut areas: HashMap<u32, u64> = HashMap::new();
    for &id in panoptic.as_slice() {
        if let Some(cat) = spec.panoptic_category(id) {
            if spec.is_thing(cat) {
                *areas.entry(id).or_insert(0) += 1;
            }
        }
    }
    let small = params.small_instance_weight as f32;
    panoptic.map(|&id| match spec.panoptic_category(id) {
        None => 0.0,
        Some(_) => match areas.get(&id) {
            Some(&a) if a < params.small_instance_area => small,
            _ => 1.0,
        },
    })
}

/// Builds every training target for one annotation.
pub fn encode_targets(
    panoptic: &LabelMap,
    spec: &DatasetSpec,
    params: &TargetParams,
) -> Result<TargetBundle, TargetError> {
    params.check()?;
    let violations = validate(GridRef::Panoptic(panoptic), None, spec);
    if !violations.is_empty() {
        return Err(TargetError::InvalidAnnotation(violations));
    }
    let centers = compute_mass_centers(panoptic, spec);
    let center_list: Vec<InstanceCenter> = centers.iter().map(|m| m.center).collect();
    let heatmap = encode_center_heatmap(&center_list, panoptic.dims(), params);
    let (offsets, thing_mask) = encode_offsets_with(panoptic, &centers);
    Ok(TargetBundle {
        heatmap,
        offsets,
        semantic_weights: semantic_weight_map(panoptic, spec, params),
        semantic_labels: semantic_labels(panoptic, spec),
        thing_mask,
        centers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::types::CategorySpec;

    fn spec() -> DatasetSpec {
        DatasetSpec::new(
            vec![
                CategorySpec::new(0, "road", false),
                CategorySpec::new(1, "sky", false),
                CategorySpec::new(2, "car", true),
                CategorySpec::new(3, "person", true),
            ],
            255,
            1000,
            0,
        )
        .unwrap()
    }

    fn map_with(dims: Dims, pixels: &[(usize, usize)], id: u32) -> LabelMap {
        let mut m = LabelMap::filled(dims, 0);
        for &(r, c) in pixels {
            m[(r, c)] = id;
        }
        m
    }

    #[test]
    fn mass_center_examples() {
        let dims = Dims::new(8, 8).unwrap();
        let s = spec();
        let two = compute_mass_centers(&map_with(dims, &[(0, 0), (0, 2)], 2001), &s);
        assert_eq!(two.len(), 1);
        assert_eq!((two[0].center.row, two[0].center.col), (0.0, 1.0));
        assert_eq!(two[0].center.score, 1.0);

        let one = compute_mass_centers(&map_with(dims, &[(5, 7)], 2001), &s);
        assert_eq!((one[0].center.row, one[0].center.col), (5.0, 7.0));

        let three = compute_mass_centers(&map_with(dims, &[(0, 0), (1, 0), (1, 1)], 3004), &s);
        // Enumerated: rows {0,1,1}, cols {0,0,1}.
        let oracle_r = [0.0, 1.0, 1.0].iter().sum::<f64>() / 3.0;
        let oracle_c = [0.0, 0.0, 1.0].iter().sum::<f64>() / 3.0;
        assert_eq!(three[0].id, 3004);
        assert!((three[0].center.row - oracle_r).abs() < 1e-15);
        assert!((three[0].center.col - oracle_c).abs() < 1e-15);
        assert!((three[0].center.row - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn stuff_and_void_have_no_centers() {
        let dims = Dims::new(4, 4).unwrap();
        let mut m = LabelMap::filled(dims, 1000);
        m[(0, 0)] = 255_000;
        assert!(compute_mass_centers(&m, &spec()).is_empty());
    }

    #[test]
    fn heatmap_peak_and_sigma_point() {
        let dims = Dims::new(40, 40).unwrap();
        let p = TargetParams::default();
        let h = encode_center_heatmap(&[InstanceCenter::new(10.0, 12.0, 1.0)], dims, &p);
        assert_eq!(h[(10, 12)], 1.0);
        let expected = (-0.5f64).exp();
        assert!((h[(18, 12)] as f64 - expected).abs() < 1e-6);
        assert!((h[(10, 20)] as f64 - 0.606531).abs() < 1e-6);
        // Past 3 sigma = 24 px the contribution is cut.
        assert_eq!(h[(10, 37)], 0.0);
        assert!(h[(10, 36)] > 0.0);
    }

    #[test]
    fn empty_centers_give_zero_heatmap() {
        let dims = Dims::new(5, 6).unwrap();
        let h = encode_center_heatmap(&[], dims, &TargetParams::default());
        assert!(h.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_centers_are_pointwise_max() {
        let dims = Dims::new(16, 16).unwrap();
        let params = TargetParams {
            sigma: 3.0,
            ..Default::default()
        };
        let a = InstanceCenter::new(4.0, 5.0, 1.0);
        let b = InstanceCenter::new(9.5, 11.25, 1.0);
        let both = encode_center_heatmap(&[a, b], dims, &params);
        // Brute force: evaluate the Gaussian definition at every pixel.
        let cut = (params.truncation_radius * params.sigma).powi(2);
        for r in 0..16 {
            for c in 0..16 {
                let g = |ctr: &InstanceCenter| {
                    let d2 = (r as f64 - ctr.row).powi(2) + (c as f64 - ctr.col).powi(2);
                    if d2 <= cut {
                        (-d2 / (2.0 * params.sigma * params.sigma)).exp() as f32
                    } else {
                        0.0
                    }
                };
                assert_eq!(both[(r, c)], g(&a).max(g(&b)), "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn rounded_centers_put_unit_peaks_on_pixels() {
        let dims = Dims::new(10, 10).unwrap();
        let params = TargetParams {
            round_centers: true,
            ..Default::default()
        };
        let h = encode_center_heatmap(&[InstanceCenter::new(3.5, 4.4, 1.0)], dims, &params);
        assert_eq!(h[(4, 4)], 1.0);
        assert!(h[(3, 4)] < 1.0);
    }

    #[test]
    fn offset_examples() {
        let dims = Dims::new(30, 30).unwrap();
        let s = spec();
        // Segment {(10,20), (16,16)} has mass center (13, 18).
        let m = map_with(dims, &[(10, 20), (16, 16)], 2001);
        let (off, mask) = encode_offsets(&m, &s);
        assert_eq!(off[(10, 20)], [3.0, -2.0]);
        assert_eq!(off[(16, 16)], [-3.0, 2.0]);
        assert_eq!(off[(0, 0)], [0.0, 0.0]);
        assert!(mask[(10, 20)] && !mask[(0, 0)]);
        assert_eq!(mask.as_slice().iter().filter(|&&b| b).count(), 2);
    }

    #[test]
    fn offsets_land_on_mass_centers() {
        let s = spec();
        let dims = Dims::new(32, 32).unwrap();
        for seed in 0..10 {
            let gt = synth::random_scene(seed, dims, 6, &s);
            let centers = compute_mass_centers(&gt, &s);
            let by_id: HashMap<u32, InstanceCenter> =
                centers.iter().map(|m| (m.id, m.center)).collect();
            let (off, mask) = encode_offsets(&gt, &s);
            for (i, &id) in gt.as_slice().iter().enumerate() {
                let (r, c) = dims.coords(i);
                match by_id.get(&id) {
                    Some(ctr) => {
                        assert!(mask.as_slice()[i]);
                        let o = off.as_slice()[i];
                        assert!((r as f64 + o[0] as f64 - ctr.row).abs() < 1e-5);
                        assert!((c as f64 + o[1] as f64 - ctr.col).abs() < 1e-5);
                    }
                    None => {
                        assert!(!mask.as_slice()[i]);
                        assert_eq!(off.as_slice()[i], [0.0, 0.0]);
                    }
                }
            }
        }
    }

    #[test]
    fn weight_map_values() {
        let s = spec();
        let dims = Dims::new(64, 128).unwrap();
        let mut m = LabelMap::filled(dims, 1000);
        let mut car = 0;
        for r in 0..64 {
            for c in 0..64 {
                if car < 4095 {
                    m[(r, c)] = 2001;
                    car += 1;
                }
                m[(r, c + 64)] = 3001;
            }
        }
        m[(63, 63)] = 255_000;
        let w = semantic_weight_map(&m, &s, &TargetParams::default());
        assert_eq!(m.as_slice().iter().filter(|&&v| v == 2001).count(), 4095);
        assert_eq!(m.as_slice().iter().filter(|&&v| v == 3001).count(), 4096);
        assert_eq!(w[(0, 0)], 3.0);
        assert_eq!(w[(0, 64)], 1.0);
        assert_eq!(w[(63, 63)], 0.0);

        let stuff_only = LabelMap::filled(dims, 1000);
        let w = semantic_weight_map(&stuff_only, &s, &TargetParams::default());
        assert!(w.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bundle_rejects_unknown_category() {
        let s = spec();
        let dims = Dims::new(2, 2).unwrap();
        let m = LabelMap::from_vec(dims, vec![0, 9001, 0, 0]).unwrap();
        match encode_targets(&m, &s, &TargetParams::default()) {
            Err(TargetError::InvalidAnnotation(v)) => {
                assert_eq!(v.len(), 1);
                assert!(v[0].to_string().contains("pixel 1"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad = TargetParams {
            sigma: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            encode_targets(&LabelMap::filled(dims, 0), &s, &bad),
            Err(TargetError::InvalidParams(_))
        ));
    }

    #[test]
    fn bundle_passes_validation() {
        let s = spec();
        let dims = Dims::new(48, 40).unwrap();
        let gt = synth::random_scene(3, dims, 5, &s);
        let t = encode_targets(&gt, &s, &TargetParams::default()).unwrap();
        assert!(validate(GridRef::TargetHeatmap(&t.heatmap), Some(dims), &s).is_empty());
        assert!(validate(GridRef::Offsets(&t.offsets), Some(dims), &s).is_empty());
        assert!(validate(GridRef::Weights(&t.semantic_weights), Some(dims), &s).is_empty());
        assert!(validate(GridRef::Semantic(&t.semantic_labels), Some(dims), &s).is_empty());
    }
}
