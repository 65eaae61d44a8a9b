//! Dense grids, dataset descriptions, panoptic id encoding and validation.
//!
//! All grids are row-major with the origin at the top-left pixel. Coordinates
//! are always `(row, col)` and offsets are stored as `[d_row, d_col]`.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Panoptic id convention used by COCO-style annotations.
pub const DEFAULT_LABEL_DIVISOR: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(height: usize, width: usize) -> Result<Self, ShapeError> {
        if height == 0 || width == 0 {
            return Err(ShapeError::Empty { height, width });
        }
        Ok(Dims { height, width })
    }

    /// Number of pixels.
    #[inline]
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= 0.0 && col >= 0.0 && row < self.height as f64 && col < self.width as f64
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("grid dimensions must be at least 1x1, got {height}x{width}")]
    Empty { height: usize, width: usize },
    #[error("grid of {dims} needs {expected} values, got {actual}")]
    Length {
        dims: Dims,
        expected: usize,
        actual: usize,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Mismatch { expected: Dims, found: Dims },
}

/// Checks that two grids share one shape.
pub fn ensure_same_dims(expected: Dims, found: Dims) -> Result<(), ShapeError> {
    if expected != found {
        return Err(ShapeError::Mismatch { expected, found });
    }
    Ok(())
}

/// A row-major 2-D grid with one value per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    dims: Dims,
    data: Vec<T>,
}

/// Semantic, instance or panoptic ids.
pub type LabelMap = Grid<u32>;
/// Center confidence per pixel.
pub type Heatmap = Grid<f32>;
/// Per-pixel `[d_row, d_col]` displacement to the instance center, in pixels.
pub type OffsetField = Grid<[f32; 2]>;
pub type BoolGrid = Grid<bool>;
pub type WeightMap = Grid<f32>;

impl<T> Grid<T> {
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self, ShapeError> {
        if data.len() != dims.len() {
            return Err(ShapeError::Length {
                dims,
                expected: dims.len(),
                actual: data.len(),
            });
        }
        Ok(Grid { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for r in 0..dims.height {
            for c in 0..dims.width {
                data.push(f(r, c));
            }
        }
        Grid { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&T> {
        if row < self.dims.height && col < self.dims.width {
            Some(&self.data[row * self.dims.width + col])
        } else {
            None
        }
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.dims.width)
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Clone> Grid<T> {
    pub fn filled(dims: Dims, value: T) -> Self {
        Grid {
            dims,
            data: vec![value; dims.len()],
        }
    }
}

impl<T> Index<(usize, usize)> for Grid<T> {
    type Output = T;

    #[inline]
    fn index(&self, (row, col): (usize, usize)) -> &T {
        assert!(row < self.dims.height && col < self.dims.width);
        &self.data[row * self.dims.width + col]
    }
}

impl<T> IndexMut<(usize, usize)> for Grid<T> {
    #[inline]
    fn index_mut(&mut self, (row, col): (usize, usize)) -> &mut T {
        assert!(row < self.dims.height && col < self.dims.width);
        &mut self.data[row * self.dims.width + col]
    }
}

/// Pixel-major stack of per-pixel vectors (logits or class probabilities).
///
/// Channel `c` of a pixel corresponds to category id `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    channels: usize,
    data: Vec<T>,
}

pub type ScoreVolume = Volume<f32>;

impl<T> Volume<T> {
    pub fn from_vec(dims: Dims, channels: usize, data: Vec<T>) -> Result<Self, ShapeError> {
        let expected = dims.len() * channels;
        if channels == 0 || data.len() != expected {
            return Err(ShapeError::Length {
                dims,
                expected,
                actual: data.len(),
            });
        }
        Ok(Volume {
            dims,
            channels,
            data,
        })
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> &[T] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

impl<T: Copy + Into<f64>> Volume<T> {
    /// Per-pixel argmax; ties resolve to the smallest channel.
    pub fn argmax(&self) -> LabelMap {
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| {
                let mut best = 0usize;
                let mut best_v: f64 = px[0].into();
                for (c, &v) in px.iter().enumerate().skip(1) {
                    let v: f64 = v.into();
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                best as u32
            })
            .collect();
        Grid {
            dims: self.dims,
            data,
        }
    }
}

/// An instance center in real pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceCenter {
    pub row: f64,
    pub col: f64,
    pub score: f64,
}

impl InstanceCenter {
    pub fn new(row: f64, col: f64, score: f64) -> Self {
        InstanceCenter { row, col, score }
    }

    /// Same center snapped to the nearest pixel (halves round away from zero).
    pub fn rounded(&self) -> Self {
        InstanceCenter {
            row: self.row.round(),
            col: self.col.round(),
            score: self.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: u32,
    pub name: String,
    pub is_thing: bool,
}

impl CategorySpec {
    pub fn new(id: u32, name: impl Into<String>, is_thing: bool) -> Self {
        CategorySpec {
            id,
            name: name.into(),
            is_thing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CategoryKind {
    Unknown,
    Stuff,
    Thing,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("categories: at least one category is required")]
    NoCategories,
    #[error("categories[{position}].id: duplicate category id {id}")]
    DuplicateCategory { position: usize, id: u32 },
    #[error("ignore_label: {0} is also a category id")]
    IgnoreIsCategory(u32),
    #[error("label_divisor: {divisor} must exceed every category id (largest is {max_id}) and be at least 2")]
    DivisorTooSmall { divisor: u32, max_id: u32 },
    #[error("label_divisor: panoptic ids for label {label} overflow 32 bits with divisor {divisor}")]
    IdOverflow { label: u32, divisor: u32 },
}

/// Category table plus the constants needed to encode and filter panoptic maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    categories: Vec<CategorySpec>,
    ignore_label: u32,
    label_divisor: u32,
    stuff_area_threshold: u64,
    kinds: Vec<CategoryKind>,
}

impl DatasetSpec {
    pub fn new(
        categories: Vec<CategorySpec>,
        ignore_label: u32,
        label_divisor: u32,
        stuff_area_threshold: u64,
    ) -> Result<Self, SpecError> {
        if categories.is_empty() {
            return Err(SpecError::NoCategories);
        }
        let max_id = categories.iter().map(|c| c.id).max().unwrap_or(0);
        if label_divisor < 2 || label_divisor <= max_id {
            return Err(SpecError::DivisorTooSmall {
                divisor: label_divisor,
                max_id,
            });
        }
        for label in [max_id, ignore_label] {
            let top = (label as u64 + 1) * label_divisor as u64;
            if top > u32::MAX as u64 + 1 {
                return Err(SpecError::IdOverflow {
                    label,
                    divisor: label_divisor,
                });
            }
        }
        let mut kinds = vec![CategoryKind::Unknown; max_id as usize + 1];
        for (position, cat) in categories.iter().enumerate() {
            let slot = &mut kinds[cat.id as usize];
            if *slot != CategoryKind::Unknown {
                return Err(SpecError::DuplicateCategory {
                    position,
                    id: cat.id,
                });
            }
            *slot = if cat.is_thing {
                CategoryKind::Thing
            } else {
                CategoryKind::Stuff
            };
        }
        if (ignore_label as usize) < kinds.len()
            && kinds[ignore_label as usize] != CategoryKind::Unknown
        {
            return Err(SpecError::IgnoreIsCategory(ignore_label));
        }
        Ok(DatasetSpec {
            categories,
            ignore_label,
            label_divisor,
            stuff_area_threshold,
            kinds,
        })
    }

    /// The 19-class Cityscapes training label set: 11 stuff and 8 thing
    /// classes, ignore label 255, stuff area threshold 2048.
    pub fn cityscapes() -> Self {
        const NAMES: [&str; 19] = [
            "road",
            "sidewalk",
            "building",
            "wall",
            "fence",
            "pole",
            "traffic light",
            "traffic sign",
            "vegetation",
            "terrain",
            "sky",
            "person",
            "rider",
            "car",
            "truck",
            "bus",
            "train",
            "motorcycle",
            "bicycle",
        ];
        let categories = NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| CategorySpec::new(i as u32, *name, i >= 11))
            .collect();
        DatasetSpec::new(categories, 255, DEFAULT_LABEL_DIVISOR, 2048)
            .expect("built-in table is valid")
    }

    pub fn categories(&self) -> &[CategorySpec] {
        &self.categories
    }

    pub fn ignore_label(&self) -> u32 {
        self.ignore_label
    }

    pub fn label_divisor(&self) -> u32 {
        self.label_divisor
    }

    pub fn stuff_area_threshold(&self) -> u64 {
        self.stuff_area_threshold
    }

    pub fn with_stuff_area_threshold(mut self, threshold: u64) -> Self {
        self.stuff_area_threshold = threshold;
        self
    }

    /// Largest category id plus one; the minimum channel count of a score volume.
    pub fn num_label_slots(&self) -> usize {
        self.kinds.len()
    }

    #[inline]
    pub fn kind(&self, id: u32) -> CategoryKind {
        self.kinds
            .get(id as usize)
            .copied()
            .unwrap_or(CategoryKind::Unknown)
    }

    #[inline]
    pub fn is_thing(&self, id: u32) -> bool {
        self.kind(id) == CategoryKind::Thing
    }

    #[inline]
    pub fn is_stuff(&self, id: u32) -> bool {
        self.kind(id) == CategoryKind::Stuff
    }

    #[inline]
    pub fn is_category(&self, id: u32) -> bool {
        self.kind(id) != CategoryKind::Unknown
    }

    pub fn category(&self, id: u32) -> Option<&CategorySpec> {
        self.categories.iter().find(|c| c.id == id)
    }

    /// Panoptic id written to VOID pixels.
    #[inline]
    pub fn void_id(&self) -> u32 {
        self.ignore_label * self.label_divisor
    }

    /// Category of a panoptic id, or `None` for VOID and unknown categories.
    #[inline]
    pub fn panoptic_category(&self, id: u32) -> Option<u32> {
        let cat = id / self.label_divisor;
        self.is_category(cat).then_some(cat)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdError {
    #[error("instance {instance} does not fit below label divisor {divisor}")]
    InstanceOutOfRange { instance: u32, divisor: u32 },
    #[error("panoptic id for category {category} overflows 32 bits")]
    Overflow { category: u32 },
}

pub fn encode_panoptic_id(category: u32, instance: u32, divisor: u32) -> Result<u32, IdError> {
    if instance >= divisor {
        return Err(IdError::InstanceOutOfRange { instance, divisor });
    }
    category
        .checked_mul(divisor)
        .and_then(|base| base.checked_add(instance))
        .ok_or(IdError::Overflow { category })
}

/// Splits a panoptic id into `(category, instance)`.
#[inline]
pub fn decode_panoptic_id(id: u32, divisor: u32) -> (u32, u32) {
    (id / divisor, id % divisor)
}

/// Which invariants a grid is checked against.
#[derive(Debug, Clone, Copy)]
pub enum GridRef<'a> {
    /// Category ids or the ignore label.
    Semantic(&'a LabelMap),
    /// Encoded panoptic ids; the decoded category must be known or VOID.
    Panoptic(&'a LabelMap),
    /// Predicted center confidences: any finite value.
    Heatmap(&'a Heatmap),
    /// Encoded training heatmap: finite and inside `[0, 1]`.
    TargetHeatmap(&'a Heatmap),
    Offsets(&'a OffsetField),
    Weights(&'a WeightMap),
}

impl GridRef<'_> {
    pub fn dims(&self) -> Dims {
        match self {
            GridRef::Semantic(g) | GridRef::Panoptic(g) => g.dims(),
            GridRef::Heatmap(g) | GridRef::TargetHeatmap(g) | GridRef::Weights(g) => g.dims(),
            GridRef::Offsets(g) => g.dims(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DimensionMismatch {
        expected: Dims,
        found: Dims,
    },
    UnknownCategory {
        index: usize,
        row: usize,
        col: usize,
        category: u32,
    },
    NonFinite {
        index: usize,
        row: usize,
        col: usize,
    },
    OutOfRange {
        index: usize,
        row: usize,
        col: usize,
        value: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            Violation::UnknownCategory {
                index,
                row,
                col,
                category,
            } => write!(
                f,
                "pixel {index} (row {row}, col {col}): unknown category id {category}"
            ),
            Violation::NonFinite { index, row, col } => {
                write!(f, "pixel {index} (row {row}, col {col}): non-finite value")
            }
            Violation::OutOfRange {
                index,
                row,
                col,
                value,
            } => write!(
                f,
                "pixel {index} (row {row}, col {col}): value {value} outside [0, 1]"
            ),
        }
    }
}

/// Reports every invariant violation of `grid` under `spec`.
///
/// `expected` optionally pins the grid shape (e.g. to the shape of a
/// companion input). An empty list means the grid is well-formed.
pub fn validate(grid: GridRef<'_>, expected: Option<Dims>, spec: &DatasetSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let dims = grid.dims();
    if let Some(expected) = expected {
        if expected != dims {
            out.push(Violation::DimensionMismatch {
                expected,
                found: dims,
            });
        }
    }
    let at = |index: usize| dims.coords(index);
    match grid {
        GridRef::Semantic(map) => {
            for (index, &v) in map.as_slice().iter().enumerate() {
                if v != spec.ignore_label() && !spec.is_category(v) {
                    let (row, col) = at(index);
                    out.push(Violation::UnknownCategory {
                        index,
                        row,
                        col,
                        category: v,
                    });
                }
            }
        }
        GridRef::Panoptic(map) => {
            for (index, &v) in map.as_slice().iter().enumerate() {
                let (cat, _) = decode_panoptic_id(v, spec.label_divisor());
                if cat != spec.ignore_label() && !spec.is_category(cat) {
                    let (row, col) = at(index);
                    out.push(Violation::UnknownCategory {
                        index,
                        row,
                        col,
                        category: cat,
                    });
                }
            }
        }
        GridRef::Heatmap(h) | GridRef::Weights(h) => {
            for (index, &v) in h.as_slice().iter().enumerate() {
                if !v.is_finite() {
                    let (row, col) = at(index);
                    out.push(Violation::NonFinite { index, row, col });
                }
            }
        }
        GridRef::TargetHeatmap(h) => {
            for (index, &v) in h.as_slice().iter().enumerate() {
                let (row, col) = at(index);
                if !v.is_finite() {
                    out.push(Violation::NonFinite { index, row, col });
                } else if !(0.0..=1.0).contains(&v) {
                    out.push(Violation::OutOfRange {
                        index,
                        row,
                        col,
                        value: v as f64,
                    });
                }
            }
        }
        GridRef::Offsets(o) => {
            for (index, v) in o.as_slice().iter().enumerate() {
                if !(v[0].is_finite() && v[1].is_finite()) {
                    let (row, col) = at(index);
                    out.push(Violation::NonFinite { index, row, col });
                }
            }
        }
    }
    out
}
