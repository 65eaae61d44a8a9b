//! Binary tensor container plus the JSON dataset-spec and instance files.
//!
//! Layout (all little-endian): magic `PDLT`, `u16` version 1, `u8` dtype
//! (1 = u16, 2 = u32, 3 = f32), `u8` rank (2 or 3), one `u32` per dimension,
//! then the row-major payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::postprocess::InstanceRecord;
use crate::types::{
    BoolGrid, CategorySpec, DatasetSpec, Dims, Grid, Heatmap, LabelMap, OffsetField, ScoreVolume, ShapeError,
    SpecError, Volume,
};

pub const MAGIC: [u8; 4] = *b"PDLT";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U16,
    U32,
    F32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::U16 => 1,
            DType::U32 => 2,
            DType::F32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::U16),
            2 => Some(DType::U32),
            3 => Some(DType::F32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U16 => 2,
            DType::U32 | DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U16(Vec<u16>),
    U32(Vec<u32>),
    F32(Vec<f32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::U16(_) => DType::U16,
            TensorData::U32(_) => DType::U32,
            TensorData::F32(_) => DType::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::U16(v) => v.len(),
            TensorData::U32(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a tensor file: expected magic PDLT, found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported tensor version {0} (expected 1)")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported rank {0} (expected 2 or 3)")]
    BadRank(u8),
    #[error("tensor has shape {shape:?} and dtype {dtype:?}: expected {expected} payload bytes, found {actual}")]
    LengthMismatch {
        shape: Vec<u32>,
        dtype: DType,
        expected: u64,
        actual: u64,
    },
    #[error("expected {expected}, found dtype {dtype:?} with shape {shape:?}")]
    Kind {
        expected: &'static str,
        dtype: DType,
        shape: Vec<u32>,
    },
    #[error("value {value} at element {index} does not fit the {target}")]
    ValueOutOfRange {
        index: usize,
        value: String,
        target: &'static str,
    },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// A decoded tensor: shape plus typed row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<u32>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<u32>, data: TensorData) -> Result<Self, TensorError> {
        if !(2..=3).contains(&shape.len()) {
            return Err(TensorError::BadRank(shape.len() as u8));
        }
        let expected: u64 = shape.iter().map(|&d| d as u64).product();
        if expected != data.len() as u64 {
            return Err(TensorError::LengthMismatch {
                dtype: data.dtype(),
                expected: expected * data.dtype().size() as u64,
                actual: (data.len() * data.dtype().size()) as u64,
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.shape.len() + self.data.len() * self.dtype().size());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(TensorError::BadMagic {
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(TensorError::LengthMismatch {
                shape: Vec::new(),
                dtype: DType::U16,
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(TensorError::UnsupportedVersion(version));
        }
        let dtype = DType::from_code(bytes[6]).ok_or(TensorError::UnsupportedDtype(bytes[6]))?;
        let ndim = bytes[7];
        if !(2..=3).contains(&ndim) {
            return Err(TensorError::BadRank(ndim));
        }
        let dims_end = HEADER_LEN + 4 * ndim as usize;
        if bytes.len() < dims_end {
            return Err(TensorError::LengthMismatch {
                shape: Vec::new(),
                dtype,
                expected: dims_end as u64,
                actual: bytes.len() as u64,
            });
        }
        let shape: Vec<u32> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let count: u64 = shape.iter().map(|&d| d as u64).product();
        let payload = &bytes[dims_end..];
        let expected = count * dtype.size() as u64;
        if payload.len() as u64 != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                dtype,
                expected,
                actual: payload.len() as u64,
            });
        }
        let data = match dtype {
            DType::U16 => TensorData::U16(payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()),
            DType::U32 => TensorData::U32(
                payload
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        Ok(Tensor { shape, data })
    }

    fn kind_error(&self, expected: &'static str) -> TensorError {
        TensorError::Kind {
            expected,
            dtype: self.dtype(),
            shape: self.shape.clone(),
        }
    }

    fn grid_dims(&self) -> Result<Dims, TensorError> {
        Ok(Dims::new(self.shape[0] as usize, self.shape[1] as usize)?)
    }

    pub fn from_label_map(map: &LabelMap) -> Self {
        Tensor {
            shape: grid_shape(map.dims()),
            data: TensorData::U32(map.as_slice().to_vec()),
        }
    }

    /// Stores a label map as u16; fails when a value does not fit.
    pub fn from_label_map_u16(map: &LabelMap) -> Result<Self, TensorError> {
        let data = map
            .as_slice()
            .iter()
            .enumerate()
            .map(|(index, &v)| {
                u16::try_from(v).map_err(|_| TensorError::ValueOutOfRange {
                    index,
                    value: v.to_string(),
                    target: "u16 range",
                })
            })
            .collect::<Result<Vec<u16>, _>>()?;
        Ok(Tensor {
            shape: grid_shape(map.dims()),
            data: TensorData::U16(data),
        })
    }

    /// Accepts rank-2 u16 or u32 data.
    pub fn to_label_map(&self) -> Result<LabelMap, TensorError> {
        if self.shape.len() != 2 {
            return Err(self.kind_error("a rank-2 integer label map"));
        }
        let dims = self.grid_dims()?;
        let data = match &self.data {
            TensorData::U16(v) => v.iter().map(|&x| x as u32).collect(),
            TensorData::U32(v) => v.clone(),
            TensorData::F32(_) => return Err(self.kind_error("a rank-2 integer label map")),
        };
        Ok(Grid::from_vec(dims, data)?)
    }

    pub fn from_heatmap(map: &Heatmap) -> Self {
        Tensor {
            shape: grid_shape(map.dims()),
            data: TensorData::F32(map.as_slice().to_vec()),
        }
    }

    pub fn to_heatmap(&self) -> Result<Heatmap, TensorError> {
        match (&self.data, self.shape.len()) {
            (TensorData::F32(v), 2) => Ok(Grid::from_vec(self.grid_dims()?, v.clone())?),
            _ => Err(self.kind_error("a rank-2 f32 heatmap")),
        }
    }

    /// Offsets are stored as an `(H, W, 2)` f32 tensor of `[d_row, d_col]`.
    pub fn from_offsets(field: &OffsetField) -> Self {
        let mut shape = grid_shape(field.dims());
        shape.push(2);
        Tensor {
            shape,
            data: TensorData::F32(field.as_slice().iter().flatten().copied().collect()),
        }
    }

    pub fn to_offsets(&self) -> Result<OffsetField, TensorError> {
        match (&self.data, self.shape.as_slice()) {
            (TensorData::F32(v), [_, _, 2]) => {
                let data = v.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
                Ok(Grid::from_vec(self.grid_dims()?, data)?)
            }
            _ => Err(self.kind_error("an (H, W, 2) f32 offset field")),
        }
    }

    /// Per-pixel class scores as an `(H, W, C)` f32 tensor.
    pub fn from_volume(volume: &ScoreVolume) -> Self {
        let mut shape = grid_shape(volume.dims());
        shape.push(volume.channels() as u32);
        Tensor {
            shape,
            data: TensorData::F32(volume.as_slice().to_vec()),
        }
    }

    pub fn to_volume(&self) -> Result<ScoreVolume, TensorError> {
        match (&self.data, self.shape.as_slice()) {
            (TensorData::F32(v), [_, _, c]) => Ok(Volume::from_vec(self.grid_dims()?, *c as usize, v.clone())?),
            _ => Err(self.kind_error("an (H, W, C) f32 score volume")),
        }
    }

    /// Masks are written as u16 zeros and ones.
    pub fn from_bool_grid(mask: &BoolGrid) -> Self {
        Tensor {
            shape: grid_shape(mask.dims()),
            data: TensorData::U16(mask.as_slice().iter().map(|&b| b as u16).collect()),
        }
    }

    pub fn to_bool_grid(&self) -> Result<BoolGrid, TensorError> {
        let labels = self.to_label_map()?;
        if let Some((index, &v)) = labels.as_slice().iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(TensorError::ValueOutOfRange {
                index,
                value: v.to_string(),
                target: "0/1 mask",
            });
        }
        Ok(labels.map(|&v| v == 1))
    }
}

fn grid_shape(dims: Dims) -> Vec<u32> {
    vec![dims.height as u32, dims.width as u32]
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<(), TensorError> {
    fs::write(path, tensor.to_bytes()).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_tensor(path: &Path) -> Result<Tensor, TensorError> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Tensor::from_bytes(&bytes)
}

/// On-disk JSON form of a [`DatasetSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecFile {
    pub categories: Vec<CategorySpec>,
    pub ignore_label: u32,
    #[serde(default = "default_divisor")]
    pub label_divisor: u32,
    #[serde(default)]
    pub stuff_area_threshold: Option<u64>,
}

fn default_divisor() -> u32 {
    1000
}

impl From<&DatasetSpec> for SpecFile {
    fn from(spec: &DatasetSpec) -> Self {
        SpecFile {
            categories: spec.categories().to_vec(),
            ignore_label: spec.ignore_label(),
            label_divisor: spec.label_divisor(),
            stuff_area_threshold: Some(spec.stuff_area_threshold()),
        }
    }
}

#[derive(Debug, Error)]
pub enum SpecFileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed spec JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] SpecError),
}

/// Parses a spec; the second value lists non-fatal warnings.
pub fn parse_spec_with_warnings(text: &str) -> Result<(DatasetSpec, Vec<String>), SpecFileError> {
    let file: SpecFile = serde_json::from_str(text)?;
    let mut warnings = Vec::new();
    let threshold = file.stuff_area_threshold.unwrap_or_else(|| {
        warnings.push("stuff_area_threshold missing, using 0 (no stuff filtering)".to_string());
        0
    });
    let spec = DatasetSpec::new(file.categories, file.ignore_label, file.label_divisor, threshold)?;
    Ok((spec, warnings))
}

/// Reads a spec file, logging any warnings.
pub fn read_spec(path: &Path) -> Result<DatasetSpec, SpecFileError> {
    let text = fs::read_to_string(path).map_err(|source| SpecFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (spec, warnings) = parse_spec_with_warnings(&text)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(spec)
}

pub fn write_spec(path: &Path, spec: &DatasetSpec) -> Result<(), SpecFileError> {
    let text = serde_json::to_string_pretty(&SpecFile::from(spec))?;
    fs::write(path, text).map_err(|source| SpecFileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_instances(path: &Path, instances: &[InstanceRecord]) -> Result<(), SpecFileError> {
    let text = serde_json::to_string_pretty(instances)?;
    fs::write(path, text).map_err(|source| SpecFileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_instances(path: &Path) -> Result<Vec<InstanceRecord>, SpecFileError> {
    let text = fs::read_to_string(path).map_err(|source| SpecFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}
