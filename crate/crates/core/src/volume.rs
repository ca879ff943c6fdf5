//! Scalar fields on regular grids: raw-file ingestion, resampling, and
//! trilinear point sampling.
//!
//! Voxel values are stored x-fastest, z-slowest. In world space the grid's
//! bounding box is centered at the origin and spans `dims * spacing`; voxel
//! `(i, j, k)` sits at the center of its cell.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Uint8,
    Uint16,
    Float32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::Uint8 => 1,
            Dtype::Uint16 => 2,
            Dtype::Float32 => 4,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uint8" => Some(Dtype::Uint8),
            "uint16" => Some(Dtype::Uint16),
            "float32" => Some(Dtype::Float32),
            _ => None,
        }
    }
}

/// Layout of a raw little-endian volume file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub dtype: Dtype,
    #[serde(default = "unit_spacing")]
    pub spacing: Vec3,
}

fn unit_spacing() -> Vec3 {
    [1.0; 3]
}

impl VolumeMeta {
    pub fn new(dims: [usize; 3], dtype: Dtype) -> Self {
        VolumeMeta { dims, dtype, spacing: unit_spacing() }
    }

    pub fn voxel_count(&self) -> Option<usize> {
        self.dims[0].checked_mul(self.dims[1])?.checked_mul(self.dims[2])
    }

    pub fn payload_len(&self) -> Option<usize> {
        self.voxel_count()?.checked_mul(self.dtype.size())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::format(format!("dims must be positive, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::format(format!(
                "spacing must be finite and positive, got {:?}",
                self.spacing
            )));
        }
        if self.payload_len().is_none() {
            return Err(Error::format("volume dimensions overflow"));
        }
        Ok(())
    }

    /// Parses the Open SciVis naming convention `name_XxYxZ_dtype.raw`.
    pub fn from_filename(name: &str) -> Result<Self> {
        let base = name.rsplit(['/', '\\']).next().unwrap_or(name);
        let stem = base.strip_suffix(".raw").unwrap_or(base);
        let mut parts = stem.rsplitn(3, '_');
        let dtype_tok = parts.next().unwrap_or_default();
        let dims_tok = parts
            .next()
            .ok_or_else(|| Error::format(format!("`{base}` does not follow name_XxYxZ_dtype.raw")))?;
        let dtype = Dtype::parse(dtype_tok)
            .ok_or_else(|| Error::format(format!("unsupported dtype `{dtype_tok}` in `{base}`")))?;
        let dims: Vec<usize> = dims_tok
            .split('x')
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(format!("bad dimensions `{dims_tok}` in `{base}`")))?;
        let dims: [usize; 3] = dims
            .try_into()
            .map_err(|_| Error::format(format!("expected 3 dimensions in `{dims_tok}`")))?;
        let meta = VolumeMeta::new(dims, dtype);
        meta.validate()?;
        Ok(meta)
    }

    /// Parses a TOML sidecar with `dims`, `dtype`, and optional `spacing`.
    pub fn from_sidecar_str(text: &str) -> Result<Self> {
        let meta: VolumeMeta =
            toml::from_str(text).map_err(|e| Error::format(format!("sidecar: {e}")))?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn sidecar_path(raw: &Path) -> PathBuf {
        let mut s = raw.as_os_str().to_owned();
        s.push(".toml");
        PathBuf::from(s)
    }

    /// Sidecar `<file>.toml` if present, otherwise the filename convention.
    pub fn resolve(raw: &Path) -> Result<Self> {
        let sidecar = Self::sidecar_path(raw);
        if sidecar.exists() {
            return Self::from_sidecar_str(&fs::read_to_string(sidecar)?);
        }
        let name = raw
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::format(format!("no usable file name in {}", raw.display())))?;
        Self::from_filename(name)
    }

    pub fn to_sidecar_string(&self) -> String {
        toml::to_string(self).expect("volume metadata serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    dims: [usize; 3],
    spacing: Vec3,
    values: Vec<f64>,
    value_min: f64,
    value_max: f64,
}

impl ScalarField {
    /// Builds a field from x-fastest values. Constant fields are accepted
    /// here (resampling can legitimately produce them); `load_raw` rejects them.
    pub fn new(dims: [usize; 3], spacing: Vec3, values: Vec<f64>) -> Result<Self> {
        VolumeMeta { dims, dtype: Dtype::Float32, spacing }.validate()?;
        if values.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::format(format!(
                "{} values for dims {:?}",
                values.len(),
                dims
            )));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &values {
            if !v.is_finite() {
                return Err(Error::NonFinite("voxel value".into()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Ok(ScalarField { dims, spacing, values, value_min: lo, value_max: hi })
    }

    /// Fills a grid by evaluating `f` at each voxel index.
    pub fn from_fn(dims: [usize; 3], spacing: Vec3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    values.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, values)
    }

    /// Decodes a raw little-endian payload. Integer values are kept as-is.
    pub fn from_raw_bytes(bytes: &[u8], meta: &VolumeMeta) -> Result<Self> {
        meta.validate()?;
        let expected = meta.payload_len().expect("validated");
        if bytes.len() != expected {
            return Err(Error::format(format!(
                "raw payload is {} bytes, expected {} for {:?} {:?}",
                bytes.len(),
                expected,
                meta.dims,
                meta.dtype
            )));
        }
        let values: Vec<f64> = match meta.dtype {
            Dtype::Uint8 => bytes.iter().map(|&b| b as f64).collect(),
            Dtype::Uint16 => bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
                .collect(),
            Dtype::Float32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
        };
        let field = Self::new(meta.dims, meta.spacing, values)?;
        if field.value_min == field.value_max {
            return Err(Error::Degenerate(format!(
                "constant field (all voxels = {})",
                field.value_min
            )));
        }
        Ok(field)
    }

    pub fn load_raw(path: impl AsRef<Path>, meta: &VolumeMeta) -> Result<Self> {
        let path = path.as_ref();
        meta.validate()?;
        let len = fs::metadata(path)?.len();
        if Some(len) != meta.payload_len().map(|l| l as u64) {
            return Err(Error::format(format!(
                "{} is {len} bytes, expected {} for {:?} {:?}",
                path.display(),
                meta.payload_len().unwrap_or(0),
                meta.dims,
                meta.dtype
            )));
        }
        Self::from_raw_bytes(&fs::read(path)?, meta)
    }

    /// Writes values as little-endian `dtype`, for fixtures and round trips.
    pub fn to_raw_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * dtype.size());
        for &v in &self.values {
            match dtype {
                Dtype::Uint8 => out.push(v.round().clamp(0.0, 255.0) as u8),
                Dtype::Uint16 => out.extend((v.round().clamp(0.0, 65535.0) as u16).to_le_bytes()),
                Dtype::Float32 => out.extend((v as f32).to_le_bytes()),
            }
        }
        out
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_min(&self) -> f64 {
        self.value_min
    }

    pub fn value_max(&self) -> f64 {
        self.value_max
    }

    pub fn voxel_count(&self) -> usize {
        self.values.len()
    }

    #[inline]
    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    pub fn extent(&self) -> Vec3 {
        std::array::from_fn(|a| self.dims[a] as f64 * self.spacing[a])
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let e = self.extent();
        (std::array::from_fn(|a| -0.5 * e[a]), std::array::from_fn(|a| 0.5 * e[a]))
    }

    /// Half the bounding-box diagonal.
    pub fn bounding_radius(&self) -> f64 {
        let e = self.extent();
        0.5 * (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let (lo, _) = self.bounds();
        let i = [x, y, z];
        std::array::from_fn(|a| lo[a] + (i[a] as f64 + 0.5) * self.spacing[a])
    }

    /// Trilinear interpolation between voxel centers. Within half a voxel of
    /// the box faces the nearest layer is extended; outside the box the
    /// field reads as `value_min`.
    pub fn sample(&self, p: Vec3) -> f64 {
        let (lo, hi) = self.bounds();
        let mut base = [0usize; 3];
        let mut next = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            if !(p[a] >= lo[a] && p[a] <= hi[a]) {
                return self.value_min;
            }
            let n = self.dims[a];
            let u = ((p[a] - lo[a]) / self.spacing[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n.saturating_sub(2));
            base[a] = i0;
            next[a] = (i0 + 1).min(n - 1);
            frac[a] = u - i0 as f64;
        }
        let [x0, y0, z0] = base;
        let [x1, y1, z1] = next;
        let [fx, fy, fz] = frac;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(self.get(x0, y0, z0), self.get(x1, y0, z0), fx);
        let c10 = lerp(self.get(x0, y1, z0), self.get(x1, y1, z0), fx);
        let c01 = lerp(self.get(x0, y0, z1), self.get(x1, y0, z1), fx);
        let c11 = lerp(self.get(x0, y1, z1), self.get(x1, y1, z1), fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }

    /// Block-average pooling over `factor`^3 blocks; partial boundary blocks
    /// average only the voxels they contain.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("downsample factor must be >= 1"));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let out_dims: [usize; 3] = std::array::from_fn(|a| self.dims[a].div_ceil(factor));
        let spacing: Vec3 = std::array::from_fn(|a| self.spacing[a] * factor as f64);
        Self::from_fn(out_dims, spacing, |ox, oy, oz| {
            let range = |o: usize, a: usize| (o * factor)..((o + 1) * factor).min(self.dims[a]);
            let mut sum = 0.0;
            let mut count = 0usize;
            for z in range(oz, 2) {
                for y in range(oy, 1) {
                    for x in range(ox, 0) {
                        sum += self.get(x, y, z);
                        count += 1;
                    }
                }
            }
            sum / count as f64
        })
    }

    /// Extracts voxels `lo..hi` along each axis.
    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(lo[a] < hi[a] && hi[a] <= self.dims[a]) {
                return Err(Error::invalid(format!(
                    "crop box {lo:?}..{hi:?} out of bounds for dims {:?}",
                    self.dims
                )));
            }
        }
        let dims = std::array::from_fn(|a| hi[a] - lo[a]);
        Self::from_fn(dims, self.spacing, |x, y, z| self.get(x + lo[0], y + lo[1], z + lo[2]))
    }

    /// Uniform bins over `[value_min, value_max]`; `value_max` lands in the last bin.
    pub fn histogram(&self, bins: usize) -> Result<Vec<u64>> {
        if bins == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        let mut counts = vec![0u64; bins];
        let range = self.value_max - self.value_min;
        for &v in &self.values {
            let bin = if range > 0.0 {
                (((v - self.value_min) / range) * bins as f64).floor() as usize
            } else {
                0
            };
            counts[bin.min(bins - 1)] += 1;
        }
        Ok(counts)
    }
}
