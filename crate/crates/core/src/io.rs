//! File formats, seeded data generation and the stack manifest.
//!
//! Matrix container (`.dspm`), all integers little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `DSPM`                            |
//! | 4      | 1    | version (= 1)                           |
//! | 5      | 1    | dtype: 0 = f32, 1 = f64                 |
//! | 6      | 1    | flags: bit0 = mask                      |
//! | 7      | 1    | reserved (0)                            |
//! | 8      | 4    | rows (u32)                              |
//! | 12     | 4    | cols (u32)                              |
//! | 16     | …    | row-major payload, `rows·cols` scalars  |
//!
//! Random numbers come from xoshiro256++ seeded through SplitMix64
//! (`seed_from_u64`). Uniforms are `(next_u64 >> 11)·2⁻⁵³`; normals use the
//! Box–Muller pair `√(−2 ln(1−u₁))·(cos 2πu₂, sin 2πu₂)`, returning the
//! cosine branch first and the sine branch on the next call.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::pipeline::{Activation, Layer, LayerStack};
use crate::sparsity::BitMask;

pub const MAGIC: &[u8; 4] = b"DSPM";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
const FLAG_MASK: u8 = 1;

/// Version tag carried by manifests and JSON reports.
pub const MANIFEST_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

pub struct Xoshiro {
    inner: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl Xoshiro {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * theta.sin());
        radius * theta.cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distribution {
    Normal,
    ReluNormal,
}

impl FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Distribution::Normal),
            "relu-normal" => Ok(Distribution::ReluNormal),
            other => Err(Error::InvalidConfig(format!(
                "unknown distribution {other:?} (expected normal or relu-normal)"
            ))),
        }
    }
}

/// Seeded `k × m` calibration matrix, filled row-major.
pub fn gen_calibration(k: usize, m: usize, seed: u64, dist: Distribution) -> Result<DenseMatrix> {
    if k == 0 || m == 0 {
        return Err(Error::InvalidConfig(format!("calibration shape must be positive, got {k}×{m}")));
    }
    let mut rng = Xoshiro::new(seed);
    Ok(DenseMatrix::from_fn(k, m, |_, _| {
        let z = rng.normal();
        match dist {
            Distribution::Normal => z,
            Distribution::ReluNormal => z.max(0.0),
        }
    }))
}

/// Seeded `n × k` weights with entries `N(0, 1/k)`.
pub fn gen_weights(n: usize, k: usize, seed: u64) -> Result<DenseMatrix> {
    if n == 0 || k == 0 {
        return Err(Error::InvalidConfig(format!("weight shape must be positive, got {n}×{k}")));
    }
    let mut rng = Xoshiro::new(seed);
    let scale = 1.0 / (k as f64).sqrt();
    Ok(DenseMatrix::from_fn(n, k, |_, _| scale * rng.normal()))
}

/// Correlated inputs `x = A·z/√r + σ·ε` with a seeded `k × r` mixing
/// matrix `A` and standard normal `z`, `ε`. Unlike i.i.d. columns, pruned
/// small entries are partly predictable from the surviving large ones.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    mixing: DenseMatrix,
    noise: f64,
}

impl FactorModel {
    pub fn new(k: usize, rank: usize, noise: f64, seed: u64) -> Result<Self> {
        if rank == 0 || !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::InvalidConfig(format!("factor model needs rank ≥ 1 and noise ≥ 0, got {rank}, {noise}")));
        }
        let scale = 1.0 / (rank as f64).sqrt();
        let mixing = gen_calibration(k, rank, seed, Distribution::Normal)?.scale(scale);
        Ok(Self { mixing, noise })
    }

    pub fn dim(&self) -> usize {
        self.mixing.rows()
    }

    /// `m` samples; the latent draws come first, then the noise, from one
    /// generator seeded with `seed`.
    pub fn sample(&self, m: usize, seed: u64) -> Result<DenseMatrix> {
        if m == 0 {
            return Err(Error::InvalidConfig("sample count must be positive".into()));
        }
        let (k, r) = self.mixing.shape();
        let mut rng = Xoshiro::new(seed);
        let z = DenseMatrix::from_fn(r, m, |_, _| rng.normal());
        let mut x = self.mixing.matmul(&z)?;
        for v in x.data_mut() {
            *v += self.noise * rng.normal();
        }
        debug_assert_eq!(x.shape(), (k, m));
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixHeader {
    pub dtype: Dtype,
    pub is_mask: bool,
    pub rows: usize,
    pub cols: usize,
}

/// Serializes `m` into the container layout.
pub fn encode_matrix(m: &DenseMatrix, dtype: Dtype, is_mask: bool) -> Result<Vec<u8>> {
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("dimension {v} does not fit in u32")))
    };
    let (rows, cols) = (dim(m.rows())?, dim(m.cols())?);
    if let Some(index) = m.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue {
            path: PathBuf::from("<memory>"),
            index,
        });
    }

    let mut out = Vec::with_capacity(HEADER_LEN + m.data().len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(dtype.code());
    out.push(if is_mask { FLAG_MASK } else { 0 });
    out.push(0);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    match dtype {
        Dtype::F32 => m.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => m.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Parses a container; `path` is only used in error messages.
pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<(DenseMatrix, MatrixHeader)> {
    let path_buf = || path.to_path_buf();
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path_buf() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            path: path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path_buf(),
            version: bytes[4],
        });
    }
    let dtype = Dtype::from_code(bytes[5]).ok_or_else(|| Error::InvalidFile {
        path: path_buf(),
        reason: format!("unknown dtype code {}", bytes[5]),
    })?;
    let is_mask = bytes[6] & FLAG_MASK != 0;
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;

    let payload = &bytes[HEADER_LEN..];
    let expected = rows * cols * dtype.width();
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path_buf(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::InvalidFile {
            path: path_buf(),
            reason: format!("{} trailing bytes after payload", payload.len() - expected),
        });
    }

    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { path: path_buf(), index });
    }
    if is_mask {
        if let Some(i) = data.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidFile {
                path: path_buf(),
                reason: format!("mask entry {i} is {} (expected 0 or 1)", data[i]),
            });
        }
    }
    let header = MatrixHeader {
        dtype,
        is_mask,
        rows,
        cols,
    };
    Ok((DenseMatrix::new(rows, cols, data)?, header))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_matrix_with_header(path: &Path) -> Result<(DenseMatrix, MatrixHeader)> {
    decode_matrix(&read_bytes(path)?, path)
}

pub fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    read_matrix_with_header(path).map(|(m, _)| m)
}

pub fn write_matrix(m: &DenseMatrix, path: &Path, dtype: Dtype) -> Result<()> {
    let bytes = encode_matrix(m, dtype, false).map_err(|e| with_path(e, path))?;
    write_bytes(path, &bytes)
}

/// Masks are stored as f32 0/1 payloads with the mask flag set.
pub fn write_mask(mask: &BitMask, path: &Path) -> Result<()> {
    let bytes = encode_matrix(&mask.to_matrix(), Dtype::F32, true)?;
    write_bytes(path, &bytes)
}

pub fn read_mask(path: &Path) -> Result<BitMask> {
    let (m, header) = read_matrix_with_header(path)?;
    if !header.is_mask {
        return Err(Error::InvalidFile {
            path: path.to_path_buf(),
            reason: "mask flag not set".into(),
        });
    }
    BitMask::new(m.rows(), m.cols(), m.data().iter().map(|&v| v == 1.0).collect())
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::NonFiniteValue { index, .. } => Error::NonFiniteValue {
            path: path.to_path_buf(),
            index,
        },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LayerEntry {
    pub weights_path: PathBuf,
    pub activation: Activation,
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StackManifest {
    pub format_version: u32,
    pub layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct LoadedStack {
    pub manifest: StackManifest,
    pub stack: LayerStack,
    /// Mask per layer, if the manifest references one.
    pub masks: Vec<Option<BitMask>>,
    pub dtypes: Vec<Dtype>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Loads a manifest and every file it references. Relative paths resolve
/// against the manifest's directory.
pub fn load_stack(manifest_path: &Path) -> Result<LoadedStack> {
    let manifest: StackManifest = read_json(manifest_path)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::InvalidFile {
            path: manifest_path.to_path_buf(),
            reason: format!("unsupported manifest version {}", manifest.format_version),
        });
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut masks = Vec::with_capacity(manifest.layers.len());
    let mut dtypes = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let path = base.join(&entry.weights_path);
        let (w, header) = read_matrix_with_header(&path)?;
        if w.shape() != (entry.rows, entry.cols) {
            return Err(Error::InvalidFile {
                path,
                reason: format!(
                    "manifest declares {}×{}, file holds {}×{}",
                    entry.rows,
                    entry.cols,
                    w.rows(),
                    w.cols()
                ),
            });
        }
        let mask = match &entry.mask_path {
            Some(p) => {
                let mp = base.join(p);
                let mask = read_mask(&mp)?;
                if mask.shape() != w.shape() {
                    return Err(Error::InvalidFile {
                        path: mp,
                        reason: format!("mask shape {:?} differs from weights {:?}", mask.shape(), w.shape()),
                    });
                }
                Some(mask)
            }
            None => None,
        };
        layers.push(Layer::new(w, entry.activation));
        masks.push(mask);
        dtypes.push(header.dtype);
    }
    let stack = LayerStack::new(layers)?;
    Ok(LoadedStack {
        manifest,
        stack,
        masks,
        dtypes,
    })
}

/// Writes `layer{i}.dspm` (and `layer{i}.mask.dspm` when masks are given)
/// next to `manifest_path`, then the manifest itself.
pub fn save_stack(
    manifest_path: &Path,
    stack: &LayerStack,
    masks: Option<&[BitMask]>,
    dtypes: &[Dtype],
    config: Option<serde_json::Value>,
) -> Result<StackManifest> {
    let n = stack.layers().len();
    if dtypes.len() != n || masks.is_some_and(|m| m.len() != n) {
        return Err(Error::dims("save_stack", format!("{n} dtypes and masks"), dtypes.len()));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    if !base.as_os_str().is_empty() {
        fs::create_dir_all(base).map_err(|source| Error::Io {
            path: base.to_path_buf(),
            source,
        })?;
    }
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("stack");
    let mut entries = Vec::with_capacity(n);
    for (i, layer) in stack.layers().iter().enumerate() {
        let weights_path = PathBuf::from(format!("{stem}.layer{i}.dspm"));
        write_matrix(&layer.w, &base.join(&weights_path), dtypes[i])?;
        let mask_path = match masks {
            Some(ms) => {
                let p = PathBuf::from(format!("{stem}.layer{i}.mask.dspm"));
                write_mask(&ms[i], &base.join(&p))?;
                Some(p)
            }
            None => None,
        };
        entries.push(LayerEntry {
            weights_path,
            activation: layer.activation,
            rows: layer.w.rows(),
            cols: layer.w.cols(),
            mask_path,
        });
    }
    let manifest = StackManifest {
        format_version: MANIFEST_VERSION,
        layers: entries,
        config,
    };
    write_json(&manifest, manifest_path)?;
    Ok(manifest)
}
