//! Dense array containers and the array-file ingestion path.
//!
//! Everything that crosses a process boundary (captured activations, style
//! coefficients, catalog arrays) goes through the `.npy` / `.npz` formats
//! implemented here, so that exports from external generator runs and the
//! built-in generator share one pipeline.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const HEADER_ALIGN: usize = 64;

/// Channels whose population standard deviation falls below this are treated as dead.
pub const DEAD_CHANNEL_STD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum NdioError {
    #[error("malformed array header: {0}")]
    MalformedHeader(String),
    #[error("unsupported layout: column-major arrays are not accepted")]
    UnsupportedLayout,
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("unsupported rank {0} (at most 4 dimensions)")]
    UnsupportedRank(usize),
    #[error("array contains non-finite values")]
    NonFinite,
    #[error("bad archive: {0}")]
    BadArchive(String),
    #[error("archive entry {entry:?}")]
    Entry {
        entry: String,
        #[source]
        source: Box<NdioError>,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, NdioError>;

/// An owned, C-contiguous `f32` array of rank 0 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(NdioError::UnsupportedRank(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NdioError::ShapeMismatch(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NdioError::NonFinite);
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

impl From<Tensor4> for Array {
    fn from(t: Tensor4) -> Self {
        Array {
            shape: t.shape.to_vec(),
            data: t.data,
        }
    }
}

impl TryFrom<Array> for Tensor4 {
    type Error = NdioError;

    fn try_from(a: Array) -> Result<Self> {
        if a.shape.len() != 4 {
            return Err(NdioError::ShapeMismatch(format!(
                "expected a rank-4 array, got shape {:?}",
                a.shape
            )));
        }
        Tensor4::new([a.shape[0], a.shape[1], a.shape[2], a.shape[3]], a.data)
    }
}

/// Row-major `n × c × h × w` tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NdioError::ShapeMismatch(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NdioError::NonFinite);
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// The `h × w` plane for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Concatenate along the sample axis. All parts must agree on `c, h, w`.
    pub fn concat(parts: &[Tensor4]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| NdioError::ShapeMismatch("nothing to concatenate".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(NdioError::ShapeMismatch(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Copy of a single sample as an `1 × c × h × w` tensor.
    pub fn sample(&self, n: usize) -> Tensor4 {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor4 {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }
}

/// Hidden-layer activations captured from a generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub tensor: Tensor4,
    pub layer_id: usize,
    pub standardized: bool,
    /// Channels that were constant over the batch when standardized; they are all zero.
    pub dead_channels: Vec<usize>,
}

impl ActivationTensor {
    pub fn new(tensor: Tensor4, layer_id: usize) -> Self {
        Self {
            tensor,
            layer_id,
            standardized: false,
            dead_channels: Vec::new(),
        }
    }
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn of(t: &Tensor4) -> Self {
        let [n, c, _, _] = t.shape;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let mut count = 0usize;
            let mut sum = 0.0f64;
            for s in 0..n {
                for &v in t.plane(s, ch) {
                    sum += v as f64;
                    count += 1;
                }
            }
            let m = sum / count.max(1) as f64;
            let mut sq = 0.0f64;
            for s in 0..n {
                for &v in t.plane(s, ch) {
                    let d = v as f64 - m;
                    sq += d * d;
                }
            }
            mean[ch] = m;
            std[ch] = (sq / count.max(1) as f64).sqrt();
        }
        Self { mean, std }
    }

    pub fn dead_channels(&self) -> Vec<usize> {
        self.std
            .iter()
            .enumerate()
            .filter(|(_, &s)| s < DEAD_CHANNEL_STD)
            .map(|(c, _)| c)
            .collect()
    }

    /// Apply `(x - mean) / std` per channel; dead channels become zero.
    pub fn apply(&self, t: &Tensor4) -> Result<Tensor4> {
        let [n, c, h, w] = t.shape;
        if c != self.mean.len() {
            return Err(NdioError::ShapeMismatch(format!(
                "stats for {} channels applied to {} channels",
                self.mean.len(),
                c
            )));
        }
        let hw = h * w;
        let mut out = t.data.clone();
        for s in 0..n {
            for ch in 0..c {
                let start = (s * c + ch) * hw;
                let plane = &mut out[start..start + hw];
                if self.std[ch] < DEAD_CHANNEL_STD {
                    plane.fill(0.0);
                } else {
                    let (m, sd) = (self.mean[ch], self.std[ch]);
                    for v in plane.iter_mut() {
                        *v = ((*v as f64 - m) / sd) as f32;
                    }
                }
            }
        }
        Ok(Tensor4 {
            shape: t.shape,
            data: out,
        })
    }
}

/// Zero-mean, unit-variance standardization per channel over all `(n, h, w)`.
pub fn standardize(a: &ActivationTensor) -> ActivationTensor {
    let stats = ChannelStats::of(&a.tensor);
    let tensor = stats.apply(&a.tensor).expect("stats computed from the same tensor");
    ActivationTensor {
        tensor,
        layer_id: a.layer_id,
        standardized: true,
        dead_channels: stats.dead_channels(),
    }
}

/// Cluster memberships `n × K × h × w`; a partition of unity at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipTensor {
    pub tensor: Tensor4,
    pub hard: bool,
}

impl MembershipTensor {
    /// One-hot memberships from per-position cluster assignments laid out `n × h × w`.
    pub fn from_assignments(assign: &[usize], n: usize, k: usize, h: usize, w: usize) -> Self {
        assert_eq!(assign.len(), n * h * w);
        let mut tensor = Tensor4::zeros([n, k, h, w]);
        let hw = h * w;
        for s in 0..n {
            for p in 0..hw {
                let cluster = assign[s * hw + p];
                tensor.data[(s * k + cluster) * hw + p] = 1.0;
            }
        }
        Self { tensor, hard: true }
    }

    pub fn k(&self) -> usize {
        self.tensor.c()
    }

    /// Largest deviation of `Σ_k u` from 1 over all positions.
    pub fn partition_error(&self) -> f64 {
        let [n, k, h, w] = self.tensor.shape;
        let hw = h * w;
        let mut worst = 0.0f64;
        for s in 0..n {
            for p in 0..hw {
                let total: f64 = (0..k).map(|c| self.tensor.data[(s * k + c) * hw + p] as f64).sum();
                worst = worst.max((total - 1.0).abs());
            }
        }
        worst
    }

    /// Hard cluster index per position (`n × h × w`), ties to the lowest cluster.
    pub fn argmax(&self) -> Vec<usize> {
        let [n, k, h, w] = self.tensor.shape;
        let hw = h * w;
        let mut out = vec![0usize; n * hw];
        for s in 0..n {
            for p in 0..hw {
                let mut best = 0;
                let mut best_v = f32::NEG_INFINITY;
                for c in 0..k {
                    let v = self.tensor.data[(s * k + c) * hw + p];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                out[s * hw + p] = best;
            }
        }
        out
    }
}

/// Source sample positions and weights for one output coordinate under the
/// half-pixel (align-corners = false) convention with edge clamping.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinearly resample every `h × w` plane of `t` to `h2 × w2`.
pub fn resample_bilinear(t: &Tensor4, h2: usize, w2: usize) -> Tensor4 {
    assert!(h2 >= 1 && w2 >= 1, "target size must be at least 1x1");
    let [n, c, h, w] = t.shape;
    if (h, w) == (h2, w2) {
        return t.clone();
    }
    let ys = bilinear_taps(h2, h);
    let xs = bilinear_taps(w2, w);
    let mut data = Vec::with_capacity(n * c * h2 * w2);
    for s in 0..n {
        for ch in 0..c {
            let plane = t.plane(s, ch);
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = plane[y0 * w + x0] as f64 * (1.0 - fx) + plane[y0 * w + x1] as f64 * fx;
                    let bot = plane[y1 * w + x0] as f64 * (1.0 - fx) + plane[y1 * w + x1] as f64 * fx;
                    data.push((top * (1.0 - fy) + bot * fy) as f32);
                }
            }
        }
    }
    Tensor4 {
        shape: [n, c, h2, w2],
        data,
    }
}

/// Resample memberships to a new spatial size. The result is soft.
pub fn resample_membership(u: &MembershipTensor, h2: usize, w2: usize) -> MembershipTensor {
    MembershipTensor {
        tensor: resample_bilinear(&u.tensor, h2, w2),
        hard: false,
    }
}

// ---------------------------------------------------------------------------
// .npy
// ---------------------------------------------------------------------------

struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

fn parse_header(text: &str) -> Result<Header> {
    let bad = |m: &str| NdioError::MalformedHeader(m.to_string());
    let body = text.trim();
    let body = body
        .strip_prefix('{')
        .and_then(|b| b.strip_suffix('}'))
        .ok_or_else(|| bad("header is not a dict literal"))?;

    let mut descr = None;
    let mut fortran_order = None;
    let mut shape = None;
    let mut rest = body.trim();
    while !rest.is_empty() {
        let (key, after) = take_quoted(rest).ok_or_else(|| bad("expected a quoted key"))?;
        let after = after
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| bad("expected ':' after key"))?
            .trim_start();
        let after = match key.as_str() {
            "descr" => {
                let (v, a) = take_quoted(after).ok_or_else(|| bad("descr must be a string"))?;
                descr = Some(v);
                a
            }
            "fortran_order" => {
                if let Some(a) = after.strip_prefix("True") {
                    fortran_order = Some(true);
                    a
                } else if let Some(a) = after.strip_prefix("False") {
                    fortran_order = Some(false);
                    a
                } else {
                    return Err(bad("fortran_order must be True or False"));
                }
            }
            "shape" => {
                let close = after.find(')').ok_or_else(|| bad("unterminated shape"))?;
                let inner = after.strip_prefix('(').ok_or_else(|| bad("shape must be a tuple"))?;
                let inner = &inner[..close - 1];
                let dims = inner
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim_end_matches('L').parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("shape entries must be integers"))?;
                shape = Some(dims);
                &after[close + 1..]
            }
            other => return Err(bad(&format!("unexpected key {other:?}"))),
        };
        let after = after.trim_start();
        rest = after.strip_prefix(',').unwrap_or(after).trim_start();
    }

    Ok(Header {
        descr: descr.ok_or_else(|| bad("missing descr"))?,
        fortran_order: fortran_order.ok_or_else(|| bad("missing fortran_order"))?,
        shape: shape.ok_or_else(|| bad("missing shape"))?,
    })
}

fn take_quoted(s: &str) -> Option<(String, &str)> {
    let quote = s.chars().next().filter(|c| *c == '\'' || *c == '"')?;
    let rest = &s[1..];
    let end = rest.find(quote)?;
    Some((rest[..end].to_string(), &rest[end + 1..]))
}

/// Parse a `.npy` byte stream holding little-endian `f4`/`f8` data in C order.
pub fn read_array_file(bytes: &[u8]) -> Result<Array> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(NdioError::MalformedHeader("bad magic".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, offset) = match (major, minor) {
        (1, 0) => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        (2, 0) | (3, 0) => {
            if bytes.len() < 12 {
                return Err(NdioError::MalformedHeader("truncated header length".into()));
            }
            let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
            (len as usize, 12)
        }
        _ => {
            return Err(NdioError::MalformedHeader(format!(
                "unsupported version {major}.{minor}"
            )))
        }
    };
    let header_end = offset + header_len;
    if bytes.len() < header_end {
        return Err(NdioError::MalformedHeader("truncated header".into()));
    }
    let text = std::str::from_utf8(&bytes[offset..header_end])
        .map_err(|_| NdioError::MalformedHeader("header is not text".into()))?;
    let header = parse_header(text)?;

    if header.fortran_order {
        return Err(NdioError::UnsupportedLayout);
    }
    let width = match header.descr.as_str() {
        "<f4" => 4,
        "<f8" => 8,
        other => return Err(NdioError::UnsupportedDtype(other.to_string())),
    };
    if header.shape.len() > 4 {
        return Err(NdioError::UnsupportedRank(header.shape.len()));
    }
    let count: usize = header.shape.iter().product();
    let payload = &bytes[header_end..];
    if payload.len() != count * width {
        return Err(NdioError::MalformedHeader(format!(
            "payload holds {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            count * width
        )));
    }
    let data: Vec<f32> = if width == 4 {
        payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    } else {
        payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()) as f32)
            .collect()
    };
    Array::new(header.shape, data)
}

/// Encode as a version 1.0 `.npy` file with `<f4` payload, header padded to 64 bytes.
pub fn write_array_file(a: &Array) -> Vec<u8> {
    let shape = match a.shape.len() {
        0 => "()".to_string(),
        1 => format!("({},)", a.shape[0]),
        _ => format!(
            "({})",
            a.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    let unpadded = MAGIC.len() + 4 + header.len() + 1;
    let pad = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + a.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in &a.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

// ---------------------------------------------------------------------------
// .npz
// ---------------------------------------------------------------------------

/// Read every `.npy` entry of a stored or deflated zip archive.
pub fn read_archive(bytes: &[u8]) -> Result<BTreeMap<String, Array>> {
    let mut zip = zip::ZipArchive::new(Cursor::new(bytes)).map_err(|e| NdioError::BadArchive(e.to_string()))?;
    let mut out = BTreeMap::new();
    for i in 0..zip.len() {
        let mut entry = zip.by_index(i).map_err(|e| NdioError::BadArchive(e.to_string()))?;
        if entry.is_dir() {
            continue;
        }
        let name = entry.name().to_string();
        let key = name.strip_suffix(".npy").unwrap_or(&name).to_string();
        let mut buf = Vec::with_capacity(entry.size() as usize);
        entry
            .read_to_end(&mut buf)
            .map_err(|e| NdioError::BadArchive(format!("{name}: {e}")))?;
        let array = read_array_file(&buf).map_err(|e| NdioError::Entry {
            entry: key.clone(),
            source: Box::new(e),
        })?;
        out.insert(key, array);
    }
    Ok(out)
}

/// Write arrays as an uncompressed archive. Entry order and timestamps are fixed,
/// so equal inputs give byte-identical archives.
pub fn write_archive(arrays: &BTreeMap<String, Array>) -> Vec<u8> {
    let mut zip = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let options = zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default())
        .unix_permissions(0o644);
    for (name, array) in arrays {
        zip.start_file(format!("{name}.npy"), options)
            .expect("in-memory zip write");
        zip.write_all(&write_array_file(array)).expect("in-memory zip write");
    }
    zip.finish().expect("in-memory zip write").into_inner()
}
