//! Frame transforms and the LBTF tensor format.
//!
//! Frames are 8-bit, row-major, either grayscale or interleaved RGB. All 3x3
//! and 5x5 convolutions use replicate borders.
//!
//! LBTF layout, all integers little-endian:
//!
//! ```text
//! b"LBTF" | version: u16 = 1 | dtype: u8 (0 = u8, 1 = f32, 2 = f64) | rank: u8
//! | dims: rank x u64 | data: product(dims) elements, row-major
//! ```

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const DEFAULT_WIDTH: usize = 300;
pub const DEFAULT_HEIGHT: usize = 200;

pub const CANNY_SIGMA: f64 = 1.4;
pub const CANNY_LOW: f64 = 0.1;
pub const CANNY_HIGH: f64 = 0.3;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("expected {expected} channel(s), got {got}")]
    Channels { expected: usize, got: usize },
    #[error("image {width}x{height} is smaller than 3x3")]
    TooSmall { width: usize, height: usize },
    #[error("thresholds must satisfy 0 <= low < high <= 1, got low={low} high={high}")]
    Thresholds { low: f64, high: f64 },
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("unsupported pixel format in {0}")]
    UnsupportedFormat(PathBuf),
    #[error("frames differ in size: {0}")]
    SizeMismatch(String),
    #[error("no frames found in {0}")]
    NoFrames(PathBuf),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(PreprocessError::Channels { expected: 1, got: channels });
        }
        let expected = width * height * channels;
        if pixels.len() != expected {
            return Err(PreprocessError::Length { expected, actual: pixels.len() });
        }
        Ok(Self { width, height, channels, pixels })
    }

    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, pixels)
    }

    pub fn gray_from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, channels: 1, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Grayscale intensity at `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn transpose(&self) -> Frame {
        let c = self.channels;
        let mut out = vec![0u8; self.pixels.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + x) * c;
                let dst = (x * self.height + y) * c;
                out[dst..dst + c].copy_from_slice(&self.pixels[src..src + c]);
            }
        }
        Frame { width: self.height, height: self.width, channels: c, pixels: out }
    }

    fn require_gray(&self) -> Result<()> {
        if self.channels != 1 {
            return Err(PreprocessError::Channels { expected: 1, got: self.channels });
        }
        if self.width < 3 || self.height < 3 {
            return Err(PreprocessError::TooSmall { width: self.width, height: self.height });
        }
        Ok(())
    }
}

/// BT.601 luma, rounded to nearest.
pub fn to_grayscale(frame: &Frame) -> Result<Frame> {
    if frame.channels != 3 {
        return Err(PreprocessError::Channels { expected: 3, got: frame.channels });
    }
    let pixels = frame
        .pixels
        .chunks_exact(3)
        .map(|px| {
            let l = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
            l.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(Frame { width: frame.width, height: frame.height, channels: 1, pixels })
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Integer 3x3 correlation with replicate borders.
fn correlate3(frame: &Frame, kernel: &[[i32; 3]; 3]) -> Vec<i32> {
    let (w, h) = (frame.width, frame.height);
    let mut out = vec![0i32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0i32;
            for (ky, row) in kernel.iter().enumerate() {
                let sy = clamp_index(y as isize + ky as isize - 1, h);
                for (kx, &k) in row.iter().enumerate() {
                    if k != 0 {
                        let sx = clamp_index(x as isize + kx as isize - 1, w);
                        acc += k * frame.pixels[sy * w + sx] as i32;
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

const SOBEL_X: [[i32; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
const SOBEL_Y: [[i32; 3]; 3] = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];
const LAPLACE: [[i32; 3]; 3] = [[0, 1, 0], [1, -4, 1], [0, 1, 0]];

/// Sobel gradient magnitude, rounded and clamped to `[0, 255]`.
pub fn sobel(frame: &Frame) -> Result<Frame> {
    frame.require_gray()?;
    let gx = correlate3(frame, &SOBEL_X);
    let gy = correlate3(frame, &SOBEL_Y);
    let pixels = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| ((a as f64).hypot(b as f64).round()).min(255.0) as u8)
        .collect();
    Ok(Frame { pixels, ..frame.clone() })
}

/// Absolute 4-neighbor Laplacian response, clamped to `[0, 255]`.
pub fn laplacian(frame: &Frame) -> Result<Frame> {
    frame.require_gray()?;
    let pixels = correlate3(frame, &LAPLACE)
        .into_iter()
        .map(|r| r.unsigned_abs().min(255) as u8)
        .collect();
    Ok(Frame { pixels, ..frame.clone() })
}

fn gaussian5(sigma: f64) -> [[f64; 5]; 5] {
    let mut k = [[0.0; 5]; 5];
    let mut sum = 0.0;
    for (y, row) in k.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let (dx, dy) = (x as f64 - 2.0, y as f64 - 2.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            sum += *v;
        }
    }
    k.iter_mut().flatten().for_each(|v| *v /= sum);
    k
}

fn correlate_f64<const N: usize>(img: &[f64], w: usize, h: usize, kernel: &[[f64; N]; N]) -> Vec<f64> {
    let r = (N / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ky, row) in kernel.iter().enumerate() {
                let sy = clamp_index(y as isize + ky as isize - r, h);
                for (kx, &k) in row.iter().enumerate() {
                    let sx = clamp_index(x as isize + kx as isize - r, w);
                    acc += k * img[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Canny edges with the default blur (sigma 1.4, 5x5). `low` and `high` are
/// fractions of the largest gradient magnitude. Output pixels are 0 or 255.
pub fn canny(frame: &Frame, low: f64, high: f64) -> Result<Frame> {
    if !(0.0 <= low && low < high && high <= 1.0) {
        return Err(PreprocessError::Thresholds { low, high });
    }
    frame.require_gray()?;
    let (w, h) = (frame.width, frame.height);
    let src: Vec<f64> = frame.pixels.iter().map(|&p| p as f64).collect();
    let blurred = correlate_f64(&src, w, h, &gaussian5(CANNY_SIGMA));
    let to_f = |k: &[[i32; 3]; 3]| k.map(|row| row.map(|v| v as f64));
    let gx = correlate_f64(&blurred, w, h, &to_f(&SOBEL_X));
    let gy = correlate_f64(&blurred, w, h, &to_f(&SOBEL_Y));
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(Frame { pixels: vec![0; w * h], ..frame.clone() });
    }

    // Non-maximum suppression. A pixel survives if it beats the neighbor
    // behind it strictly and the one ahead of it weakly, so a plateau of two
    // equal maxima keeps exactly one pixel.
    let mut thin = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (dx, dy): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let at = |ox: isize, oy: isize| {
                mag[clamp_index(y as isize + oy, h) * w + clamp_index(x as isize + ox, w)]
            };
            let ahead = at(dx, dy);
            let behind = at(-dx, -dy);
            if m > behind && m >= ahead {
                thin[i] = m;
            }
        }
    }

    let (lo, hi) = (low * max, high * max);
    let mut out = vec![0u8; w * h];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= hi && m > 0.0 {
            out[i] = 255;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for oy in -1..=1 {
            for ox in -1..=1 {
                let (nx, ny) = (x + ox, y + oy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0 && thin[j] >= lo && thin[j] > 0.0 {
                    out[j] = 255;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(Frame { pixels: out, ..frame.clone() })
}

/// Reads a binary PGM (P5) or PPM (P6) file.
pub fn read_pnm(path: &Path) -> Result<Frame> {
    let img = image::ImageReader::open(path)
        .map_err(|source| PreprocessError::Io { path: path.to_path_buf(), source })?
        .with_guessed_format()
        .map_err(|source| PreprocessError::Io { path: path.to_path_buf(), source })?
        .decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(g) => Frame::new(w, h, 1, g.into_raw()),
        image::DynamicImage::ImageRgb8(c) => Frame::new(w, h, 3, c.into_raw()),
        _ => Err(PreprocessError::UnsupportedFormat(path.to_path_buf())),
    }
}

/// Writes a frame as binary PGM (grayscale) or PPM (RGB).
pub fn write_pnm(frame: &Frame, path: &Path) -> Result<()> {
    let color = if frame.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &frame.pixels,
        frame.width as u32,
        frame.height as u32,
        color,
        image::ImageFormat::Pnm,
    )?;
    Ok(())
}

/// Frame files (`.pgm`, `.ppm`, `.pnm`) of a directory in lexicographic order.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |source| PreprocessError::Io { path: dir.to_path_buf(), source };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("pgm" | "ppm" | "pnm")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(PreprocessError::NoFrames(dir.to_path_buf()));
    }
    Ok(files)
}

/// Stacks same-sized frames into a `(T, H, W)` or `(T, H, W, 3)` u8 tensor.
pub fn stack_frames(frames: &[Frame]) -> Result<FrameTensor> {
    let first = frames.first().ok_or_else(|| PreprocessError::NoFrames(PathBuf::new()))?;
    let mut data = Vec::with_capacity(frames.len() * first.pixels.len());
    for (i, f) in frames.iter().enumerate() {
        if (f.width, f.height, f.channels) != (first.width, first.height, first.channels) {
            return Err(PreprocessError::SizeMismatch(format!(
                "frame {i} is {}x{}x{}, frame 0 is {}x{}x{}",
                f.width, f.height, f.channels, first.width, first.height, first.channels
            )));
        }
        data.extend_from_slice(&f.pixels);
    }
    let mut dims = vec![frames.len(), first.height, first.width];
    if first.channels == 3 {
        dims.push(3);
    }
    Ok(FrameTensor::from_u8(dims, data)?)
}

// ---------------------------------------------------------------------------
// LBTF

pub const LBTF_MAGIC: &[u8; 4] = b"LBTF";
pub const LBTF_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported LBTF version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated buffer: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("{0} trailing bytes after tensor data")]
    TrailingBytes(u64),
    #[error("dimension product overflows")]
    DimensionOverflow,
    #[error("rank {0} exceeds 255")]
    RankTooLarge(usize),
    #[error("data has {actual} elements, dims require {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("tensor dtype does not match the requested type")]
    DtypeMismatch,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8 = 0,
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::U8),
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

/// Dense row-major tensor. An empty `dims` list is a scalar with one element.
#[derive(Debug, Clone)]
pub struct FrameTensor {
    dims: Vec<usize>,
    data: TensorData,
}

/// Bitwise equality, so NaN payloads compare equal to themselves.
impl PartialEq for FrameTensor {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && match (&self.data, &other.data) {
                (TensorData::U8(a), TensorData::U8(b)) => a == b,
                (TensorData::F32(a), TensorData::F32(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                (TensorData::F64(a), TensorData::F64(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                _ => false,
            }
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl FrameTensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        let expected = element_count(&dims).ok_or(TensorError::DimensionOverflow)?;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch { expected, actual: data.len() });
        }
        if dims.len() > u8::MAX as usize {
            return Err(TensorError::RankTooLarge(dims.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn from_u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::U8(data))
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn from_f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F64(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::U8(_) => Dtype::U8,
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_f64(self) -> Option<Vec<f64>> {
        match self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn into_u8(self) -> Option<Vec<u8>> {
        match self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = element_count(&self.dims).unwrap_or(0);
        let mut buf = Vec::with_capacity(8 + 8 * self.dims.len() + n * self.dtype().size());
        buf.extend_from_slice(LBTF_MAGIC);
        buf.extend_from_slice(&LBTF_VERSION.to_le_bytes());
        buf.push(self.dtype() as u8);
        buf.push(self.dims.len() as u8);
        for &d in &self.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::U8(v) => buf.extend_from_slice(v),
            TensorData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let truncated = |expected: usize| TensorError::Truncated {
            expected: expected as u64,
            actual: bytes.len() as u64,
        };
        if bytes.len() < 4 {
            return Err(if LBTF_MAGIC.starts_with(bytes) { truncated(8) } else { TensorError::BadMagic });
        }
        if &bytes[..4] != LBTF_MAGIC {
            return Err(TensorError::BadMagic);
        }
        if bytes.len() < 8 {
            return Err(truncated(8));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != LBTF_VERSION {
            return Err(TensorError::UnsupportedVersion(version));
        }
        let dtype = Dtype::from_code(bytes[6]).ok_or(TensorError::UnknownDtype(bytes[6]))?;
        let rank = bytes[7] as usize;
        let header = 8 + 8 * rank;
        if bytes.len() < header {
            return Err(truncated(header));
        }
        let mut dims = Vec::with_capacity(rank);
        for c in bytes[8..header].chunks_exact(8) {
            let d = u64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            dims.push(usize::try_from(d).map_err(|_| TensorError::DimensionOverflow)?);
        }
        let n = element_count(&dims).ok_or(TensorError::DimensionOverflow)?;
        let payload = n.checked_mul(dtype.size()).ok_or(TensorError::DimensionOverflow)?;
        let total = header.checked_add(payload).ok_or(TensorError::DimensionOverflow)?;
        if bytes.len() < total {
            return Err(truncated(total));
        }
        if bytes.len() > total {
            return Err(TensorError::TrailingBytes((bytes.len() - total) as u64));
        }
        let body = &bytes[header..];
        let data = match dtype {
            Dtype::U8 => TensorData::U8(body.to_vec()),
            Dtype::F32 => TensorData::F32(
                body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            Dtype::F64 => TensorData::F64(
                body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        Ok(Self { dims, data })
    }
}

pub fn write_tensor(tensor: &FrameTensor, path: &Path) -> Result<(), TensorError> {
    let io = |source| TensorError::Io { path: path.to_path_buf(), source };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    f.write_all(&tensor.to_bytes()).map_err(io)?;
    f.flush().map_err(io)
}

pub fn read_tensor(path: &Path) -> Result<FrameTensor, TensorError> {
    let io = |source| TensorError::Io { path: path.to_path_buf(), source };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
    FrameTensor::from_bytes(&bytes)
}
