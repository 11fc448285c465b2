//! Image ingestion and per-patch covariance spectra.
//!
//! Images are handled as flat channel-planar `f32` buffers (`c * H * W + y * W + x`).
//! Patch `k` sits at grid position `(k / (W / p), k % (W / p))` and is
//! vectorised in `(channel, row, column)` order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attractor::{Patch, PatchSpectrum};
use crate::error::{Error, Result};
use crate::par;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_RECORD: usize = 1 + CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;
pub const RAW_MAGIC: &[u8; 4] = b"PSPC";
pub const RAW_HEADER: usize = 16;
/// Deflated spectra are only computed up to this patch dimension.
pub const FULL_SPECTRUM_MAX_DIM: usize = 256;

/// Images per accumulation block. Blocks are the unit of parallel work and
/// are merged in a fixed order, so results do not depend on the thread count.
const BLOCK_IMAGES: usize = 256;
const READ_CHUNK_IMAGES: usize = 16 * BLOCK_IMAGES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageFormat {
    Cifar10Binary,
    RawF32,
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `2 x / 255 - 1`.
    #[default]
    SignedUnit,
    /// `x / 255`.
    Unit,
    /// Values used as stored (raw-f32 and in-memory sources).
    AsStored,
}

impl Normalization {
    fn map(self, byte: u8) -> f32 {
        match self {
            Normalization::SignedUnit => 2.0 * f32::from(byte) / 255.0 - 1.0,
            Normalization::Unit | Normalization::AsStored => f32::from(byte) / 255.0,
        }
    }
}

#[derive(Debug, Clone)]
enum Backing {
    Files(Vec<PathBuf>),
    Memory(Vec<f32>),
}

#[derive(Debug, Clone)]
pub struct ImageSource {
    pub format: ImageFormat,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub count: usize,
    pub normalization: Normalization,
    backing: Backing,
}

fn dataset_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Dataset { path: path.to_path_buf(), message: message.into() }
}

impl ImageSource {
    /// CIFAR-10 binary batches: 3073-byte records, label byte first, then
    /// 1024 bytes each of R, G and B in row-major order.
    pub fn cifar10<P: AsRef<Path>>(paths: &[P], normalization: Normalization) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::arg("no CIFAR-10 batch files given"));
        }
        if normalization == Normalization::AsStored {
            return Err(Error::arg("CIFAR-10 bytes need a [-1, 1] or [0, 1] normalization"));
        }
        let mut count = 0;
        let mut files = Vec::with_capacity(paths.len());
        for p in paths {
            let p = p.as_ref();
            let len = std::fs::metadata(p).map_err(|e| Error::io(p, e))?.len() as usize;
            if len == 0 || len % CIFAR_RECORD != 0 {
                return Err(dataset_err(p, format!("size {len} is not a positive multiple of {CIFAR_RECORD}")));
            }
            count += len / CIFAR_RECORD;
            files.push(p.to_path_buf());
        }
        Ok(Self {
            format: ImageFormat::Cifar10Binary,
            height: CIFAR_SIDE,
            width: CIFAR_SIDE,
            channels: CIFAR_CHANNELS,
            count,
            normalization,
            backing: Backing::Files(files),
        })
    }

    /// Raw-f32 file: `PSPC`, then little-endian `u32` count, `u32` height and
    /// `u32` packing width in the low 16 bits and channels in the high 16 bits,
    /// followed by channel-planar little-endian `f32` pixels.
    pub fn raw_f32(path: &Path) -> Result<Self> {
        let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = [0u8; RAW_HEADER];
        f.read_exact(&mut header).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                dataset_err(path, "file shorter than the 16-byte header")
            } else {
                Error::io(path, e)
            }
        })?;
        if &header[..4] != RAW_MAGIC {
            return Err(dataset_err(path, "missing PSPC magic"));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (count, height, packed) = (word(4), word(8), word(12));
        let (width, channels) = (packed & 0xFFFF, packed >> 16);
        if count == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(dataset_err(path, format!("degenerate header: {count} images of {height}x{width}x{channels}")));
        }
        let len = f.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
        let want = RAW_HEADER + 4 * count * height * width * channels;
        if len != want {
            return Err(dataset_err(path, format!("size {len} does not match header (expected {want})")));
        }
        Ok(Self {
            format: ImageFormat::RawF32,
            height,
            width,
            channels,
            count,
            normalization: Normalization::AsStored,
            backing: Backing::Files(vec![path.to_path_buf()]),
        })
    }

    pub fn in_memory(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        let size = height * width * channels;
        if size == 0 || pixels.len() % size != 0 {
            return Err(Error::arg(format!("{} pixels do not form whole {height}x{width}x{channels} images", pixels.len())));
        }
        Ok(Self {
            format: ImageFormat::Memory,
            height,
            width,
            channels,
            count: pixels.len() / size,
            normalization: Normalization::AsStored,
            backing: Backing::Memory(pixels),
        })
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Streams the images in order, `chunk` at a time (the last chunk may be short).
    pub fn for_each_chunk<F>(&self, chunk: usize, mut f: F) -> Result<()>
    where
        F: FnMut(&[f32]) -> Result<()>,
    {
        let chunk = chunk.max(1);
        let size = self.image_len();
        match &self.backing {
            Backing::Memory(px) => {
                for c in px.chunks(chunk * size) {
                    f(c)?;
                }
            }
            Backing::Files(files) => {
                let mut buf: Vec<f32> = Vec::with_capacity(chunk * size);
                for path in files {
                    let file = File::open(path).map_err(|e| Error::io(path, e))?;
                    let mut r = BufReader::new(file);
                    let record = match self.format {
                        ImageFormat::Cifar10Binary => CIFAR_RECORD,
                        _ => {
                            let mut skip = [0u8; RAW_HEADER];
                            r.read_exact(&mut skip).map_err(|e| Error::io(path, e))?;
                            4 * size
                        }
                    };
                    let images = match self.format {
                        ImageFormat::Cifar10Binary => std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len() as usize / CIFAR_RECORD,
                        _ => self.count,
                    };
                    let mut bytes = vec![0u8; record];
                    for _ in 0..images {
                        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
                        match self.format {
                            ImageFormat::Cifar10Binary => buf.extend(bytes[1..].iter().map(|&b| self.normalization.map(b))),
                            _ => buf.extend(bytes.chunks_exact(4).map(|q| f32::from_le_bytes(q.try_into().unwrap()))),
                        }
                        if buf.len() == chunk * size {
                            f(&buf)?;
                            buf.clear();
                        }
                    }
                }
                if !buf.is_empty() {
                    f(&buf)?;
                }
            }
        }
        Ok(())
    }

    /// All images in one buffer.
    pub fn load_all(&self) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.count * self.image_len());
        self.for_each_chunk(READ_CHUNK_IMAGES, |c| {
            out.extend_from_slice(c);
            Ok(())
        })?;
        Ok(out)
    }
}

/// Writes images in the raw-f32 format read by [`ImageSource::raw_f32`].
pub fn write_raw_f32(path: &Path, height: usize, width: usize, channels: usize, pixels: &[f32]) -> Result<()> {
    let size = height * width * channels;
    if size == 0 || pixels.len() % size != 0 || width > 0xFFFF || channels > 0xFFFF {
        return Err(Error::arg("pixel buffer does not match the image shape"));
    }
    let count = pixels.len() / size;
    let as_u32 = |x: usize| u32::try_from(x).map_err(|_| Error::arg(format!("{x} does not fit the header")));
    let mut out = Vec::with_capacity(RAW_HEADER + 4 * pixels.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&as_u32(count)?.to_le_bytes());
    out.extend_from_slice(&as_u32(height)?.to_le_bytes());
    out.extend_from_slice(&as_u32(width | (channels << 16))?.to_le_bytes());
    for p in pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&out).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Count, mean and centred scatter of one patch position.
#[derive(Debug, Clone)]
struct Moments {
    n: f64,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl Moments {
    fn empty(d: usize) -> Self {
        Self { n: 0.0, mean: DVector::zeros(d), scatter: DMatrix::zeros(d, d) }
    }

    fn from_rows(x: DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean = x.row_mean().transpose();
        let mut xc = x;
        for mut row in xc.row_iter_mut() {
            row -= mean.transpose();
        }
        let scatter = xc.tr_mul(&xc);
        Self { n, mean, scatter }
    }

    fn merge(&mut self, other: &Moments) {
        if other.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = other.clone();
            return;
        }
        let n = self.n + other.n;
        let delta = &other.mean - &self.mean;
        self.scatter += &other.scatter;
        self.scatter.ger(self.n * other.n / n, &delta, &delta, 1.0);
        self.mean.axpy(other.n / n, &delta, 1.0);
        self.n = n;
    }
}

/// Running per-patch moments over a stream of images.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    height: usize,
    width: usize,
    channels: usize,
    patch_size: usize,
    patches: Vec<Moments>,
}

impl CovarianceAccumulator {
    pub fn new(height: usize, width: usize, channels: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::arg("image and patch dimensions must be positive"));
        }
        if height % patch_size != 0 || width % patch_size != 0 {
            return Err(Error::arg(format!("{height}x{width} images do not tile into {patch_size}x{patch_size} patches")));
        }
        let count = (height / patch_size) * (width / patch_size);
        let d = patch_size * patch_size * channels;
        Ok(Self { height, width, channels, patch_size, patches: vec![Moments::empty(d); count] })
    }

    pub fn patch_count(&self) -> usize {
        self.patches.len()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn samples(&self) -> usize {
        self.patches.first().map_or(0, |m| m.n as usize)
    }

    fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Patch `k` of every image in `images`, one row per image.
    fn patch_rows(&self, images: &[f32], k: usize) -> DMatrix<f64> {
        let p = self.patch_size;
        let grid_w = self.width / p;
        let (y0, x0) = ((k / grid_w) * p, (k % grid_w) * p);
        let size = self.image_len();
        let n = images.len() / size;
        let plane = self.height * self.width;
        DMatrix::from_fn(n, self.patch_dim(), |i, j| {
            let (ch, rest) = (j / (p * p), j % (p * p));
            let (dy, dx) = (rest / p, rest % p);
            f64::from(images[i * size + ch * plane + (y0 + dy) * self.width + x0 + dx])
        })
    }

    fn block_moments(&self, images: &[f32]) -> Vec<Moments> {
        (0..self.patches.len()).map(|k| Moments::from_rows(self.patch_rows(images, k))).collect()
    }

    /// Adds whole images. Blocks of 256 images are reduced in parallel and
    /// merged in order.
    pub fn add_images(&mut self, images: &[f32]) -> Result<()> {
        let size = self.image_len();
        if images.len() % size != 0 {
            return Err(Error::arg(format!("{} values are not a whole number of images", images.len())));
        }
        let blocks: Vec<&[f32]> = images.chunks(BLOCK_IMAGES * size).collect();
        let partial = par::map_slice(&blocks, |b| self.block_moments(b));
        for block in &partial {
            for (acc, m) in self.patches.iter_mut().zip(block) {
                acc.merge(m);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &CovarianceAccumulator) -> Result<()> {
        if other.patches.len() != self.patches.len() || other.patch_dim() != self.patch_dim() {
            return Err(Error::arg("accumulators have different patch layouts"));
        }
        for (a, b) in self.patches.iter_mut().zip(&other.patches) {
            a.merge(b);
        }
        Ok(())
    }

    /// Sample covariances (divisor `n - 1`), symmetrised.
    pub fn covariances(&self) -> Result<Vec<DMatrix<f64>>> {
        let n = self.samples();
        if n < 2 {
            return Err(Error::arg(format!("covariance needs at least 2 images, got {n}")));
        }
        Ok(self
            .patches
            .iter()
            .map(|m| {
                let c = &m.scatter / (m.n - 1.0);
                (&c + c.transpose()) * 0.5
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 10_000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerResult {
    pub value: f64,
    #[serde(skip)]
    pub vector: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Leading eigenpair of a symmetric PSD matrix. Stops once successive
/// Rayleigh quotients agree to `tol` relative.
pub fn power_iteration(c: &DMatrix<f64>, opts: PowerOptions) -> PowerResult {
    let d = c.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut v = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
    v.normalize_mut();
    let mut value = 0.0;
    for it in 1..=opts.max_iter {
        let w = c * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return PowerResult { value: 0.0, vector: v, iterations: it, converged: true };
        }
        let next = v.dot(&w);
        v = w / norm;
        if it > 1 && (next - value).abs() <= opts.tol * next.abs() {
            return PowerResult { value: next, vector: v, iterations: it, converged: true };
        }
        value = next;
    }
    PowerResult { value, vector: v, iterations: opts.max_iter, converged: false }
}

/// Full descending spectrum by repeated Hotelling deflation. Values below the
/// rounding floor of the leading eigenvalue are reported as 0.
pub fn deflated_spectrum(c: &DMatrix<f64>, opts: PowerOptions) -> Result<Vec<f64>> {
    let d = c.nrows();
    if d > FULL_SPECTRUM_MAX_DIM {
        return Err(Error::arg(format!("full spectra are limited to n_k <= {FULL_SPECTRUM_MAX_DIM}, got {d}")));
    }
    let mut a = c.clone();
    let mut out = Vec::with_capacity(d);
    let mut floor = 0.0;
    for i in 0..d {
        let r = power_iteration(&a, PowerOptions { seed: opts.seed.wrapping_add(i as u64), ..opts });
        let value = r.value.max(0.0);
        if i == 0 {
            floor = value * d as f64 * f64::EPSILON;
        }
        if value <= floor {
            out.resize(d, 0.0);
            break;
        }
        a.ger(-value, &r.vector, &r.vector, 1.0);
        out.push(value);
    }
    out.sort_by(|x, y| y.total_cmp(x));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchEstimate {
    pub id: usize,
    pub n_k: usize,
    pub leading: f64,
    pub iterations: usize,
    pub converged: bool,
    pub spectrum: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchCovariances {
    pub images: usize,
    pub patch_size: usize,
    pub patches: Vec<PatchEstimate>,
}

impl PatchCovariances {
    pub fn to_spectrum(&self) -> Result<PatchSpectrum> {
        let patches = self
            .patches
            .iter()
            .map(|p| match &p.spectrum {
                Some(mu) => Patch::full(p.id, mu.clone()),
                None => Patch::isotropic(p.id, p.n_k, p.leading),
            })
            .collect::<Result<Vec<_>>>()?;
        PatchSpectrum::new(patches)
    }

    pub fn leading_range(&self) -> (f64, f64) {
        self.patches.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.leading), hi.max(p.leading)))
    }
}

/// Accumulates the whole source and reduces each patch covariance to its
/// leading eigenvalue, plus the deflated spectrum when `full_spectrum` is set.
pub fn patch_covariances(source: &ImageSource, patch_size: usize, opts: PowerOptions, full_spectrum: bool) -> Result<PatchCovariances> {
    if source.count < 2 {
        return Err(Error::arg(format!("covariance needs at least 2 images, got {}", source.count)));
    }
    let mut acc = CovarianceAccumulator::new(source.height, source.width, source.channels, patch_size)?;
    if full_spectrum && acc.patch_dim() > FULL_SPECTRUM_MAX_DIM {
        return Err(Error::arg(format!("full spectra are limited to n_k <= {FULL_SPECTRUM_MAX_DIM}, got {}", acc.patch_dim())));
    }
    source.for_each_chunk(READ_CHUNK_IMAGES, |chunk| acc.add_images(chunk))?;
    estimates_from_accumulator(&acc, opts, full_spectrum)
}

pub fn estimates_from_accumulator(acc: &CovarianceAccumulator, opts: PowerOptions, full_spectrum: bool) -> Result<PatchCovariances> {
    let covs = acc.covariances()?;
    let patches = par::map_range(covs.len(), |k| -> Result<PatchEstimate> {
        let r = power_iteration(&covs[k], opts);
        let spectrum = if full_spectrum { Some(deflated_spectrum(&covs[k], opts)?) } else { None };
        Ok(PatchEstimate { id: k, n_k: acc.patch_dim(), leading: r.value.max(0.0), iterations: r.iterations, converged: r.converged, spectrum })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(PatchCovariances { images: acc.samples(), patch_size: acc.patch_size, patches })
}

pub fn write_spectrum(spectrum: &PatchSpectrum, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    spectrum.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_spectrum(path: &Path) -> Result<PatchSpectrum> {
    PatchSpectrum::from_csv_path(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_images(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * h * w * c).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn cifar_constant_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut rec = vec![128u8; CIFAR_RECORD];
        rec[0] = 3;
        std::fs::write(&path, [rec.clone(), rec].concat()).unwrap();
        let src = ImageSource::cifar10(&[&path], Normalization::SignedUnit).unwrap();
        assert_eq!(src.count, 2);
        let px = src.load_all().unwrap();
        let want = 2.0 * 128.0 / 255.0 - 1.0;
        assert!(px.iter().all(|&x| x == want));
        let cov = patch_covariances(&src, 8, PowerOptions::default(), false).unwrap();
        assert_eq!(cov.patches.len(), 16);
        assert!(cov.patches.iter().all(|p| p.leading == 0.0 && p.n_k == 192));
    }

    #[test]
    fn cifar_rejects_bad_inputs() {
        let empty: [&Path; 0] = [];
        assert!(ImageSource::cifar10(&empty, Normalization::SignedUnit).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.bin");
        std::fs::write(&path, vec![0u8; 3000]).unwrap();
        assert!(matches!(ImageSource::cifar10(&[&path], Normalization::Unit), Err(Error::Dataset { .. })));
        assert!(ImageSource::cifar10(&[dir.path().join("missing.bin")], Normalization::Unit).unwrap_err().is_io());
    }

    #[test]
    fn channel_planar_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[1 + 1024 + 5] = 255; // green channel, row 0, column 5
        std::fs::write(&path, &rec).unwrap();
        let px = ImageSource::cifar10(&[&path], Normalization::Unit).unwrap().load_all().unwrap();
        assert_eq!(px[1024 + 5], 1.0);
        assert_eq!(px.iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.pspc");
        let px = random_images(5, 4, 6, 2, 1);
        write_raw_f32(&path, 4, 6, 2, &px).unwrap();
        let src = ImageSource::raw_f32(&path).unwrap();
        assert_eq!((src.count, src.height, src.width, src.channels), (5, 4, 6, 2));
        assert_eq!(src.load_all().unwrap(), px);
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(ImageSource::raw_f32(&path), Err(Error::Dataset { .. })));
    }

    #[test]
    fn accumulator_matches_two_pass() {
        let px = random_images(600, 4, 4, 2, 3);
        let mut acc = CovarianceAccumulator::new(4, 4, 2, 2).unwrap();
        acc.add_images(&px).unwrap();
        let covs = acc.covariances().unwrap();
        let k = 3;
        let rows = acc.patch_rows(&px, k);
        let mean = rows.row_mean();
        let n = rows.nrows() as f64;
        let mut brute = DMatrix::zeros(8, 8);
        for r in rows.row_iter() {
            let d = (r - &mean).transpose();
            brute += &d * d.transpose();
        }
        brute /= n - 1.0;
        assert!((&covs[k] - brute).norm() < 1e-12);
    }

    #[test]
    fn order_and_chunking_invariance() {
        let (h, w, c) = (4, 4, 1);
        let size = h * w * c;
        let px = random_images(1000, h, w, c, 5);
        let mut a = CovarianceAccumulator::new(h, w, c, 2).unwrap();
        a.add_images(&px).unwrap();
        let mut reversed: Vec<f32> = Vec::with_capacity(px.len());
        for img in px.chunks(size).rev() {
            reversed.extend_from_slice(img);
        }
        let mut b = CovarianceAccumulator::new(h, w, c, 2).unwrap();
        for piece in reversed.chunks(37 * size) {
            b.add_images(piece).unwrap();
        }
        let (ca, cb) = (a.covariances().unwrap(), b.covariances().unwrap());
        for (x, y) in ca.iter().zip(&cb) {
            assert!((x - y).norm() <= 1e-8 * x.norm());
        }
    }

    #[test]
    fn power_iteration_matches_dense_solver() {
        let px = random_images(300, 4, 4, 3, 9);
        let mut acc = CovarianceAccumulator::new(4, 4, 3, 4).unwrap();
        acc.add_images(&px).unwrap();
        let cov = &acc.covariances().unwrap()[0];
        let r = power_iteration(cov, PowerOptions { tol: 1e-12, ..Default::default() });
        let dense = cov.clone().symmetric_eigen().eigenvalues.max();
        assert!((r.value - dense).abs() <= 1e-9 * dense, "{} vs {dense}", r.value);

        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 3.0, 1.0, 0.5]));
        let full = deflated_spectrum(&diag, PowerOptions { tol: 1e-13, ..Default::default() }).unwrap();
        for (got, want) in full.iter().zip([5.0, 3.0, 1.0, 0.5]) {
            assert!((got - want).abs() < 1e-8, "{full:?}");
        }
        assert_eq!(power_iteration(&DMatrix::zeros(3, 3), PowerOptions::default()).value, 0.0);
    }

    #[test]
    fn spectrum_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.csv");
        let spec = PatchSpectrum::new(vec![Patch::isotropic(0, 192, 18.712345678901234).unwrap(), Patch::isotropic(1, 192, 44.4).unwrap()]).unwrap();
        write_spectrum(&spec, &path).unwrap();
        assert_eq!(read_spectrum(&path).unwrap(), spec);
    }

    #[test]
    fn tiling_is_validated() {
        assert!(CovarianceAccumulator::new(32, 32, 3, 5).is_err());
        let src = ImageSource::in_memory(2, 2, 1, vec![0.0; 4]).unwrap();
        assert!(patch_covariances(&src, 2, PowerOptions::default(), false).is_err());
    }
}
