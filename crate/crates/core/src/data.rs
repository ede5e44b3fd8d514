//! Image datasets scaled to `[-1, 1]`: IDX files, directories of images, and
//! synthetic finite mixtures that a [`MixtureOracle`](crate::oracle::MixtureOracle)
//! can attach to.

use std::fs;
use std::path::{Path, PathBuf};

use pdae_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    /// `images` is `[N, C, H, W]` with values in `[-1, 1]`.
    pub fn new(images: Tensor<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        if images.rank() != 4 {
            return invalid(format!("images must be [N, C, H, W], got {:?}", images.shape()));
        }
        if images.batch() == 0 {
            return invalid("dataset is empty");
        }
        if let Some(l) = &labels {
            if l.len() != images.batch() {
                return invalid(format!("{} labels for {} images", l.len(), images.batch()));
            }
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.as_ref().and_then(|l| l.iter().max()).map_or(0, |m| m + 1)
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        self.images.select(idx)
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { images: self.images.select(idx), labels: self.batch_labels(idx) }
    }

    pub fn points_f64(&self) -> Tensor<f64> {
        self.images.cast()
    }
}

fn idx_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Idx { path: path.to_path_buf(), msg: msg.into() }
}

/// Parses an unsigned-byte IDX file into its dimensions and payload.
pub fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(idx_err(path, "shorter than the 4-byte magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(idx_err(path, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(idx_err(path, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(idx_err(path, "zero-rank payload"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(idx_err(path, "truncated dimension table"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() - header != n {
        return Err(idx_err(path, format!("header promises {n} bytes of data, file has {}", bytes.len() - header)));
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn scale_pixel(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// IDX image file (`[N, H, W]` or `[N, C, H, W]`) with an optional IDX label
/// file.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let (dims, data) = read_idx(images)?;
    let shape = match dims.len() {
        3 => vec![dims[0], 1, dims[1], dims[2]],
        4 => dims.clone(),
        r => return Err(idx_err(images, format!("image file has rank {r}, expected 3 or 4"))),
    };
    let labels = match labels {
        Some(p) => {
            let (ld, lb) = read_idx(p)?;
            if ld.len() != 1 {
                return Err(idx_err(p, format!("label file has rank {}, expected 1", ld.len())));
            }
            if ld[0] != shape[0] {
                return Err(idx_err(p, format!("{} labels for {} images", ld[0], shape[0])));
            }
            Some(lb.into_iter().map(usize::from).collect())
        }
        None => None,
    };
    let t = Tensor::from_vec(&shape, data.into_iter().map(scale_pixel).collect())?;
    Dataset::new(t, labels)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// PNG files in `dir`, or in its subdirectories with one class per
/// subdirectory (sorted by name). Images are converted to `channels` (1 or 3)
/// and must all share one size.
pub fn load_image_dir(dir: &Path, channels: usize) -> Result<Dataset> {
    if channels != 1 && channels != 3 {
        return invalid("image directories load 1 or 3 channels");
    }
    let entries = sorted_entries(dir)?;
    let subdirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut files: Vec<(PathBuf, Option<usize>)> = Vec::new();
    if subdirs.is_empty() {
        files.extend(entries.iter().filter(|p| is_image(p)).map(|p| (p.clone(), None)));
    } else {
        for (c, d) in subdirs.iter().enumerate() {
            files.extend(sorted_entries(d)?.into_iter().filter(|p| is_image(p)).map(|p| (p, Some(c))));
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyDir(dir.to_path_buf()));
    }
    let mut data = Vec::new();
    let mut size = None;
    for (path, _) in &files {
        let img = image::open(path).map_err(|e| Error::Image { path: path.clone(), msg: e.to_string() })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if *size.get_or_insert((w, h)) != (w, h) {
            return Err(Error::Image { path: path.clone(), msg: format!("size {w}x{h} differs from the first image") });
        }
        if channels == 1 {
            data.extend(img.to_luma8().into_raw().into_iter().map(scale_pixel));
        } else {
            let rgb = img.to_rgb8();
            for c in 0..3 {
                data.extend(rgb.pixels().map(|p| scale_pixel(p.0[c])));
            }
        }
    }
    let (w, h) = size.expect("at least one image");
    let labels = (!subdirs.is_empty()).then(|| files.iter().map(|(_, c)| c.expect("class")).collect());
    Dataset::new(Tensor::from_vec(&[files.len(), channels, h, w], data)?, labels)
}

/// Synthetic finite datasets.
#[derive(Clone, Debug, PartialEq)]
pub enum Synthetic {
    /// Class prototypes of smooth random patterns plus per-point variation.
    Blobs { points: usize, classes: usize, size: usize, channels: usize },
    /// Ten classes of jittered digit-like strokes, single channel.
    Glyphs { points: usize, size: usize },
}

impl Synthetic {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match *self {
            Synthetic::Blobs { points, classes, size, channels } => blobs(points, classes, size, channels, &mut rng),
            Synthetic::Glyphs { points, size } => glyphs(points, size, &mut rng),
        }
    }
}

/// Bilinear upsampling of a `k x k` field to `size x size`.
fn smooth_field<R: Rng + ?Sized>(k: usize, size: usize, amp: f64, rng: &mut R) -> Vec<f64> {
    let coarse: Vec<f64> = (0..k * k).map(|_| rng.random_range(-amp..amp)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let fy = (y as f64 + 0.5) / size as f64 * (k - 1) as f64;
            let fx = (x as f64 + 0.5) / size as f64 * (k - 1) as f64;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(k - 1), (x0 + 1).min(k - 1));
            let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
            out[y * size + x] = coarse[y0 * k + x0] * (1.0 - dy) * (1.0 - dx)
                + coarse[y0 * k + x1] * (1.0 - dy) * dx
                + coarse[y1 * k + x0] * dy * (1.0 - dx)
                + coarse[y1 * k + x1] * dy * dx;
        }
    }
    out
}

fn blobs<R: Rng + ?Sized>(points: usize, classes: usize, size: usize, channels: usize, rng: &mut R) -> Result<Dataset> {
    if points == 0 || classes == 0 || classes > points || size < 2 || channels == 0 {
        return invalid("blobs need points >= classes >= 1, size >= 2, channels >= 1");
    }
    let plane = size * size;
    let protos: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..channels).flat_map(|_| smooth_field(3, size, 1.0, rng)).collect()).collect();
    let mut data = Vec::with_capacity(points * channels * plane);
    let mut labels = Vec::with_capacity(points);
    for i in 0..points {
        let c = i % classes;
        let var: Vec<f64> = (0..channels).flat_map(|_| smooth_field(4, size, 0.45, rng)).collect();
        data.extend(protos[c].iter().zip(&var).map(|(p, v)| (p + v).clamp(-1.0, 1.0) as f32));
        labels.push(c);
    }
    Dataset::new(Tensor::from_vec(&[points, channels, size, size], data)?, Some(labels))
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<(f64, f64)> {
    (0..=20)
        .map(|i| {
            let a = i as f64 / 20.0 * std::f64::consts::TAU;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Stroke polylines for each glyph class in unit coordinates (y down).
fn glyph_strokes(class: usize) -> Vec<Vec<(f64, f64)>> {
    match class {
        0 => vec![ellipse(0.5, 0.5, 0.24, 0.34)],
        1 => vec![vec![(0.38, 0.27), (0.52, 0.15), (0.52, 0.85)]],
        2 => vec![vec![(0.28, 0.3), (0.4, 0.17), (0.6, 0.16), (0.71, 0.3), (0.64, 0.48), (0.28, 0.85), (0.76, 0.85)]],
        3 => vec![vec![(0.3, 0.2), (0.62, 0.16), (0.7, 0.33), (0.48, 0.5), (0.72, 0.65), (0.64, 0.83), (0.3, 0.82)]],
        4 => vec![vec![(0.64, 0.85), (0.64, 0.15), (0.25, 0.62), (0.78, 0.62)]],
        5 => vec![vec![(0.72, 0.15), (0.33, 0.15), (0.3, 0.47), (0.6, 0.44), (0.73, 0.63), (0.62, 0.83), (0.3, 0.82)]],
        6 => vec![vec![(0.65, 0.15), (0.4, 0.38), (0.3, 0.64), (0.44, 0.85), (0.64, 0.8), (0.69, 0.62), (0.52, 0.5), (0.32, 0.6)]],
        7 => vec![vec![(0.27, 0.16), (0.75, 0.16), (0.44, 0.85)]],
        8 => vec![ellipse(0.5, 0.32, 0.17, 0.16), ellipse(0.5, 0.67, 0.21, 0.18)],
        _ => vec![ellipse(0.5, 0.34, 0.18, 0.18), vec![(0.68, 0.34), (0.62, 0.85)]],
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let l2 = vx * vx + vy * vy;
    let u = if l2 > 0.0 { ((wx * vx + wy * vy) / l2).clamp(0.0, 1.0) } else { 0.0 };
    ((wx - u * vx).powi(2) + (wy - u * vy).powi(2)).sqrt()
}

/// Renders one jittered glyph into `[-1, 1]` pixels.
pub fn render_glyph<R: Rng + ?Sized>(class: usize, size: usize, rng: &mut R) -> Vec<f32> {
    let s = size as f64;
    let scale = rng.random_range(0.8..1.05);
    let rot: f64 = rng.random_range(-0.18..0.18);
    let shear: f64 = rng.random_range(-0.2..0.2);
    let (tx, ty) = (rng.random_range(-0.07..0.07), rng.random_range(-0.07..0.07));
    let width = rng.random_range(0.045..0.075) * s;
    let (c, sn) = (rot.cos(), rot.sin());
    let map = |(x, y): (f64, f64)| {
        let (x, y) = (x - 0.5 + shear * (y - 0.5), y - 0.5);
        let (x, y) = (scale * (c * x - sn * y), scale * (sn * x + c * y));
        ((x + 0.5 + tx) * s, (y + 0.5 + ty) * s)
    };
    let strokes: Vec<Vec<(f64, f64)>> = glyph_strokes(class).into_iter().map(|l| l.into_iter().map(map).collect()).collect();
    let mut out = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let p = (px as f64 + 0.5, py as f64 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|l| l.windows(2).map(move |w| seg_dist(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let ink = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
            out.push((2.0 * ink - 1.0) as f32);
        }
    }
    out
}

fn glyphs<R: Rng + ?Sized>(points: usize, size: usize, rng: &mut R) -> Result<Dataset> {
    if points == 0 || size < 8 {
        return invalid("glyphs need at least one point and size >= 8");
    }
    let mut data = Vec::with_capacity(points * size * size);
    let mut labels = Vec::with_capacity(points);
    for i in 0..points {
        let c = i % 10;
        data.extend(render_glyph(c, size, rng));
        labels.push(c);
    }
    Dataset::new(Tensor::from_vec(&[points, 1, size, size], data)?, Some(labels))
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Idx { images: PathBuf, labels: Option<PathBuf> },
    ImageDir { path: PathBuf, channels: usize },
    Synthetic { kind: Synthetic, seed: u64 },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Idx { images, labels } => load_idx(images, labels.as_deref()),
            DataSource::ImageDir { path, channels } => load_image_dir(path, *channels),
            DataSource::Synthetic { kind, seed } => kind.generate(*seed),
        }
    }
}
