//! Procedural glyph dataset: binary letter images rendered from
//! hand-authored stroke skeletons (no font dependency), plus a
//! texture-encrypted variant where the shape is invisible to first-order
//! intensity statistics but present in texture orientation.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dft;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of one letter in a unit box, y growing downward.
enum Prim {
    /// Axis-aligned filled box.
    Box(f64, f64, f64, f64),
    /// Elliptic ring: rho in [inner, 1] with rho^2 = (dx/rx)^2 + (dy/ry)^2.
    Ring { cx: f64, cy: f64, rx: f64, ry: f64, inner: f64 },
    /// Ring restricted to x >= cx (bowl of B/D).
    HalfRingRight { cx: f64, cy: f64, rx: f64, ry: f64, inner: f64 },
    /// Ring restricted to y >= cy (bottom of U).
    HalfRingDown { cx: f64, cy: f64, rx: f64, ry: f64, inner: f64 },
    /// Thick line segment.
    Seg(f64, f64, f64, f64, f64),
    /// Cut-out region (subtracted after union of the others).
    Cut(f64, f64, f64, f64),
}

impl Prim {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Prim::Box(x0, y0, x1, y1) => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Prim::Ring { cx, cy, rx, ry, inner } => {
                let rho = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
                rho <= 1.0 && rho >= inner * inner
            }
            Prim::HalfRingRight { cx, cy, rx, ry, inner } => {
                x >= cx && {
                    let rho = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
                    rho <= 1.0 && rho >= inner * inner
                }
            }
            Prim::HalfRingDown { cx, cy, rx, ry, inner } => {
                y >= cy && {
                    let rho = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
                    rho <= 1.0 && rho >= inner * inner
                }
            }
            Prim::Seg(x0, y0, x1, y1, width) => {
                let (dx, dy) = (x1 - x0, y1 - y0);
                let len2 = dx * dx + dy * dy;
                let t = (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0);
                let (px, py) = (x0 + t * dx, y0 + t * dy);
                ((x - px).powi(2) + (y - py).powi(2)).sqrt() <= width / 2.0
            }
            Prim::Cut(..) => false,
        }
    }
}

fn skeleton(letter: char) -> Option<Vec<Prim>> {
    use Prim::*;
    let prims = match letter {
        'I' => vec![Box(0.42, 0.15, 0.58, 0.85)],
        'O' => vec![Ring { cx: 0.5, cy: 0.5, rx: 0.30, ry: 0.36, inner: 0.55 }],
        'B' => vec![
            Box(0.28, 0.15, 0.42, 0.85),
            HalfRingRight { cx: 0.42, cy: 0.325, rx: 0.24, ry: 0.185, inner: 0.45 },
            HalfRingRight { cx: 0.42, cy: 0.675, rx: 0.24, ry: 0.185, inner: 0.45 },
        ],
        'D' => vec![
            Box(0.28, 0.15, 0.42, 0.85),
            HalfRingRight { cx: 0.42, cy: 0.5, rx: 0.30, ry: 0.36, inner: 0.60 },
        ],
        'Q' => vec![
            Ring { cx: 0.5, cy: 0.48, rx: 0.30, ry: 0.34, inner: 0.55 },
            Seg(0.56, 0.62, 0.80, 0.88, 0.10),
        ],
        'C' => vec![
            Ring { cx: 0.5, cy: 0.5, rx: 0.30, ry: 0.36, inner: 0.55 },
            Cut(0.62, 0.34, 1.0, 0.66),
        ],
        'L' => vec![Box(0.30, 0.15, 0.44, 0.85), Box(0.30, 0.71, 0.74, 0.85)],
        'T' => vec![Box(0.22, 0.15, 0.78, 0.29), Box(0.43, 0.15, 0.57, 0.85)],
        'U' => vec![
            Box(0.26, 0.15, 0.38, 0.60),
            Box(0.62, 0.15, 0.74, 0.60),
            HalfRingDown { cx: 0.5, cy: 0.60, rx: 0.24, ry: 0.25, inner: 0.5 },
        ],
        'X' => vec![
            Seg(0.26, 0.15, 0.74, 0.85, 0.11),
            Seg(0.74, 0.15, 0.26, 0.85, 0.11),
        ],
        _ => return None,
    };
    Some(prims)
}

/// Letters with authored skeletons.
pub fn alphabet() -> Vec<char> {
    vec!['B', 'C', 'D', 'I', 'L', 'O', 'Q', 'T', 'U', 'X']
}

/// Jitter ranges applied when rendering; the defaults are the dataset's
/// contract (rotation <= 15 degrees, scale 0.8..1.1, translation <= 10%).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Jitter {
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub max_translation: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            max_rotation_deg: 15.0,
            scale_range: (0.8, 1.1),
            max_translation: 0.10,
        }
    }
}

impl Jitter {
    pub fn none() -> Self {
        Jitter {
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            max_translation: 0.0,
        }
    }
}

/// Render a binary glyph (values exactly {0,1}) of extent `size` x `size`.
pub fn render_glyph(
    letter: char,
    size: usize,
    jitter: &Jitter,
    rng: &mut impl Rng,
) -> Result<Tensor<f64>> {
    if size < 16 {
        return Err(Error::InvalidArgument(format!("glyph size {size} < 16")));
    }
    let prims = skeleton(letter)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown letter `{letter}`")))?;

    let theta = (rng.gen::<f64>() * 2.0 - 1.0) * jitter.max_rotation_deg.to_radians();
    let (lo, hi) = jitter.scale_range;
    let scale = lo + rng.gen::<f64>() * (hi - lo);
    let tx = (rng.gen::<f64>() * 2.0 - 1.0) * jitter.max_translation;
    let ty = (rng.gen::<f64>() * 2.0 - 1.0) * jitter.max_translation;
    let (sin, cos) = theta.sin_cos();

    let mut data = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            // pixel center -> unit square -> inverse jitter -> skeleton frame
            let px = (c as f64 + 0.5) / size as f64 - 0.5 - tx;
            let py = (r as f64 + 0.5) / size as f64 - 0.5 - ty;
            let ux = (cos * px + sin * py) / scale + 0.5;
            let uy = (-sin * px + cos * py) / scale + 0.5;
            let mut inside = prims.iter().any(|p| p.contains(ux, uy));
            if inside {
                for p in &prims {
                    if let Prim::Cut(x0, y0, x1, y1) = *p {
                        if ux >= x0 && ux <= x1 && uy >= y0 && uy <= y1 {
                            inside = false;
                            break;
                        }
                    }
                }
            }
            if inside {
                data[r * size + c] = 1.0;
            }
        }
    }
    Tensor::new(vec![size, size], data)
}

/// Texture parameters for the encrypted variant: two band-limited oriented
/// noise fields with per-region equalized means.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TextureParams {
    pub fg_angle_deg: f64,
    pub bg_angle_deg: f64,
    /// Frequency band in cycles per image.
    pub freq_range: (f64, f64),
    pub waves: usize,
    /// Half-range of the final values around the 0.5 mean.
    pub contrast: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams {
            fg_angle_deg: 45.0,
            bg_angle_deg: 135.0,
            freq_range: (3.0, 7.0),
            waves: 6,
            contrast: 0.45,
        }
    }
}

fn oriented_field(size: usize, angle_deg: f64, params: &TextureParams, rng: &mut impl Rng) -> Vec<f64> {
    let (c, s) = angle_deg.to_radians().sin_cos();
    let mut field = vec![0.0; size * size];
    let (flo, fhi) = params.freq_range;
    for _ in 0..params.waves {
        let f = flo + rng.gen::<f64>() * (fhi - flo);
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let amp = 0.5 + rng.gen::<f64>() * 0.5;
        for r in 0..size {
            for col in 0..size {
                let x = (col as f64 + 0.5) / size as f64;
                let y = (r as f64 + 0.5) / size as f64;
                let u = x * c + y * s;
                field[r * size + col] += amp * (std::f64::consts::TAU * f * u + phase).cos();
            }
        }
    }
    field
}

/// Affine-normalize `field` over the masked pixels to mean exactly 0.5
/// with range within [0.5 - contrast, 0.5 + contrast].
fn equalize_region(field: &[f64], mask: &[bool], keep: bool, contrast: f64, out: &mut [f64]) {
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == keep).collect();
    if idx.is_empty() {
        return;
    }
    let mean = idx.iter().map(|&i| field[i]).sum::<f64>() / idx.len() as f64;
    let max_dev = idx
        .iter()
        .map(|&i| (field[i] - mean).abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    for &i in &idx {
        out[i] = 0.5 + contrast * (field[i] - mean) / max_dev;
    }
}

/// Encrypt a binary glyph into two oriented textures with equalized
/// first-order statistics; output spans [0,1] continuously.
pub fn encrypt_sva(
    binary: &Tensor<f64>,
    params: &TextureParams,
    rng: &mut impl Rng,
) -> Result<Tensor<f64>> {
    let shape = binary.shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape("encrypt_sva", format!("{shape:?}")));
    }
    let size = shape[0];
    let mask: Vec<bool> = binary.data().iter().map(|&v| v > 0.5).collect();
    let fg = oriented_field(size, params.fg_angle_deg, params, rng);
    let bg = oriented_field(size, params.bg_angle_deg, params, rng);
    let mut out = vec![0.5; size * size];
    equalize_region(&fg, &mask, true, params.contrast, &mut out);
    equalize_region(&bg, &mask, false, params.contrast, &mut out);
    Tensor::new(shape, out)
}

/// The three experiment presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    /// Binary {I, O}.
    BinaryIo,
    /// Binary {B, D, O, Q}.
    BinaryBdoq,
    /// Texture-encrypted {I, O}.
    EncryptedIo,
}

impl Experiment {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Experiment::BinaryIo),
            2 => Ok(Experiment::BinaryBdoq),
            3 => Ok(Experiment::EncryptedIo),
            _ => Err(Error::InvalidArgument(format!("experiment {id} (expected 1..=3)"))),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Experiment::BinaryIo => 1,
            Experiment::BinaryBdoq => 2,
            Experiment::EncryptedIo => 3,
        }
    }

    pub fn classes(self) -> Vec<char> {
        match self {
            Experiment::BinaryIo | Experiment::EncryptedIo => vec!['I', 'O'],
            Experiment::BinaryBdoq => vec!['B', 'D', 'O', 'Q'],
        }
    }

    pub fn encrypted(self) -> bool {
        matches!(self, Experiment::EncryptedIo)
    }
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitInfo {
    pub per_class: usize,
    pub total: usize,
    pub images: PathBuf,
    pub labels: PathBuf,
}

/// On-disk description of a generated dataset; the seed fully determines
/// every pixel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub experiment: u8,
    pub classes: Vec<String>,
    pub encrypted: bool,
    pub image_size: usize,
    pub seed: u64,
    pub format: String,
    pub splits: std::collections::BTreeMap<String, SplitInfo>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }
}

/// Split-disjoint per-sample rng stream.
fn sample_rng(seed: u64, experiment: u8, split_idx: u64, sample_idx: u64) -> ChaCha8Rng {
    // splitmix-style avalanche over the combined key
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(experiment as u64)
        .wrapping_add(split_idx.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(sample_idx.wrapping_mul(0x94d0_49bb_1331_11eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Generate one sample of a dataset deterministically.
pub fn synth_sample(
    experiment: Experiment,
    size: usize,
    seed: u64,
    split_idx: u64,
    sample_idx: u64,
) -> Result<(Tensor<f64>, usize)> {
    let classes = experiment.classes();
    let label = (sample_idx as usize) % classes.len();
    let letter = classes[label];
    let mut rng = sample_rng(seed, experiment.id(), split_idx, sample_idx);
    let binary = render_glyph(letter, size, &Jitter::default(), &mut rng)?;
    let image = if experiment.encrypted() {
        encrypt_sva(&binary, &TextureParams::default(), &mut rng)?
    } else {
        binary
    };
    Ok((image, label))
}

fn write_pgm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Generate the dataset for an experiment: per split one image shard
/// (N,1,H,W stored 32-bit) and one label shard, a JSON manifest, and a few
/// PGM previews.
pub fn synth_dataset(
    experiment: Experiment,
    counts: (usize, usize, usize),
    size: usize,
    seed: u64,
    out_dir: &Path,
    previews: usize,
) -> Result<DatasetManifest> {
    let per_split = [counts.0, counts.1, counts.2];
    if per_split.iter().any(|&c| c == 0) {
        return Err(Error::InvalidArgument("split counts must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let classes = experiment.classes();
    let k = classes.len();

    let mut splits = std::collections::BTreeMap::new();
    for (si, split) in SPLITS.iter().enumerate() {
        let per_class = per_split[si];
        let total = per_class * k;
        let dir = out_dir.join(split);
        std::fs::create_dir_all(&dir)?;

        let mut images = vec![0.0f32; total * size * size];
        let mut labels = vec![0u32; total];
        for idx in 0..total {
            let (img, label) = synth_sample(experiment, size, seed, si as u64, idx as u64)?;
            labels[idx] = label as u32;
            for (dst, &v) in images[idx * size * size..(idx + 1) * size * size]
                .iter_mut()
                .zip(img.data())
            {
                *dst = v as f32;
            }
            if idx < previews {
                write_pgm(
                    &dir.join(format!("preview_{idx:03}_{}.pgm", classes[label])),
                    &img,
                )?;
            }
        }
        let images_path = dir.join("images.dft");
        let labels_path = dir.join("labels.dft");
        dft::write_tensor(
            &images_path,
            &Tensor::<f32>::new(vec![total, 1, size, size], images)?,
        )?;
        dft::write_u32(&labels_path, &[total], &labels)?;
        splits.insert(
            split.to_string(),
            SplitInfo {
                per_class,
                total,
                images: images_path,
                labels: labels_path,
            },
        );
    }

    let manifest = DatasetManifest {
        experiment: experiment.id(),
        classes: classes.iter().map(|c| c.to_string()).collect(),
        encrypted: experiment.encrypted(),
        image_size: size,
        seed,
        format: "DFT1".to_string(),
        splits,
    };
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load one split as an f64 batch tensor plus labels.
pub fn load_split(manifest: &DatasetManifest, split: &str) -> Result<(Tensor<f64>, Vec<usize>)> {
    let info = manifest
        .splits
        .get(split)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{split}`")))?;
    let images = dft::read(&info.images)?.into_f64()?;
    let labels = dft::read(&info.labels)?
        .into_u32()?
        .into_iter()
        .map(|v| v as usize)
        .collect();
    Ok((images, labels))
}

/// Nearest-class-mean reference classifier: train on the train split,
/// report test accuracy in percent. A fixed, tiny yardstick for the
/// difficulty ordering of the three experiments.
pub fn centroid_reference_accuracy(manifest: &DatasetManifest) -> Result<f64> {
    let (train_x, train_y) = load_split(manifest, "train")?;
    let (test_x, test_y) = load_split(manifest, "test")?;
    let k = manifest.class_count();
    let dim: usize = train_x.shape()[1..].iter().product();
    let mut centroids = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &label) in train_y.iter().enumerate() {
        counts[label] += 1;
        for (c, &v) in centroids[label]
            .iter_mut()
            .zip(&train_x.data()[i * dim..(i + 1) * dim])
        {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        let n = (*n).max(1) as f64;
        c.iter_mut().for_each(|v| *v /= n);
    }
    let mut correct = 0usize;
    for (i, &label) in test_y.iter().enumerate() {
        let x = &test_x.data()[i * dim..(i + 1) * dim];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (ci, c) in centroids.iter().enumerate() {
            let d: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = ci;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / test_y.len().max(1) as f64)
}
