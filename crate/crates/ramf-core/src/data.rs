//! Dataset ingestion, synthetic image generation, class-incremental task
//! splitting, and batch iteration.
//!
//! Images are always 3-channel with pixel values in [0,1]; grayscale sources
//! are replicated across channels on load so that color permutation has
//! something to act on.

use crate::autodiff::Tensor;
use crate::seeds;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fs;
use std::io::Read;
use std::path::Path;

const IDX_IMAGE_MAGIC: u32 = 2051;
const IDX_LABEL_MAGIC: u32 = 2049;
const CACHE_MAGIC: &[u8; 4] = b"RAMF";
const CACHE_VERSION: u32 = 1;

/// Labeled image collection. Storage is one contiguous [n, 3, h, w] tensor.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let (n, c, _, _) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::Data(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if c != 3 {
            return Err(Error::Data(format!("expected 3 channels, got {c}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if !images.data().iter().all(|&p| (0.0..=1.0).contains(&p)) {
            return Err(Error::Data("pixel value outside [0,1]".into()));
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// (channels, height, width) of each image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dims4().expect("validated 4-d");
        (c, h, w)
    }

    /// Copy the selected samples into a batch tensor plus label vector.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (n, c, h, w) = self.images.dims4()?;
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= n {
                return Err(Error::InvalidArgument(format!("index {i} out of {n}")));
            }
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    /// Indices of all samples whose label is in `classes`.
    pub fn indices_of_classes(&self, classes: &[usize]) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect()
    }

    /// Seeded epoch iteration: a permutation of all indices chopped into
    /// batches; the last batch may be short.
    pub fn batches(&self, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
        batch_indices(self.len(), batch_size, epoch_seed)
    }
}

/// Permute 0..n by `epoch_seed` and split into `batch_size` chunks.
pub fn batch_indices(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Data("empty dataset".into()));
    }
    if batch_size < 2 {
        return Err(Error::InvalidArgument(
            "batch_size must be at least 2 (pair augmentation needs pairs)".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

// ── IDX ingestion ───────────────────────────────────────────────────────

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("reading {what}: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image/label file pair (the MNIST container format).
/// Grayscale pixels are replicated to 3 channels and mapped to [0,1].
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<LabeledDataset> {
    let mut img_file = fs::File::open(image_path)
        .map_err(|e| Error::Io(format!("{}: {e}", image_path.display())))?;
    let magic = read_u32_be(&mut img_file, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Data(format!(
            "bad image magic {magic}, expected {IDX_IMAGE_MAGIC}"
        )));
    }
    let n = read_u32_be(&mut img_file, "image count")? as usize;
    let h = read_u32_be(&mut img_file, "rows")? as usize;
    let w = read_u32_be(&mut img_file, "cols")? as usize;
    let mut pixels = vec![0u8; n * h * w];
    img_file
        .read_exact(&mut pixels)
        .map_err(|e| Error::Data(format!("image payload: {e}")))?;

    let mut lbl_file = fs::File::open(label_path)
        .map_err(|e| Error::Io(format!("{}: {e}", label_path.display())))?;
    let magic = read_u32_be(&mut lbl_file, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Data(format!(
            "bad label magic {magic}, expected {IDX_LABEL_MAGIC}"
        )));
    }
    let ln = read_u32_be(&mut lbl_file, "label count")? as usize;
    if ln != n {
        return Err(Error::Data(format!("{n} images but {ln} labels")));
    }
    let mut raw_labels = vec![0u8; ln];
    lbl_file
        .read_exact(&mut raw_labels)
        .map_err(|e| Error::Data(format!("label payload: {e}")))?;

    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);

    let mut data = vec![0.0f64; n * 3 * h * w];
    for i in 0..n {
        let src = &pixels[i * h * w..(i + 1) * h * w];
        for ch in 0..3 {
            let dst = &mut data[(i * 3 + ch) * h * w..(i * 3 + ch + 1) * h * w];
            for (d, &p) in dst.iter_mut().zip(src) {
                *d = p as f64 / 255.0;
            }
        }
    }
    LabeledDataset::new(Tensor::new(vec![n, 3, h, w], data)?, labels, class_count)
}

// ── synthetic generation ────────────────────────────────────────────────

/// Orientation of class `c`'s bar pattern, in radians. The 17-degree offset
/// with a 151-degree span keeps every class angle away from multiples of
/// 90 degrees, so rotated copies never collide with another class.
fn class_angle(class: usize, num_classes: usize) -> f64 {
    (17.0 + class as f64 * (151.0 / num_classes as f64)).to_radians()
}

/// Per-class per-channel intensity weight in [0.35, 0.95], chosen so the
/// three channels always differ (color permutation must change the image).
fn channel_weight(class: usize, channel: usize) -> f64 {
    let phi = 0.618_033_988_749_894_9;
    let t = phi * (3 * class + channel + 1) as f64;
    0.35 + 0.6 * t.fract()
}

/// Deterministic class-patterned images: an oriented soft bar with a
/// brightness wedge along its length, class-specific channel weights, and
/// additive Gaussian pixel noise (sigma 0.05) clamped to [0,1]. Every pixel
/// is a pure function of (seed, class, index).
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(
            "synthetic generation needs at least 2 classes".into(),
        ));
    }
    if per_class < 1 {
        return Err(Error::InvalidArgument(
            "per_class must be at least 1".into(),
        ));
    }
    let n = num_classes * per_class;
    let mut data = vec![0.0f64; n * 3 * height * width];
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");

    let stride = 3 * height * width;
    for class in 0..num_classes {
        let angle = class_angle(class, num_classes);
        let (sin_a, cos_a) = angle.sin_cos();
        for index in 0..per_class {
            let sample = class * per_class + index;
            labels.push(class);
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix3(seed, class as u64, index as u64));
            let offset: f64 = rng.random_range(-1.5..1.5);
            let bar_width: f64 = rng.random_range(1.2..2.2);
            let amplitude: f64 = rng.random_range(0.8..1.0);
            let half = (height.min(width) as f64 - 1.0) / 2.0;

            let img = &mut data[sample * stride..(sample + 1) * stride];
            for ch in 0..3 {
                let weight = channel_weight(class, ch);
                for i in 0..height {
                    for j in 0..width {
                        let y = i as f64 - (height as f64 - 1.0) / 2.0;
                        let x = j as f64 - (width as f64 - 1.0) / 2.0;
                        let perp = x * sin_a - y * cos_a - offset;
                        let along = (x * cos_a + y * sin_a) / half;
                        let bar = (-(perp / bar_width).powi(2)).exp();
                        let wedge = 0.6 + 0.4 * along.clamp(-1.0, 1.0);
                        let v = amplitude * weight * bar * wedge + noise.sample(&mut rng);
                        img[(ch * height + i) * width + j] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    LabeledDataset::new(
        Tensor::new(vec![n, 3, height, width], data)?,
        labels,
        num_classes,
    )
}

// ── class-incremental splitting ─────────────────────────────────────────

/// Assignment of classes to an initial stage plus incremental stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    stages: Vec<Vec<usize>>,
    seed: u64,
}

impl TaskSplit {
    /// Class lists per stage; index 0 is the initial stage.
    pub fn stages(&self) -> &[Vec<usize>] {
        &self.stages
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Classes of all stages up to and including `stage`, in learning order.
    pub fn seen_classes(&self, stage: usize) -> Vec<usize> {
        self.stages[..=stage].iter().flatten().copied().collect()
    }
}

/// Shuffle class ids by `seed`, then deal the first `initial_count` to the
/// initial stage and `per_stage` to each of `num_stages` incremental stages.
pub fn split_incremental(
    class_count: usize,
    initial_count: usize,
    num_stages: usize,
    per_stage: usize,
    seed: u64,
) -> Result<TaskSplit> {
    let needed = initial_count + num_stages * per_stage;
    if needed > class_count {
        return Err(Error::InvalidArgument(format!(
            "split needs {needed} classes but only {class_count} exist"
        )));
    }
    if initial_count == 0 {
        return Err(Error::InvalidArgument(
            "initial stage must be non-empty".into(),
        ));
    }
    let mut order: Vec<usize> = (0..class_count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut stages = Vec::with_capacity(1 + num_stages);
    stages.push(order[..initial_count].to_vec());
    for s in 0..num_stages {
        let start = initial_count + s * per_stage;
        stages.push(order[start..start + per_stage].to_vec());
    }
    Ok(TaskSplit { stages, seed })
}

// ── cache file format ───────────────────────────────────────────────────

/// Write the dataset in the internal cache format: ASCII magic "RAMF",
/// little-endian u32 fields (version=1, K, N, C, H, W), N*C*H*W u8 pixels,
/// then N u8 labels. Pixels are quantized by rounding p*255.
pub fn save_cache(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let (n, c, h, w) = ds.images.dims4()?;
    if ds.class_count > 256 {
        return Err(Error::Data(format!(
            "cache format stores u8 labels; {} classes do not fit",
            ds.class_count
        )));
    }
    let mut buf = Vec::with_capacity(28 + n * c * h * w + n);
    buf.extend_from_slice(CACHE_MAGIC);
    for v in [
        CACHE_VERSION,
        ds.class_count as u32,
        n as u32,
        c as u32,
        h as u32,
        w as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(
        ds.images
            .data()
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    buf.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(path, buf).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Read a dataset written by [`save_cache`].
pub fn load_cache(path: &Path) -> Result<LabeledDataset> {
    let buf = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    if buf.len() < 28 || &buf[..4] != CACHE_MAGIC {
        return Err(Error::Data(format!(
            "{}: not a dataset cache file",
            path.display()
        )));
    }
    let field =
        |i: usize| -> u32 { u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) };
    let version = field(0);
    if version != CACHE_VERSION {
        return Err(Error::Data(format!("unsupported cache version {version}")));
    }
    let (k, n, c, h, w) = (
        field(1) as usize,
        field(2) as usize,
        field(3) as usize,
        field(4) as usize,
        field(5) as usize,
    );
    let pixel_bytes = n * c * h * w;
    if buf.len() != 28 + pixel_bytes + n {
        return Err(Error::Data(format!(
            "cache payload is {} bytes, expected {}",
            buf.len() - 28,
            pixel_bytes + n
        )));
    }
    let data: Vec<f64> = buf[28..28 + pixel_bytes]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = buf[28 + pixel_bytes..]
        .iter()
        .map(|&l| l as usize)
        .collect();
    LabeledDataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, k)
}
