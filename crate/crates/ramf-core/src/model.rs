//! The trainable pieces: a small CNN feature extractor, a classifier head
//! bank with cosine-normalized or plain-linear scoring, frozen snapshots for
//! feature distillation, mixed features, and the per-class prototype store.

use crate::augment::LabelSpace;
use crate::autodiff::{softmax_rows, Graph, Parameter, Tensor, Var};
use crate::data::LabeledDataset;
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

const CHECKPOINT_MAGIC: &[u8; 8] = b"RAMFMODL";
const CHECKPOINT_VERSION: u32 = 1;
/// Lower bound kept on the learnable softmax temperature.
const ETA_FLOOR: f64 = 0.01;
const ETA_INIT: f64 = 10.0;
const HEAD_INIT_STD: f64 = 0.01;

/// Channel widths of the three conv blocks.
const WIDTHS: [usize; 3] = [16, 32, 64];
const KERNEL: usize = 3;
const PADDING: usize = 1;
/// Batch size used for feature extraction outside training.
const EXTRACT_CHUNK: usize = 256;

fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape/data consistent")
}

// ── feature extractor ───────────────────────────────────────────────────

/// Three conv-relu-pool blocks (3->16->32->64 channels, 3x3 kernels, pad 1,
/// 2x2 mean pooling) followed by a linear projection to the feature width.
/// Input images must be square with side a positive multiple of 8.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    conv1: Parameter,
    conv2: Parameter,
    conv3: Parameter,
    fc_w: Parameter,
    fc_b: Parameter,
    input_hw: usize,
    feature_dim: usize,
}

impl FeatureExtractor {
    pub fn new(input_hw: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if input_hw < 8 || input_hw % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input side must be a positive multiple of 8, got {input_hw}"
            )));
        }
        if feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be positive".into()));
        }
        let flat = WIDTHS[2] * (input_hw / 8) * (input_hw / 8);
        Ok(FeatureExtractor {
            conv1: Parameter::new(he_normal(
                vec![WIDTHS[0], 3, KERNEL, KERNEL],
                3 * KERNEL * KERNEL,
                rng,
            )),
            conv2: Parameter::new(he_normal(
                vec![WIDTHS[1], WIDTHS[0], KERNEL, KERNEL],
                WIDTHS[0] * KERNEL * KERNEL,
                rng,
            )),
            conv3: Parameter::new(he_normal(
                vec![WIDTHS[2], WIDTHS[1], KERNEL, KERNEL],
                WIDTHS[1] * KERNEL * KERNEL,
                rng,
            )),
            fc_w: Parameter::new(he_normal(vec![feature_dim, flat], flat, rng)),
            fc_b: Parameter::new(Tensor::zeros(vec![feature_dim])),
            input_hw,
            feature_dim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn input_hw(&self) -> usize {
        self.input_hw
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != w || h != self.input_hw {
            return Err(Error::Shape(format!(
                "extractor built for 3x{0}x{0} images, got {c}x{h}x{w}",
                self.input_hw
            )));
        }
        Ok(())
    }

    fn forward_impl(&self, g: &mut Graph, images: Var, track: bool) -> Result<Var> {
        let bind = |g: &mut Graph, p: &Parameter| if track { g.param(p) } else { g.input(p.value()) };
        let k1 = bind(g, &self.conv1);
        let k2 = bind(g, &self.conv2);
        let k3 = bind(g, &self.conv3);
        let w = bind(g, &self.fc_w);
        let b = bind(g, &self.fc_b);

        let mut x = images;
        for k in [k1, k2, k3] {
            let c = g.conv2d(x, k, PADDING)?;
            let r = g.relu(c);
            x = g.avg_pool2(r)?;
        }
        let flat = g.flatten(x)?;
        g.linear(flat, w, Some(b))
    }

    /// Gradient-tracked forward pass for training.
    pub fn forward(&self, g: &mut Graph, images: Var) -> Result<Var> {
        self.check_images(g.value(images))?;
        self.forward_impl(g, images, true)
    }

    /// Inference: features with no gradient bookkeeping, chunked to bound
    /// memory.
    pub fn extract(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let (n, c, h, w) = images.dims4()?;
        let stride = c * h * w;
        let mut out = Vec::with_capacity(n * self.feature_dim);
        let mut start = 0;
        while start < n {
            let end = (start + EXTRACT_CHUNK).min(n);
            let chunk = Tensor::new(
                vec![end - start, c, h, w],
                images.data()[start * stride..end * stride].to_vec(),
            )?;
            let mut g = Graph::new();
            let x = g.input(&chunk);
            let f = self.forward_impl(&mut g, x, false)?;
            out.extend_from_slice(g.value(f).data());
            start = end;
        }
        Tensor::new(vec![n, self.feature_dim], out)
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.conv1);
        f(&mut self.conv2);
        f(&mut self.conv3);
        f(&mut self.fc_w);
        f(&mut self.fc_b);
    }

    /// Parameters in declaration order (the checkpoint layout).
    pub fn params(&self) -> [&Parameter; 5] {
        [&self.conv1, &self.conv2, &self.conv3, &self.fc_w, &self.fc_b]
    }

    /// Frozen copy of the current weights.
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            extractor: self.clone(),
        }
    }
}

/// Immutable copy of a [`FeatureExtractor`] from the end of the previous
/// stage. Its outputs enter training graphs as constants, so no gradient
/// can reach it.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    extractor: FeatureExtractor,
}

impl ModelSnapshot {
    pub fn extract(&self, images: &Tensor) -> Result<Tensor> {
        self.extractor.extract(images)
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    /// Weight tensors, for bit-identity assertions in tests.
    pub fn params(&self) -> [&Parameter; 5] {
        self.extractor.params()
    }
}

// ── classifier ──────────────────────────────────────────────────────────

/// How head scores are produced from features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierMode {
    /// Scaled cosine similarity between l2-normalized features and heads;
    /// no bias. The scale eta is learnable.
    Cosine,
    /// Plain affine scores (ablation mode).
    Linear,
}

/// Bank of classifier heads over a fixed feature width. Heads can be
/// appended (new classes, augmented classes) and truncated (end-of-stage
/// cleanup) without touching surviving rows.
#[derive(Debug, Clone)]
pub struct Classifier {
    weight: Parameter, // [heads, d]
    bias: Parameter,   // [heads]; used by Linear mode only
    eta: Parameter,    // [1]; used by Cosine mode only
    mode: ClassifierMode,
    feature_dim: usize,
}

impl Classifier {
    pub fn new(feature_dim: usize, heads: usize, mode: ClassifierMode, rng: &mut ChaCha8Rng) -> Result<Self> {
        if feature_dim == 0 || heads == 0 {
            return Err(Error::InvalidArgument(
                "classifier needs positive feature_dim and head count".into(),
            ));
        }
        let dist = Normal::new(0.0, HEAD_INIT_STD).expect("valid std");
        let data = (0..heads * feature_dim).map(|_| dist.sample(rng)).collect();
        Ok(Classifier {
            weight: Parameter::new(Tensor::new(vec![heads, feature_dim], data)?),
            bias: Parameter::new(Tensor::zeros(vec![heads])),
            eta: Parameter::new(Tensor::scalar(ETA_INIT)),
            mode,
            feature_dim,
        })
    }

    pub fn head_count(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn mode(&self) -> ClassifierMode {
        self.mode
    }

    pub fn eta(&self) -> f64 {
        self.eta.value().data()[0]
    }

    pub fn weight(&self) -> &Parameter {
        &self.weight
    }

    pub fn bias(&self) -> &Parameter {
        &self.bias
    }

    pub fn eta_param(&self) -> &Parameter {
        &self.eta
    }

    /// Head scores on the graph (pre-softmax). Cosine mode:
    /// eta * <normalized heads, normalized features>; linear mode: W f + b.
    pub fn logits(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let (_, d) = g.value(features).dims2()?;
        if d != self.feature_dim {
            return Err(Error::Shape(format!(
                "features have width {d}, classifier expects {}",
                self.feature_dim
            )));
        }
        match self.mode {
            ClassifierMode::Cosine => {
                let w = g.param(&self.weight);
                let eta = g.param(&self.eta);
                let nf = g.normalize_rows(features)?;
                let nw = g.normalize_rows(w)?;
                let sims = g.linear(nf, nw, None)?;
                g.mul_scalar_var(sims, eta)
            }
            ClassifierMode::Linear => {
                let w = g.param(&self.weight);
                let b = g.param(&self.bias);
                g.linear(features, w, Some(b))
            }
        }
    }

    /// Inference probabilities for a [n, d] feature batch. Cosine mode
    /// rejects zero-norm features and zero-norm head weights.
    pub fn probabilities(&self, features: &Tensor) -> Result<Tensor> {
        let (n, d) = features.dims2()?;
        if d != self.feature_dim {
            return Err(Error::Shape(format!(
                "features have width {d}, classifier expects {}",
                self.feature_dim
            )));
        }
        if self.mode == ClassifierMode::Cosine {
            for r in 0..n {
                if row_norm(features, r) == 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "zero-norm feature row {r} in cosine mode"
                    )));
                }
            }
            for h in 0..self.head_count() {
                if row_norm(self.weight.value(), h) == 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "zero-norm head weight {h} in cosine mode"
                    )));
                }
            }
        }
        let mut g = Graph::new();
        let f = g.input(features);
        let logits = match self.mode {
            ClassifierMode::Cosine => {
                let w = g.input(self.weight.value());
                let eta = g.input(self.eta.value());
                let nf = g.normalize_rows(f)?;
                let nw = g.normalize_rows(w)?;
                let sims = g.linear(nf, nw, None)?;
                g.mul_scalar_var(sims, eta)?
            }
            ClassifierMode::Linear => {
                let w = g.input(self.weight.value());
                let b = g.input(self.bias.value());
                g.linear(f, w, Some(b))?
            }
        };
        softmax_rows(g.value(logits))
    }

    /// Append `count` heads with small random init; existing heads and
    /// their momentum are untouched bit-for-bit.
    pub fn add_heads(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        let (heads, d) = self.weight.value().dims2()?;
        let dist = Normal::new(0.0, HEAD_INIT_STD).expect("valid std");

        let mut wdata = self.weight.value().data().to_vec();
        wdata.extend((0..count * d).map(|_| dist.sample(rng)));
        let new_weight = Tensor::new(vec![heads + count, d], wdata)?;
        self.weight.replace_value(new_weight, |old| {
            let mut m = old.data().to_vec();
            m.extend(std::iter::repeat_n(0.0, count * d));
            Tensor::new(vec![heads + count, d], m).expect("consistent")
        });

        let mut bdata = self.bias.value().data().to_vec();
        bdata.extend(std::iter::repeat_n(0.0, count));
        let new_bias = Tensor::new(vec![heads + count], bdata)?;
        self.bias.replace_value(new_bias, |old| {
            let mut m = old.data().to_vec();
            m.extend(std::iter::repeat_n(0.0, count));
            Tensor::new(vec![heads + count], m).expect("consistent")
        });
        Ok(())
    }

    /// End-of-stage cleanup: keep only the original-class heads of `space`
    /// (they occupy the leading indices), dropping all augmented heads.
    pub fn drop_augmented_heads(&mut self, space: &LabelSpace) -> Result<()> {
        if self.head_count() != space.head_count() {
            return Err(Error::InvalidArgument(format!(
                "classifier has {} heads but the label space describes {}",
                self.head_count(),
                space.head_count()
            )));
        }
        let keep = space.original_head_count();
        let d = self.feature_dim;
        let truncate2 = |t: &Tensor| {
            Tensor::new(vec![keep, d], t.data()[..keep * d].to_vec()).expect("consistent")
        };
        let truncate1 =
            |t: &Tensor| Tensor::new(vec![keep], t.data()[..keep].to_vec()).expect("consistent");

        let w = truncate2(self.weight.value());
        self.weight.replace_value(w, truncate2);
        let b = truncate1(self.bias.value());
        self.bias.replace_value(b, truncate1);
        Ok(())
    }

    /// Keep the learnable temperature at or above its floor.
    pub fn clamp_eta(&mut self) {
        let v = &mut self.eta.value_mut().data_mut()[0];
        if *v < ETA_FLOOR {
            *v = ETA_FLOOR;
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        match self.mode {
            ClassifierMode::Cosine => f(&mut self.eta),
            ClassifierMode::Linear => f(&mut self.bias),
        }
    }
}

fn row_norm(t: &Tensor, r: usize) -> f64 {
    t.row(r)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .unwrap_or(0.0)
}

// ── mixed features ──────────────────────────────────────────────────────

/// lambda * f_current + mu * f_previous, where the previous features come
/// from a frozen snapshot and therefore enter as a constant: gradient flows
/// only through the current branch.
pub fn mix_features(
    g: &mut Graph,
    f_current: Var,
    f_previous: &Tensor,
    lambda: f64,
    mu: f64,
) -> Result<Var> {
    if g.value(f_current).shape() != f_previous.shape() {
        return Err(Error::Shape(format!(
            "mix_features: {:?} vs {:?}",
            g.value(f_current).shape(),
            f_previous.shape()
        )));
    }
    let scaled = g.scale(f_current, lambda);
    let prev = g.constant(f_previous.scaled(mu));
    g.add(scaled, prev)
}

// ── prototype store ─────────────────────────────────────────────────────

/// Mean feature vector of one class, plus how many samples produced it.
#[derive(Debug, Clone)]
pub struct PrototypeEntry {
    pub prototype: Tensor,
    pub sample_count: usize,
}

/// Per-class prototypes persisted across stages. A class's prototype is
/// computed once, at the end of the stage that introduced it, and never
/// recomputed (no samples are retained that could recompute it).
#[derive(Debug, Clone, Default)]
pub struct PrototypeStore {
    entries: BTreeMap<usize, PrototypeEntry>,
}

impl PrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.entries.contains_key(&class)
    }

    pub fn get(&self, class: usize) -> Option<&PrototypeEntry> {
        self.entries.get(&class)
    }

    /// Classes in ascending id order.
    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &PrototypeEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn insert(&mut self, class: usize, prototype: Tensor, sample_count: usize) -> Result<()> {
        if self.entries.contains_key(&class) {
            return Err(Error::InvalidArgument(format!(
                "prototype for class {class} already stored; prototypes are never recomputed"
            )));
        }
        self.entries.insert(
            class,
            PrototypeEntry {
                prototype,
                sample_count,
            },
        );
        Ok(())
    }
}

/// Mean feature vector per listed class under the current extractor.
pub fn compute_prototypes(
    extractor: &FeatureExtractor,
    dataset: &LabeledDataset,
    classes: &[usize],
) -> Result<Vec<(usize, Tensor, usize)>> {
    let d = extractor.feature_dim();
    let mut out = Vec::with_capacity(classes.len());
    for &class in classes {
        let indices = dataset.indices_of_classes(&[class]);
        if indices.is_empty() {
            return Err(Error::Data(format!("class {class} has no samples")));
        }
        let (images, _) = dataset.gather(&indices)?;
        let features = extractor.extract(&images)?;
        let mut mean = vec![0.0; d];
        for row in features.data().chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let inv = 1.0 / indices.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        out.push((class, Tensor::new(vec![d], mean)?, indices.len()));
    }
    Ok(out)
}

/// prototype + e * r with e a vector of standard Gaussians and
/// r ~ U(r_min, r_max), both drawn fresh per call.
pub fn noisy_prototype(
    prototype: &Tensor,
    rng: &mut ChaCha8Rng,
    r_min: f64,
    r_max: f64,
) -> Result<Tensor> {
    if !(0.0 <= r_min && r_min <= r_max) {
        return Err(Error::InvalidArgument(format!(
            "noise range ({r_min}, {r_max}) must satisfy 0 <= r_min <= r_max"
        )));
    }
    let r = if r_min == r_max {
        r_min
    } else {
        rng.random_range(r_min..r_max)
    };
    let gauss = Normal::new(0.0, 1.0).expect("valid std");
    let data = prototype
        .data()
        .iter()
        .map(|&p| p + gauss.sample(rng) * r)
        .collect();
    Tensor::new(prototype.shape().to_vec(), data)
}

// ── checkpoint format ───────────────────────────────────────────────────

/// Write extractor + classifier weights: magic "RAMFMODL", little-endian
/// u32 header (version, feature width, head count), then f64 little-endian
/// parameter arrays in declaration order (conv1, conv2, conv3, fc weight,
/// fc bias, head weights, head biases, eta).
pub fn save_checkpoint(
    path: &Path,
    extractor: &FeatureExtractor,
    classifier: &Classifier,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        CHECKPOINT_VERSION,
        extractor.feature_dim() as u32,
        classifier.head_count() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let arrays: Vec<&Tensor> = extractor
        .params()
        .into_iter()
        .map(Parameter::value)
        .chain([
            classifier.weight().value(),
            classifier.bias().value(),
            classifier.eta_param().value(),
        ])
        .collect();
    for t in arrays {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`]. The architecture is
/// reconstructed from `input_hw` plus the header's feature width and head
/// count; `mode` selects the scoring rule (it is not stored in the file).
pub fn load_checkpoint(
    path: &Path,
    input_hw: usize,
    mode: ClassifierMode,
) -> Result<(FeatureExtractor, Classifier)> {
    let mut file =
        fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!(
            "{}: not a model checkpoint",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    let mut next_u32 = |what: &str| -> Result<u32> {
        file.read_exact(&mut word)
            .map_err(|e| Error::Data(format!("checkpoint {what}: {e}")))?;
        Ok(u32::from_le_bytes(word))
    };
    let version = next_u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let d = next_u32("feature width")? as usize;
    let heads = next_u32("head count")? as usize;

    let mut rest = Vec::new();
    file.read_to_end(&mut rest)
        .map_err(|e| Error::Data(format!("checkpoint payload: {e}")))?;
    if rest.len() % 8 != 0 {
        return Err(Error::Data("checkpoint payload not f64-aligned".into()));
    }
    let values: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let flat = WIDTHS[2] * (input_hw / 8) * (input_hw / 8);
    let shapes: Vec<Vec<usize>> = vec![
        vec![WIDTHS[0], 3, KERNEL, KERNEL],
        vec![WIDTHS[1], WIDTHS[0], KERNEL, KERNEL],
        vec![WIDTHS[2], WIDTHS[1], KERNEL, KERNEL],
        vec![d, flat],
        vec![d],
        vec![heads, d],
        vec![heads],
        vec![1],
    ];
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if values.len() != expected {
        return Err(Error::Data(format!(
            "checkpoint holds {} values, architecture needs {expected}",
            values.len()
        )));
    }

    let mut offset = 0;
    let mut take = |shape: &[usize]| -> Tensor {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), values[offset..offset + n].to_vec())
            .expect("validated length");
        offset += n;
        t
    };
    let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
    let mut extractor = FeatureExtractor::new(input_hw, d, &mut seed_rng)?;
    extractor.conv1 = Parameter::new(take(&shapes[0]));
    extractor.conv2 = Parameter::new(take(&shapes[1]));
    extractor.conv3 = Parameter::new(take(&shapes[2]));
    extractor.fc_w = Parameter::new(take(&shapes[3]));
    extractor.fc_b = Parameter::new(take(&shapes[4]));

    let mut classifier = Classifier::new(d, heads, mode, &mut seed_rng)?;
    classifier.weight = Parameter::new(take(&shapes[5]));
    classifier.bias = Parameter::new(take(&shapes[6]));
    classifier.eta = Parameter::new(take(&shapes[7]));
    Ok((extractor, classifier))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_images(n: usize, hw: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        let data = (0..n * 3 * hw * hw)
            .map(|_| r.random_range(0.0..1.0))
            .collect();
        Tensor::new(vec![n, 3, hw, hw], data).unwrap()
    }

    #[test]
    fn extractor_output_shape_and_determinism() {
        let mut r = rng(1);
        let ex = FeatureExtractor::new(8, 64, &mut r).unwrap();
        let images = random_images(5, 8, 2);
        let f1 = ex.extract(&images).unwrap();
        assert_eq!(f1.shape(), &[5, 64]);
        let f2 = ex.extract(&images).unwrap();
        assert!(f1
            .data()
            .iter()
            .zip(f2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn extractor_rejects_bad_input_sides() {
        let mut r = rng(1);
        assert!(FeatureExtractor::new(7, 64, &mut r).is_err());
        assert!(FeatureExtractor::new(12, 64, &mut r).is_err());
        let ex = FeatureExtractor::new(8, 64, &mut r).unwrap();
        assert!(ex.extract(&random_images(1, 16, 3)).is_err());
    }

    #[test]
    fn features_stay_finite_on_unit_range_inputs() {
        let mut r = rng(4);
        let ex = FeatureExtractor::new(8, 64, &mut r).unwrap();
        let images = random_images(1000, 8, 5);
        let f = ex.extract(&images).unwrap();
        assert!(f.is_finite());
    }

    #[test]
    fn cosine_probabilities_peak_on_matching_head() {
        let mut r = rng(6);
        let mut cls = Classifier::new(4, 2, ClassifierMode::Cosine, &mut r).unwrap();
        // head 0 = e0, head 1 = e1; feature = e0 -> cos sims (1, 0)
        cls.weight = Parameter::new(
            Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
        );
        cls.eta = Parameter::new(Tensor::scalar(50.0));
        let f = Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = cls.probabilities(&f).unwrap();
        assert!(p.data()[0] > 0.999999);

        // eta = 2 with sims (1, 0): softmax([2, 0])
        cls.eta = Parameter::new(Tensor::scalar(2.0));
        let p = cls.probabilities(&f).unwrap();
        assert!((p.data()[0] - 0.880797).abs() < 1e-5, "p0={}", p.data()[0]);
        assert!((p.data()[1] - 0.119203).abs() < 1e-5, "p1={}", p.data()[1]);
    }

    #[test]
    fn cosine_probabilities_are_scale_invariant() {
        let mut r = rng(7);
        let cls = Classifier::new(16, 9, ClassifierMode::Cosine, &mut r).unwrap();
        for trial in 0..100 {
            let mut rr = rng(100 + trial);
            let data: Vec<f64> = (0..3 * 16).map(|_| rr.random_range(-1.0..1.0)).collect();
            let f = Tensor::new(vec![3, 16], data).unwrap();
            let scaled = f.scaled(5.0);
            let p1 = cls.probabilities(&f).unwrap();
            let p2 = cls.probabilities(&scaled).unwrap();
            for (a, b) in p1.data().iter().zip(p2.data()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn cosine_argmax_matches_raw_similarity_argmax() {
        let mut r = rng(8);
        let cls = Classifier::new(8, 6, ClassifierMode::Cosine, &mut r).unwrap();
        for trial in 0..50 {
            let mut rr = rng(200 + trial);
            let data: Vec<f64> = (0..8).map(|_| rr.random_range(-1.0..1.0)).collect();
            let f = Tensor::new(vec![1, 8], data).unwrap();
            let p = cls.probabilities(&f).unwrap();
            let argmax_p = (0..6)
                .max_by(|&a, &b| p.data()[a].partial_cmp(&p.data()[b]).unwrap())
                .unwrap();
            let fn_norm: f64 = f.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let sims: Vec<f64> = (0..6)
                .map(|h| {
                    let row = cls.weight().value().row(h).unwrap();
                    let wn: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.iter().zip(f.data()).map(|(a, b)| a * b).sum::<f64>() / (wn * fn_norm)
                })
                .collect();
            let argmax_s = (0..6)
                .max_by(|&a, &b| sims[a].partial_cmp(&sims[b]).unwrap())
                .unwrap();
            assert_eq!(argmax_p, argmax_s);
        }
    }

    #[test]
    fn cosine_mode_rejects_zero_norm_feature() {
        let mut r = rng(9);
        let cls = Classifier::new(4, 3, ClassifierMode::Cosine, &mut r).unwrap();
        let f = Tensor::zeros(vec![1, 4]);
        assert!(cls.probabilities(&f).is_err());
        // linear mode accepts the same input
        let lin = Classifier::new(4, 3, ClassifierMode::Linear, &mut r).unwrap();
        assert!(lin.probabilities(&f).is_ok());
    }

    #[test]
    fn mix_features_endpoint_cases() {
        let mut g = Graph::new();
        let ft = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let fp = Tensor::new(vec![2, 3], vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        let v = g.input(&ft);
        let m = mix_features(&mut g, v, &fp, 1.0, 0.0).unwrap();
        assert_eq!(g.value(m).data(), ft.data());
        let m = mix_features(&mut g, v, &fp, 0.0, 1.0).unwrap();
        assert_eq!(g.value(m).data(), fp.data());
        let m = mix_features(&mut g, v, &fp, 0.7, 0.3).unwrap();
        let expect = Tensor::lerp(0.7, &ft, 0.3, &fp).unwrap();
        assert_eq!(g.value(m).data(), expect.data());
    }

    #[test]
    fn prototypes_match_streaming_mean_oracle() {
        let ds = generate_synthetic(3, 20, 8, 8, 11).unwrap();
        let mut r = rng(12);
        let ex = FeatureExtractor::new(8, 32, &mut r).unwrap();
        let protos = compute_prototypes(&ex, &ds, &[0, 1, 2]).unwrap();
        for (class, proto, count) in &protos {
            assert_eq!(*count, 20);
            // independent streaming mean over the same features
            let indices = ds.indices_of_classes(&[*class]);
            let (images, _) = ds.gather(&indices).unwrap();
            let features = ex.extract(&images).unwrap();
            let mut stream = vec![0.0f64; 32];
            for (i, row) in features.data().chunks_exact(32).enumerate() {
                for (s, v) in stream.iter_mut().zip(row) {
                    *s += (v - *s) / (i + 1) as f64;
                }
            }
            for (a, b) in proto.data().iter().zip(&stream) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn prototype_edge_cases() {
        // a single-sample class's prototype is that sample's feature
        let ds = generate_synthetic(2, 1, 8, 8, 13).unwrap();
        let mut r = rng(14);
        let ex = FeatureExtractor::new(8, 16, &mut r).unwrap();
        let protos = compute_prototypes(&ex, &ds, &[0]).unwrap();
        let (images, _) = ds.gather(&ds.indices_of_classes(&[0])).unwrap();
        let f = ex.extract(&images).unwrap();
        assert_eq!(protos[0].1.data(), f.data());
        // empty class errors
        assert!(compute_prototypes(&ex, &ds, &[5]).is_err());
    }

    #[test]
    fn prototype_store_never_recomputes() {
        let mut store = PrototypeStore::new();
        store.insert(3, Tensor::zeros(vec![4]), 10).unwrap();
        assert!(store.insert(3, Tensor::ones(vec![4]), 5).is_err());
        assert_eq!(store.classes(), vec![3]);
    }

    #[test]
    fn noisy_prototype_zero_range_is_identity() {
        let proto = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut r = rng(15);
        let out = noisy_prototype(&proto, &mut r, 0.0, 0.0).unwrap();
        assert_eq!(out.data(), proto.data());
        assert_eq!(out.shape(), &[4]);
        assert!(noisy_prototype(&proto, &mut r, 1.0, 0.5).is_err());
    }

    #[test]
    fn noisy_prototype_monte_carlo_mean() {
        let d = 8;
        let proto = Tensor::new(vec![d], (0..d).map(|i| i as f64 * 0.3).collect()).unwrap();
        let mut r = rng(16);
        let (r_min, r_max) = (0.5, 1.5);
        let draws = 100_000;
        let mut mean = vec![0.0f64; d];
        for _ in 0..draws {
            let s = noisy_prototype(&proto, &mut r, r_min, r_max).unwrap();
            for (m, v) in mean.iter_mut().zip(s.data()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= draws as f64);
        for (m, p) in mean.iter().zip(proto.data()) {
            assert!(
                (m - p).abs() < 0.01 * r_max,
                "per-coordinate mean {m} drifted from {p}"
            );
        }
    }

    #[test]
    fn add_heads_preserves_existing_rows() {
        let mut r = rng(17);
        let mut cls = Classifier::new(8, 5, ClassifierMode::Cosine, &mut r).unwrap();
        let before = cls.weight().value().clone();
        cls.add_heads(10, &mut r).unwrap();
        assert_eq!(cls.head_count(), 15);
        assert_eq!(
            &cls.weight().value().data()[..before.numel()],
            before.data()
        );
        let snapshot = cls.weight().value().clone();
        cls.add_heads(0, &mut r).unwrap();
        assert_eq!(cls.weight().value().data(), snapshot.data());
    }

    #[test]
    fn drop_augmented_heads_keeps_originals_bit_exact() {
        use crate::augment::LabelSpace;
        let classes: Vec<usize> = (0..50).collect();
        let space = LabelSpace::initial(&classes, 50, true, true).unwrap();
        let mut r = rng(18);
        let mut cls = Classifier::new(8, space.head_count(), ClassifierMode::Cosine, &mut r).unwrap();
        assert_eq!(cls.head_count(), 1525);
        let kept: Vec<f64> = cls.weight().value().data()[..50 * 8].to_vec();
        cls.drop_augmented_heads(&space).unwrap();
        assert_eq!(cls.head_count(), 50);
        assert_eq!(cls.weight().value().data(), &kept[..]);
    }

    #[test]
    fn snapshot_is_unaffected_by_later_training() {
        let mut r = rng(19);
        let mut ex = FeatureExtractor::new(8, 16, &mut r).unwrap();
        let images = random_images(3, 8, 20);
        let snap = ex.snapshot();
        let before = snap.extract(&images).unwrap();
        // mutate the live extractor
        ex.visit_params_mut(&mut |p| {
            p.value_mut().data_mut().iter_mut().for_each(|v| *v += 0.1);
        });
        let after = snap.extract(&images).unwrap();
        assert!(before
            .data()
            .iter()
            .zip(after.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        // and the live extractor did change
        let live = ex.extract(&images).unwrap();
        assert_ne!(live.data(), before.data());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ramf");
        let mut r = rng(21);
        let ex = FeatureExtractor::new(16, 32, &mut r).unwrap();
        let cls = Classifier::new(32, 7, ClassifierMode::Cosine, &mut r).unwrap();
        save_checkpoint(&path, &ex, &cls).unwrap();
        let (ex2, cls2) = load_checkpoint(&path, 16, ClassifierMode::Cosine).unwrap();
        for (a, b) in ex.params().iter().zip(ex2.params().iter()) {
            assert_eq!(a.value().data(), b.value().data());
        }
        assert_eq!(
            cls.weight().value().data(),
            cls2.weight().value().data()
        );
        assert_eq!(cls.eta(), cls2.eta());
        // same features from the reloaded model
        let images = random_images(2, 16, 22);
        assert_eq!(
            ex.extract(&images).unwrap().data(),
            ex2.extract(&images).unwrap().data()
        );
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ramf");
        let mut r = rng(23);
        let ex = FeatureExtractor::new(8, 16, &mut r).unwrap();
        let cls = Classifier::new(16, 3, ClassifierMode::Linear, &mut r).unwrap();
        save_checkpoint(&path, &ex, &cls).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(load_checkpoint(&path, 8, ClassifierMode::Linear).is_err());
    }
}
