//! Class augmentation: transformations whose outputs get brand-new class
//! labels, expanding both the data and the label space.
//!
//! Two families exist. Pair mixing (the base augmentation) blends two
//! differently-labeled images and labels the blend with a class unique to
//! the unordered pair, giving K(K-1)/2 extra classes for K stage classes.
//! The auxiliary augmentations act on single images: rotation (3 extra
//! classes per class), cutout (1 per class), and color permutation (1 per
//! class, all five non-identity channel orders mapping to the same head).
//! In the initial stage one auxiliary kind is drawn per batch from a
//! weighted choice; incremental stages always use rotation.
//!
//! [`LabelSpace`] owns the mapping from (class, augmentation) to classifier
//! head indices, laid out as [old | new | pairs | rotation | cutout | perm]
//! so that dropping augmented heads is a truncation.

use crate::autodiff::Tensor;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The three auxiliary class augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugKind {
    Rotation,
    Cutout,
    ColorPerm,
}

/// Clockwise rotation angles used by rotation augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotAngle {
    R90,
    R180,
    R270,
}

impl RotAngle {
    pub const ALL: [RotAngle; 3] = [RotAngle::R90, RotAngle::R180, RotAngle::R270];

    fn index(self) -> usize {
        match self {
            RotAngle::R90 => 0,
            RotAngle::R180 => 1,
            RotAngle::R270 => 2,
        }
    }

    fn quarter_turns(self) -> usize {
        self.index() + 1
    }
}

/// Where a sample in an augmented batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Original,
    BaseMix,
    Aux(AugKind),
}

/// Whether a stage is the initial one (random auxiliary kind per batch)
/// or incremental (auxiliary fixed to rotation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Initial,
    Incremental,
}

// ── label space ─────────────────────────────────────────────────────────

/// Head-index registry for one training stage.
///
/// Original classes keep their heads across stages ("old" heads first, in
/// learning order, then this stage's classes); augmented heads follow and
/// exist only while the stage trains.
#[derive(Debug, Clone)]
pub struct LabelSpace {
    old_classes: Vec<usize>,
    stage_classes: Vec<usize>,
    /// global class id -> old-head index
    old_index: Vec<Option<usize>>,
    /// global class id -> stage-local index
    local_index: Vec<Option<usize>>,
    pairs: bool,
    rotation: bool,
    cutout: bool,
    colorperm: bool,
    pair_offset: usize,
    rot_offset: usize,
    cut_offset: usize,
    perm_offset: usize,
    total: usize,
}

impl LabelSpace {
    #[allow(clippy::too_many_arguments)]
    fn build(
        old_classes: &[usize],
        stage_classes: &[usize],
        class_count: usize,
        pairs: bool,
        rotation: bool,
        cutout: bool,
        colorperm: bool,
    ) -> Result<Self> {
        let mut old_index = vec![None; class_count];
        for (i, &c) in old_classes.iter().enumerate() {
            if c >= class_count {
                return Err(Error::InvalidArgument(format!(
                    "class {c} out of range for {class_count} classes"
                )));
            }
            if old_index[c].is_some() {
                return Err(Error::InvalidArgument(format!("duplicate old class {c}")));
            }
            old_index[c] = Some(i);
        }
        let mut local_index = vec![None; class_count];
        for (i, &c) in stage_classes.iter().enumerate() {
            if c >= class_count {
                return Err(Error::InvalidArgument(format!(
                    "class {c} out of range for {class_count} classes"
                )));
            }
            if old_index[c].is_some() {
                return Err(Error::InvalidArgument(format!(
                    "class {c} appears in both old and stage classes"
                )));
            }
            if local_index[c].is_some() {
                return Err(Error::InvalidArgument(format!("duplicate stage class {c}")));
            }
            local_index[c] = Some(i);
        }
        let n_old = old_classes.len();
        let k = stage_classes.len();
        let pair_offset = n_old + k;
        let rot_offset = pair_offset + if pairs { k * (k - 1) / 2 } else { 0 };
        let cut_offset = rot_offset + if rotation { 3 * k } else { 0 };
        let perm_offset = cut_offset + if cutout { k } else { 0 };
        let total = perm_offset + if colorperm { k } else { 0 };
        Ok(LabelSpace {
            old_classes: old_classes.to_vec(),
            stage_classes: stage_classes.to_vec(),
            old_index,
            local_index,
            pairs,
            rotation,
            cutout,
            colorperm,
            pair_offset,
            rot_offset,
            cut_offset,
            perm_offset,
            total,
        })
    }

    /// Initial-stage space: no old classes; when `aux` is set, heads for all
    /// three auxiliary kinds are allocated even though each batch trains
    /// only the one kind drawn for it.
    pub fn initial(
        stage_classes: &[usize],
        class_count: usize,
        pairs: bool,
        aux: bool,
    ) -> Result<Self> {
        Self::build(&[], stage_classes, class_count, pairs, aux, aux, aux)
    }

    /// Incremental-stage space: old heads retained, auxiliary fixed to
    /// rotation.
    pub fn incremental(
        old_classes: &[usize],
        stage_classes: &[usize],
        class_count: usize,
        pairs: bool,
        rotation: bool,
    ) -> Result<Self> {
        Self::build(
            old_classes,
            stage_classes,
            class_count,
            pairs,
            rotation,
            false,
            false,
        )
    }

    pub fn head_count(&self) -> usize {
        self.total
    }

    /// Heads that survive the end-of-stage cleanup.
    pub fn original_head_count(&self) -> usize {
        self.old_classes.len() + self.stage_classes.len()
    }

    pub fn stage_classes(&self) -> &[usize] {
        &self.stage_classes
    }

    pub fn old_classes(&self) -> &[usize] {
        &self.old_classes
    }

    pub fn has_pairs(&self) -> bool {
        self.pairs
    }

    pub fn has_rotation(&self) -> bool {
        self.rotation
    }

    pub fn has_cutout(&self) -> bool {
        self.cutout
    }

    pub fn has_colorperm(&self) -> bool {
        self.colorperm
    }

    fn local(&self, class: usize) -> Result<usize> {
        self.local_index
            .get(class)
            .copied()
            .flatten()
            .ok_or_else(|| Error::InvalidArgument(format!("class {class} not in this stage")))
    }

    /// Head of an original class (old or current stage).
    pub fn original_head(&self, class: usize) -> Result<usize> {
        if let Some(Some(i)) = self.old_index.get(class) {
            return Ok(*i);
        }
        Ok(self.old_classes.len() + self.local(class)?)
    }

    /// Head of the mixed-pair class for two distinct stage classes
    /// (order-insensitive).
    pub fn pair_head(&self, class_a: usize, class_b: usize) -> Result<usize> {
        if !self.pairs {
            return Err(Error::InvalidArgument("pair heads not allocated".into()));
        }
        let (mut a, mut b) = (self.local(class_a)?, self.local(class_b)?);
        if a == b {
            return Err(Error::InvalidArgument(format!(
                "pair of class {class_a} with itself has no head"
            )));
        }
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        let k = self.stage_classes.len();
        Ok(self.pair_offset + a * (2 * k - a - 1) / 2 + (b - a - 1))
    }

    pub fn rotation_head(&self, class: usize, angle: RotAngle) -> Result<usize> {
        if !self.rotation {
            return Err(Error::InvalidArgument("rotation heads not allocated".into()));
        }
        Ok(self.rot_offset + 3 * self.local(class)? + angle.index())
    }

    pub fn cutout_head(&self, class: usize) -> Result<usize> {
        if !self.cutout {
            return Err(Error::InvalidArgument("cutout heads not allocated".into()));
        }
        Ok(self.cut_offset + self.local(class)?)
    }

    pub fn colorperm_head(&self, class: usize) -> Result<usize> {
        if !self.colorperm {
            return Err(Error::InvalidArgument(
                "color-permutation heads not allocated".into(),
            ));
        }
        Ok(self.perm_offset + self.local(class)?)
    }
}

// ── image primitives ────────────────────────────────────────────────────

/// Rotate a [c,h,h] image 90 degrees clockwise: out[r][q] = in[h-1-q][r].
pub fn rotate90_cw(src: &[f64], c: usize, h: usize, dst: &mut [f64]) {
    debug_assert_eq!(src.len(), c * h * h);
    debug_assert_eq!(dst.len(), c * h * h);
    for ch in 0..c {
        let sp = &src[ch * h * h..(ch + 1) * h * h];
        let dp = &mut dst[ch * h * h..(ch + 1) * h * h];
        for r in 0..h {
            for q in 0..h {
                dp[r * h + q] = sp[(h - 1 - q) * h + r];
            }
        }
    }
}

/// Rotate by a multiple of 90 degrees clockwise.
pub fn rotate(src: &[f64], c: usize, h: usize, angle: RotAngle) -> Vec<f64> {
    let mut cur = src.to_vec();
    let mut next = vec![0.0; src.len()];
    for _ in 0..angle.quarter_turns() {
        rotate90_cw(&cur, c, h, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// The five non-identity orderings of (R,G,B); entry i names the source
/// channel for output channel i.
pub const COLOR_PERMS: [[usize; 3]; 5] = [
    [0, 2, 1], // RBG
    [1, 0, 2], // GRB
    [1, 2, 0], // GBR
    [2, 0, 1], // BRG
    [2, 1, 0], // BGR
];

/// Reorder the channels of a [3,h,w] image.
pub fn permute_channels(src: &[f64], h: usize, w: usize, perm: &[usize; 3]) -> Vec<f64> {
    debug_assert_eq!(src.len(), 3 * h * w);
    let plane = h * w;
    let mut out = vec![0.0; src.len()];
    for (i, &p) in perm.iter().enumerate() {
        out[i * plane..(i + 1) * plane].copy_from_slice(&src[p * plane..(p + 1) * plane]);
    }
    out
}

/// Zero a rectangle [top, top+mh) x [left, left+mw), clipped to the image.
#[allow(clippy::too_many_arguments)]
pub fn apply_cutout(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    top: isize,
    left: isize,
    mh: usize,
    mw: usize,
) -> Vec<f64> {
    let mut out = src.to_vec();
    let r0 = top.max(0) as usize;
    let r1 = ((top + mh as isize).max(0) as usize).min(h);
    let c0 = left.max(0) as usize;
    let c1 = ((left + mw as isize).max(0) as usize).min(w);
    for ch in 0..c {
        for r in r0..r1 {
            let base = (ch * h + r) * w;
            out[base + c0..base + c1].iter_mut().for_each(|p| *p = 0.0);
        }
    }
    out
}

/// lambda * a + (1 - lambda) * b.
pub fn mixup(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect()
}

// ── batch-level operations ──────────────────────────────────────────────

/// A composed batch: original samples plus augmented copies, each labeled
/// with a classifier head index.
#[derive(Debug, Clone)]
pub struct AugBatch {
    pub images: Tensor,
    pub head_labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

/// Accumulates samples for an [`AugBatch`].
pub struct BatchBuilder {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
    heads: Vec<usize>,
    provenance: Vec<Provenance>,
}

impl BatchBuilder {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        BatchBuilder {
            c,
            h,
            w,
            data: Vec::new(),
            heads: Vec::new(),
            provenance: Vec::new(),
        }
    }

    fn push(&mut self, image: &[f64], head: usize, provenance: Provenance) {
        debug_assert_eq!(image.len(), self.c * self.h * self.w);
        self.data.extend_from_slice(image);
        self.heads.push(head);
        self.provenance.push(provenance);
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Requires at least one accumulated sample.
    pub fn finish(self) -> Result<AugBatch> {
        let n = self.heads.len();
        Ok(AugBatch {
            images: Tensor::new(vec![n, self.c, self.h, self.w], self.data)?,
            head_labels: self.heads,
            provenance: self.provenance,
        })
    }
}

fn sample<'a>(images: &'a Tensor, stride: usize, i: usize) -> &'a [f64] {
    &images.data()[i * stride..(i + 1) * stride]
}

/// Pair mixing: shuffle the batch, blend consecutive pairs with
/// lambda ~ U(lambda_range), and label each blend with the pair head of its
/// two (distinct) classes. Same-class pairs are skipped; a single-class
/// batch therefore contributes nothing.
pub fn base_class_aug(
    images: &Tensor,
    labels: &[usize],
    lambda_range: (f64, f64),
    rng: &mut ChaCha8Rng,
    space: &LabelSpace,
    out: &mut BatchBuilder,
) -> Result<()> {
    let (n, c, h, w) = images.dims4()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} images vs {} labels", labels.len())));
    }
    if lambda_range.0 > lambda_range.1 {
        return Err(Error::InvalidArgument(format!(
            "empty lambda range {lambda_range:?}"
        )));
    }
    let stride = c * h * w;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for pair in order.chunks_exact(2) {
        let (ia, ib) = (pair[0], pair[1]);
        if labels[ia] == labels[ib] {
            continue;
        }
        let lambda = if lambda_range.0 == lambda_range.1 {
            lambda_range.0
        } else {
            rng.random_range(lambda_range.0..lambda_range.1)
        };
        let head = space.pair_head(labels[ia], labels[ib])?;
        let blend = mixup(sample(images, stride, ia), sample(images, stride, ib), lambda);
        out.push(&blend, head, Provenance::BaseMix);
    }
    Ok(())
}

/// Rotation augmentation: three clockwise copies (90/180/270) per input,
/// each labeled with its (class, angle) head. Images must be square.
pub fn rotation_aug(
    images: &Tensor,
    labels: &[usize],
    space: &LabelSpace,
    out: &mut BatchBuilder,
) -> Result<()> {
    let (n, c, h, w) = images.dims4()?;
    if h != w {
        return Err(Error::Shape(format!(
            "rotation requires square images, got {h}x{w}"
        )));
    }
    let stride = c * h * w;
    for i in 0..n {
        for angle in RotAngle::ALL {
            let rotated = rotate(sample(images, stride, i), c, h, angle);
            let head = space.rotation_head(labels[i], angle)?;
            out.push(&rotated, head, Provenance::Aux(AugKind::Rotation));
        }
    }
    Ok(())
}

/// Cutout augmentation: one copy per input with a floor(h/2) x floor(w/2)
/// square zeroed at a uniformly drawn center, clipped at the borders.
pub fn cutout_aug(
    images: &Tensor,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
    space: &LabelSpace,
    out: &mut BatchBuilder,
) -> Result<()> {
    let (n, c, h, w) = images.dims4()?;
    let (mh, mw) = (h / 2, w / 2);
    let stride = c * h * w;
    for i in 0..n {
        let ci = rng.random_range(0..h) as isize;
        let cj = rng.random_range(0..w) as isize;
        let top = ci - (mh / 2) as isize;
        let left = cj - (mw / 2) as isize;
        let cut = apply_cutout(sample(images, stride, i), c, h, w, top, left, mh, mw);
        let head = space.cutout_head(labels[i])?;
        out.push(&cut, head, Provenance::Aux(AugKind::Cutout));
    }
    Ok(())
}

/// Color-permutation augmentation: one copy per input with channels
/// reordered by one of the five non-identity permutations, all mapping to
/// the single permutation head of the class.
pub fn color_perm_aug(
    images: &Tensor,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
    space: &LabelSpace,
    out: &mut BatchBuilder,
) -> Result<()> {
    let (n, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!(
            "color permutation requires 3 channels, got {c}"
        )));
    }
    let stride = c * h * w;
    for i in 0..n {
        let perm = &COLOR_PERMS[rng.random_range(0..COLOR_PERMS.len())];
        let permuted = permute_channels(sample(images, stride, i), h, w, perm);
        let head = space.colorperm_head(labels[i])?;
        out.push(&permuted, head, Provenance::Aux(AugKind::ColorPerm));
    }
    Ok(())
}

/// Weighted draw of one auxiliary kind, in the fixed candidate order
/// [Rotation, Cutout, ColorPerm].
pub fn select_auxiliary(weights: [f64; 3], rng: &mut ChaCha8Rng) -> Result<AugKind> {
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "negative augmentation weight in {weights:?}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(
            "augmentation weights must not all be zero".into(),
        ));
    }
    let u: f64 = rng.random_range(0.0..total);
    let kinds = [AugKind::Rotation, AugKind::Cutout, AugKind::ColorPerm];
    let mut acc = 0.0;
    for (kind, w) in kinds.iter().zip(weights) {
        acc += w;
        if u < acc {
            return Ok(*kind);
        }
    }
    Ok(AugKind::ColorPerm) // u == total is measure-zero but floats happen
}

/// Build the training batch for one step: originals (exactly once each),
/// pair mixes when enabled, then one auxiliary augmentation — drawn by
/// weight in the initial stage, fixed to rotation in incremental stages.
pub fn compose_batch(
    images: &Tensor,
    labels: &[usize],
    stage: StageKind,
    weights: [f64; 3],
    lambda_range: (f64, f64),
    rng: &mut ChaCha8Rng,
    space: &LabelSpace,
) -> Result<AugBatch> {
    let (n, c, h, w) = images.dims4()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} images vs {} labels", labels.len())));
    }
    let stride = c * h * w;
    let mut out = BatchBuilder::new(c, h, w);
    for i in 0..n {
        let head = space.original_head(labels[i])?;
        out.push(sample(images, stride, i), head, Provenance::Original);
    }
    if space.has_pairs() {
        base_class_aug(images, labels, lambda_range, rng, space, &mut out)?;
    }
    match stage {
        StageKind::Initial => {
            if space.has_rotation() {
                match select_auxiliary(weights, rng)? {
                    AugKind::Rotation => rotation_aug(images, labels, space, &mut out)?,
                    AugKind::Cutout => cutout_aug(images, labels, rng, space, &mut out)?,
                    AugKind::ColorPerm => color_perm_aug(images, labels, rng, space, &mut out)?,
                }
            }
        }
        StageKind::Incremental => {
            if space.has_rotation() {
                rotation_aug(images, labels, space, &mut out)?;
            }
        }
    }
    out.finish()
}
