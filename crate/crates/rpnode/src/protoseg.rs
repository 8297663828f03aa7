//! Prototype-based dense prediction: masked average pooling of support
//! features into one prototype per class (plus background), then a per-pixel
//! temperature-scaled cosine softmax over the query features.
//!
//! Pooling and prediction accumulate in plain scan order with true divisions,
//! so results are reproducible against straightforward reference loops down
//! to the last bit.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};

/// Class id reserved for background in every mask.
pub const BACKGROUND_ID: u8 = 0;

/// Dense per-pixel class labels; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskTensor {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl MaskTensor {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch {
                context: "mask labels".into(),
                expected: vec![height, width],
                got: vec![labels.len()],
            });
        }
        Ok(MaskTensor { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn foreground_classes(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().filter(|&c| c != BACKGROUND_ID).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&c| c == class).count()
    }

    /// Boolean pixel selection for one class, in scan order.
    pub fn selection(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&c| c == class).collect()
    }
}

/// Value-level prototypes keyed by class id (ascending, background first).
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub class_ids: Vec<u8>,
    /// Row-major `[len(class_ids), dim]`.
    pub matrix: Tensor,
}

impl PrototypeSet {
    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn vector(&self, class: u8) -> Option<&[f64]> {
        let i = self.class_ids.iter().position(|&c| c == class)?;
        let d = self.dim();
        Some(&self.matrix.data()[i * d..(i + 1) * d])
    }

    /// CSV with one row per class: `class_id,c0,...`. Values use the shortest
    /// representation that round-trips.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("class_id");
        for c in 0..d {
            let _ = write!(out, ",c{c}");
        }
        out.push('\n');
        for (i, id) in self.class_ids.iter().enumerate() {
            let _ = write!(out, "{id}");
            for v in &self.matrix.data()[i * d..(i + 1) * d] {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Per-pixel class probabilities aligned with `class_ids` (ascending order,
/// background first).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub class_ids: Vec<u8>,
    /// `[len(class_ids), h, w]`.
    pub probs: Tensor,
}

impl ProbabilityMap {
    pub fn new(class_ids: Vec<u8>, probs: Tensor) -> Result<Self> {
        if probs.shape().len() != 3 || probs.shape()[0] != class_ids.len() {
            return Err(Error::ShapeMismatch {
                context: "probability map".into(),
                expected: vec![class_ids.len()],
                got: probs.shape().to_vec(),
            });
        }
        if class_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::ClassMismatch("probability map class ids must be strictly ascending".into()));
        }
        Ok(ProbabilityMap { class_ids, probs })
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[2]
    }

    /// Checks that every pixel distribution is a distribution.
    pub fn validate(&self) -> Result<()> {
        let (n, h, w) = (self.class_ids.len(), self.height(), self.width());
        let hw = h * w;
        for px in 0..hw {
            let mut s = 0.0;
            for i in 0..n {
                let p = self.probs.data()[i * hw + px];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("probability {p} out of range at pixel {px}")));
                }
                s += p;
            }
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("pixel {px} probabilities sum to {s}")));
            }
        }
        Ok(())
    }
}

/// Bilinearly upsamples feature maps to the mask resolution (aligned corners).
/// Shrinking is refused; prototypes are always pooled at full mask resolution.
pub fn upsample_features(tape: &mut Tape, features: Var, target_h: usize, target_w: usize) -> Result<Var> {
    let s = tape.value(features).shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "upsample input".into(),
            expected: vec![3],
            got: s.to_vec(),
        });
    }
    if target_h < s[1] || target_w < s[2] {
        return Err(Error::Config(format!(
            "upsample target {}x{} is smaller than the feature map {}x{}",
            target_h, target_w, s[1], s[2]
        )));
    }
    Ok(tape.bilinear_upsample(features, target_h, target_w))
}

fn check_aligned(tape: &Tape, features: &[Var], masks: &[&MaskTensor]) -> Result<()> {
    if features.len() != masks.len() {
        return Err(Error::ShapeMismatch {
            context: "support shots".into(),
            expected: vec![masks.len()],
            got: vec![features.len()],
        });
    }
    if features.is_empty() {
        return Err(Error::Config("masked pooling needs at least one support shot".into()));
    }
    for (f, m) in features.iter().zip(masks) {
        let s = tape.value(*f).shape();
        if s.len() != 3 || s[1] != m.height() || s[2] != m.width() {
            return Err(Error::ShapeMismatch {
                context: "feature/mask resolution".into(),
                expected: vec![m.height(), m.width()],
                got: s.to_vec(),
            });
        }
    }
    Ok(())
}

/// Masked average pooling over K support shots: per shot, the mean feature
/// over the class pixels; then the mean over shots. Shots without a single
/// pixel of the class drop out of the outer mean; if every shot lacks it the
/// class is unpoolable and an error names it.
pub fn masked_average_pool(tape: &mut Tape, features: &[Var], masks: &[&MaskTensor], class: u8) -> Result<Var> {
    check_aligned(tape, features, masks)?;
    let mut per_shot = Vec::new();
    for (&f, m) in features.iter().zip(masks) {
        let count = m.count(class);
        if count == 0 {
            continue;
        }
        per_shot.push(tape.masked_mean(f, m.selection(class), count));
    }
    if per_shot.is_empty() {
        return Err(Error::MissingClass { class });
    }
    let mut acc = per_shot[0];
    for &p in &per_shot[1..] {
        acc = tape.add(acc, p);
    }
    Ok(tape.div_scalar(acc, per_shot.len() as f64))
}

/// Background prototype: masked average pooling of the pixels labeled with no
/// foreground class.
pub fn background_prototype(tape: &mut Tape, features: &[Var], masks: &[&MaskTensor]) -> Result<Var> {
    masked_average_pool(tape, features, masks, BACKGROUND_ID)
}

/// Builds the full prototype matrix `[1 + n_fg, d]` for the episode class set:
/// background first, then the foreground classes in ascending order.
pub fn build_prototype_matrix(
    tape: &mut Tape,
    features: &[Var],
    masks: &[&MaskTensor],
    foreground: &[u8],
) -> Result<(Vec<u8>, Var)> {
    if foreground.is_empty() {
        return Err(Error::ClassMismatch("episode has no foreground classes".into()));
    }
    let mut ids: Vec<u8> = foreground.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids[0] == BACKGROUND_ID {
        return Err(Error::ClassMismatch("background is not a foreground class".into()));
    }
    ids.insert(0, BACKGROUND_ID);
    let mut rows = Vec::with_capacity(ids.len());
    for &c in &ids {
        rows.push(masked_average_pool(tape, features, masks, c)?);
    }
    let matrix = tape.stack_rows(&rows);
    Ok((ids, matrix))
}

/// Temperature-scaled cosine softmax of query features against prototypes.
/// `query` is `[d, h, w]` (already at target resolution), `protos` `[n, d]`.
pub fn predict_on_tape(tape: &mut Tape, query: Var, protos: Var, temperature: f64) -> Var {
    let sims = tape.cosine_map(query, protos);
    let logits = tape.scale(sims, temperature);
    tape.softmax_channels(logits)
}

/// Value-level prediction from a pooled prototype set.
pub fn predict(query: &FeatureMap, protos: &PrototypeSet, temperature: f64) -> Result<ProbabilityMap> {
    if query.shape().len() != 3 || query.shape()[0] != protos.dim() {
        return Err(Error::ShapeMismatch {
            context: "query features vs prototypes".into(),
            expected: vec![protos.dim()],
            got: query.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let q = tape.leaf(query.clone());
    let p = tape.leaf(protos.matrix.clone());
    let probs = predict_on_tape(&mut tape, q, p, temperature);
    ProbabilityMap::new(protos.class_ids.clone(), tape.value(probs).clone())
}

/// Extracts value-level prototypes from a built matrix var.
pub fn prototype_set(tape: &Tape, class_ids: &[u8], matrix: Var) -> PrototypeSet {
    PrototypeSet {
        class_ids: class_ids.to_vec(),
        matrix: tape.value(matrix).clone(),
    }
}

/// Hard segmentation by per-pixel argmax; ties resolve to the lowest class id.
pub fn argmax_mask(map: &ProbabilityMap) -> MaskTensor {
    let (n, h, w) = (map.class_ids.len(), map.height(), map.width());
    let hw = h * w;
    let mut labels = vec![0u8; hw];
    for px in 0..hw {
        let mut best_i = 0usize;
        let mut best_p = map.probs.data()[px];
        for i in 1..n {
            let p = map.probs.data()[i * hw + px];
            if p > best_p {
                best_p = p;
                best_i = i;
            }
        }
        labels[px] = map.class_ids[best_i];
    }
    MaskTensor { height: h, width: w, labels }
}
