//! Synthetic abdominal-style slice generator. Three disjoint organ families
//! keep the novel-class protocol honest: training subjects carry ellipses and
//! lobed blobs, test subjects carry crescents that never appear in training.
//! Backgrounds mix a slowly varying field, pixel noise and non-organ
//! distractor shapes so that segmentation needs more than thresholding.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::protoseg::MaskTensor;
use crate::rng::{chacha, derive_seed, role};

use super::{Dataset, Slice, SplitId, Subject};

pub const CLASS_ELLIPSE: u8 = 1;
pub const CLASS_BLOB: u8 = 2;
pub const CLASS_CRESCENT: u8 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// `[height, width]`; both must be at least 16.
    pub image_size: [usize; 2],
    /// Subject counts per split; defaults follow a 1/2 : 1/6 : 1/3 ratio.
    pub train_subjects: usize,
    pub val_subjects: usize,
    pub test_subjects: usize,
    pub slices_per_subject: usize,
    /// Intensity offset of organs over the local background.
    pub organ_contrast: f64,
    /// Standard deviation of per-pixel background noise.
    pub texture_noise: f64,
    /// Non-organ shapes rendered per slice.
    pub distractors: usize,
    /// Also emit a domain-shifted copy of the test subjects.
    pub shifted_test_copy: bool,
    /// Gamma applied to shifted images.
    pub shift_gamma: f64,
    /// Extra noise added to shifted images.
    pub shift_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: [64, 64],
            train_subjects: 12,
            val_subjects: 4,
            test_subjects: 8,
            slices_per_subject: 8,
            organ_contrast: 0.22,
            texture_noise: 0.02,
            distractors: 2,
            shifted_test_copy: false,
            shift_gamma: 0.8,
            shift_noise: 0.02,
            seed: 9001,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::Config(format!("synth.image_size must be at least 16x16, got {h}x{w}")));
        }
        if self.train_subjects == 0 || self.test_subjects == 0 {
            return Err(Error::Config("synth needs at least one train and one test subject".into()));
        }
        if self.slices_per_subject == 0 {
            return Err(Error::Config("synth.slices_per_subject must be positive".into()));
        }
        if !(self.organ_contrast.is_finite() && self.organ_contrast > 0.0) {
            return Err(Error::Config(format!("synth.organ_contrast must be positive, got {}", self.organ_contrast)));
        }
        if !(self.texture_noise.is_finite() && self.texture_noise >= 0.0) {
            return Err(Error::Config("synth.texture_noise must be non-negative".into()));
        }
        if !(self.shift_gamma.is_finite() && self.shift_gamma > 0.0) {
            return Err(Error::Config("synth.shift_gamma must be positive".into()));
        }
        Ok(())
    }
}

/// Per-subject anatomy traits shared by all of the subject's slices.
struct SubjectTraits {
    base_intensity: f64,
    organ_scale: f64,
    contrast_scale: f64,
}

fn subject_traits(rng: &mut impl Rng) -> SubjectTraits {
    SubjectTraits {
        base_intensity: rng.gen_range(0.30..0.45),
        organ_scale: rng.gen_range(0.85..1.15),
        contrast_scale: rng.gen_range(0.9..1.1),
    }
}

/// Organ region predicate; returns true for pixels inside the organ.
enum OrganShape {
    Ellipse { cy: f64, cx: f64, a: f64, b: f64, theta: f64 },
    Blob { cy: f64, cx: f64, r0: f64, lobes: u32, amp: f64, phase: f64 },
    Crescent { cy: f64, cx: f64, r_outer: f64, r_inner: f64, icy: f64, icx: f64 },
}

impl OrganShape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            OrganShape::Ellipse { cy, cx, a, b, theta } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * theta.cos() + dy * theta.sin();
                let v = -dx * theta.sin() + dy * theta.cos();
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            OrganShape::Blob { cy, cx, r0, lobes, amp, phase } => {
                let (dy, dx) = (y - cy, x - cx);
                let rho = (dx * dx + dy * dy).sqrt();
                let phi = dy.atan2(dx);
                rho <= r0 * (1.0 + amp * (lobes as f64 * phi + phase).sin())
            }
            OrganShape::Crescent { cy, cx, r_outer, r_inner, icy, icx } => {
                let outer = (y - cy).powi(2) + (x - cx).powi(2) <= r_outer * r_outer;
                let inner = (y - icy).powi(2) + (x - icx).powi(2) <= r_inner * r_inner;
                outer && !inner
            }
        }
    }
}

fn draw_organ(class: u8, h: f64, w: f64, scale: f64, rng: &mut impl Rng) -> OrganShape {
    let min_dim = h.min(w);
    let cy = rng.gen_range(0.32..0.68) * h;
    let cx = rng.gen_range(0.32..0.68) * w;
    match class {
        CLASS_ELLIPSE => {
            let a = rng.gen_range(0.14..0.20) * min_dim * scale;
            OrganShape::Ellipse {
                cy,
                cx,
                a,
                b: a * rng.gen_range(0.55..0.8),
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            }
        }
        CLASS_BLOB => OrganShape::Blob {
            cy,
            cx,
            r0: rng.gen_range(0.11..0.16) * min_dim * scale,
            lobes: rng.gen_range(3..6),
            amp: 0.32,
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        },
        CLASS_CRESCENT => {
            let r_outer = rng.gen_range(0.14..0.19) * min_dim * scale;
            let offset = r_outer * rng.gen_range(0.55..0.8);
            let dir = rng.gen_range(0.0..std::f64::consts::TAU);
            OrganShape::Crescent {
                cy,
                cx,
                r_outer,
                r_inner: r_outer * rng.gen_range(0.6..0.8),
                icy: cy + offset * dir.sin(),
                icx: cx + offset * dir.cos(),
            }
        }
        other => unreachable!("no organ family for class {other}"),
    }
}

/// Low-frequency background field: a handful of oriented cosine waves.
struct BackgroundField {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl BackgroundField {
    fn draw(rng: &mut impl Rng) -> Self {
        let waves = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.01..0.04),
                    rng.gen_range(1.0..3.5),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        BackgroundField { waves }
    }

    fn at(&self, ny: f64, nx: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(amp, freq, orient, phase)| {
                let u = nx * orient.cos() + ny * orient.sin();
                amp * (std::f64::consts::TAU * freq * u + phase).cos()
            })
            .sum()
    }
}

/// Round-trips every pixel through f32 so that the on-disk raster format is
/// lossless for generated data.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.02, 0.98) as f32) as f64
}

fn render_slice(
    cfg: &SynthConfig,
    traits: &SubjectTraits,
    class: u8,
    seed: u64,
) -> Result<Slice> {
    let [h, w] = cfg.image_size;
    let mut rng = chacha(seed);
    let noise = Normal::new(0.0, cfg.texture_noise.max(1e-12)).expect("validated");
    let speckle = Normal::new(0.0, 0.03).expect("constant sigma");

    for _attempt in 0..16 {
        let field = BackgroundField::draw(&mut rng);
        let organ = draw_organ(class, h as f64, w as f64, traits.organ_scale, &mut rng);
        let organ_delta = cfg.organ_contrast * traits.contrast_scale;

        // Distractors use shapes outside every organ family: small discs and
        // rings at sub-organ contrast. Rendered first so the organ wins any
        // overlap and the mask stays exact.
        let distractors: Vec<(f64, f64, f64, f64, bool, f64)> = (0..cfg.distractors)
            .map(|i| {
                let cy = rng.gen_range(0.1..0.9) * h as f64;
                let cx = rng.gen_range(0.1..0.9) * w as f64;
                let r = rng.gen_range(0.04..0.09) * (h.min(w)) as f64;
                let ring = i % 2 == 1;
                let delta = organ_delta * rng.gen_range(0.5..0.8) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                (cy, cx, r, r * 0.55, ring, delta)
            })
            .collect();

        let mut image = vec![0.0f64; h * w];
        let mut labels = vec![0u8; h * w];
        let mut organ_pixels = 0usize;
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut v = traits.base_intensity + field.at(yf / h as f64, xf / w as f64);
                for &(cy, cx, r, r_in, ring, delta) in &distractors {
                    let d2 = (yf - cy).powi(2) + (xf - cx).powi(2);
                    let inside = if ring {
                        d2 <= r * r && d2 >= r_in * r_in
                    } else {
                        d2 <= r_in * r_in
                    };
                    if inside {
                        v += delta;
                    }
                }
                if organ.contains(yf, xf) {
                    v = traits.base_intensity + organ_delta + speckle.sample(&mut rng);
                    labels[y * w + x] = class;
                    organ_pixels += 1;
                }
                v += noise.sample(&mut rng);
                image[y * w + x] = quantize(v);
            }
        }

        // Degenerate draws (organ clipped away or covering everything) retry
        // with fresh geometry from the same stream.
        if organ_pixels >= 8 && organ_pixels <= h * w - 8 {
            return Ok(Slice {
                image: ImageTensor::new(h, w, image)?,
                mask: MaskTensor::new(h, w, labels)?,
            });
        }
    }
    Err(Error::Config(format!("could not place a class-{class} organ after 16 attempts (image too small?)")))
}

fn shift_slice(cfg: &SynthConfig, slice: &Slice, seed: u64) -> Result<Slice> {
    let mut rng = chacha(seed);
    let noise = Normal::new(0.0, cfg.shift_noise.max(1e-12)).expect("validated");
    let data = slice
        .image
        .data()
        .iter()
        .map(|&v| quantize(v.powf(cfg.shift_gamma) + noise.sample(&mut rng)))
        .collect();
    Ok(Slice {
        image: ImageTensor::new(slice.image.height(), slice.image.width(), data)?,
        mask: slice.mask.clone(),
    })
}

/// Deterministically generates the dataset described by `cfg`. Training and
/// validation subjects alternate between the two seen organ families; test
/// subjects carry only the held-out crescent class.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut ds = Dataset {
        image_height: cfg.image_size[0],
        image_width: cfg.image_size[1],
        ..Dataset::default()
    };
    ds.class_names.insert(CLASS_ELLIPSE, "ellipse".into());
    ds.class_names.insert(CLASS_BLOB, "blob".into());
    ds.class_names.insert(CLASS_CRESCENT, "crescent".into());

    let splits = [
        (SplitId::Train, "tr", cfg.train_subjects),
        (SplitId::Val, "va", cfg.val_subjects),
        (SplitId::Test, "te", cfg.test_subjects),
    ];
    for (split_idx, (split, prefix, count)) in splits.into_iter().enumerate() {
        for si in 0..count {
            let subject_seed = derive_seed(cfg.seed, &[role::SYNTH_SUBJECT, split_idx as u64, si as u64]);
            let mut srng = chacha(subject_seed);
            let traits = subject_traits(&mut srng);
            let class = match split {
                SplitId::Test | SplitId::TestShifted => CLASS_CRESCENT,
                _ => {
                    if si % 2 == 0 {
                        CLASS_ELLIPSE
                    } else {
                        CLASS_BLOB
                    }
                }
            };
            let mut slices = Vec::with_capacity(cfg.slices_per_subject);
            for sj in 0..cfg.slices_per_subject {
                let slice_seed = derive_seed(cfg.seed, &[role::SYNTH_SLICE, split_idx as u64, si as u64, sj as u64]);
                slices.push(render_slice(cfg, &traits, class, slice_seed)?);
            }
            ds.split_mut(split).push(Subject {
                id: format!("{prefix}{si:03}"),
                slices,
            });
        }
    }

    if cfg.shifted_test_copy {
        let shifted: Vec<Subject> = ds
            .test
            .iter()
            .enumerate()
            .map(|(si, subject)| {
                let slices = subject
                    .slices
                    .iter()
                    .enumerate()
                    .map(|(sj, slice)| {
                        let seed = derive_seed(cfg.seed, &[role::SYNTH_SLICE, 3, si as u64, sj as u64]);
                        shift_slice(cfg, slice, seed)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Subject {
                    id: format!("{}-shifted", subject.id),
                    slices,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ds.test_shifted = shifted;
    }

    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            image_size: [32, 32],
            train_subjects: 4,
            val_subjects: 2,
            test_subjects: 2,
            slices_per_subject: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&tiny_cfg()).unwrap();
        let b = generate_synthetic(&tiny_cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SynthConfig { seed: 9002, ..tiny_cfg() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn organ_families_are_split_disjoint() {
        let ds = generate_synthetic(&tiny_cfg()).unwrap();
        let classes_of = |subjects: &[Subject]| {
            let mut set = std::collections::BTreeSet::new();
            for s in subjects {
                for sl in &s.slices {
                    set.extend(sl.mask.foreground_classes());
                }
            }
            set
        };
        let train = classes_of(&ds.train);
        let test = classes_of(&ds.test);
        assert_eq!(train, [CLASS_ELLIPSE, CLASS_BLOB].into_iter().collect());
        assert_eq!(test, [CLASS_CRESCENT].into_iter().collect());
        assert!(train.is_disjoint(&test), "novel class leaked into training");
    }

    #[test]
    fn every_slice_has_organ_and_background() {
        let ds = generate_synthetic(&tiny_cfg()).unwrap();
        for split in SplitId::ALL {
            for subject in ds.split(split) {
                for slice in &subject.slices {
                    let fg: usize = slice.mask.foreground_classes().iter().map(|&c| slice.mask.count(c)).sum();
                    assert!(fg >= 8, "organ too small in {}", subject.id);
                    assert!(slice.mask.count(0) >= 8, "background vanished in {}", subject.id);
                }
            }
        }
    }

    #[test]
    fn pixel_values_survive_f32_round_trips() {
        let ds = generate_synthetic(&tiny_cfg()).unwrap();
        let slice = &ds.train[0].slices[0];
        for &v in slice.image.data() {
            assert_eq!(v, (v as f32) as f64, "pixel value {v} is not f32-exact");
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn shifted_copy_keeps_masks_and_changes_images() {
        let cfg = SynthConfig { shifted_test_copy: true, ..tiny_cfg() };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.test_shifted.len(), ds.test.len());
        for (a, b) in ds.test.iter().zip(&ds.test_shifted) {
            assert_eq!(b.id, format!("{}-shifted", a.id));
            for (sa, sb) in a.slices.iter().zip(&b.slices) {
                assert_eq!(sa.mask, sb.mask, "shift must not move labels");
                assert_ne!(sa.image, sb.image, "shift must alter intensities");
            }
        }
    }

    #[test]
    fn subject_counts_follow_the_configured_ratio() {
        let ds = generate_synthetic(&SynthConfig::default()).unwrap();
        assert_eq!(ds.train.len(), 12);
        assert_eq!(ds.val.len(), 4);
        assert_eq!(ds.test.len(), 8);
    }

    #[test]
    fn rejects_undersized_images() {
        let cfg = SynthConfig { image_size: [8, 8], ..SynthConfig::default() };
        assert!(generate_synthetic(&cfg).is_err());
    }
}
