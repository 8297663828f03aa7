//! Episodic data handling: subject-grouped datasets, a synthetic slice
//! generator, the paired-raster on-disk format and the N-way K-shot sampler.

mod io;
mod sampler;
mod synth;

pub use io::{load_dataset, write_dataset};
pub use sampler::{sample_episode, EpisodeRequest};
pub use synth::{generate_synthetic, SynthConfig};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};
use crate::protoseg::MaskTensor;

/// One 2D slice: grayscale image plus dense labels at the same resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub image: ImageTensor,
    pub mask: MaskTensor,
}

/// All slices of one subject. Episodes never mix a subject across splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub slices: Vec<Slice>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitId {
    Train,
    Val,
    Test,
    /// Domain-shifted copy of the test subjects, for cross-domain evaluation.
    TestShifted,
}

impl SplitId {
    pub const ALL: [SplitId; 4] = [SplitId::Train, SplitId::Val, SplitId::Test, SplitId::TestShifted];

    pub fn dir_name(self) -> &'static str {
        match self {
            SplitId::Train => "train",
            SplitId::Val => "val",
            SplitId::Test => "test",
            SplitId::TestShifted => "test_shifted",
        }
    }
}

impl fmt::Display for SplitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl std::str::FromStr for SplitId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitId::Train),
            "val" => Ok(SplitId::Val),
            "test" => Ok(SplitId::Test),
            "test_shifted" => Ok(SplitId::TestShifted),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// A full dataset: subjects grouped into disjoint splits plus the class table.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub image_height: usize,
    pub image_width: usize,
    pub class_names: BTreeMap<u8, String>,
    pub train: Vec<Subject>,
    pub val: Vec<Subject>,
    pub test: Vec<Subject>,
    pub test_shifted: Vec<Subject>,
}

impl Dataset {
    pub fn split(&self, id: SplitId) -> &[Subject] {
        match id {
            SplitId::Train => &self.train,
            SplitId::Val => &self.val,
            SplitId::Test => &self.test,
            SplitId::TestShifted => &self.test_shifted,
        }
    }

    pub fn split_mut(&mut self, id: SplitId) -> &mut Vec<Subject> {
        match id {
            SplitId::Train => &mut self.train,
            SplitId::Val => &mut self.val,
            SplitId::Test => &mut self.test,
            SplitId::TestShifted => &mut self.test_shifted,
        }
    }

    /// Structural checks: disjoint subject ids, consistent slice sizes, mask
    /// labels drawn from the class table.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for split in SplitId::ALL {
            for subject in self.split(split) {
                // The shifted copy intentionally mirrors test subject ids with
                // a suffix, so plain ids must still be globally unique.
                if !seen.insert(subject.id.clone()) {
                    return Err(Error::Config(format!("subject id '{}' appears in more than one place", subject.id)));
                }
                for (i, slice) in subject.slices.iter().enumerate() {
                    if slice.image.height() != self.image_height
                        || slice.image.width() != self.image_width
                        || slice.mask.height() != self.image_height
                        || slice.mask.width() != self.image_width
                    {
                        return Err(Error::Config(format!(
                            "slice {i} of subject '{}' has inconsistent dimensions",
                            subject.id
                        )));
                    }
                    for &l in slice.mask.labels() {
                        if l != 0 && !self.class_names.contains_key(&l) {
                            return Err(Error::Config(format!(
                                "slice {i} of subject '{}' uses undeclared class {l}",
                                subject.id
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// One sampled episode. Support shots are grouped class-major (all K shots of
/// the lowest class first); masks are remapped so that labels outside the
/// episode class set read as background.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub class_set: Vec<u8>,
    pub support: Vec<(ImageTensor, MaskTensor)>,
    pub query: Vec<(ImageTensor, MaskTensor)>,
    /// Seed that reproduces this episode via [`sample_episode`].
    pub seed: u64,
}
