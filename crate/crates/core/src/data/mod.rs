//! The synthetic benchmark: shape images, procedural weather corruptions,
//! PNG directory ingestion and condition streams.

mod corrupt;
mod io;
mod shapes;
mod stream;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub use corrupt::{corrupt, corrupt_dataset, FOG_AIRLIGHT};
pub use io::{load_directory_dataset, write_directory_dataset};
pub use shapes::{generate_shapes, ShapeClass, SHAPE_CLASSES};
pub use stream::{make_stream, Frame, Segment, StreamSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clear,
    Rain,
    Fog,
    Snow,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Clear,
        Condition::Rain,
        Condition::Fog,
        Condition::Snow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Clear => "clear",
            Condition::Rain => "rain",
            Condition::Fog => "fog",
            Condition::Snow => "snow",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Generated { seed: u64 },
    Directory(PathBuf),
}

/// Images in `[0, 1]` with class labels. Labels of non-clear sets are only
/// read by evaluation and the supervised baselines.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub condition: Condition,
    pub source: DatasetSource,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        self.images.row(i)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Per-channel mean and standard deviation over all pixels.
    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        let [c, h, w] = self.image_shape();
        let hw = h * w;
        (0..c)
            .map(|ci| {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for n in 0..self.len() {
                    for &v in &self.image(n)[ci * hw..(ci + 1) * hw] {
                        sum += v as f64;
                        sq += (v as f64) * (v as f64);
                    }
                }
                let count = (self.len() * hw) as f64;
                let mean = sum / count;
                (mean, (sq / count - mean * mean).max(0.0).sqrt())
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.shape().first() != Some(&self.labels.len()) {
            return Err(Error::shape(
                "dataset",
                self.images.shape(),
                &[self.labels.len()],
            ));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: self.num_classes,
            });
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Shape images for one condition and split. Every condition draws its own
/// base images, so no scene is shared between conditions.
pub fn condition_dataset(
    condition: Condition,
    split: Split,
    per_class: usize,
    size: usize,
    intensity: f64,
    master_seed: u64,
) -> Result<Dataset> {
    let tag = format!("{}:{}", condition.name(), split.name());
    let base = generate_shapes(
        per_class,
        SHAPE_CLASSES.len(),
        size,
        seed::named(master_seed, &tag),
    )?;
    corrupt_dataset(
        &base,
        condition,
        intensity,
        seed::named(master_seed, &format!("corrupt:{tag}")),
    )
}
