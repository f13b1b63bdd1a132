use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Condition, Dataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub condition: Condition,
    pub frames: usize,
}

/// Consecutive segments of a single condition each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub segments: Vec<Segment>,
    pub seed: u64,
}

impl StreamSpec {
    pub fn total_frames(&self) -> usize {
        self.segments.iter().map(|s| s.frames).sum()
    }
}

/// One stream frame, pointing into the condition's test set. The condition
/// is ground-truth metadata (what a weather sensor would report).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Frame {
    pub condition: Condition,
    pub index: usize,
    pub label: usize,
}

/// Draws frames with replacement from each segment's condition set.
pub fn make_stream(spec: &StreamSpec, sets: &BTreeMap<Condition, Dataset>) -> Result<Vec<Frame>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut frames = Vec::with_capacity(spec.total_frames());
    for seg in &spec.segments {
        if seg.frames == 0 {
            return Err(Error::Empty("stream segment"));
        }
        let set = sets
            .get(&seg.condition)
            .ok_or_else(|| Error::UnknownTask(seg.condition.name().to_string()))?;
        if set.is_empty() {
            return Err(Error::Empty("condition test set"));
        }
        for _ in 0..seg.frames {
            let index = rng.random_range(0..set.len());
            frames.push(Frame {
                condition: seg.condition,
                index,
                label: set.labels[index],
            });
        }
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{condition_dataset, Split};

    fn sets() -> BTreeMap<Condition, Dataset> {
        [Condition::Clear, Condition::Fog]
            .into_iter()
            .map(|c| (c, condition_dataset(c, Split::Test, 2, 32, 0.5, 1).unwrap()))
            .collect()
    }

    fn spec(seed: u64) -> StreamSpec {
        StreamSpec {
            segments: vec![
                Segment {
                    condition: Condition::Clear,
                    frames: 100,
                },
                Segment {
                    condition: Condition::Fog,
                    frames: 100,
                },
            ],
            seed,
        }
    }

    #[test]
    fn segments_are_tagged_in_order() {
        let frames = make_stream(&spec(3), &sets()).unwrap();
        assert_eq!(frames.len(), 200);
        assert!(frames[..100]
            .iter()
            .all(|f| f.condition == Condition::Clear));
        assert!(frames[100..].iter().all(|f| f.condition == Condition::Fog));
    }

    #[test]
    fn same_seed_same_frames() {
        let s = sets();
        assert_eq!(
            make_stream(&spec(3), &s).unwrap(),
            make_stream(&spec(3), &s).unwrap()
        );
        assert_ne!(
            make_stream(&spec(3), &s).unwrap(),
            make_stream(&spec(4), &s).unwrap()
        );
    }

    #[test]
    fn empty_segment_and_unknown_condition() {
        let s = sets();
        let mut bad = spec(0);
        bad.segments[0].frames = 0;
        assert!(matches!(make_stream(&bad, &s), Err(Error::Empty(_))));
        let mut unknown = spec(0);
        unknown.segments[1].condition = Condition::Snow;
        assert!(matches!(
            make_stream(&unknown, &s),
            Err(Error::UnknownTask(_))
        ));
    }
}
