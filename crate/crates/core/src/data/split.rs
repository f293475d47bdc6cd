use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// Classes with more training samples than this are many-shot.
pub const MANY_SHOT_ABOVE: usize = 100;
/// Classes with fewer training samples than this are few-shot.
pub const FEW_SHOT_BELOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shot {
    Many,
    Medium,
    Few,
}

impl Shot {
    pub fn of_count(count: usize) -> Shot {
        if count > MANY_SHOT_ABOVE {
            Shot::Many
        } else if count >= FEW_SHOT_BELOW {
            Shot::Medium
        } else {
            Shot::Few
        }
    }
}

/// Partition of the known labels by training-set size.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ShotSplit {
    pub many: BTreeSet<usize>,
    pub medium: BTreeSet<usize>,
    pub few: BTreeSet<usize>,
}

impl ShotSplit {
    pub fn shot_of(&self, label: usize) -> Option<Shot> {
        if self.many.contains(&label) {
            Some(Shot::Many)
        } else if self.medium.contains(&label) {
            Some(Shot::Medium)
        } else if self.few.contains(&label) {
            Some(Shot::Few)
        } else {
            None
        }
    }

    pub fn labels(&self) -> BTreeSet<usize> {
        self.many.iter().chain(&self.medium).chain(&self.few).copied().collect()
    }
}

/// many: count > 100; medium: 20 <= count <= 100; few: count < 20.
pub fn split_by_shot(counts: &BTreeMap<usize, usize>) -> ShotSplit {
    let mut split = ShotSplit::default();
    for (&label, &count) in counts {
        match Shot::of_count(count) {
            Shot::Many => split.many.insert(label),
            Shot::Medium => split.medium.insert(label),
            Shot::Few => split.few.insert(label),
        };
    }
    split
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn thresholds() {
        let counts = BTreeMap::from([(0, 150), (1, 50), (2, 10), (3, 100), (4, 20), (5, 101), (6, 19)]);
        let s = split_by_shot(&counts);
        assert_eq!(s.many, BTreeSet::from([0, 5]));
        assert_eq!(s.medium, BTreeSet::from([1, 3, 4]));
        assert_eq!(s.few, BTreeSet::from([2, 6]));
        assert_eq!(s.shot_of(7), None);
    }

    proptest! {
        #[test]
        fn split_is_a_partition(counts in proptest::collection::vec(1usize..400, 1..40)) {
            let map: BTreeMap<usize, usize> = counts.iter().copied().enumerate().collect();
            let s = split_by_shot(&map);
            prop_assert!(s.many.is_disjoint(&s.medium));
            prop_assert!(s.many.is_disjoint(&s.few));
            prop_assert!(s.medium.is_disjoint(&s.few));
            prop_assert_eq!(s.labels(), map.keys().copied().collect::<BTreeSet<_>>());
        }
    }
}
