use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use super::SequenceSample;
use crate::error::{Error, Result};
use crate::world::{PairId, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.65,
            val: 0.15,
            test: 0.20,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(*p >= 0.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split ratios must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: BTreeSet<VehicleId>,
    pub val: BTreeSet<VehicleId>,
    pub test: BTreeSet<VehicleId>,
}

fn find(parent: &mut BTreeMap<VehicleId, VehicleId>, v: VehicleId) -> VehicleId {
    let p = parent[&v];
    if p == v {
        return v;
    }
    let root = find(parent, p);
    parent.insert(v, root);
    root
}

/// Assign vehicles to splits. Vehicles linked through a colliding pair form one
/// group that is never divided; groups are shuffled and filled into train, then
/// val, then test up to their target counts.
pub fn split_vehicles(
    vehicles: &BTreeSet<VehicleId>,
    colliding: &[PairId],
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment> {
    ratios.validate()?;
    let mut parent: BTreeMap<VehicleId, VehicleId> = vehicles.iter().map(|v| (*v, *v)).collect();
    for p in colliding {
        if !(parent.contains_key(&p.0) && parent.contains_key(&p.1)) {
            continue;
        }
        let (a, b) = (find(&mut parent, p.0), find(&mut parent, p.1));
        if a != b {
            parent.insert(a.max(b), a.min(b));
        }
    }
    let mut groups: BTreeMap<VehicleId, Vec<VehicleId>> = BTreeMap::new();
    for v in vehicles {
        let r = find(&mut parent, *v);
        groups.entry(r).or_default().push(*v);
    }
    let mut groups: Vec<Vec<VehicleId>> = groups.into_values().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = vehicles.len() as f64;
    let want_train = (ratios.train * n).round() as usize;
    let want_val = (ratios.val * n).round() as usize;
    let mut out = SplitAssignment::default();
    for g in groups {
        let target = if out.train.len() + g.len() <= want_train {
            &mut out.train
        } else if out.val.len() + g.len() <= want_val {
            &mut out.val
        } else {
            &mut out.test
        };
        target.extend(g);
    }
    Ok(out)
}

/// Partition samples by the vehicle assignment. Vehicles in no split are dropped.
pub fn split_dataset(
    samples: Vec<SequenceSample>,
    assignment: &SplitAssignment,
) -> (Vec<SequenceSample>, Vec<SequenceSample>, Vec<SequenceSample>) {
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        if assignment.train.contains(&s.vehicle_id) {
            tr.push(s);
        } else if assignment.val.contains(&s.vehicle_id) {
            va.push(s);
        } else if assignment.test.contains(&s.vehicle_id) {
            te.push(s);
        }
    }
    (tr, va, te)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: u32) -> BTreeSet<VehicleId> {
        (0..n).map(VehicleId).collect()
    }

    #[test]
    fn hundred_vehicles_split_65_15_20() {
        let a = split_vehicles(&ids(100), &[], SplitRatios::default(), 4).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (65, 15, 20));
        let b = split_vehicles(&ids(100), &[], SplitRatios::default(), 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_ratios_rejected() {
        let r = SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.1,
        };
        assert!(matches!(split_vehicles(&ids(10), &[], r, 0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_keep_pairs(n in 2u32..200, pairs in prop::collection::vec((0u32..200, 0u32..200), 0..20), seed in 0u64..1000) {
            let colliding: Vec<PairId> = pairs
                .iter()
                .filter(|(a, b)| a < &n && b < &n && a != b)
                .map(|&(a, b)| PairId::new(VehicleId(a), VehicleId(b)))
                .collect();
            let a = split_vehicles(&ids(n), &colliding, SplitRatios::default(), seed).unwrap();
            prop_assert_eq!(a.train.len() + a.val.len() + a.test.len(), n as usize);
            prop_assert!(a.train.is_disjoint(&a.val) && a.train.is_disjoint(&a.test) && a.val.is_disjoint(&a.test));
            for p in &colliding {
                let side = |v: &VehicleId| if a.train.contains(v) { 0 } else if a.val.contains(v) { 1 } else { 2 };
                prop_assert_eq!(side(&p.0), side(&p.1));
            }
        }
    }
}
