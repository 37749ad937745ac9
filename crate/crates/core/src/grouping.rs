//! Per-round partition of meters into groups with a randomly chosen master.
//!
//! Members hand their noise to the master of their group, and the master
//! forwards only the group sum to the aggregator.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use thiserror::Error;

use crate::energy::MicroKwh;
use crate::meter::MeterId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GroupingError {
    #[error("cannot form {groups} groups from {meters} meters")]
    TooManyGroups { groups: usize, meters: usize },
    #[error("group count must be at least 1")]
    NoGroups,
    #[error("meter {0} listed more than once")]
    DuplicateMeter(MeterId),
    #[error("no noise submission from meter {0}")]
    MissingSubmission(MeterId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    round: usize,
    groups: Vec<Vec<MeterId>>,
    masters: Vec<MeterId>,
    group_of: HashMap<MeterId, usize>,
}

impl GroupAssignment {
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn groups(&self) -> &[Vec<MeterId>] {
        &self.groups
    }

    pub fn masters(&self) -> &[MeterId] {
        &self.masters
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group_of(&self, meter: MeterId) -> Option<usize> {
        self.group_of.get(&meter).copied()
    }

    pub fn is_master(&self, meter: MeterId) -> bool {
        self.group_of(meter).is_some_and(|g| self.masters[g] == meter)
    }
}

/// Shuffles the meters into `k` groups whose sizes differ by at most one and
/// picks one master uniformly inside each group.
pub fn form_groups<R: Rng + ?Sized>(
    round: usize,
    meter_ids: &[MeterId],
    k: usize,
    rng: &mut R,
) -> Result<GroupAssignment, GroupingError> {
    if k == 0 {
        return Err(GroupingError::NoGroups);
    }
    if k > meter_ids.len() {
        return Err(GroupingError::TooManyGroups {
            groups: k,
            meters: meter_ids.len(),
        });
    }
    let mut group_of = HashMap::with_capacity(meter_ids.len());
    for &id in meter_ids {
        if group_of.insert(id, 0).is_some() {
            return Err(GroupingError::DuplicateMeter(id));
        }
    }

    let mut shuffled = meter_ids.to_vec();
    shuffled.shuffle(rng);
    let base = shuffled.len() / k;
    let extra = shuffled.len() % k;
    let mut groups = Vec::with_capacity(k);
    let mut rest = shuffled.as_slice();
    for g in 0..k {
        let size = base + usize::from(g < extra);
        let (head, tail) = rest.split_at(size);
        groups.push(head.to_vec());
        rest = tail;
    }

    let masters = groups
        .iter()
        .map(|members| *members.choose(rng).expect("groups are non-empty"))
        .collect();
    for (g, members) in groups.iter().enumerate() {
        for id in members {
            group_of.insert(*id, g);
        }
    }
    Ok(GroupAssignment {
        round,
        groups,
        masters,
        group_of,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupNoiseReport {
    pub round: usize,
    pub timestep: usize,
    pub group_index: usize,
    pub master: MeterId,
    pub aggregated_noise: MicroKwh,
}

/// Reports from every group that heard from all of its members, plus the
/// groups that could not report.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroupCollection {
    pub reports: Vec<GroupNoiseReport>,
    /// `(group_index, first missing member)` for every aborted group.
    pub missing: Vec<(usize, MeterId)>,
}

/// Collects group sums, aborting (and logging) any group with a missing
/// member submission.
pub fn collect_group_noise<F>(assignment: &GroupAssignment, timestep: usize, submission: F) -> GroupCollection
where
    F: Fn(MeterId) -> Option<MicroKwh>,
{
    let mut out = GroupCollection::default();
    'groups: for (g, members) in assignment.groups.iter().enumerate() {
        let mut total = MicroKwh::ZERO;
        for &id in members {
            match submission(id) {
                Some(noise) => total += noise,
                None => {
                    log::warn!(
                        "round {} timestep {timestep}: group {g} aborted, meter {id} did not submit",
                        assignment.round
                    );
                    out.missing.push((g, id));
                    continue 'groups;
                }
            }
        }
        out.reports.push(GroupNoiseReport {
            round: assignment.round,
            timestep,
            group_index: g,
            master: assignment.masters[g],
            aggregated_noise: total,
        });
    }
    out
}

/// Strict form of [`collect_group_noise`]: fails on the first missing member.
pub fn accumulate_group_noise<F>(
    assignment: &GroupAssignment,
    timestep: usize,
    submission: F,
) -> Result<Vec<GroupNoiseReport>, GroupingError>
where
    F: Fn(MeterId) -> Option<MicroKwh>,
{
    let collection = collect_group_noise(assignment, timestep, submission);
    match collection.missing.first() {
        Some(&(_, id)) => Err(GroupingError::MissingSubmission(id)),
        None => Ok(collection.reports),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, BTreeSet};

    fn assert_partition(assignment: &GroupAssignment, ids: &[MeterId]) {
        let mut seen = BTreeSet::new();
        for (g, members) in assignment.groups().iter().enumerate() {
            assert!(members.contains(&assignment.masters()[g]));
            for id in members {
                assert!(seen.insert(*id), "meter {id} in two groups");
                assert_eq!(assignment.group_of(*id), Some(g));
            }
        }
        assert_eq!(seen, ids.iter().copied().collect());
        let sizes: Vec<usize> = assignment.groups().iter().map(Vec::len).collect();
        let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(max - min <= 1, "sizes {sizes:?}");
    }

    #[test]
    fn nine_meters_three_groups() {
        let ids: Vec<MeterId> = (0..9).collect();
        let a = form_groups(0, &ids, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_partition(&a, &ids);
        assert!(a.groups().iter().all(|g| g.len() == 3));
    }

    #[test]
    fn ten_meters_three_groups() {
        let ids: Vec<MeterId> = (0..10).collect();
        let a = form_groups(0, &ids, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_partition(&a, &ids);
        let mut sizes: Vec<usize> = a.groups().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
    }

    #[test]
    fn singleton_groups() {
        let ids: Vec<MeterId> = vec![4, 8, 15, 16, 23];
        let a = form_groups(0, &ids, ids.len(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_partition(&a, &ids);
        for id in &ids {
            assert!(a.is_master(*id));
        }
    }

    #[test]
    fn invalid_group_counts() {
        let ids: Vec<MeterId> = (0..3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            form_groups(0, &ids, 4, &mut rng),
            Err(GroupingError::TooManyGroups { groups: 4, meters: 3 })
        );
        assert_eq!(form_groups(0, &ids, 0, &mut rng), Err(GroupingError::NoGroups));
        assert_eq!(
            form_groups(0, &[1, 2, 1], 1, &mut rng),
            Err(GroupingError::DuplicateMeter(1))
        );
    }

    #[test]
    fn same_seed_same_assignment() {
        let ids: Vec<MeterId> = (0..50).collect();
        let a = form_groups(3, &ids, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = form_groups(3, &ids, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    fn single_group(members: Vec<MeterId>) -> GroupAssignment {
        let mut a = form_groups(0, &members, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        a.groups[0].sort_unstable();
        a
    }

    #[test]
    fn accumulation_sums_members() {
        let a = single_group(vec![1, 2, 3]);
        let subs = BTreeMap::from([
            (1, MicroKwh::from_kwh(2.0)),
            (2, MicroKwh::from_kwh(-0.5)),
            (3, MicroKwh::from_kwh(1.5)),
        ]);
        let reports = accumulate_group_noise(&a, 0, |id| subs.get(&id).copied()).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].aggregated_noise, MicroKwh::from_kwh(3.0));

        let zeros = accumulate_group_noise(&a, 0, |_| Some(MicroKwh::ZERO)).unwrap();
        assert_eq!(zeros[0].aggregated_noise, MicroKwh::ZERO);
    }

    #[test]
    fn missing_member_is_reported() {
        let a = single_group(vec![1, 2, 3]);
        let subs = BTreeMap::from([(1, MicroKwh(5)), (3, MicroKwh(7))]);
        assert_eq!(
            accumulate_group_noise(&a, 0, |id| subs.get(&id).copied()),
            Err(GroupingError::MissingSubmission(2))
        );
        let partial = collect_group_noise(&a, 0, |id| subs.get(&id).copied());
        assert!(partial.reports.is_empty());
        assert_eq!(partial.missing, vec![(0, 2)]);
    }

    #[test]
    fn master_selection_is_uniform() {
        // 12 meters in 3 groups of 4: each meter is master with p = 1/4.
        let ids: Vec<MeterId> = (0..12).collect();
        let rounds = 2000;
        let mut counts = [0u32; 12];
        for round in 0..rounds {
            let mut rng = ChaCha8Rng::seed_from_u64(round as u64);
            let a = form_groups(round, &ids, 3, &mut rng).unwrap();
            for m in a.masters() {
                counts[*m as usize] += 1;
            }
        }
        let p = 0.25;
        let expected = rounds as f64 * p;
        let sd = (rounds as f64 * p * (1.0 - p)).sqrt();
        for (id, c) in counts.iter().enumerate() {
            assert!(
                (*c as f64 - expected).abs() < 3.0 * sd,
                "meter {id} master {c} times, expected {expected}±{sd}"
            );
        }
    }

    proptest! {
        #[test]
        fn group_sums_add_up_to_population_sum(
            noise in proptest::collection::vec(-5_000_000_000i64..5_000_000_000, 1..120),
            k_frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let ids: Vec<MeterId> = (0..noise.len() as MeterId).collect();
            let k = 1 + ((noise.len() - 1) as f64 * k_frac) as usize;
            let a = form_groups(0, &ids, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_partition(&a, &ids);
            let reports = accumulate_group_noise(&a, 0, |id| Some(MicroKwh(noise[id as usize]))).unwrap();
            prop_assert_eq!(reports.len(), k);
            let grouped: MicroKwh = reports.iter().map(|r| r.aggregated_noise).sum();
            prop_assert_eq!(grouped, MicroKwh(noise.iter().sum()));
        }
    }
}
