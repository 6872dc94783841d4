//! Generalization splits.
//!
//! * Disjoint groups: whole commands go to one split, so dev/test commands
//!   are never seen in training.
//! * Unseen function: every dev/test example calls at least one function no
//!   training example calls, and examples from the same post stay together.
//!
//! Shuffling uses SplitMix64 and a descending Fisher–Yates pass
//! (`j = next_u64() % (i + 1)` for `i = n-1 ..= 1`), so any implementation of
//! those two published algorithms reproduces the same split for a seed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Split};
use crate::oracle::extract_call_names;

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("targets {targets:?} must be positive and sum to {available} {unit}")]
    Infeasible {
        targets: [usize; 3],
        available: usize,
        unit: &'static str,
    },
    #[error("could not satisfy unseen-function constraint: achieved train/dev/test = {achieved:?}, targets {targets:?}")]
    Unsatisfiable {
        achieved: [usize; 3],
        targets: [usize; 3],
    },
    #[error("duplicate example_id `{0}`")]
    DuplicateExample(String),
}

pub type Result<T, E = SplitError> = std::result::Result<T, E>;

/// SplitMix64 (Steele, Lea & Flood, 2014).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    DisjointGroup,
    UnseenFunction,
}

impl std::str::FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "disjoint" | "disjoint_group" => Ok(SplitMode::DisjointGroup),
            "unseen" | "unseen_function" => Ok(SplitMode::UnseenFunction),
            other => Err(format!("unknown split mode `{other}`")),
        }
    }
}

/// What counts as "the same function" for the unseen constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NameGranularity {
    /// `df.to_csv`
    #[default]
    CallPath,
    /// `to_csv`
    BaseName,
}

impl NameGranularity {
    pub fn names(self, code: &str) -> BTreeSet<String> {
        extract_call_names(code)
            .into_iter()
            .map(|n| match self {
                NameGranularity::CallPath => n,
                NameGranularity::BaseName => n.rsplit('.').next().unwrap_or(&n).to_string(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
    /// train/dev/test: group counts for disjoint splits, example counts for
    /// unseen-function splits.
    pub targets: [usize; 3],
    #[serde(default)]
    pub granularity: NameGranularity,
}

/// example_id → split.
pub type Assignment = BTreeMap<String, Split>;

fn check_unique(examples: &[Example]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for ex in examples {
        if !seen.insert(ex.example_id.as_str()) {
            return Err(SplitError::DuplicateExample(ex.example_id.clone()));
        }
    }
    Ok(())
}

fn check_targets(targets: [usize; 3], available: usize, unit: &'static str) -> Result<()> {
    if targets.iter().any(|&t| t == 0) || targets.iter().sum::<usize>() != available {
        return Err(SplitError::Infeasible {
            targets,
            available,
            unit,
        });
    }
    Ok(())
}

/// Shuffles distinct group keys and deals them out whole: the first
/// `targets[0]` to train, the next `targets[1]` to dev, the rest to test.
pub fn split_disjoint_groups(examples: &[Example], spec: &SplitSpec) -> Result<Assignment> {
    check_unique(examples)?;
    let mut groups: Vec<&str> = examples
        .iter()
        .map(|e| e.group_key.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    check_targets(spec.targets, groups.len(), "groups")?;
    SplitMix64::new(spec.seed).shuffle(&mut groups);
    let [train, dev, _] = spec.targets;
    let of_group: HashMap<&str, Split> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let split = if i < train {
                Split::Train
            } else if i < train + dev {
                Split::Dev
            } else {
                Split::Test
            };
            (*g, split)
        })
        .collect();
    Ok(examples
        .iter()
        .map(|e| (e.example_id.clone(), of_group[e.group_key.as_str()]))
        .collect())
}

/// Greedy group-wise unseen-function split.
///
/// Every group starts in train. Groups are visited in shuffled order and moved
/// to dev or test (whichever has the larger relative shortfall and still has
/// room) when each of their examples then has a function used by no training
/// group. A group that fails alone is retried together with the other train
/// groups sharing its rarest function (at most [`MAX_BUNDLE`] groups). Moving
/// groups out of train only shrinks the training vocabulary, so earlier
/// placements stay valid; passes repeat until nothing moves.
pub fn split_unseen_function(examples: &[Example], spec: &SplitSpec) -> Result<Assignment> {
    check_unique(examples)?;
    check_targets(spec.targets, examples.len(), "examples")?;

    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        by_group.entry(ex.group_key.as_str()).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_group.into_values().collect();

    let mut name_ids: HashMap<String, usize> = HashMap::new();
    let example_names: Vec<Vec<usize>> = examples
        .iter()
        .map(|ex| {
            spec.granularity
                .names(&ex.code)
                .into_iter()
                .map(|n| {
                    let next = name_ids.len();
                    *name_ids.entry(n).or_insert(next)
                })
                .collect()
        })
        .collect();
    let group_names: Vec<Vec<usize>> = groups
        .iter()
        .map(|members| {
            members
                .iter()
                .flat_map(|&e| example_names[e].iter().copied())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        })
        .collect();
    // number of train groups using each name
    let mut train_users = vec![0usize; name_ids.len()];
    for names in &group_names {
        for &n in names {
            train_users[n] += 1;
        }
    }

    let mut name_users: Vec<Vec<usize>> = vec![Vec::new(); name_ids.len()];
    for (g, names) in group_names.iter().enumerate() {
        for &n in names {
            name_users[n].push(g);
        }
    }

    let mut order: Vec<usize> = (0..groups.len()).collect();
    SplitMix64::new(spec.seed).shuffle(&mut order);

    let [_, t_dev, t_test] = spec.targets;
    let mut state = Placement {
        placed: vec![None; groups.len()],
        train_users,
        sizes: [0, 0],
        targets: [t_dev, t_test],
    };
    loop {
        let mut progress = false;
        for &g in &order {
            if state.full() {
                break;
            }
            if state.placed[g].is_some() {
                continue;
            }
            if state.try_place(&[g], &groups, &group_names, &example_names) {
                progress = true;
                continue;
            }
            // Move g together with the other train groups sharing its rarest
            // function.
            let rarest = group_names[g]
                .iter()
                .copied()
                .filter(|&n| state.train_users[n] > 1 && state.train_users[n] <= MAX_BUNDLE)
                .min_by_key(|&n| (state.train_users[n], n));
            if let Some(n) = rarest {
                let bundle: Vec<usize> = name_users[n]
                    .iter()
                    .copied()
                    .filter(|&h| state.placed[h].is_none())
                    .collect();
                if state.try_place(&bundle, &groups, &group_names, &example_names) {
                    progress = true;
                }
            }
        }
        if !progress || state.full() {
            break;
        }
    }

    let [dev, test] = state.sizes;
    let placed = state.placed;
    if dev < t_dev || test < t_test {
        return Err(SplitError::Unsatisfiable {
            achieved: [examples.len() - dev - test, dev, test],
            targets: spec.targets,
        });
    }
    let mut assignment = Assignment::new();
    for (g, members) in groups.iter().enumerate() {
        for &e in members {
            assignment.insert(examples[e].example_id.clone(), placed[g].unwrap_or(Split::Train));
        }
    }
    Ok(assignment)
}

/// Largest number of groups moved out of train in one step.
const MAX_BUNDLE: usize = 4;

struct Placement {
    placed: Vec<Option<Split>>,
    /// Number of groups still in train that use each name.
    train_users: Vec<usize>,
    /// Examples placed in dev and test.
    sizes: [usize; 2],
    targets: [usize; 2],
}

impl Placement {
    fn full(&self) -> bool {
        self.sizes == self.targets
    }

    /// Picks dev or test for `size` more examples: the split with the larger
    /// relative shortfall that still has room, dev on ties.
    fn choose(&self, size: usize) -> Option<usize> {
        let fits = |s: usize| self.sizes[s] + size <= self.targets[s];
        match (fits(0), fits(1)) {
            (false, false) => None,
            (true, false) => Some(0),
            (false, true) => Some(1),
            (true, true) => {
                let [d, t] = self.sizes;
                let [td, tt] = self.targets;
                Some(if (tt - t) * td > (td - d) * tt { 1 } else { 0 })
            }
        }
    }

    /// Moves every group in `bundle` out of train if afterwards each of their
    /// examples has a name with no remaining train user. Groups of one bundle
    /// may land in different held-out splits.
    fn try_place(
        &mut self,
        bundle: &[usize],
        groups: &[Vec<usize>],
        group_names: &[Vec<usize>],
        example_names: &[Vec<usize>],
    ) -> bool {
        let saved = self.sizes;
        let mut slots = Vec::with_capacity(bundle.len());
        for &g in bundle {
            let size = groups[g].len();
            match self.choose(size) {
                Some(slot) => {
                    self.sizes[slot] += size;
                    slots.push(slot);
                }
                None => {
                    self.sizes = saved;
                    return false;
                }
            }
        }
        for &g in bundle {
            for &n in &group_names[g] {
                self.train_users[n] -= 1;
            }
        }
        let ok = bundle.iter().all(|&g| {
            groups[g]
                .iter()
                .all(|&e| example_names[e].iter().any(|&n| self.train_users[n] == 0))
        });
        if ok {
            for (&g, &slot) in bundle.iter().zip(&slots) {
                self.placed[g] = Some(if slot == 0 { Split::Dev } else { Split::Test });
            }
        } else {
            self.sizes = saved;
            for &g in bundle {
                for &n in &group_names[g] {
                    self.train_users[n] += 1;
                }
            }
        }
        ok
    }
}

pub fn split(examples: &[Example], spec: &SplitSpec) -> Result<Assignment> {
    match spec.mode {
        SplitMode::DisjointGroup => split_disjoint_groups(examples, spec),
        SplitMode::UnseenFunction => split_unseen_function(examples, spec),
    }
}

/// Writes the assignment into each example's `split` field.
pub fn apply_assignment(examples: &mut [Example], assignment: &Assignment) {
    for ex in examples {
        ex.split = assignment.get(&ex.example_id).copied().unwrap_or_default();
    }
}

/// Per-split counts of examples and of distinct groups.
pub fn split_sizes(examples: &[Example], assignment: &Assignment) -> BTreeMap<Split, (usize, usize)> {
    let mut groups: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
    let mut counts: BTreeMap<Split, usize> = BTreeMap::new();
    for ex in examples {
        let s = assignment.get(&ex.example_id).copied().unwrap_or_default();
        *counts.entry(s).or_default() += 1;
        groups.entry(s).or_default().insert(&ex.group_key);
    }
    counts
        .into_iter()
        .map(|(s, n)| (s, (n, groups[&s].len())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Unassigned { example_id: String },
    GroupStraddles { group_key: String, splits: Vec<Split> },
    NoUnseenFunction { example_id: String, split: Split },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Unassigned { example_id } => write!(f, "example `{example_id}` is not assigned"),
            Violation::GroupStraddles { group_key, splits } => {
                let names: Vec<_> = splits.iter().map(|s| s.as_str()).collect();
                write!(f, "group `{group_key}` appears in {}", names.join(", "))
            }
            Violation::NoUnseenFunction { example_id, split } => {
                write!(f, "{split} example `{example_id}` uses only functions seen in train")
            }
        }
    }
}

/// Every constraint violation of `assignment`; empty iff the split is valid.
pub fn verify_split(
    examples: &[Example],
    assignment: &Assignment,
    mode: SplitMode,
    granularity: NameGranularity,
) -> Vec<Violation> {
    let mut violations = Vec::new();
    let split_of = |ex: &Example| assignment.get(&ex.example_id).copied().unwrap_or_default();

    let mut group_splits: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for ex in examples {
        let s = split_of(ex);
        if s == Split::Unassigned {
            violations.push(Violation::Unassigned {
                example_id: ex.example_id.clone(),
            });
            continue;
        }
        group_splits.entry(&ex.group_key).or_default().insert(s);
    }
    for (group, splits) in group_splits {
        if splits.len() > 1 {
            violations.push(Violation::GroupStraddles {
                group_key: group.to_string(),
                splits: splits.into_iter().collect(),
            });
        }
    }

    if mode == SplitMode::UnseenFunction {
        let train_vocab: BTreeSet<String> = examples
            .iter()
            .filter(|ex| split_of(ex) == Split::Train)
            .flat_map(|ex| granularity.names(&ex.code))
            .collect();
        for ex in examples {
            let s = split_of(ex);
            if matches!(s, Split::Dev | Split::Test)
                && granularity.names(&ex.code).iter().all(|n| train_vocab.contains(n))
            {
                violations.push(Violation::NoUnseenFunction {
                    example_id: ex.example_id.clone(),
                    split: s,
                });
            }
        }
    }
    violations
}
