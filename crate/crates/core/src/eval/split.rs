use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cross-subject protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    Kfold {
        k: usize,
    },
    Loso,
    /// Unseen subjects and unseen stimuli: subjects split as `kfold(k)` (or
    /// leave-one-out without `k`), stimuli split by `train_trial_frac`.
    Generalize {
        k: Option<usize>,
        train_trial_frac: f64,
    },
}

impl Protocol {
    pub fn name(&self) -> String {
        match self {
            Protocol::Kfold { k } => format!("kfold({k})"),
            Protocol::Loso => "loso".into(),
            Protocol::Generalize {
                k,
                train_trial_frac,
            } => match k {
                Some(k) => format!("generalize(kfold({k}), {train_trial_frac:.4})"),
                None => format!("generalize(loso, {train_trial_frac:.4})"),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

/// Stimuli used for training versus testing under the generalize protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPartition {
    pub train_stimuli: Vec<String>,
    pub test_stimuli: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub protocol: Protocol,
    pub folds: Vec<Fold>,
    pub trial_partition: Option<TrialPartition>,
}

impl SplitPlan {
    /// Subjects never appear on both sides of a fold, neither side is
    /// empty, and the stimulus partition (if any) is disjoint.
    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.folds.iter().enumerate() {
            if f.train_subjects.is_empty() || f.test_subjects.is_empty() {
                return Err(Error::Config(format!("fold {i} has an empty side")));
            }
            let train: HashSet<&String> = f.train_subjects.iter().collect();
            if let Some(s) = f.test_subjects.iter().find(|s| train.contains(s)) {
                return Err(Error::Config(format!(
                    "fold {i}: subject {s} in both training and test sets"
                )));
            }
        }
        if let Some(p) = &self.trial_partition {
            let train: HashSet<&String> = p.train_stimuli.iter().collect();
            if p.train_stimuli.is_empty() || p.test_stimuli.is_empty() {
                return Err(Error::Config("stimulus partition has an empty side".into()));
            }
            if let Some(s) = p.test_stimuli.iter().find(|s| train.contains(s)) {
                return Err(Error::Config(format!(
                    "stimulus {s} on both sides of the partition"
                )));
            }
        }
        Ok(())
    }
}

fn subject_folds<R: Rng + ?Sized>(subjects: &[String], k: usize, rng: &mut R) -> Result<Vec<Fold>> {
    let n = subjects.len();
    if k < 2 || k > n {
        return Err(Error::Parameter(format!(
            "{k} folds impossible with {n} subjects (need 2 <= k <= n)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut groups = vec![Vec::new(); k];
    for (pos, &i) in order.iter().enumerate() {
        groups[pos % k].push(i);
    }
    Ok(groups
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            Fold {
                train_subjects: (0..n)
                    .filter(|i| !test.contains(i))
                    .map(|i| subjects[i].clone())
                    .collect(),
                test_subjects: test.into_iter().map(|i| subjects[i].clone()).collect(),
            }
        })
        .collect())
}

/// Stimuli split stratified by label. `round(frac * n)` stimuli go to
/// training, allotted to classes by largest remainder of `frac * n_c`.
fn partition_stimuli<R: Rng + ?Sized>(
    stimuli: &[(String, usize)],
    frac: f64,
    rng: &mut R,
) -> Result<TrialPartition> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Parameter(format!(
            "training trial share {frac} outside (0, 1)"
        )));
    }
    let mut by_label: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (s, l) in stimuli {
        by_label.entry(*l).or_default().push(s);
    }
    let groups: Vec<Vec<&String>> = by_label.into_values().collect();
    let target = (stimuli.len() as f64 * frac).round() as usize;
    let quota: Vec<f64> = groups.iter().map(|g| g.len() as f64 * frac).collect();
    let mut take: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| (quota[b] - quota[b].floor()).total_cmp(&(quota[a] - quota[a].floor())));
    let assigned: usize = take.iter().sum();
    for &i in order.iter().take(target.saturating_sub(assigned)) {
        take[i] += 1;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (mut ids, k) in groups.into_iter().zip(take) {
        ids.shuffle(rng);
        let k = k.min(ids.len());
        train.extend(ids[..k].iter().map(|s| (*s).clone()));
        test.extend(ids[k..].iter().map(|s| (*s).clone()));
    }
    let order = |v: &mut Vec<String>| {
        v.sort_by_key(|s| stimuli.iter().position(|(t, _)| t == s));
    };
    order(&mut train);
    order(&mut test);
    let p = TrialPartition {
        train_stimuli: train,
        test_stimuli: test,
    };
    if p.train_stimuli.is_empty() || p.test_stimuli.is_empty() {
        return Err(Error::Parameter(format!(
            "{} stimuli cannot be split with share {frac}",
            stimuli.len()
        )));
    }
    Ok(p)
}

/// Seeded fold assignment. `stimuli` (id, label) is needed only by the
/// generalize protocol.
pub fn make_splits<R: Rng + ?Sized>(
    subject_ids: &[String],
    stimuli: &[(String, usize)],
    protocol: &Protocol,
    rng: &mut R,
) -> Result<SplitPlan> {
    let unique: HashSet<&String> = subject_ids.iter().collect();
    if unique.len() != subject_ids.len() {
        return Err(Error::Data("duplicate subject ids".into()));
    }
    let n = subject_ids.len();
    let (folds, trial_partition) = match protocol {
        Protocol::Kfold { k } => (subject_folds(subject_ids, *k, rng)?, None),
        Protocol::Loso => (subject_folds(subject_ids, n, rng)?, None),
        Protocol::Generalize {
            k,
            train_trial_frac,
        } => {
            let folds = subject_folds(subject_ids, k.unwrap_or(n), rng)?;
            (
                folds,
                Some(partition_stimuli(stimuli, *train_trial_frac, rng)?),
            )
        }
    };
    let plan = SplitPlan {
        protocol: protocol.clone(),
        folds,
        trial_partition,
    };
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    fn stims(n: usize) -> Vec<(String, usize)> {
        (0..n).map(|i| (format!("m{i:02}"), i % 3)).collect()
    }

    #[test]
    fn eighty_subjects_ten_folds_of_eight() {
        let p = make_splits(
            &ids(80),
            &[],
            &Protocol::Kfold { k: 10 },
            &mut seeded_rng(0),
        )
        .unwrap();
        assert_eq!(p.folds.len(), 10);
        assert!(p
            .folds
            .iter()
            .all(|f| f.test_subjects.len() == 8 && f.train_subjects.len() == 72));
        let mut all: Vec<&String> = p.folds.iter().flat_map(|f| &f.test_subjects).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 80);
    }

    #[test]
    fn folds_balanced_within_one() {
        let p = make_splits(&ids(23), &[], &Protocol::Kfold { k: 5 }, &mut seeded_rng(1)).unwrap();
        let sizes: Vec<usize> = p.folds.iter().map(|f| f.test_subjects.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn loso_fifteen() {
        let p = make_splits(&ids(15), &[], &Protocol::Loso, &mut seeded_rng(0)).unwrap();
        assert_eq!(p.folds.len(), 15);
        assert!(p.folds.iter().all(|f| f.test_subjects.len() == 1));
    }

    #[test]
    fn generalize_sixteen_eight() {
        let proto = Protocol::Generalize {
            k: Some(4),
            train_trial_frac: 2.0 / 3.0,
        };
        let p = make_splits(&ids(8), &stims(24), &proto, &mut seeded_rng(3)).unwrap();
        let t = p.trial_partition.unwrap();
        assert_eq!((t.train_stimuli.len(), t.test_stimuli.len()), (16, 8));
        assert!(t.test_stimuli.iter().all(|s| !t.train_stimuli.contains(s)));
    }

    #[test]
    fn invalid_requests() {
        let mut rng = seeded_rng(0);
        assert!(matches!(
            make_splits(&ids(4), &[], &Protocol::Kfold { k: 5 }, &mut rng),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            make_splits(&ids(1), &[], &Protocol::Loso, &mut rng),
            Err(Error::Parameter(_))
        ));
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(matches!(
            make_splits(&dup, &[], &Protocol::Loso, &mut rng),
            Err(Error::Data(_))
        ));
        let bad = SplitPlan {
            protocol: Protocol::Loso,
            folds: vec![Fold {
                train_subjects: vec!["a".into()],
                test_subjects: vec!["a".into()],
            }],
            trial_partition: None,
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seeded_and_serializable() {
        let a = make_splits(&ids(10), &[], &Protocol::Kfold { k: 3 }, &mut seeded_rng(7)).unwrap();
        let b = make_splits(&ids(10), &[], &Protocol::Kfold { k: 3 }, &mut seeded_rng(7)).unwrap();
        assert_eq!(a, b);
        let j = serde_json::to_string(&a.protocol).unwrap();
        assert_eq!(j, r#"{"kind":"kfold","k":3}"#);
    }
}
