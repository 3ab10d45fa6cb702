use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, chance_band, confusion, mean_std, roc_auc, spearman, Roc};
use super::split::SplitPlan;
use crate::contrastive::{train_contrastive, StopReason};
use crate::error::{Error, Result};
use crate::kernel::Scalar;
use crate::network::{Hyperparams, ModelParams};
use crate::predict::{
    argmax, extract_features, inner_validation_mask, matrix, normalize_test, normalize_training,
    train_classifier, ClassifierConfig, ClassifierReport, Extractor, FeatureConfig, FeatureRow,
};
use crate::recording::Recording;
use crate::{derive_seed, seeded_rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Contrastively trained encoder, trained DE features.
    Clisa,
    /// Four-band DE of the raw channels.
    RawDe,
    /// Untrained (randomly initialized) encoder, trained DE features.
    RandomEncoder,
}

impl Method {
    fn tag(self) -> u64 {
        match self {
            Method::Clisa => 1,
            Method::RawDe => 2,
            Method::RandomEncoder => 3,
        }
    }
}

const STAGE_CONTRASTIVE: u64 = 0xC0;
const STAGE_CLASSIFIER: u64 = 0xC1;
const STAGE_SUBSET: u64 = 0xC2;

/// Everything a protocol run depends on besides data, split and seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub hyperparams: Hyperparams,
    pub features: FeatureConfig,
    pub classifier: ClassifierConfig,
    /// Replace sample predictions with the majority vote of their trial.
    pub trial_vote: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_retrieval_acc: f64,
    pub chance: f64,
    pub stop_reason: StopReason,
    pub subjects: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub trial_id: String,
    pub sample_idx: usize,
    pub label: usize,
    pub predicted: usize,
    pub posterior: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    /// `None` when the fold failed; see `error`.
    pub accuracy: Option<f64>,
    pub contrastive: Option<ContrastiveSummary>,
    pub classifier: Option<ClassifierReport>,
    pub error: Option<String>,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub folds: Vec<FoldResult>,
    pub completed_folds: usize,
    pub mean_accuracy_pct: f64,
    pub std_accuracy_pct: f64,
    /// Pooled over folds, row-normalized percent.
    pub confusion_pct: Vec<Vec<f64>>,
    /// Binary problems only; the score is the class-1 posterior.
    pub roc: Option<Roc>,
    pub chance_pct: f64,
    /// Chance plus three binomial standard deviations at the pooled
    /// test-sample count.
    pub chance_3sigma_pct: f64,
}

impl MethodReport {
    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().filter_map(|f| f.accuracy).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub seed: u64,
    pub n_classes: usize,
    pub plan: SplitPlan,
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }

    pub fn all_folds_completed(&self) -> bool {
        self.methods
            .iter()
            .all(|m| m.completed_folds == m.folds.len())
    }
}

fn select<'a>(
    recordings: &'a [Recording],
    ids: &[String],
    stimuli: Option<&HashSet<String>>,
) -> Result<Vec<Recording>> {
    let by_id: HashMap<&str, &'a Recording> = recordings
        .iter()
        .map(|r| (r.subject_id.as_str(), r))
        .collect();
    ids.iter()
        .map(|id| {
            let r = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Data(format!("subject {id} not in the corpus")))?;
            Ok(match stimuli {
                Some(s) => r.with_stimuli(s),
                None => (*r).clone(),
            })
        })
        .collect()
}

/// One fold of one method. With `contrastive_subjects`, only those train
/// subjects are used in the contrastive phase.
#[allow(clippy::too_many_arguments)]
fn fold_pipeline<T: Scalar>(
    recordings: &[Recording],
    cfg: &EvalConfig,
    plan: &SplitPlan,
    fold: usize,
    method: Method,
    contrastive_subjects: Option<&[String]>,
    seed: u64,
    n_classes: usize,
) -> Result<(
    f64,
    Option<ContrastiveSummary>,
    ClassifierReport,
    Vec<Prediction>,
)> {
    let f = &plan.folds[fold];
    let (train_stim, test_stim) = match &plan.trial_partition {
        Some(p) => (
            Some(p.train_stimuli.iter().cloned().collect::<HashSet<_>>()),
            Some(p.test_stimuli.iter().cloned().collect::<HashSet<_>>()),
        ),
        None => (None, None),
    };
    let train = select(recordings, &f.train_subjects, train_stim.as_ref())?;
    let test = select(recordings, &f.test_subjects, test_stim.as_ref())?;
    let channels = train[0].n_channels();

    let mut contrastive = None;
    let encoder: Option<ModelParams<T>> = match method {
        Method::RawDe => None,
        Method::RandomEncoder => {
            let mut rng = seeded_rng(derive_seed(seed, &[fold as u64, STAGE_CONTRASTIVE]));
            Some(ModelParams::init(
                cfg.hyperparams.architecture(channels),
                &mut rng,
            )?)
        }
        Method::Clisa => {
            let subjects: Vec<String> = contrastive_subjects
                .map(<[String]>::to_vec)
                .unwrap_or_else(|| f.train_subjects.clone());
            let pool = select(recordings, &subjects, train_stim.as_ref())?;
            let mut rng = seeded_rng(derive_seed(seed, &[fold as u64, STAGE_CONTRASTIVE]));
            let (params, report) = train_contrastive::<T, _>(&pool, &cfg.hyperparams, &mut rng)?;
            contrastive = Some(ContrastiveSummary {
                epochs_run: report.epochs.len(),
                best_epoch: report.best_epoch,
                best_val_retrieval_acc: report.best_val_retrieval_acc,
                chance: report.chance,
                stop_reason: report.stop_reason,
                subjects,
            });
            Some(params)
        }
    };
    let extractor = match &encoder {
        Some(p) => Extractor::Encoder(&p.encoder),
        None => Extractor::RawDe,
    };
    let features = |recs: &[Recording]| -> Result<Vec<FeatureRow>> {
        let mut rows = Vec::new();
        for r in recs {
            rows.extend(extract_features(r, extractor, &cfg.features)?);
        }
        Ok(rows)
    };
    let mut train_rows = features(&train)?;
    let mut test_rows = features(&test)?;
    let stats = normalize_training(&mut train_rows)?;
    normalize_test(&mut test_rows, &stats, cfg.features.eta)?;

    let mask = inner_validation_mask(&train_rows, cfg.classifier.inner_val_frac);
    let (x, y) = matrix(&train_rows);
    let mut rng = seeded_rng(derive_seed(
        seed,
        &[fold as u64, STAGE_CLASSIFIER, method.tag()],
    ));
    let (clf, clf_report) = train_classifier(&x, &y, &mask, n_classes, &cfg.classifier, &mut rng)?;

    let (tx, ty) = matrix(&test_rows);
    let (mut predicted, posteriors) = clf.predict(&tx)?;
    if cfg.trial_vote {
        majority_vote(&test_rows, &mut predicted, n_classes);
    }
    let acc = accuracy(&ty, &predicted);
    let predictions = test_rows
        .iter()
        .zip(predicted)
        .zip(posteriors)
        .map(|((r, p), post)| Prediction {
            subject_id: r.subject_id.clone(),
            trial_id: r.trial_id.clone(),
            sample_idx: r.sample_idx,
            label: r.label,
            predicted: p,
            posterior: post,
        })
        .collect();
    Ok((acc, contrastive, clf_report, predictions))
}

fn majority_vote(rows: &[FeatureRow], predicted: &mut [usize], n_classes: usize) {
    let mut votes: HashMap<(&str, &str), Vec<f64>> = HashMap::new();
    for (r, &p) in rows.iter().zip(predicted.iter()) {
        votes
            .entry((r.subject_id.as_str(), r.trial_id.as_str()))
            .or_insert_with(|| vec![0.0; n_classes])[p] += 1.0;
    }
    for (r, p) in rows.iter().zip(predicted.iter_mut()) {
        *p = argmax(&votes[&(r.subject_id.as_str(), r.trial_id.as_str())]);
    }
}

struct Task {
    fold: usize,
    method: Method,
    subset: Option<Vec<String>>,
}

/// Runs `tasks` on up to `jobs` threads; results come back in task order.
fn run_tasks<T: Scalar>(
    recordings: &[Recording],
    cfg: &EvalConfig,
    plan: &SplitPlan,
    tasks: &[Task],
    seed: u64,
    n_classes: usize,
    jobs: usize,
) -> Vec<FoldResult> {
    let run = |t: &Task| -> FoldResult {
        let f = &plan.folds[t.fold];
        let out = fold_pipeline::<T>(
            recordings,
            cfg,
            plan,
            t.fold,
            t.method,
            t.subset.as_deref(),
            seed,
            n_classes,
        );
        let (accuracy, contrastive, classifier, predictions, error) = match out {
            Ok((a, c, r, p)) => (Some(a), c, Some(r), p, None),
            Err(e) => (None, None, None, Vec::new(), Some(e.to_string())),
        };
        FoldResult {
            fold: t.fold,
            train_subjects: f.train_subjects.clone(),
            test_subjects: f.test_subjects.clone(),
            accuracy,
            contrastive,
            classifier,
            error,
            predictions,
        }
    };
    let jobs = jobs.clamp(1, tasks.len().max(1));
    if jobs == 1 {
        return tasks.iter().map(run).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<FoldResult>>> = Mutex::new(vec![None; tasks.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(t) = tasks.get(i) else { break };
                let r = run(t);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect()
}

fn summarize(method: Method, folds: Vec<FoldResult>, n_classes: usize) -> MethodReport {
    let accs: Vec<f64> = folds.iter().filter_map(|f| f.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let preds: Vec<&Prediction> = folds.iter().flat_map(|f| &f.predictions).collect();
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let predicted: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
    let confusion_pct = confusion(&labels, &predicted, n_classes).unwrap_or_default();
    let roc = if n_classes == 2 {
        let scores: Vec<f64> = preds.iter().map(|p| p.posterior[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        roc_auc(&scores, &pos).ok()
    } else {
        None
    };
    let (chance, sigma) = chance_band(n_classes, preds.len());
    MethodReport {
        method,
        completed_folds: accs.len(),
        folds,
        mean_accuracy_pct: 100.0 * mean,
        std_accuracy_pct: 100.0 * std,
        confusion_pct,
        roc,
        chance_pct: 100.0 * chance,
        chance_3sigma_pct: 100.0 * (chance + 3.0 * sigma),
    }
}

fn corpus_classes(recordings: &[Recording]) -> Result<usize> {
    let k = recordings
        .iter()
        .flat_map(|r| r.trials.iter().map(|t| t.label + 1))
        .max()
        .ok_or_else(|| Error::Data("corpus has no trials".into()))?;
    Ok(k.max(2))
}

/// Cross-subject evaluation of each method on every fold of `plan`.
///
/// Failed folds are recorded with their error and left out of the mean.
pub fn run_protocol<T: Scalar>(
    recordings: &[Recording],
    cfg: &EvalConfig,
    plan: &SplitPlan,
    methods: &[Method],
    seed: u64,
    jobs: usize,
) -> Result<EvalReport> {
    plan.validate()?;
    cfg.hyperparams.validate()?;
    cfg.classifier.validate()?;
    let n_classes = corpus_classes(recordings)?;
    let mut tasks = Vec::new();
    for &method in methods {
        for fold in 0..plan.folds.len() {
            tasks.push(Task {
                fold,
                method,
                subset: None,
            });
        }
    }
    let mut results =
        run_tasks::<T>(recordings, cfg, plan, &tasks, seed, n_classes, jobs).into_iter();
    let reports = methods
        .iter()
        .map(|&m| {
            summarize(
                m,
                results.by_ref().take(plan.folds.len()).collect(),
                n_classes,
            )
        })
        .collect();
    Ok(EvalReport {
        protocol: plan.protocol.name(),
        seed,
        n_classes,
        plan: plan.clone(),
        methods: reports,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    /// Contrastive-phase subjects; `0` is the random-encoder baseline.
    pub count: usize,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy_pct: f64,
    pub std_accuracy_pct: f64,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub points: Vec<AblationPoint>,
}

impl AblationReport {
    /// Spearman correlation between count and fold accuracy, pooled over
    /// folds, for the given counts.
    pub fn trend(&self, counts: &[usize]) -> f64 {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for p in self.points.iter().filter(|p| counts.contains(&p.count)) {
            for &a in &p.fold_accuracies {
                x.push(p.count as f64);
                y.push(a);
            }
        }
        spearman(&x, &y)
    }
}

/// Accuracy against the number of subjects used in the contrastive phase.
/// Each fold draws a seeded random subset of its training subjects per
/// count; the classifier always sees all training subjects.
pub fn subject_ablation<T: Scalar>(
    recordings: &[Recording],
    cfg: &EvalConfig,
    plan: &SplitPlan,
    counts: &[usize],
    seed: u64,
    jobs: usize,
) -> Result<AblationReport> {
    plan.validate()?;
    let n_classes = corpus_classes(recordings)?;
    let min_train = plan
        .folds
        .iter()
        .map(|f| f.train_subjects.len())
        .min()
        .unwrap_or(0);
    if let Some(&c) = counts.iter().find(|&&c| c > min_train || c == 1) {
        return Err(Error::Parameter(format!(
            "contrastive subject count {c} not in {{0}} or 2..={min_train}"
        )));
    }
    let mut tasks = Vec::new();
    for &count in counts {
        for (fold, f) in plan.folds.iter().enumerate() {
            let (method, subset) = if count == 0 {
                (Method::RandomEncoder, None)
            } else {
                let mut rng = seeded_rng(derive_seed(
                    seed,
                    &[fold as u64, STAGE_SUBSET, count as u64],
                ));
                let mut idx = sample(&mut rng, f.train_subjects.len(), count).into_vec();
                idx.sort_unstable();
                let subset = idx
                    .into_iter()
                    .map(|i| f.train_subjects[i].clone())
                    .collect();
                (Method::Clisa, Some(subset))
            };
            tasks.push(Task {
                fold,
                method,
                subset,
            });
        }
    }
    let results = run_tasks::<T>(recordings, cfg, plan, &tasks, seed, n_classes, jobs);
    let mut grouped: BTreeMap<usize, Vec<FoldResult>> = BTreeMap::new();
    for (chunk, &count) in results.chunks(plan.folds.len()).zip(counts) {
        grouped.insert(count, chunk.to_vec());
    }
    let points = counts
        .iter()
        .map(|c| {
            let folds = &grouped[c];
            let accs: Vec<f64> = folds.iter().filter_map(|f| f.accuracy).collect();
            let (m, s) = mean_std(&accs);
            AblationPoint {
                count: *c,
                fold_accuracies: accs,
                mean_accuracy_pct: 100.0 * m,
                std_accuracy_pct: 100.0 * s,
                errors: folds.iter().filter_map(|f| f.error.clone()).collect(),
            }
        })
        .collect();
    Ok(AblationReport { seed, points })
}
