//! Object-wise and point-wise ROC-AUC.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::AnomalyResult;
use crate::pointcloud::PointCloud;

/// Rank-based AUROC (Mann–Whitney U over `#pos * #neg`), ties at midrank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUROC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0_f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUROC by trapezoidal integration of the ROC curve, thresholds at every distinct score.
pub fn auroc_trapezoid(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUROC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr, mut area) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub name: String,
    pub category: String,
    pub object_score: f64,
    pub anomalous: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` when only one class is present.
    pub o_roc: Option<f64>,
    pub p_roc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub o_roc: Option<f64>,
    pub p_roc: Option<f64>,
    pub categories: BTreeMap<String, Metrics>,
    /// Mean of the per-category metrics that are defined.
    pub category_mean: Metrics,
    pub samples: Vec<SampleRecord>,
    pub config_hash: String,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// O-ROC over object scores and P-ROC over all points pooled across clouds.
pub fn evaluate(results: &[AnomalyResult], test: &[(PointCloud, bool)]) -> Result<Metrics> {
    if results.len() != test.len() {
        return Err(Error::Config(format!(
            "{} results for {} test clouds",
            results.len(),
            test.len()
        )));
    }
    let mut point_scores = Vec::new();
    let mut point_labels = Vec::new();
    for (i, (r, (cloud, _))) in results.iter().zip(test).enumerate() {
        if r.point_scores.len() != cloud.len() {
            return Err(Error::Config(format!(
                "cloud {i}: {} point scores for {} points",
                r.point_scores.len(),
                cloud.len()
            )));
        }
        point_scores.extend_from_slice(&r.point_scores);
        match cloud.labels() {
            Some(l) => point_labels.extend_from_slice(l),
            None => point_labels.extend(std::iter::repeat_n(false, cloud.len())),
        }
    }
    let objects: Vec<f64> = results.iter().map(|r| r.object_score).collect();
    let object_labels: Vec<bool> = test.iter().map(|(_, a)| *a).collect();
    Ok(Metrics {
        o_roc: defined(auroc(&objects, &object_labels))?,
        p_roc: defined(auroc(&point_scores, &point_labels))?,
    })
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One category's results, test clouds with object labels, and sample names.
pub type CategoryScores = (String, Vec<AnomalyResult>, Vec<(PointCloud, bool)>, Vec<String>);

impl EvalReport {
    /// Pooled metrics over every category plus the per-category breakdown.
    pub fn build(
        categories: &[CategoryScores],
        config_hash: String,
    ) -> Result<Self> {
        let mut all_results = Vec::new();
        let mut all_test = Vec::new();
        let mut per = BTreeMap::new();
        let mut samples = Vec::new();
        for (cat, results, test, names) in categories {
            per.insert(cat.clone(), evaluate(results, test)?);
            for ((r, (_, a)), name) in results.iter().zip(test).zip(names) {
                samples.push(SampleRecord {
                    name: name.clone(),
                    category: cat.clone(),
                    object_score: r.object_score,
                    anomalous: *a,
                });
            }
            all_results.extend(results.iter().cloned());
            all_test.extend(test.iter().cloned());
        }
        let pooled = evaluate(&all_results, &all_test)?;
        let category_mean = Metrics {
            o_roc: mean_defined(per.values().map(|m: &Metrics| m.o_roc)),
            p_roc: mean_defined(per.values().map(|m: &Metrics| m.p_roc)),
        };
        Ok(Self {
            o_roc: pooled.o_roc,
            p_roc: pooled.p_roc,
            categories: per,
            category_mean,
            samples,
            config_hash,
        })
    }
}
