//! Closed-set classification metrics: confusion matrix, per-class recall,
//! unweighted average recall (UAR), and weighted average recall (WAR, which
//! equals plain accuracy when every sample is counted exactly once).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel prediction for responses no parser tier could resolve.
pub const UNPARSEABLE: &str = "UNPARSEABLE";

/// One scored sample: what the model said, what it meant, what was true.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub response: String,
    /// A class name or [`UNPARSEABLE`].
    pub parsed: String,
    pub gold: String,
    /// The descriptive text injected into this sample's prompt, when the
    /// run had description injection enabled and the sample carried one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Present when media decoding or generation failed for this sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub uar: f64,
    pub war: f64,
    pub per_class_recall: BTreeMap<String, f64>,
    /// Rows = gold classes, columns = classes plus a trailing UNPARSEABLE
    /// column, both in `classes` order.
    pub confusion: Vec<Vec<u64>>,
    pub classes: Vec<String>,
    pub unparseable_count: u64,
    pub total: u64,
}

/// Aggregates records against an ordered class list. Every gold label must
/// be in the class list; parsed labels may additionally be [`UNPARSEABLE`],
/// which always scores as wrong.
pub fn compute_metrics(records: &[PredictionRecord], classes: &[String]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::input("cannot compute metrics over zero records"));
    }
    if classes.is_empty() {
        return Err(Error::input("class list is empty"));
    }
    let index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    if index.len() != classes.len() {
        return Err(Error::input("class list contains duplicates"));
    }

    let k = classes.len();
    let mut confusion = vec![vec![0u64; k + 1]; k];
    for r in records {
        let gi = *index
            .get(r.gold.as_str())
            .ok_or_else(|| Error::input(format!("gold label {:?} not in class list", r.gold)))?;
        let pi = if r.parsed == UNPARSEABLE {
            k
        } else {
            *index.get(r.parsed.as_str()).ok_or_else(|| {
                Error::input(format!("parsed label {:?} not in class list", r.parsed))
            })?
        };
        confusion[gi][pi] += 1;
    }

    let mut per_class_recall = BTreeMap::new();
    let mut recall_sum = 0.0;
    let mut present = 0u64;
    let mut correct_total = 0u64;
    for (i, class) in classes.iter().enumerate() {
        let gold_count: u64 = confusion[i].iter().sum();
        if gold_count == 0 {
            continue;
        }
        let recall = confusion[i][i] as f64 / gold_count as f64;
        per_class_recall.insert(class.clone(), recall);
        recall_sum += recall;
        present += 1;
        correct_total += confusion[i][i];
    }
    let total = records.len() as u64;
    let acc = correct_total as f64 / total as f64;
    let uar = recall_sum / present as f64;
    let unparseable_count = confusion.iter().map(|row| row[k]).sum();

    Ok(MetricsReport {
        acc,
        uar,
        // WAR weights each class recall by its gold count, which reduces to
        // overall accuracy when every sample appears exactly once.
        war: acc,
        per_class_recall,
        confusion,
        classes: classes.to_vec(),
        unparseable_count,
        total,
    })
}
