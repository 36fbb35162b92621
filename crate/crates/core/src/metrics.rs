//! Average precision and head / medium / tail stratified mAP.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Group, Labels, Stratification};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Mean of precision at each positive rank. Ties in score are ordered by
/// ascending sample index. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes without positives in the evaluation set.
    pub per_class_ap: Vec<Option<f64>>,
    pub total_map: f64,
    pub head_map: Option<f64>,
    pub medium_map: Option<f64>,
    pub tail_map: Option<f64>,
    pub class_counts: Vec<usize>,
    pub excluded: Vec<usize>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn stratified_map(probs: &Tensor, labels: &Labels, strat: &Stratification) -> Result<EvalReport> {
    let (b, c) = (labels.samples(), labels.classes());
    if probs.shape() != [b, c] {
        return Err(Error::dim("stratified_map", probs.shape(), &[b, c]));
    }
    if strat.assignment.len() != c {
        return Err(Error::dim("stratified_map", &[strat.assignment.len()], &[c]));
    }
    let mut per_class_ap = Vec::with_capacity(c);
    let mut scores = vec![0.0; b];
    let mut ys = vec![0u8; b];
    for k in 0..c {
        for r in 0..b {
            scores[r] = probs.get(r, k);
            ys[r] = u8::from(labels.get(r, k));
        }
        per_class_ap.push(average_precision(&scores, &ys));
    }
    let group = |g: Group| {
        mean(
            per_class_ap
                .iter()
                .zip(&strat.assignment)
                .filter(|(_, &a)| a == g)
                .filter_map(|(ap, _)| *ap),
        )
    };
    let total_map = mean(per_class_ap.iter().filter_map(|ap| *ap))
        .ok_or_else(|| Error::Contract("no class has a positive in the evaluation set".into()))?;
    Ok(EvalReport {
        total_map,
        head_map: group(Group::Head),
        medium_map: group(Group::Medium),
        tail_map: group(Group::Tail),
        excluded: (0..c).filter(|&k| per_class_ap[k].is_none()).collect(),
        class_counts: labels.column_counts(),
        per_class_ap,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Aligned `Total / Head / Medium / Tail` table in percent.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut s = String::new();
        let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8}", "Total", "Head", "Medium", "Tail");
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8}",
            cell(Some(self.total_map)),
            cell(self.head_map),
            cell(self.medium_map),
            cell(self.tail_map)
        );
        s
    }
}
