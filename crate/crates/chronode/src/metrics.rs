//! Classification metrics for the downstream tasks: ROC AUC for the three
//! binarized severity thresholds and quadratic-weighted kappa over grades,
//! plus table rendering for the experiment grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mann-Whitney AUC with the half-credit tie convention:
/// `P(score_pos > score_neg) + 0.5 P(tie)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract("auc: scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "auc scores".into(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auc requires both classes present".into(),
        ));
    }

    // Average ranks with tie handling; the rank-sum form of the U statistic.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average rank.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Quadratic-weighted kappa over integer grades `0..k`.
///
/// `kappa = 1 - sum(w o) / sum(w e)` with `w_ij = (i - j)^2 / (k - 1)^2` and
/// `e` the outer product of the marginals scaled to the sample count. Exact
/// total agreement is 1 even when chance agreement degenerates.
pub fn quadratic_weighted_kappa(pred: &[u8], truth: &[u8], k: usize) -> Result<f64> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::UndefinedMetric("kappa of empty input".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Contract("kappa: pred and truth differ in length".into()));
    }
    if k < 2 {
        return Err(Error::Contract("kappa needs at least two grades".into()));
    }
    if pred.iter().chain(truth).any(|&g| g as usize >= k) {
        return Err(Error::Contract(format!("kappa: grade out of range 0..{k}")));
    }

    let n = pred.len() as f64;
    let mut observed = vec![0.0; k * k];
    let mut marg_truth = vec![0.0; k];
    let mut marg_pred = vec![0.0; k];
    for (&p, &t) in pred.iter().zip(truth) {
        observed[t as usize * k + p as usize] += 1.0;
        marg_truth[t as usize] += 1.0;
        marg_pred[p as usize] += 1.0;
    }
    let denom = ((k - 1) * (k - 1)) as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64) * (i as f64 - j as f64)) / denom;
            num += w * observed[i * k + j];
            den += w * marg_truth[i] * marg_pred[j] / n;
        }
    }
    if den == 0.0 {
        // Both raters constant: perfect agreement iff identical outputs.
        return Ok(if num == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - num / den)
}

/// Metrics of one evaluation: kappa plus AUC at thresholds >=1, >=2, >=3.
/// Thresholds with a single class present are reported as absent rather
/// than failing the run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskMetrics {
    pub n_examples: usize,
    pub kappa: Option<f64>,
    pub auc1: Option<f64>,
    pub auc2: Option<f64>,
    pub auc3: Option<f64>,
}

impl TaskMetrics {
    pub fn auc_at(&self, threshold: usize) -> Option<f64> {
        match threshold {
            1 => self.auc1,
            2 => self.auc2,
            3 => self.auc3,
            _ => None,
        }
    }

    /// Mean over the defined AUCs; falls back to kappa when none is defined.
    pub fn selection_score(&self) -> Option<f64> {
        let defined: Vec<f64> = [self.auc1, self.auc2, self.auc3]
            .into_iter()
            .flatten()
            .collect();
        if defined.is_empty() {
            self.kappa
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

/// Compute all task metrics from per-example tail scores, predicted grades,
/// and true grades.
pub fn task_metrics(
    tail_scores: &[[f64; 3]],
    pred_grades: &[u8],
    true_grades: &[u8],
) -> Result<TaskMetrics> {
    if tail_scores.len() != true_grades.len() || pred_grades.len() != true_grades.len() {
        return Err(Error::Contract("metric inputs differ in length".into()));
    }
    if true_grades.is_empty() {
        return Err(Error::UndefinedMetric("metrics of empty evaluation".into()));
    }
    let auc_k = |k: usize| -> Result<Option<f64>> {
        let scores: Vec<f64> = tail_scores.iter().map(|s| s[k - 1]).collect();
        let labels: Vec<bool> = true_grades.iter().map(|&g| g as usize >= k).collect();
        match auc(&scores, &labels) {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let kappa = match quadratic_weighted_kappa(pred_grades, true_grades, crate::model::GRADE_COUNT)
    {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(TaskMetrics {
        n_examples: true_grades.len(),
        kappa,
        auc1: auc_k(1)?,
        auc2: auc_k(2)?,
        auc3: auc_k(3)?,
    })
}

/// One row of the experiment grid: method x weights x task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub weights: String,
    pub task: String,
    pub kappa: Option<f64>,
    pub auc1: Option<f64>,
    pub auc2: Option<f64>,
    pub auc3: Option<f64>,
}

impl TableRow {
    pub fn from_metrics(method: &str, weights: &str, task: &str, m: &TaskMetrics) -> Self {
        TableRow {
            method: method.to_string(),
            weights: weights.to_string(),
            task: task.to_string(),
            kappa: m.kappa,
            auc1: m.auc1,
            auc2: m.auc2,
            auc3: m.auc3,
        }
    }
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "-".to_string(),
    }
}

/// Aligned plain-text table; metric columns in fixed order kappa, AUC1,
/// AUC2, AUC3, with absent cells rendered as `-`.
pub fn render_table_text(rows: &[TableRow]) -> String {
    let headers = ["method", "weights", "task", "kappa", "AUC1", "AUC2", "AUC3"];
    let mut cells: Vec<[String; 7]> = Vec::with_capacity(rows.len());
    for r in rows {
        cells.push([
            r.method.clone(),
            r.weights.clone(),
            r.task.clone(),
            cell(r.kappa),
            cell(r.auc1),
            cell(r.auc2),
            cell(r.auc3),
        ]);
    }
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (i, c) in row.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let fmt_row = |row: &[String]| -> String {
        row.iter()
            .enumerate()
            .map(|(i, c)| format!("{:w$}", c, w = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = String::new();
    out.push_str(&fmt_row(&headers.iter().map(|s| s.to_string()).collect::<Vec<_>>()));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &cells {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    out
}

/// Machine-readable form of the same table.
pub fn render_table_json(rows: &[TableRow]) -> Result<String> {
    Ok(serde_json::to_string_pretty(rows)?)
}
