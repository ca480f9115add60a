//! Pearson and Spearman correlation of predicted against gold change
//! scores, and rank-scatter rows for plotting.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::change::ScoreReport;
use crate::corpus::TargetWordRecord;
use crate::error::{Error, Result};

fn check_lengths(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DegenerateMetric(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::DegenerateMetric(format!(
            "need at least 3 pairs, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateMetric("non-finite input".into()));
    }
    Ok(())
}

/// Product-moment correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateMetric("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based fractional ranks; tied values share the mean of their ranks.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x, y)?;
    pearson_r(&average_ranks(x), &average_ranks(y))
        .map_err(|_| Error::DegenerateMetric("all values tied".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub n_scored: usize,
    pub n_unscored: usize,
}

impl EvalReport {
    /// `pearson=<r>` and `spearman=<rho>` lines, six decimals.
    pub fn to_metrics_file(&self) -> String {
        format!(
            "pearson={:.6}\nspearman={:.6}\n",
            self.pearson_r, self.spearman_rho
        )
    }
}

fn gold_pairs<'r>(
    report: &'r ScoreReport,
    targets: &[TargetWordRecord],
) -> Result<Vec<(&'r str, f64, f64)>> {
    let gold: HashMap<&str, f64> = targets
        .iter()
        .map(|t| (t.word.as_str(), t.gold_score))
        .collect();
    report
        .scored()
        .map(|(w, s)| {
            gold.get(w)
                .map(|&g| (w, g, s))
                .ok_or_else(|| Error::Contract(format!("no gold score for scored word '{w}'")))
        })
        .collect()
}

/// Correlations over scored words only; unscored words are counted.
pub fn evaluate(report: &ScoreReport, targets: &[TargetWordRecord]) -> Result<EvalReport> {
    let pairs = gold_pairs(report, targets)?;
    if pairs.len() < 3 {
        return Err(Error::TooFewScored(pairs.len()));
    }
    let gold: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let pred: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    Ok(EvalReport {
        pearson_r: pearson_r(&pred, &gold)?,
        spearman_rho: spearman_rho(&pred, &gold)?,
        n_scored: pairs.len(),
        n_unscored: report.n_unscored(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterRow {
    pub word: String,
    pub gold_rank: f64,
    pub predicted_rank: f64,
}

/// Gold and predicted ranks of every scored word (1 = least changed),
/// ordered by word.
pub fn rank_scatter(report: &ScoreReport, targets: &[TargetWordRecord]) -> Result<Vec<ScatterRow>> {
    let mut pairs = gold_pairs(report, targets)?;
    if pairs.is_empty() {
        return Err(Error::TooFewScored(0));
    }
    pairs.sort_by(|a, b| a.0.cmp(b.0));
    let gold = average_ranks(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let pred = average_ranks(&pairs.iter().map(|p| p.2).collect::<Vec<_>>());
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(i, p)| ScatterRow {
            word: p.0.to_string(),
            gold_rank: gold[i],
            predicted_rank: pred[i],
        })
        .collect())
}

pub fn scatter_csv(rows: &[ScatterRow]) -> String {
    let mut out = String::from("word,gold_rank,predicted_rank\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.word, r.gold_rank, r.predicted_rank);
    }
    out
}
