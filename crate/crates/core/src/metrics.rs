//! Concentration, mobility, satisfaction and quality metrics over a simulated
//! round history.

use serde::Serialize;

use crate::abm::RoundRecord;
use crate::error::{Error, Result};
use crate::model::check_finite;

/// One summary row. Field order is the CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub gini: f64,
    pub top3_share: f64,
    pub viewer_mobility: f64,
    pub tail_share: f64,
    pub avg_satisfaction: f64,
    pub quality_improvement: f64,
}

impl MetricsSummary {
    pub const COLUMNS: [&'static str; 6] = [
        "gini",
        "top3_share",
        "viewer_mobility",
        "tail_share",
        "avg_satisfaction",
        "quality_improvement",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.gini,
            self.top3_share,
            self.viewer_mobility,
            self.tail_share,
            self.avg_satisfaction,
            self.quality_improvement,
        ]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Self {
            gini: v[0],
            top3_share: v[1],
            viewer_mobility: v[2],
            tail_share: v[3],
            avg_satisfaction: v[4],
            quality_improvement: v[5],
        }
    }

    /// Field-wise mean and population standard deviation.
    pub fn mean_and_sd(rows: &[MetricsSummary]) -> Result<(MetricsSummary, MetricsSummary)> {
        if rows.is_empty() {
            return Err(Error::invalid("rows", "need at least one summary"));
        }
        let k = rows.len() as f64;
        let mut mean = [0.0; 6];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.values()) {
                *m += v / k;
            }
        }
        let mut var = [0.0; 6];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.values()).zip(mean) {
                *s += (v - m).powi(2) / k;
            }
        }
        Ok((Self::from_values(mean), Self::from_values(var.map(f64::sqrt))))
    }
}

fn check_nonneg_positive_total(name: &'static str, x: &[f64]) -> Result<f64> {
    check_finite(name, x)?;
    if let Some(i) = x.iter().position(|&v| v < 0.0) {
        return Err(Error::invalid(format!("{name}[{i}]"), "must be >= 0"));
    }
    let total: f64 = x.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid(name, "total must be > 0"));
    }
    Ok(total)
}

/// Population Gini, `sum_ij |x_i - x_j| / (2 n^2 mean)`, via the sorted form.
pub fn gini(x: &[f64]) -> Result<f64> {
    let total = check_nonneg_positive_total("x", x)?;
    let n = x.len() as f64;
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * (i + 1) as f64 - n - 1.0) * v)
        .sum();
    Ok((weighted / (n * total)).max(0.0))
}

/// Share held by the `k` largest entries.
pub fn top_k_share(counts: &[f64], k: usize) -> Result<f64> {
    let total = check_nonneg_positive_total("counts", counts)?;
    if k > counts.len() {
        return Err(Error::invalid(
            "k",
            format!("{k} exceeds the number of streamers {}", counts.len()),
        ));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[..k].iter().sum::<f64>() / total)
}

/// `1 - top_k_share(counts, 3)`.
pub fn tail_share(counts: &[f64]) -> Result<f64> {
    Ok(1.0 - top_k_share(counts, 3)?)
}

/// Mean over consecutive round pairs of the per-streamer mean `|n(t) - n(t-1)|`.
pub fn viewer_mobility<V: AsRef<[f64]>>(history: &[V]) -> Result<f64> {
    if history.len() < 2 {
        return Err(Error::invalid("history", "need at least two rounds"));
    }
    let width = history[0].as_ref().len();
    let mut total = 0.0;
    for pair in history.windows(2) {
        let (a, b) = (pair[0].as_ref(), pair[1].as_ref());
        if b.len() != width {
            return Err(Error::DimensionMismatch {
                name: "history row",
                expected: width,
                actual: b.len(),
            });
        }
        total += a.iter().zip(b).map(|(x, y)| (y - x).abs()).sum::<f64>() / width as f64;
    }
    Ok(total / (history.len() - 1) as f64)
}

pub fn avg_satisfaction(s: &[f64]) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::invalid("satisfaction", "must be non-empty"));
    }
    check_finite("satisfaction", s)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// `mean(q_final - q_initial)`.
pub fn quality_improvement(q_initial: &[f64], q_final: &[f64]) -> Result<f64> {
    if q_initial.len() != q_final.len() {
        return Err(Error::DimensionMismatch {
            name: "q_final",
            expected: q_initial.len(),
            actual: q_final.len(),
        });
    }
    if q_initial.is_empty() {
        return Err(Error::invalid("q_initial", "must be non-empty"));
    }
    Ok(q_final.iter().zip(q_initial).map(|(f, i)| f - i).sum::<f64>() / q_initial.len() as f64)
}

/// Summary of a run: concentration and satisfaction from the final round,
/// mobility over the whole history, quality change against `q_initial`.
/// With fewer than three streamers the top-k cut is clamped to `N`.
pub fn summarize(history: &[RoundRecord], q_initial: &[f64]) -> Result<MetricsSummary> {
    let last = history
        .last()
        .ok_or_else(|| Error::invalid("history", "must be non-empty"))?;
    let counts = &last.viewer_counts;
    let k = 3.min(counts.len());
    if k < 3 {
        log::warn!("top-3 share clamped to k = {k} for {} streamers", counts.len());
    }
    let top3_share = top_k_share(counts, k)?;
    let viewer_mobility = if history.len() >= 2 {
        let rows: Vec<&[f64]> = history.iter().map(|r| r.viewer_counts.as_slice()).collect();
        viewer_mobility(&rows)?
    } else {
        0.0
    };
    Ok(MetricsSummary {
        gini: gini(counts)?,
        top3_share,
        viewer_mobility,
        tail_share: 1.0 - top3_share,
        avg_satisfaction: last.mean_satisfaction,
        quality_improvement: quality_improvement(q_initial, &last.qualities)?,
    })
}
