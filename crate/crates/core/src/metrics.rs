//! Performance measures: reaching error (RE), forward model error (FME),
//! trial grouping/smoothing, and SVD mode analysis of the learned mapping.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::la;
use crate::protocol::TrialRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    ReachingError,
    ForwardModelError,
}

/// A per-trial metric: strictly increasing indices with non-negative values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSeries {
    pub kind: MetricKind,
    /// (trial index k, value), k starting at 1.
    pub values: Vec<(usize, f64)>,
    /// Description of the applied grouping/smoothing pipeline.
    pub smoothing: String,
}

impl MetricSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value_slice(&self) -> Vec<f64> {
        self.values.iter().map(|&(_, v)| v).collect()
    }

    /// Writes the series as CSV with header `k,value`.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["k", "value"])?;
        for (k, v) in &self.values {
            w.write_record([k.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One RE value per trial in trial order: the distance between the cursor
/// at end of movement and the target.
pub fn reaching_error(records: &[TrialRecord]) -> Result<MetricSeries> {
    if records.is_empty() {
        return Err(Error::EmptyGroup("no trials recorded".into()));
    }
    let values = records
        .iter()
        .enumerate()
        .map(|(i, r)| (i + 1, r.final_error))
        .collect();
    Ok(MetricSeries {
        kind: MetricKind::ReachingError,
        values,
        smoothing: "raw".into(),
    })
}

/// Relative Frobenius distance between the estimated and true weights,
/// `||W - What||_F / ||W||_F`. Equals `||C - Chat||_F / ||C||_F` because
/// the synergy rows are orthonormal.
pub fn forward_model_error(w_hat: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    if w_hat.shape() != w.shape() {
        return Err(Error::DimensionMismatch {
            context: "forward_model_error shapes",
            expected: w.len(),
            actual: w_hat.len(),
        });
    }
    let denom = w.norm();
    if denom == 0.0 {
        return Err(Error::ZeroTrueMapping);
    }
    Ok((w_hat - w).norm() / denom)
}

/// FME per trial from the recorded end-of-trial estimates.
pub fn fme_series(records: &[TrialRecord], w_true: &DMatrix<f64>) -> Result<MetricSeries> {
    if records.is_empty() {
        return Err(Error::EmptyGroup("no trials recorded".into()));
    }
    let mut values = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        values.push((i + 1, forward_model_error(&r.w_hat_final, w_true)?));
    }
    Ok(MetricSeries {
        kind: MetricKind::ForwardModelError,
        values,
        smoothing: "raw".into(),
    })
}

/// Groups trials by (start, end) target pair, averages across groups at
/// each within-group occurrence index, then applies a trailing moving
/// average of the given window (shortened windows at the head keep the
/// series length).
///
/// The start label of a trial is the previous trial's target (its nominal
/// start point); the first trial of each session starts at the configured
/// start position, labeled by the nearest target. End labels come from the
/// trial's own target. Groups with no j-th member simply stop contributing
/// at that index.
pub fn group_and_smooth(
    series: &MetricSeries,
    records: &[TrialRecord],
    window: usize,
) -> Result<MetricSeries> {
    if series.values.len() != records.len() {
        return Err(Error::DimensionMismatch {
            context: "series vs records length",
            expected: records.len(),
            actual: series.values.len(),
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyGroup("no trials to group".into()));
    }
    if window == 0 {
        return Err(Error::InvalidConfig("smoothing window must be >= 1".into()));
    }

    // distinct targets in order of first appearance
    let mut targets: Vec<&DVector<f64>> = Vec::new();
    for r in records {
        if !targets.contains(&&r.target) {
            targets.push(&r.target);
        }
    }
    let nearest = |p: &DVector<f64>| -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, t) in targets.iter().enumerate() {
            let d = (p - *t).norm();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    };
    let target_idx = |t: &DVector<f64>| targets.iter().position(|x| *x == t).unwrap();

    // group -> values in chronological order
    let mut groups: Vec<((usize, usize), Vec<f64>)> = Vec::new();
    let mut prev: Option<&TrialRecord> = None;
    for (r, &(_, v)) in records.iter().zip(series.values.iter()) {
        let start_label = match prev {
            Some(p) if p.session_idx == r.session_idx => target_idx(&p.target),
            _ => nearest(&r.start_pos),
        };
        let key = (start_label, target_idx(&r.target));
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, vals)) => vals.push(v),
            None => groups.push((key, vec![v])),
        }
        prev = Some(r);
    }

    let max_len = groups.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut averaged = Vec::with_capacity(max_len);
    for j in 0..max_len {
        let members: Vec<f64> = groups
            .iter()
            .filter_map(|(_, v)| v.get(j).copied())
            .collect();
        averaged.push(members.iter().sum::<f64>() / members.len() as f64);
    }

    let smoothed = moving_average_trailing(&averaged, window);
    Ok(MetricSeries {
        kind: series.kind,
        values: smoothed
            .into_iter()
            .enumerate()
            .map(|(j, v)| (j + 1, v))
            .collect(),
        smoothing: format!(
            "grouped by (start,end) over {} groups; averaged per within-group index; trailing moving average window {window}",
            groups.len()
        ),
    })
}

/// Trailing moving average; the first k < window points average over the
/// available prefix so the output length equals the input length.
pub fn moving_average_trailing(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let lo = (i + 1).saturating_sub(window);
        let slice = &values[lo..=i];
        out.push(slice.iter().sum::<f64>() / slice.len() as f64);
    }
    out
}

/// Full SVD with singular values sorted descending and the same
/// deterministic sign convention as the synergy extraction (dominant entry
/// of each right mode positive).
#[derive(Debug, Clone)]
pub struct SvdModes {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// Right modes as rows: the joint-space patterns.
    pub v_t: DMatrix<f64>,
}

pub fn svd_modes(c_like: &DMatrix<f64>) -> SvdModes {
    let svd = la::sorted_svd(c_like, true, true);
    SvdModes {
        u: svd.u.expect("u requested"),
        singular_values: svd.sigma,
        v_t: svd.v_t.expect("v requested"),
    }
}

/// Principal angles (radians, ascending) between the spans of the top-k
/// right singular modes of `a` and of `b`. Mode signs do not matter.
pub fn right_subspace_angles(a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> Result<Vec<f64>> {
    let ma = svd_modes(a);
    let mb = svd_modes(b);
    if k > ma.v_t.nrows() || k > mb.v_t.nrows() {
        return Err(Error::DimensionMismatch {
            context: "subspace dimension k",
            expected: ma.v_t.nrows().min(mb.v_t.nrows()),
            actual: k,
        });
    }
    let va = ma.v_t.rows(0, k).into_owned();
    let vb = mb.v_t.rows(0, k).into_owned();
    let prod = va * vb.transpose();
    let svd = la::sorted_svd(&prod, false, false);
    // cosines sorted descending -> angles ascending
    Ok(svd
        .sigma
        .iter()
        .map(|s| s.clamp(-1.0, 1.0).acos())
        .collect())
}
