//! Pose-estimation metrics in millimetres.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// PCK operating point.
pub const PCK_THRESHOLD_MM: f64 = 150.0;

/// Thresholds 0, 5, …, 150 mm.
pub fn auc_thresholds() -> Vec<f64> {
    (0..=30).map(|i| i as f64 * 5.0).collect()
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return shape_err(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()));
    }
    if pred.last_dim() != 3 || pred.ndim() < 2 {
        return shape_err(format!("expected …×J×3 poses, got {:?}", pred.shape()));
    }
    Ok(())
}

/// Euclidean error of every joint, in storage order.
pub fn joint_errors(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    check_pair(pred, gt)?;
    Ok(pred
        .data()
        .chunks(3)
        .zip(gt.data().chunks(3))
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(mean(&joint_errors(pred, gt)?))
}

/// Mean error of each joint index over frames.
pub fn per_joint_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    let e = joint_errors(pred, gt)?;
    let j = pred.shape()[pred.ndim() - 2];
    let frames = e.len() / j;
    Ok((0..j).map(|jj| (0..frames).map(|f| e[f * j + jj]).sum::<f64>() / frames as f64).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Rotation, translation and uniform scale.
    #[default]
    Similarity,
    /// Rotation and translation only.
    Rigid,
}

fn points(frame: &[f64]) -> Vec<Vector3<f64>> {
    frame.chunks(3).map(|p| Vector3::new(p[0], p[1], p[2])).collect()
}

fn align_frame(pred: &[f64], gt: &[f64], mode: Alignment, frame: usize) -> Result<Vec<f64>> {
    let (p, g) = (points(pred), points(gt));
    let n = p.len() as f64;
    let mp = p.iter().sum::<Vector3<f64>>() / n;
    let mg = g.iter().sum::<Vector3<f64>>() / n;
    let pc: Vec<_> = p.iter().map(|v| v - mp).collect();
    let gc: Vec<_> = g.iter().map(|v| v - mg).collect();
    let var_p: f64 = pc.iter().map(|v| v.norm_squared()).sum();
    let var_g: f64 = gc.iter().map(|v| v.norm_squared()).sum();
    let scale_ref = var_p.max(var_g).max(1.0);
    // cross-covariance Σ g pᵀ
    let cov: Matrix3<f64> = gc.iter().zip(&pc).map(|(a, b)| a * b.transpose()).sum();
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let s = svd.singular_values;
    // rank < 2 leaves the rotation undetermined
    if p.len() < 3 || var_p <= 1e-12 * scale_ref || s[1] <= 1e-10 * s[0].max(f64::MIN_POSITIVE) {
        return Err(Error::Alignment {
            frame,
            reason: "fewer than three non-collinear joints".into(),
        });
    }
    let d = if (u * v_t).determinant() < 0.0 { -1.0 } else { 1.0 };
    let sign = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = u * sign * v_t;
    let c = match mode {
        Alignment::Similarity => (s[0] + s[1] + d * s[2]) / var_p,
        Alignment::Rigid => 1.0,
    };
    Ok(pc.iter().flat_map(|v| (c * (r * v) + mg).iter().copied().collect::<Vec<_>>()).collect())
}

/// Per-frame optimal alignment of `pred` onto `gt`; the rotation is proper
/// (determinant +1).
pub fn procrustes_align(pred: &Tensor, gt: &Tensor, mode: Alignment) -> Result<Tensor> {
    check_pair(pred, gt)?;
    let j = pred.shape()[pred.ndim() - 2];
    let mut out = Vec::with_capacity(pred.numel());
    for (f, (pf, gf)) in pred.data().chunks(j * 3).zip(gt.data().chunks(j * 3)).enumerate() {
        out.extend(align_frame(pf, gf, mode, f)?);
    }
    Tensor::from_vec(pred.shape().to_vec(), out)
}

pub fn p_mpjpe(pred: &Tensor, gt: &Tensor, mode: Alignment) -> Result<f64> {
    mpjpe(&procrustes_align(pred, gt, mode)?, gt)
}

fn pck_from_errors(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    100.0 * errors.iter().filter(|e| **e <= threshold).count() as f64 / errors.len() as f64
}

/// Percentage of joints with error at most `threshold_mm`.
pub fn pck(pred: &Tensor, gt: &Tensor, threshold_mm: f64) -> Result<f64> {
    if !(threshold_mm >= 0.0) {
        return Err(Error::Range(format!("PCK threshold {threshold_mm} must be non-negative")));
    }
    Ok(pck_from_errors(&joint_errors(pred, gt)?, threshold_mm))
}

/// Mean PCK over [`auc_thresholds`].
pub fn auc(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let e = joint_errors(pred, gt)?;
    Ok(mean(&auc_thresholds().iter().map(|&t| pck_from_errors(&e, t)).collect::<Vec<_>>()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub id: String,
    pub action: String,
    pub frames: usize,
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub pck_percent: f64,
    pub auc_percent: f64,
    pub per_joint_mm: Vec<f64>,
}

pub fn evaluate_sequence(id: &str, action: &str, pred: &Tensor, gt: &Tensor, mode: Alignment) -> Result<SequenceMetrics> {
    Ok(SequenceMetrics {
        id: id.to_string(),
        action: action.to_string(),
        frames: pred.shape()[0],
        mpjpe_mm: mpjpe(pred, gt)?,
        p_mpjpe_mm: p_mpjpe(pred, gt, mode)?,
        pck_percent: pck(pred, gt, PCK_THRESHOLD_MM)?,
        auc_percent: auc(pred, gt)?,
        per_joint_mm: per_joint_mpjpe(pred, gt)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sequences: Vec<SequenceMetrics>,
    /// Frame-weighted over all sequences.
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub pck_percent: f64,
    pub auc_percent: f64,
    /// Frame-weighted MPJPE per action.
    pub per_action: BTreeMap<String, f64>,
    /// Unweighted mean of `per_action`.
    pub action_average_mm: f64,
    pub per_joint_mm: Vec<f64>,
}

impl MetricReport {
    pub fn from_sequences(sequences: Vec<SequenceMetrics>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Range("no sequences to report".into()));
        }
        let total: f64 = sequences.iter().map(|s| s.frames as f64).sum();
        let weighted = |f: &dyn Fn(&SequenceMetrics) -> f64| {
            sequences.iter().map(|s| f(s) * s.frames as f64).sum::<f64>() / total
        };
        let mut acc: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for s in &sequences {
            let e = acc.entry(s.action.clone()).or_default();
            e.0 += s.mpjpe_mm * s.frames as f64;
            e.1 += s.frames as f64;
        }
        let per_action: BTreeMap<String, f64> = acc.into_iter().map(|(k, (sum, n))| (k, sum / n)).collect();
        let joints = sequences[0].per_joint_mm.len();
        if sequences.iter().any(|s| s.per_joint_mm.len() != joints) {
            return shape_err("sequences disagree on joint count");
        }
        let per_joint_mm = (0..joints).map(|j| weighted(&|s| s.per_joint_mm[j])).collect();
        Ok(Self {
            mpjpe_mm: weighted(&|s| s.mpjpe_mm),
            p_mpjpe_mm: weighted(&|s| s.p_mpjpe_mm),
            pck_percent: weighted(&|s| s.pck_percent),
            auc_percent: weighted(&|s| s.auc_percent),
            action_average_mm: mean(&per_action.values().copied().collect::<Vec<_>>()),
            per_action,
            per_joint_mm,
            sequences,
        })
    }
}
