//! Invertible input normalization.
//!
//! Keypoints map to screen-normalized coordinates, `u/w·2 − 1` and
//! `v/w·2 − h/w`, so the image width spans [−1, 1] and the aspect ratio is
//! kept. In `root_centered` mode, 3D poses are expressed relative to the
//! root joint in metres.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::io::dataset::SequenceRecord;
use crate::sampler::Observation;
use crate::tensor::Tensor;

/// Millimetres per normalized 3D unit.
pub const POSE_SCALE_MM: f64 = 1000.0;
/// Depth assumed for the root when no ground truth is available.
pub const ESTIMATED_ROOT_DEPTH_MM: f64 = 5000.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// Keypoints screen-normalized and 3D poses root-relative.
    #[default]
    RootCentered,
    /// Keypoints screen-normalized, 3D left untouched.
    ImageNormalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationParams {
    pub mode: NormalizationMode,
    pub image_size: [f64; 2],
    /// `N×3` root trajectory (mm) removed from the 3D pose.
    pub root: Option<Tensor>,
    pub scale: f64,
    pub presence: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedRecord {
    pub keypoints: Tensor,
    pub pose: Option<Tensor>,
    pub params: NormalizationParams,
}

/// Pixels → screen-normalized; absent frames stay zero.
pub fn normalize_keypoints(kp: &Tensor, image_size: [f64; 2], presence: &[bool]) -> Result<Tensor> {
    if kp.ndim() == 0 || kp.shape()[0] != presence.len() {
        return shape_err(format!("keypoints {:?} vs {} presence flags", kp.shape(), presence.len()));
    }
    let [w, h] = image_size;
    let per_frame = kp.numel() / kp.shape()[0].max(1);
    let mut out = kp.clone();
    for (f, frame) in out.data_mut().chunks_mut(per_frame).enumerate() {
        if !presence[f] {
            continue;
        }
        for uv in frame.chunks_mut(2) {
            uv[0] = uv[0] / w * 2.0 - 1.0;
            uv[1] = uv[1] / w * 2.0 - h / w;
        }
    }
    Ok(out)
}

pub fn denormalize_keypoints(kp: &Tensor, image_size: [f64; 2], presence: &[bool]) -> Result<Tensor> {
    if kp.ndim() == 0 || kp.shape()[0] != presence.len() {
        return shape_err(format!("keypoints {:?} vs {} presence flags", kp.shape(), presence.len()));
    }
    let [w, h] = image_size;
    let per_frame = kp.numel() / kp.shape()[0].max(1);
    let mut out = kp.clone();
    for (f, frame) in out.data_mut().chunks_mut(per_frame).enumerate() {
        if !presence[f] {
            continue;
        }
        for uv in frame.chunks_mut(2) {
            uv[0] = (uv[0] + 1.0) * w / 2.0;
            uv[1] = (uv[1] + h / w) * w / 2.0;
        }
    }
    Ok(out)
}

/// `N×3` trajectory of joint 0.
pub fn root_trajectory(pose: &Tensor) -> Tensor {
    let (n, j) = (pose.shape()[0], pose.shape()[1]);
    let data = (0..n).flat_map(|f| pose.data()[f * j * 3..f * j * 3 + 3].to_vec()).collect();
    Tensor::from_vec(vec![n, 3], data).unwrap()
}

fn offset_pose(pose: &Tensor, root: &Tensor, sign: f64) -> Tensor {
    let j = pose.shape()[1];
    let mut out = pose.clone();
    for (k, p) in out.data_mut().chunks_mut(3).enumerate() {
        let r = &root.data()[(k / j) * 3..(k / j) * 3 + 3];
        for c in 0..3 {
            p[c] += sign * r[c];
        }
    }
    out
}

pub fn normalize_record(rec: &SequenceRecord, mode: NormalizationMode) -> Result<NormalizedRecord> {
    let keypoints = normalize_keypoints(&rec.keypoints_2d, rec.image_size, &rec.presence)?;
    let (pose, root, scale) = match mode {
        NormalizationMode::RootCentered => {
            let gt = rec.gt_3d.as_ref().ok_or_else(|| {
                Error::Config(format!("sequence {}: root-centered normalization needs gt_3d", rec.id))
            })?;
            let root = root_trajectory(gt);
            (Some(offset_pose(gt, &root, -1.0).scale(1.0 / POSE_SCALE_MM)), Some(root), POSE_SCALE_MM)
        }
        NormalizationMode::ImageNormalized => (rec.gt_3d.clone(), None, 1.0),
    };
    Ok(NormalizedRecord {
        keypoints,
        pose,
        params: NormalizationParams { mode, image_size: rec.image_size, root, scale, presence: rec.presence.clone() },
    })
}

impl NormalizationParams {
    pub fn denormalize_pose(&self, pose: &Tensor) -> Result<Tensor> {
        match &self.root {
            Some(root) => {
                if pose.shape()[0] != root.shape()[0] {
                    return shape_err(format!("pose has {} frames, root {}", pose.shape()[0], root.shape()[0]));
                }
                Ok(offset_pose(&pose.scale(self.scale), root, 1.0))
            }
            None => Ok(pose.scale(self.scale)),
        }
    }

    pub fn denormalize_keypoints(&self, kp: &Tensor) -> Result<Tensor> {
        denormalize_keypoints(kp, self.image_size, &self.presence)
    }
}

/// Root trajectory for inference-only data: the 2D root back-projected at
/// a fixed depth.
pub fn estimated_root(rec: &SequenceRecord) -> Tensor {
    let cam = rec.camera_or_default();
    let j = rec.joints();
    let data = (0..rec.frames())
        .flat_map(|f| {
            let uv = &rec.keypoints_2d.data()[f * j * 2..f * j * 2 + 2];
            cam.back_project(uv[0], uv[1], ESTIMATED_ROOT_DEPTH_MM)
        })
        .collect();
    Tensor::from_vec(vec![rec.frames(), 3], data).unwrap()
}

/// Sampler input for a record: normalized keypoints for the denoiser plus
/// the pixel keypoints, camera and root trajectory used by aggregation.
pub fn observation(rec: &SequenceRecord) -> Result<Observation> {
    let keypoints = normalize_keypoints(&rec.keypoints_2d, rec.image_size, &rec.presence)?;
    let root = match &rec.gt_3d {
        Some(gt) => root_trajectory(gt),
        None => estimated_root(rec),
    };
    let all_present = rec.presence.iter().all(|p| *p);
    Ok(Observation {
        keypoints,
        image_keypoints: rec.keypoints_2d.clone(),
        camera: rec.camera_or_default(),
        root,
        scale: POSE_SCALE_MM,
        presence: (!all_present).then(|| rec.presence.clone()),
    })
}
