//! Pose-sequence datasets stored in a `.ptc` container.
//!
//! Tensors per sequence: `seq/<id>/keypoints_2d` (N×J×2, pixels),
//! `seq/<id>/gt_3d` (N×J×3, camera-frame mm, optional) and
//! `seq/<id>/presence` (N, 1 = visible). Everything else lives in the
//! `dataset` metadata entry.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::container::Container;
use crate::sampler::CameraIntrinsics;
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;
pub const DEFAULT_IMAGE_SIZE: [f64; 2] = [1000.0, 1000.0];

/// Joint groups driving the body-part prompts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartMap {
    pub head: Vec<usize>,
    pub body: Vec<usize>,
    pub arms: Vec<usize>,
    pub legs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skeleton {
    pub joints: usize,
    /// `None` for the root (joint 0).
    pub parents: Vec<Option<usize>>,
    pub part_map: PartMap,
}

impl Skeleton {
    /// 17-joint layout: pelvis, right leg, left leg, spine, thorax, neck,
    /// head, left arm, right arm.
    pub fn h36m() -> Self {
        let p = [0usize, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];
        Self {
            joints: 17,
            parents: p.iter().enumerate().map(|(j, &q)| (j > 0).then_some(q)).collect(),
            part_map: PartMap {
                head: vec![9, 10],
                body: vec![0, 7, 8],
                arms: vec![11, 12, 13, 14, 15, 16],
                legs: vec![1, 2, 3, 4, 5, 6],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Load(format!("skeleton: {m}")));
        if self.joints == 0 || self.parents.len() != self.joints {
            return bad(format!("{} parents for {} joints", self.parents.len(), self.joints));
        }
        if self.parents[0].is_some() {
            return bad("joint 0 must be the root".into());
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => return bad(format!("joint {j} needs a parent with a lower index")),
            }
        }
        let m = &self.part_map;
        for (name, group) in [("head", &m.head), ("body", &m.body), ("arms", &m.arms), ("legs", &m.legs)] {
            if group.is_empty() || group.iter().any(|j| *j >= self.joints) {
                return bad(format!("part group {name} is empty or out of range"));
            }
        }
        Ok(())
    }

    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parents.iter().enumerate().filter_map(|(j, p)| p.map(|p| (p, j)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub id: String,
    pub action: String,
    /// `N×J×2` pixels; absent frames are exact zeros.
    pub keypoints_2d: Tensor,
    /// `N×J×3` camera-frame millimetres.
    pub gt_3d: Option<Tensor>,
    pub camera: Option<CameraIntrinsics>,
    pub presence: Vec<bool>,
    /// Width and height in pixels.
    pub image_size: [f64; 2],
    pub character: usize,
    pub scene: String,
}

impl SequenceRecord {
    pub fn frames(&self) -> usize {
        self.keypoints_2d.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.keypoints_2d.shape()[1]
    }

    /// Intrinsics, falling back to the default camera for the image size.
    pub fn camera_or_default(&self) -> CameraIntrinsics {
        self.camera.unwrap_or_else(|| CameraIntrinsics::default_for_image(self.image_size[0], self.image_size[1]))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Load(format!("sequence {}: {m}", self.id)));
        let s = self.keypoints_2d.shape();
        if s.len() != 3 || s[2] != 2 || s[0] == 0 || s[1] == 0 {
            return fail(format!("keypoints_2d must be N×J×2 with N, J > 0, got {s:?}"));
        }
        if let Some(gt) = &self.gt_3d {
            if gt.shape() != [s[0], s[1], 3] {
                return fail(format!("gt_3d {:?} disagrees with keypoints_2d {s:?}", gt.shape()));
            }
            if !gt.is_finite() {
                return fail("gt_3d has non-finite values".into());
            }
        }
        if !self.keypoints_2d.is_finite() {
            return fail("keypoints_2d has non-finite values".into());
        }
        if self.presence.len() != s[0] {
            return fail(format!("presence has {} entries for {} frames", self.presence.len(), s[0]));
        }
        let per_frame = s[1] * 2;
        for (f, present) in self.presence.iter().enumerate() {
            if !present && self.keypoints_2d.data()[f * per_frame..(f + 1) * per_frame].iter().any(|v| *v != 0.0) {
                return fail(format!("frame {f} is absent but its keypoints are not zero"));
            }
        }
        if let Some(c) = &self.camera {
            c.validate().or_else(|e| fail(e.to_string()))?;
        }
        if !(self.image_size[0] > 0.0 && self.image_size[1] > 0.0) {
            return fail(format!("image size {:?} must be positive", self.image_size));
        }
        if self.id.is_empty() || self.id.contains('/') {
            return fail("ids must be non-empty and free of '/'".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub records: Vec<SequenceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceMeta {
    id: String,
    frames: usize,
    joints: usize,
    action: String,
    camera: Option<CameraIntrinsics>,
    image_size: [f64; 2],
    character: usize,
    scene: String,
    has_gt: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    version: u32,
    units: String,
    coordinates: String,
    skeleton: Skeleton,
    sequences: Vec<SequenceMeta>,
}

const COORDINATES: &str = "camera frame: x right, y down, z forward; pixels with origin at the top-left corner";

fn key(id: &str, field: &str) -> String {
    format!("seq/{id}/{field}")
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        if self.records.is_empty() {
            return Err(Error::Load("dataset has no sequences".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for r in &self.records {
            r.validate()?;
            if r.joints() != self.skeleton.joints {
                return Err(Error::Load(format!(
                    "sequence {}: {} joints, skeleton has {}",
                    r.id,
                    r.joints(),
                    self.skeleton.joints
                )));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Load(format!("sequence {}: duplicate id", r.id)));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&SequenceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let mut c = Container::new();
        let mut sequences = Vec::new();
        for r in &self.records {
            c.insert(key(&r.id, "keypoints_2d"), &r.keypoints_2d);
            if let Some(gt) = &r.gt_3d {
                c.insert(key(&r.id, "gt_3d"), gt);
            }
            let presence = r.presence.iter().map(|p| if *p { 1.0 } else { 0.0 }).collect();
            c.insert(key(&r.id, "presence"), &Tensor::from_vec(vec![r.frames()], presence)?);
            sequences.push(SequenceMeta {
                id: r.id.clone(),
                frames: r.frames(),
                joints: r.joints(),
                action: r.action.clone(),
                camera: r.camera,
                image_size: r.image_size,
                character: r.character,
                scene: r.scene.clone(),
                has_gt: r.gt_3d.is_some(),
            });
        }
        let meta = DatasetMeta {
            version: DATASET_VERSION,
            units: "mm".into(),
            coordinates: COORDINATES.into(),
            skeleton: self.skeleton.clone(),
            sequences,
        };
        c.set_metadata("dataset", serde_json::to_value(meta)?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let raw = c.metadata().get("dataset").cloned().unwrap_or(Value::Null);
        if raw.is_null() {
            return Err(Error::Load("container has no dataset manifest".into()));
        }
        let meta: DatasetMeta =
            serde_json::from_value(raw).map_err(|e| Error::Load(format!("bad dataset manifest: {e}")))?;
        if meta.version != DATASET_VERSION {
            return Err(Error::Load(format!("unsupported dataset version {}", meta.version)));
        }
        if meta.units != "mm" {
            return Err(Error::Load(format!("unsupported units {:?} (expected mm)", meta.units)));
        }
        let mut records = Vec::with_capacity(meta.sequences.len());
        for s in meta.sequences {
            let fail = |m: String| Error::Load(format!("sequence {}: {m}", s.id));
            let fetch = |field: &str, want: &[usize]| -> Result<Tensor> {
                let t = c.get(&key(&s.id, field)).map_err(|e| fail(e.to_string()))?;
                if t.shape() != want {
                    return Err(fail(format!(
                        "manifest declares {field} {want:?} but the stored tensor is {:?}",
                        t.shape()
                    )));
                }
                Ok(t)
            };
            let keypoints_2d = fetch("keypoints_2d", &[s.frames, s.joints, 2])?;
            let gt_3d = if s.has_gt { Some(fetch("gt_3d", &[s.frames, s.joints, 3])?) } else { None };
            let presence = fetch("presence", &[s.frames])?.data().iter().map(|v| *v != 0.0).collect();
            records.push(SequenceRecord {
                id: s.id,
                action: s.action,
                keypoints_2d,
                gt_3d,
                camera: s.camera,
                presence,
                image_size: s.image_size,
                character: s.character,
                scene: s.scene,
            });
        }
        let ds = Self { skeleton: meta.skeleton, records };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    ds.to_container()?.write(path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_container(&Container::read(path)?)
}
