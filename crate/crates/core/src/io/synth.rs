//! Synthetic periodic skeleton motion, rendered through a pinhole camera.
//!
//! Poses come from forward kinematics over fixed bone offsets, so bone
//! lengths never change within a sequence. Keypoints are the exact
//! reprojection of the 3D joints.

use std::f64::consts::{PI, TAU};

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::dataset::{Dataset, PartMap, SequenceRecord, Skeleton, DEFAULT_IMAGE_SIZE};
use crate::rng::{derive_seed, seeded_rng};
use crate::sampler::{reproject, CameraIntrinsics};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    WalkCycle,
    ArmWave,
    Sit,
}

impl MotionKind {
    pub const ALL: [MotionKind; 3] = [MotionKind::WalkCycle, MotionKind::ArmWave, MotionKind::Sit];

    pub fn label(self) -> &'static str {
        match self {
            MotionKind::WalkCycle => "walk_cycle",
            MotionKind::ArmWave => "arm_wave",
            MotionKind::Sit => "sit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown motion {s:?} (walk_cycle, arm_wave or sit)")))
    }
}

/// Kinematic role of a joint, which decides the local rotation it applies
/// to its children.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Role {
    Root,
    Spine,
    Neck,
    Hip(f64),
    Knee,
    Shoulder(f64),
    Elbow,
    Distal,
}

/// Skeleton plus rest offsets (body frame, y up, mm) and per-joint roles.
struct Rig {
    skeleton: Skeleton,
    offsets: Vec<Vector3<f64>>,
    roles: Vec<Role>,
}

fn h36m_rig() -> Rig {
    let v = Vector3::new;
    let offsets = vec![
        v(0.0, 0.0, 0.0),
        v(-130.0, 0.0, 0.0),
        v(0.0, -440.0, 0.0),
        v(0.0, -440.0, 0.0),
        v(130.0, 0.0, 0.0),
        v(0.0, -440.0, 0.0),
        v(0.0, -440.0, 0.0),
        v(0.0, 230.0, 0.0),
        v(0.0, 250.0, 0.0),
        v(0.0, 110.0, 20.0),
        v(0.0, 120.0, 0.0),
        v(150.0, -20.0, 0.0),
        v(0.0, -280.0, 0.0),
        v(0.0, -250.0, 0.0),
        v(-150.0, -20.0, 0.0),
        v(0.0, -280.0, 0.0),
        v(0.0, -250.0, 0.0),
    ];
    use Role::*;
    let roles = vec![
        Root,
        Hip(-1.0),
        Knee,
        Distal,
        Hip(1.0),
        Knee,
        Distal,
        Spine,
        Neck,
        Distal,
        Distal,
        Shoulder(1.0),
        Elbow,
        Distal,
        Shoulder(-1.0),
        Elbow,
        Distal,
    ];
    Rig { skeleton: Skeleton::h36m(), offsets, roles }
}

/// Any `J ≥ 5`: a root with a spine chain, a head chain and one arm on top
/// of the spine, and one leg below the root. Extra joints are dealt
/// round-robin to legs, arms, head, spine.
fn generic_rig(j: usize) -> Rig {
    // chain order: spine, head, arm, leg
    let mut counts = [0usize; 4];
    for i in 0..j - 1 {
        counts[[3, 2, 1, 0][i % 4]] += 1;
    }
    let mut parents = vec![None];
    let mut offsets = vec![Vector3::zeros()];
    let mut roles = vec![Role::Root];
    let mut part = PartMap { head: vec![], body: vec![0], arms: vec![], legs: vec![] };
    let mut top_of_spine = 0;
    for (chain, &count) in counts.iter().enumerate() {
        let mut prev = if chain == 3 { 0 } else { top_of_spine };
        for k in 0..count {
            let idx = parents.len();
            parents.push(Some(prev));
            let (off, role) = match chain {
                0 => (Vector3::new(0.0, 250.0, 0.0), Role::Spine),
                1 => (Vector3::new(0.0, 120.0, 0.0), if k == 0 { Role::Neck } else { Role::Distal }),
                2 if k == 0 => (Vector3::new(180.0, 0.0, 0.0), Role::Shoulder(1.0)),
                2 => (Vector3::new(0.0, -260.0, 0.0), if k == 1 { Role::Elbow } else { Role::Distal }),
                _ if k == 0 => (Vector3::new(120.0, -60.0, 0.0), Role::Hip(1.0)),
                _ => (Vector3::new(0.0, -420.0, 0.0), if k == 1 { Role::Knee } else { Role::Distal }),
            };
            offsets.push(off);
            roles.push(role);
            [&mut part.body, &mut part.head, &mut part.arms, &mut part.legs][chain].push(idx);
            prev = idx;
        }
        if chain == 0 {
            top_of_spine = prev;
        }
    }
    // a joint's role rotates its children; the last joint of each chain has none
    Rig { skeleton: Skeleton { joints: j, parents, part_map: part }, offsets, roles }
}

/// Per-sequence motion parameters.
struct Style {
    kind: MotionKind,
    /// Cycles per frame.
    freq: f64,
    phase: f64,
    amp: f64,
    heading: f64,
    speed: f64,
}

fn rx(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), a)
}

fn rz(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a)
}

impl Style {
    fn local(&self, role: Role, phi: f64) -> Rotation3<f64> {
        let (s, c, a) = (phi.sin(), phi.cos(), self.amp);
        match (self.kind, role) {
            (MotionKind::WalkCycle, Role::Hip(side)) => rx(side * 0.45 * a * s),
            (MotionKind::WalkCycle, Role::Knee) => rx(-0.6 * a * (0.5 + 0.5 * s).powi(2)),
            (MotionKind::WalkCycle, Role::Shoulder(side)) => rx(-side * 0.4 * a * s) * rz(side * 0.15),
            (MotionKind::WalkCycle, Role::Elbow) => rx(0.3 + 0.2 * a * c),
            (MotionKind::WalkCycle, Role::Spine) => Rotation3::from_axis_angle(&Vector3::y_axis(), 0.08 * a * s),
            (MotionKind::ArmWave, Role::Shoulder(side)) => rz(side * (1.3 + 0.7 * a * s)),
            (MotionKind::ArmWave, Role::Elbow) => rz(0.5 + 0.5 * a * c),
            (MotionKind::ArmWave, Role::Neck) => rz(0.1 * s),
            (MotionKind::ArmWave, Role::Spine) => rz(0.05 * a * c),
            (MotionKind::Sit, _) => {
                let depth = a * (1.0 - c) / 2.0;
                match role {
                    Role::Hip(_) => rx(-1.4 * depth),
                    Role::Knee => rx(2.2 * depth),
                    Role::Spine => rx(-0.4 * depth),
                    Role::Shoulder(side) => rz(side * 0.2) * rx(-0.5 * depth),
                    Role::Elbow => rx(-0.6 * depth),
                    _ => Rotation3::identity(),
                }
            }
            _ => Rotation3::identity(),
        }
    }

    /// Root position (body frame, mm) and orientation.
    fn root(&self, n: usize, phi: f64) -> (Vector3<f64>, Rotation3<f64>) {
        let yaw = Rotation3::from_axis_angle(&Vector3::y_axis(), self.heading);
        let pos = match self.kind {
            MotionKind::WalkCycle => {
                let forward = yaw * Vector3::new(0.0, 0.0, self.speed * n as f64);
                forward + Vector3::new(0.0, 15.0 * (2.0 * phi).cos(), 0.0)
            }
            MotionKind::ArmWave => Vector3::new(20.0 * phi.sin(), 0.0, 0.0),
            MotionKind::Sit => Vector3::new(0.0, -380.0 * self.amp * (1.0 - phi.cos()) / 2.0, 0.0),
        };
        (pos, yaw)
    }
}

fn pose_frame(rig: &Rig, style: &Style, n: usize) -> Vec<Vector3<f64>> {
    let phi = TAU * style.freq * n as f64 + style.phase;
    let (root_pos, root_rot) = style.root(n, phi);
    let j = rig.offsets.len();
    let mut global = vec![Rotation3::identity(); j];
    let mut pos = vec![Vector3::zeros(); j];
    for k in 0..j {
        match rig.skeleton.parents[k] {
            None => {
                pos[k] = root_pos;
                global[k] = root_rot * style.local(rig.roles[k], phi);
            }
            Some(p) => {
                pos[k] = pos[p] + global[p] * rig.offsets[k];
                global[k] = global[p] * style.local(rig.roles[k], phi);
            }
        }
    }
    pos
}

fn rig_for(j: usize) -> Result<Rig> {
    match j {
        17 => Ok(h36m_rig()),
        j if j >= 5 => Ok(generic_rig(j)),
        _ => Err(Error::Config(format!("synthetic skeletons need at least 5 joints, got {j}"))),
    }
}

pub fn skeleton_for(j: usize) -> Result<Skeleton> {
    Ok(rig_for(j)?.skeleton)
}

/// Ground-truth 3D sequence, its camera and the 2D reprojection.
fn render(rig: &Rig, n: usize, seed: u64, kind: MotionKind) -> Result<(Tensor, CameraIntrinsics, Tensor)> {
    let mut rng = seeded_rng(seed);
    let style = Style {
        kind,
        freq: rng.random_range(0.03..0.08),
        phase: rng.random_range(0.0..TAU),
        amp: rng.random_range(0.7..1.2),
        heading: rng.random_range(-PI..PI),
        speed: rng.random_range(8.0..20.0),
    };
    let focal = rng.random_range(1000.0..1150.0);
    let cam = CameraIntrinsics::new(focal, focal, DEFAULT_IMAGE_SIZE[0] / 2.0, DEFAULT_IMAGE_SIZE[1] / 2.0)?;
    let place = Vector3::new(rng.random_range(-300.0..300.0), rng.random_range(-100.0..100.0), rng.random_range(4000.0..6000.0));
    let mut data = Vec::with_capacity(n * rig.offsets.len() * 3);
    for f in 0..n {
        for p in pose_frame(rig, &style, f) {
            // body frame is y-up; camera frame is y-down
            data.extend_from_slice(&[p.x + place.x, -p.y + place.y, p.z + place.z]);
        }
    }
    let gt = Tensor::from_vec(vec![n, rig.offsets.len(), 3], data)?;
    let kp = reproject(&gt, &cam)?;
    Ok((gt, cam, kp))
}

/// `n_sequences` single-person sequences labelled with the motion kind.
pub fn synth_generate(n_sequences: usize, n: usize, j: usize, seed: u64, kind: MotionKind) -> Result<Dataset> {
    if n == 0 || n_sequences == 0 {
        return Err(Error::Config("need at least one sequence of at least one frame".into()));
    }
    let rig = rig_for(j)?;
    let mut records = Vec::with_capacity(n_sequences);
    for s in 0..n_sequences {
        let (gt, cam, kp) = render(&rig, n, derive_seed(seed, &[s as u64]), kind)?;
        records.push(SequenceRecord {
            id: format!("{}_{s:03}", kind.label()),
            action: kind.label().into(),
            keypoints_2d: kp,
            gt_3d: Some(gt),
            camera: Some(cam),
            presence: vec![true; n],
            image_size: DEFAULT_IMAGE_SIZE,
            character: 0,
            scene: format!("{}_{s:03}", kind.label()),
        });
    }
    Ok(Dataset { skeleton: rig.skeleton, records })
}

/// Sequences cycling through every motion kind.
pub fn synth_mixed(n_sequences: usize, n: usize, j: usize, seed: u64) -> Result<Dataset> {
    let rig = rig_for(j)?;
    let mut records = Vec::new();
    for s in 0..n_sequences {
        let kind = MotionKind::ALL[s % 3];
        let mut ds = synth_generate(1, n, j, derive_seed(seed, &[s as u64]), kind)?;
        let mut r = ds.records.remove(0);
        r.id = format!("{}_{s:03}", kind.label());
        r.scene = r.id.clone();
        records.push(r);
    }
    Ok(Dataset { skeleton: rig.skeleton, records })
}

/// One scene with `characters` people sharing a camera. Every character
/// after the first is absent for a random window of frames, where its
/// keypoints are zero-filled.
pub fn synth_scene(characters: usize, n: usize, j: usize, seed: u64) -> Result<Dataset> {
    if characters == 0 {
        return Err(Error::Config("a scene needs at least one character".into()));
    }
    let rig = rig_for(j)?;
    let mut records = Vec::with_capacity(characters);
    let mut camera = None;
    for c in 0..characters {
        let kind = MotionKind::ALL[c % 3];
        let (mut gt, cam, _) = render(&rig, n, derive_seed(seed, &[c as u64]), kind)?;
        let cam = *camera.get_or_insert(cam);
        // spread people sideways, then project through the shared camera
        for p in gt.data_mut().chunks_mut(3) {
            p[0] += (c as f64 - (characters - 1) as f64 / 2.0) * 900.0;
        }
        let mut kp = reproject(&gt, &cam)?;
        let mut presence = vec![true; n];
        if c > 0 && n >= 4 {
            let mut rng = seeded_rng(derive_seed(seed, &[1_000 + c as u64]));
            let len = rng.random_range(1..=n / 2);
            let start = rng.random_range(0..=n - len);
            for f in start..start + len {
                presence[f] = false;
                kp.data_mut()[f * j * 2..(f + 1) * j * 2].fill(0.0);
            }
        }
        records.push(SequenceRecord {
            id: format!("scene_c{c}"),
            action: kind.label().into(),
            keypoints_2d: kp,
            gt_3d: Some(gt),
            camera: Some(cam),
            presence,
            image_size: DEFAULT_IMAGE_SIZE,
            character: c,
            scene: "scene".into(),
        });
    }
    Ok(Dataset { skeleton: rig.skeleton, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bone_lengths(skel: &Skeleton, gt: &Tensor, f: usize) -> Vec<f64> {
        let j = skel.joints;
        let p = |k: usize| &gt.data()[(f * j + k) * 3..(f * j + k) * 3 + 3];
        skel.bones()
            .map(|(a, b)| (0..3).map(|c| (p(a)[c] - p(b)[c]).powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    #[test]
    fn bone_lengths_are_constant() {
        for j in [17, 5, 9, 23] {
            for kind in MotionKind::ALL {
                let ds = synth_generate(2, 30, j, 4, kind).unwrap();
                ds.validate().unwrap();
                for r in &ds.records {
                    let gt = r.gt_3d.as_ref().unwrap();
                    let first = bone_lengths(&ds.skeleton, gt, 0);
                    for f in 1..30 {
                        for (a, b) in bone_lengths(&ds.skeleton, gt, f).iter().zip(&first) {
                            assert!((a - b).abs() < 1e-9, "J={j} {kind:?} frame {f}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn keypoints_are_exact_reprojections() {
        let ds = synth_generate(3, 8, 17, 1, MotionKind::WalkCycle).unwrap();
        for r in &ds.records {
            let kp = reproject(r.gt_3d.as_ref().unwrap(), &r.camera.unwrap()).unwrap();
            assert_eq!(kp, r.keypoints_2d);
            assert_eq!(r.action, "walk_cycle");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(synth_mixed(4, 6, 17, 3).unwrap(), synth_mixed(4, 6, 17, 3).unwrap());
        assert_ne!(synth_mixed(4, 6, 17, 3).unwrap(), synth_mixed(4, 6, 17, 4).unwrap());
        assert!(synth_generate(1, 4, 4, 0, MotionKind::Sit).is_err());
    }

    #[test]
    fn motion_actually_moves() {
        for kind in MotionKind::ALL {
            let gt = synth_generate(1, 16, 17, 2, kind).unwrap().records[0].gt_3d.clone().unwrap();
            let (a, b) = (gt.index0(0), gt.index0(8));
            assert!(a.max_abs_diff(&b) > 20.0, "{kind:?} is static");
        }
    }

    #[test]
    fn scene_zero_fills_absent_frames() {
        let ds = synth_scene(3, 16, 17, 5).unwrap();
        ds.validate().unwrap();
        assert!(ds.records[0].presence.iter().all(|p| *p));
        for r in &ds.records[1..] {
            let absent: Vec<usize> = (0..16).filter(|f| !r.presence[*f]).collect();
            assert!(!absent.is_empty());
            for f in absent {
                assert!(r.keypoints_2d.index0(f).data().iter().all(|v| *v == 0.0));
            }
        }
        assert!(ds.records.iter().all(|r| r.camera == ds.records[0].camera));
    }
}
