//! Multi-hypothesis DDIM inference with joint-wise reprojection aggregation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::PromptedDenoiser;
use crate::diffusion::{ddim_step, timestamp_for_iteration, NoiseSample, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Minimum camera-frame depth accepted by [`reproject`].
pub const DEPTH_EPSILON: f64 = 1e-6;

/// Anything that maps `(Y_t, X, t)` to a clean-pose estimate.
pub trait PoseDenoiser: Sync {
    fn denoise(&self, yt: &Tensor, x: &Tensor, t: usize) -> Result<Tensor>;
}

impl PoseDenoiser for PromptedDenoiser<'_> {
    fn denoise(&self, yt: &Tensor, x: &Tensor, t: usize) -> Result<Tensor> {
        PromptedDenoiser::denoise(self, yt, x, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub const DEFAULT_FOCAL: f64 = 1000.0;

    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy };
        cam.validate()?;
        Ok(cam)
    }

    /// Fallback when a dataset has no intrinsics: 1000 px focal length and
    /// the principal point at the image center.
    pub fn default_for_image(width: f64, height: f64) -> Self {
        Self { fx: Self::DEFAULT_FOCAL, fy: Self::DEFAULT_FOCAL, cx: width / 2.0, cy: height / 2.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !(finite && self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!("invalid camera intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Pixel → camera-frame point at depth `z`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }
}

fn check_pose(y: &Tensor) -> Result<(usize, usize)> {
    if y.ndim() != 3 || y.shape()[2] != 3 {
        return shape_err(format!("expected N×J×3 pose, got {:?}", y.shape()));
    }
    Ok((y.shape()[0], y.shape()[1]))
}

/// Pinhole projection `u = fx·X/Z + cx`, `v = fy·Y/Z + cy` of every joint.
pub fn reproject(y: &Tensor, cam: &CameraIntrinsics) -> Result<Tensor> {
    let (n, j) = check_pose(y)?;
    let mut out = Vec::with_capacity(n * j * 2);
    for (idx, p) in y.data().chunks(3).enumerate() {
        if !(p[2] > DEPTH_EPSILON) {
            return Err(Error::DegenerateDepth { frame: idx / j, joint: idx % j, depth: p[2] });
        }
        out.push(cam.fx * p[0] / p[2] + cam.cx);
        out.push(cam.fy * p[1] / p[2] + cam.cy);
    }
    Tensor::from_vec(vec![n, j, 2], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    pub hypotheses: Vec<Tensor>,
    pub seed_base: u64,
}

impl HypothesisSet {
    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}

fn initial_seed(seed: u64, h: usize) -> u64 {
    derive_seed(seed, &[0, h as u64])
}

fn step_seed(seed: u64, h: usize, m: usize) -> u64 {
    derive_seed(seed, &[1, h as u64, m as u64])
}

/// Seed used for character `c` by [`estimate_multi`].
pub fn character_seed(seed: u64, c: usize) -> u64 {
    derive_seed(seed, &[2, c as u64])
}

/// `H` unit-Gaussian `N×J×3` tensors; hypothesis `h` depends only on
/// `(seed, h)`.
pub fn sample_initial_hypotheses(h: usize, n: usize, j: usize, seed: u64) -> Result<HypothesisSet> {
    if h == 0 {
        return Err(Error::Range("at least one hypothesis is required".into()));
    }
    let hypotheses = (0..h).map(|i| NoiseSample::generate(&[n, j, 3], initial_seed(seed, i)).epsilon).collect();
    Ok(HypothesisSet { hypotheses, seed_base: seed })
}

/// Runs `M` denoiser calls per hypothesis. Iteration `m` (1-based) denoises
/// at `timestamp_for_iteration(m − 1)`, which is `T` for the first call, and
/// then steps to `timestamp_for_iteration(m)` unless it is the last
/// iteration. Returns the final clean estimates.
pub fn ddim_loop(
    den: &dyn PoseDenoiser,
    x: &Tensor,
    hyp: &HypothesisSet,
    iterations: usize,
    sched: &NoiseSchedule,
    deterministic: bool,
) -> Result<HypothesisSet> {
    if iterations == 0 {
        return Err(Error::Range("at least one DDIM iteration is required".into()));
    }
    let steps = sched.steps();
    let hypotheses = hyp
        .hypotheses
        .par_iter()
        .enumerate()
        .map(|(h, y0)| {
            let mut yt = y0.clone();
            let mut t = steps;
            for m in 1..=iterations {
                let y0_hat = den.denoise(&yt, x, t)?;
                check_pose(&y0_hat)?;
                if m == iterations {
                    return Ok(y0_hat);
                }
                let t_prev = timestamp_for_iteration(m, iterations, steps);
                if t_prev < t {
                    let noise = if deterministic {
                        NoiseSample::zeros(yt.shape())
                    } else {
                        NoiseSample::generate(yt.shape(), step_seed(hyp.seed_base, h, m))
                    };
                    yt = ddim_step(&yt, &y0_hat, t, t_prev, sched, &noise, deterministic)?;
                    t = t_prev;
                }
            }
            unreachable!("loop returns on its final iteration")
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HypothesisSet { hypotheses, seed_base: hyp.seed_base })
}

/// Temporal scope of the per-joint argmin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JpmaMode {
    /// One hypothesis per joint trajectory, by error summed over frames.
    #[default]
    PerSequence,
    /// One hypothesis per (frame, joint).
    PerFrame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JpmaResult {
    pub pose: Tensor,
    /// Winning hypothesis per joint (`J` entries) or per frame and joint
    /// (`N·J` entries, frame-major).
    pub index: Vec<usize>,
    pub mode: JpmaMode,
}

/// Euclidean reprojection error per `(frame, joint)` of one hypothesis,
/// frame-major.
pub fn reprojection_errors(y: &Tensor, x: &Tensor, cam: &CameraIntrinsics) -> Result<Vec<f64>> {
    let p = reproject(y, cam)?;
    if x.shape() != p.shape() {
        return shape_err(format!("keypoints {:?} vs projected {:?}", x.shape(), p.shape()));
    }
    Ok(p.data().chunks(2).zip(x.data().chunks(2)).map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1])).collect())
}

/// Per-joint selection of the hypothesis whose reprojection best matches
/// `x`. Hypotheses and `x` must share one camera frame. Ties go to the lowest
/// hypothesis index. Frames flagged `false` in `presence` are left out of the
/// per-sequence sums.
pub fn jpma_aggregate(
    hyps: &[Tensor],
    x: &Tensor,
    cam: &CameraIntrinsics,
    mode: JpmaMode,
    presence: Option<&[bool]>,
) -> Result<JpmaResult> {
    let Some(first) = hyps.first() else {
        return Err(Error::Range("at least one hypothesis is required".into()));
    };
    let (n, j) = check_pose(first)?;
    if hyps.iter().any(|h| h.shape() != first.shape()) {
        return shape_err("hypotheses differ in shape");
    }
    if presence.is_some_and(|p| p.len() != n) {
        return shape_err(format!("presence mask must have {n} entries"));
    }
    let errors = hyps.iter().map(|h| reprojection_errors(h, x, cam)).collect::<Result<Vec<_>>>()?;
    let argmin = |score: &dyn Fn(usize) -> f64| {
        let mut best = 0;
        for h in 1..hyps.len() {
            if score(h) < score(best) {
                best = h;
            }
        }
        best
    };
    let mut out = vec![0.0; n * j * 3];
    let index = match mode {
        JpmaMode::PerSequence => {
            let present = |f: usize| presence.is_none_or(|p| p[f]);
            let index: Vec<usize> = (0..j)
                .map(|jj| argmin(&|h| (0..n).filter(|&f| present(f)).map(|f| errors[h][f * j + jj]).sum()))
                .collect();
            for f in 0..n {
                for (jj, &h) in index.iter().enumerate() {
                    let k = (f * j + jj) * 3;
                    out[k..k + 3].copy_from_slice(&hyps[h].data()[k..k + 3]);
                }
            }
            index
        }
        JpmaMode::PerFrame => {
            let index: Vec<usize> = (0..n * j).map(|k| argmin(&|h| errors[h][k])).collect();
            for (k, &h) in index.iter().enumerate() {
                out[k * 3..k * 3 + 3].copy_from_slice(&hyps[h].data()[k * 3..k * 3 + 3]);
            }
            index
        }
    };
    Ok(JpmaResult { pose: Tensor::from_vec(vec![n, j, 3], out)?, index, mode })
}

/// One character's observation: the model-space keypoints fed to the
/// denoiser, and what is needed to place normalized predictions in the
/// camera frame for reprojection.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `N×J×2` normalized keypoints.
    pub keypoints: Tensor,
    /// `N×J×2` pixel keypoints.
    pub image_keypoints: Tensor,
    pub camera: CameraIntrinsics,
    /// `N×3` camera-frame root trajectory (mm).
    pub root: Tensor,
    /// Millimetres per normalized unit.
    pub scale: f64,
    pub presence: Option<Vec<bool>>,
}

impl Observation {
    pub fn frames(&self) -> usize {
        self.keypoints.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.keypoints.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.keypoints.shape();
        if k.len() != 3 || k[2] != 2 || self.image_keypoints.shape() != k {
            return shape_err(format!(
                "keypoints {:?} and image keypoints {:?} must both be N×J×2",
                k,
                self.image_keypoints.shape()
            ));
        }
        if self.root.shape() != [k[0], 3] {
            return shape_err(format!("root trajectory {:?} must be {}×3", self.root.shape(), k[0]));
        }
        if self.presence.as_ref().is_some_and(|p| p.len() != k[0]) {
            return shape_err("presence mask length differs from frame count");
        }
        self.camera.validate()
    }

    /// Normalized root-relative pose → camera frame in millimetres.
    pub fn to_camera(&self, y: &Tensor) -> Result<Tensor> {
        let (n, _) = check_pose(y)?;
        if n != self.frames() {
            return shape_err(format!("pose has {n} frames, observation {}", self.frames()));
        }
        let j = y.shape()[1];
        let mut out = y.scale(self.scale);
        for (k, p) in out.data_mut().chunks_mut(3).enumerate() {
            let r = &self.root.data()[(k / j) * 3..(k / j) * 3 + 3];
            for c in 0..3 {
                p[c] += r[c];
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub hypotheses: usize,
    pub iterations: usize,
    pub deterministic: bool,
    pub jpma: JpmaMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { hypotheses: 20, iterations: 10, deterministic: false, jpma: JpmaMode::PerSequence }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hypotheses == 0 || self.iterations == 0 {
            return Err(Error::Config("hypotheses and iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    /// `N×J×3` camera-frame pose in millimetres.
    pub pose: Tensor,
    /// The same pose in normalized root-relative units.
    pub normalized: Tensor,
    pub hypothesis_index: Vec<usize>,
}

/// Sample hypotheses, run the DDIM loop, aggregate with JPMA.
pub fn estimate_single(
    den: &dyn PoseDenoiser,
    obs: &Observation,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Estimate> {
    cfg.validate()?;
    obs.validate()?;
    let hyp = sample_initial_hypotheses(cfg.hypotheses, obs.frames(), obs.joints(), seed)?;
    let clean = ddim_loop(den, &obs.keypoints, &hyp, cfg.iterations, sched, cfg.deterministic)?;
    let camera_frame = clean.hypotheses.iter().map(|h| obs.to_camera(h)).collect::<Result<Vec<_>>>()?;
    let agg = jpma_aggregate(&camera_frame, &obs.image_keypoints, &obs.camera, cfg.jpma, obs.presence.as_deref())?;
    let mut normalized = vec![0.0; agg.pose.numel()];
    let j = obs.joints();
    for (k, out) in normalized.chunks_mut(3).enumerate() {
        let h = match cfg.jpma {
            JpmaMode::PerSequence => agg.index[k % j],
            JpmaMode::PerFrame => agg.index[k],
        };
        out.copy_from_slice(&clean.hypotheses[h].data()[k * 3..k * 3 + 3]);
    }
    Ok(Estimate {
        normalized: Tensor::from_vec(agg.pose.shape().to_vec(), normalized)?,
        pose: agg.pose,
        hypothesis_index: agg.index,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiEstimate {
    /// `C×N×J×3`
    pub poses: Tensor,
    pub hypothesis_index: Vec<Vec<usize>>,
}

/// Independent [`estimate_single`] per character with
/// [`character_seed`]`(seed, c)`, stacked over a leading character axis.
pub fn estimate_multi(
    dens: &[&dyn PoseDenoiser],
    obs: &[Observation],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<MultiEstimate> {
    if obs.is_empty() {
        return Err(Error::Range("at least one character is required".into()));
    }
    if dens.len() != obs.len() {
        return Err(Error::Config(format!("{} denoisers for {} characters", dens.len(), obs.len())));
    }
    let n = obs[0].frames();
    if let Some(c) = obs.iter().position(|o| o.frames() != n) {
        return shape_err(format!("character {c} has {} frames, character 0 has {n}", obs[c].frames()));
    }
    let results = (0..obs.len())
        .into_par_iter()
        .map(|c| estimate_single(dens[c], &obs[c], sched, cfg, character_seed(seed, c)))
        .collect::<Result<Vec<_>>>()?;
    let poses = Tensor::stack(&results.iter().map(|r| r.pose.clone()).collect::<Vec<_>>())?;
    Ok(MultiEstimate { poses, hypothesis_index: results.into_iter().map(|r| r.hypothesis_index).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, ScheduleKind};
    use crate::rng::gaussian_tensor;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Constant {
        value: Tensor,
        calls: AtomicUsize,
        ts: std::sync::Mutex<Vec<usize>>,
    }

    impl Constant {
        fn new(value: Tensor) -> Self {
            Self { value, calls: AtomicUsize::new(0), ts: Default::default() }
        }
    }

    impl PoseDenoiser for Constant {
        fn denoise(&self, _yt: &Tensor, _x: &Tensor, t: usize) -> Result<Tensor> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.ts.lock().unwrap().push(t);
            Ok(self.value.clone())
        }
    }

    fn sched() -> NoiseSchedule {
        build_schedule(1000, ScheduleKind::Cosine, 1e-4, 0.999).unwrap()
    }

    #[test]
    fn reproject_examples() {
        let unit = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let p = reproject(&Tensor::from_vec(vec![1, 1, 3], vec![0.0, 0.0, 1.0]).unwrap(), &unit).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0]);
        let cam = CameraIntrinsics::new(2.0, 2.0, 0.0, 0.0).unwrap();
        let y = Tensor::from_vec(vec![1, 1, 3], vec![1.0, 2.0, 2.0]).unwrap();
        assert_eq!(reproject(&y, &cam).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(reproject(&y.scale(2.0), &cam).unwrap(), reproject(&y, &cam).unwrap());
        let bad = Tensor::from_vec(vec![2, 2, 3], vec![0., 0., 1., 0., 0., 1., 0., 0., 1., 0., 0., 0.]).unwrap();
        assert!(matches!(reproject(&bad, &cam), Err(Error::DegenerateDepth { frame: 1, joint: 1, .. })));
    }

    #[test]
    fn initial_hypotheses_are_reproducible() {
        let a = sample_initial_hypotheses(3, 4, 5, 9).unwrap();
        assert_eq!(a, sample_initial_hypotheses(3, 4, 5, 9).unwrap());
        assert_eq!(sample_initial_hypotheses(1, 4, 5, 9).unwrap().hypotheses[0], a.hypotheses[0]);
        assert!(sample_initial_hypotheses(0, 4, 5, 9).is_err());
    }

    #[test]
    fn initial_hypothesis_variance_is_unit() {
        let set = sample_initial_hypotheses(10_000, 1, 1, 3).unwrap();
        for c in 0..3 {
            let xs: Vec<f64> = set.hypotheses.iter().map(|h| h.data()[c]).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            // standard error of the sample variance of a unit Gaussian
            assert!((var - 1.0).abs() < 3.0 * (2.0 / (n - 1.0)).sqrt(), "coordinate {c}: {var}");
        }
    }

    #[test]
    fn single_iteration_is_one_call_at_t_max() {
        let target = gaussian_tensor(&[2, 3, 3], 1);
        let den = Constant::new(target.clone());
        let hyp = sample_initial_hypotheses(1, 2, 3, 0).unwrap();
        let out = ddim_loop(&den, &Tensor::zeros(&[2, 3, 2]), &hyp, 1, &sched(), false).unwrap();
        assert_eq!(den.calls.load(Ordering::SeqCst), 1);
        assert_eq!(*den.ts.lock().unwrap(), vec![1000]);
        assert_eq!(out.hypotheses[0], target);
    }

    #[test]
    fn constant_oracle_is_fixed_point_and_call_count() {
        let target = gaussian_tensor(&[2, 3, 3], 1);
        let den = Constant::new(target.clone());
        let hyp = sample_initial_hypotheses(20, 2, 3, 0).unwrap();
        let out = ddim_loop(&den, &Tensor::zeros(&[2, 3, 2]), &hyp, 10, &sched(), false).unwrap();
        assert_eq!(den.calls.load(Ordering::SeqCst), 200);
        assert!(out.hypotheses.iter().all(|h| *h == target));
        let mut ts = den.ts.lock().unwrap().clone();
        ts.sort_unstable();
        ts.dedup();
        assert_eq!(ts, vec![100, 200, 300, 400, 500, 600, 700, 800, 900, 1000]);
    }

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 500.0, 500.0).unwrap()
    }

    #[test]
    fn jpma_mixes_winning_joints() {
        // two joints, one frame; hypothesis 0 exact on joint 0, hypothesis 1 exact on joint 1
        let truth = Tensor::from_vec(vec![1, 2, 3], vec![0.0, 0.0, 5.0, 1.0, 1.0, 5.0]).unwrap();
        let x = reproject(&truth, &cam()).unwrap();
        let h0 = Tensor::from_vec(vec![1, 2, 3], vec![0.0, 0.0, 5.0, 2.0, 1.0, 5.0]).unwrap();
        let h1 = Tensor::from_vec(vec![1, 2, 3], vec![0.5, 0.0, 5.0, 1.0, 1.0, 5.0]).unwrap();
        let r = jpma_aggregate(&[h0, h1], &x, &cam(), JpmaMode::PerSequence, None).unwrap();
        assert_eq!(r.index, vec![0, 1]);
        assert_eq!(r.pose, truth);
    }

    #[test]
    fn jpma_singleton_and_ties() {
        let h = Tensor::from_vec(vec![1, 2, 3], vec![0.1, 0.0, 5.0, 1.0, 1.0, 4.0]).unwrap();
        let x = Tensor::zeros(&[1, 2, 2]);
        let r = jpma_aggregate(std::slice::from_ref(&h), &x, &cam(), JpmaMode::PerSequence, None).unwrap();
        assert_eq!(r.pose, h);
        let r = jpma_aggregate(&[h.clone(), h.clone(), h.clone()], &x, &cam(), JpmaMode::PerFrame, None).unwrap();
        assert_eq!(r.index, vec![0, 0]);
        assert_eq!(r.pose, h);
    }

    #[test]
    fn jpma_ignores_absent_frames() {
        // hypothesis 1 is better on frame 0 but far worse on the absent frame 1
        let x = Tensor::from_vec(vec![2, 1, 2], vec![500.0, 500.0, 0.0, 0.0]).unwrap();
        let h0 = Tensor::from_vec(vec![2, 1, 3], vec![0.01, 0.0, 1.0, -0.5, -0.5, 1.0]).unwrap();
        let h1 = Tensor::from_vec(vec![2, 1, 3], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = jpma_aggregate(&[h0.clone(), h1.clone()], &x, &cam(), JpmaMode::PerSequence, None).unwrap();
        assert_eq!(r.index, vec![0]);
        let r = jpma_aggregate(&[h0, h1], &x, &cam(), JpmaMode::PerSequence, Some(&[true, false])).unwrap();
        assert_eq!(r.index, vec![1]);
    }

    fn observation(seed: u64, n: usize, j: usize) -> Observation {
        let mut root = gaussian_tensor(&[n, 3], seed).scale(100.0);
        for r in root.data_mut().chunks_mut(3) {
            r[2] += 5000.0;
        }
        Observation {
            keypoints: gaussian_tensor(&[n, j, 2], seed + 1),
            image_keypoints: gaussian_tensor(&[n, j, 2], seed + 2).scale(50.0).map(|v| v + 500.0),
            camera: cam(),
            root,
            scale: 1000.0,
            presence: None,
        }
    }

    /// Denoiser whose output depends on its inputs, so seeds matter.
    struct Mixer;

    impl PoseDenoiser for Mixer {
        fn denoise(&self, yt: &Tensor, x: &Tensor, t: usize) -> Result<Tensor> {
            let (n, j) = (yt.shape()[0], yt.shape()[1]);
            let mut out = yt.scale(0.3);
            for k in 0..n * j {
                out.data_mut()[k * 3] += x.data()[k * 2] * 0.1 + t as f64 * 1e-4;
                out.data_mut()[k * 3 + 1] += x.data()[k * 2 + 1] * 0.1;
            }
            Ok(out)
        }
    }

    #[test]
    fn estimate_is_deterministic_and_dominant() {
        let obs = observation(4, 3, 4);
        let cfg = SamplerConfig { hypotheses: 5, iterations: 3, ..Default::default() };
        let a = estimate_single(&Mixer, &obs, &sched(), &cfg, 17).unwrap();
        let b = estimate_single(&Mixer, &obs, &sched(), &cfg, 17).unwrap();
        assert_eq!(a.pose.bits(), b.pose.bits());
        assert_eq!(a.pose, obs.to_camera(&a.normalized).unwrap());

        let hyp = sample_initial_hypotheses(5, 3, 4, 17).unwrap();
        let clean = ddim_loop(&Mixer, &obs.keypoints, &hyp, 3, &sched(), false).unwrap();
        let agg_err = reprojection_errors(&a.pose, &obs.image_keypoints, &obs.camera).unwrap();
        for h in &clean.hypotheses {
            let e = reprojection_errors(&obs.to_camera(h).unwrap(), &obs.image_keypoints, &obs.camera).unwrap();
            for jj in 0..4 {
                let sum = |v: &[f64]| (0..3).map(|f| v[f * 4 + jj]).sum::<f64>();
                assert!(sum(&agg_err) <= sum(&e) + 1e-9);
            }
        }
    }

    #[test]
    fn multi_equals_stacked_singles() {
        let obs: Vec<Observation> = (0..3).map(|c| observation(10 * c as u64, 4, 5)).collect();
        let cfg = SamplerConfig { hypotheses: 3, iterations: 2, ..Default::default() };
        let dens: Vec<&dyn PoseDenoiser> = vec![&Mixer; 3];
        let multi = estimate_multi(&dens, &obs, &sched(), &cfg, 99).unwrap();
        assert_eq!(multi.poses.shape(), &[3, 4, 5, 3]);
        for (c, o) in obs.iter().enumerate() {
            let single = estimate_single(&Mixer, o, &sched(), &cfg, character_seed(99, c)).unwrap();
            assert_eq!(multi.poses.index0(c).bits(), single.pose.bits());
        }
        let mut short = obs.clone();
        short[1] = observation(5, 3, 5);
        assert!(matches!(estimate_multi(&dens, &short, &sched(), &cfg, 99), Err(Error::Shape(_))));
    }
}
