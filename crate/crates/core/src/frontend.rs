//! Per-robot keyframing pipeline: pose estimation by reprojection-error
//! minimization, dense cloud construction, statistical outlier removal, and
//! keyframe packaging.

use crate::geometry::{
    back_project, project, skew, CameraIntrinsics, PixelCoord, Point3, SE3Pose, Twist6,
};
use crate::simworld::{DepthImage, FeatureObservation};
use nalgebra::{DMatrix, DVector, Matrix2x6, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("underconstrained pose estimate: {0} usable observations (need >= 6)")]
    Underconstrained(usize),
    #[error("degenerate initialization: all landmark points behind the camera")]
    DegenerateInit,
}

/// Point cloud with optional per-point source pixels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub source_pixels: Option<Vec<PixelCoord>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Point3>) -> Self {
        Self { points, source_pixels: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecLabel {
    LosslessRgb,
    LosslessDepth,
}

/// Modeled compressed-image payload (size accounting only, no real codec).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayloadDescriptor {
    pub codec: CodecLabel,
    pub uncompressed_bytes: u64,
    pub compressed_bytes: u64,
}

/// Compression-size model standing in for PNG/ZSTD.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CodecModel {
    pub rgb_ratio: f64,
    pub depth_ratio: f64,
    pub rgb_bytes_per_pixel: u64,
    pub depth_bytes_per_pixel: u64,
}

impl Default for CodecModel {
    fn default() -> Self {
        Self {
            rgb_ratio: 0.5,
            depth_ratio: 0.35,
            rgb_bytes_per_pixel: 3,
            depth_bytes_per_pixel: 2,
        }
    }
}

impl CodecModel {
    pub fn rgb_payload(&self, width: u32, height: u32) -> PayloadDescriptor {
        let raw = width as u64 * height as u64 * self.rgb_bytes_per_pixel;
        PayloadDescriptor {
            codec: CodecLabel::LosslessRgb,
            uncompressed_bytes: raw,
            compressed_bytes: ((raw as f64 * self.rgb_ratio).round() as u64).max(1),
        }
    }

    pub fn depth_payload(&self, width: u32, height: u32) -> PayloadDescriptor {
        let raw = width as u64 * height as u64 * self.depth_bytes_per_pixel;
        PayloadDescriptor {
            codec: CodecLabel::LosslessDepth,
            uncompressed_bytes: raw,
            compressed_bytes: ((raw as f64 * self.depth_ratio).round() as u64).max(1),
        }
    }
}

/// Keyframe record streamed to the backend.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub robot_id: u32,
    pub keyframe_id: u64,
    pub timestamp: f64,
    /// Frontend pose estimate at creation (camera-to-world).
    pub pose: SE3Pose,
    pub observations: Vec<FeatureObservation>,
    pub rgb_payload: PayloadDescriptor,
    pub depth_payload: PayloadDescriptor,
    /// Cleaned dense cloud in the camera frame.
    pub cloud: PointCloud,
}

impl Keyframe {
    pub fn key(&self) -> (u32, u64) {
        (self.robot_id, self.keyframe_id)
    }

    pub fn payload_bits(&self) -> u64 {
        (self.rgb_payload.compressed_bytes + self.depth_payload.compressed_bytes) * 8
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KeyframePolicy {
    pub min_translation: f64,
    pub min_rotation: f64,
    pub min_tracked_fraction: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            min_translation: 0.25,
            min_rotation: 0.26,
            min_tracked_fraction: 0.5,
        }
    }
}

/// Stacked reprojection residuals and their analytic Jacobian with respect to
/// a right-multiplicative increment on the camera pose. Observations whose
/// landmark is unknown or behind the camera are skipped.
pub fn reprojection_linearize(
    pose: &SE3Pose,
    observations: &[FeatureObservation],
    landmarks: &HashMap<u64, Point3>,
    k: &CameraIntrinsics,
) -> (DVector<f64>, DMatrix<f64>, usize) {
    let world_to_cam = pose.inverse();
    let mut rows = Vec::new();
    for obs in observations {
        let Some(x) = landmarks.get(&obs.landmark_id) else {
            continue;
        };
        let y = world_to_cam.transform_point(x);
        if y.z <= 0.0 {
            continue;
        }
        let reproj = PixelCoord::new(k.fx * y.x / y.z + k.cx, k.fy * y.y / y.z + k.cy);
        let z2 = y.z * y.z;
        let j_pi = nalgebra::Matrix2x3::new(
            k.fx / y.z,
            0.0,
            -k.fx * y.x / z2,
            0.0,
            k.fy / y.z,
            -k.fy * y.y / z2,
        );
        // camera-frame point under P * exp(delta): y(delta) = exp(-delta) y
        let mut dy = nalgebra::Matrix3x6::zeros();
        dy.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&y.coords));
        dy.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-nalgebra::Matrix3::identity()));
        let jac: Matrix2x6<f64> = -j_pi * dy;
        rows.push((
            [obs.pixel.u - reproj.u, obs.pixel.v - reproj.v],
            jac,
        ));
    }
    let n = rows.len();
    let mut r = DVector::zeros(2 * n);
    let mut j = DMatrix::zeros(2 * n, 6);
    for (i, (res, jac)) in rows.iter().enumerate() {
        r[2 * i] = res[0];
        r[2 * i + 1] = res[1];
        j.view_mut((2 * i, 0), (2, 6)).copy_from(jac);
    }
    (r, j, n)
}

fn reprojection_cost(
    pose: &SE3Pose,
    observations: &[FeatureObservation],
    landmarks: &HashMap<u64, Point3>,
    k: &CameraIntrinsics,
) -> Option<f64> {
    let world_to_cam = pose.inverse();
    let mut cost = 0.0;
    for obs in observations {
        let Some(x) = landmarks.get(&obs.landmark_id) else {
            continue;
        };
        match project(&world_to_cam, x, k) {
            Ok(reproj) => cost += reproj.distance(&obs.pixel).powi(2),
            // a step that pushes points behind the camera is never accepted
            Err(_) => return None,
        }
    }
    Some(cost)
}

/// Estimates the camera pose (camera-to-world) minimizing the squared
/// reprojection error of `observations` against known world `landmarks`.
/// Damped Gauss-Newton on the 6-dof tangent space, warm-started at `init`.
pub fn estimate_pose(
    observations: &[FeatureObservation],
    landmarks: &HashMap<u64, Point3>,
    k: &CameraIntrinsics,
    init: &SE3Pose,
) -> Result<(SE3Pose, f64), FrontendError> {
    let known: Vec<FeatureObservation> = observations
        .iter()
        .filter(|o| landmarks.contains_key(&o.landmark_id))
        .copied()
        .collect();
    if known.len() < 6 {
        return Err(FrontendError::Underconstrained(known.len()));
    }
    let world_to_cam = init.inverse();
    let in_front = known
        .iter()
        .filter(|o| world_to_cam.transform_point(&landmarks[&o.landmark_id]).z > 0.0)
        .count();
    if in_front == 0 {
        return Err(FrontendError::DegenerateInit);
    }

    let mut pose = *init;
    let mut cost = reprojection_cost(&pose, &known, landmarks, k).unwrap_or(f64::INFINITY);
    let mut lambda = 1e-4;
    for _ in 0..100 {
        let (r, j, n) = reprojection_linearize(&pose, &known, landmarks, k);
        if n < 6 {
            break;
        }
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;
        let damped = &jtj + DMatrix::identity(6, 6) * lambda;
        let Some(chol) = damped.cholesky() else {
            lambda *= 10.0;
            continue;
        };
        let step = -chol.solve(&jtr);
        let delta = Twist6::from_iterator(step.iter().copied());
        let candidate = pose.compose(&SE3Pose::exp(&delta));
        match reprojection_cost(&candidate, &known, landmarks, k) {
            Some(c) if c <= cost => {
                pose = candidate;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                if delta.norm() < 1e-10 {
                    break;
                }
            }
            _ => {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break;
                }
            }
        }
    }
    Ok((pose, cost))
}

/// Back-projects every non-sentinel pixel on the stride grid, row-major.
pub fn dense_cloud(depth: &DepthImage, k: &CameraIntrinsics, stride: u32) -> PointCloud {
    assert!(stride >= 1, "stride must be >= 1");
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    let mut v = 0;
    while v < depth.height {
        let mut u = 0;
        while u < depth.width {
            let d = depth.at(u, v);
            if d > 0.0 {
                let pix = PixelCoord::new(u as f64, v as f64);
                points.push(back_project(&pix, d, k).expect("positive depth"));
                pixels.push(pix);
            }
            u += stride;
        }
        v += stride;
    }
    PointCloud { points, source_pixels: Some(pixels) }
}

/// Statistical outlier removal: keeps points within `lambda` deviations of
/// their k-nearest-neighbor centroid. The deviation scale is the RMS distance
/// of the neighbors to that centroid. Decisions are made against the input
/// cloud; relative order is preserved.
pub fn remove_outliers(cloud: &PointCloud, k_neighbors: usize, lambda: f64) -> PointCloud {
    assert!(k_neighbors >= 1 && lambda > 0.0);
    let n = cloud.points.len();
    if n < k_neighbors + 1 {
        return cloud.clone();
    }
    let keep: Vec<bool> = (0..n)
        .map(|i| {
            let x = &cloud.points[i];
            let mut dists: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| ((cloud.points[j] - x).norm_squared(), j))
                .collect();
            dists.select_nth_unstable_by(k_neighbors - 1, |a, b| a.0.partial_cmp(&b.0).unwrap());
            let neighbors = &dists[..k_neighbors];
            let mut centroid = Vector3::zeros();
            for (_, j) in neighbors {
                centroid += cloud.points[*j].coords;
            }
            centroid /= k_neighbors as f64;
            let sigma_sq: f64 = neighbors
                .iter()
                .map(|(_, j)| (cloud.points[*j].coords - centroid).norm_squared())
                .sum::<f64>()
                / k_neighbors as f64;
            (x.coords - centroid).norm_squared() <= lambda * lambda * sigma_sq
        })
        .collect();
    let points: Vec<Point3> = cloud
        .points
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(p, _)| *p)
        .collect();
    let source_pixels = cloud.source_pixels.as_ref().map(|px| {
        px.iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(p, _)| *p)
            .collect()
    });
    PointCloud { points, source_pixels }
}

/// Keyframe decision: significant motion since the last keyframe or tracking
/// degradation.
pub fn should_create_keyframe(
    prev: &SE3Pose,
    cur: &SE3Pose,
    tracked_fraction: f64,
    policy: &KeyframePolicy,
) -> bool {
    let (angle, trans) = prev.delta_norms(cur);
    trans >= policy.min_translation
        || angle >= policy.min_rotation
        || tracked_fraction < policy.min_tracked_fraction
}

/// Pose-tracking source for the frontend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackingMode {
    /// Reprojection-error minimization against the local landmark table.
    #[default]
    Visual,
    /// Dead reckoning from the odometry increments.
    Odometry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub policy: KeyframePolicy,
    pub codec: CodecModel,
    pub cloud_stride: u32,
    pub outlier_k: usize,
    pub outlier_lambda: f64,
    pub tracking: TrackingMode,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            policy: KeyframePolicy::default(),
            codec: CodecModel::default(),
            cloud_stride: 1,
            outlier_k: 20,
            outlier_lambda: 2.0,
            tracking: TrackingMode::Visual,
        }
    }
}

/// One robot's frontend. Consumes per-frame sensor data in order and emits
/// keyframes. The local landmark table is bootstrapped by back-projecting the
/// first observation of each landmark at the then-current pose estimate.
pub struct RobotFrontend {
    pub robot_id: u32,
    k: CameraIntrinsics,
    config: FrontendConfig,
    pose: SE3Pose,
    last_keyframe_pose: Option<SE3Pose>,
    landmarks: HashMap<u64, Point3>,
    next_keyframe_id: u64,
}

impl RobotFrontend {
    pub fn new(robot_id: u32, k: CameraIntrinsics, initial_pose: SE3Pose, config: FrontendConfig) -> Self {
        Self {
            robot_id,
            k,
            config,
            pose: initial_pose,
            last_keyframe_pose: None,
            landmarks: HashMap::new(),
            next_keyframe_id: 0,
        }
    }

    pub fn pose(&self) -> &SE3Pose {
        &self.pose
    }

    /// Processes one frame. `odometry` is the relative motion since the
    /// previous frame (`None` for the first frame).
    pub fn process_frame(
        &mut self,
        timestamp: f64,
        depth: &DepthImage,
        observations: &[FeatureObservation],
        odometry: Option<&SE3Pose>,
    ) -> Option<Keyframe> {
        let predicted = match odometry {
            Some(inc) => self.pose.compose(inc),
            None => self.pose,
        };
        let tracked = observations
            .iter()
            .filter(|o| self.landmarks.contains_key(&o.landmark_id))
            .count();
        let tracked_fraction = if observations.is_empty() {
            1.0
        } else {
            tracked as f64 / observations.len() as f64
        };

        self.pose = match self.config.tracking {
            TrackingMode::Odometry => predicted,
            TrackingMode::Visual => {
                match estimate_pose(observations, &self.landmarks, &self.k, &predicted) {
                    Ok((pose, _)) => pose,
                    Err(_) => predicted,
                }
            }
        };

        // bootstrap new landmarks at the current estimate
        for obs in observations {
            if !self.landmarks.contains_key(&obs.landmark_id) {
                if let Ok(p_cam) = back_project(&obs.pixel, obs.depth, &self.k) {
                    self.landmarks
                        .insert(obs.landmark_id, self.pose.transform_point(&p_cam));
                }
            }
        }

        let is_keyframe = match &self.last_keyframe_pose {
            None => true,
            Some(prev) => {
                should_create_keyframe(prev, &self.pose, tracked_fraction, &self.config.policy)
            }
        };
        if !is_keyframe {
            return None;
        }
        self.last_keyframe_pose = Some(self.pose);

        let raw = dense_cloud(depth, &self.k, self.config.cloud_stride);
        let clean = remove_outliers(&raw, self.config.outlier_k, self.config.outlier_lambda);
        Some(self.package_keyframe(timestamp, self.pose, observations.to_vec(), clean, depth))
    }

    fn package_keyframe(
        &mut self,
        timestamp: f64,
        pose: SE3Pose,
        observations: Vec<FeatureObservation>,
        cloud: PointCloud,
        depth: &DepthImage,
    ) -> Keyframe {
        let kf = Keyframe {
            robot_id: self.robot_id,
            keyframe_id: self.next_keyframe_id,
            timestamp,
            pose,
            observations,
            rgb_payload: self.config.codec.rgb_payload(depth.width, depth.height),
            depth_payload: self.config.codec.depth_payload(depth.width, depth.height),
            cloud,
        };
        self.next_keyframe_id += 1;
        kf
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn test_k() -> CameraIntrinsics {
        CameraIntrinsics::new(525.0, 525.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn random_pose(rng: &mut impl Rng, max_angle: f64, max_trans: f64) -> SE3Pose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        SE3Pose::new(
            nalgebra::UnitQuaternion::from_scaled_axis(axis * rng.gen_range(0.0..max_angle)),
            Vector3::new(
                rng.gen_range(-max_trans..max_trans),
                rng.gen_range(-max_trans..max_trans),
                rng.gen_range(-max_trans..max_trans),
            ),
        )
    }

    /// Landmarks in front of the camera at `pose`, plus their exact
    /// observations.
    fn synthetic_observations(
        rng: &mut impl Rng,
        pose: &SE3Pose,
        k: &CameraIntrinsics,
        count: usize,
        pixel_sigma: f64,
    ) -> (HashMap<u64, Point3>, Vec<FeatureObservation>) {
        let noise = Normal::new(0.0, pixel_sigma.max(0.0)).unwrap();
        let mut landmarks = HashMap::new();
        let mut observations = Vec::new();
        let world_to_cam = pose.inverse();
        let mut id = 0u64;
        while observations.len() < count {
            let p_cam = Point3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(2.0..4.0),
            );
            let world = pose.transform_point(&p_cam);
            let Ok(pix) = project(&world_to_cam, &world, k) else {
                continue;
            };
            if !k.contains(&pix) {
                continue;
            }
            landmarks.insert(id, world);
            observations.push(FeatureObservation {
                landmark_id: id,
                pixel: PixelCoord::new(pix.u + noise.sample(rng), pix.v + noise.sample(rng)),
                depth: p_cam.z,
                descriptor_seed: id,
            });
            id += 1;
        }
        (landmarks, observations)
    }

    #[test]
    fn estimate_pose_identity_fixed_point() {
        let k = test_k();
        let mut rng = StdRng::seed_from_u64(1);
        let gt = SE3Pose::identity();
        let (landmarks, obs) = synthetic_observations(&mut rng, &gt, &k, 30, 0.0);
        let (pose, cost) = estimate_pose(&obs, &landmarks, &k, &gt).unwrap();
        let (da, dt) = pose.delta_norms(&gt);
        assert!(da < 1e-9 && dt < 1e-9);
        assert!(cost < 1e-18);
    }

    #[test]
    fn estimate_pose_recovers_ground_truth() {
        let k = test_k();
        for seed in 0..100 {
            let mut rng = StdRng::seed_from_u64(seed);
            let gt = random_pose(&mut rng, 0.5, 1.0);
            let (landmarks, obs) = synthetic_observations(&mut rng, &gt, &k, 40, 0.0);
            let (pose, _) = estimate_pose(&obs, &landmarks, &k, &SE3Pose::identity()).unwrap();
            let (da, dt) = pose.delta_norms(&gt);
            assert!(da < 1e-6 && dt < 1e-6, "seed {seed}: da={da} dt={dt}");
        }
    }

    #[test]
    fn estimate_pose_noise_bound() {
        // sigma=0.5 px, 50 observations at depth ~3 m, fx=525
        let k = test_k();
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let mut rng = StdRng::seed_from_u64(1000 + seed);
            let gt = random_pose(&mut rng, 0.3, 0.5);
            let (landmarks, obs) = synthetic_observations(&mut rng, &gt, &k, 50, 0.5);
            let (pose, _) = estimate_pose(&obs, &landmarks, &k, &gt).unwrap();
            let (_, dt) = pose.delta_norms(&gt);
            worst = worst.max(dt);
        }
        assert!(worst < 0.05, "worst translation error {worst}");
    }

    #[test]
    fn estimate_pose_cost_never_exceeds_init() {
        let k = test_k();
        for seed in 0..20 {
            let mut rng = StdRng::seed_from_u64(2000 + seed);
            let gt = random_pose(&mut rng, 0.4, 0.8);
            let (landmarks, obs) = synthetic_observations(&mut rng, &gt, &k, 30, 1.0);
            let init = random_pose(&mut rng, 0.1, 0.2);
            let init_cost =
                super::reprojection_cost(&init, &obs, &landmarks, &k).unwrap_or(f64::INFINITY);
            let (_, cost) = estimate_pose(&obs, &landmarks, &k, &init).unwrap();
            assert!(cost <= init_cost + 1e-12);
        }
    }

    #[test]
    fn estimate_pose_error_paths() {
        let k = test_k();
        let mut rng = StdRng::seed_from_u64(3);
        let (landmarks, obs) = synthetic_observations(&mut rng, &SE3Pose::identity(), &k, 5, 0.0);
        assert!(matches!(
            estimate_pose(&obs, &landmarks, &k, &SE3Pose::identity()),
            Err(FrontendError::Underconstrained(5))
        ));

        let (landmarks, obs) =
            synthetic_observations(&mut rng, &SE3Pose::identity(), &k, 10, 0.0);
        // initialize looking the other way: every landmark behind the camera
        let flipped = SE3Pose::new(
            nalgebra::UnitQuaternion::from_scaled_axis(Vector3::y() * std::f64::consts::PI * 0.9999),
            Vector3::zeros(),
        );
        let r = estimate_pose(&obs, &landmarks, &k, &flipped);
        assert!(matches!(r, Err(FrontendError::DegenerateInit)));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let k = test_k();
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..100 {
            let pose = random_pose(&mut rng, 0.5, 1.0);
            let gt = random_pose(&mut rng, 0.3, 0.5);
            let (landmarks, obs) = synthetic_observations(&mut rng, &gt, &k, 10, 0.0);
            let (_, j, n) = reprojection_linearize(&pose, &obs, &landmarks, &k);
            if n < 6 {
                continue;
            }
            let h = 1e-6;
            for col in 0..6 {
                let mut dp = Twist6::zeros();
                dp[col] = h;
                let (rp, _, np) =
                    reprojection_linearize(&pose.compose(&SE3Pose::exp(&dp)), &obs, &landmarks, &k);
                dp[col] = -h;
                let (rm, _, nm) =
                    reprojection_linearize(&pose.compose(&SE3Pose::exp(&dp)), &obs, &landmarks, &k);
                if np != n || nm != n {
                    continue;
                }
                let fd = (rp - rm) / (2.0 * h);
                for row in 0..fd.len() {
                    let a = j[(row, col)];
                    let b = fd[row];
                    let denom = a.abs().max(b.abs()).max(1.0);
                    assert!(
                        (a - b).abs() / denom < 1e-4,
                        "J[{row},{col}] analytic {a} vs fd {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn dense_cloud_cases() {
        let k = CameraIntrinsics::new(40.0, 40.0, 16.0, 12.0, 32, 24).unwrap();
        let empty = DepthImage { width: 32, height: 24, depths: vec![0.0; 32 * 24] };
        assert!(dense_cloud(&empty, &k, 1).is_empty());

        let flat = DepthImage { width: 32, height: 24, depths: vec![2.0; 32 * 24] };
        let cloud = dense_cloud(&flat, &k, 1);
        assert_eq!(cloud.len(), 32 * 24);
        assert!(cloud.points.iter().all(|p| p.z == 2.0));

        // stride-2 count: ceil(w/2) * ceil(h/2) minus sentinels
        let mut depths = vec![2.0; 32 * 24];
        depths[0] = 0.0; // sentinel on the stride grid
        let img = DepthImage { width: 32, height: 24, depths };
        assert_eq!(dense_cloud(&img, &k, 2).len(), 16 * 12 - 1);
    }

    #[test]
    fn dense_cloud_reprojects_to_source_pixel() {
        let k = CameraIntrinsics::new(40.0, 40.0, 16.0, 12.0, 32, 24).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let depths: Vec<f64> = (0..32 * 24).map(|_| rng.gen_range(0.5..5.0)).collect();
        let img = DepthImage { width: 32, height: 24, depths };
        let cloud = dense_cloud(&img, &k, 1);
        let pixels = cloud.source_pixels.as_ref().unwrap();
        for (p, pix) in cloud.points.iter().zip(pixels) {
            let reproj = project(&SE3Pose::identity(), p, &k).unwrap();
            assert!(reproj.distance(pix) < 1e-9);
        }
    }

    fn brute_force_outlier_decisions(cloud: &PointCloud, k: usize, lambda: f64) -> Vec<bool> {
        let n = cloud.points.len();
        (0..n)
            .map(|i| {
                let x = &cloud.points[i];
                let mut dists: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| ((cloud.points[j] - x).norm(), j))
                    .collect();
                dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                let neigh = &dists[..k];
                let mut mu = Vector3::zeros();
                for (_, j) in neigh {
                    mu += cloud.points[*j].coords;
                }
                mu /= k as f64;
                let sigma = (neigh
                    .iter()
                    .map(|(_, j)| (cloud.points[*j].coords - mu).norm_squared())
                    .sum::<f64>()
                    / k as f64)
                    .sqrt();
                (x.coords - mu).norm() <= lambda * sigma
            })
            .collect()
    }

    #[test]
    fn remove_outliers_matches_brute_force_oracle() {
        let mut rng = StdRng::seed_from_u64(6);
        let mut points: Vec<Point3> = (0..100)
            .map(|_| {
                Point3::new(
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        points.push(Point3::new(50.0, 50.0, 50.0));
        let cloud = PointCloud::from_points(points);
        let decisions = brute_force_outlier_decisions(&cloud, 10, 3.0);
        let filtered = remove_outliers(&cloud, 10, 3.0);
        let expected: Vec<Point3> = cloud
            .points
            .iter()
            .zip(&decisions)
            .filter(|(_, k)| **k)
            .map(|(p, _)| *p)
            .collect();
        assert_eq!(filtered.points, expected);
        assert!(!decisions[100], "far point must be removed");
        assert!(decisions[..100].iter().filter(|d| **d).count() >= 95);
    }

    #[test]
    fn remove_outliers_degenerate_cases() {
        let three = PointCloud::from_points(vec![Point3::new(1.0, 2.0, 3.0); 3]);
        let out = remove_outliers(&three, 2, 1.0);
        assert_eq!(out.points, three.points);

        let tiny = PointCloud::from_points(vec![Point3::origin(); 2]);
        assert_eq!(remove_outliers(&tiny, 5, 1.0).points, tiny.points);

        let mut rng = StdRng::seed_from_u64(7);
        let cloud = PointCloud::from_points(
            (0..50)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0),
                    )
                })
                .collect(),
        );
        assert_eq!(remove_outliers(&cloud, 5, 1e12).points, cloud.points);
    }

    #[test]
    fn keyframe_policy_decisions() {
        let policy = KeyframePolicy {
            min_translation: 0.25,
            min_rotation: 0.26,
            min_tracked_fraction: 0.5,
        };
        let p = SE3Pose::identity();
        assert!(!should_create_keyframe(&p, &p, 1.0, &policy));
        let moved = SE3Pose::from_translation(Vector3::new(0.5, 0.0, 0.0));
        assert!(should_create_keyframe(&p, &moved, 1.0, &policy));
        assert!(should_create_keyframe(&p, &p, 0.3, &policy));
    }

    #[test]
    fn payload_size_model() {
        let codec = CodecModel::default();
        let depth = codec.depth_payload(640, 480);
        assert_eq!(depth.uncompressed_bytes, 640 * 480 * 2);
        assert_eq!(depth.compressed_bytes, 215_040);
    }

    #[test]
    fn keyframe_ids_increment() {
        let k = CameraIntrinsics::new(40.0, 40.0, 16.0, 12.0, 32, 24).unwrap();
        let mut fe = RobotFrontend::new(
            3,
            k,
            SE3Pose::identity(),
            FrontendConfig {
                policy: KeyframePolicy {
                    min_translation: 0.0,
                    min_rotation: 0.0,
                    min_tracked_fraction: 0.0,
                },
                outlier_k: 3,
                ..FrontendConfig::default()
            },
        );
        let img = DepthImage { width: 32, height: 24, depths: vec![2.0; 32 * 24] };
        let a = fe.process_frame(0.0, &img, &[], None).unwrap();
        let b = fe.process_frame(0.1, &img, &[], Some(&SE3Pose::identity())).unwrap();
        assert_eq!(a.keyframe_id + 1, b.keyframe_id);
        assert_eq!(a.robot_id, 3);
        assert_eq!(a.pose, SE3Pose::identity());
    }
}
