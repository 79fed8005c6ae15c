//! Synthetic ground-truth world and sensor simulation.
//!
//! Scenes are collections of boxes with analytic ray intersection, which
//! keeps the rendering oracle exact. All generators are pure functions of
//! their inputs and a seed.

use crate::geometry::{project, CameraIntrinsics, PixelCoord, Point3, SE3Pose, Twist6};
use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimWorldError {
    #[error("scene must contain at least one box")]
    EmptyScene,
    #[error("box extents must be strictly positive, got {0:?}")]
    BadExtents([f64; 3]),
    #[error("trajectory timestamps must be strictly increasing (index {0})")]
    NonIncreasingTimestamps(usize),
    #[error("trajectory needs at least 2 poses")]
    TooShortTrajectory,
    #[error("consecutive pose delta at index {0} exceeds pi/2 rotation")]
    ImplausibleMotion(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceLabel {
    Wall,
    Furniture,
    MetallicObject,
    Floor,
}

/// Axis-aligned box in its own frame, placed in the world by `pose`.
#[derive(Debug, Clone)]
pub struct SceneBox {
    pub pose: SE3Pose,
    /// Full edge lengths along the box-frame axes.
    pub extents: Vector3<f64>,
    pub label: SurfaceLabel,
    pub metallic: bool,
}

impl SceneBox {
    /// Nearest entry intersection of a ray with this box, as the ray
    /// parameter `t` (points are `origin + t * dir`). Returns `None` when the
    /// ray misses or starts past the box.
    pub fn intersect_ray(&self, origin: &Point3, dir: &Vector3<f64>) -> Option<f64> {
        let inv = self.pose.inverse();
        let o = inv.transform_point(origin);
        let d = inv.rotation() * dir;
        let half = self.extents * 0.5;
        let mut t_min = f64::NEG_INFINITY;
        let mut t_max = f64::INFINITY;
        for i in 0..3 {
            if d[i].abs() < 1e-12 {
                if o[i].abs() > half[i] {
                    return None;
                }
            } else {
                let t1 = (-half[i] - o[i]) / d[i];
                let t2 = (half[i] - o[i]) / d[i];
                t_min = t_min.max(t1.min(t2));
                t_max = t_max.min(t1.max(t2));
            }
        }
        if t_max < t_min || t_max < 0.0 {
            return None;
        }
        // entry point; a ray starting inside hits the exit face
        Some(if t_min >= 0.0 { t_min } else { t_max })
    }
}

/// Persistent surface landmark with a stable identity across frames.
#[derive(Debug, Clone, Copy)]
pub struct Landmark {
    pub id: u64,
    pub position: Point3,
}

#[derive(Debug, Clone)]
pub struct Scene {
    boxes: Vec<SceneBox>,
    landmarks: Vec<Landmark>,
}

impl Scene {
    /// Builds a scene and pre-samples `landmarks_per_box` surface landmarks
    /// on each box, fixed by `landmark_seed`.
    pub fn new(
        boxes: Vec<SceneBox>,
        landmarks_per_box: usize,
        landmark_seed: u64,
    ) -> Result<Self, SimWorldError> {
        if boxes.is_empty() {
            return Err(SimWorldError::EmptyScene);
        }
        for b in &boxes {
            if !(b.extents.x > 0.0 && b.extents.y > 0.0 && b.extents.z > 0.0) {
                return Err(SimWorldError::BadExtents([
                    b.extents.x,
                    b.extents.y,
                    b.extents.z,
                ]));
            }
        }
        let landmarks = sample_landmarks(&boxes, landmarks_per_box, landmark_seed);
        Ok(Self { boxes, landmarks })
    }

    pub fn boxes(&self) -> &[SceneBox] {
        &self.boxes
    }

    pub fn landmarks(&self) -> &[Landmark] {
        &self.landmarks
    }

    /// Nearest ray hit over all boxes: `(t, box index)`.
    pub fn raycast(&self, origin: &Point3, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, b) in self.boxes.iter().enumerate() {
            if let Some(t) = b.intersect_ray(origin, dir) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }
}

/// Samples landmarks uniformly (by face area) on box surfaces.
fn sample_landmarks(boxes: &[SceneBox], per_box: usize, seed: u64) -> Vec<Landmark> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut id = 0u64;
    for b in boxes {
        let h = b.extents * 0.5;
        let areas = [
            b.extents.y * b.extents.z, // +-x faces
            b.extents.x * b.extents.z, // +-y
            b.extents.x * b.extents.y, // +-z
        ];
        let total: f64 = 2.0 * (areas[0] + areas[1] + areas[2]);
        for _ in 0..per_box {
            let mut pick = rng.gen_range(0.0..total);
            let mut axis = 0;
            let mut sign = 1.0;
            'outer: for a in 0..3 {
                for s in [1.0, -1.0] {
                    if pick < areas[a] {
                        axis = a;
                        sign = s;
                        break 'outer;
                    }
                    pick -= areas[a];
                }
            }
            let mut local = Vector3::new(
                rng.gen_range(-h.x..=h.x),
                rng.gen_range(-h.y..=h.y),
                rng.gen_range(-h.z..=h.z),
            );
            local[axis] = sign * h[axis];
            out.push(Landmark {
                id,
                position: b.pose.transform_point(&Point3::from(local)),
            });
            id += 1;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    samples: Vec<(f64, SE3Pose)>,
    pub sigma_rot: f64,
    pub sigma_trans: f64,
}

impl Trajectory {
    pub fn new(
        samples: Vec<(f64, SE3Pose)>,
        sigma_rot: f64,
        sigma_trans: f64,
    ) -> Result<Self, SimWorldError> {
        if samples.len() < 2 {
            return Err(SimWorldError::TooShortTrajectory);
        }
        for i in 1..samples.len() {
            if samples[i].0 <= samples[i - 1].0 {
                return Err(SimWorldError::NonIncreasingTimestamps(i));
            }
            let (angle, _) = samples[i - 1].1.delta_norms(&samples[i].1);
            if angle >= std::f64::consts::FRAC_PI_2 {
                return Err(SimWorldError::ImplausibleMotion(i));
            }
        }
        Ok(Self { samples, sigma_rot, sigma_trans })
    }

    pub fn samples(&self) -> &[(f64, SE3Pose)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Row-major depth image; 0 marks no-return.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub depths: Vec<f64>,
}

impl DepthImage {
    pub fn at(&self, u: u32, v: u32) -> f64 {
        self.depths[(v * self.width + u) as usize]
    }

    pub fn valid_count(&self) -> usize {
        self.depths.iter().filter(|d| **d > 0.0).count()
    }
}

/// Noisy observation of a scene landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureObservation {
    pub landmark_id: u64,
    pub pixel: PixelCoord,
    pub depth: f64,
    pub descriptor_seed: u64,
}

/// Renders a depth image by per-pixel ray casting. Depth is the distance
/// along the optical axis (camera-frame z of the hit point).
pub fn render_depth(
    scene: &Scene,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    max_range: f64,
) -> DepthImage {
    let mut depths = vec![0.0; (k.width * k.height) as usize];
    let origin = pose.transform_point(&Point3::origin());
    for v in 0..k.height {
        for u in 0..k.width {
            // unnormalized direction with unit z: ray parameter == depth
            let dir_cam = Vector3::new(
                (u as f64 - k.cx) / k.fx,
                (v as f64 - k.cy) / k.fy,
                1.0,
            );
            let dir = pose.rotation() * dir_cam;
            if let Some((t, _)) = scene.raycast(&origin, &dir) {
                if t > 0.0 && t <= max_range {
                    depths[(v * k.width + u) as usize] = t;
                }
            }
        }
    }
    DepthImage { width: k.width, height: k.height, depths }
}

/// Camera-frame depth (z) of a world point seen from `pose`, or `None` when
/// it is behind the camera.
fn camera_depth(pose: &SE3Pose, point: &Point3) -> Option<f64> {
    let p = pose.inverse().transform_point(point);
    (p.z > 0.0).then_some(p.z)
}

/// Returns the landmarks visible from `pose`: inside the frustum and not
/// occluded by scene geometry. Pixel positions carry Gaussian noise of
/// `pixel_noise_sigma`; depths are ground truth.
pub fn observe_features(
    scene: &Scene,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    pixel_noise_sigma: f64,
    rng_seed: u64,
) -> Vec<FeatureObservation> {
    let mut rng = StdRng::seed_from_u64(rng_seed);
    let noise = Normal::new(0.0, pixel_noise_sigma.max(0.0)).unwrap();
    let origin = pose.transform_point(&Point3::origin());
    let world_to_cam = pose.inverse();
    let mut out = Vec::new();
    for lm in scene.landmarks() {
        let Some(depth) = camera_depth(pose, &lm.position) else {
            continue;
        };
        let Ok(pixel) = project(&world_to_cam, &lm.position, k) else {
            continue;
        };
        if !k.contains(&pixel) {
            continue;
        }
        // occlusion: nearest scene hit along the ray to the landmark must be
        // the landmark's own surface
        let dir = lm.position - origin;
        let range = dir.norm();
        if let Some((t, _)) = scene.raycast(&origin, &dir.unscale(range)) {
            if t < range - 1e-6 {
                continue;
            }
        }
        let noisy = PixelCoord::new(pixel.u + noise.sample(&mut rng), pixel.v + noise.sample(&mut rng));
        out.push(FeatureObservation {
            landmark_id: lm.id,
            pixel: noisy,
            depth,
            descriptor_seed: lm.id.wrapping_mul(0x9e3779b97f4a7c15),
        });
    }
    out
}

/// One radar measurement: range, azimuth, elevation, Doppler placeholder, SNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarMeasurement {
    pub range: f64,
    pub theta: f64,
    pub phi: f64,
    pub doppler: f64,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadarScan {
    pub timestamp: f64,
    pub measurements: Vec<RadarMeasurement>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RadarConfig {
    /// Angular grid step, radians (1.4 degrees by default).
    pub angular_resolution: f64,
    /// Azimuth half-extent of the scan, radians.
    pub azimuth_fov: f64,
    /// Elevation half-extent of the scan, radians.
    pub elevation_fov: f64,
    pub max_range: f64,
    pub metallic_snr_mean: f64,
    pub non_metallic_snr_mean: f64,
    pub snr_sigma: f64,
    pub rng_seed: u64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        Self {
            angular_resolution: 1.4_f64.to_radians(),
            azimuth_fov: 60.0_f64.to_radians(),
            elevation_fov: 20.0_f64.to_radians(),
            max_range: 15.0,
            metallic_snr_mean: 25.0,
            non_metallic_snr_mean: 5.0,
            snr_sigma: 2.0,
            rng_seed: 0,
        }
    }
}

/// Simulates one radar scan. Rays penetrate non-metallic boxes (emitting a
/// low-SNR surface echo at each entry face) and stop at the first metallic
/// surface, which returns high SNR.
pub fn simulate_radar(scene: &Scene, pose: &SE3Pose, config: &RadarConfig) -> RadarScan {
    let mut rng = StdRng::seed_from_u64(config.rng_seed);
    let metal = Normal::new(config.metallic_snr_mean, config.snr_sigma).unwrap();
    let other = Normal::new(config.non_metallic_snr_mean, config.snr_sigma).unwrap();
    let origin = pose.transform_point(&Point3::origin());
    let mut measurements = Vec::new();

    let steps = |fov: f64| (fov / config.angular_resolution).floor() as i64;
    for ei in -steps(config.elevation_fov)..=steps(config.elevation_fov) {
        for ai in -steps(config.azimuth_fov)..=steps(config.azimuth_fov) {
            let theta = ai as f64 * config.angular_resolution;
            let phi = ei as f64 * config.angular_resolution;
            // sensor-frame boresight is +x (matches the spherical direction
            // convention used by the global-transform stage)
            let dir_local = Vector3::new(
                theta.cos() * phi.cos(),
                theta.sin() * phi.cos(),
                phi.sin(),
            );
            let dir = pose.rotation() * dir_local;

            // collect entry hits for every box, sorted by range
            let mut hits: Vec<(f64, bool)> = scene
                .boxes()
                .iter()
                .filter_map(|b| {
                    b.intersect_ray(&origin, &dir)
                        .filter(|t| *t > 1e-9 && *t <= config.max_range)
                        .map(|t| (t, b.metallic))
                })
                .collect();
            hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for (t, metallic) in hits {
                let snr = if metallic {
                    metal.sample(&mut rng)
                } else {
                    other.sample(&mut rng)
                };
                measurements.push(RadarMeasurement {
                    range: t,
                    theta,
                    phi,
                    doppler: 0.0,
                    snr_db: snr,
                });
                if metallic {
                    break;
                }
            }
        }
    }
    RadarScan { timestamp: 0.0, measurements }
}

/// Ground-truth relative poses between consecutive trajectory samples,
/// perturbed by zero-mean Gaussian tangent-space noise.
pub fn noisy_odometry(traj: &Trajectory, rng_seed: u64) -> Vec<SE3Pose> {
    let mut rng = StdRng::seed_from_u64(rng_seed);
    let rot = Normal::new(0.0, traj.sigma_rot.max(0.0)).unwrap();
    let trans = Normal::new(0.0, traj.sigma_trans.max(0.0)).unwrap();
    let samples = traj.samples();
    let mut out = Vec::with_capacity(samples.len() - 1);
    for w in samples.windows(2) {
        let delta = w[0].1.inverse().compose(&w[1].1);
        let mut noise = Twist6::zeros();
        for i in 0..3 {
            noise[i] = rot.sample(&mut rng);
        }
        for i in 3..6 {
            noise[i] = trans.sample(&mut rng);
        }
        out.push(delta.compose(&SE3Pose::exp(&noise)));
    }
    out
}
