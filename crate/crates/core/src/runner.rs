//! Experiment orchestration: loads scenario configs, wires the simulated
//! world through the robot frontends, the shared uplink, the backend, and
//! the map/radar/trajectory metrics, and writes every artifact to disk.

use crate::backend::{Backend, BackendConfig, KeyframeKey};
use crate::eval::{ate_rmse, load_tum, write_tum, TrajectorySample};
use crate::frontend::{FrontendConfig, Keyframe, RobotFrontend, TrackingMode};
use crate::geometry::{CameraIntrinsics, Point3, SE3Pose};
use crate::netsim::{
    map_update_frequency, write_event_csv, NetworkProfile, NetworkSim, TransmissionEvent,
};
use crate::radar::{occlusion_trigger, run_btv, BtvConfig, RadarMap};
use crate::simworld::{
    noisy_odometry, observe_features, render_depth, simulate_radar, DepthImage, RadarConfig,
    RadarScan, Scene, SceneBox, SurfaceLabel, Trajectory,
};
use crate::volmap::{assemble_map, assemble_sparse_map, coverage, density, export_ply, Aabb};
use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("[config] {0}")]
    Config(String),
    #[error("[config] cannot read {0}: {1}")]
    ConfigIo(PathBuf, std::io::Error),
    #[error("[scene] {0}")]
    Scene(String),
    #[error("[trajectory] {0}")]
    Trajectory(String),
    #[error("[frontend] {0}")]
    Frontend(String),
    #[error("[network] {0}")]
    Network(String),
    #[error("[backend] {0}")]
    Backend(#[from] crate::backend::BackendError),
    #[error("[volmap] {0}")]
    Volmap(#[from] crate::volmap::VolmapError),
    #[error("[radar] {0}")]
    Radar(#[from] crate::radar::RadarError),
    #[error("[eval] {0}")]
    Eval(#[from] crate::eval::EvalError),
    #[error("[output] {0}")]
    Output(#[from] std::io::Error),
}

/// File-path convenience over the TUM reader/writer.
pub fn load_tum_file<P: AsRef<Path>>(path: P) -> Result<Vec<TrajectorySample>, RunnerError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| RunnerError::ConfigIo(path.to_path_buf(), e))?;
    Ok(load_tum(std::io::BufReader::new(file))?)
}

pub fn write_tum_file<P: AsRef<Path>>(
    samples: &[TrajectorySample],
    path: P,
) -> Result<(), RunnerError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tum(samples, &mut file)?;
    Ok(file.flush()?)
}

// ---------------------------------------------------------------------------
// scene file

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneBoxSpec {
    pub center: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
    pub extents: [f64; 3],
    pub label: SurfaceLabel,
    #[serde(default)]
    pub metallic: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    #[serde(default = "default_landmarks_per_box")]
    pub landmarks_per_box: usize,
    #[serde(default)]
    pub landmark_seed: u64,
    #[serde(rename = "box")]
    pub boxes: Vec<SceneBoxSpec>,
}

fn default_landmarks_per_box() -> usize {
    40
}

pub fn load_scene<P: AsRef<Path>>(path: P) -> Result<Scene, RunnerError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunnerError::ConfigIo(path.to_path_buf(), e))?;
    let file: SceneFile =
        toml::from_str(&text).map_err(|e| RunnerError::Scene(format!("{}: {e}", path.display())))?;
    scene_from_spec(&file)
}

pub fn scene_from_spec(file: &SceneFile) -> Result<Scene, RunnerError> {
    let boxes = file
        .boxes
        .iter()
        .map(|b| SceneBox {
            pose: SE3Pose::new(
                UnitQuaternion::from_euler_angles(b.rpy[0], b.rpy[1], b.rpy[2]),
                Vector3::new(b.center[0], b.center[1], b.center[2]),
            ),
            extents: Vector3::new(b.extents[0], b.extents[1], b.extents[2]),
            label: b.label,
            metallic: b.metallic,
        })
        .collect();
    Scene::new(boxes, file.landmarks_per_box, file.landmark_seed)
        .map_err(|e| RunnerError::Scene(e.to_string()))
}

// ---------------------------------------------------------------------------
// experiment config

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraSpec {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default = "default_max_range")]
    pub max_range: f64,
    #[serde(default = "default_pixel_noise")]
    pub pixel_noise_sigma: f64,
}

fn default_max_range() -> f64 {
    10.0
}

fn default_pixel_noise() -> f64 {
    0.3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotSpec {
    pub trajectory: PathBuf,
    #[serde(default)]
    pub sigma_rot: f64,
    #[serde(default)]
    pub sigma_trans: f64,
    #[serde(default)]
    pub tracking: TrackingMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontendSpec {
    #[serde(default = "default_min_translation")]
    pub min_translation: f64,
    #[serde(default = "default_min_rotation")]
    pub min_rotation: f64,
    #[serde(default = "default_min_tracked")]
    pub min_tracked_fraction: f64,
    #[serde(default = "default_stride")]
    pub cloud_stride: u32,
    #[serde(default = "default_outlier_k")]
    pub outlier_k: usize,
    #[serde(default = "default_outlier_lambda")]
    pub outlier_lambda: f64,
}

fn default_min_translation() -> f64 {
    0.25
}
fn default_min_rotation() -> f64 {
    0.26
}
fn default_min_tracked() -> f64 {
    0.5
}
fn default_stride() -> u32 {
    4
}
fn default_outlier_k() -> usize {
    20
}
fn default_outlier_lambda() -> f64 {
    2.0
}

impl Default for FrontendSpec {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default = "default_profile")]
    pub profile: String,
    /// Data volume per map update, megabits; drives the predicted
    /// update-frequency law reported alongside the simulated schedule.
    #[serde(default = "default_data_per_update")]
    pub data_per_update_mb: f64,
}

fn default_profile() -> String {
    "wifi-5ghz".into()
}
fn default_data_per_update() -> f64 {
    10.11
}

impl Default for NetworkSpec {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadarSpec {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub config: Option<RadarConfig>,
    #[serde(default)]
    pub btv: Option<BtvConfig>,
}

impl Default for RadarSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            config: None,
            btv: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub scene: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_voxel")]
    pub voxel_size: f64,
    #[serde(default = "default_out_dir")]
    pub output_dir: PathBuf,
    /// Run per-robot frontends on threads; semantics identical either way.
    #[serde(default = "default_true")]
    pub parallel: bool,
    pub camera: CameraSpec,
    #[serde(rename = "robot")]
    pub robots: Vec<RobotSpec>,
    #[serde(default)]
    pub frontend: FrontendSpec,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub backend: Option<BackendConfig>,
    #[serde(default)]
    pub radar: RadarSpec,
    /// Explored-region override; default is the trajectory bounding box
    /// inflated by the camera range.
    #[serde(default)]
    pub region_min: Option<[f64; 3]>,
    #[serde(default)]
    pub region_max: Option<[f64; 3]>,
}

fn default_voxel() -> f64 {
    0.05
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Parses a config file, resolving relative paths against its directory.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, RunnerError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunnerError::ConfigIo(path.to_path_buf(), e))?;
        let mut config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        if config.robots.is_empty() {
            return Err(RunnerError::Config(format!(
                "{}: at least one [[robot]] required",
                path.display()
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        config.scene = resolve(&config.scene);
        config.output_dir = resolve(&config.output_dir);
        for robot in &mut config.robots {
            robot.trajectory = resolve(&robot.trajectory);
        }
        Ok(config)
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, RunnerError> {
        CameraIntrinsics::new(
            self.camera.fx,
            self.camera.fy,
            self.camera.cx,
            self.camera.cy,
            self.camera.width,
            self.camera.height,
        )
        .map_err(|e| RunnerError::Config(e.to_string()))
    }

    fn frontend_config(&self, tracking: TrackingMode) -> FrontendConfig {
        let mut fc = FrontendConfig::default();
        fc.policy.min_translation = self.frontend.min_translation;
        fc.policy.min_rotation = self.frontend.min_rotation;
        fc.policy.min_tracked_fraction = self.frontend.min_tracked_fraction;
        fc.cloud_stride = self.frontend.cloud_stride;
        fc.outlier_k = self.frontend.outlier_k;
        fc.outlier_lambda = self.frontend.outlier_lambda;
        fc.tracking = tracking;
        fc
    }
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, Serialize)]
pub struct RobotReport {
    pub robot_id: u32,
    pub keyframes: usize,
    pub ate_frontend_m: f64,
    pub rmse_frontend_m: f64,
    pub ate_refined_m: f64,
    pub rmse_refined_m: f64,
    pub coverage_pct: f64,
    pub density_pts_m3: f64,
    pub sparse_coverage_pct: f64,
    pub sparse_density_pts_m3: f64,
    /// Achieved per-robot keyframe arrival rate over the simulated uplink.
    pub update_frequency_hz: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub robots: Vec<RobotReport>,
    /// Predicted per-robot frequency from the bandwidth-sharing law.
    pub predicted_update_frequency_hz: f64,
    pub radar_points: usize,
    pub loop_edges: usize,
    pub output_files: Vec<PathBuf>,
}

// ---------------------------------------------------------------------------
// per-robot simulation

struct RobotRun {
    keyframes: Vec<Keyframe>,
    /// Frontend (pre-optimization) pose at each keyframe.
    frontend_traj: Vec<TrajectorySample>,
    gt_traj: Vec<TrajectorySample>,
    /// Occlusion-triggered radar scans attached to keyframes.
    radar_scans: Vec<(KeyframeKey, DepthImage, RadarScan)>,
}

fn simulate_robot(
    robot_id: u32,
    spec: &RobotSpec,
    scene: &Scene,
    config: &ExperimentConfig,
    k: &CameraIntrinsics,
) -> Result<RobotRun, RunnerError> {
    let samples = load_tum_file(&spec.trajectory)?
        .into_iter()
        .map(|s| (s.timestamp, s.pose))
        .collect();
    let traj = Trajectory::new(samples, spec.sigma_rot, spec.sigma_trans)
        .map_err(|e| RunnerError::Trajectory(format!("{}: {e}", spec.trajectory.display())))?;
    let seed = config
        .seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(robot_id as u64);
    let deltas = noisy_odometry(&traj, seed);

    let radar_config = config.radar.config.clone().unwrap_or_default();
    let btv = config.radar.btv.clone().unwrap_or_default();
    let mut frontend = RobotFrontend::new(
        robot_id,
        *k,
        traj.samples()[0].1,
        config.frontend_config(spec.tracking),
    );

    let mut run = RobotRun {
        keyframes: Vec::new(),
        frontend_traj: Vec::new(),
        gt_traj: Vec::new(),
        radar_scans: Vec::new(),
    };
    for (i, (t, gt_pose)) in traj.samples().iter().enumerate() {
        let depth = render_depth(scene, gt_pose, k, config.camera.max_range);
        let obs = observe_features(
            scene,
            gt_pose,
            k,
            config.camera.pixel_noise_sigma,
            seed.wrapping_add(1 + i as u64),
        );
        let odom = if i == 0 { None } else { Some(&deltas[i - 1]) };
        run.gt_traj.push(TrajectorySample {
            timestamp: *t,
            pose: *gt_pose,
        });
        if let Some(kf) = frontend.process_frame(*t, &depth, &obs, odom) {
            run.frontend_traj.push(TrajectorySample {
                timestamp: *t,
                pose: kf.pose,
            });
            if config.radar.enabled
                && occlusion_trigger(&depth, btv.near_threshold, btv.near_fraction)
            {
                let scan_config = RadarConfig {
                    rng_seed: seed.wrapping_add(0x5bd1e995).wrapping_add(i as u64),
                    ..radar_config.clone()
                };
                let mut scan = simulate_radar(scene, gt_pose, &scan_config);
                scan.timestamp = *t;
                run.radar_scans.push((kf.key(), depth.clone(), scan));
            }
            run.keyframes.push(kf);
        }
    }
    if run.keyframes.is_empty() {
        return Err(RunnerError::Frontend(format!(
            "robot {robot_id} produced no keyframes"
        )));
    }
    Ok(run)
}

fn explored_region(config: &ExperimentConfig, runs: &[RobotRun]) -> Aabb {
    if let (Some(lo), Some(hi)) = (config.region_min, config.region_max) {
        return Aabb::new(
            Point3::new(lo[0], lo[1], lo[2]),
            Point3::new(hi[0], hi[1], hi[2]),
        );
    }
    let positions: Vec<Point3> = runs
        .iter()
        .flat_map(|r| r.gt_traj.iter())
        .map(|s| s.pose.transform_point(&Point3::origin()))
        .collect();
    Aabb::from_points(&positions, config.camera.max_range)
        .expect("non-empty trajectories")
}

fn achieved_frequency(events: &[TransmissionEvent], robot_id: u32) -> f64 {
    let arrivals: Vec<f64> = events
        .iter()
        .filter(|e| e.robot_id == robot_id)
        .map(|e| e.arrival_time)
        .collect();
    if arrivals.len() < 2 {
        return 0.0;
    }
    let span = arrivals.last().unwrap() - arrivals.first().unwrap();
    if span <= 0.0 {
        0.0
    } else {
        (arrivals.len() - 1) as f64 / span
    }
}

// ---------------------------------------------------------------------------
// orchestration

/// Runs the full pipeline for one scenario and writes every artifact into
/// the config's output directory. Deterministic per seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, RunnerError> {
    let scene = load_scene(&config.scene)?;
    let k = config.intrinsics()?;
    let profile = NetworkProfile::by_name(&config.network.profile).ok_or_else(|| {
        RunnerError::Network(format!("unknown profile '{}'", config.network.profile))
    })?;

    // frontends: independent per robot, so thread-parallel and sequential
    // runs produce identical streams
    let runs: Vec<RobotRun> = if config.parallel && config.robots.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = config
                .robots
                .iter()
                .enumerate()
                .map(|(r, spec)| {
                    let scene = &scene;
                    let k = &k;
                    scope.spawn(move || simulate_robot(r as u32, spec, scene, config, k))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("frontend thread panicked"))
                .collect::<Result<Vec<_>, _>>()
        })?
    } else {
        config
            .robots
            .iter()
            .enumerate()
            .map(|(r, spec)| simulate_robot(r as u32, spec, &scene, config, &k))
            .collect::<Result<Vec<_>, _>>()?
    };

    // shared uplink: merge all keyframe streams into one arrival order
    let mut sim = NetworkSim::new(profile.clone());
    for run in &runs {
        for kf in &run.keyframes {
            sim.enqueue_keyframe(kf, kf.timestamp);
        }
    }
    let events = sim.run(config.seed);

    // backend consumes in arrival order
    let backend_config = config.backend.clone().unwrap_or_default();
    let mut backend = Backend::new(backend_config, k);
    let mut by_key: HashMap<KeyframeKey, Keyframe> = runs
        .iter()
        .flat_map(|r| r.keyframes.iter())
        .map(|kf| (kf.key(), kf.clone()))
        .collect();
    let mut loop_edges = 0usize;
    for e in &events {
        let kf = by_key
            .remove(&(e.robot_id, e.keyframe_id))
            .expect("event for unknown keyframe");
        loop_edges += backend.process_keyframe(kf)?.loop_edges_added;
    }
    backend.optimize()?;
    let refined: HashMap<KeyframeKey, SE3Pose> = backend
        .graph
        .nodes
        .iter()
        .map(|(k, v)| (*k, *v))
        .collect();

    std::fs::create_dir_all(&config.output_dir)?;
    let mut outputs = Vec::new();
    let out = |name: String| config.output_dir.join(name);

    // radar: transform occlusion-gated scans with refined poses
    let btv = config.radar.btv.clone().unwrap_or_default();
    let mut radar_points: Vec<Point3> = Vec::new();
    for run in &runs {
        for (key, depth, scan) in &run.radar_scans {
            let pose = refined[key];
            if let Some(map) = run_btv(depth, scan, &pose, &btv) {
                radar_points.extend_from_slice(map.points());
            }
        }
    }
    if !radar_points.is_empty() {
        let path = out("radar.ply".into());
        export_ply(&radar_points, &path)?;
        outputs.push(path);
    }

    let region = explored_region(config, &runs);
    let mut metrics = String::from("scene,pipeline,coverage_pct,density_pts_m3\n");
    let mut ate_csv = String::from("sequence,method,ate_m,rmse_m\n");
    let mut reports = Vec::new();

    for (r, run) in runs.iter().enumerate() {
        let r = r as u32;
        let kf_refs: Vec<&Keyframe> = run.keyframes.iter().collect();
        let dense = assemble_map(&kf_refs, &refined, config.voxel_size)?;
        let sparse = assemble_sparse_map(&kf_refs, &refined, &k, config.voxel_size)?;
        let cov = coverage(&dense, &scene, &region, config.voxel_size)?;
        let den = density(&dense, &region)?;
        let scov = coverage(&sparse, &scene, &region, config.voxel_size)?;
        let sden = density(&sparse, &region)?;
        metrics += &format!("{},dense_r{},{:.6},{:.6}\n", config.name, r, cov, den);
        metrics += &format!("{},sparse_r{},{:.6},{:.6}\n", config.name, r, scov, sden);

        let ply = out(format!("map_r{r}.ply"));
        export_ply(&dense.points, &ply)?;
        outputs.push(ply);
        let ply = out(format!("sparse_r{r}.ply"));
        export_ply(&sparse.points, &ply)?;
        outputs.push(ply);

        let refined_traj: Vec<TrajectorySample> = backend
            .robot_trajectory(r)
            .into_iter()
            .map(|(timestamp, pose)| TrajectorySample { timestamp, pose })
            .collect();
        for (suffix, traj) in [
            ("frontend", &run.frontend_traj),
            ("refined", &refined_traj),
            ("gt", &run.gt_traj),
        ] {
            let path = out(format!("traj_r{r}_{suffix}.txt"));
            write_tum_file(traj, &path)?;
            outputs.push(path);
        }

        let (ate_f, rmse_f) = ate_rmse(&run.frontend_traj, &run.gt_traj, true, 0.02)?;
        let (ate_o, rmse_o) = ate_rmse(&refined_traj, &run.gt_traj, true, 0.02)?;
        ate_csv += &format!("{}_r{},frontend,{:.9},{:.9}\n", config.name, r, ate_f, rmse_f);
        ate_csv += &format!("{}_r{},refined,{:.9},{:.9}\n", config.name, r, ate_o, rmse_o);

        reports.push(RobotReport {
            robot_id: r,
            keyframes: run.keyframes.len(),
            ate_frontend_m: ate_f,
            rmse_frontend_m: rmse_f,
            ate_refined_m: ate_o,
            rmse_refined_m: rmse_o,
            coverage_pct: cov,
            density_pts_m3: den,
            sparse_coverage_pct: scov,
            sparse_density_pts_m3: sden,
            update_frequency_hz: achieved_frequency(&events, r),
        });
    }

    let path = out("metrics.csv".into());
    std::fs::write(&path, metrics)?;
    outputs.push(path);
    let path = out("ate.csv".into());
    std::fs::write(&path, ate_csv)?;
    outputs.push(path);
    let path = out("network_events.csv".into());
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    write_event_csv(&events, &mut file)?;
    file.flush()?;
    outputs.push(path);
    let path = out("pose_graph.txt".into());
    std::fs::write(&path, crate::backend::dump_pose_graph(&backend.graph)?)?;
    outputs.push(path);

    Ok(ExperimentReport {
        name: config.name.clone(),
        seed: config.seed,
        robots: reports,
        predicted_update_frequency_hz: map_update_frequency(
            profile.capacity_mbps / config.robots.len() as f64,
            config.network.data_per_update_mb,
        ),
        radar_points: radar_points.len(),
        loop_edges,
        output_files: outputs,
    })
}

/// Merged radar map across all robots for a finished run (test surface).
pub fn collect_radar_map(
    config: &ExperimentConfig,
) -> Result<Option<RadarMap>, RunnerError> {
    let report = run_experiment(config)?;
    if report.radar_points == 0 {
        return Ok(None);
    }
    let points = crate::volmap::load_ply(config.output_dir.join("radar.ply"))?;
    let cloud = crate::frontend::PointCloud::from_points(points);
    // already denoised by run_btv; infinite lambda keeps it intact
    Ok(Some(crate::radar::denoise(&cloud, 1, f64::INFINITY)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn write_room_scene(dir: &Path) -> PathBuf {
        let path = dir.join("scene.toml");
        std::fs::write(
            &path,
            r#"
landmarks_per_box = 80
landmark_seed = 7

[[box]]
center = [0.0, 0.0, 2.5]
extents = [4.0, 3.0, 0.1]
label = "wall"

[[box]]
center = [0.0, -1.7, 1.0]
extents = [4.0, 0.1, 3.0]
label = "wall"

[[box]]
center = [0.0, 1.7, 1.0]
extents = [4.0, 0.1, 3.0]
label = "wall"
"#,
        )
        .unwrap();
        path
    }

    fn write_circle_trajectory(dir: &Path, name: &str, n: usize, radius: f64) -> PathBuf {
        // camera orbits the origin at z=0 looking outward along +z toward
        // the far wall
        let path = dir.join(name);
        let samples: Vec<TrajectorySample> = (0..n)
            .map(|i| {
                let a = 0.4 * PI * (i as f64 / n as f64) - 0.2 * PI;
                TrajectorySample {
                    timestamp: i as f64 * 0.5,
                    pose: SE3Pose::new(
                        UnitQuaternion::from_euler_angles(0.0, a * 0.5, 0.0),
                        Vector3::new(
                            radius * a.sin(),
                            0.2 * (2.0 * a).sin(),
                            0.1 * (1.0 - a.cos()),
                        ),
                    ),
                }
            })
            .collect();
        write_tum_file(&samples, &path).unwrap();
        path
    }

    fn base_config(dir: &Path, robots: usize) -> ExperimentConfig {
        let scene = write_room_scene(dir);
        let robot_specs: Vec<RobotSpec> = (0..robots)
            .map(|r| RobotSpec {
                trajectory: write_circle_trajectory(dir, &format!("r{r}.txt"), 12, 1.0),
                sigma_rot: 0.0,
                sigma_trans: 0.0,
                tracking: TrackingMode::Visual,
            })
            .collect();
        ExperimentConfig {
            name: "test".into(),
            scene,
            seed: 1,
            voxel_size: 0.05,
            output_dir: dir.join("out"),
            parallel: false,
            camera: CameraSpec {
                width: 64,
                height: 48,
                fx: 48.0,
                fy: 48.0,
                cx: 31.5,
                cy: 23.5,
                max_range: 10.0,
                pixel_noise_sigma: 0.0,
            },
            robots: robot_specs,
            frontend: FrontendSpec {
                min_translation: 0.05,
                min_rotation: 0.05,
                cloud_stride: 4,
                ..FrontendSpec::default()
            },
            network: NetworkSpec::default(),
            backend: None,
            radar: RadarSpec::default(),
            region_min: None,
            region_max: None,
        }
    }

    #[test]
    fn noiseless_single_robot_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let config = base_config(dir.path(), 1);
        let report = run_experiment(&config).unwrap();
        assert_eq!(report.robots.len(), 1);
        let r = &report.robots[0];
        assert!(r.keyframes >= 2);
        assert!(r.ate_refined_m < 1e-6, "refined ATE {}", r.ate_refined_m);
        assert!(r.ate_frontend_m < 1e-6, "frontend ATE {}", r.ate_frontend_m);
        assert!(r.coverage_pct > 0.0);
        assert!(r.density_pts_m3 > 0.0);
        for path in &report.output_files {
            assert!(path.exists(), "missing output {}", path.display());
        }
    }

    #[test]
    fn determinism_byte_identical_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config(dir.path(), 2);
        config.seed = 7;
        run_experiment(&config).unwrap();
        let metrics1 = std::fs::read(config.output_dir.join("metrics.csv")).unwrap();
        let ply1 = std::fs::read(config.output_dir.join("map_r0.ply")).unwrap();
        let net1 = std::fs::read(config.output_dir.join("network_events.csv")).unwrap();

        // second run: parallel frontends, fresh output dir
        config.parallel = true;
        config.output_dir = dir.path().join("out2");
        run_experiment(&config).unwrap();
        assert_eq!(metrics1, std::fs::read(config.output_dir.join("metrics.csv")).unwrap());
        assert_eq!(ply1, std::fs::read(config.output_dir.join("map_r0.ply")).unwrap());
        assert_eq!(net1, std::fs::read(config.output_dir.join("network_events.csv")).unwrap());
    }

    #[test]
    fn config_errors_are_staged() {
        let err = ExperimentConfig::load("/nonexistent/run.toml").unwrap_err();
        assert!(err.to_string().starts_with("[config]"));
        assert!(err.to_string().contains("/nonexistent/run.toml"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "name = 3").unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert!(err.to_string().starts_with("[config]"));
    }

    #[test]
    fn config_round_trip_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let scene = write_room_scene(dir.path());
        write_circle_trajectory(dir.path(), "r0.txt", 5, 1.0);
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            format!(
                r#"
name = "mini"
scene = "{}"
seed = 3

[camera]
width = 32
height = 24
fx = 24.0
fy = 24.0
cx = 15.5
cy = 11.5

[[robot]]
trajectory = "r0.txt"
"#,
                scene.file_name().unwrap().to_str().unwrap()
            ),
        )
        .unwrap();
        let config = ExperimentConfig::load(&path).unwrap();
        assert_eq!(config.name, "mini");
        assert_eq!(config.voxel_size, 0.05);
        assert!(config.robots[0].trajectory.is_absolute() || config.robots[0].trajectory.exists());
        assert_eq!(config.network.profile, "wifi-5ghz");
        assert!(config.scene.exists());
    }
}
