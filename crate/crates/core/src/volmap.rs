//! Volumetric map assembly in the global frame plus the coverage and
//! density quality metrics, with ASCII PLY export.

use crate::backend::KeyframeKey;
use crate::frontend::Keyframe;
use crate::geometry::{back_project, CameraIntrinsics, Point3, SE3Pose};
use nalgebra::Vector3;

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolmapError {
    #[error("no refined pose for keyframe ({0}, {1})")]
    MissingPose(u32, u64),
    #[error("coverage undefined: no ground-truth surface voxels in region")]
    UndefinedCoverage,
    #[error("region has non-positive volume")]
    EmptyRegion,
    #[error("ply parse error at line {0}: {1}")]
    Parse(usize, String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Axis-aligned bounding box in the global frame.
#[derive(Debug, Clone, Copy)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|i| (self.max[i] - self.min[i]).max(0.0)).product()
    }

    /// Smallest box containing all points, grown by `margin` on every side.
    pub fn from_points(points: &[Point3], margin: f64) -> Option<Self> {
        let first = points.first()?;
        let mut min = *first;
        let mut max = *first;
        for p in points {
            for i in 0..3 {
                min[i] = min[i].min(p[i]);
                max[i] = max[i].max(p[i]);
            }
        }
        Some(Self {
            min: min - Vector3::repeat(margin),
            max: max + Vector3::repeat(margin),
        })
    }
}

pub type VoxelKey = (i64, i64, i64);

/// Occupancy discretization: a point lands in voxel
/// `floor((p - origin) / voxel_size)` componentwise.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub origin: Point3,
    pub voxel_size: f64,
    pub occupied: BTreeSet<VoxelKey>,
}

impl VoxelGrid {
    pub fn new(origin: Point3, voxel_size: f64) -> Self {
        assert!(voxel_size > 0.0, "voxel_size must be positive");
        Self {
            origin,
            voxel_size,
            occupied: BTreeSet::new(),
        }
    }

    pub fn key_for(&self, p: &Point3) -> VoxelKey {
        (
            ((p.x - self.origin.x) / self.voxel_size).floor() as i64,
            ((p.y - self.origin.y) / self.voxel_size).floor() as i64,
            ((p.z - self.origin.z) / self.voxel_size).floor() as i64,
        )
    }

    pub fn insert(&mut self, p: &Point3) {
        let key = self.key_for(p);
        self.occupied.insert(key);
    }

    pub fn from_points(points: &[Point3], origin: Point3, voxel_size: f64) -> Self {
        let mut grid = Self::new(origin, voxel_size);
        for p in points {
            grid.insert(p);
        }
        grid
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    /// Occupied-voxel extent along one axis (meters): voxel span times size.
    pub fn extent_along(&self, axis: usize) -> f64 {
        let idx = |k: &VoxelKey| match axis {
            0 => k.0,
            1 => k.1,
            _ => k.2,
        };
        match (
            self.occupied.iter().map(|k| idx(k)).min(),
            self.occupied.iter().map(|k| idx(k)).max(),
        ) {
            (Some(lo), Some(hi)) => (hi - lo + 1) as f64 * self.voxel_size,
            _ => 0.0,
        }
    }
}

/// One robot's merged map: global-frame cloud plus its voxelization.
#[derive(Debug, Clone)]
pub struct GlobalMap {
    pub robot_id: u32,
    pub points: Vec<Point3>,
    pub grid: VoxelGrid,
    pub keyframe_count: usize,
}

impl GlobalMap {
    pub fn from_points(robot_id: u32, points: Vec<Point3>, voxel_size: f64) -> Self {
        let grid = VoxelGrid::from_points(&points, Point3::origin(), voxel_size);
        Self {
            robot_id,
            points,
            grid,
            keyframe_count: 0,
        }
    }
}

/// Union of refined-pose-transformed cleaned keyframe clouds (no
/// deduplication; the voxel grid deduplicates).
pub fn assemble_map(
    keyframes: &[&Keyframe],
    refined_poses: &HashMap<KeyframeKey, SE3Pose>,
    voxel_size: f64,
) -> Result<GlobalMap, VolmapError> {
    let robot_id = keyframes.first().map_or(0, |kf| kf.robot_id);
    let mut points = Vec::new();
    for kf in keyframes {
        let pose = refined_poses
            .get(&kf.key())
            .ok_or(VolmapError::MissingPose(kf.robot_id, kf.keyframe_id))?;
        points.extend(kf.cloud.points.iter().map(|x| pose.transform_point(x)));
    }
    let mut map = GlobalMap::from_points(robot_id, points, voxel_size);
    map.keyframe_count = keyframes.len();
    Ok(map)
}

/// Sparse baseline: only the back-projected feature observations, same poses.
pub fn assemble_sparse_map(
    keyframes: &[&Keyframe],
    refined_poses: &HashMap<KeyframeKey, SE3Pose>,
    k: &CameraIntrinsics,
    voxel_size: f64,
) -> Result<GlobalMap, VolmapError> {
    let robot_id = keyframes.first().map_or(0, |kf| kf.robot_id);
    let mut points = Vec::new();
    for kf in keyframes {
        let pose = refined_poses
            .get(&kf.key())
            .ok_or(VolmapError::MissingPose(kf.robot_id, kf.keyframe_id))?;
        for obs in &kf.observations {
            if let Ok(x) = back_project(&obs.pixel, obs.depth, k) {
                points.push(pose.transform_point(&x));
            }
        }
    }
    let mut map = GlobalMap::from_points(robot_id, points, voxel_size);
    map.keyframe_count = keyframes.len();
    Ok(map)
}

/// Ground-truth surface voxelization: regular sampling of every box face at
/// a sub-voxel step, restricted to `region`.
pub fn scene_surface_voxels(
    scene: &crate::simworld::Scene,
    region: &Aabb,
    voxel_size: f64,
) -> BTreeSet<VoxelKey> {
    let grid = VoxelGrid::new(Point3::origin(), voxel_size);
    let step = voxel_size / 3.0;
    let mut out = BTreeSet::new();
    for b in scene.boxes() {
        let h = b.extents / 2.0;
        for axis in 0..3 {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let nu = ((b.extents[u] / step).ceil() as usize).max(1);
            let nv = ((b.extents[v] / step).ceil() as usize).max(1);
            for side in [-1.0, 1.0] {
                for iu in 0..=nu {
                    for iv in 0..=nv {
                        let mut local = Point3::origin();
                        local[axis] = side * h[axis];
                        local[u] = -h[u] + b.extents[u] * iu as f64 / nu as f64;
                        local[v] = -h[v] + b.extents[v] * iv as f64 / nv as f64;
                        let p = b.pose.transform_point(&local);
                        if region.contains(&p) {
                            out.insert(grid.key_for(&p));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Percent of ground-truth surface voxels inside `region` touched by the
/// map's occupied voxels.
pub fn coverage(
    map: &GlobalMap,
    scene: &crate::simworld::Scene,
    region: &Aabb,
    voxel_size: f64,
) -> Result<f64, VolmapError> {
    if region.volume() <= 0.0 {
        return Err(VolmapError::EmptyRegion);
    }
    let gt = scene_surface_voxels(scene, region, voxel_size);
    if gt.is_empty() {
        return Err(VolmapError::UndefinedCoverage);
    }
    let grid = if (map.grid.voxel_size - voxel_size).abs() < 1e-12
        && map.grid.origin == Point3::origin()
    {
        map.grid.clone()
    } else {
        VoxelGrid::from_points(&map.points, Point3::origin(), voxel_size)
    };
    let hit = gt.iter().filter(|k| grid.occupied.contains(k)).count();
    Ok(100.0 * hit as f64 / gt.len() as f64)
}

/// Map points inside `region` per cubic meter.
pub fn density(map: &GlobalMap, region: &Aabb) -> Result<f64, VolmapError> {
    let vol = region.volume();
    if vol <= 0.0 {
        return Err(VolmapError::EmptyRegion);
    }
    let inside = map.points.iter().filter(|p| region.contains(p)).count();
    Ok(inside as f64 / vol)
}

pub fn export_ply<P: AsRef<Path>>(points: &[Point3], destination: P) -> Result<(), VolmapError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(destination)?);
    writeln!(file, "ply")?;
    writeln!(file, "format ascii 1.0")?;
    writeln!(file, "element vertex {}", points.len())?;
    writeln!(file, "property float x")?;
    writeln!(file, "property float y")?;
    writeln!(file, "property float z")?;
    writeln!(file, "end_header")?;
    for p in points {
        writeln!(file, "{:.6} {:.6} {:.6}", p.x, p.y, p.z)?;
    }
    Ok(())
}

pub fn load_ply<P: AsRef<Path>>(source: P) -> Result<Vec<Point3>, VolmapError> {
    let reader = BufReader::new(std::fs::File::open(source)?);
    let mut points = Vec::new();
    let mut expected = None;
    let mut in_body = false;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if !in_body {
            if let Some(rest) = trimmed.strip_prefix("element vertex ") {
                expected = Some(rest.parse::<usize>().map_err(|_| {
                    VolmapError::Parse(lineno, format!("bad vertex count '{rest}'"))
                })?);
            } else if trimmed == "end_header" {
                if expected.is_none() {
                    return Err(VolmapError::Parse(lineno, "missing vertex element".into()));
                }
                in_body = true;
            }
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        let vals: Vec<f64> = trimmed
            .split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| VolmapError::Parse(lineno, format!("non-numeric field '{s}'")))
            })
            .collect::<Result<_, _>>()?;
        if vals.len() < 3 {
            return Err(VolmapError::Parse(lineno, "vertex needs 3 fields".into()));
        }
        points.push(Point3::new(vals[0], vals[1], vals[2]));
    }
    match expected {
        Some(n) if n != points.len() => Err(VolmapError::Parse(
            0,
            format!("header promised {n} vertices, found {}", points.len()),
        )),
        Some(_) => Ok(points),
        None => Err(VolmapError::Parse(0, "no header".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{CodecModel, PointCloud};
    use crate::simworld::{Scene, SceneBox, SurfaceLabel};
    use nalgebra::UnitQuaternion;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn kf_with_cloud(robot: u32, id: u64, points: Vec<Point3>) -> Keyframe {
        let codec = CodecModel::default();
        Keyframe {
            robot_id: robot,
            keyframe_id: id,
            timestamp: id as f64,
            pose: SE3Pose::identity(),
            observations: Vec::new(),
            rgb_payload: codec.rgb_payload(8, 8),
            depth_payload: codec.depth_payload(8, 8),
            cloud: PointCloud {
                points,
                source_pixels: None,
            },
        }
    }

    fn cube_room(side: f64) -> Scene {
        // six slabs thinner than a voxel forming the inside of a cube room
        // centered at the origin; lateral extents shrunk slightly so the six
        // face voxelizations are disjoint (no shared corner voxels)
        let t = 0.01;
        let h = side / 2.0;
        let mut boxes = Vec::new();
        for axis in 0..3 {
            for side_sign in [-1.0, 1.0] {
                let mut center = Point3::origin();
                center[axis] = side_sign * (h + 0.005 + t / 2.0);
                let mut extents = Vector3::repeat(side * 0.98);
                extents[axis] = t;
                boxes.push(SceneBox {
                    pose: SE3Pose::from_translation(center.coords),
                    extents,
                    label: SurfaceLabel::Wall,
                    metallic: false,
                });
            }
        }
        Scene::new(boxes, 0, 0).unwrap()
    }

    #[test]
    fn voxelization_deterministic() {
        let mut rng = StdRng::seed_from_u64(5);
        let points: Vec<Point3> = (0..500)
            .map(|_| Point3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
            .collect();
        let a = VoxelGrid::from_points(&points, Point3::origin(), 0.05);
        let b = VoxelGrid::from_points(&points, Point3::origin(), 0.05);
        assert_eq!(a.occupied, b.occupied);
    }

    #[test]
    fn assemble_identity_and_translation() {
        let points = vec![
            Point3::new(0.1, 0.2, 1.0),
            Point3::new(-0.3, 0.4, 2.0),
        ];
        let kf = kf_with_cloud(0, 0, points.clone());
        let mut poses = HashMap::new();
        poses.insert((0u32, 0u64), SE3Pose::identity());
        let map = assemble_map(&[&kf], &poses, 0.05).unwrap();
        assert_eq!(map.points, points);
        assert_eq!(map.keyframe_count, 1);

        let t = Vector3::new(1.0, -2.0, 0.5);
        poses.insert((0, 0), SE3Pose::from_translation(t));
        let map = assemble_map(&[&kf], &poses, 0.05).unwrap();
        for (out, inp) in map.points.iter().zip(&points) {
            assert!((out - (inp + t)).norm() < 1e-12);
        }
    }

    #[test]
    fn assemble_missing_pose_named() {
        let kf = kf_with_cloud(3, 7, vec![Point3::origin()]);
        let err = assemble_map(&[&kf], &HashMap::new(), 0.05).unwrap_err();
        assert!(matches!(err, VolmapError::MissingPose(3, 7)));
    }

    #[test]
    fn union_semantics_point_counts() {
        let kf1 = kf_with_cloud(0, 0, vec![Point3::origin(); 10]);
        let kf2 = kf_with_cloud(0, 1, vec![Point3::origin(); 7]);
        let mut poses = HashMap::new();
        poses.insert((0u32, 0u64), SE3Pose::identity());
        poses.insert((0u32, 1u64), SE3Pose::identity());
        let map = assemble_map(&[&kf1, &kf2], &poses, 0.05).unwrap();
        assert_eq!(map.points.len(), 17);
        assert_eq!(map.grid.len(), 1);
    }

    #[test]
    fn coverage_full_empty_and_one_face() {
        let scene = cube_room(1.0);
        let region = Aabb::new(Point3::new(-1.0, -1.0, -1.0), Point3::new(1.0, 1.0, 1.0));
        let voxel = 0.05;

        let gt = scene_surface_voxels(&scene, &region, voxel);
        assert!(!gt.is_empty());

        // a point in every ground-truth voxel -> 100%
        let centers: Vec<Point3> = gt
            .iter()
            .map(|k| {
                Point3::new(
                    (k.0 as f64 + 0.5) * voxel,
                    (k.1 as f64 + 0.5) * voxel,
                    (k.2 as f64 + 0.5) * voxel,
                )
            })
            .collect();
        let full = GlobalMap::from_points(0, centers, voxel);
        assert!((coverage(&full, &scene, &region, voxel).unwrap() - 100.0).abs() < 1e-9);

        let empty = GlobalMap::from_points(0, Vec::new(), voxel);
        assert_eq!(coverage(&empty, &scene, &region, voxel).unwrap(), 0.0);

        // points on one face only: ~1/6 of six congruent faces, padded for
        // edge/corner voxels shared between abutting slabs
        let mut face_points = Vec::new();
        let mut x = -0.49;
        while x <= 0.49 {
            let mut y = -0.49;
            while y <= 0.49 {
                face_points.push(Point3::new(x, y, 0.51));
                y += voxel / 3.0;
            }
            x += voxel / 3.0;
        }
        let one_face = GlobalMap::from_points(0, face_points, voxel);
        let c = coverage(&one_face, &scene, &region, voxel).unwrap();
        // voxel-counting oracle
        let grid = VoxelGrid::from_points(&one_face.points, Point3::origin(), voxel);
        let hit = gt.iter().filter(|k| grid.occupied.contains(k)).count();
        let expected = 100.0 * hit as f64 / gt.len() as f64;
        assert!((c - expected).abs() < 1e-9);
        assert!((c - 100.0 / 6.0).abs() < 3.0, "one-face coverage {c}");
    }

    #[test]
    fn coverage_errors() {
        let scene = cube_room(1.0);
        let map = GlobalMap::from_points(0, Vec::new(), 0.05);
        let tiny = Aabb::new(Point3::new(5.0, 5.0, 5.0), Point3::new(5.1, 5.1, 5.1));
        assert!(matches!(
            coverage(&map, &scene, &tiny, 0.05),
            Err(VolmapError::UndefinedCoverage)
        ));
        let degenerate = Aabb::new(Point3::origin(), Point3::origin());
        assert!(matches!(
            coverage(&map, &scene, &degenerate, 0.05),
            Err(VolmapError::EmptyRegion)
        ));
    }

    #[test]
    fn coverage_monotone_in_keyframes() {
        let scene = cube_room(1.0);
        let region = Aabb::new(Point3::new(-1.0, -1.0, -1.0), Point3::new(1.0, 1.0, 1.0));
        let mut rng = StdRng::seed_from_u64(11);
        let sample_wall = |rng: &mut StdRng, n: usize| -> Vec<Point3> {
            (0..n)
                .map(|_| Point3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.51))
                .collect()
        };
        let kf1 = kf_with_cloud(0, 0, sample_wall(&mut rng, 200));
        let kf2 = kf_with_cloud(0, 1, sample_wall(&mut rng, 200));
        let mut poses = HashMap::new();
        poses.insert((0u32, 0u64), SE3Pose::identity());
        poses.insert((0u32, 1u64), SE3Pose::identity());
        let one = assemble_map(&[&kf1], &poses, 0.05).unwrap();
        let two = assemble_map(&[&kf1, &kf2], &poses, 0.05).unwrap();
        let c1 = coverage(&one, &scene, &region, 0.05).unwrap();
        let c2 = coverage(&two, &scene, &region, 0.05).unwrap();
        assert!(c2 >= c1);
    }

    #[test]
    fn density_arithmetic_and_rigid_invariance() {
        let region = Aabb::new(Point3::new(0.0, 0.0, 0.0), Point3::new(2.0, 1.0, 1.0));
        let mut rng = StdRng::seed_from_u64(2);
        let points: Vec<Point3> = (0..1000)
            .map(|_| Point3::new(rng.gen_range(0.0..2.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        let map = GlobalMap::from_points(0, points.clone(), 0.05);
        assert!((density(&map, &region).unwrap() - 500.0).abs() < 1e-9);

        let empty = GlobalMap::from_points(0, Vec::new(), 0.05);
        assert_eq!(density(&empty, &region).unwrap(), 0.0);

        // rigid transform of both map and region preserves density when the
        // transformed region stays axis-aligned (pure translation here)
        let t = SE3Pose::from_translation(Vector3::new(3.0, -1.0, 2.0));
        let moved: Vec<Point3> = points.iter().map(|p| t.transform_point(p)).collect();
        let moved_map = GlobalMap::from_points(0, moved, 0.05);
        let moved_region = Aabb::new(
            t.transform_point(&region.min),
            t.transform_point(&region.max),
        );
        let d0 = density(&map, &region).unwrap();
        let d1 = density(&moved_map, &moved_region).unwrap();
        assert!((d0 - d1).abs() < 1e-9);
    }

    #[test]
    fn ply_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.ply");

        export_ply(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 0"));
        assert!(load_ply(&path).unwrap().is_empty());

        let points = vec![
            Point3::new(1.25, -0.5, 3.0),
            Point3::new(0.000001, 2.0, -7.125),
            Point3::new(10.5, 0.0, 0.0),
        ];
        export_ply(&points, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 3"));
        assert_eq!(text.lines().filter(|l| !l.is_empty()).count(), 7 + 3);
        let back = load_ply(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in points.iter().zip(&back) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn refined_poses_shrink_wall_thickness() {
        // two views of the same wall; frontend poses carry drift, refined
        // poses are exact -> occupied-voxel extent normal to the wall shrinks
        let voxel = 0.05;
        let mut rng = StdRng::seed_from_u64(21);
        let wall_pts: Vec<Point3> = (0..400)
            .map(|_| Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0))
            .collect();
        // keyframe clouds in camera frame: camera at z = -2 looking at wall
        let cam = SE3Pose::from_translation(Vector3::new(0.0, 0.0, -2.0));
        let cloud: Vec<Point3> = wall_pts
            .iter()
            .map(|p| cam.inverse().transform_point(p))
            .collect();
        let kf1 = kf_with_cloud(0, 0, cloud.clone());
        let kf2 = kf_with_cloud(0, 1, cloud);
        let drift = SE3Pose::new(
            UnitQuaternion::from_euler_angles(0.0, 0.03, 0.0),
            Vector3::new(0.0, 0.0, 0.12),
        );
        let mut drifted = HashMap::new();
        drifted.insert((0u32, 0u64), cam);
        drifted.insert((0u32, 1u64), cam.compose(&drift));
        let mut refined = HashMap::new();
        refined.insert((0u32, 0u64), cam);
        refined.insert((0u32, 1u64), cam);
        let keyframes = [&kf1, &kf2];
        let map_drift = assemble_map(&keyframes, &drifted, voxel).unwrap();
        let map_refined = assemble_map(&keyframes, &refined, voxel).unwrap();
        let t_drift = map_drift.grid.extent_along(2);
        let t_refined = map_refined.grid.extent_along(2);
        assert!(
            t_refined < t_drift,
            "refined {t_refined} !< drifted {t_drift}"
        );
    }
}
