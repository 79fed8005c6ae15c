//! Python bindings for the dvmap core: pose algebra, camera projection,
//! bandwidth laws, trajectory evaluation, and the point-cloud filters.

use nalgebra::{Point3, UnitQuaternion, Vector3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use dvmap::eval::TrajectorySample;
use dvmap::frontend::PointCloud;
use dvmap::geometry::{CameraIntrinsics, PixelCoord, SE3Pose, Twist6};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Rigid transform as unit quaternion plus translation.
#[pyclass(name = "SE3Pose", skip_from_py_object)]
#[derive(Clone)]
struct PySE3Pose {
    inner: SE3Pose,
}

#[pymethods]
impl PySE3Pose {
    /// Builds a pose from `(tx, ty, tz)` and quaternion `(qx, qy, qz, qw)`.
    #[new]
    fn new(translation: (f64, f64, f64), quaternion: (f64, f64, f64, f64)) -> Self {
        let (qx, qy, qz, qw) = quaternion;
        let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(qw, qx, qy, qz));
        Self {
            inner: SE3Pose::new(
                rot,
                Vector3::new(translation.0, translation.1, translation.2),
            ),
        }
    }

    #[staticmethod]
    fn identity() -> Self {
        Self { inner: SE3Pose::identity() }
    }

    /// exp of a twist `[wx, wy, wz, vx, vy, vz]`.
    #[staticmethod]
    fn exp(twist: [f64; 6]) -> Self {
        Self { inner: SE3Pose::exp(&Twist6::from_row_slice(&twist)) }
    }

    fn log(&self) -> PyResult<[f64; 6]> {
        let t = self.inner.log().map_err(err)?;
        Ok([t[0], t[1], t[2], t[3], t[4], t[5]])
    }

    fn compose(&self, other: &PySE3Pose) -> Self {
        Self { inner: self.inner.compose(&other.inner) }
    }

    fn inverse(&self) -> Self {
        Self { inner: self.inner.inverse() }
    }

    fn transform_point(&self, p: (f64, f64, f64)) -> (f64, f64, f64) {
        let q = self.inner.transform_point(&Point3::new(p.0, p.1, p.2));
        (q.x, q.y, q.z)
    }

    #[getter]
    fn translation(&self) -> (f64, f64, f64) {
        let t = self.inner.translation();
        (t.x, t.y, t.z)
    }

    /// Quaternion as `(qx, qy, qz, qw)`.
    #[getter]
    fn quaternion(&self) -> (f64, f64, f64, f64) {
        let q = self.inner.rotation();
        (q.i, q.j, q.k, q.w)
    }

    fn __repr__(&self) -> String {
        let t = self.inner.translation();
        format!("SE3Pose(t=({:.6}, {:.6}, {:.6}))", t.x, t.y, t.z)
    }
}

/// Pinhole camera model.
#[pyclass(name = "CameraIntrinsics", skip_from_py_object)]
#[derive(Clone)]
struct PyCameraIntrinsics {
    inner: CameraIntrinsics,
}

#[pymethods]
impl PyCameraIntrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> PyResult<Self> {
        Ok(Self { inner: CameraIntrinsics::new(fx, fy, cx, cy, width, height).map_err(err)? })
    }
}

/// Lifts pixel `(u, v)` at `depth` into the camera frame.
#[pyfunction]
fn back_project(
    u: f64,
    v: f64,
    depth: f64,
    k: &PyCameraIntrinsics,
) -> PyResult<(f64, f64, f64)> {
    let p = dvmap::geometry::back_project(&PixelCoord::new(u, v), depth, &k.inner).map_err(err)?;
    Ok((p.x, p.y, p.z))
}

/// Projects a world point through the world-to-camera transform `t`.
#[pyfunction]
fn project(
    t: &PySE3Pose,
    point: (f64, f64, f64),
    k: &PyCameraIntrinsics,
) -> PyResult<(f64, f64)> {
    let pix = dvmap::geometry::project(
        &t.inner,
        &Point3::new(point.0, point.1, point.2),
        &k.inner,
    )
    .map_err(err)?;
    Ok((pix.u, pix.v))
}

/// Per-robot uplink demand in Mb/s.
#[pyfunction]
fn per_robot_bandwidth(rgb_fps: f64, rgb_bytes: f64, depth_fps: f64, depth_bytes: f64) -> f64 {
    dvmap::netsim::per_robot_bandwidth(rgb_fps, rgb_bytes, depth_fps, depth_bytes)
}

/// Map update frequency (Hz) given an effective uplink and payload size.
#[pyfunction]
fn map_update_frequency(effective_uplink_mbps: f64, data_per_update_mb: f64) -> f64 {
    dvmap::netsim::map_update_frequency(effective_uplink_mbps, data_per_update_mb)
}

fn to_samples(traj: Vec<(f64, [f64; 7])>) -> Vec<TrajectorySample> {
    traj.into_iter()
        .map(|(ts, v)| TrajectorySample {
            timestamp: ts,
            pose: PySE3Pose::new((v[0], v[1], v[2]), (v[3], v[4], v[5], v[6])).inner,
        })
        .collect()
}

/// ATE mean and RMSE between two `(timestamp, [tx..qw])` trajectories.
#[pyfunction]
#[pyo3(signature = (est, gt, align = true, max_dt = 0.02))]
fn ate_rmse(
    est: Vec<(f64, [f64; 7])>,
    gt: Vec<(f64, [f64; 7])>,
    align: bool,
    max_dt: f64,
) -> PyResult<(f64, f64)> {
    dvmap::eval::ate_rmse(&to_samples(est), &to_samples(gt), align, max_dt).map_err(err)
}

/// Statistical outlier removal over a list of `(x, y, z)` points.
#[pyfunction]
fn remove_outliers(
    points: Vec<(f64, f64, f64)>,
    k_neighbors: usize,
    lambda: f64,
) -> Vec<(f64, f64, f64)> {
    let cloud = PointCloud::from_points(
        points.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect(),
    );
    dvmap::frontend::remove_outliers(&cloud, k_neighbors, lambda)
        .points
        .into_iter()
        .map(|p| (p.x, p.y, p.z))
        .collect()
}

/// Keeps `(r, theta, phi, doppler, snr)` returns with snr >= threshold.
#[pyfunction]
fn snr_filter(
    measurements: Vec<(f64, f64, f64, f64, f64)>,
    threshold: f64,
) -> Vec<(f64, f64, f64, f64, f64)> {
    measurements.into_iter().filter(|m| m.4 >= threshold).collect()
}

#[pymodule]
fn dvmap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySE3Pose>()?;
    m.add_class::<PyCameraIntrinsics>()?;
    m.add_function(wrap_pyfunction!(back_project, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(per_robot_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(map_update_frequency, m)?)?;
    m.add_function(wrap_pyfunction!(ate_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(remove_outliers, m)?)?;
    m.add_function(wrap_pyfunction!(snr_filter, m)?)?;
    Ok(())
}
