//! Occluded-object detection from radar: occlusion-gated activation, SNR
//! filtering, transformation into the global frame, denoising, and a
//! detection-rate score against ground-truth targets.
//!
//! This pipeline is deliberately independent of the visual mapping path: it
//! consumes only refined poses, never keyframes or the pose graph.

use crate::frontend::{remove_outliers, PointCloud};
use crate::geometry::{Point3, SE3Pose};
use crate::simworld::{DepthImage, RadarMeasurement, RadarScan};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RadarError {
    #[error("detection rate undefined: no ground-truth targets")]
    NoTargets,
    #[error("scan parse error at line {0}: {1}")]
    Parse(usize, String),
    #[error("invalid measurement at line {0}: {1}")]
    InvalidMeasurement(usize, String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Metallic detections in the global frame. Only `denoise` constructs one,
/// so every map has passed the outlier filter.
#[derive(Debug, Clone, Default)]
pub struct RadarMap {
    points: Vec<Point3>,
}

impl RadarMap {
    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BtvConfig {
    /// Depth below this counts a pixel as "near" for the occlusion gate.
    pub near_threshold: f64,
    /// Gate fires when the near fraction of valid pixels exceeds this.
    pub near_fraction: f64,
    /// SNR threshold (dB); measurements below it are dropped.
    pub snr_threshold: f64,
    pub outlier_k: usize,
    pub outlier_lambda: f64,
    /// Map points within this radius of a target surface count as hits.
    pub match_radius: f64,
    /// Targets need at least this many hits to count as detected.
    pub min_hits: usize,
}

impl Default for BtvConfig {
    fn default() -> Self {
        Self {
            near_threshold: 1.5,
            near_fraction: 0.5,
            snr_threshold: 15.0,
            outlier_k: 20,
            outlier_lambda: 2.0,
            match_radius: 0.1,
            min_hits: 3,
        }
    }
}

/// True when a large nearby surface fills the view: the fraction of valid
/// depth pixels closer than `near_threshold` exceeds `near_fraction`. An
/// all-sentinel image never triggers.
pub fn occlusion_trigger(depth: &DepthImage, near_threshold: f64, near_fraction: f64) -> bool {
    assert!(near_threshold > 0.0, "near_threshold must be positive");
    assert!(
        near_fraction > 0.0 && near_fraction <= 1.0,
        "near_fraction must be in (0, 1]"
    );
    let valid = depth.valid_count();
    if valid == 0 {
        return false;
    }
    let near = depth
        .depths
        .iter()
        .filter(|d| **d > 0.0 && **d < near_threshold)
        .count();
    near as f64 / valid as f64 > near_fraction
}

/// Keeps exactly the measurements with SNR >= `s_th`, order preserved.
pub fn snr_filter(scan: &RadarScan, s_th: f64) -> RadarScan {
    RadarScan {
        timestamp: scan.timestamp,
        measurements: scan
            .measurements
            .iter()
            .filter(|m| m.snr_db >= s_th)
            .cloned()
            .collect(),
    }
}

pub fn spherical_to_cartesian(r: f64, theta: f64, phi: f64) -> Point3 {
    Point3::new(
        r * theta.cos() * phi.cos(),
        r * theta.sin() * phi.cos(),
        r * phi.sin(),
    )
}

/// Maps each measurement to `T* · (r · [cosθcosφ, sinθcosφ, sinφ])`,
/// preserving order.
pub fn to_global(scan: &RadarScan, refined_pose: &SE3Pose) -> PointCloud {
    PointCloud {
        points: scan
            .measurements
            .iter()
            .map(|m| refined_pose.transform_point(&spherical_to_cartesian(m.range, m.theta, m.phi)))
            .collect(),
        source_pixels: None,
    }
}

/// Statistical outlier removal (same semantics and defaults as the frontend
/// cloud cleaner), wrapped as a RadarMap.
pub fn denoise(points: &PointCloud, k_neighbors: usize, lambda: f64) -> RadarMap {
    RadarMap {
        points: remove_outliers(points, k_neighbors, lambda).points,
    }
}

/// Full gated pipeline: exit unless occluded, then SNR-filter, transform to
/// the global frame, and denoise.
pub fn run_btv(
    depth: &DepthImage,
    scan: &RadarScan,
    refined_pose: &SE3Pose,
    config: &BtvConfig,
) -> Option<RadarMap> {
    if !occlusion_trigger(depth, config.near_threshold, config.near_fraction) {
        return None;
    }
    let filtered = snr_filter(scan, config.snr_threshold);
    let global = to_global(&filtered, refined_pose);
    Some(denoise(&global, config.outlier_k, config.outlier_lambda))
}

/// Percent of targets with at least `min_hits` map points within
/// `match_radius` of the target's surface sample points.
pub fn detection_rate(
    map: &RadarMap,
    ground_truth_targets: &[Vec<Point3>],
    match_radius: f64,
    min_hits: usize,
) -> Result<f64, RadarError> {
    assert!(match_radius > 0.0, "match_radius must be positive");
    if ground_truth_targets.is_empty() {
        return Err(RadarError::NoTargets);
    }
    let detected = ground_truth_targets
        .iter()
        .filter(|surface| {
            let hits = map
                .points
                .iter()
                .filter(|p| {
                    surface
                        .iter()
                        .any(|s| (*p - s).norm() <= match_radius)
                })
                .count();
            hits >= min_hits
        })
        .count();
    Ok(100.0 * detected as f64 / ground_truth_targets.len() as f64)
}

/// Single-linkage connected components: points are in the same cluster when
/// connected by hops of at most `linkage` meters.
pub fn cluster_points(points: &[Point3], linkage: f64) -> Vec<Vec<Point3>> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    let l2 = linkage * linkage;
    for i in 0..n {
        for j in (i + 1)..n {
            if (points[i] - points[j]).norm_squared() <= l2 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut clusters: std::collections::BTreeMap<usize, Vec<Point3>> = Default::default();
    for i in 0..n {
        let root = find(&mut parent, i);
        clusters.entry(root).or_default().push(points[i]);
    }
    clusters.into_values().collect()
}

fn validate_measurement(m: &RadarMeasurement, line: usize) -> Result<(), RadarError> {
    if m.range <= 0.0 {
        return Err(RadarError::InvalidMeasurement(line, format!("r = {}", m.range)));
    }
    if m.phi.abs() > std::f64::consts::FRAC_PI_2 {
        return Err(RadarError::InvalidMeasurement(line, format!("phi = {}", m.phi)));
    }
    if m.theta <= -std::f64::consts::PI || m.theta > std::f64::consts::PI {
        return Err(RadarError::InvalidMeasurement(line, format!("theta = {}", m.theta)));
    }
    Ok(())
}

/// CSV layout: `timestamp,r,theta,phi,d,snr`, one measurement per line.
pub fn write_scan_csv<P: AsRef<Path>>(scan: &RadarScan, destination: P) -> Result<(), RadarError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(destination)?);
    writeln!(file, "timestamp,r,theta,phi,d,snr")?;
    for m in &scan.measurements {
        writeln!(
            file,
            "{},{},{},{},{},{}",
            scan.timestamp, m.range, m.theta, m.phi, m.doppler, m.snr_db
        )?;
    }
    Ok(())
}

pub fn read_scan_csv<P: AsRef<Path>>(source: P) -> Result<RadarScan, RadarError> {
    let reader = BufReader::new(std::fs::File::open(source)?);
    let mut scan = RadarScan {
        timestamp: 0.0,
        measurements: Vec::new(),
    };
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("timestamp") || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 6 {
            return Err(RadarError::Parse(
                lineno,
                format!("expected 6 fields, got {}", fields.len()),
            ));
        }
        let vals: Vec<f64> = fields
            .iter()
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| RadarError::Parse(lineno, format!("non-numeric field '{s}'")))
            })
            .collect::<Result<_, _>>()?;
        scan.timestamp = vals[0];
        let m = RadarMeasurement {
            range: vals[1],
            theta: vals[2],
            phi: vals[3],
            doppler: vals[4],
            snr_db: vals[5],
        };
        validate_measurement(&m, lineno)?;
        scan.measurements.push(m);
    }
    Ok(scan)
}
