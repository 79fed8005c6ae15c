//! Trajectory accuracy metrics: TUM-format ingestion, timestamp association,
//! rigid alignment, and ATE/RMSE.

use crate::geometry::{Point3, SE3Pose};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("need at least 3 associated pairs, got {0}")]
    TooFewPairs(usize),
    #[error("degenerate alignment: translations are collinear")]
    DegenerateAlignment,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub timestamp: f64,
    pub pose: SE3Pose,
}

/// Parses a TUM trajectory (`timestamp tx ty tz qx qy qz qw`, `#` comments).
/// Output is sorted by timestamp; quaternions are normalized.
pub fn load_tum<R: BufRead>(reader: R) -> Result<Vec<TrajectorySample>, EvalError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(EvalError::Parse {
                line: lineno,
                reason: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 8];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f.parse().map_err(|_| EvalError::Parse {
                line: lineno,
                reason: format!("non-numeric field '{f}'"),
            })?;
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if q.norm() < 1e-12 {
            return Err(EvalError::Parse {
                line: lineno,
                reason: "zero quaternion".into(),
            });
        }
        out.push(TrajectorySample {
            timestamp: vals[0],
            pose: SE3Pose::new(
                UnitQuaternion::new_normalize(q),
                Vector3::new(vals[1], vals[2], vals[3]),
            ),
        });
    }
    out.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).unwrap());
    Ok(out)
}

/// Writes samples in the TUM line format.
pub fn write_tum<W: Write>(samples: &[TrajectorySample], mut w: W) -> std::io::Result<()> {
    for s in samples {
        let t = s.pose.translation();
        let q = s.pose.rotation();
        writeln!(
            w,
            "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            s.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

/// Greedy nearest-timestamp association; each sample is matched at most once
/// and only within `max_dt`.
pub fn associate(
    est: &[TrajectorySample],
    gt: &[TrajectorySample],
    max_dt: f64,
) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, e) in est.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let dt = (e.timestamp - g.timestamp).abs();
            if dt <= max_dt {
                candidates.push((dt, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_e = vec![false; est.len()];
    let mut used_g = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_e[i] && !used_g[j] {
            used_e[i] = true;
            used_g[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort();
    pairs
}

/// Least-squares rigid alignment (rotation + translation, unit scale)
/// mapping `src` onto `dst`.
pub fn rigid_align(src: &[Point3], dst: &[Point3]) -> Result<SE3Pose, EvalError> {
    if src.len() < 3 || src.len() != dst.len() {
        return Err(EvalError::TooFewPairs(src.len().min(dst.len())));
    }
    let n = src.len() as f64;
    let cs: Vector3<f64> = src.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let cd: Vector3<f64> = dst.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - cs) * (d.coords - cd).transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    if sv[1] <= 1e-9 * sv[0].max(1e-300) {
        return Err(EvalError::DegenerateAlignment);
    }
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    d[(2, 2)] = (v_t.transpose() * u.transpose()).determinant().signum();
    let r = v_t.transpose() * d * u.transpose();
    let rot = UnitQuaternion::from_matrix(&r);
    let t = cd - r * cs;
    Ok(SE3Pose::new(rot, t))
}

/// Mean and root-mean-square translational error between associated samples.
/// With `align`, the estimate is first rigidly aligned onto ground truth.
pub fn ate_rmse(
    est: &[TrajectorySample],
    gt: &[TrajectorySample],
    align: bool,
    max_dt: f64,
) -> Result<(f64, f64), EvalError> {
    let pairs = associate(est, gt, max_dt);
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs(pairs.len()));
    }
    let e_pts: Vec<Point3> = pairs
        .iter()
        .map(|(i, _)| Point3::from(*est[*i].pose.translation()))
        .collect();
    let g_pts: Vec<Point3> = pairs
        .iter()
        .map(|(_, j)| Point3::from(*gt[*j].pose.translation()))
        .collect();
    let transform = if align {
        rigid_align(&e_pts, &g_pts)?
    } else {
        SE3Pose::identity()
    };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for (e, g) in e_pts.iter().zip(&g_pts) {
        let err = (transform.transform_point(e) - g).norm();
        sum += err;
        sum_sq += err * err;
    }
    let n = pairs.len() as f64;
    Ok((sum / n, (sum_sq / n).sqrt()))
}

/// One `sequence,method,ate_m,rmse_m` metrics row.
pub fn write_metrics_csv_row<W: Write>(
    mut w: W,
    sequence: &str,
    method: &str,
    ate_m: f64,
    rmse_m: f64,
) -> std::io::Result<()> {
    writeln!(w, "{sequence},{method},{ate_m:.6},{rmse_m:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::io::Cursor;

    fn sample(t: f64, x: f64, y: f64, z: f64) -> TrajectorySample {
        TrajectorySample {
            timestamp: t,
            pose: SE3Pose::from_translation(Vector3::new(x, y, z)),
        }
    }

    fn random_traj(rng: &mut impl Rng, n: usize) -> Vec<TrajectorySample> {
        (0..n)
            .map(|i| TrajectorySample {
                timestamp: i as f64 * 0.1,
                pose: SE3Pose::new(
                    UnitQuaternion::from_euler_angles(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ),
                    Vector3::new(
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                    ),
                ),
            })
            .collect()
    }

    fn random_rigid(rng: &mut impl Rng) -> SE3Pose {
        SE3Pose::new(
            UnitQuaternion::from_euler_angles(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-2.0..2.0),
            ),
            Vector3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            ),
        )
    }

    #[test]
    fn load_tum_basics() {
        let s = load_tum(Cursor::new("0.0 0 0 0 0 0 0 1\n")).unwrap();
        assert_eq!(s.len(), 1);
        let (da, dt) = s[0].pose.delta_norms(&SE3Pose::identity());
        assert!(da < 1e-12 && dt < 1e-12);

        assert!(load_tum(Cursor::new("# only a comment\n# another\n")).unwrap().is_empty());

        let err = load_tum(Cursor::new("0.0 0 0 0 0 0 1\n")).unwrap_err();
        assert!(matches!(err, EvalError::Parse { line: 1, .. }));
        let err = load_tum(Cursor::new("# ok\n0.0 0 x 0 0 0 0 1\n")).unwrap_err();
        assert!(matches!(err, EvalError::Parse { line: 2, .. }));
    }

    #[test]
    fn tum_round_trip() {
        let mut rng = StdRng::seed_from_u64(1);
        let traj = random_traj(&mut rng, 20);
        let mut buf = Vec::new();
        write_tum(&traj, &mut buf).unwrap();
        let back = load_tum(Cursor::new(buf)).unwrap();
        assert_eq!(back.len(), traj.len());
        for (a, b) in traj.iter().zip(&back) {
            let (da, dt) = a.pose.delta_norms(&b.pose);
            assert!(da < 1e-5 && dt < 1e-5);
        }
    }

    #[test]
    fn associate_cases() {
        let a: Vec<_> = (0..5).map(|i| sample(i as f64, 0.0, 0.0, 0.0)).collect();
        assert_eq!(associate(&a, &a, 0.01).len(), 5);

        let b: Vec<_> = (0..5).map(|i| sample(i as f64 + 100.0, 0.0, 0.0, 0.0)).collect();
        assert!(associate(&a, &b, 0.5).is_empty());

        let c: Vec<_> = (0..5).map(|i| sample(i as f64 + 0.25, 0.0, 0.0, 0.0)).collect();
        assert_eq!(associate(&a, &c, 0.5).len(), 5);

        assert_eq!(associate(&a, &c, 0.5).len(), associate(&c, &a, 0.5).len());
    }

    #[test]
    fn ate_identity_and_shift() {
        let mut rng = StdRng::seed_from_u64(2);
        let gt = random_traj(&mut rng, 30);
        let (ate, rmse) = ate_rmse(&gt, &gt, false, 0.02).unwrap();
        assert!(ate < 1e-12 && rmse < 1e-12);

        let shifted: Vec<_> = gt
            .iter()
            .map(|s| TrajectorySample {
                timestamp: s.timestamp,
                pose: SE3Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)).compose(&s.pose),
            })
            .collect();
        let (ate, rmse) = ate_rmse(&shifted, &gt, false, 0.02).unwrap();
        assert!((ate - 1.0).abs() < 1e-9 && (rmse - 1.0).abs() < 1e-9);
        let (ate, rmse) = ate_rmse(&shifted, &gt, true, 0.02).unwrap();
        assert!(ate < 1e-9 && rmse < 1e-9);
    }

    #[test]
    fn alignment_absorbs_random_rigid_transforms() {
        for seed in 0..100 {
            let mut rng = StdRng::seed_from_u64(seed);
            let gt = random_traj(&mut rng, 25);
            let t = random_rigid(&mut rng);
            let est: Vec<_> = gt
                .iter()
                .map(|s| TrajectorySample {
                    timestamp: s.timestamp,
                    pose: t.compose(&s.pose),
                })
                .collect();
            let (ate, rmse) = ate_rmse(&est, &gt, true, 0.02).unwrap();
            assert!(ate < 1e-9 && rmse < 1e-9, "seed {seed}: ate {ate}");
        }
    }

    #[test]
    fn alignment_invariance_and_mean_inequality() {
        for seed in 0..20 {
            let mut rng = StdRng::seed_from_u64(500 + seed);
            let gt = random_traj(&mut rng, 25);
            let est = random_traj(&mut rng, 25);
            let (ate0, rmse0) = ate_rmse(&est, &gt, true, 0.02).unwrap();
            assert!(rmse0 + 1e-12 >= ate0);
            let t = random_rigid(&mut rng);
            let moved: Vec<_> = est
                .iter()
                .map(|s| TrajectorySample {
                    timestamp: s.timestamp,
                    pose: t.compose(&s.pose),
                })
                .collect();
            let (ate1, rmse1) = ate_rmse(&moved, &gt, true, 0.02).unwrap();
            assert!((ate0 - ate1).abs() < 1e-9 && (rmse0 - rmse1).abs() < 1e-9);
        }
    }

    #[test]
    fn collinear_alignment_rejected() {
        let line: Vec<_> = (0..10).map(|i| sample(i as f64, i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            ate_rmse(&line, &line, true, 0.02),
            Err(EvalError::DegenerateAlignment)
        ));
        // no alignment requested: degenerate geometry is fine
        assert!(ate_rmse(&line, &line, false, 0.02).is_ok());
    }
}
