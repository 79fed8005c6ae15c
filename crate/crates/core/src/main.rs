//! Command-line entry point: scenario runs, map/trajectory metrics, uplink
//! arithmetic, and the radar detection pipeline.

use clap::{Parser, Subcommand};
use dvmap::eval::ate_rmse;
use dvmap::geometry::{Point3, SE3Pose};
use dvmap::netsim::{map_update_frequency, NetworkProfile};
use dvmap::radar::{denoise, read_scan_csv, snr_filter, to_global};
use dvmap::runner::{load_scene, load_tum_file, run_experiment, ExperimentConfig};
use dvmap::volmap::{coverage, density, load_ply, Aabb, GlobalMap};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "dvmap", about = "Distributed volumetric mapping simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario config end to end and write all artifacts
    Run {
        /// Scenario config (TOML)
        config: PathBuf,
        /// Override the config's master seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coverage and density of a PLY map against a scene file
    Metrics {
        map: PathBuf,
        scene: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        voxel_size: f64,
    },
    /// Absolute trajectory error between two TUM trajectory files
    Ate {
        est: PathBuf,
        gt: PathBuf,
        /// Skip the rigid alignment step
        #[arg(long)]
        no_align: bool,
        /// Association window in seconds
        #[arg(long, default_value_t = 0.02)]
        max_dt: f64,
    },
    /// Uplink sharing arithmetic: per-robot bandwidth and update frequency
    Netcalc {
        #[arg(long)]
        profile: String,
        #[arg(long)]
        robots: u32,
        /// Data volume per map update, megabits
        #[arg(long)]
        data_per_update: f64,
    },
    /// SNR-filter a radar scan, transform it to the global frame, denoise
    RadarBtv {
        /// Scan CSV (timestamp,r,theta,phi,d,snr)
        scan: PathBuf,
        /// Sensor pose as tx,ty,tz,qx,qy,qz,qw
        pose: String,
        #[arg(long, default_value_t = 15.0)]
        snr_th: f64,
        /// Write the detections as a PLY file
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_pose(s: &str) -> Result<SE3Pose, String> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|f| f.trim().parse().map_err(|_| format!("non-numeric pose field '{f}'")))
        .collect::<Result<_, _>>()?;
    if vals.len() != 7 {
        return Err(format!("pose needs 7 fields (tx,ty,tz,qx,qy,qz,qw), got {}", vals.len()));
    }
    let q = Quaternion::new(vals[6], vals[3], vals[4], vals[5]);
    if q.norm() < 1e-9 {
        return Err("zero quaternion".into());
    }
    Ok(SE3Pose::new(
        UnitQuaternion::new_normalize(q),
        Vector3::new(vals[0], vals[1], vals[2]),
    ))
}

fn real_main() -> Result<(), String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut config = ExperimentConfig::load(&config).map_err(|e| e.to_string())?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(out) = out {
                config.output_dir = out;
            }
            let report = run_experiment(&config).map_err(|e| e.to_string())?;
            println!(
                "scenario {} (seed {}): predicted per-robot update frequency {:.2} Hz",
                report.name, report.seed, report.predicted_update_frequency_hz
            );
            for r in &report.robots {
                println!(
                    "robot {}: {} keyframes, coverage {:.1}%, density {:.0} pts/m3, \
                     ATE frontend {:.4} m -> refined {:.4} m, uplink {:.2} Hz",
                    r.robot_id,
                    r.keyframes,
                    r.coverage_pct,
                    r.density_pts_m3,
                    r.ate_frontend_m,
                    r.ate_refined_m,
                    r.update_frequency_hz
                );
            }
            if report.loop_edges > 0 {
                println!("backend: {} loop closures", report.loop_edges);
            }
            if report.radar_points > 0 {
                println!("radar map: {} points", report.radar_points);
            }
            println!("outputs in {}", config.output_dir.display());
            Ok(())
        }
        Command::Metrics { map, scene, voxel_size } => {
            let points = load_ply(&map).map_err(|e| format!("[volmap] {e}"))?;
            let scene = load_scene(&scene).map_err(|e| e.to_string())?;
            let region = scene_bounds(&scene);
            let map = GlobalMap::from_points(0, points, voxel_size);
            let cov = coverage(&map, &scene, &region, voxel_size).map_err(|e| format!("[volmap] {e}"))?;
            let den = density(&map, &region).map_err(|e| format!("[volmap] {e}"))?;
            println!("coverage {cov:.2} %");
            println!("density {den:.2} pts/m3");
            Ok(())
        }
        Command::Ate { est, gt, no_align, max_dt } => {
            let est = load_tum_file(&est).map_err(|e| e.to_string())?;
            let gt = load_tum_file(&gt).map_err(|e| e.to_string())?;
            let (ate, rmse) =
                ate_rmse(&est, &gt, !no_align, max_dt).map_err(|e| format!("[eval] {e}"))?;
            println!("ate {ate:.6} m");
            println!("rmse {rmse:.6} m");
            Ok(())
        }
        Command::Netcalc { profile, robots, data_per_update } => {
            if robots == 0 {
                return Err("[network] robots must be >= 1".into());
            }
            if data_per_update <= 0.0 {
                return Err("[network] data-per-update must be positive".into());
            }
            let profile = NetworkProfile::by_name(&profile)
                .ok_or(format!("[network] unknown profile '{profile}'"))?;
            let share = profile.capacity_mbps / robots as f64;
            let freq = map_update_frequency(share, data_per_update);
            println!("profile {} ({} Mb/s shared)", profile.name, profile.capacity_mbps);
            println!("per-robot bandwidth {share:.2} Mb/s");
            println!("map update frequency {freq:.2} Hz");
            Ok(())
        }
        Command::RadarBtv { scan, pose, snr_th, out } => {
            let scan = read_scan_csv(&scan).map_err(|e| format!("[radar] {e}"))?;
            let pose = parse_pose(&pose).map_err(|e| format!("[radar] {e}"))?;
            let filtered = snr_filter(&scan, snr_th);
            let global = to_global(&filtered, &pose);
            let map = denoise(&global, 20, 2.0);
            println!(
                "{} measurements -> {} above {snr_th} dB -> {} after denoise",
                scan.measurements.len(),
                filtered.measurements.len(),
                map.len()
            );
            if let Some(out) = out {
                dvmap::volmap::export_ply(map.points(), &out)
                    .map_err(|e| format!("[radar] {e}"))?;
                println!("wrote {}", out.display());
            }
            Ok(())
        }
    }
}

fn scene_bounds(scene: &dvmap::simworld::Scene) -> Aabb {
    let mut corners: Vec<Point3> = Vec::new();
    for b in scene.boxes() {
        let h = b.extents / 2.0;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    corners.push(
                        b.pose
                            .transform_point(&Point3::new(sx * h.x, sy * h.y, sz * h.z)),
                    );
                }
            }
        }
    }
    Aabb::from_points(&corners, 0.1).expect("scene has boxes")
}

fn main() {
    if let Err(message) = real_main() {
        eprintln!("error: {message}");
        std::process::exit(1);
    }
}
