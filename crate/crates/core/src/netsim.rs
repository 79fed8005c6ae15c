//! Deterministic model of the shared uplink: bandwidth accounting, latency,
//! equal-split capacity sharing, and in-order keyframe delivery.
//!
//! The link is a fluid processor-sharing model: at any instant, every robot
//! with queued data gets an equal share of the total capacity. Each robot's
//! transmissions serialize FIFO.

use crate::frontend::Keyframe;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

/// 5G NR band constants carried as named metadata (no PHY/MAC modeling).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NrBandInfo {
    pub band: u32,
    pub name: &'static str,
    pub mode: &'static str,
    pub raster_khz: [u32; 2],
    pub low_mhz: u32,
    pub middle_mhz: u32,
    pub high_mhz: u32,
    pub bandwidth_mhz: u32,
}

pub const NR_BAND_78: NrBandInfo = NrBandInfo {
    band: 78,
    name: "TD 3500",
    mode: "TDD",
    raster_khz: [15, 30],
    low_mhz: 3300,
    middle_mhz: 3550,
    high_mhz: 3800,
    bandwidth_mhz: 500,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkProfile {
    pub name: String,
    /// Total uplink capacity shared by all senders, Mb/s.
    pub capacity_mbps: f64,
    pub base_latency_ms: f64,
    /// Uniform jitter half-width, ms.
    pub jitter_ms: f64,
    #[serde(skip)]
    pub band_info: Option<NrBandInfo>,
}

impl NetworkProfile {
    /// Campus WiFi, 5 GHz band: 90 Mb/s effective uplink, 8-34 ms latency.
    pub fn wifi_5ghz() -> Self {
        Self {
            name: "wifi-5ghz".into(),
            capacity_mbps: 90.0,
            base_latency_ms: 21.0,
            jitter_ms: 13.0,
            band_info: None,
        }
    }

    /// 5G NR band 78: 110 Mb/s uplink, 24 +/- 4 ms latency.
    pub fn fiveg_band78() -> Self {
        Self {
            name: "5g-band78".into(),
            capacity_mbps: 110.0,
            base_latency_ms: 24.0,
            jitter_ms: 4.0,
            band_info: Some(NR_BAND_78),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "wifi-5ghz" | "wifi" => Some(Self::wifi_5ghz()),
            "5g-band78" | "5g" => Some(Self::fiveg_band78()),
            _ => None,
        }
    }
}

/// Per-robot uplink bandwidth in Mb/s for the given stream rates and
/// compressed frame sizes.
pub fn per_robot_bandwidth(rgb_fps: f64, rgb_bytes: f64, depth_fps: f64, depth_bytes: f64) -> f64 {
    (rgb_fps * rgb_bytes + depth_fps * depth_bytes) * 8.0 / 1e6
}

/// Sum of per-robot bandwidths and whether the total fits the capacity.
pub fn total_bandwidth(per_robot: &[f64], capacity_mbps: f64) -> (f64, bool) {
    let total: f64 = per_robot.iter().sum();
    (total, total <= capacity_mbps)
}

/// Map update frequency in Hz: effective per-robot uplink rate divided by the
/// data volume of one update.
pub fn map_update_frequency(effective_uplink_mbps: f64, data_per_update_mb: f64) -> f64 {
    assert!(data_per_update_mb > 0.0, "data per update must be positive");
    effective_uplink_mbps / data_per_update_mb
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransmissionEvent {
    pub robot_id: u32,
    pub keyframe_id: u64,
    pub send_time: f64,
    pub payload_bits: u64,
    pub arrival_time: f64,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    keyframe_id: u64,
    send_time: f64,
    payload_bits: u64,
}

/// Event queue for one shared uplink.
#[derive(Debug, Clone)]
pub struct NetworkSim {
    profile: NetworkProfile,
    queued: Vec<(u32, Pending)>,
}

impl NetworkSim {
    pub fn new(profile: NetworkProfile) -> Self {
        Self { profile, queued: Vec::new() }
    }

    pub fn enqueue(&mut self, robot_id: u32, keyframe_id: u64, send_time: f64, payload_bits: u64) {
        self.queued.push((
            robot_id,
            Pending { keyframe_id, send_time, payload_bits },
        ));
    }

    pub fn enqueue_keyframe(&mut self, kf: &Keyframe, send_time: f64) {
        self.enqueue(kf.robot_id, kf.keyframe_id, send_time, kf.payload_bits());
    }

    /// Runs the fluid simulation and returns delivery events sorted by
    /// arrival time (ties by robot then keyframe). Deterministic per seed.
    pub fn run(&self, rng_seed: u64) -> Vec<TransmissionEvent> {
        let mut rng = StdRng::seed_from_u64(rng_seed);
        let capacity_bps = self.profile.capacity_mbps * 1e6;

        // per-robot FIFO queues in (send_time, keyframe_id) order
        let mut queues: BTreeMap<u32, VecDeque<Pending>> = BTreeMap::new();
        let mut sends = self.queued.clone();
        sends.sort_by(|a, b| {
            a.1.send_time
                .partial_cmp(&b.1.send_time)
                .unwrap()
                .then(a.0.cmp(&b.0))
                .then(a.1.keyframe_id.cmp(&b.1.keyframe_id))
        });
        for (robot, p) in sends {
            queues.entry(robot).or_default().push_back(p);
        }

        let mut events = Vec::new();
        let mut last_arrival: BTreeMap<u32, f64> = BTreeMap::new();
        // remaining bits of each robot's head transmission once started
        let mut remaining: BTreeMap<u32, f64> = BTreeMap::new();
        let mut now = 0.0_f64;

        loop {
            // admit heads whose send time has been reached
            for (robot, q) in &mut queues {
                if !remaining.contains_key(robot) {
                    if let Some(head) = q.front() {
                        if head.send_time <= now + 1e-12 {
                            remaining.insert(*robot, head.payload_bits as f64);
                        }
                    }
                }
            }

            let next_send = queues
                .iter()
                .filter(|(r, _)| !remaining.contains_key(r))
                .filter_map(|(_, q)| q.front().map(|p| p.send_time))
                .fold(f64::INFINITY, f64::min);

            if remaining.is_empty() {
                if next_send.is_infinite() {
                    break;
                }
                now = next_send;
                continue;
            }

            let rate = capacity_bps / remaining.len() as f64;
            let min_remaining = remaining.values().cloned().fold(f64::INFINITY, f64::min);
            let dt_complete = min_remaining / rate;
            let dt = dt_complete.min(next_send - now);

            for bits in remaining.values_mut() {
                *bits -= rate * dt;
            }
            now += dt;

            let done: Vec<u32> = remaining
                .iter()
                .filter(|(_, bits)| **bits <= 1e-6)
                .map(|(r, _)| *r)
                .collect();
            for robot in done {
                remaining.remove(&robot);
                let p = queues.get_mut(&robot).unwrap().pop_front().unwrap();
                let jitter = if self.profile.jitter_ms > 0.0 {
                    rng.gen_range(-self.profile.jitter_ms..=self.profile.jitter_ms)
                } else {
                    0.0
                };
                let mut arrival = now + (self.profile.base_latency_ms + jitter) / 1e3;
                // jitter must not reorder one robot's FIFO stream
                if let Some(prev) = last_arrival.get(&robot) {
                    arrival = arrival.max(prev + 1e-9);
                }
                last_arrival.insert(robot, arrival);
                events.push(TransmissionEvent {
                    robot_id: robot,
                    keyframe_id: p.keyframe_id,
                    send_time: p.send_time,
                    payload_bits: p.payload_bits,
                    arrival_time: arrival,
                });
            }
        }

        events.sort_by(|a, b| {
            a.arrival_time
                .partial_cmp(&b.arrival_time)
                .unwrap()
                .then(a.robot_id.cmp(&b.robot_id))
                .then(a.keyframe_id.cmp(&b.keyframe_id))
        });
        events
    }
}

/// Writes the per-event log as CSV.
pub fn write_event_csv<W: Write>(events: &[TransmissionEvent], mut w: W) -> std::io::Result<()> {
    writeln!(w, "robot_id,keyframe_id,send_time,arrival_time,payload_bits")?;
    for e in events {
        writeln!(
            w,
            "{},{},{:.9},{:.9},{}",
            e.robot_id, e.keyframe_id, e.send_time, e.arrival_time, e.payload_bits
        )?;
    }
    Ok(())
}
