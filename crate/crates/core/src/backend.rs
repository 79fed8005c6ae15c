//! Centralized mapping server: global keyframe atlas, loop-closure detection
//! and verification, covariance-weighted pose-graph optimization, and
//! refined-pose broadcast.

use crate::eval::rigid_align;
use crate::frontend::{estimate_pose, Keyframe};
use crate::geometry::{
    back_project, relative_constraint, se3_left_jacobian_inv, se3_right_jacobian_inv,
    CameraIntrinsics, Point3, SE3Pose, Twist6,
};
use nalgebra::{DMatrix, DVector, Matrix6};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;
use thiserror::Error;

pub type KeyframeKey = (u32, u64);

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("duplicate keyframe ({0}, {1})")]
    DuplicateKeyframe(u32, u64),
    #[error("keyframe ({0}, {1}) not in atlas")]
    MissingKeyframe(u32, u64),
    #[error("underconstrained loop candidate: {0} shared landmarks (need >= 6)")]
    TooFewShared(usize),
    #[error("loop candidate rejected: verification residual {0:.3} px exceeds {1:.3} px")]
    VerificationFailed(f64, f64),
    #[error("loop candidate rejected: {0}")]
    EstimationFailed(String),
    #[error("pose graph is disconnected; components: {0}")]
    Disconnected(String),
    #[error("edge covariance is not symmetric positive definite")]
    NonSpdCovariance,
    #[error("pose graph has no gauge-fixed node")]
    NoAnchor,
    #[error("log map failed during optimization: {0}")]
    LogFailure(String),
    #[error("pose graph parse error at line {0}: {1}")]
    Parse(usize, String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Global keyframe store with a per-robot order and a landmark
/// co-visibility index.
#[derive(Debug, Default)]
pub struct Atlas {
    keyframes: HashMap<KeyframeKey, Keyframe>,
    robot_index: BTreeMap<u32, Vec<u64>>,
    covisibility: HashMap<u64, BTreeSet<KeyframeKey>>,
}

impl Atlas {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn get(&self, key: &KeyframeKey) -> Option<&Keyframe> {
        self.keyframes.get(key)
    }

    pub fn robot_keyframes(&self, robot_id: u32) -> &[u64] {
        self.robot_index.get(&robot_id).map_or(&[], |v| v.as_slice())
    }

    pub fn robots(&self) -> Vec<u32> {
        self.robot_index.keys().copied().collect()
    }

    pub fn keys(&self) -> Vec<KeyframeKey> {
        let mut keys: Vec<KeyframeKey> = self.keyframes.keys().copied().collect();
        keys.sort();
        keys
    }

    /// Stores a keyframe and indexes its landmark observations.
    pub fn integrate_keyframe(&mut self, kf: Keyframe) -> Result<(), BackendError> {
        let key = kf.key();
        if self.keyframes.contains_key(&key) {
            return Err(BackendError::DuplicateKeyframe(key.0, key.1));
        }
        for obs in &kf.observations {
            self.covisibility.entry(obs.landmark_id).or_default().insert(key);
        }
        self.robot_index.entry(key.0).or_default().push(key.1);
        self.keyframes.insert(key, kf);
        Ok(())
    }

    /// Rebuilds the co-visibility index from stored observations (consistency
    /// oracle).
    pub fn rebuild_covisibility(&self) -> HashMap<u64, BTreeSet<KeyframeKey>> {
        let mut index: HashMap<u64, BTreeSet<KeyframeKey>> = HashMap::new();
        for (key, kf) in &self.keyframes {
            for obs in &kf.observations {
                index.entry(obs.landmark_id).or_default().insert(*key);
            }
        }
        index
    }

    pub fn covisibility(&self) -> &HashMap<u64, BTreeSet<KeyframeKey>> {
        &self.covisibility
    }

    /// Keyframes sharing at least `min_shared` landmarks with `new_kf`,
    /// excluding the same robot's last `exclusion_window` keyframes. Sorted
    /// by shared count descending, ties by key ascending.
    pub fn detect_loop_candidates(
        &self,
        new_kf: &KeyframeKey,
        min_shared: usize,
        exclusion_window: u64,
    ) -> Vec<KeyframeKey> {
        let Some(kf) = self.keyframes.get(new_kf) else {
            return Vec::new();
        };
        let mut shared: BTreeMap<KeyframeKey, usize> = BTreeMap::new();
        for obs in &kf.observations {
            if let Some(keys) = self.covisibility.get(&obs.landmark_id) {
                for key in keys {
                    if key == new_kf {
                        continue;
                    }
                    if key.0 == new_kf.0 && new_kf.1.saturating_sub(key.1) <= exclusion_window {
                        continue;
                    }
                    *shared.entry(*key).or_insert(0) += 1;
                }
            }
        }
        let mut candidates: Vec<(usize, KeyframeKey)> = shared
            .into_iter()
            .filter(|(_, n)| *n >= min_shared)
            .map(|(k, n)| (n, k))
            .collect();
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        candidates.into_iter().map(|(_, k)| k).collect()
    }

    /// Overwrites stored keyframe poses with refined estimates.
    pub fn update_poses(&mut self, refined: &BTreeMap<KeyframeKey, SE3Pose>) {
        for (key, pose) in refined {
            if let Some(kf) = self.keyframes.get_mut(key) {
                kf.pose = *pose;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Loop,
}

/// Relative-pose constraint: `measurement ~ from^-1 * to`, weighted by a
/// 6x6 covariance in the `[rotation; translation]` tangent ordering.
#[derive(Debug, Clone)]
pub struct PoseGraphEdge {
    pub from: KeyframeKey,
    pub to: KeyframeKey,
    pub measurement: SE3Pose,
    pub covariance: Matrix6<f64>,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    pub nodes: BTreeMap<KeyframeKey, SE3Pose>,
    pub edges: Vec<PoseGraphEdge>,
    pub fixed: BTreeSet<KeyframeKey>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Connected components over the union of the edge sets, each sorted.
    pub fn components(&self) -> Vec<Vec<KeyframeKey>> {
        let keys: Vec<KeyframeKey> = self.nodes.keys().copied().collect();
        let index: HashMap<KeyframeKey, usize> =
            keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let mut parent: Vec<usize> = (0..keys.len()).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            if parent[i] != i {
                let root = find(parent, parent[i]);
                parent[i] = root;
            }
            parent[i]
        }
        for e in &self.edges {
            let (Some(&a), Some(&b)) = (index.get(&e.from), index.get(&e.to)) else {
                continue;
            };
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
        }
        let mut groups: BTreeMap<usize, Vec<KeyframeKey>> = BTreeMap::new();
        for (i, key) in keys.iter().enumerate() {
            groups.entry(find(&mut parent, i)).or_default().push(*key);
        }
        groups.into_values().collect()
    }

    /// Restriction of the graph to a key subset.
    pub fn subgraph(&self, keys: &[KeyframeKey]) -> PoseGraph {
        let set: BTreeSet<KeyframeKey> = keys.iter().copied().collect();
        PoseGraph {
            nodes: self
                .nodes
                .iter()
                .filter(|(k, _)| set.contains(k))
                .map(|(k, v)| (*k, *v))
                .collect(),
            edges: self
                .edges
                .iter()
                .filter(|e| set.contains(&e.from) && set.contains(&e.to))
                .cloned()
                .collect(),
            fixed: self.fixed.intersection(&set).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    /// Huber threshold in whitened units, applied to loop edges only.
    pub huber_delta: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-10,
            huber_delta: 1.345,
        }
    }
}

struct WhitenedEdge {
    from: KeyframeKey,
    to: KeyframeKey,
    measurement_inv: SE3Pose,
    adj_z_inv: Matrix6<f64>,
    /// Inverse of the Cholesky factor of the covariance (whitener).
    whitener: Matrix6<f64>,
    robust: bool,
}

fn whiten_edges(graph: &PoseGraph, config: &OptimizerConfig) -> Result<Vec<WhitenedEdge>, BackendError> {
    graph
        .edges
        .iter()
        .map(|e| {
            let chol = e
                .covariance
                .cholesky()
                .ok_or(BackendError::NonSpdCovariance)?;
            let whitener = chol
                .l()
                .try_inverse()
                .ok_or(BackendError::NonSpdCovariance)?;
            let z_inv = e.measurement.inverse();
            Ok(WhitenedEdge {
                from: e.from,
                to: e.to,
                measurement_inv: z_inv,
                adj_z_inv: z_inv.adjoint(),
                whitener,
                robust: e.kind == EdgeKind::Loop && config.huber_delta > 0.0,
            })
        })
        .collect()
}

fn edge_residual(
    edge: &WhitenedEdge,
    nodes: &BTreeMap<KeyframeKey, SE3Pose>,
) -> Result<Twist6, BackendError> {
    let t_i = &nodes[&edge.from];
    let t_k = &nodes[&edge.to];
    edge.measurement_inv
        .compose(&t_i.inverse().compose(t_k))
        .log()
        .map_err(|e| BackendError::LogFailure(e.to_string()))
}

fn robust_weight(whitened_norm: f64, delta: f64, robust: bool) -> f64 {
    if robust && whitened_norm > delta {
        (delta / whitened_norm).sqrt()
    } else {
        1.0
    }
}

fn graph_cost(
    edges: &[WhitenedEdge],
    nodes: &BTreeMap<KeyframeKey, SE3Pose>,
    huber_delta: f64,
) -> Result<f64, BackendError> {
    let mut cost = 0.0;
    for e in edges {
        let r = edge_residual(e, nodes)?;
        let w = e.whitener * r;
        let s = w.norm();
        cost += if e.robust && s > huber_delta {
            huber_delta * (2.0 * s - huber_delta)
        } else {
            s * s
        };
    }
    Ok(cost)
}

/// Minimizes covariance-weighted odometry and loop residuals over all
/// non-fixed nodes by damped Gauss-Newton on the SE(3) tangent space.
/// Residual: `log(Z^-1 * T_i^-1 * T_k)`, Mahalanobis-weighted, with a Huber
/// kernel on loop edges.
pub fn optimize_pose_graph(
    graph: &PoseGraph,
    config: &OptimizerConfig,
) -> Result<BTreeMap<KeyframeKey, SE3Pose>, BackendError> {
    if graph.fixed.is_empty() {
        return Err(BackendError::NoAnchor);
    }
    let components = graph.components();
    if components.len() > 1 {
        let desc = components
            .iter()
            .map(|c| format!("{:?}", c))
            .collect::<Vec<_>>()
            .join(" | ");
        return Err(BackendError::Disconnected(desc));
    }

    let edges = whiten_edges(graph, config)?;
    let free: Vec<KeyframeKey> = graph
        .nodes
        .keys()
        .filter(|k| !graph.fixed.contains(k))
        .copied()
        .collect();
    let col: HashMap<KeyframeKey, usize> =
        free.iter().enumerate().map(|(i, k)| (*k, 6 * i)).collect();
    let dim = 6 * free.len();

    let mut nodes = graph.nodes.clone();
    if dim == 0 {
        return Ok(nodes);
    }
    let mut cost = graph_cost(&edges, &nodes, config.huber_delta)?;
    let mut lambda = 1e-4;

    for _ in 0..config.max_iterations {
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for e in &edges {
            let r = edge_residual(e, &nodes)?;
            let w = e.whitener * r;
            let weight = robust_weight(w.norm(), config.huber_delta, e.robust);

            // d log(Z^-1 exp(-d_i) T_i^-1 T_k exp(d_k)) at d = 0
            let jr_inv = se3_right_jacobian_inv(&r);
            let jl_inv = se3_left_jacobian_inv(&r);
            let j_to = e.whitener * jr_inv * weight;
            let j_from = e.whitener * (-jl_inv * e.adj_z_inv) * weight;
            let wr = w * weight;

            let blocks: [(Option<usize>, Matrix6<f64>); 2] = [
                (col.get(&e.from).copied(), j_from),
                (col.get(&e.to).copied(), j_to),
            ];
            for (ca, ja) in &blocks {
                let Some(ca) = ca else { continue };
                let mut seg = b.rows_mut(*ca, 6);
                seg += ja.transpose() * wr;
                for (cb, jb) in &blocks {
                    let Some(cb) = cb else { continue };
                    let prod = ja.transpose() * jb;
                    let mut view = h.view_mut((*ca, *cb), (6, 6));
                    view += prod;
                }
            }
        }

        let mut accepted = false;
        for _ in 0..8 {
            let damped = &h + DMatrix::identity(dim, dim) * lambda;
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = -chol.solve(&b);
            let mut candidate = nodes.clone();
            for (key, c) in &col {
                let delta = Twist6::from_iterator(step.rows(*c, 6).iter().copied());
                candidate.insert(*key, candidate[key].compose(&SE3Pose::exp(&delta)));
            }
            match graph_cost(&edges, &candidate, config.huber_delta) {
                Ok(c) if c <= cost + 1e-15 => {
                    nodes = candidate;
                    cost = c;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if step.norm() < config.step_tolerance {
                        return Ok(nodes);
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !accepted {
            break;
        }
    }
    Ok(nodes)
}

/// Whitened residual stack and analytic Jacobian of the full graph at the
/// current node estimates (test surface for finite-difference checks).
pub fn graph_linearize(
    graph: &PoseGraph,
    config: &OptimizerConfig,
) -> Result<(DVector<f64>, DMatrix<f64>, Vec<KeyframeKey>), BackendError> {
    let edges = whiten_edges(graph, config)?;
    let free: Vec<KeyframeKey> = graph
        .nodes
        .keys()
        .filter(|k| !graph.fixed.contains(k))
        .copied()
        .collect();
    let col: HashMap<KeyframeKey, usize> =
        free.iter().enumerate().map(|(i, k)| (*k, 6 * i)).collect();
    let mut r_all = DVector::zeros(6 * edges.len());
    let mut j_all = DMatrix::zeros(6 * edges.len(), 6 * free.len());
    for (row, e) in edges.iter().enumerate() {
        let r = edge_residual(e, &graph.nodes)?;
        let w = e.whitener * r;
        r_all.rows_mut(6 * row, 6).copy_from(&w);
        let jr_inv = se3_right_jacobian_inv(&r);
        let jl_inv = se3_left_jacobian_inv(&r);
        if let Some(c) = col.get(&e.to) {
            j_all
                .view_mut((6 * row, *c), (6, 6))
                .copy_from(&(e.whitener * jr_inv));
        }
        if let Some(c) = col.get(&e.from) {
            j_all
                .view_mut((6 * row, *c), (6, 6))
                .copy_from(&(e.whitener * (-jl_inv * e.adj_z_inv)));
        }
    }
    Ok((r_all, j_all, free))
}

/// Per-robot ordered refined poses; also updates the atlas poses in place.
pub fn broadcast_poses(
    refined: &BTreeMap<KeyframeKey, SE3Pose>,
    atlas: &mut Atlas,
) -> BTreeMap<u32, Vec<(u64, SE3Pose)>> {
    atlas.update_poses(refined);
    let mut out: BTreeMap<u32, Vec<(u64, SE3Pose)>> = BTreeMap::new();
    for ((robot, kf), pose) in refined {
        out.entry(*robot).or_default().push((*kf, *pose));
    }
    for list in out.values_mut() {
        list.sort_by_key(|(id, _)| *id);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Diagonal std-devs of the odometry edge noise (rad, m).
    pub odom_sigma_rot: f64,
    pub odom_sigma_trans: f64,
    /// Loop edges are trusted more; defaults are 10x tighter.
    pub loop_sigma_rot: f64,
    pub loop_sigma_trans: f64,
    pub min_shared_landmarks: usize,
    pub exclusion_window: u64,
    /// Reject a loop candidate when the verification RMS residual (px)
    /// exceeds this.
    pub verification_max_rms_px: f64,
    /// Optimize every this many integrated keyframes; 0 optimizes whenever
    /// a loop edge is added instead.
    pub optimize_every: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            odom_sigma_rot: 1e-2,
            odom_sigma_trans: 1e-2,
            loop_sigma_rot: 1e-3,
            loop_sigma_trans: 1e-3,
            min_shared_landmarks: 15,
            exclusion_window: 10,
            verification_max_rms_px: 2.0,
            optimize_every: 10,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl BackendConfig {
    pub fn odom_covariance(&self) -> Matrix6<f64> {
        diag_covariance(self.odom_sigma_rot, self.odom_sigma_trans)
    }

    pub fn loop_covariance(&self) -> Matrix6<f64> {
        diag_covariance(self.loop_sigma_rot, self.loop_sigma_trans)
    }
}

pub fn diag_covariance(sigma_rot: f64, sigma_trans: f64) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for i in 0..3 {
        m[(i, i)] = sigma_rot * sigma_rot;
        m[(i + 3, i + 3)] = sigma_trans * sigma_trans;
    }
    m
}

/// Geometric loop-constraint construction: registers `key_n` against the
/// landmarks back-projected from `key_j`'s observations and verifies the
/// reprojection residual. Returns the loop edge `from=key_n, to=key_j`.
pub fn make_loop_constraint(
    atlas: &Atlas,
    key_n: KeyframeKey,
    key_j: KeyframeKey,
    k: &CameraIntrinsics,
    covariance: Matrix6<f64>,
    max_rms_px: f64,
) -> Result<PoseGraphEdge, BackendError> {
    let kf_n = atlas
        .get(&key_n)
        .ok_or(BackendError::MissingKeyframe(key_n.0, key_n.1))?;
    let kf_j = atlas
        .get(&key_j)
        .ok_or(BackendError::MissingKeyframe(key_j.0, key_j.1))?;

    // landmarks expressed in key_j's camera frame
    let mut landmarks_j: HashMap<u64, Point3> = HashMap::new();
    for obs in &kf_j.observations {
        if let Ok(p) = back_project(&obs.pixel, obs.depth, k) {
            landmarks_j.insert(obs.landmark_id, p);
        }
    }
    let shared: Vec<_> = kf_n
        .observations
        .iter()
        .filter(|o| landmarks_j.contains_key(&o.landmark_id))
        .copied()
        .collect();
    if shared.len() < 6 {
        return Err(BackendError::TooFewShared(shared.len()));
    }

    // closed-form 3D-3D initialization from the shared depth points
    let src: Vec<Point3> = shared
        .iter()
        .map(|o| back_project(&o.pixel, o.depth, k).expect("positive depth"))
        .collect();
    let dst: Vec<Point3> = shared.iter().map(|o| landmarks_j[&o.landmark_id]).collect();
    // pose of n's camera in j's frame maps n-frame points onto j-frame points
    let init = rigid_align(&src, &dst)
        .map_err(|e| BackendError::EstimationFailed(e.to_string()))?;

    let (pose_n_in_j, cost) = estimate_pose(&shared, &landmarks_j, k, &init)
        .map_err(|e| BackendError::EstimationFailed(e.to_string()))?;
    let rms = (cost / shared.len() as f64).sqrt();
    if rms > max_rms_px {
        return Err(BackendError::VerificationFailed(rms, max_rms_px));
    }
    // pose_n_in_j = T_j^-1 T_n, so the (n -> j) measurement T_n^-1 T_j is its
    // inverse
    Ok(PoseGraphEdge {
        from: key_n,
        to: key_j,
        measurement: pose_n_in_j.inverse(),
        covariance,
        kind: EdgeKind::Loop,
    })
}

/// Outcome of integrating one keyframe into the backend.
#[derive(Debug, Default, Clone)]
pub struct IntegrationOutcome {
    pub loop_edges_added: usize,
    pub optimized: bool,
}

/// The centralized server: owns the atlas and pose graph, serializes
/// integration and optimization.
pub struct Backend {
    pub atlas: Atlas,
    pub graph: PoseGraph,
    config: BackendConfig,
    intrinsics: CameraIntrinsics,
    integrated: usize,
    /// Last pose each robot reported, as received. Odometry edges must be
    /// built from consecutive frontend poses; graph nodes may already have
    /// been moved by an earlier optimization and live in a different gauge.
    last_reported: HashMap<u32, SE3Pose>,
}

impl Backend {
    pub fn new(config: BackendConfig, intrinsics: CameraIntrinsics) -> Self {
        Self {
            atlas: Atlas::new(),
            graph: PoseGraph::new(),
            config,
            intrinsics,
            integrated: 0,
            last_reported: HashMap::new(),
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Algorithm body for one incoming keyframe: store, chain an odometry
    /// edge, search loop candidates, verify constraints, and optimize on the
    /// configured cadence.
    pub fn process_keyframe(&mut self, kf: Keyframe) -> Result<IntegrationOutcome, BackendError> {
        let key = kf.key();
        let pose = kf.pose;
        let prev = self
            .atlas
            .robot_keyframes(key.0)
            .last()
            .map(|id| (key.0, *id));
        self.atlas.integrate_keyframe(kf)?;
        match prev {
            None => {
                // gauge policy: each robot's first keyframe is anchored
                self.graph.nodes.insert(key, pose);
                self.graph.fixed.insert(key);
            }
            Some(prev_key) => {
                let delta = relative_constraint(&self.last_reported[&key.0], &pose);
                // initialize the node by chaining the odometry delta onto the
                // current (possibly refined) estimate of the previous node
                let init = self.graph.nodes[&prev_key].compose(&delta);
                self.graph.nodes.insert(key, init);
                self.atlas.update_poses(&BTreeMap::from([(key, init)]));
                self.graph.edges.push(PoseGraphEdge {
                    from: prev_key,
                    to: key,
                    measurement: delta,
                    covariance: self.config.odom_covariance(),
                    kind: EdgeKind::Odometry,
                });
            }
        }
        self.last_reported.insert(key.0, pose);
        self.integrated += 1;

        let mut outcome = IntegrationOutcome::default();
        let candidates = self.atlas.detect_loop_candidates(
            &key,
            self.config.min_shared_landmarks,
            self.config.exclusion_window,
        );
        for cand in candidates.into_iter().take(3) {
            match make_loop_constraint(
                &self.atlas,
                key,
                cand,
                &self.intrinsics,
                self.config.loop_covariance(),
                self.config.verification_max_rms_px,
            ) {
                Ok(edge) => {
                    self.graph.edges.push(edge);
                    outcome.loop_edges_added += 1;
                }
                Err(BackendError::TooFewShared(_))
                | Err(BackendError::VerificationFailed(..))
                | Err(BackendError::EstimationFailed(_)) => continue,
                Err(e) => return Err(e),
            }
        }

        let due = if self.config.optimize_every > 0 {
            self.integrated % self.config.optimize_every == 0
        } else {
            outcome.loop_edges_added > 0
        };
        if due {
            self.optimize()?;
            outcome.optimized = true;
        }
        Ok(outcome)
    }

    /// Optimizes every connected component (each is anchored by a robot's
    /// first keyframe) and broadcasts the refined poses into the atlas.
    pub fn optimize(&mut self) -> Result<BTreeMap<u32, Vec<(u64, SE3Pose)>>, BackendError> {
        let mut refined: BTreeMap<KeyframeKey, SE3Pose> = BTreeMap::new();
        for component in self.graph.components() {
            let mut sub = self.graph.subgraph(&component);
            if sub.fixed.is_empty() {
                sub.fixed.insert(component[0]);
            }
            refined.extend(optimize_pose_graph(&sub, &self.config.optimizer)?);
        }
        for (key, pose) in &refined {
            self.graph.nodes.insert(*key, *pose);
        }
        Ok(broadcast_poses(&refined, &mut self.atlas))
    }

    /// Refined trajectory of one robot as (timestamp, pose) samples.
    pub fn robot_trajectory(&self, robot_id: u32) -> Vec<(f64, SE3Pose)> {
        self.atlas
            .robot_keyframes(robot_id)
            .iter()
            .filter_map(|id| self.atlas.get(&(robot_id, *id)))
            .map(|kf| (kf.timestamp, kf.pose))
            .collect()
    }
}

fn fmt_key(key: &KeyframeKey) -> String {
    format!("{}:{}", key.0, key.1)
}

fn parse_key(s: &str, line: usize) -> Result<KeyframeKey, BackendError> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| BackendError::Parse(line, format!("bad key '{s}'")))?;
    Ok((
        a.parse()
            .map_err(|_| BackendError::Parse(line, format!("bad robot id '{a}'")))?,
        b.parse()
            .map_err(|_| BackendError::Parse(line, format!("bad keyframe id '{b}'")))?,
    ))
}

/// Text dump: `NODE key tx ty tz qx qy qz qw` and
/// `EDGE_ODOM|EDGE_LOOP from to tx ty tz qx qy qz qw i11 i12 ... i66`
/// (21 upper-triangular information-matrix entries).
pub fn dump_pose_graph(graph: &PoseGraph) -> Result<String, BackendError> {
    let mut out = String::new();
    for (key, pose) in &graph.nodes {
        let t = pose.translation();
        let q = pose.rotation();
        let _ = writeln!(
            out,
            "NODE {} {} {} {} {} {} {} {}",
            fmt_key(key), t.x, t.y, t.z, q.i, q.j, q.k, q.w
        );
    }
    for key in &graph.fixed {
        let _ = writeln!(out, "FIX {}", fmt_key(key));
    }
    for e in &graph.edges {
        let tag = match e.kind {
            EdgeKind::Odometry => "EDGE_ODOM",
            EdgeKind::Loop => "EDGE_LOOP",
        };
        let info = e
            .covariance
            .try_inverse()
            .ok_or(BackendError::NonSpdCovariance)?;
        let t = e.measurement.translation();
        let q = e.measurement.rotation();
        let mut line = format!(
            "{tag} {} {} {} {} {} {} {} {} {}",
            fmt_key(&e.from), fmt_key(&e.to), t.x, t.y, t.z, q.i, q.j, q.k, q.w
        );
        for i in 0..6 {
            for j in i..6 {
                let _ = write!(line, " {}", info[(i, j)]);
            }
        }
        let _ = writeln!(out, "{line}");
    }
    Ok(out)
}

pub fn load_pose_graph<R: BufRead>(reader: R) -> Result<PoseGraph, BackendError> {
    let mut graph = PoseGraph::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with('#') {
            continue;
        }
        let parse_f = |s: &str| -> Result<f64, BackendError> {
            s.parse()
                .map_err(|_| BackendError::Parse(lineno, format!("non-numeric field '{s}'")))
        };
        match fields[0] {
            "NODE" => {
                if fields.len() != 9 {
                    return Err(BackendError::Parse(lineno, "NODE needs 9 fields".into()));
                }
                let key = parse_key(fields[1], lineno)?;
                let vals: Vec<f64> =
                    fields[2..].iter().map(|s| parse_f(s)).collect::<Result<_, _>>()?;
                let q = nalgebra::Quaternion::new(vals[6], vals[3], vals[4], vals[5]);
                graph.nodes.insert(
                    key,
                    SE3Pose::new(
                        nalgebra::UnitQuaternion::new_normalize(q),
                        nalgebra::Vector3::new(vals[0], vals[1], vals[2]),
                    ),
                );
            }
            "FIX" => {
                if fields.len() != 2 {
                    return Err(BackendError::Parse(lineno, "FIX needs 2 fields".into()));
                }
                graph.fixed.insert(parse_key(fields[1], lineno)?);
            }
            "EDGE_ODOM" | "EDGE_LOOP" => {
                if fields.len() != 3 + 7 + 21 {
                    return Err(BackendError::Parse(
                        lineno,
                        format!("{} needs 31 fields, got {}", fields[0], fields.len()),
                    ));
                }
                let from = parse_key(fields[1], lineno)?;
                let to = parse_key(fields[2], lineno)?;
                let vals: Vec<f64> =
                    fields[3..].iter().map(|s| parse_f(s)).collect::<Result<_, _>>()?;
                let q = nalgebra::Quaternion::new(vals[6], vals[3], vals[4], vals[5]);
                let mut info = Matrix6::zeros();
                let mut idx = 7;
                for i in 0..6 {
                    for j in i..6 {
                        info[(i, j)] = vals[idx];
                        info[(j, i)] = vals[idx];
                        idx += 1;
                    }
                }
                let covariance = info
                    .try_inverse()
                    .ok_or(BackendError::NonSpdCovariance)?;
                graph.edges.push(PoseGraphEdge {
                    from,
                    to,
                    measurement: SE3Pose::new(
                        nalgebra::UnitQuaternion::new_normalize(q),
                        nalgebra::Vector3::new(vals[0], vals[1], vals[2]),
                    ),
                    covariance,
                    kind: if fields[0] == "EDGE_ODOM" {
                        EdgeKind::Odometry
                    } else {
                        EdgeKind::Loop
                    },
                });
            }
            other => {
                return Err(BackendError::Parse(lineno, format!("unknown record '{other}'")));
            }
        }
    }
    Ok(graph)
}
