//! SE(3) pose graph over local maps and the broadcast of optimized poses back into the map.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix6, Quaternion, Rotation3, Translation3, UnitQuaternion, Vector6};

use crate::geometry::{adjoint, se3_exp, se3_log, skew, GeometryError, Isometry3, Twist};
use crate::map::{transform_point, LocalMapId, WorldMap};
use crate::relocalizer::ClosureConstraint;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Closure,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub id: LocalMapId,
    /// Map-to-world pose.
    pub pose: Isometry3,
    pub fixed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEdge {
    pub from: LocalMapId,
    pub to: LocalMapId,
    /// Pose of `to` expressed in `from`.
    pub measurement: Isometry3,
    pub information: Matrix6<f64>,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("unknown node {0:?}")]
    UnknownNode(LocalMapId),
    #[error("unconstrained nodes: {0:?}")]
    Unconstrained(Vec<LocalMapId>),
    #[error("graph has no fixed node")]
    NoFixedNode,
    #[error("normal equations are singular")]
    Singular,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphConfig {
    /// Odometry information, translation block first.
    pub odometry_information: Matrix6<f64>,
    pub closure_translation_scale: f64,
    pub iterations: usize,
    pub min_update_norm: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            odometry_information: Matrix6::from_diagonal(&Vector6::new(100.0, 100.0, 100.0, 1000.0, 1000.0, 1000.0)),
            closure_translation_scale: 0.01,
            iterations: 50,
            min_update_norm: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizationSummary {
    pub iterations: usize,
    pub initial_chi2: f64,
    pub final_chi2: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseGraph {
    nodes: Vec<GraphNode>,
    index: BTreeMap<LocalMapId, usize>,
    edges: Vec<GraphEdge>,
    config: Option<GraphConfig>,
}

impl PoseGraph {
    pub fn new(config: GraphConfig) -> Self {
        Self { config: Some(config), ..Default::default() }
    }

    pub fn config(&self) -> GraphConfig {
        self.config.unwrap_or_default()
    }

    pub fn set_config(&mut self, config: GraphConfig) {
        self.config = Some(config);
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, id: LocalMapId) -> Option<&GraphNode> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn pose(&self, id: LocalMapId) -> Option<Isometry3> {
        self.node(id).map(|n| n.pose)
    }

    pub fn set_pose(&mut self, id: LocalMapId, pose: Isometry3) -> Result<(), GraphError> {
        let &i = self.index.get(&id).ok_or(GraphError::UnknownNode(id))?;
        self.nodes[i].pose = pose;
        Ok(())
    }

    /// Adds (or re-poses) a node. The first node added is the fixed gauge node.
    pub fn add_node(&mut self, id: LocalMapId, pose: Isometry3) {
        if let Some(&i) = self.index.get(&id) {
            self.nodes[i].pose = pose;
            return;
        }
        let fixed = self.nodes.is_empty();
        self.index.insert(id, self.nodes.len());
        self.nodes.push(GraphNode { id, pose, fixed });
    }

    /// Adds or replaces the edge between the ordered pair `(from, to)`.
    pub fn add_edge(&mut self, edge: GraphEdge) -> Result<(), GraphError> {
        for id in [edge.from, edge.to] {
            if !self.index.contains_key(&id) {
                return Err(GraphError::UnknownNode(id));
            }
        }
        match self.edges.iter_mut().find(|e| e.from == edge.from && e.to == edge.to) {
            Some(slot) => *slot = edge,
            None => self.edges.push(edge),
        }
        Ok(())
    }

    /// Constraint from the current relative pose of two nodes, with odometry information.
    pub fn add_odometry_edge(&mut self, prev: LocalMapId, curr: LocalMapId) -> Result<(), GraphError> {
        let a = self.pose(prev).ok_or(GraphError::UnknownNode(prev))?;
        let b = self.pose(curr).ok_or(GraphError::UnknownNode(curr))?;
        let information = self.config().odometry_information;
        self.add_edge(GraphEdge { from: prev, to: curr, measurement: a.inverse() * b, information, kind: EdgeKind::Odometry })
    }

    /// Loop closure edge from the older map `j` to the current map `i`, measuring `T_i2j`.
    pub fn add_closure_edge(&mut self, constraint: &ClosureConstraint) -> Result<(), GraphError> {
        let cfg = self.config();
        let mut information = cfg.odometry_information;
        information.fixed_view_mut::<3, 3>(0, 0).scale_mut(cfg.closure_translation_scale);
        self.add_edge(GraphEdge {
            from: constraint.map_j,
            to: constraint.map_i,
            measurement: constraint.t_i2j,
            information,
            kind: EdgeKind::Closure,
        })
    }

    fn edge_error(&self, e: &GraphEdge) -> Result<Twist, GeometryError> {
        let a = self.nodes[self.index[&e.from]].pose;
        let b = self.nodes[self.index[&e.to]].pose;
        se3_log(&(e.measurement.inverse() * a.inverse() * b))
    }

    pub fn edge_residual(&self, e: &GraphEdge) -> Result<Twist, GraphError> {
        Ok(self.edge_error(e)?)
    }

    /// Sum over edges of `eᵀ Ω e`.
    pub fn chi2(&self) -> f64 {
        self.edges
            .iter()
            .map(|e| match self.edge_error(e) {
                Ok(err) => (err.transpose() * e.information * err)[0],
                Err(_) => f64::INFINITY,
            })
            .sum()
    }

    /// Node ids with no edge path to a fixed node.
    pub fn unconstrained_nodes(&self) -> Vec<LocalMapId> {
        let mut adjacency: BTreeMap<LocalMapId, Vec<LocalMapId>> = BTreeMap::new();
        for e in &self.edges {
            adjacency.entry(e.from).or_default().push(e.to);
            adjacency.entry(e.to).or_default().push(e.from);
        }
        let mut seen: BTreeSet<LocalMapId> = self.nodes.iter().filter(|n| n.fixed).map(|n| n.id).collect();
        let mut queue: VecDeque<LocalMapId> = seen.iter().copied().collect();
        while let Some(n) = queue.pop_front() {
            for &m in adjacency.get(&n).into_iter().flatten() {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        self.nodes.iter().map(|n| n.id).filter(|id| !seen.contains(id)).collect()
    }

    /// Levenberg-Marquardt on left-multiplicative increments `T ← exp(δ)·T`.
    pub fn optimize(&mut self, iterations: usize) -> Result<OptimizationSummary, GraphError> {
        if !self.nodes.iter().any(|n| n.fixed) {
            return Err(GraphError::NoFixedNode);
        }
        let free = self.unconstrained_nodes();
        if !free.is_empty() {
            return Err(GraphError::Unconstrained(free));
        }
        let variables: Vec<usize> = (0..self.nodes.len()).filter(|&i| !self.nodes[i].fixed).collect();
        let mut slot = vec![None; self.nodes.len()];
        for (k, &i) in variables.iter().enumerate() {
            slot[i] = Some(k);
        }
        let initial_chi2 = self.chi2();
        let mut chi2 = initial_chi2;
        let dim = 6 * variables.len();
        if dim == 0 || self.edges.is_empty() {
            return Ok(OptimizationSummary { iterations: 0, initial_chi2, final_chi2: chi2 });
        }

        let mut lambda: Option<f64> = None;
        let mut done = 0;
        for _ in 0..iterations {
            done += 1;
            let (h, b) = self.normal_equations(&slot, dim)?;
            let scale = (0..dim).map(|i| h[(i, i)]).fold(0.0, f64::max).max(1e-12);
            let mut lam = *lambda.get_or_insert(1e-6 * scale);
            let mut accepted = false;
            let mut step_norm = f64::INFINITY;
            for _ in 0..12 {
                let mut damped = h.clone();
                for i in 0..dim {
                    damped[(i, i)] += lam;
                }
                let Some(chol) = damped.cholesky() else {
                    lam *= 10.0;
                    continue;
                };
                let dx = chol.solve(&(-&b));
                step_norm = dx.norm();
                let saved: Vec<Isometry3> = self.nodes.iter().map(|n| n.pose).collect();
                for (k, &i) in variables.iter().enumerate() {
                    let delta = Twist::from_iterator(dx.rows(6 * k, 6).iter().copied());
                    self.nodes[i].pose = se3_exp(&delta) * self.nodes[i].pose;
                }
                let trial = self.chi2();
                if trial <= chi2 {
                    chi2 = trial;
                    lam = (lam / 10.0).max(1e-12 * scale);
                    accepted = true;
                    break;
                }
                for (n, p) in self.nodes.iter_mut().zip(saved) {
                    n.pose = p;
                }
                lam *= 10.0;
            }
            lambda = Some(lam);
            if !accepted || step_norm < self.config().min_update_norm || chi2 == 0.0 {
                break;
            }
        }
        Ok(OptimizationSummary { iterations: done, initial_chi2, final_chi2: chi2 })
    }

    fn normal_equations(&self, slot: &[Option<usize>], dim: usize) -> Result<(DMatrix<f64>, DVector<f64>), GraphError> {
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for e in &self.edges {
            let (ia, ib) = (self.index[&e.from], self.index[&e.to]);
            let a = self.nodes[ia].pose;
            let err = self.edge_error(e)?;
            // d log(Z⁻¹ A⁻¹ exp(δ) B) ≈ Jl⁻¹ · Ad((A Z)⁻¹) δ, with Jl⁻¹ ≈ I − ½ ad(e).
            let ad = adjoint(&(a * e.measurement).inverse());
            let jinv = Matrix6::identity() - 0.5 * small_adjoint(&err);
            let jb = jinv * ad;
            let ja = -jb;
            let blocks = [(slot[ia], ja), (slot[ib], jb)];
            for (sa, ja_) in &blocks {
                let Some(ka) = sa else { continue };
                let jt_omega = ja_.transpose() * e.information;
                let g = jt_omega * err;
                for r in 0..6 {
                    b[6 * ka + r] += g[r];
                }
                for (sb, jb_) in &blocks {
                    let Some(kb) = sb else { continue };
                    let block = jt_omega * jb_;
                    let mut view = h.view_mut((6 * ka, 6 * kb), (6, 6));
                    view += block;
                }
            }
        }
        Ok((h, b))
    }

    /// Plain-text dump: `NODE id tx ty tz qx qy qz qw fixed` and
    /// `EDGE from to kind tx ty tz qx qy qz qw` followed by 21 upper-triangular information entries.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let _ = writeln!(out, "NODE {} {} {}", n.id.0, pose_fields(&n.pose), n.fixed as u8);
        }
        for e in &self.edges {
            let kind = match e.kind {
                EdgeKind::Odometry => "odometry",
                EdgeKind::Closure => "closure",
            };
            let mut info = Vec::with_capacity(21);
            for r in 0..6 {
                for c in r..6 {
                    info.push(format!("{:?}", e.information[(r, c)]));
                }
            }
            let _ = writeln!(out, "EDGE {} {} {} {} {}", e.from.0, e.to.0, kind, pose_fields(&e.measurement), info.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, GraphError> {
        let mut graph = PoseGraph::default();
        let mut edges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let err = |message: &str| GraphError::Parse { line: line_no, message: message.to_string() };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let Some(&tag) = fields.first() else { continue };
            let num = |i: usize| -> Result<f64, GraphError> {
                fields.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| err("bad number"))
            };
            let id = |i: usize| -> Result<LocalMapId, GraphError> {
                fields.get(i).and_then(|s| s.parse().ok()).map(LocalMapId).ok_or_else(|| err("bad id"))
            };
            match tag {
                "NODE" if fields.len() == 10 => {
                    let pose = parse_pose(&(1..8).map(|i| num(i + 1)).collect::<Result<Vec<_>, _>>()?);
                    let nid = id(1)?;
                    graph.index.insert(nid, graph.nodes.len());
                    graph.nodes.push(GraphNode { id: nid, pose, fixed: num(9)? != 0.0 });
                }
                "EDGE" if fields.len() == 4 + 7 + 21 => {
                    let kind = match fields[3] {
                        "odometry" => EdgeKind::Odometry,
                        "closure" => EdgeKind::Closure,
                        _ => return Err(err("unknown edge kind")),
                    };
                    let measurement = parse_pose(&(0..7).map(|i| num(4 + i)).collect::<Result<Vec<_>, _>>()?);
                    let mut information = Matrix6::zeros();
                    let mut k = 11;
                    for r in 0..6 {
                        for c in r..6 {
                            let v = num(k)?;
                            information[(r, c)] = v;
                            information[(c, r)] = v;
                            k += 1;
                        }
                    }
                    edges.push(GraphEdge { from: id(1)?, to: id(2)?, measurement, information, kind });
                }
                _ => return Err(err("unrecognized record")),
            }
        }
        for e in edges {
            graph.add_edge(e)?;
        }
        Ok(graph)
    }
}

/// `ad(ξ)` for a (translation, rotation) twist.
fn small_adjoint(xi: &Twist) -> Matrix6<f64> {
    let v = skew(&xi.fixed_rows::<3>(0).into_owned());
    let w = skew(&xi.fixed_rows::<3>(3).into_owned());
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&v);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
    m
}

fn pose_fields(t: &Isometry3) -> String {
    let q = UnitQuaternion::from_rotation_matrix(&t.rotation);
    let p = t.translation.vector;
    format!("{:?} {:?} {:?} {:?} {:?} {:?} {:?}", p.x, p.y, p.z, q.i, q.j, q.k, q.w)
}

fn parse_pose(v: &[f64]) -> Isometry3 {
    let q = UnitQuaternion::from_quaternion(Quaternion::new(v[6], v[3], v[4], v[5]));
    Isometry3::from_parts(Translation3::new(v[0], v[1], v[2]), q.to_rotation_matrix())
}

/// Pushes optimized node poses into the world: local maps take their node pose, frames
/// follow through their stored relative poses, and landmarks move rigidly with the map
/// that last observed them. Maps whose pose did not change are left untouched. Returns the
/// correction `ΔT = new · old⁻¹` of every map that moved.
pub fn broadcast_poses(world: &mut WorldMap) -> BTreeMap<LocalMapId, Isometry3> {
    let mut deltas = BTreeMap::new();
    for m in 0..world.local_maps.len() {
        let id = world.local_maps[m].id;
        let Some(new) = world.graph.pose(id) else { continue };
        let old = world.local_maps[m].t_c2w();
        if new == old {
            continue;
        }
        deltas.insert(id, new * old.inverse());
        world.local_maps[m].set_t_c2w(new);
        let map = &world.local_maps[m];
        let updates: Vec<_> = map.frames.iter().zip(&map.relative_frame_poses).map(|(&f, rel)| (f, new * rel)).collect();
        for (f, pose) in updates {
            world.frame_mut(f).set_pose_and_refresh(pose);
        }
    }
    for lm in &mut world.landmarks {
        let Some(delta) = lm.last_map.and_then(|m| deltas.get(&m)) else { continue };
        move_landmark(lm, delta);
    }
    deltas
}

/// Applies a rigid correction to a landmark and its filter state.
pub fn move_landmark(lm: &mut crate::map::Landmark, delta: &Isometry3) {
    let r: &Rotation3<f64> = &delta.rotation;
    let r = r.matrix();
    lm.p_w = transform_point(delta, &lm.p_w);
    lm.omega = r * lm.omega * r.transpose();
    lm.nu = lm.omega * lm.p_w;
}
