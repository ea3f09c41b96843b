//! Object-level SE(3) pose graph with virtual ICP measurements and robust
//! Levenberg-Marquardt optimisation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::geometry::{adjoint, se3_exp, se3_log, se3_right_jacobian_inverse, Pose, Twist};
use crate::tracking::{solve_step, TargetSystem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Camera(u32),
    Object(u32),
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Camera(i) => write!(f, "c{i}"),
            NodeId::Object(i) => write!(f, "o{i}"),
        }
    }
}

impl FromStr for NodeId {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self, GraphError> {
        let bad = || GraphError::Parse(format!("bad node id {s:?}"));
        let (kind, num) = s.split_at_checked(1).ok_or_else(bad)?;
        let n: u32 = num.parse().map_err(|_| bad())?;
        match kind {
            "c" => Ok(NodeId::Camera(n)),
            "o" => Ok(NodeId::Object(n)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error("node {0} already exists")]
    Duplicate(NodeId),
    #[error("node {0} does not exist")]
    Missing(NodeId),
    #[error("edge information is not symmetric positive semi-definite")]
    BadInformation,
    #[error("graph dump parse error: {0}")]
    Parse(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub id: NodeId,
    /// Node to world.
    pub state: Pose,
    pub fixed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEdge {
    pub from: NodeId,
    pub to: NodeId,
    /// Pose of `to` in the frame of `from`.
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimizerParams {
    pub huber_threshold: f64,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub min_relative_decrease: f64,
    pub min_step: f64,
    pub max_iterations: usize,
    pub robust: bool,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            huber_threshold: 1.0,
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            min_relative_decrease: 1e-9,
            min_step: 1e-10,
            max_iterations: 100,
            robust: true,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Nodes with no path to the fixed node; never modified.
    pub disconnected: Vec<NodeId>,
}

/// Camera-relative measurement from one target's partitioned ICP system:
/// one Gauss-Newton step refines the camera pose, the measurement is the
/// refined camera seen from the target, and the information is the ICP
/// Hessian moved into the right-perturbation tangent space.
pub fn make_virtual_measurement(
    system: &TargetSystem,
    camera_pose: &Pose,
    target_pose: &Pose,
    max_condition: f64,
) -> Option<(Pose, Matrix6<f64>)> {
    if system.valid_count < 6 {
        return None;
    }
    let step = solve_step(&system.jtj, &system.jtr, max_condition)?;
    let refined = se3_exp(&Twist(step)).compose(camera_pose);
    let measurement = target_pose.inverse().compose(&refined);
    let adj = adjoint(&refined);
    let info = adj.transpose() * system.jtj * adj;
    Some((measurement, 0.5 * (info + info.transpose())))
}

fn huber(s: f64, k: f64) -> (f64, f64) {
    if s <= k {
        (s, 1.0)
    } else {
        let r = s.sqrt();
        let kr = k.sqrt();
        (2.0 * kr * r - k, kr / r)
    }
}

#[derive(Clone, Debug, Default)]
pub struct PoseGraph {
    nodes: BTreeMap<NodeId, GraphNode>,
    edges: Vec<GraphEdge>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn node(&self, id: NodeId) -> Option<&GraphNode> {
        self.nodes.get(&id)
    }

    pub fn state(&self, id: NodeId) -> Option<Pose> {
        self.nodes.get(&id).map(|n| n.state)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn last_camera(&self) -> Option<NodeId> {
        self.nodes
            .keys()
            .rev()
            .find(|id| matches!(id, NodeId::Camera(_)))
            .copied()
    }

    /// The first camera node becomes the fixed world origin.
    pub fn add_camera_node(&mut self, frame: u32, state: Pose) -> Result<NodeId, GraphError> {
        let id = NodeId::Camera(frame);
        if self.nodes.contains_key(&id) {
            return Err(GraphError::Duplicate(id));
        }
        let first = !self.nodes.values().any(|n| matches!(n.id, NodeId::Camera(_)));
        let (state, fixed) = if first { (Pose::identity(), true) } else { (state, false) };
        self.nodes.insert(id, GraphNode { id, state, fixed });
        Ok(id)
    }

    pub fn add_object_node(&mut self, object: u32, state: Pose) -> Result<NodeId, GraphError> {
        let id = NodeId::Object(object);
        if self.nodes.contains_key(&id) {
            return Err(GraphError::Duplicate(id));
        }
        self.nodes.insert(
            id,
            GraphNode {
                id,
                state,
                fixed: false,
            },
        );
        Ok(id)
    }

    pub fn add_edge(
        &mut self,
        from: NodeId,
        to: NodeId,
        measurement: Pose,
        information: Matrix6<f64>,
    ) -> Result<(), GraphError> {
        for id in [from, to] {
            if !self.nodes.contains_key(&id) {
                return Err(GraphError::Missing(id));
            }
        }
        if (information - information.transpose()).amax() > 1e-9 * information.amax().max(1.0)
            || information.symmetric_eigenvalues().min() < -1e-9 * information.amax().max(1.0)
        {
            return Err(GraphError::BadInformation);
        }
        self.edges.push(GraphEdge {
            from,
            to,
            measurement,
            information,
        });
        Ok(())
    }

    pub fn set_state(&mut self, id: NodeId, state: Pose) -> Result<(), GraphError> {
        let n = self.nodes.get_mut(&id).ok_or(GraphError::Missing(id))?;
        n.state = state;
        Ok(())
    }

    /// Moves object `o` to a recentred frame `O'` given `T_O'O`, keeping
    /// every edge error unchanged.
    pub fn recentre_object(&mut self, object: u32, new_from_old: &Pose) -> Result<(), GraphError> {
        let id = NodeId::Object(object);
        let n = self.nodes.get_mut(&id).ok_or(GraphError::Missing(id))?;
        n.state = n.state.compose(&new_from_old.inverse());
        for e in &mut self.edges {
            if e.from == id {
                e.measurement = new_from_old.compose(&e.measurement);
            }
            if e.to == id {
                e.measurement = e.measurement.compose(&new_from_old.inverse());
            }
        }
        Ok(())
    }

    pub fn remove_object(&mut self, object: u32) {
        let id = NodeId::Object(object);
        self.nodes.remove(&id);
        self.edges.retain(|e| e.from != id && e.to != id);
    }

    /// Tangent-space error of an edge at the given states.
    pub fn edge_error(edge: &GraphEdge, from: &Pose, to: &Pose) -> Twist {
        let rel = edge.measurement.inverse().compose(&from.inverse().compose(to));
        se3_log(&rel).unwrap_or_else(|_| {
            // exactly pi: nudge off the cut locus
            se3_log(&rel.compose(&se3_exp(&Twist::new(Vector3::zeros(), Vector3::new(1e-9, 0.0, 0.0)))))
                .expect("log defined away from pi")
        })
    }

    pub fn edge_errors(&self) -> Vec<Twist> {
        self.edges
            .iter()
            .map(|e| Self::edge_error(e, &self.nodes[&e.from].state, &self.nodes[&e.to].state))
            .collect()
    }

    /// Sum of (optionally Huber-robustified) squared Mahalanobis errors.
    pub fn total_error(&self, params: &OptimizerParams) -> f64 {
        self.cost_with(&|id| self.nodes[&id].state, params)
    }

    fn cost_with(&self, state: &dyn Fn(NodeId) -> Pose, params: &OptimizerParams) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let err = Self::edge_error(e, &state(e.from), &state(e.to)).0;
                let s = (err.transpose() * e.information * err)[0];
                if params.robust {
                    huber(s, params.huber_threshold).0
                } else {
                    s
                }
            })
            .sum()
    }

    fn reachable_from_fixed(&self) -> BTreeSet<NodeId> {
        let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for e in &self.edges {
            adj.entry(e.from).or_default().push(e.to);
            adj.entry(e.to).or_default().push(e.from);
        }
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<NodeId> = self.nodes.values().filter(|n| n.fixed).map(|n| n.id).collect();
        while let Some(n) = queue.pop_front() {
            if !seen.insert(n) {
                continue;
            }
            for &m in adj.get(&n).into_iter().flatten() {
                if !seen.contains(&m) {
                    queue.push_back(m);
                }
            }
        }
        seen
    }

    /// Robust Levenberg-Marquardt over every free node connected to the
    /// fixed node, with right-multiplied updates.
    pub fn optimize(&mut self, params: &OptimizerParams) -> OptimizeReport {
        let reach = self.reachable_from_fixed();
        let disconnected: Vec<NodeId> = self.nodes.keys().filter(|id| !reach.contains(id)).copied().collect();
        let free: Vec<NodeId> = self
            .nodes
            .values()
            .filter(|n| !n.fixed && reach.contains(&n.id))
            .map(|n| n.id)
            .collect();
        let slot: BTreeMap<NodeId, usize> = free.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let active: Vec<&GraphEdge> = self
            .edges
            .iter()
            .filter(|e| reach.contains(&e.from) && reach.contains(&e.to))
            .collect();
        let n = 6 * free.len();
        let mut states: BTreeMap<NodeId, Pose> = self.nodes.iter().map(|(&id, n)| (id, n.state)).collect();
        let cost_of = |s: &BTreeMap<NodeId, Pose>| self.cost_with(&|id| s[&id], params);
        let mut cost = cost_of(&states);
        let mut report = OptimizeReport {
            initial_cost: cost,
            final_cost: cost,
            disconnected,
            iterations: 0,
        };
        if n == 0 || active.is_empty() {
            return report;
        }
        let mut lambda = params.initial_lambda;
        let mut rebuild = true;
        let mut h = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        while report.iterations < params.max_iterations {
            report.iterations += 1;
            if rebuild {
                h.fill(0.0);
                b.fill(0.0);
                for e in &active {
                    let (tf, tt) = (states[&e.from], states[&e.to]);
                    let err = Self::edge_error(e, &tf, &tt);
                    let e6 = err.0;
                    let s = (e6.transpose() * e.information * e6)[0];
                    let w = if params.robust {
                        huber(s, params.huber_threshold).1
                    } else {
                        1.0
                    };
                    let jr = se3_right_jacobian_inverse(&err);
                    let j_to = jr;
                    let j_from = -jr * adjoint(&tt.inverse().compose(&tf));
                    let blocks = [(e.from, j_from), (e.to, j_to)];
                    for (a, ja) in &blocks {
                        let Some(&ia) = slot.get(a) else { continue };
                        let jh = ja.transpose() * e.information * w;
                        let mut seg = b.fixed_rows_mut::<6>(6 * ia);
                        seg += jh * e6;
                        for (c, jc) in &blocks {
                            let Some(&ic) = slot.get(c) else { continue };
                            let mut blk = h.fixed_view_mut::<6, 6>(6 * ia, 6 * ic);
                            blk += jh * jc;
                        }
                    }
                }
                rebuild = false;
            }
            let mut damped = h.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= params.lambda_up;
                continue;
            };
            let delta = chol.solve(&(-&b));
            let mut trial = states.clone();
            for (&id, &i) in &slot {
                let d = Twist(Vector6::from_iterator(delta.rows(6 * i, 6).iter().copied()));
                trial.insert(id, states[&id].perturb_right(&d));
            }
            let new_cost = cost_of(&trial);
            if new_cost < cost {
                let decrease = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                states = trial;
                cost = new_cost;
                lambda *= params.lambda_down;
                rebuild = true;
                if decrease < params.min_relative_decrease || delta.norm() < params.min_step {
                    break;
                }
            } else {
                lambda *= params.lambda_up;
                if delta.norm() < params.min_step || lambda > 1e20 {
                    break;
                }
            }
        }
        for (&id, &s) in &states {
            if slot.contains_key(&id) {
                self.nodes.get_mut(&id).unwrap().state = s.renormalized();
            }
        }
        report.final_cost = self.total_error(params);
        report
    }

    /// Line-oriented text dump.
    ///
    /// `VERTEX <id> <camera|object> <fixed 0|1> tx ty tz qx qy qz qw`
    /// `EDGE <from> <to> tx ty tz qx qy qz qw h11 h12 .. h16 h22 .. h66`
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let pose7 = |p: &Pose| {
            let q = p.quaternion();
            format!(
                "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w
            )
        };
        for n in self.nodes.values() {
            let kind = match n.id {
                NodeId::Camera(_) => "camera",
                NodeId::Object(_) => "object",
            };
            out += &format!("VERTEX {} {} {} {}\n", n.id, kind, n.fixed as u8, pose7(&n.state));
        }
        for e in &self.edges {
            let mut info = Vec::with_capacity(21);
            for r in 0..6 {
                for c in r..6 {
                    info.push(format!("{:.9e}", e.information[(r, c)]));
                }
            }
            out += &format!("EDGE {} {} {} {}\n", e.from, e.to, pose7(&e.measurement), info.join(" "));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut g = PoseGraph::new();
        let num = |s: &str| s.parse::<f64>().map_err(|_| GraphError::Parse(format!("bad number {s:?}")));
        let pose = |f: &[&str]| -> Result<Pose, GraphError> {
            let v: Vec<f64> = f.iter().map(|s| num(s)).collect::<Result<_, _>>()?;
            let q = UnitQuaternion::from_quaternion(Quaternion::new(v[6], v[3], v[4], v[5]));
            Ok(Pose::from_quaternion(Vector3::new(v[0], v[1], v[2]), &q))
        };
        for (ln, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.first() {
                None => continue,
                Some(&"VERTEX") if f.len() == 11 => {
                    let id: NodeId = f[1].parse()?;
                    if g.nodes.contains_key(&id) {
                        return Err(GraphError::Duplicate(id));
                    }
                    g.nodes.insert(
                        id,
                        GraphNode {
                            id,
                            state: pose(&f[4..11])?,
                            fixed: f[3] == "1",
                        },
                    );
                }
                Some(&"EDGE") if f.len() == 31 => {
                    let mut info = Matrix6::zeros();
                    let mut k = 10;
                    for r in 0..6 {
                        for c in r..6 {
                            info[(r, c)] = num(f[k])?;
                            info[(c, r)] = info[(r, c)];
                            k += 1;
                        }
                    }
                    g.add_edge(f[1].parse()?, f[2].parse()?, pose(&f[3..10])?, info)?;
                }
                _ => return Err(GraphError::Parse(format!("line {}: {line:?}", ln + 1))),
            }
        }
        Ok(g)
    }
}
