//! Lattice DAG construction.
//!
//! The cyclic pixel-neighborhood graph of an `m x m` window cannot drive a
//! recurrence directly, so it is approximated by four directed acyclic
//! lattice graphs, one per scan direction. Each DAG routes information from
//! one corner of the window (the source) to the opposite corner (the sink),
//! and the window of each direction is placed inside the full patch so that
//! every sink lands on the patch center.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Scan direction, named after the corner holding the sink vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Southeast,
    Southwest,
    Northeast,
    Northwest,
}

impl Direction {
    /// Fixed order used everywhere a per-direction collection is indexed or
    /// fused (feature concatenation, parameter layout, checkpoints).
    pub const ALL: [Direction; 4] = [
        Direction::Southeast,
        Direction::Southwest,
        Direction::Northeast,
        Direction::Northwest,
    ];

    pub fn index(self) -> usize {
        match self {
            Direction::Southeast => 0,
            Direction::Southwest => 1,
            Direction::Northeast => 2,
            Direction::Northwest => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Southeast => "southeast",
            Direction::Southwest => "southwest",
            Direction::Northeast => "northeast",
            Direction::Northwest => "northwest",
        }
    }

    pub fn parse(s: &str) -> Option<Direction> {
        Direction::ALL.into_iter().find(|d| d.name() == s)
    }

    /// Axis reflections that carry the southeast scan onto this direction.
    fn flips(self) -> (bool, bool) {
        match self {
            Direction::Southeast => (false, false),
            Direction::Southwest => (false, true),
            Direction::Northeast => (true, false),
            Direction::Northwest => (true, true),
        }
    }
}

/// Neighborhood used to derive predecessor sets: `Eight` keeps the diagonal
/// arc (up to 3 predecessors per vertex), `Four` drops it (up to 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn max_preds(self) -> usize {
        match self {
            Connectivity::Four => 2,
            Connectivity::Eight => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Connectivity::Four => "four",
            Connectivity::Eight => "eight",
        }
    }

    pub fn parse(s: &str) -> Option<Connectivity> {
        match s {
            "four" => Some(Connectivity::Four),
            "eight" => Some(Connectivity::Eight),
            _ => None,
        }
    }
}

/// One direction's lattice DAG over an `m x m` window.
///
/// `order` is a topological evaluation order (row-by-row scan from the source
/// corner toward the sink corner), `preds` is indexed by vertex id
/// `row * m + col`, and `sink` is the unique vertex without successors.
#[derive(Debug, Clone, PartialEq)]
pub struct DagTopology {
    pub m: usize,
    pub direction: Direction,
    pub connectivity: Connectivity,
    pub order: Vec<(usize, usize)>,
    pub preds: Vec<Vec<(usize, usize)>>,
    pub sink: (usize, usize),
}

impl DagTopology {
    #[inline]
    pub fn vertex_id(&self, row: usize, col: usize) -> usize {
        row * self.m + col
    }

    pub fn vertex_count(&self) -> usize {
        self.m * self.m
    }

    pub fn arc_count(&self) -> usize {
        self.preds.iter().map(Vec::len).sum()
    }

    /// Closed-form arc count of a freshly built lattice DAG.
    pub fn expected_arc_count(m: usize, connectivity: Connectivity) -> usize {
        if m == 0 {
            return 0;
        }
        let k = m - 1;
        match connectivity {
            Connectivity::Eight => 3 * k * k + 2 * k,
            Connectivity::Four => 2 * k * k + 2 * k,
        }
    }
}

/// Builds the lattice DAG for one direction.
///
/// The southeast predecessor set of an interior vertex `(i, j)` is
/// `{(i-1, j-1), (i-1, j), (i, j-1)}` (the diagonal is dropped under
/// four-connectivity); the other three directions are the axis reflections
/// of that rule, with the sink at the matching corner.
pub fn build_dag(m: usize, direction: Direction, connectivity: Connectivity) -> Result<DagTopology> {
    if m == 0 {
        return Err(Error::invalid("memory length m must be at least 1"));
    }
    let (flip_r, flip_c) = direction.flips();
    let map = |i: usize, j: usize| {
        (
            if flip_r { m - 1 - i } else { i },
            if flip_c { m - 1 - j } else { j },
        )
    };

    let mut order = Vec::with_capacity(m * m);
    let mut preds = vec![Vec::new(); m * m];
    for i in 0..m {
        for j in 0..m {
            let v = map(i, j);
            order.push(v);
            let mut ps = Vec::with_capacity(connectivity.max_preds());
            if connectivity == Connectivity::Eight && i > 0 && j > 0 {
                ps.push(map(i - 1, j - 1));
            }
            if i > 0 {
                ps.push(map(i - 1, j));
            }
            if j > 0 {
                ps.push(map(i, j - 1));
            }
            preds[v.0 * m + v.1] = ps;
        }
    }

    Ok(DagTopology {
        m,
        direction,
        connectivity,
        order,
        preds,
        sink: map(m - 1, m - 1),
    })
}

/// The four directional DAGs of one window size, indexed by [`Direction`].
#[derive(Debug, Clone)]
pub struct DagSet {
    dags: [DagTopology; 4],
}

impl DagSet {
    pub fn build(m: usize, connectivity: Connectivity) -> Result<DagSet> {
        let build = |d| build_dag(m, d, connectivity);
        Ok(DagSet {
            dags: [
                build(Direction::Southeast)?,
                build(Direction::Southwest)?,
                build(Direction::Northeast)?,
                build(Direction::Northwest)?,
            ],
        })
    }

    #[inline]
    pub fn get(&self, direction: Direction) -> &DagTopology {
        &self.dags[direction.index()]
    }

    pub fn m(&self) -> usize {
        self.dags[0].m
    }

    pub fn connectivity(&self) -> Connectivity {
        self.dags[0].connectivity
    }
}

/// Placement of the four `m x m` windows inside an `n x n` patch
/// (`m = (n + 1) / 2`). Every window contains the patch center, and the
/// center sits at the window corner matching the direction's sink.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDecomposition {
    pub n: usize,
    pub m: usize,
    windows: [(usize, usize); 4],
}

impl PatchDecomposition {
    /// (row, col) offset of a direction's window inside the patch.
    pub fn window_offset(&self, direction: Direction) -> (usize, usize) {
        self.windows[direction.index()]
    }

    /// The target pixel, in patch coordinates.
    pub fn center(&self) -> (usize, usize) {
        ((self.n - 1) / 2, (self.n - 1) / 2)
    }
}

/// Splits an odd `n x n` patch into the four overlapping windows.
pub fn decompose_patch(n: usize) -> Result<PatchDecomposition> {
    if n == 0 || n % 2 == 0 {
        return Err(Error::invalid(format!(
            "patch side must be odd and positive, got {n}"
        )));
    }
    let m = (n + 1) / 2;
    let c = (n - 1) / 2;
    Ok(PatchDecomposition {
        n,
        m,
        // Indexed by Direction::ALL order: SE, SW, NE, NW.
        windows: [(0, 0), (0, c), (c, 0), (c, c)],
    })
}

/// Checks every structural invariant of a topology and reports violations.
/// An output of [`build_dag`] always comes back clean; the function exists to
/// vet hand-built or mutated topologies.
pub fn topology_diagnostics(dag: &DagTopology) -> Vec<String> {
    let mut issues = Vec::new();
    let m = dag.m;
    if m == 0 {
        issues.push(String::from("m is zero"));
        return issues;
    }
    let n_vertices = m * m;

    if dag.order.len() != n_vertices {
        issues.push(format!(
            "order has {} entries, expected {n_vertices}",
            dag.order.len()
        ));
    }
    if dag.preds.len() != n_vertices {
        issues.push(format!(
            "preds has {} entries, expected {n_vertices}",
            dag.preds.len()
        ));
    }

    let in_range = |(r, c): (usize, usize)| r < m && c < m;

    // Distinct, in-range coordinates in the order.
    let mut position = vec![usize::MAX; n_vertices];
    for (pos, &v) in dag.order.iter().enumerate() {
        if !in_range(v) {
            issues.push(format!("order[{pos}] = {v:?} is out of range"));
            continue;
        }
        let id = v.0 * m + v.1;
        if position[id] != usize::MAX {
            issues.push(format!("vertex {v:?} appears twice in order"));
        }
        position[id] = pos;
    }
    if position.iter().any(|&p| p == usize::MAX) {
        issues.push(String::from("order does not cover every vertex"));
    }

    // Predecessors: in range, within degree bounds, strictly earlier in order.
    let max_preds = dag.connectivity.max_preds();
    for (id, ps) in dag.preds.iter().enumerate() {
        let v = (id / m, id % m);
        if ps.len() > max_preds {
            issues.push(format!(
                "vertex {v:?} has {} predecessors, limit is {max_preds}",
                ps.len()
            ));
        }
        for (k, &p) in ps.iter().enumerate() {
            if !in_range(p) {
                issues.push(format!("predecessor {p:?} of {v:?} is out of range"));
                continue;
            }
            if ps[..k].contains(&p) {
                issues.push(format!("duplicate predecessor {p:?} of {v:?}"));
            }
            let (pp, vp) = (position[p.0 * m + p.1], position[id]);
            if pp != usize::MAX && vp != usize::MAX && pp >= vp {
                issues.push(format!(
                    "predecessor {p:?} does not precede {v:?} in the order"
                ));
            }
        }
    }

    // Sink: last in order, no successors.
    if dag.order.last() != Some(&dag.sink) {
        issues.push(format!("sink {:?} is not the last vertex in order", dag.sink));
    }
    if in_range(dag.sink) {
        let sink_id = dag.sink.0 * m + dag.sink.1;
        let has_successor = dag
            .preds
            .iter()
            .any(|ps| ps.iter().any(|&p| p.0 * m + p.1 == sink_id));
        if has_successor {
            issues.push(format!("sink {:?} has outgoing arcs", dag.sink));
        }
    } else {
        issues.push(format!("sink {:?} is out of range", dag.sink));
    }

    // Independent acyclicity check (Kahn's algorithm over the arc set).
    let mut indegree = vec![0usize; n_vertices];
    let mut successors = vec![Vec::new(); n_vertices];
    let mut arcs_ok = true;
    for (id, ps) in dag.preds.iter().enumerate() {
        for &p in ps {
            if in_range(p) {
                successors[p.0 * m + p.1].push(id);
                indegree[id] += 1;
            } else {
                arcs_ok = false;
            }
        }
    }
    if arcs_ok {
        let mut queue: Vec<usize> = (0..n_vertices).filter(|&v| indegree[v] == 0).collect();
        let mut visited = 0;
        while let Some(v) = queue.pop() {
            visited += 1;
            for &s in &successors[v] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    queue.push(s);
                }
            }
        }
        if visited != n_vertices {
            issues.push(String::from("arc set contains a cycle"));
        }
    }

    // Arc count formula.
    let expected = DagTopology::expected_arc_count(m, dag.connectivity);
    if dag.arc_count() != expected {
        issues.push(format!(
            "arc count {} does not match expected {expected}",
            dag.arc_count()
        ));
    }

    issues
}

/// True iff all topology invariants hold.
pub fn validate_topology(dag: &DagTopology) -> bool {
    topology_diagnostics(dag).is_empty()
}
