//! Forward construction from well-labeled four-type trees to rooted planar
//! maps, plus the half-edge map structure itself (faces, distances,
//! Boltzmann weight, canonical form).
//!
//! The construction walks the even-position contour corners. A corner of
//! type 1 with label 1 (or type 2 with label 0) is joined to the extra
//! vertex; every other corner is joined to the next type-1 corner whose
//! label is one less (type-1 corners) or equal (type-2 corners). Arcs nest,
//! so the rotation system can be read off corner clusters directly; type-2
//! vertices are never materialized, their two arcs fuse into one edge.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trees::{MultitypeSpatialTree, NodeType};
use crate::weights::WeightSequence;

#[derive(Debug, Error)]
pub enum BijectionError {
    #[error("tree is not a well-labeled mobile: {0}")]
    InvalidTree(String),
    #[error("invalid map encoding: {0}")]
    BadEncoding(String),
}

/// Rooted planar map as a rotation system on half-edges.
///
/// `alpha` is the fixed-point-free twin involution, `sigma` the
/// next-around-vertex rotation, `origin[h]` the vertex a half-edge leaves.
/// The degenerate vertex map (one vertex, no edges) has empty arrays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootedPlanarMap {
    alpha: Vec<u32>,
    sigma: Vec<u32>,
    origin: Vec<u32>,
    root: Option<u32>,
    n_vertices: usize,
}

#[derive(Serialize, Deserialize)]
struct MapDump {
    alpha: Vec<u32>,
    sigma: Vec<u32>,
    root: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    canonical: Option<String>,
}

impl RootedPlanarMap {
    /// The vertex map: one vertex, no edges, one face of degree zero.
    pub fn vertex_map() -> Self {
        Self { alpha: Vec::new(), sigma: Vec::new(), origin: Vec::new(), root: None, n_vertices: 1 }
    }

    pub fn is_vertex_map(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn half_edge_count(&self) -> usize {
        self.alpha.len()
    }

    pub fn edge_count(&self) -> usize {
        self.alpha.len() / 2
    }

    pub fn vertex_count(&self) -> usize {
        self.n_vertices
    }

    pub fn root_half_edge(&self) -> Option<u32> {
        self.root
    }

    /// Root vertex: origin of the root half-edge.
    pub fn root_vertex(&self) -> u32 {
        self.root.map_or(0, |h| self.origin[h as usize])
    }

    pub fn twin(&self, h: u32) -> u32 {
        self.alpha[h as usize]
    }

    pub fn next_around_vertex(&self, h: u32) -> u32 {
        self.sigma[h as usize]
    }

    pub fn origin_of(&self, h: u32) -> u32 {
        self.origin[h as usize]
    }

    /// Structural checks: involution without fixed points, sigma a
    /// permutation consistent with origins, connectivity, Euler formula.
    pub fn validate(&self) -> Result<(), BijectionError> {
        let n = self.alpha.len();
        if self.sigma.len() != n || self.origin.len() != n {
            return Err(BijectionError::BadEncoding("array lengths differ".into()));
        }
        if n == 0 {
            return if self.n_vertices == 1 && self.root.is_none() {
                Ok(())
            } else {
                Err(BijectionError::BadEncoding("empty map must be the vertex map".into()))
            };
        }
        if n % 2 != 0 {
            return Err(BijectionError::BadEncoding("odd number of half-edges".into()));
        }
        let root = self.root.ok_or_else(|| BijectionError::BadEncoding("missing root".into()))?;
        if root as usize >= n {
            return Err(BijectionError::BadEncoding("root out of range".into()));
        }
        let mut seen = vec![false; n];
        for h in 0..n as u32 {
            let a = self.alpha[h as usize];
            if a as usize >= n || a == h || self.alpha[a as usize] != h {
                return Err(BijectionError::BadEncoding(format!("alpha broken at {h}")));
            }
            let s = self.sigma[h as usize];
            if s as usize >= n {
                return Err(BijectionError::BadEncoding(format!("sigma out of range at {h}")));
            }
            if seen[s as usize] {
                return Err(BijectionError::BadEncoding("sigma is not a permutation".into()));
            }
            seen[s as usize] = true;
            if self.origin[s as usize] != self.origin[h as usize] {
                return Err(BijectionError::BadEncoding("sigma crosses vertices".into()));
            }
        }
        // connectivity under <alpha, sigma>
        let mut reach = vec![false; n];
        let mut stack = vec![root];
        reach[root as usize] = true;
        let mut count = 0;
        while let Some(h) = stack.pop() {
            count += 1;
            for nh in [self.alpha[h as usize], self.sigma[h as usize]] {
                if !reach[nh as usize] {
                    reach[nh as usize] = true;
                    stack.push(nh);
                }
            }
        }
        if count != n {
            return Err(BijectionError::BadEncoding("map is not connected".into()));
        }
        let v = self.n_vertices as i64;
        let e = (n / 2) as i64;
        let f = self.faces().len() as i64;
        if v - e + f != 2 {
            return Err(BijectionError::BadEncoding(format!("Euler check failed: {v} - {e} + {f} != 2")));
        }
        Ok(())
    }

    /// Face cycles as (face id, degree); orbits of sigma o alpha. Degrees
    /// sum to twice the edge count. The vertex map has one face of degree 0.
    pub fn faces(&self) -> Vec<(u32, u32)> {
        if self.is_vertex_map() {
            return vec![(0, 0)];
        }
        let n = self.alpha.len();
        let mut face_of = vec![u32::MAX; n];
        let mut out = Vec::new();
        let mut next_face = 0u32;
        for start in 0..n as u32 {
            if face_of[start as usize] != u32::MAX {
                continue;
            }
            let mut deg = 0u32;
            let mut h = start;
            loop {
                face_of[h as usize] = next_face;
                deg += 1;
                h = self.sigma[self.alpha[h as usize] as usize];
                if h == start {
                    break;
                }
            }
            out.push((next_face, deg));
            next_face += 1;
        }
        out
    }

    /// BFS distances from the root vertex, one entry per vertex.
    pub fn distances(&self) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.n_vertices];
        let o = self.root_vertex() as usize;
        dist[o] = 0;
        if self.is_vertex_map() {
            return dist;
        }
        let mut around: Vec<Vec<u32>> = vec![Vec::new(); self.n_vertices];
        for h in 0..self.alpha.len() as u32 {
            around[self.origin[h as usize] as usize].push(h);
        }
        let mut queue = std::collections::VecDeque::from([o]);
        while let Some(v) = queue.pop_front() {
            for &h in &around[v] {
                let w = self.origin[self.alpha[h as usize] as usize] as usize;
                if dist[w] == u32::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Product of face-degree weights; 1 for the vertex map by convention.
    /// A zero-weight degree yields 0, not an error.
    pub fn boltzmann_weight(&self, weights: &WeightSequence) -> f64 {
        if self.is_vertex_map() {
            return 1.0;
        }
        self.faces().iter().map(|&(_, d)| weights.weight(d)).product()
    }

    /// Canonical byte string: equal strings iff equal rooted maps.
    ///
    /// Half-edges are renumbered by a BFS from the root half-edge, reading
    /// each vertex's rotation from its entry half-edge; the string records
    /// vertex degrees in discovery order plus the twin involution in
    /// canonical numbering, which reconstructs (sigma, alpha, root).
    pub fn canonical_form(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.n_vertices as u32).to_le_bytes());
        let Some(root) = self.root else {
            return out;
        };
        let n = self.alpha.len();
        let mut he_canon = vec![u32::MAX; n];
        let mut entered = vec![false; self.n_vertices];
        let mut degrees = Vec::with_capacity(self.n_vertices);
        let mut order = Vec::with_capacity(n);
        let mut queue = std::collections::VecDeque::from([root]);
        entered[self.origin[root as usize] as usize] = true;
        let mut next_id = 0u32;
        while let Some(entry) = queue.pop_front() {
            if he_canon[entry as usize] != u32::MAX {
                continue;
            }
            let mut h = entry;
            let mut deg = 0u32;
            loop {
                he_canon[h as usize] = next_id;
                order.push(h);
                next_id += 1;
                deg += 1;
                let t = self.alpha[h as usize];
                let w = self.origin[t as usize] as usize;
                if !entered[w] {
                    entered[w] = true;
                    queue.push_back(t);
                }
                h = self.sigma[h as usize];
                if h == entry {
                    break;
                }
            }
            degrees.push(deg);
        }
        out.extend_from_slice(&(degrees.len() as u32).to_le_bytes());
        for d in degrees {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &h in &order {
            out.extend_from_slice(&he_canon[self.alpha[h as usize] as usize].to_le_bytes());
        }
        out
    }

    /// Hex of the canonical form, for NDJSON dumps.
    pub fn canonical_hex(&self) -> String {
        self.canonical_form().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One NDJSON line `{"alpha":[...],"sigma":[...],"root":h,"canonical":...}`.
    pub fn to_json_line(&self) -> String {
        let dump = MapDump {
            alpha: self.alpha.clone(),
            sigma: self.sigma.clone(),
            root: self.root,
            canonical: Some(self.canonical_hex()),
        };
        serde_json::to_string(&dump).unwrap()
    }

    /// Parses a dump line; origins are rebuilt from sigma orbits and the
    /// result is validated.
    pub fn from_json_line(line: &str) -> Result<Self, BijectionError> {
        let dump: MapDump = serde_json::from_str(line).map_err(|e| BijectionError::BadEncoding(e.to_string()))?;
        let n = dump.alpha.len();
        if dump.sigma.len() != n {
            return Err(BijectionError::BadEncoding("alpha/sigma lengths differ".into()));
        }
        if n == 0 {
            return if dump.root.is_none() {
                Ok(Self::vertex_map())
            } else {
                Err(BijectionError::BadEncoding("vertex map cannot carry a root".into()))
            };
        }
        let mut origin = vec![u32::MAX; n];
        let mut n_vertices = 0u32;
        for start in 0..n as u32 {
            if origin[start as usize] != u32::MAX {
                continue;
            }
            let mut h = start;
            loop {
                if h as usize >= n {
                    return Err(BijectionError::BadEncoding("sigma out of range".into()));
                }
                if origin[h as usize] != u32::MAX && h != start {
                    return Err(BijectionError::BadEncoding("sigma orbits collide".into()));
                }
                if origin[h as usize] != u32::MAX {
                    break;
                }
                origin[h as usize] = n_vertices;
                h = dump.sigma[h as usize];
                if h == start {
                    break;
                }
            }
            n_vertices += 1;
        }
        let map = Self {
            alpha: dump.alpha,
            sigma: dump.sigma,
            origin,
            root: dump.root,
            n_vertices: n_vertices as usize,
        };
        map.validate()?;
        Ok(map)
    }
}

/// Where an arc ends.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Target {
    Corner(u32),
    Boundary,
}

/// One end of an arc, before half-edge ids exist.
#[derive(Clone, Copy, PartialEq, Eq)]
enum End {
    Src(u32),
    Dst(u32),
}

/// The forward construction from a well-labeled mobile to a rooted planar
/// map. Vertices are the type-1 nodes plus the extra vertex; the root
/// half-edge leaves the extra vertex along the arc drawn at corner 0.
pub fn bdg_forward(tree: &MultitypeSpatialTree) -> Result<RootedPlanarMap, BijectionError> {
    if !tree.is_well_labeled() {
        let why = tree
            .check_mobile()
            .err()
            .map(|e| e.to_string())
            .unwrap_or_else(|| "root must be type 1 with label 1 and type-1 labels >= 1".to_string());
        return Err(BijectionError::InvalidTree(why));
    }
    if tree.len() == 1 {
        return Ok(RootedPlanarMap::vertex_map());
    }

    // corner sequence: even positions of the contour
    let cp = tree.contour();
    let corners: Vec<u32> = cp.nodes.iter().step_by(2).copied().collect();
    let xi = corners.len() - 1;

    // vertex ids: type-1 nodes in node order, extra vertex last
    let mut vertex_of_node = vec![u32::MAX; tree.len()];
    let mut n_type1 = 0u32;
    for u in 0..tree.len() {
        if tree.node_type(u) == NodeType::T1 {
            vertex_of_node[u] = n_type1;
            n_type1 += 1;
        }
    }
    let boundary_vertex = n_type1 as usize;
    let n_vertices = boundary_vertex + 1;

    // successor scan, backwards, tracking the nearest later type-1 corner per label
    let max_label = (0..tree.len()).map(|u| tree.label(u)).max().unwrap().max(1) as usize;
    let mut last_seen: Vec<Option<u32>> = vec![None; max_label + 1];
    let mut targets: Vec<Target> = vec![Target::Boundary; xi];
    for k in (0..xi).rev() {
        let next = corners[k + 1] as usize;
        if tree.node_type(next) == NodeType::T1 {
            last_seen[tree.label(next) as usize] = Some(k as u32 + 1);
        }
        let node = corners[k] as usize;
        let (ty, label) = (tree.node_type(node), tree.label(node));
        debug_assert!(ty.is_even_side());
        let to_boundary = match ty {
            NodeType::T1 => label == 1,
            _ => label == 0,
        };
        targets[k] = if to_boundary {
            Target::Boundary
        } else {
            let want = label - i64::from(ty == NodeType::T1);
            Target::Corner(last_seen[want as usize].expect("successor exists for well-labeled trees"))
        };
    }

    // ends per corner: incoming arcs, then the outgoing one
    let mut incoming: Vec<Vec<u32>> = vec![Vec::new(); xi + 1];
    let mut boundary_in: Vec<u32> = Vec::new();
    for a in 0..xi as u32 {
        match targets[a as usize] {
            Target::Corner(k) => incoming[k as usize].push(a),
            Target::Boundary => boundary_in.push(a),
        }
    }

    // rotation lists per vertex: corners in contour order; within a corner,
    // incoming ends by source descending (inner arcs nest later), then the
    // outgoing end; the extra vertex sees sources in descending order
    let mut rotations: Vec<Vec<End>> = vec![Vec::new(); n_vertices];
    for k in 0..=xi {
        let node = corners[k] as usize;
        if tree.node_type(node) != NodeType::T1 {
            continue; // type-2 source ends are never materialized
        }
        let v = vertex_of_node[node] as usize;
        for &a in incoming[k].iter().rev() {
            rotations[v].push(End::Dst(a));
        }
        if k < xi {
            rotations[v].push(End::Src(k as u32));
        }
    }
    for &a in boundary_in.iter().rev() {
        rotations[boundary_vertex].push(End::Dst(a));
    }

    // half-edge ids in rotation order
    let mut id_of_src = vec![u32::MAX; xi];
    let mut id_of_dst = vec![u32::MAX; xi];
    let mut sigma = Vec::new();
    let mut origin = Vec::new();
    for (v, rot) in rotations.iter().enumerate() {
        let base = sigma.len() as u32;
        for (i, &end) in rot.iter().enumerate() {
            let id = base + i as u32;
            match end {
                End::Src(a) => id_of_src[a as usize] = id,
                End::Dst(a) => id_of_dst[a as usize] = id,
            }
            sigma.push(if i + 1 == rot.len() { base } else { id + 1 });
            origin.push(v as u32);
        }
    }

    // twin pairing; the two arcs of each type-2 node fuse into one edge
    let mut alpha = vec![u32::MAX; sigma.len()];
    let mut pending_fuse: Vec<Option<u32>> = vec![None; tree.len()];
    for a in 0..xi as u32 {
        let src_node = corners[a as usize] as usize;
        match tree.node_type(src_node) {
            NodeType::T1 => {
                let (s, d) = (id_of_src[a as usize], id_of_dst[a as usize]);
                alpha[s as usize] = d;
                alpha[d as usize] = s;
            }
            NodeType::T2 => {
                let d = id_of_dst[a as usize];
                match pending_fuse[src_node].take() {
                    None => pending_fuse[src_node] = Some(d),
                    Some(first) => {
                        alpha[first as usize] = d;
                        alpha[d as usize] = first;
                    }
                }
            }
            _ => unreachable!("corners are even-side"),
        }
    }
    debug_assert!(pending_fuse.iter().all(|p| p.is_none()));
    debug_assert!(alpha.iter().all(|&x| x != u32::MAX));

    // root: the extra-vertex end of the corner-0 arc (corner 0 is the root
    // node with label 1, so its arc always reaches the extra vertex)
    debug_assert_eq!(targets[0], Target::Boundary);
    let root = id_of_dst[0];

    let map = RootedPlanarMap { alpha, sigma, origin, root: Some(root), n_vertices };
    debug_assert!(map.validate().is_ok());
    Ok(map)
}

/// Map vertex index of each type-1 tree node (tree-node order); the extra
/// vertex takes the last index. For tests comparing distances to labels.
pub fn type1_vertex_ids(tree: &MultitypeSpatialTree) -> Vec<Option<u32>> {
    let mut ids = vec![None; tree.len()];
    let mut next = 0u32;
    for u in 0..tree.len() {
        if tree.node_type(u) == NodeType::T1 {
            ids[u] = Some(next);
            next += 1;
        }
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trees::{Condition, Direction, GwSampler};
    use crate::weights::{build_offspring, solve_fixed_point, SolveOptions, WeightSequence};

    fn tree(types: Vec<NodeType>, parents: Vec<u32>, labels: Vec<i64>) -> MultitypeSpatialTree {
        MultitypeSpatialTree::from_parts(types, parents, labels).unwrap()
    }

    #[test]
    fn single_edge_map() {
        // root(1, label 1) with one childless type-3 node
        let t = tree(vec![NodeType::T1, NodeType::T3], vec![0, 0], vec![1, 1]);
        let m = bdg_forward(&t).unwrap();
        m.validate().unwrap();
        assert_eq!(m.vertex_count(), 2);
        assert_eq!(m.edge_count(), 1);
        assert_eq!(m.faces(), vec![(0, 2)]);
        assert_eq!(m.distances(), vec![1, 0]);
    }

    #[test]
    fn three_vertex_path() {
        let t = tree(vec![NodeType::T1, NodeType::T3, NodeType::T1], vec![0, 0, 1], vec![1, 1, 1]);
        let m = bdg_forward(&t).unwrap();
        m.validate().unwrap();
        assert_eq!(m.vertex_count(), 3);
        assert_eq!(m.edge_count(), 2);
        assert_eq!(m.faces().len(), 1);
        assert_eq!(m.faces()[0].1, 4);
        let d = m.distances();
        assert_eq!(d[2], 0);
        assert_eq!(d[0], 1);
        assert_eq!(d[1], 1);
    }

    #[test]
    fn vertex_map_conventions() {
        let t = tree(vec![NodeType::T1], vec![0], vec![1]);
        let m = bdg_forward(&t).unwrap();
        assert!(m.is_vertex_map());
        m.validate().unwrap();
        assert_eq!(m.faces(), vec![(0, 0)]);
        assert_eq!(m.distances(), vec![0]);
        let w = WeightSequence::monomial(4, 1.0 / 12.0).unwrap();
        assert_eq!(m.boltzmann_weight(&w), 1.0);
    }

    #[test]
    fn boltzmann_weight_products() {
        let w = WeightSequence::monomial(4, 1.0 / 12.0).unwrap();
        let t = tree(vec![NodeType::T1, NodeType::T3, NodeType::T1], vec![0, 0, 1], vec![1, 1, 1]);
        let m = bdg_forward(&t).unwrap();
        assert!((m.boltzmann_weight(&w) - 1.0 / 12.0).abs() < 1e-15);
        // degree-2 face carries weight zero under q4
        let t2 = tree(vec![NodeType::T1, NodeType::T3], vec![0, 0], vec![1, 1]);
        assert_eq!(bdg_forward(&t2).unwrap().boltzmann_weight(&w), 0.0);
    }

    #[test]
    fn rejects_invalid_trees() {
        let t = tree(vec![NodeType::T1, NodeType::T3, NodeType::T1], vec![0, 0, 1], vec![1, 1, 0]);
        assert!(matches!(bdg_forward(&t), Err(BijectionError::InvalidTree(_))));
    }

    #[test]
    fn face_census_and_distances_on_samples() {
        // face degrees are exactly {2k+k'+2 over type-3 nodes} (no type-4
        // under q4) and distances from the extra vertex equal labels
        let w = WeightSequence::monomial(4, 1.0 / 12.0).unwrap();
        let report = solve_fixed_point(&w, SolveOptions::default()).unwrap();
        let laws = build_offspring(&report, &w, 1e-12).unwrap();
        let mut rng = crate::rng::stream(31, 0);
        let mut sampler = GwSampler::new(&laws, Direction::Forward);
        for _ in 0..300 {
            let t = sampler
                .sample_conditioned(NodeType::T1, 1, Condition::SizePositive(12), 1 << 40, &mut rng)
                .unwrap();
            let m = bdg_forward(&t).unwrap();
            m.validate().unwrap();
            let mut expect: Vec<u32> = (0..t.len())
                .filter(|&u| !t.node_type(u).is_even_side())
                .map(|u| {
                    let (k, kp) = t.offspring_pair(u);
                    if t.node_type(u) == NodeType::T3 {
                        2 * k + kp + 2
                    } else {
                        2 * k + kp + 1
                    }
                })
                .collect();
            expect.sort_unstable();
            let mut got: Vec<u32> = m.faces().iter().map(|&(_, d)| d).collect();
            got.sort_unstable();
            assert_eq!(expect, got, "face census mismatch");

            let ids = type1_vertex_ids(&t);
            let dist = m.distances();
            for u in 0..t.len() {
                if let Some(v) = ids[u] {
                    assert_eq!(dist[v as usize] as i64, t.label(u), "distance != label at node {u}");
                }
            }
            let sum: u32 = m.faces().iter().map(|&(_, d)| d).sum();
            assert_eq!(sum as usize, 2 * m.edge_count());
        }
    }

    #[test]
    fn canonical_form_distinguishes_and_round_trips() {
        let t1 = tree(vec![NodeType::T1, NodeType::T3, NodeType::T1], vec![0, 0, 1], vec![1, 1, 1]);
        let t2 = tree(vec![NodeType::T1, NodeType::T3, NodeType::T1], vec![0, 0, 1], vec![1, 1, 2]);
        let m1 = bdg_forward(&t1).unwrap();
        let m2 = bdg_forward(&t2).unwrap();
        assert_ne!(m1.canonical_form(), m2.canonical_form());
        assert_eq!(m1.canonical_form(), m1.clone().canonical_form());

        let line = m2.to_json_line();
        let back = RootedPlanarMap::from_json_line(&line).unwrap();
        assert_eq!(back.canonical_form(), m2.canonical_form());
        let vm = RootedPlanarMap::vertex_map();
        let back = RootedPlanarMap::from_json_line(&vm.to_json_line()).unwrap();
        assert!(back.is_vertex_map());
    }
}
