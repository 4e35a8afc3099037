//! Four-type spatial trees: storage, the structural/label validator, contour
//! machinery, spatial displacement laws, Galton-Watson sampling and the
//! conditioned (rejection) samplers.
//!
//! Type roles: type-1 nodes become map vertices, type-2 nodes are edge flags
//! erased by the forward construction, type-3 and type-4 nodes become the
//! framework whose offspring pairs encode face degrees. Types 1 and 2 live at
//! even generations, 3 and 4 at odd ones.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combinatorics::{sample_composition, sample_interleaving};
use crate::weights::OffspringLaws;

/// Default per-attempt cap on generated nodes.
pub const DEFAULT_NODE_CAP: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("node cap {0} exceeded")]
    NodeCapExceeded(usize),
    #[error("retry budget {budget} exhausted; acceptance rate below ~{rate:.3e}")]
    RetryBudgetExhausted { budget: u64, rate: f64 },
    #[error("address {0:?} not in tree")]
    AddressNotFound(Vec<u32>),
    #[error("offspring laws carry no type-{0} family")]
    MissingFamily(u8),
    #[error("invalid tree encoding: {0}")]
    BadEncoding(String),
    #[error("tree violates mobile conditions: {0}")]
    NotMobile(String),
}

/// Vertex types of the four-type trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum NodeType {
    T1 = 1,
    T2 = 2,
    T3 = 3,
    T4 = 4,
}

impl NodeType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(NodeType::T1),
            2 => Some(NodeType::T2),
            3 => Some(NodeType::T3),
            4 => Some(NodeType::T4),
            _ => None,
        }
    }

    /// Types living at even generations (map vertices and flags).
    pub fn is_even_side(self) -> bool {
        matches!(self, NodeType::T1 | NodeType::T2)
    }
}

/// A plane tree with types and integer labels, nodes stored in depth-first
/// (lexicographic) order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultitypeSpatialTree {
    types: Vec<NodeType>,
    labels: Vec<i64>,
    /// parent index; `u32::MAX` marks the root
    parents: Vec<u32>,
    /// CSR offsets into `children`, length n+1
    child_start: Vec<u32>,
    /// child indices grouped by parent, each group in planar order
    children: Vec<u32>,
    /// position of each node among its parent's children (0-based)
    child_pos: Vec<u32>,
    counts: [usize; 4],
}

const NO_PARENT: u32 = u32::MAX;

impl MultitypeSpatialTree {
    /// Builds a tree from parallel arrays in depth-first order. `parents[0]`
    /// is ignored; for i > 0, `parents[i]` must point at an earlier node and
    /// the ordering must be a genuine preorder.
    pub fn from_parts(types: Vec<NodeType>, parents: Vec<u32>, labels: Vec<i64>) -> Result<Self, TreeError> {
        let n = types.len();
        if n == 0 {
            return Err(TreeError::BadEncoding("empty tree".into()));
        }
        if parents.len() != n || labels.len() != n {
            return Err(TreeError::BadEncoding("array lengths differ".into()));
        }
        for i in 1..n {
            if parents[i] as usize >= i {
                return Err(TreeError::BadEncoding(format!("node {i} has parent {} not before it", parents[i])));
            }
        }
        let mut parents = parents;
        parents[0] = NO_PARENT;

        let mut degree = vec![0u32; n];
        for i in 1..n {
            degree[parents[i] as usize] += 1;
        }
        let mut child_start = vec![0u32; n + 1];
        for i in 0..n {
            child_start[i + 1] = child_start[i] + degree[i];
        }
        let mut children = vec![0u32; n.saturating_sub(1)];
        let mut child_pos = vec![0u32; n];
        let mut cursor: Vec<u32> = child_start[..n].to_vec();
        for i in 1..n {
            let p = parents[i] as usize;
            child_pos[i] = cursor[p] - child_start[p];
            children[cursor[p] as usize] = i as u32;
            cursor[p] += 1;
        }
        let mut counts = [0usize; 4];
        for &t in &types {
            counts[t as usize - 1] += 1;
        }
        let tree = Self { types, labels, parents, child_start, children, child_pos, counts };
        // depth-first storage is assumed everywhere; verify it
        let mut expect = 0u32;
        let mut ok = true;
        tree.walk_preorder(|idx| {
            ok &= idx == expect;
            expect += 1;
        });
        if !ok || expect as usize != n {
            return Err(TreeError::BadEncoding("node order is not depth-first".into()));
        }
        Ok(tree)
    }

    /// Single node of the given type and label.
    pub fn singleton(node_type: NodeType, label: i64) -> Self {
        Self::from_parts(vec![node_type], vec![0], vec![label]).unwrap()
    }

    fn walk_preorder(&self, mut visit: impl FnMut(u32)) {
        let mut stack = vec![0u32];
        while let Some(u) = stack.pop() {
            visit(u);
            for &c in self.children(u as usize).iter().rev() {
                stack.push(c);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node_type(&self, u: usize) -> NodeType {
        self.types[u]
    }

    pub fn label(&self, u: usize) -> i64 {
        self.labels[u]
    }

    pub fn parent(&self, u: usize) -> Option<usize> {
        (self.parents[u] != NO_PARENT).then(|| self.parents[u] as usize)
    }

    pub fn children(&self, u: usize) -> &[u32] {
        &self.children[self.child_start[u] as usize..self.child_start[u + 1] as usize]
    }

    pub fn degree(&self, u: usize) -> usize {
        (self.child_start[u + 1] - self.child_start[u]) as usize
    }

    /// Position of `u` among its parent's children, 0-based.
    pub fn child_position(&self, u: usize) -> usize {
        self.child_pos[u] as usize
    }

    pub fn types(&self) -> &[NodeType] {
        &self.types
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    /// Number of nodes of the given type.
    pub fn count(&self, t: NodeType) -> usize {
        self.counts[t as usize - 1]
    }

    /// Word of child types of `u`, as 1..=4 digits.
    pub fn child_word(&self, u: usize) -> Vec<u8> {
        self.children(u).iter().map(|&c| self.types[c as usize] as u8).collect()
    }

    /// Offspring pair (#type-1 children, #type-2 children) of `u`.
    pub fn offspring_pair(&self, u: usize) -> (u32, u32) {
        let mut k = 0;
        let mut kp = 0;
        for &c in self.children(u) {
            match self.types[c as usize] {
                NodeType::T1 => k += 1,
                NodeType::T2 => kp += 1,
                _ => {}
            }
        }
        (k, kp)
    }

    /// Ulam-Harris address (1-based digits), materialized on demand.
    pub fn address_of(&self, u: usize) -> Vec<u32> {
        let mut digits = Vec::new();
        let mut cur = u;
        while let Some(p) = self.parent(cur) {
            digits.push(self.child_pos[cur] + 1);
            cur = p;
        }
        digits.reverse();
        digits
    }

    /// Node index at a 1-based Ulam-Harris address.
    pub fn node_at(&self, address: &[u32]) -> Option<usize> {
        let mut cur = 0usize;
        for &digit in address {
            if digit == 0 {
                return None;
            }
            let kids = self.children(cur);
            cur = *kids.get(digit as usize - 1)? as usize;
        }
        Some(cur)
    }

    /// Depth (generation) of a node.
    pub fn depth(&self, u: usize) -> usize {
        let mut d = 0;
        let mut cur = u;
        while let Some(p) = self.parent(cur) {
            d += 1;
            cur = p;
        }
        d
    }

    /// Minimum label over non-root type-1 nodes; None when there are none
    /// (the "min of the empty set is infinite" convention).
    pub fn min_nonroot_type1_label(&self) -> Option<i64> {
        (1..self.len()).filter(|&u| self.types[u] == NodeType::T1).map(|u| self.labels[u]).min()
    }

    /// True when all non-root type-1 labels are >= 1.
    pub fn is_positive(&self) -> bool {
        self.min_nonroot_type1_label().map_or(true, |m| m >= 1)
    }

    /// Adds `delta` to every label.
    pub fn shift_labels(&mut self, delta: i64) {
        for l in &mut self.labels {
            *l += delta;
        }
    }

    /// Copy of the subtree rooted at node index `u`, labels re-based so the
    /// new root carries 0; types preserved.
    pub fn subtree_at_index(&self, u: usize) -> Self {
        let base = self.labels[u];
        let mut types = Vec::new();
        let mut labels = Vec::new();
        let mut parents = Vec::new();
        let mut stack = vec![(u as u32, NO_PARENT)];
        while let Some((node, new_parent)) = stack.pop() {
            let idx = types.len() as u32;
            types.push(self.types[node as usize]);
            labels.push(self.labels[node as usize] - base);
            parents.push(if new_parent == NO_PARENT { 0 } else { new_parent });
            if types.len() == 1 {
                parents[0] = 0;
            }
            for &c in self.children(node as usize).iter().rev() {
                stack.push((c, idx));
            }
        }
        Self::from_parts(types, parents, labels).unwrap()
    }

    /// `subtree_at_index` addressed by Ulam-Harris word.
    pub fn subtree_at(&self, address: &[u32]) -> Result<Self, TreeError> {
        let u = self.node_at(address).ok_or_else(|| TreeError::AddressNotFound(address.to_vec()))?;
        Ok(self.subtree_at_index(u))
    }

    /// Checks the structural and label conditions of the four-type tree
    /// class: type-1 nodes have only type-3 children, type-2 nodes exactly
    /// one type-4 child, type-3/4 nodes only type-1/2 children, labels are
    /// inherited across even-side edges, and the cyclic increments around
    /// type-3/4 nodes are at least -1 after a type-1 corner and at least 0
    /// after a type-2 corner.
    pub fn check_mobile(&self) -> Result<(), TreeError> {
        if !self.types[0].is_even_side() {
            return Err(TreeError::NotMobile(format!("root has odd-side type {:?}", self.types[0])));
        }
        for u in 0..self.len() {
            let kids = self.children(u);
            match self.types[u] {
                NodeType::T1 => {
                    for &c in kids {
                        if self.types[c as usize] != NodeType::T3 {
                            return Err(TreeError::NotMobile(format!("type-1 node {u} has a non-type-3 child")));
                        }
                        if self.labels[c as usize] != self.labels[u] {
                            return Err(TreeError::NotMobile(format!("label jump on even-side edge {u}->{c}")));
                        }
                    }
                }
                NodeType::T2 => {
                    if kids.len() != 1 || self.types[kids[0] as usize] != NodeType::T4 {
                        return Err(TreeError::NotMobile(format!("type-2 node {u} lacks its single type-4 child")));
                    }
                    if self.labels[kids[0] as usize] != self.labels[u] {
                        return Err(TreeError::NotMobile(format!("label jump on even-side edge {u}")));
                    }
                }
                NodeType::T3 | NodeType::T4 => {
                    // cyclic increment walk: parent, child 1, ..., child k, parent
                    let parent_label = self.labels[u];
                    let mut prev_label = parent_label;
                    let mut prev_type = match self.types[u] {
                        NodeType::T3 => NodeType::T1,
                        _ => NodeType::T2,
                    };
                    for step in 0..=kids.len() {
                        let (cur_label, cur_type) = if step < kids.len() {
                            let c = kids[step] as usize;
                            if !self.types[c].is_even_side() {
                                return Err(TreeError::NotMobile(format!("type-3/4 node {u} has an odd-side child")));
                            }
                            (self.labels[c], self.types[c])
                        } else {
                            (parent_label, prev_type)
                        };
                        let inc = cur_label - prev_label;
                        let floor = if prev_type == NodeType::T1 { -1 } else { 0 };
                        if inc < floor {
                            return Err(TreeError::NotMobile(format!(
                                "increment {inc} below {floor} at type-3/4 node {u}, corner {step}"
                            )));
                        }
                        prev_label = cur_label;
                        prev_type = cur_type;
                    }
                }
            }
        }
        Ok(())
    }

    /// Membership in the map-encodable class: a valid mobile whose root is
    /// type 1 with label 1 and whose type-1 labels are all >= 1.
    pub fn is_well_labeled(&self) -> bool {
        self.check_mobile().is_ok()
            && self.types[0] == NodeType::T1
            && self.labels[0] == 1
            && (0..self.len()).all(|u| self.types[u] != NodeType::T1 || self.labels[u] >= 1)
    }

    /// Contour and spatial-contour functions along the depth-first contour.
    pub fn contour(&self) -> ContourPair {
        let n = self.len();
        let mut depth = Vec::with_capacity(2 * n - 1);
        let mut spatial = Vec::with_capacity(2 * n - 1);
        let mut nodes = Vec::with_capacity(2 * n - 1);
        depth.push(0u32);
        spatial.push(self.labels[0]);
        nodes.push(0u32);
        let mut d = 0u32;
        let mut stack: Vec<(u32, usize)> = vec![(0, 0)];
        while !stack.is_empty() {
            let (u, next) = *stack.last().unwrap();
            let kids = self.children(u as usize);
            if next < kids.len() {
                stack.last_mut().unwrap().1 += 1;
                let c = kids[next];
                d += 1;
                nodes.push(c);
                depth.push(d);
                spatial.push(self.labels[c as usize]);
                stack.push((c, 0));
            } else {
                stack.pop();
                if let Some(&(p, _)) = stack.last() {
                    d -= 1;
                    nodes.push(p);
                    depth.push(d);
                    spatial.push(self.labels[p as usize]);
                }
            }
        }
        ContourPair { depth, spatial, nodes }
    }

    /// Rebuilds a tree from a contour function plus the type and label of
    /// each first visit (one entry per node, in first-visit order). The
    /// independent route used to cross-check re-rooting.
    pub fn from_contour(depth: &[u32], types: &[NodeType], labels: &[i64]) -> Result<Self, TreeError> {
        if depth.is_empty() || depth[0] != 0 || *depth.last().unwrap() != 0 {
            return Err(TreeError::BadEncoding("contour must start and end at depth 0".into()));
        }
        let mut t: Vec<NodeType> = Vec::new();
        let mut par: Vec<u32> = Vec::new();
        let mut lab: Vec<i64> = Vec::new();
        let mut stack: Vec<u32> = Vec::new();
        let mut first_visit = 0usize;
        macro_rules! push_node {
            ($parent:expr) => {{
                let idx = t.len() as u32;
                let ty = *types.get(first_visit).ok_or_else(|| TreeError::BadEncoding("missing type".into()))?;
                let lb = *labels.get(first_visit).ok_or_else(|| TreeError::BadEncoding("missing label".into()))?;
                first_visit += 1;
                t.push(ty);
                par.push($parent);
                lab.push(lb);
                stack.push(idx);
            }};
        }
        push_node!(0);
        for k in 1..depth.len() {
            if depth[k] == depth[k - 1] + 1 {
                let parent = *stack.last().ok_or_else(|| TreeError::BadEncoding("contour dips below root".into()))?;
                push_node!(parent);
            } else if depth[k] + 1 == depth[k - 1] {
                stack.pop().ok_or_else(|| TreeError::BadEncoding("contour dips below the root".into()))?;
            } else {
                return Err(TreeError::BadEncoding(format!("contour step at {k} is not +-1")));
            }
        }
        if first_visit != types.len() {
            return Err(TreeError::BadEncoding("unused type/label entries".into()));
        }
        Self::from_parts(t, par, lab)
    }

    /// One NDJSON line: `{"types":[...],"parents":[...],"labels":[...]}` with
    /// nodes in depth-first order and -1 for the root parent.
    pub fn to_json_line(&self) -> String {
        let dump = TreeDump {
            types: self.types.iter().map(|&t| t as u8).collect(),
            parents: self.parents.iter().map(|&p| if p == NO_PARENT { -1 } else { p as i64 }).collect(),
            labels: self.labels.clone(),
        };
        serde_json::to_string(&dump).unwrap()
    }

    /// Parses and validates one dump line.
    pub fn from_json_line(line: &str) -> Result<Self, TreeError> {
        let dump: TreeDump = serde_json::from_str(line).map_err(|e| TreeError::BadEncoding(e.to_string()))?;
        let types = dump
            .types
            .iter()
            .map(|&v| NodeType::from_u8(v).ok_or_else(|| TreeError::BadEncoding(format!("bad type {v}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let parents = dump
            .parents
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                if i == 0 && p == -1 {
                    Ok(0)
                } else if p >= 0 && (p as usize) < i {
                    Ok(p as u32)
                } else {
                    Err(TreeError::BadEncoding(format!("bad parent {p} at {i}")))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(types, parents, dump.labels)
    }
}

#[derive(Serialize, Deserialize)]
struct TreeDump {
    types: Vec<u8>,
    parents: Vec<i64>,
    labels: Vec<i64>,
}

/// Contour function, spatial contour function and the visited node sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContourPair {
    pub depth: Vec<u32>,
    pub spatial: Vec<i64>,
    pub nodes: Vec<u32>,
}

/// Which displacement family drives the spatial increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// The plain family.
    Forward,
    /// Coordinate-reversed family.
    Reversed,
    /// Half-half mixture of the plain family and the reversal of the
    /// reversed-word family.
    Shuffled,
}

/// Descriptor of one displacement draw around a type-3 or type-4 node.
#[derive(Debug, Clone)]
pub struct DisplacementLaw {
    pub parent_type: NodeType,
    pub word: Vec<u8>,
    pub direction: Direction,
}

/// Forward-family displacement draw: the shifted increments
/// (X_j + [previous corner has type 1]) form a uniform composition of k+1
/// (type 3) or k (type 4) into |word|+1 nonnegative parts; the output is the
/// running partial sums, one offset per child.
fn sample_forward_displacement<R: Rng + ?Sized>(
    parent_type: NodeType,
    word: &[u8],
    rng: &mut R,
    comp_buf: &mut Vec<u32>,
    out: &mut Vec<i64>,
) {
    let ones = word.iter().filter(|&&c| c == 1).count() as u32;
    let (total, w0_is_one) = match parent_type {
        NodeType::T3 => (ones + 1, true),
        NodeType::T4 => (ones, false),
        _ => unreachable!("displacements only exist around type-3/4 nodes"),
    };
    comp_buf.clear();
    sample_composition(total, word.len() as u32 + 1, rng, comp_buf);
    let mut acc = 0i64;
    for j in 0..word.len() {
        let prev_is_one = if j == 0 { w0_is_one } else { word[j - 1] == 1 };
        let x = comp_buf[j] as i64 - i64::from(prev_is_one);
        acc += x;
        out.push(acc);
    }
}

fn sample_displacement_into<R: Rng + ?Sized>(
    parent_type: NodeType,
    word: &[u8],
    direction: Direction,
    rng: &mut R,
    comp_buf: &mut Vec<u32>,
    word_buf: &mut Vec<u8>,
    out: &mut Vec<i64>,
) {
    match direction {
        Direction::Forward => sample_forward_displacement(parent_type, word, rng, comp_buf, out),
        Direction::Reversed => {
            sample_forward_displacement(parent_type, word, rng, comp_buf, out);
            out.reverse();
        }
        Direction::Shuffled => {
            if rng.gen::<bool>() {
                sample_forward_displacement(parent_type, word, rng, comp_buf, out);
            } else {
                word_buf.clear();
                word_buf.extend(word.iter().rev().copied());
                sample_forward_displacement(parent_type, word_buf, rng, comp_buf, out);
                out.reverse();
            }
        }
    }
}

/// Draws the child displacement vector described by `law`.
pub fn sample_displacement<R: Rng + ?Sized>(law: &DisplacementLaw, rng: &mut R) -> Vec<i64> {
    let mut out = Vec::with_capacity(law.word.len());
    let mut comp = Vec::new();
    let mut word_buf = Vec::new();
    sample_displacement_into(law.parent_type, &law.word, law.direction, rng, &mut comp, &mut word_buf, &mut out);
    out
}

/// Conditioning menu for `sample_conditioned`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// Exactly n type-1 nodes.
    Size(usize),
    /// Exactly n type-1 nodes and every non-root type-1 label >= 1.
    SizePositive(usize),
    /// Root has exactly one child.
    RootDegreeOne,
    /// Root has exactly one child and exactly n type-1 nodes.
    RootDegreeOneSize(usize),
}

impl Condition {
    fn size_target(&self) -> Option<usize> {
        match *self {
            Condition::Size(n) | Condition::SizePositive(n) | Condition::RootDegreeOneSize(n) => Some(n),
            Condition::RootDegreeOne => None,
        }
    }

    fn needs_positive(&self) -> bool {
        matches!(self, Condition::SizePositive(_))
    }

    fn forces_root_degree_one(&self) -> bool {
        matches!(self, Condition::RootDegreeOne | Condition::RootDegreeOneSize(_))
    }
}

enum Attempt {
    Done,
    TooBig,
    NotPositive,
    CapHit,
}

/// Reusable Galton-Watson sampler. Buffers persist across attempts so the
/// rejection loops stay allocation-free.
pub struct GwSampler<'a> {
    laws: &'a OffspringLaws,
    direction: Direction,
    node_cap: usize,
    types: Vec<NodeType>,
    labels: Vec<i64>,
    parents: Vec<u32>,
    stack: Vec<(u32, NodeType, i64)>,
    word: Vec<u8>,
    word_rev: Vec<u8>,
    comp: Vec<u32>,
    disp: Vec<i64>,
}

impl<'a> GwSampler<'a> {
    pub fn new(laws: &'a OffspringLaws, direction: Direction) -> Self {
        Self {
            laws,
            direction,
            node_cap: DEFAULT_NODE_CAP,
            types: Vec::new(),
            labels: Vec::new(),
            parents: Vec::new(),
            stack: Vec::new(),
            word: Vec::new(),
            word_rev: Vec::new(),
            comp: Vec::new(),
            disp: Vec::new(),
        }
    }

    pub fn with_node_cap(mut self, cap: usize) -> Self {
        self.node_cap = cap;
        self
    }

    /// Number of type-1 nodes in the last completed attempt.
    fn type1_count(&self) -> usize {
        self.types.iter().filter(|&&t| t == NodeType::T1).count()
    }

    fn attempt<R: Rng + ?Sized>(
        &mut self,
        root_type: NodeType,
        x: i64,
        size_cap: Option<usize>,
        positivity: bool,
        forced_root_degree: Option<u32>,
        rng: &mut R,
    ) -> Result<Attempt, TreeError> {
        self.types.clear();
        self.labels.clear();
        self.parents.clear();
        self.stack.clear();
        let mut type1_seen = 0usize;

        self.stack.push((NO_PARENT, root_type, x));
        while let Some((parent, ty, label)) = self.stack.pop() {
            if self.types.len() >= self.node_cap {
                return Ok(Attempt::CapHit);
            }
            let idx = self.types.len() as u32;
            if ty == NodeType::T1 {
                type1_seen += 1;
                if let Some(cap) = size_cap {
                    if type1_seen > cap {
                        return Ok(Attempt::TooBig);
                    }
                }
                if positivity && parent != NO_PARENT && label < 1 {
                    return Ok(Attempt::NotPositive);
                }
            }
            self.types.push(ty);
            self.labels.push(label);
            self.parents.push(if parent == NO_PARENT { 0 } else { parent });

            match ty {
                NodeType::T1 => {
                    let k = if parent == NO_PARENT && forced_root_degree.is_some() {
                        forced_root_degree.unwrap()
                    } else {
                        self.laws.sample_type1_children(rng)
                    };
                    // type-3 children inherit the label (even-side edges)
                    for _ in 0..k {
                        self.stack.push((idx, NodeType::T3, label));
                    }
                }
                NodeType::T2 => {
                    self.stack.push((idx, NodeType::T4, label));
                }
                NodeType::T3 | NodeType::T4 => {
                    let law = if ty == NodeType::T3 { &self.laws.type3 } else { &self.laws.type4 };
                    if law.is_empty() {
                        return Err(TreeError::MissingFamily(ty as u8));
                    }
                    let (k, kp) = law.sample(rng);
                    self.word.clear();
                    sample_interleaving(k, kp, rng, &mut self.word);
                    self.disp.clear();
                    sample_displacement_into(
                        ty,
                        &self.word,
                        self.direction,
                        rng,
                        &mut self.comp,
                        &mut self.word_rev,
                        &mut self.disp,
                    );
                    // push in reverse so children pop in planar order
                    for j in (0..self.word.len()).rev() {
                        let child_type = if self.word[j] == 1 { NodeType::T1 } else { NodeType::T2 };
                        self.stack.push((idx, child_type, label + self.disp[j]));
                    }
                }
            }
        }
        Ok(Attempt::Done)
    }

    fn take_tree(&mut self) -> MultitypeSpatialTree {
        MultitypeSpatialTree::from_parts(
            std::mem::take(&mut self.types),
            std::mem::take(&mut self.parents),
            std::mem::take(&mut self.labels),
        )
        .expect("sampler emits preorder arrays")
    }

    /// Unconditioned tree started from a root of the given type and label.
    pub fn sample<R: Rng + ?Sized>(
        &mut self,
        root_type: NodeType,
        x: i64,
        rng: &mut R,
    ) -> Result<MultitypeSpatialTree, TreeError> {
        match self.attempt(root_type, x, None, false, None, rng)? {
            Attempt::Done => Ok(self.take_tree()),
            Attempt::CapHit => Err(TreeError::NodeCapExceeded(self.node_cap)),
            _ => unreachable!(),
        }
    }

    /// Exact rejection sampler for the conditioning menu. Attempts abort as
    /// early as the condition allows; an accepted tree has exactly the
    /// conditional law.
    pub fn sample_conditioned<R: Rng + ?Sized>(
        &mut self,
        root_type: NodeType,
        x: i64,
        condition: Condition,
        retry_budget: u64,
        rng: &mut R,
    ) -> Result<MultitypeSpatialTree, TreeError> {
        let target = condition.size_target();
        let positivity = condition.needs_positive();
        let forced_root = if condition.forces_root_degree_one() { Some(1u32) } else { None };
        for _ in 0..retry_budget {
            match self.attempt(root_type, x, target, positivity, forced_root, rng)? {
                Attempt::Done => {
                    if let Some(n) = target {
                        if self.type1_count() != n {
                            continue;
                        }
                    }
                    // positivity violations were aborted inline
                    return Ok(self.take_tree());
                }
                Attempt::CapHit => return Err(TreeError::NodeCapExceeded(self.node_cap)),
                Attempt::TooBig | Attempt::NotPositive => {}
            }
        }
        Err(TreeError::RetryBudgetExhausted { budget: retry_budget, rate: 1.0 / retry_budget as f64 })
    }
}

/// Convenience wrapper: one unconditioned draw.
pub fn sample_gw<R: Rng + ?Sized>(
    laws: &OffspringLaws,
    root_type: NodeType,
    x: i64,
    direction: Direction,
    rng: &mut R,
    node_cap: usize,
) -> Result<MultitypeSpatialTree, TreeError> {
    GwSampler::new(laws, direction).with_node_cap(node_cap).sample(root_type, x, rng)
}

/// Convenience wrapper: one conditioned draw.
pub fn sample_conditioned<R: Rng + ?Sized>(
    laws: &OffspringLaws,
    root_type: NodeType,
    x: i64,
    condition: Condition,
    direction: Direction,
    rng: &mut R,
    retry_budget: u64,
) -> Result<MultitypeSpatialTree, TreeError> {
    GwSampler::new(laws, direction).sample_conditioned(root_type, x, condition, retry_budget, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::{build_offspring, solve_fixed_point, SolveOptions, WeightSequence};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn q4_laws() -> OffspringLaws {
        let w = WeightSequence::monomial(4, 1.0 / 12.0).unwrap();
        let report = solve_fixed_point(&w, SolveOptions::default()).unwrap();
        build_offspring(&report, &w, 1e-12).unwrap()
    }

    fn chain_1_3_1(labels: [i64; 3]) -> MultitypeSpatialTree {
        MultitypeSpatialTree::from_parts(
            vec![NodeType::T1, NodeType::T3, NodeType::T1],
            vec![0, 0, 1],
            labels.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn contour_examples() {
        let single = MultitypeSpatialTree::singleton(NodeType::T1, 1);
        assert_eq!(single.contour().depth, vec![0]);

        let chain = chain_1_3_1([1, 1, 1]);
        let cp = chain.contour();
        assert_eq!(cp.depth, vec![0, 1, 2, 1, 0]);
        assert_eq!(cp.spatial, vec![1, 1, 1, 1, 1]);
        assert_eq!(cp.nodes, vec![0, 1, 2, 1, 0]);
    }

    #[test]
    fn contour_round_trip() {
        let laws = q4_laws();
        let mut rng = crate::rng::stream(21, 0);
        let mut sampler = GwSampler::new(&laws, Direction::Forward);
        for _ in 0..200 {
            let t = sampler.sample(NodeType::T1, 1, &mut rng).unwrap();
            let cp = t.contour();
            assert_eq!(cp.depth.len(), 2 * (t.len() - 1) + 1);
            for w in cp.depth.windows(2) {
                assert_eq!((w[0] as i64 - w[1] as i64).abs(), 1);
            }
            let mut seen = vec![false; t.len()];
            for &u in &cp.nodes {
                seen[u as usize] = true;
            }
            assert!(seen.iter().all(|&b| b));
            let rebuilt = MultitypeSpatialTree::from_contour(&cp.depth, t.types(), t.labels()).unwrap();
            assert_eq!(rebuilt, t);
        }
    }

    #[test]
    fn displacement_examples() {
        let mut rng = crate::rng::stream(2, 0);
        // type 3, w = (1): uniform on {-1, 0, 1}
        let law = DisplacementLaw { parent_type: NodeType::T3, word: vec![1], direction: Direction::Forward };
        let mut counts = [0u64; 3];
        let n = 90_000;
        for _ in 0..n {
            let v = sample_displacement(&law, &mut rng);
            counts[(v[0] + 1) as usize] += 1;
        }
        let e = n as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2={chi2}");

        // type 4, w = (1): uniform on {0, 1}
        let law4 = DisplacementLaw { parent_type: NodeType::T4, word: vec![1], direction: Direction::Forward };
        let mut c0 = 0u64;
        for _ in 0..n {
            let v = sample_displacement(&law4, &mut rng);
            assert!(v[0] == 0 || v[0] == 1);
            c0 += u64::from(v[0] == 0);
        }
        assert!((c0 as f64 - n as f64 / 2.0).abs() < 5.0 * (n as f64 * 0.25).sqrt());

        // empty word: empty vector with probability 1
        let law0 = DisplacementLaw { parent_type: NodeType::T3, word: vec![], direction: Direction::Forward };
        assert!(sample_displacement(&law0, &mut rng).is_empty());
    }

    #[test]
    fn displacement_closure_sums_to_zero() {
        // the implied return increment closes the cycle: shifted increments
        // are nonnegative and total k+1 (type 3) or k (type 4)
        let mut rng = crate::rng::stream(3, 0);
        for &(pt, word, total) in &[
            (NodeType::T3, &[1u8, 2, 1][..], 3u32),
            (NodeType::T3, &[2, 2][..], 1),
            (NodeType::T4, &[1, 2, 2, 1][..], 2),
        ] {
            let law = DisplacementLaw { parent_type: pt, word: word.to_vec(), direction: Direction::Forward };
            for _ in 0..2000 {
                let v = sample_displacement(&law, &mut rng);
                let mut prev = 0i64;
                let mut shifted_sum = 0i64;
                for j in 0..=word.len() {
                    let cur = if j < word.len() { v[j] } else { 0 };
                    let x = cur - prev;
                    let prev_is_one = if j == 0 { pt == NodeType::T3 } else { word[j - 1] == 1 };
                    let shifted = x + i64::from(prev_is_one);
                    assert!(shifted >= 0, "negative shifted increment");
                    shifted_sum += shifted;
                    prev = cur;
                }
                assert_eq!(shifted_sum as u32, total);
            }
        }
    }

    #[test]
    fn shuffled_direction_is_the_stated_mixture() {
        // enumerable case: type 3, w = (1,2): mixture of the forward law and
        // the reversal of the reversed-word law; total variation < 0.01
        let mut rng = crate::rng::stream(5, 0);
        let n = 100_000usize;
        let mut counts: std::collections::HashMap<Vec<i64>, u64> = std::collections::HashMap::new();
        let law = DisplacementLaw { parent_type: NodeType::T3, word: vec![1, 2], direction: Direction::Shuffled };
        for _ in 0..n {
            *counts.entry(sample_displacement(&law, &mut rng)).or_insert(0) += 1;
        }
        let exact = |word: &[u8]| {
            let comps = crate::combinatorics::enumerate_compositions(2, 3);
            let mut table: std::collections::HashMap<Vec<i64>, f64> = std::collections::HashMap::new();
            for c in &comps {
                let mut acc = 0i64;
                let mut v = Vec::new();
                for j in 0..2 {
                    let prev_is_one = if j == 0 { true } else { word[j - 1] == 1 };
                    acc += c[j] as i64 - i64::from(prev_is_one);
                    v.push(acc);
                }
                *table.entry(v).or_insert(0.0) += 1.0 / comps.len() as f64;
            }
            table
        };
        let fwd = exact(&[1, 2]);
        let rev_word = exact(&[2, 1]);
        let mut mixture: std::collections::HashMap<Vec<i64>, f64> = std::collections::HashMap::new();
        for (v, p) in fwd {
            *mixture.entry(v).or_insert(0.0) += p / 2.0;
        }
        for (v, p) in rev_word {
            let mut rv = v;
            rv.reverse();
            *mixture.entry(rv).or_insert(0.0) += p / 2.0;
        }
        let mut tv = 0.0;
        for (v, p) in &mixture {
            let emp = counts.get(v).copied().unwrap_or(0) as f64 / n as f64;
            tv += (p - emp).abs();
        }
        for (v, c) in &counts {
            if !mixture.contains_key(v) {
                tv += *c as f64 / n as f64;
            }
        }
        assert!(tv / 2.0 < 0.01, "tv = {tv}");
    }

    #[test]
    fn gw_singleton_probability_is_half() {
        let laws = q4_laws();
        let mut rng = crate::rng::stream(7, 0);
        let mut sampler = GwSampler::new(&laws, Direction::Forward).with_node_cap(100_000);
        let n = 100_000;
        let mut singles = 0u64;
        for _ in 0..n {
            // a cap hit is certainly not a singleton; abort policy is ours
            match sampler.sample(NodeType::T1, 1, &mut rng) {
                Ok(t) => singles += u64::from(t.len() == 1),
                Err(TreeError::NodeCapExceeded(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
        let e = n as f64 / 2.0;
        assert!((singles as f64 - e).abs() < 4.0 * (n as f64 * 0.25).sqrt());
    }

    #[test]
    fn sampled_trees_validate_and_respect_conditions() {
        let laws = q4_laws();
        let mut rng = crate::rng::stream(8, 0);
        let mut sampler = GwSampler::new(&laws, Direction::Forward).with_node_cap(1_000_000);
        for i in 0..2000 {
            let t = match sampler.sample(NodeType::T1, 1, &mut rng) {
                Ok(t) => t,
                Err(TreeError::NodeCapExceeded(_)) => continue,
                Err(e) => panic!("{e}"),
            };
            t.check_mobile().unwrap();
            if i < 200 {
                let c = sampler
                    .sample_conditioned(NodeType::T1, 1, Condition::SizePositive(6), 1 << 40, &mut rng)
                    .unwrap();
                assert_eq!(c.count(NodeType::T1), 6);
                assert!(c.is_positive());
                assert!(c.is_well_labeled());
                let d = sampler
                    .sample_conditioned(NodeType::T1, 1, Condition::RootDegreeOneSize(4), 1 << 40, &mut rng)
                    .unwrap();
                assert_eq!(d.degree(0), 1);
                assert_eq!(d.count(NodeType::T1), 4);
            }
        }
    }

    #[test]
    fn rejection_sampler_matches_exact_conditional_law() {
        // q4 fixture, #t1 = 3: two shapes (path, cherry) of equal conditional
        // mass, each with 9 equally likely labelings -> 18 outcomes at 1/18
        let laws = q4_laws();
        let mut rng = crate::rng::stream(9, 0);
        let mut sampler = GwSampler::new(&laws, Direction::Forward);
        let n = 90_000;
        let mut counts: std::collections::HashMap<String, u64> = std::collections::HashMap::new();
        for _ in 0..n {
            let t = sampler.sample_conditioned(NodeType::T1, 0, Condition::Size(3), 1 << 40, &mut rng).unwrap();
            *counts.entry(t.to_json_line()).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 18, "outcomes: {}", counts.len());
        let e = n as f64 / 18.0;
        let sigma = (n as f64 * (1.0 / 18.0) * (17.0 / 18.0)).sqrt();
        for (key, &c) in &counts {
            assert!((c as f64 - e).abs() < 4.5 * sigma, "{key}: {c} vs {e}");
        }
    }

    #[test]
    fn subtree_examples() {
        let chain = chain_1_3_1([5, 5, 7]);
        let whole = chain.subtree_at(&[]).unwrap();
        assert_eq!(whole.labels(), &[0, 0, 2]);
        let sub = chain.subtree_at(&[1]).unwrap();
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.labels(), &[0, 2]);
        assert_eq!(sub.types(), &[NodeType::T3, NodeType::T1]);
        let leaf = chain.subtree_at(&[1, 1]).unwrap();
        assert_eq!(leaf.len(), 1);
        assert_eq!(leaf.labels(), &[0]);
        assert!(matches!(chain.subtree_at(&[2]), Err(TreeError::AddressNotFound(_))));
    }

    #[test]
    fn addresses_round_trip() {
        let laws = q4_laws();
        let mut rng = crate::rng::stream(10, 0);
        let mut sampler = GwSampler::new(&laws, Direction::Forward);
        let t = sampler.sample_conditioned(NodeType::T1, 1, Condition::Size(20), 1 << 40, &mut rng).unwrap();
        for u in 0..t.len() {
            let addr = t.address_of(u);
            assert_eq!(t.node_at(&addr), Some(u));
            assert_eq!(addr.len(), t.depth(u));
        }
    }

    #[test]
    fn validator_rejects_bad_trees() {
        let bad = MultitypeSpatialTree::from_parts(vec![NodeType::T1, NodeType::T1], vec![0, 0], vec![1, 1]).unwrap();
        assert!(bad.check_mobile().is_err());
        // label jump across an even-side edge
        let bad2 = chain_1_3_1([1, 2, 1]);
        assert!(bad2.check_mobile().is_err());
        // increment below -1 after a type-1 corner
        let bad3 = chain_1_3_1([3, 3, 1]);
        assert!(bad3.check_mobile().is_err());
        let ok = chain_1_3_1([2, 2, 1]);
        ok.check_mobile().unwrap();
        assert!(ok.is_positive());
        assert!(!ok.is_well_labeled()); // root label is 2, not 1
    }

    #[test]
    fn dump_round_trip() {
        let laws = q4_laws();
        let mut rng = crate::rng::stream(12, 0);
        let mut sampler = GwSampler::new(&laws, Direction::Forward);
        for _ in 0..100 {
            let t = sampler.sample(NodeType::T1, 1, &mut rng).unwrap();
            let line = t.to_json_line();
            let back = MultitypeSpatialTree::from_json_line(&line).unwrap();
            assert_eq!(t, back);
        }
        assert!(MultitypeSpatialTree::from_json_line("{\"types\":[9],\"parents\":[-1],\"labels\":[0]}").is_err());
    }
}
