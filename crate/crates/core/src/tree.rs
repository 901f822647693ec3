//! Finite scenario trees.
//!
//! A tree encodes a finite probability space together with its filtration: the
//! nodes at depth `t` are the atoms of `F_t`. Internally nodes are stored in
//! canonical order (depth, then id ascending), so every layer is a contiguous
//! index range and a value "per depth-`t` node" is a plain slice indexed by
//! position within the layer.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on probability sums.
pub const TOL_PROB: f64 = 1e-9;

/// Raw node record, as it appears in scenario files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct NodeSpec {
    pub id: i64,
    pub parent: Option<i64>,
    pub depth: usize,
    /// Conditional probability of reaching this node from its parent.
    pub prob: f64,
}

/// Problem dimensions: `n` contract types, issue times `0..=t_bar`, flows up to `horizon`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct Dims {
    pub n: usize,
    pub t_bar: usize,
    pub horizon: usize,
}

impl Dims {
    pub fn new(n: usize, t_bar: usize, t: usize) -> Self {
        Self {
            n,
            t_bar,
            horizon: t_bar + t,
        }
    }

    /// Number of periods after the last issue time.
    pub fn t(&self) -> usize {
        self.horizon - self.t_bar
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct Violation {
    pub rule: String,
    pub nodes: Vec<i64>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, rule: &str, nodes: Vec<i64>, message: String) {
        self.violations.push(Violation {
            rule: rule.to_string(),
            nodes,
            message,
        });
    }
}

/// Checks every structural invariant of a node list against a horizon.
pub fn validate_tree(nodes: &[NodeSpec], horizon: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut by_id: HashMap<i64, &NodeSpec> = HashMap::new();
    for node in nodes {
        if by_id.insert(node.id, node).is_some() {
            report.push("unique-id", vec![node.id], format!("duplicate node id {}", node.id));
        }
    }

    let roots: Vec<i64> = nodes.iter().filter(|n| n.parent.is_none()).map(|n| n.id).collect();
    if roots.len() != 1 {
        report.push(
            "single-root",
            roots.clone(),
            format!("expected exactly one root, found {}", roots.len()),
        );
    }

    let mut children: HashMap<i64, Vec<&NodeSpec>> = HashMap::new();
    for node in nodes {
        if !node.prob.is_finite() || node.prob <= 0.0 || node.prob > 1.0 + TOL_PROB {
            report.push(
                "prob-range",
                vec![node.id],
                format!("probability {} outside (0, 1]", node.prob),
            );
        }
        if node.depth > horizon {
            report.push(
                "depth-range",
                vec![node.id],
                format!("depth {} exceeds horizon {}", node.depth, horizon),
            );
        }
        match node.parent {
            None => {
                if node.depth != 0 {
                    report.push("root-depth", vec![node.id], format!("root at depth {}", node.depth));
                }
                if (node.prob - 1.0).abs() > TOL_PROB {
                    report.push("root-prob", vec![node.id], format!("root probability {} != 1", node.prob));
                }
            }
            Some(pid) => match by_id.get(&pid) {
                None => report.push(
                    "parent-exists",
                    vec![node.id, pid],
                    format!("node {} references unknown parent {}", node.id, pid),
                ),
                Some(parent) => {
                    if node.depth != parent.depth + 1 {
                        report.push(
                            "depth-step",
                            vec![node.id, pid],
                            format!(
                                "node {} has depth {} but parent {} has depth {}",
                                node.id, node.depth, pid, parent.depth
                            ),
                        );
                    }
                    children.entry(pid).or_default().push(node);
                }
            },
        }
    }

    let mut ids: Vec<i64> = by_id.keys().copied().collect();
    ids.sort_unstable();
    for id in ids {
        let node = by_id[&id];
        match children.get(&id) {
            Some(kids) => {
                let sum: f64 = kids.iter().map(|k| k.prob).sum();
                if (sum - 1.0).abs() > TOL_PROB {
                    report.push(
                        "children-sum",
                        std::iter::once(id).chain(kids.iter().map(|k| k.id)).collect(),
                        format!("children of {} sum {} != 1", id, sum),
                    );
                }
            }
            None => {
                if node.depth < horizon {
                    report.push(
                        "no-dead-ends",
                        vec![id],
                        format!("node {} at depth {} < horizon {} has no children", id, node.depth, horizon),
                    );
                }
            }
        }
    }

    if report.is_valid() {
        // Cycles cannot survive the depth-step rule, but disconnected
        // components can if they contain a cycle in parent pointers; reachability
        // from the root rules that out.
        let root = roots[0];
        let mut seen = HashSet::new();
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if seen.insert(id) {
                if let Some(kids) = children.get(&id) {
                    stack.extend(kids.iter().map(|k| k.id));
                }
            }
        }
        if seen.len() != nodes.len() {
            let mut orphans: Vec<i64> = nodes.iter().map(|n| n.id).filter(|id| !seen.contains(id)).collect();
            orphans.sort_unstable();
            report.push("reachable", orphans, "nodes unreachable from the root".to_string());
        }
    }
    report
}

/// A validated scenario tree.
#[derive(Clone, Debug)]
pub struct ScenarioTree {
    dims: Dims,
    ids: Vec<i64>,
    depth: Vec<usize>,
    parent: Vec<Option<usize>>,
    cond_prob: Vec<f64>,
    path_prob: Vec<f64>,
    layer_start: Vec<usize>,
    /// `parent_pos[t][p]`: position in layer `t - 1` of the parent of node `p` in layer `t`.
    parent_pos: Vec<Vec<usize>>,
    /// `children[t][p]`: positions in layer `t + 1` of the children of node `p` in layer `t`.
    children: Vec<Vec<Vec<usize>>>,
    index_of: HashMap<i64, usize>,
}

impl ScenarioTree {
    /// Validates and indexes the nodes. Children probabilities within
    /// [`TOL_PROB`] of summing to one are renormalized; anything else is rejected.
    pub fn new(nodes: &[NodeSpec], dims: Dims) -> Result<Self> {
        if dims.n == 0 {
            return Err(Error::Input("number of contract types must be at least 1".into()));
        }
        if dims.horizon < dims.t_bar {
            return Err(Error::Input("horizon shorter than the last issue time".into()));
        }
        let report = validate_tree(nodes, dims.horizon);
        if !report.is_valid() {
            let msgs: Vec<String> = report.violations.iter().map(|v| v.message.clone()).collect();
            return Err(Error::InvalidTree(msgs.join("; ")));
        }

        let mut order: Vec<&NodeSpec> = nodes.iter().collect();
        order.sort_by_key(|n| (n.depth, n.id));
        let max_depth = order.last().map(|n| n.depth).unwrap_or(0);
        if max_depth != dims.horizon {
            return Err(Error::InvalidTree(format!(
                "deepest layer at {} but horizon is {}",
                max_depth, dims.horizon
            )));
        }

        let index_of: HashMap<i64, usize> = order.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let ids: Vec<i64> = order.iter().map(|n| n.id).collect();
        let depth: Vec<usize> = order.iter().map(|n| n.depth).collect();
        let parent: Vec<Option<usize>> = order.iter().map(|n| n.parent.map(|p| index_of[&p])).collect();

        let mut layer_start = vec![0; dims.horizon + 2];
        for &d in &depth {
            layer_start[d + 1] += 1;
        }
        for d in 0..=dims.horizon {
            layer_start[d + 1] += layer_start[d];
        }

        // renormalize sibling probabilities
        let mut cond_prob: Vec<f64> = order.iter().map(|n| n.prob).collect();
        cond_prob[0] = 1.0;
        let mut sums = vec![0.0; ids.len()];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                sums[*p] += cond_prob[i];
            }
        }
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                cond_prob[i] /= sums[*p];
            }
        }

        let mut path_prob = vec![0.0; ids.len()];
        for i in 0..ids.len() {
            path_prob[i] = match parent[i] {
                None => 1.0,
                Some(p) => path_prob[p] * cond_prob[i],
            };
        }

        let mut parent_pos = vec![Vec::new(); dims.horizon + 1];
        let mut children = vec![Vec::new(); dims.horizon + 1];
        for t in 0..=dims.horizon {
            let (lo, hi) = (layer_start[t], layer_start[t + 1]);
            if t > 0 {
                parent_pos[t] = (lo..hi).map(|i| parent[i].unwrap() - layer_start[t - 1]).collect();
            }
            children[t] = vec![Vec::new(); hi - lo];
        }
        for t in 1..=dims.horizon {
            for (p, &pp) in parent_pos[t].iter().enumerate() {
                children[t - 1][pp].push(p);
            }
        }
        Ok(Self {
            dims,
            ids,
            depth,
            parent,
            cond_prob,
            path_prob,
            layer_start,
            parent_pos,
            children,
            index_of,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn horizon(&self) -> usize {
        self.dims.horizon
    }

    pub fn t_bar(&self) -> usize {
        self.dims.t_bar
    }

    pub fn n_contracts(&self) -> usize {
        self.dims.n
    }

    pub fn n_nodes(&self) -> usize {
        self.ids.len()
    }

    pub fn layer_len(&self, depth: usize) -> usize {
        self.layer_start[depth + 1] - self.layer_start[depth]
    }

    /// Node ids of a layer in canonical order.
    pub fn layer_ids(&self, depth: usize) -> &[i64] {
        &self.ids[self.layer_start[depth]..self.layer_start[depth + 1]]
    }

    /// Path probabilities of a layer in canonical order.
    pub fn layer_probs(&self, depth: usize) -> &[f64] {
        &self.path_prob[self.layer_start[depth]..self.layer_start[depth + 1]]
    }

    pub fn cond_probs(&self, depth: usize) -> &[f64] {
        &self.cond_prob[self.layer_start[depth]..self.layer_start[depth + 1]]
    }

    pub fn parent_positions(&self, depth: usize) -> &[usize] {
        &self.parent_pos[depth]
    }

    /// Positions in layer `depth + 1` of the children of a node.
    pub fn children(&self, depth: usize, pos: usize) -> &[usize] {
        &self.children[depth][pos]
    }

    /// `(depth, position)` of a node id.
    pub fn locate(&self, id: i64) -> Result<(usize, usize)> {
        let idx = *self.index_of.get(&id).ok_or(Error::UnknownNode(id))?;
        let d = self.depth[idx];
        Ok((d, idx - self.layer_start[d]))
    }

    pub fn parent_id(&self, id: i64) -> Result<Option<i64>> {
        let idx = *self.index_of.get(&id).ok_or(Error::UnknownNode(id))?;
        Ok(self.parent[idx].map(|p| self.ids[p]))
    }

    pub fn path_probability(&self, id: i64) -> Result<f64> {
        let idx = *self.index_of.get(&id).ok_or(Error::UnknownNode(id))?;
        Ok(self.path_prob[idx])
    }

    /// Position in layer `to` of the ancestor of node `pos` in layer `from`.
    pub fn ancestor(&self, from: usize, pos: usize, to: usize) -> usize {
        debug_assert!(to <= from);
        let mut p = pos;
        for t in (to + 1..=from).rev() {
            p = self.parent_pos[t][p];
        }
        p
    }

    /// Ancestor positions in layer `to` for every node of layer `from`.
    pub fn ancestor_map(&self, from: usize, to: usize) -> Vec<usize> {
        let mut map: Vec<usize> = (0..self.layer_len(from)).collect();
        for t in (to + 1..=from).rev() {
            for p in map.iter_mut() {
                *p = self.parent_pos[t][*p];
            }
        }
        map
    }

    /// Offset of stage `k` in the flat portfolio coordinate vector.
    pub fn stage_offset(&self, k: usize) -> usize {
        (0..k).map(|j| self.layer_len(j)).sum::<usize>() * self.dims.n
    }

    /// Dimension of the portfolio space `H`.
    pub fn portfolio_dim(&self) -> usize {
        self.stage_offset(self.dims.t_bar + 1)
    }

    fn check_var(&self, x: &Adapted) -> Result<()> {
        if x.depth > self.dims.horizon {
            return Err(Error::Shape(format!("depth {} beyond horizon", x.depth)));
        }
        if x.values.len() != self.layer_len(x.depth) * x.width {
            return Err(Error::Shape(format!(
                "variable at depth {} has {} values, expected {}",
                x.depth,
                x.values.len(),
                self.layer_len(x.depth) * x.width
            )));
        }
        Ok(())
    }

    /// Unconditional expectation of an adapted variable.
    pub fn expectation(&self, x: &Adapted) -> Result<Vec<f64>> {
        self.check_var(x)?;
        Ok(self.expect_unchecked(x))
    }

    pub(crate) fn expect_unchecked(&self, x: &Adapted) -> Vec<f64> {
        let probs = self.layer_probs(x.depth);
        let mut out = vec![0.0; x.width];
        for (pos, p) in probs.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(x.at(pos)) {
                *o += p * v;
            }
        }
        out
    }

    /// `E(x | F_k)` as a variable on the depth-`k` layer.
    pub fn conditional_expectation(&self, x: &Adapted, k: usize) -> Result<Adapted> {
        self.check_var(x)?;
        if k > x.depth {
            return Err(Error::OutOfRange(format!(
                "conditioning depth {} beyond variable depth {}",
                k, x.depth
            )));
        }
        Ok(self.condition_unchecked(x, k))
    }

    pub(crate) fn condition_unchecked(&self, x: &Adapted, k: usize) -> Adapted {
        let mut cur = x.clone();
        for t in (k + 1..=x.depth).rev() {
            let w = cur.width;
            let mut next = vec![0.0; self.layer_len(t - 1) * w];
            let cp = self.cond_probs(t);
            for (pos, &pp) in self.parent_pos[t].iter().enumerate() {
                let src = &cur.values[pos * w..(pos + 1) * w];
                let dst = &mut next[pp * w..(pp + 1) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += cp[pos] * s;
                }
            }
            cur = Adapted {
                depth: t - 1,
                width: w,
                values: next,
            };
        }
        cur
    }

    /// Re-expresses a depth-`d` variable on a deeper layer (values copied from ancestors).
    pub fn lift(&self, x: &Adapted, to: usize) -> Result<Adapted> {
        self.check_var(x)?;
        if to < x.depth || to > self.dims.horizon {
            return Err(Error::OutOfRange(format!("cannot lift depth {} to {}", x.depth, to)));
        }
        Ok(self.lift_unchecked(x, to))
    }

    pub(crate) fn lift_unchecked(&self, x: &Adapted, to: usize) -> Adapted {
        let w = x.width;
        let anc = self.ancestor_map(to, x.depth);
        let mut values = Vec::with_capacity(anc.len() * w);
        for a in anc {
            values.extend_from_slice(x.at(a));
        }
        Adapted {
            depth: to,
            width: w,
            values,
        }
    }

    /// Inner product of `H`: probability-weighted sum of nodewise dot products over all stages.
    pub fn inner_product(&self, a: &Portfolio, b: &Portfolio) -> Result<f64> {
        self.check_portfolio(a)?;
        self.check_portfolio(b)?;
        Ok(self.inner_unchecked(a, b))
    }

    pub(crate) fn inner_unchecked(&self, a: &Portfolio, b: &Portfolio) -> f64 {
        let mut total = 0.0;
        for (sa, sb) in a.stages.iter().zip(&b.stages) {
            let probs = self.layer_probs(sa.depth);
            for (pos, p) in probs.iter().enumerate() {
                let dot: f64 = sa.at(pos).iter().zip(sb.at(pos)).map(|(x, y)| x * y).sum();
                total += p * dot;
            }
        }
        total
    }

    pub fn norm(&self, a: &Portfolio) -> f64 {
        self.inner_unchecked(a, a).max(0.0).sqrt()
    }

    pub fn check_portfolio(&self, a: &Portfolio) -> Result<()> {
        if a.stages.len() != self.dims.t_bar + 1 {
            return Err(Error::Shape(format!(
                "portfolio has {} stages, expected {}",
                a.stages.len(),
                self.dims.t_bar + 1
            )));
        }
        for (k, s) in a.stages.iter().enumerate() {
            if s.depth != k || s.width != self.dims.n {
                return Err(Error::Shape(format!("stage {} has wrong depth or width", k)));
            }
            self.check_var(s)?;
        }
        Ok(())
    }
}

/// A scalar- or vector-valued random variable measurable w.r.t. one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapted {
    depth: usize,
    width: usize,
    values: Vec<f64>,
}

impl Adapted {
    pub fn zeros(tree: &ScenarioTree, depth: usize, width: usize) -> Self {
        Self {
            depth,
            width,
            values: vec![0.0; tree.layer_len(depth) * width],
        }
    }

    pub fn constant(tree: &ScenarioTree, depth: usize, value: &[f64]) -> Self {
        let mut values = Vec::with_capacity(tree.layer_len(depth) * value.len());
        for _ in 0..tree.layer_len(depth) {
            values.extend_from_slice(value);
        }
        Self {
            depth,
            width: value.len(),
            values,
        }
    }

    pub fn from_values(tree: &ScenarioTree, depth: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let x = Self { depth, width, values };
        tree.check_var(&x)?;
        Ok(x)
    }

    pub fn from_fn(tree: &ScenarioTree, depth: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let nodes = tree.layer_len(depth);
        let mut values = Vec::with_capacity(nodes * width);
        for pos in 0..nodes {
            for i in 0..width {
                values.push(f(pos, i));
            }
        }
        Self { depth, width, values }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_nodes(&self) -> usize {
        self.values.len() / self.width.max(1)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at(&self, pos: usize) -> &[f64] {
        &self.values[pos * self.width..(pos + 1) * self.width]
    }

    pub fn at_mut(&mut self, pos: usize) -> &mut [f64] {
        &mut self.values[pos * self.width..(pos + 1) * self.width]
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Adapted) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|x| *x *= a);
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// An element of `H`: one `R^N`-valued adapted variable per issue time `0..=t_bar`.
#[derive(Clone, Debug, PartialEq)]
pub struct Portfolio {
    stages: Vec<Adapted>,
}

impl Portfolio {
    pub fn zeros(tree: &ScenarioTree) -> Self {
        let n = tree.n_contracts();
        Self {
            stages: (0..=tree.t_bar()).map(|k| Adapted::zeros(tree, k, n)).collect(),
        }
    }

    pub fn from_stages(tree: &ScenarioTree, stages: Vec<Adapted>) -> Result<Self> {
        let p = Self { stages };
        tree.check_portfolio(&p)?;
        Ok(p)
    }

    /// Same vector at every node of each stage.
    pub fn deterministic(tree: &ScenarioTree, per_stage: &[Vec<f64>]) -> Result<Self> {
        if per_stage.len() != tree.t_bar() + 1 {
            return Err(Error::Shape("one vector per issue time expected".into()));
        }
        let stages = per_stage
            .iter()
            .enumerate()
            .map(|(k, v)| Adapted::constant(tree, k, v))
            .collect();
        Self::from_stages(tree, stages)
    }

    /// Builds a portfolio from canonical flat coordinates (stage, node position, contract).
    pub fn from_flat(tree: &ScenarioTree, flat: &[f64]) -> Result<Self> {
        if flat.len() != tree.portfolio_dim() {
            return Err(Error::Shape(format!(
                "flat vector has length {}, expected {}",
                flat.len(),
                tree.portfolio_dim()
            )));
        }
        let n = tree.n_contracts();
        let stages = (0..=tree.t_bar())
            .map(|k| {
                let off = tree.stage_offset(k);
                let len = tree.layer_len(k) * n;
                Adapted {
                    depth: k,
                    width: n,
                    values: flat[off..off + len].to_vec(),
                }
            })
            .collect();
        Ok(Self { stages })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.stages.iter().flat_map(|s| s.values.iter().copied()).collect()
    }

    pub fn stages(&self) -> &[Adapted] {
        &self.stages
    }

    pub fn stage(&self, k: usize) -> &Adapted {
        &self.stages[k]
    }

    pub fn stage_mut(&mut self, k: usize) -> &mut Adapted {
        &mut self.stages[k]
    }

    pub fn axpy(&mut self, a: f64, other: &Portfolio) {
        for (s, o) in self.stages.iter_mut().zip(&other.stages) {
            s.axpy(a, o);
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.stages.iter_mut().for_each(|s| s.scale(a));
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// Smallest component over all nodes and stages.
    pub fn min_component(&self) -> f64 {
        self.stages
            .iter()
            .flat_map(|s| s.values.iter())
            .fold(f64::INFINITY, |m, x| m.min(*x))
    }

    pub fn max_abs(&self) -> f64 {
        self.stages.iter().fold(0.0, |m, s| m.max(s.max_abs()))
    }
}
