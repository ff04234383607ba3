//! Channel reordering and layer splitting.
//!
//! Output channels of each layer are permuted so that channels of the same
//! accelerator become contiguous; consumers permute their input channels to
//! compensate; each layer is then cut into one sub-layer per contiguous run.
//!
//! Tensors whose channels are tied together form a *channel space*: a layer's
//! output, everything derived from it by pooling/ReLU/flatten, depthwise
//! layers over it, and all operands of an add. One permutation applies to a
//! whole space. It is planned from the earliest conv/FC producer in the space;
//! other producers keep their assignments under that order, which may leave
//! them with several runs per accelerator. Spaces that include the network
//! input or output keep their order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::deploy::{Deployment, SubLayer};
use crate::error::{Error, Result};
use crate::graph::{Graph, Op};

/// Bijection over channels: new position `i` holds old channel `forward[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPermutation {
    forward: Vec<usize>,
    #[serde(skip)]
    inverse: Vec<usize>,
}

impl ChannelPermutation {
    pub fn new(forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![usize::MAX; n];
        for (i, &j) in forward.iter().enumerate() {
            if j >= n || inverse[j] != usize::MAX {
                return Err(Error::Reorder(format!("{forward:?} is not a permutation")));
            }
            inverse[j] = i;
        }
        Ok(ChannelPermutation { forward, inverse })
    }

    pub fn identity(n: usize) -> Self {
        ChannelPermutation { forward: (0..n).collect(), inverse: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    /// Old channel `j` now sits at `inverse[j]`.
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// `out[i] = v[forward[i]]`.
    pub fn apply<T: Clone>(&self, v: &[T]) -> Vec<T> {
        self.forward.iter().map(|&j| v[j].clone()).collect()
    }

    /// `out[forward[i]] = v[i]`, undoing [`apply`](Self::apply).
    pub fn unapply<T: Clone>(&self, v: &[T]) -> Vec<T> {
        self.inverse.iter().map(|&i| v[i].clone()).collect()
    }

    /// Permutes blocks of `block` consecutive elements.
    fn apply_blocks<T: Clone>(&self, v: &[T], block: usize) -> Vec<T> {
        self.forward.iter().flat_map(|&j| v[j * block..(j + 1) * block].iter().cloned()).collect()
    }

    /// Expands a channel permutation over `hw` positions per channel.
    fn expand(&self, hw: usize) -> ChannelPermutation {
        let forward = self.forward.iter().flat_map(|&j| (0..hw).map(move |s| j * hw + s)).collect();
        ChannelPermutation::new(forward).expect("expansion of a permutation is a permutation")
    }
}

/// Stable grouping by accelerator index.
pub fn plan_permutation(assignments: &[usize]) -> ChannelPermutation {
    let mut order: Vec<usize> = (0..assignments.len()).collect();
    order.sort_by_key(|&c| assignments[c]);
    ChannelPermutation::new(order).expect("sorted indices form a permutation")
}

/// Contiguous runs of equal accelerators.
pub fn split_layer(assignments: &[usize]) -> Vec<SubLayer> {
    let mut out: Vec<SubLayer> = Vec::new();
    for (c, &a) in assignments.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.accelerator == a => s.end = c + 1,
            _ => out.push(SubLayer { accelerator: a, start: c, end: c + 1 }),
        }
    }
    out
}

/// Channel space of every node, identified by its lowest node index.
pub fn channel_spaces(graph: &Graph) -> Vec<usize> {
    let n = graph.nodes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    fn union(p: &mut [usize], a: usize, b: usize) {
        let (ra, rb) = (find(p, a), find(p, b));
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        p[hi] = lo;
    }
    for (i, node) in graph.nodes.iter().enumerate() {
        match node.op {
            Op::Input | Op::Linear | Op::Conv { depthwise: false, .. } => {}
            Op::Conv { depthwise: true, .. } | Op::MaxPool { .. } | Op::Gap | Op::Flatten | Op::Add => {
                for &j in &node.inputs {
                    union(&mut parent, i, j);
                }
            }
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

/// Per conv/FC layer, the permutation of its output channels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReorderPlan {
    pub perms: BTreeMap<usize, ChannelPermutation>,
}

/// Plans one permutation per channel space from the current assignments.
pub fn plan_reorder(dep: &Deployment) -> ReorderPlan {
    let g = &dep.graph;
    let spaces = channel_spaces(g);
    let fixed = |s: usize| spaces[0] == s || spaces[g.output()] == s;
    let mut by_space: BTreeMap<usize, ChannelPermutation> = BTreeMap::new();
    for (&i, l) in &dep.layers {
        let s = spaces[i];
        let primary = !matches!(g.nodes[i].op, Op::Conv { depthwise: true, .. });
        if by_space.contains_key(&s) || !primary {
            continue;
        }
        let p = if fixed(s) { ChannelPermutation::identity(l.assignment.len()) } else { plan_permutation(&l.assignment) };
        by_space.insert(s, p);
    }
    let perms = dep
        .layers
        .iter()
        .map(|(&i, l)| {
            let p = by_space.get(&spaces[i]).cloned().unwrap_or_else(|| ChannelPermutation::identity(l.assignment.len()));
            (i, p)
        })
        .collect();
    ReorderPlan { perms }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReorderOptions {
    /// Permute FC input features across spatial positions after a flatten.
    pub expand_flatten: bool,
    /// Insert an input gather where a consumer cannot absorb a permutation.
    pub allow_gather: bool,
}

impl Default for ReorderOptions {
    fn default() -> Self {
        ReorderOptions { expand_flatten: true, allow_gather: false }
    }
}

/// Applies the plan: permutes producers along output channels and consumers
/// along input channels. Sub-layers are not touched (see [`split_layers`]).
pub fn apply_reorder(dep: &Deployment, plan: &ReorderPlan, opts: ReorderOptions) -> Result<Deployment> {
    let g = &dep.graph;
    let spaces = channel_spaces(g);
    let mut space_perm: BTreeMap<usize, &ChannelPermutation> = BTreeMap::new();
    for (&i, p) in &plan.perms {
        let l = dep
            .layers
            .get(&i)
            .ok_or_else(|| Error::Reorder(format!("node {i} is not a layer of this network")))?;
        if p.len() != l.assignment.len() {
            return Err(Error::Reorder(format!(
                "permutation for `{}` has {} entries, layer has {} channels",
                g.nodes[i].name,
                p.len(),
                l.assignment.len()
            )));
        }
        let s = spaces[i];
        if (s == spaces[0] || s == spaces[g.output()]) && !p.is_identity() {
            return Err(Error::Reorder(format!(
                "`{}` feeds the network input/output order and cannot be permuted",
                g.nodes[i].name
            )));
        }
        match space_perm.get(&s) {
            Some(q) if *q != p => {
                return Err(Error::Reorder(format!(
                    "`{}` shares its channels with another layer and must use the same permutation",
                    g.nodes[i].name
                )))
            }
            _ => {
                space_perm.insert(s, p);
            }
        }
    }
    let mut out = dep.clone();
    for (&i, l) in out.layers.iter_mut() {
        let node = &g.nodes[i];
        let c = l.assignment.len();
        let per = l.weight.len() / c;
        // Output side.
        if let Some(p) = space_perm.get(&spaces[i]).filter(|p| !p.is_identity()) {
            l.weight = p.apply_blocks(&l.weight, per);
            l.bias = p.apply(&l.bias);
            l.assignment = p.apply(&l.assignment);
        }
        // Input side.
        let src = node.inputs[0];
        let Some(q) = space_perm.get(&spaces[src]).filter(|p| !p.is_identity()) else { continue };
        match node.op {
            Op::Conv { depthwise: true, .. } => {}
            Op::Conv { kernel, .. } => {
                let block = kernel * kernel;
                l.weight = (0..c)
                    .flat_map(|r| q.apply_blocks(&l.weight[r * per..(r + 1) * per], block))
                    .collect();
            }
            Op::Linear => {
                let src_node = &g.nodes[src];
                let q = if src_node.op == Op::Flatten {
                    let hw: usize = g.nodes[src_node.inputs[0]].shape[1..].iter().product();
                    if !opts.expand_flatten {
                        if !opts.allow_gather {
                            return Err(Error::Reorder(format!(
                                "`{}` reads a flattened tensor and cannot absorb a channel permutation \
                                 (enable flatten expansion or the gather fallback)",
                                node.name
                            )));
                        }
                        // Restore the original feature order in front of the layer.
                        l.input_gather = Some(q.expand(hw).inverse().to_vec());
                        continue;
                    }
                    q.expand(hw)
                } else {
                    (*q).clone()
                };
                l.weight = (0..c).flat_map(|r| q.apply(&l.weight[r * per..(r + 1) * per])).collect();
            }
            _ => unreachable!("only conv/fc nodes carry layers"),
        }
    }
    Ok(out)
}

/// Cuts every layer into contiguous per-accelerator sub-layers.
pub fn split_layers(dep: &mut Deployment) {
    for l in dep.layers.values_mut() {
        l.sublayers = Some(split_layer(&l.assignment));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSubLayer {
    pub accelerator: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub name: String,
    /// New position `i` holds original channel `permutation[i]`.
    pub permutation: Vec<usize>,
    pub sublayers: Vec<ManifestSubLayer>,
    /// More than one run for some accelerator.
    pub fragmented: bool,
    pub input_gather: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub network: String,
    pub gather_fallback: bool,
    pub layers: Vec<ManifestLayer>,
}

/// Plan, apply and split; returns the rewritten network and its manifest.
pub fn reorder_and_split(dep: &Deployment, opts: ReorderOptions) -> Result<(Deployment, Manifest)> {
    let plan = plan_reorder(dep);
    let mut out = apply_reorder(dep, &plan, opts)?;
    split_layers(&mut out);
    let layers = out
        .layers
        .iter()
        .map(|(&i, l)| {
            let subs = l.sublayers.clone().unwrap_or_default();
            let mut seen = vec![0usize; dep.accelerators.len()];
            subs.iter().for_each(|s| seen[s.accelerator] += 1);
            ManifestLayer {
                name: dep.graph.nodes[i].name.clone(),
                permutation: plan.perms[&i].forward().to_vec(),
                fragmented: seen.iter().any(|&k| k > 1),
                sublayers: subs
                    .iter()
                    .map(|s| ManifestSubLayer {
                        accelerator: dep.accelerators.get(s.accelerator).name.clone(),
                        start: s.start,
                        end: s.end,
                    })
                    .collect(),
                input_gather: l.input_gather.is_some(),
            }
        })
        .collect();
    let manifest = Manifest { network: dep.graph.name.clone(), gather_fallback: out.uses_gather(), layers };
    Ok((out, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stable_grouping() {
        assert_eq!(plan_permutation(&[0, 1, 0, 1]).forward(), &[0, 2, 1, 3]);
        assert!(plan_permutation(&[1, 1, 1]).is_identity());
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_layer(&[1; 4]), vec![SubLayer { accelerator: 1, start: 0, end: 4 }]);
        let ten = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1];
        assert_eq!(
            split_layer(&ten),
            vec![SubLayer { accelerator: 0, start: 0, end: 6 }, SubLayer { accelerator: 1, start: 6, end: 10 }]
        );
    }

    #[test]
    fn residual_operands_share_a_space() {
        let g = Graph::named("toy_resnet").unwrap();
        let s = channel_spaces(&g);
        let id = |n: &str| g.find(n).unwrap();
        assert_eq!(s[id("conv2")], s[id("conv4")]);
        assert_eq!(s[id("res")], s[id("conv2")]);
        assert_ne!(s[id("conv3")], s[id("conv2")]);
        assert_ne!(s[id("fc")], s[id("conv2")]);
        let m = Graph::named("toy_mobile").unwrap();
        let sm = channel_spaces(&m);
        assert_eq!(sm[m.find("dw2").unwrap()], sm[m.find("conv1").unwrap()]);
    }

    proptest! {
        #[test]
        fn permutation_round_trip(assign in prop::collection::vec(0usize..3, 1..64)) {
            let p = plan_permutation(&assign);
            let v: Vec<usize> = (0..assign.len()).collect();
            prop_assert_eq!(p.unapply(&p.apply(&v)), v);
            let grouped = p.apply(&assign);
            prop_assert!(grouped.windows(2).all(|w| w[0] <= w[1]));
            // Stability: channels of one accelerator keep their relative order.
            for a in 0..3 {
                let orig: Vec<usize> = (0..assign.len()).filter(|&c| assign[c] == a).collect();
                let kept: Vec<usize> = p.forward().iter().copied().filter(|&c| assign[c] == a).collect();
                prop_assert_eq!(orig, kept);
            }
        }
    }
}
