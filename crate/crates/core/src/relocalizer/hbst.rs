//! Binary search tree over descriptor bits for approximate Hamming-nearest matching.

use crate::frontend::{hamming_distance, Descriptor};
use crate::map::{LandmarkId, LocalMapId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HbstEntry {
    pub descriptor: Descriptor,
    pub landmark: LandmarkId,
    pub map: LocalMapId,
}

#[derive(Clone, Debug, PartialEq)]
pub enum HbstNode {
    Leaf(Vec<HbstEntry>),
    /// Descriptors with bit `bit` clear go left, set go right.
    Internal { bit: u16, children: Box<[HbstNode; 2]> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HbstMatch {
    pub query: usize,
    pub landmark: LandmarkId,
    pub map: LocalMapId,
    pub distance: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HbstTree {
    root: HbstNode,
    pub max_leaf_size: usize,
    pub max_depth: usize,
    len: usize,
}

impl Default for HbstTree {
    fn default() -> Self {
        Self::new(100, 16)
    }
}

impl HbstTree {
    pub fn new(max_leaf_size: usize, max_depth: usize) -> Self {
        assert!(max_leaf_size >= 1, "leaf size must be positive");
        Self { root: HbstNode::Leaf(Vec::new()), max_leaf_size, max_depth, len: 0 }
    }

    pub fn root(&self) -> &HbstNode {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn insert(&mut self, entries: impl IntoIterator<Item = HbstEntry>) {
        let mut path = Vec::new();
        for e in entries {
            path.clear();
            insert_into(&mut self.root, e, 0, &mut path, self.max_leaf_size, self.max_depth);
            self.len += 1;
        }
    }

    fn leaf_for(&self, d: &Descriptor) -> &[HbstEntry] {
        let mut node = &self.root;
        loop {
            match node {
                HbstNode::Leaf(entries) => return entries,
                HbstNode::Internal { bit, children } => node = &children[d.bit(*bit as usize) as usize],
            }
        }
    }

    /// Best entry in the query's leaf with distance at most `max_distance`; the first
    /// inserted wins ties.
    pub fn query_one(&self, d: &Descriptor, max_distance: u32) -> Option<(HbstEntry, u32)> {
        let mut best: Option<(HbstEntry, u32)> = None;
        for e in self.leaf_for(d) {
            let dist = hamming_distance(d, &e.descriptor);
            if dist <= max_distance && best.is_none_or(|(_, b)| dist < b) {
                best = Some((*e, dist));
            }
        }
        best
    }

    pub fn query(&self, queries: &[Descriptor], max_distance: u32) -> Vec<HbstMatch> {
        queries
            .iter()
            .enumerate()
            .filter_map(|(query, d)| {
                self.query_one(d, max_distance)
                    .map(|(e, distance)| HbstMatch { query, landmark: e.landmark, map: e.map, distance })
            })
            .collect()
    }

    /// Every entry in the query's leaf within `max_distance`, in insertion order.
    pub fn query_all(&self, d: &Descriptor, max_distance: u32) -> Vec<(HbstEntry, u32)> {
        self.leaf_for(d)
            .iter()
            .map(|e| (*e, hamming_distance(d, &e.descriptor)))
            .filter(|&(_, dist)| dist <= max_distance)
            .collect()
    }

    /// Checks that every stored descriptor agrees with the bit decisions above it.
    pub fn check_paths(&self) -> bool {
        fn walk(node: &HbstNode, path: &mut Vec<(u16, bool)>, max_leaf: usize, max_depth: usize) -> bool {
            match node {
                HbstNode::Leaf(entries) => {
                    entries.iter().all(|e| path.iter().all(|&(b, v)| e.descriptor.bit(b as usize) == v))
                        && (entries.len() <= max_leaf || path.len() >= max_depth || unsplittable(entries, path))
                }
                HbstNode::Internal { bit, children } => {
                    (0..2).all(|side| {
                        path.push((*bit, side == 1));
                        let ok = walk(&children[side], path, max_leaf, max_depth);
                        path.pop();
                        ok
                    })
                }
            }
        }
        fn unsplittable(entries: &[HbstEntry], path: &[(u16, bool)]) -> bool {
            let used: Vec<u16> = path.iter().map(|p| p.0).collect();
            choose_split_bit(entries, &used).is_none()
        }
        walk(&self.root, &mut Vec::new(), self.max_leaf_size, self.max_depth)
    }
}

/// Unused bit whose mean over `entries` is closest to 0.5; `None` when every unused bit is
/// constant across the leaf.
fn choose_split_bit(entries: &[HbstEntry], used: &[u16]) -> Option<u16> {
    let n = entries.len();
    let mut best: Option<(u16, usize)> = None;
    for bit in 0..Descriptor::BITS as u16 {
        if used.contains(&bit) {
            continue;
        }
        let ones = entries.iter().filter(|e| e.descriptor.bit(bit as usize)).count();
        if ones == 0 || ones == n {
            continue;
        }
        // |2·ones − n| ranks by distance of the mean from one half without floats.
        let score = (2 * ones).abs_diff(n);
        if best.is_none_or(|(_, s)| score < s) {
            best = Some((bit, score));
        }
    }
    best.map(|(b, _)| b)
}

fn insert_into(node: &mut HbstNode, e: HbstEntry, depth: usize, path: &mut Vec<u16>, max_leaf: usize, max_depth: usize) {
    match node {
        HbstNode::Internal { bit, children } => {
            path.push(*bit);
            let side = e.descriptor.bit(*bit as usize) as usize;
            insert_into(&mut children[side], e, depth + 1, path, max_leaf, max_depth);
        }
        HbstNode::Leaf(entries) => {
            entries.push(e);
            split_if_needed(node, depth, path, max_leaf, max_depth);
        }
    }
}

fn split_if_needed(node: &mut HbstNode, depth: usize, path: &mut Vec<u16>, max_leaf: usize, max_depth: usize) {
    let HbstNode::Leaf(entries) = node else { return };
    if entries.len() <= max_leaf || depth >= max_depth {
        return;
    }
    let Some(bit) = choose_split_bit(entries, path) else { return };
    let (ones, zeros): (Vec<_>, Vec<_>) = std::mem::take(entries).into_iter().partition(|e| e.descriptor.bit(bit as usize));
    let mut children = Box::new([HbstNode::Leaf(zeros), HbstNode::Leaf(ones)]);
    path.push(bit);
    for child in children.iter_mut() {
        split_if_needed(child, depth + 1, path, max_leaf, max_depth);
    }
    path.pop();
    *node = HbstNode::Internal { bit, children };
}
