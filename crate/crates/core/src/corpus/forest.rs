//! Random-projection forest for approximate nearest-neighbour search over
//! unit vectors.
//!
//! Each tree splits its point set by the hyperplane equidistant from two
//! randomly drawn members. Queries walk all trees at once through a shared
//! priority queue ordered by hyperplane margin, gather `search_k` candidate
//! points, and rank the candidates exactly by dot product.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        normal: Vec<f32>,
        offset: f32,
        below: u32,
        above: u32,
    },
    Leaf(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
    root: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<Tree>,
    leaf_size: usize,
    len: usize,
}

pub const DEFAULT_LEAF_SIZE: usize = 16;
const FOREST_SEED: u64 = 0x5eed_f0e5;

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Forest {
    pub fn build(vectors: &[Vec<f32>], n_trees: usize, leaf_size: usize) -> Self {
        let leaf_size = leaf_size.max(1);
        let trees = (0..n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(FOREST_SEED ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let mut nodes = Vec::new();
                let all: Vec<u32> = (0..vectors.len() as u32).collect();
                let root = grow(vectors, all, leaf_size, &mut rng, &mut nodes, 0);
                Tree { nodes, root }
            })
            .collect();
        Self {
            trees,
            leaf_size,
            len: vectors.len(),
        }
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Top-`k` indices by dot product among the candidates reached after
    /// visiting `search_k` points (default `n_trees * k`). Ties break on the
    /// lower index.
    pub fn query(&self, vectors: &[Vec<f32>], q: &[f32], k: usize, search_k: Option<usize>) -> Vec<(usize, f32)> {
        if k == 0 || self.len == 0 {
            return Vec::new();
        }
        let budget = search_k.unwrap_or(self.trees.len().max(1) * k).max(k);
        let mut heap = BinaryHeap::new();
        for (t, tree) in self.trees.iter().enumerate() {
            heap.push(Frontier {
                priority: f32::INFINITY,
                tree: t,
                node: tree.root,
            });
        }
        let mut seen: HashSet<u32> = HashSet::new();
        let mut candidates: Vec<u32> = Vec::new();
        while let Some(item) = heap.pop() {
            if candidates.len() >= budget {
                break;
            }
            match &self.trees[item.tree].nodes[item.node as usize] {
                Node::Leaf(points) => {
                    for &p in points {
                        if seen.insert(p) {
                            candidates.push(p);
                        }
                    }
                }
                Node::Split {
                    normal,
                    offset,
                    below,
                    above,
                } => {
                    let margin = dot(normal, q) - offset;
                    heap.push(Frontier {
                        priority: item.priority.min(margin),
                        tree: item.tree,
                        node: *above,
                    });
                    heap.push(Frontier {
                        priority: item.priority.min(-margin),
                        tree: item.tree,
                        node: *below,
                    });
                }
            }
        }
        let mut scored: Vec<(usize, f32)> = candidates
            .into_iter()
            .map(|i| (i as usize, dot(&vectors[i as usize], q)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }
}

#[derive(Debug, Clone, Copy)]
struct Frontier {
    priority: f32,
    tree: usize,
    node: u32,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Frontier {}
impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
    }
}

fn grow(
    vectors: &[Vec<f32>],
    mut points: Vec<u32>,
    leaf_size: usize,
    rng: &mut ChaCha8Rng,
    nodes: &mut Vec<Node>,
    depth: usize,
) -> u32 {
    if points.len() <= leaf_size || depth > 64 {
        nodes.push(Node::Leaf(points));
        return (nodes.len() - 1) as u32;
    }
    let i = rng.gen_range(0..points.len());
    let mut j = rng.gen_range(0..points.len() - 1);
    if j >= i {
        j += 1;
    }
    let (a, b) = (&vectors[points[i] as usize], &vectors[points[j] as usize]);
    let normal: Vec<f32> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let midpoint: Vec<f32> = a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect();
    let offset = dot(&normal, &midpoint);

    let (mut above, mut below): (Vec<u32>, Vec<u32>) = points
        .iter()
        .partition(|&&p| dot(&normal, &vectors[p as usize]) - offset > 0.0);
    if above.is_empty() || below.is_empty() {
        // Duplicate points: split arbitrarily so the recursion terminates.
        points.shuffle(rng);
        let half = points.len() / 2;
        below = points[..half].to_vec();
        above = points[half..].to_vec();
    }
    let slot = nodes.len();
    nodes.push(Node::Leaf(Vec::new()));
    let below_id = grow(vectors, below, leaf_size, rng, nodes, depth + 1);
    let above_id = grow(vectors, above, leaf_size, rng, nodes, depth + 1);
    nodes[slot] = Node::Split {
        normal,
        offset,
        below: below_id,
        above: above_id,
    };
    slot as u32
}
