//! Hierarchical navigable small-world graph over unit vectors.
//!
//! Similarity is the dot product. Construction is sequential and seeded, so
//! the same vectors and parameters always produce the same graph; this is
//! what lets a persisted index store only vectors and parameters.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Out-degree on upper layers; layer 0 allows twice this.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 24,
            ef_construction: 200,
            ef_search: 160,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    sim: f32,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Visited {
    bits: Vec<u64>,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            bits: vec![0; n.div_ceil(64)],
        }
    }

    /// Marks `id`; returns false if it was already marked.
    fn insert(&mut self, id: u32) -> bool {
        let (w, b) = ((id / 64) as usize, id % 64);
        let fresh = self.bits[w] & (1 << b) == 0;
        self.bits[w] |= 1 << b;
        fresh
    }
}

#[derive(Debug, Clone)]
pub struct Hnsw {
    params: HnswParams,
    dim: usize,
    /// `links[node][layer]` lists neighbours of `node` on `layer`.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    top_layer: usize,
}

impl Hnsw {
    /// Builds over `vectors`, a row-major `n x dim` matrix.
    pub fn build(vectors: &[f32], dim: usize, params: HnswParams) -> Self {
        let n = vectors.len().checked_div(dim).unwrap_or(0);
        let m = params.m.max(2);
        let level_mult = 1.0 / (m as f64).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut graph = Self {
            params,
            dim,
            links: Vec::with_capacity(n),
            entry: None,
            top_layer: 0,
        };
        for node in 0..n as u32 {
            let u: f64 = rng.random::<f64>();
            let level = (-(1.0 - u).ln() * level_mult).floor() as usize;
            graph.insert(vectors, node, level.min(16));
        }
        graph
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    fn max_degree(&self, layer: usize) -> usize {
        let m = self.params.m.max(2);
        if layer == 0 {
            2 * m
        } else {
            m
        }
    }

    fn row<'a>(&self, vectors: &'a [f32], id: u32) -> &'a [f32] {
        let start = id as usize * self.dim;
        &vectors[start..start + self.dim]
    }

    fn sim(&self, vectors: &[f32], query: &[f32], id: u32) -> f32 {
        dot(query, self.row(vectors, id))
    }

    fn insert(&mut self, vectors: &[f32], node: u32, level: usize) {
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(mut ep) = self.entry else {
            self.entry = Some(node);
            self.top_layer = level;
            return;
        };
        let query = self.row(vectors, node).to_vec();
        let mut layer = self.top_layer;
        while layer > level {
            ep = self.greedy(vectors, &query, ep, layer);
            layer -= 1;
        }
        let mut entry_points = vec![Cand {
            sim: self.sim(vectors, &query, ep),
            id: ep,
        }];
        for layer in (0..=level.min(self.top_layer)).rev() {
            let found = self.search_layer(
                vectors,
                &query,
                &entry_points,
                self.params.ef_construction.max(1),
                layer,
            );
            let max_deg = self.max_degree(layer);
            let selected = self.select_neighbors(vectors, &found, max_deg);
            self.links[node as usize][layer] = selected.iter().map(|c| c.id).collect();
            for c in &selected {
                self.connect(vectors, c.id, node, layer, max_deg);
            }
            entry_points = found;
        }
        if level > self.top_layer {
            self.top_layer = level;
            self.entry = Some(node);
        }
    }

    /// Adds `new` to `node`'s neighbour list on `layer`, pruning with the
    /// selection heuristic when the list overflows.
    fn connect(&mut self, vectors: &[f32], node: u32, new: u32, layer: usize, max_deg: usize) {
        let list = &mut self.links[node as usize][layer];
        if list.contains(&new) {
            return;
        }
        list.push(new);
        if list.len() <= max_deg {
            return;
        }
        let base = self.row(vectors, node).to_vec();
        let mut cands: Vec<Cand> = self.links[node as usize][layer]
            .iter()
            .map(|&id| Cand {
                sim: self.sim(vectors, &base, id),
                id,
            })
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        let kept = self.select_neighbors(vectors, &cands, max_deg);
        self.links[node as usize][layer] = kept.iter().map(|c| c.id).collect();
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the
    /// base than to every neighbour already kept, then top up with the best
    /// pruned candidates. `cands` must be sorted by similarity descending.
    fn select_neighbors(&self, vectors: &[f32], cands: &[Cand], max_deg: usize) -> Vec<Cand> {
        let mut kept: Vec<Cand> = Vec::with_capacity(max_deg);
        let mut pruned = Vec::new();
        for &c in cands {
            if kept.len() >= max_deg {
                break;
            }
            let row = self.row(vectors, c.id);
            let diverse = kept
                .iter()
                .all(|k| dot(row, self.row(vectors, k.id)) < c.sim);
            if diverse {
                kept.push(c);
            } else {
                pruned.push(c);
            }
        }
        for c in pruned {
            if kept.len() >= max_deg {
                break;
            }
            kept.push(c);
        }
        kept
    }

    fn greedy(&self, vectors: &[f32], query: &[f32], mut ep: u32, layer: usize) -> u32 {
        let mut best = self.sim(vectors, query, ep);
        loop {
            let mut changed = false;
            for &nb in &self.links[ep as usize][layer] {
                let s = self.sim(vectors, query, nb);
                if s > best || (s == best && nb < ep) {
                    best = s;
                    ep = nb;
                    changed = true;
                }
            }
            if !changed {
                return ep;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` candidates, best first.
    fn search_layer(
        &self,
        vectors: &[f32],
        query: &[f32],
        entry_points: &[Cand],
        ef: usize,
        layer: usize,
    ) -> Vec<Cand> {
        let mut visited = Visited::new(self.links.len());
        let mut frontier: BinaryHeap<Cand> = BinaryHeap::new();
        let mut results: BinaryHeap<std::cmp::Reverse<Cand>> = BinaryHeap::new();
        for &ep in entry_points {
            if visited.insert(ep.id) {
                frontier.push(ep);
                results.push(std::cmp::Reverse(ep));
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(c) = frontier.pop() {
            let worst = results.peek().map(|r| r.0.sim).unwrap_or(f32::NEG_INFINITY);
            if c.sim < worst && results.len() >= ef {
                break;
            }
            for &nb in &self.links[c.id as usize][layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let s = self.sim(vectors, query, nb);
                let worst = results.peek().map(|r| r.0.sim).unwrap_or(f32::NEG_INFINITY);
                if results.len() < ef || s > worst {
                    let cand = Cand { sim: s, id: nb };
                    frontier.push(cand);
                    results.push(std::cmp::Reverse(cand));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Approximate nearest rows to `query`: `(row, similarity)` pairs, best
    /// first, at most `max(k, ef_search)` of them.
    pub fn search(&self, vectors: &[f32], query: &[f32], k: usize) -> Vec<(u32, f32)> {
        let Some(mut ep) = self.entry else {
            return Vec::new();
        };
        for layer in (1..=self.top_layer).rev() {
            ep = self.greedy(vectors, query, ep, layer);
        }
        let start = Cand {
            sim: self.sim(vectors, query, ep),
            id: ep,
        };
        let ef = self.params.ef_search.max(k);
        self.search_layer(vectors, query, &[start], ef, 0)
            .into_iter()
            .map(|c| (c.id, c.sim))
            .collect()
    }
}
