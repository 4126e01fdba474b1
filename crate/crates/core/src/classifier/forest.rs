//! Random forest of Gini-split binary decision trees.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows until leaves are pure.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features examined per split; `None` uses √dim.
    pub features_per_split: Option<usize>,
    /// Random candidate thresholds per feature; `None` tries every midpoint.
    pub candidate_thresholds: Option<usize>,
    pub balanced: bool,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_leaf: 1,
            features_per_split: None,
            candidate_thresholds: Some(32),
            balanced: true,
            bootstrap: true,
        }
    }
}

/// Row-major f32 feature matrix with binary labels.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub dim: usize,
    pub features: &'a [f32],
    pub labels: &'a [u8],
}

impl<'a> Samples<'a> {
    pub fn new(dim: usize, features: &'a [f32], labels: &'a [u8]) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::contract(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self { dim, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    fn value(&self, row: u32, f: usize) -> f32 {
        self.features[row as usize * self.dim + f]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        counts: [u32; 2],
        weight: [f64; 2],
    },
    Split {
        feature: u32,
        /// Rows with value ≤ threshold go left.
        threshold: f32,
        left: u32,
        right: u32,
        counts: [u32; 2],
        weight: [f64; 2],
        impurity_decrease: f64,
    },
}

impl Node {
    pub fn counts(&self) -> [u32; 2] {
        match self {
            Node::Leaf { counts, .. } | Node::Split { counts, .. } => *counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf(&self, x: &[f32]) -> &Node {
        let mut k = 0usize;
        loop {
            match &self.nodes[k] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => k = if x[*feature as usize] <= *threshold { *left } else { *right } as usize,
                leaf => return leaf,
            }
        }
    }

    /// Weighted majority at the reached leaf; ties go positive.
    pub fn predict(&self, x: &[f32]) -> bool {
        match self.leaf(x) {
            Node::Leaf { weight, .. } => weight[1] >= weight[0],
            Node::Split { .. } => unreachable!("leaf() stops at leaves"),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, k: usize) -> usize {
            match &t.nodes[k] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left as usize).max(go(t, *right as usize)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub dim: usize,
    pub config: ForestConfig,
    pub seed: u64,
    pub trees: Vec<Tree>,
    /// Normalized mean impurity decrease per feature.
    pub importance: Vec<f64>,
}

fn gini(w: [f64; 2]) -> f64 {
    let t = w[0] + w[1];
    if t <= 0.0 {
        return 0.0;
    }
    let (p0, p1) = (w[0] / t, w[1] / t);
    1.0 - p0 * p0 - p1 * p1
}

/// Weighted impurity decrease of a split: W·G − W_l·G_l − W_r·G_r.
pub fn gini_decrease(parent: [f64; 2], left: [f64; 2]) -> f64 {
    let right = [parent[0] - left[0], parent[1] - left[1]];
    (parent[0] + parent[1]) * gini(parent) - (left[0] + left[1]) * gini(left) - (right[0] + right[1]) * gini(right)
}

struct BestSplit {
    feature: usize,
    threshold: f32,
    decrease: f64,
}

struct Grower<'a> {
    data: Samples<'a>,
    class_weight: [f64; 2],
    cfg: &'a ForestConfig,
    mtry: usize,
    rng: ChaCha8Rng,
    importance: Vec<f64>,
}

impl Grower<'_> {
    fn stats(&self, rows: &[u32]) -> ([u32; 2], [f64; 2]) {
        let mut c = [0u32; 2];
        for &r in rows {
            c[self.data.labels[r as usize] as usize] += 1;
        }
        (c, [c[0] as f64 * self.class_weight[0], c[1] as f64 * self.class_weight[1]])
    }

    fn candidates(&mut self, rows: &[u32], f: usize) -> Vec<f32> {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &r in rows {
            let v = self.data.value(r, f);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(lo < hi) {
            return Vec::new();
        }
        match self.cfg.candidate_thresholds {
            Some(m) => {
                let mut c: Vec<f32> = (0..m).map(|_| self.rng.random_range(lo..hi)).collect();
                c.sort_by(f32::total_cmp);
                c.dedup();
                c
            }
            None => {
                let mut v: Vec<f32> = rows.iter().map(|&r| self.data.value(r, f)).collect();
                v.sort_by(f32::total_cmp);
                v.dedup();
                v.windows(2)
                    .map(|w| {
                        let m = w[0] + (w[1] - w[0]) / 2.0;
                        if m < w[1] {
                            m
                        } else {
                            w[0]
                        }
                    })
                    .collect()
            }
        }
    }

    /// Best split of `rows` on feature `f` among its candidate thresholds.
    fn best_on_feature(&mut self, rows: &[u32], f: usize, parent: [f64; 2]) -> Option<BestSplit> {
        let cands = self.candidates(rows, f);
        if cands.is_empty() {
            return None;
        }
        // bins[b]: rows whose value lies in (cands[b-1], cands[b]]
        let mut bw = vec![[0.0f64; 2]; cands.len() + 1];
        let mut bc = vec![0usize; cands.len() + 1];
        for &r in rows {
            let v = self.data.value(r, f);
            let b = cands.partition_point(|&c| c < v);
            let y = self.data.labels[r as usize] as usize;
            bw[b][y] += self.class_weight[y];
            bc[b] += 1;
        }
        let mut left = [0.0f64; 2];
        let mut n_left = 0usize;
        let mut best: Option<BestSplit> = None;
        for (b, &t) in cands.iter().enumerate() {
            left[0] += bw[b][0];
            left[1] += bw[b][1];
            n_left += bc[b];
            let n_right = rows.len() - n_left;
            if n_left < self.cfg.min_leaf.max(1) || n_right < self.cfg.min_leaf.max(1) {
                continue;
            }
            let d = gini_decrease(parent, left);
            if best.as_ref().is_none_or(|s| d > s.decrease) {
                best = Some(BestSplit {
                    feature: f,
                    threshold: t,
                    decrease: d,
                });
            }
        }
        best
    }

    fn grow(&mut self, mut rows: Vec<u32>) -> Tree {
        let mut nodes: Vec<Node> = Vec::new();
        // (node index, start, end, depth) over a shared row buffer
        let mut stack = vec![(0usize, 0usize, rows.len(), 0usize)];
        nodes.push(Node::Leaf {
            counts: [0, 0],
            weight: [0.0, 0.0],
        });
        let dim = self.data.dim;
        let mut order: Vec<usize> = (0..dim).collect();
        while let Some((k, start, end, depth)) = stack.pop() {
            let (counts, weight) = self.stats(&rows[start..end]);
            let pure = counts[0] == 0 || counts[1] == 0;
            let depth_capped = self.cfg.max_depth.is_some_and(|m| depth >= m);
            let n = end - start;
            let mut best: Option<BestSplit> = None;
            if !pure && !depth_capped && n >= 2 * self.cfg.min_leaf.max(1) {
                order.shuffle(&mut self.rng);
                for (tried, &f) in order.iter().enumerate() {
                    if tried >= self.mtry && best.is_some() {
                        break;
                    }
                    if let Some(s) = self.best_on_feature(&rows[start..end], f, weight) {
                        if best.as_ref().is_none_or(|b| s.decrease > b.decrease) {
                            best = Some(s);
                        }
                    }
                }
            }
            match best {
                None => nodes[k] = Node::Leaf { counts, weight },
                Some(s) => {
                    let slice = &mut rows[start..end];
                    let mut i = 0;
                    for j in 0..slice.len() {
                        if self.data.value(slice[j], s.feature) <= s.threshold {
                            slice.swap(i, j);
                            i += 1;
                        }
                    }
                    let mid = start + i;
                    debug_assert!(mid > start && mid < end, "split must partition");
                    self.importance[s.feature] += s.decrease;
                    let left = nodes.len();
                    nodes.push(Node::Leaf {
                        counts: [0, 0],
                        weight: [0.0, 0.0],
                    });
                    nodes.push(Node::Leaf {
                        counts: [0, 0],
                        weight: [0.0, 0.0],
                    });
                    nodes[k] = Node::Split {
                        feature: s.feature as u32,
                        threshold: s.threshold,
                        left: left as u32,
                        right: left as u32 + 1,
                        counts,
                        weight,
                        impurity_decrease: s.decrease,
                    };
                    stack.push((left + 1, mid, end, depth + 1));
                    stack.push((left, start, mid, depth + 1));
                }
            }
        }
        Tree { nodes }
    }
}

fn tree_seed(seed: u64, t: usize) -> u64 {
    seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

impl Forest {
    pub fn train(data: Samples<'_>, cfg: &ForestConfig, seed: u64) -> Result<Self> {
        if cfg.n_trees == 0 || cfg.min_leaf == 0 {
            return Err(Error::config("n_trees and min_leaf must be positive"));
        }
        let n = data.len();
        let pos = data.labels.iter().filter(|&&y| y == 1).count();
        if data.labels.iter().any(|&y| y > 1) {
            return Err(Error::contract("labels must be 0 or 1"));
        }
        if pos == 0 || pos == n {
            return Err(Error::Training {
                epoch: 0,
                message: "forest training needs both classes present".into(),
            });
        }
        let class_weight = if cfg.balanced {
            [n as f64 / (2.0 * (n - pos) as f64), n as f64 / (2.0 * pos as f64)]
        } else {
            [1.0, 1.0]
        };
        let mtry = cfg
            .features_per_split
            .unwrap_or_else(|| (data.dim as f64).sqrt().round() as usize)
            .clamp(1, data.dim);
        let mut trees = Vec::with_capacity(cfg.n_trees);
        let mut importance = vec![0.0; data.dim];
        for t in 0..cfg.n_trees {
            let mut g = Grower {
                data,
                class_weight,
                cfg,
                mtry,
                rng: ChaCha8Rng::seed_from_u64(tree_seed(seed, t)),
                importance: vec![0.0; data.dim],
            };
            let rows: Vec<u32> = if cfg.bootstrap {
                (0..n).map(|_| g.rng.random_range(0..n) as u32).collect()
            } else {
                (0..n as u32).collect()
            };
            trees.push(g.grow(rows));
            normalize(&mut g.importance);
            for (a, b) in importance.iter_mut().zip(&g.importance) {
                *a += b;
            }
        }
        normalize(&mut importance);
        Ok(Self {
            dim: data.dim,
            config: cfg.clone(),
            seed,
            trees,
            importance,
        })
    }

    /// Number of trees voting positive.
    pub fn votes(&self, x: &[f32]) -> Result<usize> {
        if x.len() != self.dim {
            return Err(Error::contract(format!(
                "feature vector has {} entries, forest expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(self.trees.iter().filter(|t| t.predict(x)).count())
    }

    /// Majority vote (ties positive) and the positive vote fraction.
    pub fn classify(&self, x: &[f32]) -> Result<(bool, f64)> {
        let v = self.votes(x)?;
        Ok((vote_verdict(v, self.trees.len()), v as f64 / self.trees.len() as f64))
    }
}

pub fn vote_verdict(positive: usize, total: usize) -> bool {
    2 * positive >= total
}
