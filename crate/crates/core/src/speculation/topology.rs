use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Static shape of a draft tree.
///
/// Each non-root node is named by its path of choice indices: entry `k` is the
/// rank of the token taken from head `k`. Node 0 is the root; the remaining
/// nodes are ordered by depth, then lexicographically, so every parent precedes
/// its children and siblings appear in rank order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeTopology {
    paths: Vec<Vec<usize>>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
    children: Vec<Vec<usize>>,
}

/// Assumed top-1 acceptance probability per head, used to grow sparse presets.
const PRESET_HEAD_ACCEPT: [f64; 4] = [0.60, 0.45, 0.35, 0.30];
/// Each lower rank is assumed this much less likely than the one above it.
const PRESET_RANK_DECAY: f64 = 0.5;
const PRESET_MAX_RANK: usize = 10;

impl TreeTopology {
    pub fn from_paths(paths: impl IntoIterator<Item = Vec<usize>>) -> Result<Self> {
        let set: BTreeSet<Vec<usize>> = paths.into_iter().collect();
        if set.contains(&Vec::new()) {
            return Err(Error::Topology("the root is implicit; empty path not allowed".into()));
        }
        for p in &set {
            if p.len() > 1 && !set.contains(&p[..p.len() - 1]) {
                return Err(Error::Topology(format!("path {p:?} has no parent path {:?}", &p[..p.len() - 1])));
            }
        }
        let mut paths: Vec<Vec<usize>> = set.into_iter().collect();
        paths.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));

        let n = paths.len() + 1;
        let mut parent = vec![None; n];
        let mut depth = vec![0; n];
        let mut children = vec![Vec::new(); n];
        for (i, p) in paths.iter().enumerate() {
            let node = i + 1;
            let par = if p.len() == 1 {
                0
            } else {
                1 + paths[..i]
                    .binary_search_by(|q| q.len().cmp(&(p.len() - 1)).then_with(|| q[..].cmp(&p[..p.len() - 1])))
                    .expect("prefix closure checked")
            };
            parent[node] = Some(par);
            depth[node] = p.len();
            children[par].push(node);
        }
        Ok(Self {
            paths,
            parent,
            depth,
            children,
        })
    }

    /// The root alone; verifying it is a plain decoding step.
    pub fn root_only() -> Self {
        Self::from_paths(Vec::new()).expect("empty topology is valid")
    }

    /// A single path of top-1 choices.
    pub fn chain(depth: usize) -> Self {
        Self::from_paths((1..=depth).map(|d| vec![0; d])).expect("chain is prefix-closed")
    }

    /// Every combination of the first `k[d]` choices at each depth `d`.
    pub fn cartesian(per_level: &[usize]) -> Result<Self> {
        if per_level.contains(&0) {
            return Err(Error::Topology(format!("zero width in {per_level:?}")));
        }
        let mut paths = Vec::new();
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        for &k in per_level {
            let mut next = Vec::new();
            for p in &frontier {
                for c in 0..k {
                    let mut q = p.clone();
                    q.push(c);
                    next.push(q);
                }
            }
            paths.extend(next.iter().cloned());
            frontier = next;
        }
        Self::from_paths(paths)
    }

    /// Grows a `budget`-node tree of depth `depth` by repeatedly adding the
    /// candidate path with the highest assumed acceptance probability. The
    /// all-top-1 chain is always included.
    pub fn sparse(budget: usize, depth: usize) -> Result<Self> {
        if depth == 0 || depth > PRESET_HEAD_ACCEPT.len() || budget < depth + 1 {
            return Err(Error::NoPreset(budget));
        }
        let prob = |p: &[usize]| -> f64 {
            p.iter()
                .enumerate()
                .map(|(d, &c)| PRESET_HEAD_ACCEPT[d] * PRESET_RANK_DECAY.powi(c as i32))
                .product()
        };
        let mut chosen: BTreeSet<Vec<usize>> = (1..=depth).map(|d| vec![0; d]).collect();
        while chosen.len() + 1 < budget {
            let mut best: Option<(f64, Vec<usize>)> = None;
            let parents = std::iter::once(Vec::new()).chain(chosen.iter().cloned());
            for p in parents.filter(|p| p.len() < depth) {
                for c in 0..PRESET_MAX_RANK {
                    let mut q = p.clone();
                    q.push(c);
                    if chosen.contains(&q) {
                        continue;
                    }
                    let s = prob(&q);
                    let better = match &best {
                        None => true,
                        Some((bs, bq)) => s > *bs || (s == *bs && (q.len(), &q) < (bq.len(), bq)),
                    };
                    if better {
                        best = Some((s, q));
                    }
                    break;
                }
            }
            let (_, q) = best.ok_or(Error::NoPreset(budget))?;
            chosen.insert(q);
        }
        Self::from_paths(chosen)
    }

    /// Preset for a node budget (root included) at depth 4: 5 is the chain,
    /// 45 the `[4, 2, 2, 1]` cartesian tree, 22/35/64 greedy sparse trees.
    pub fn for_budget(nodes: usize) -> Result<Self> {
        match nodes {
            5 => Ok(Self::chain(4)),
            45 => Self::cartesian(&[4, 2, 2, 1]),
            22 | 35 | 64 => Self::sparse(nodes, 4),
            n => Err(Error::NoPreset(n)),
        }
    }

    /// Named presets: `chain`, `cartesian` (the default), `sparse-22`, `sparse-35`,
    /// `sparse-64`, or `nodes-N` for any budget accepted by [`TreeTopology::for_budget`].
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "chain" => Ok(Self::chain(4)),
            "cartesian" | "default" => Self::cartesian(&[4, 2, 2, 1]),
            _ => {
                let n = name
                    .strip_prefix("sparse-")
                    .or_else(|| name.strip_prefix("nodes-"))
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::Topology(format!("unknown preset `{name}`")))?;
                Self::for_budget(n)
            }
        }
    }

    /// The topology file at `spec` if one exists, else the preset of that name.
    pub fn resolve(spec: &str) -> Result<Self> {
        if Path::new(spec).is_file() {
            return Self::load(spec);
        }
        Self::preset(spec)
    }

    /// One path per line, comma-separated choice indices. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut paths = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let path = line
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Topology(format!("line {}: {e}", lineno + 1)))?;
            paths.push(path);
        }
        Self::from_paths(paths)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.paths {
            let parts: Vec<String> = p.iter().map(usize::to_string).collect();
            writeln!(s, "{}", parts.join(",")).expect("string write");
        }
        s
    }

    /// Paths of the non-root nodes, in node order.
    pub fn paths(&self) -> &[Vec<usize>] {
        &self.paths
    }

    /// Nodes including the root.
    pub fn node_count(&self) -> usize {
        self.parent.len()
    }

    pub fn depth_max(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn depth(&self, node: usize) -> usize {
        self.depth[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    /// Choice index of `node` at its own depth; `None` for the root.
    pub fn choice(&self, node: usize) -> Option<usize> {
        (node > 0).then(|| *self.paths[node - 1].last().expect("non-root path"))
    }

    /// Node indices from the root to `node`, inclusive.
    pub fn path_to(&self, node: usize) -> Vec<usize> {
        let mut out = vec![node];
        let mut n = node;
        while let Some(p) = self.parent[n] {
            out.push(p);
            n = p;
        }
        out.reverse();
        out
    }

    /// Top-k size each head must supply: one more than the largest choice at each depth.
    pub fn required_top_k(&self) -> Vec<usize> {
        let mut k = vec![0; self.depth_max()];
        for p in &self.paths {
            let d = p.len() - 1;
            k[d] = k[d].max(p[d] + 1);
        }
        k
    }

    /// Number of leaves, i.e. candidate continuations.
    pub fn leaf_count(&self) -> usize {
        self.children.iter().filter(|c| c.is_empty()).count()
    }

    /// Errors unless the tree spans exactly `heads` levels within the given top-k sizes.
    pub fn check_compatible(&self, heads: usize, top_k: &[usize]) -> Result<()> {
        if self.depth_max() != heads {
            return Err(Error::Topology(format!(
                "depth {} does not match {heads} heads",
                self.depth_max()
            )));
        }
        for (d, (&need, &have)) in self.required_top_k().iter().zip(top_k).enumerate() {
            if need > have {
                return Err(Error::Topology(format!(
                    "depth {} uses choice {} but head supplies top-{have}",
                    d + 1,
                    need - 1
                )));
            }
        }
        Ok(())
    }
}
