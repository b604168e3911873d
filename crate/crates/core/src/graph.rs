//! Per-behavior bipartite user–item adjacency built from the train split.

use std::io::{BufRead, Write};

use crate::behavior::{Behavior, NUM_BEHAVIORS};
use crate::dataset::{Interaction, InteractionLog};
use crate::error::{Error, Result};

/// Compressed sparse rows: neighbors of node `i` are `indices[ptr[i]..ptr[i + 1]]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Csr {
    ptr: Vec<usize>,
    indices: Vec<usize>,
}

impl Csr {
    fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Self {
        let mut ptr = vec![0usize; n + 1];
        for &(a, _) in pairs {
            ptr[a + 1] += 1;
        }
        for i in 0..n {
            ptr[i + 1] += ptr[i];
        }
        let mut fill = ptr.clone();
        let mut indices = vec![0usize; pairs.len()];
        for &(a, b) in pairs {
            indices[fill[a]] = b;
            fill[a] += 1;
        }
        for i in 0..n {
            indices[ptr[i]..ptr[i + 1]].sort_unstable();
        }
        Self { ptr, indices }
    }

    #[inline]
    fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[self.ptr[i]..self.ptr[i + 1]]
    }

    #[inline]
    fn degree(&self, i: usize) -> usize {
        self.ptr[i + 1] - self.ptr[i]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Channel {
    /// `(user, item)` pairs, sorted.
    edges: Vec<(usize, usize)>,
    items_of_user: Csr,
    users_of_item: Csr,
}

/// Static heterogeneous graph: one bipartite channel per behavior plus
/// aggregate degrees over all behaviors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BehaviorGraph {
    num_users: usize,
    num_items: usize,
    channels: Vec<Channel>,
    user_degree: Vec<usize>,
    item_degree: Vec<usize>,
}

impl BehaviorGraph {
    /// Builds the graph from a (possibly non-deduplicated) train log; repeated
    /// `(user, item, behavior)` events become a single edge.
    pub fn build(train: &InteractionLog) -> Self {
        Self::from_edges(train.num_users, train.num_items, train.events.iter().map(|e| (e.behavior, e.user, e.item)))
    }

    pub fn from_edges(
        num_users: usize,
        num_items: usize,
        edges: impl IntoIterator<Item = (Behavior, usize, usize)>,
    ) -> Self {
        let mut per: Vec<Vec<(usize, usize)>> = vec![Vec::new(); NUM_BEHAVIORS];
        for (b, u, v) in edges {
            per[b.index()].push((u, v));
        }
        let mut user_degree = vec![0; num_users];
        let mut item_degree = vec![0; num_items];
        let channels = per
            .into_iter()
            .map(|mut edges| {
                edges.sort_unstable();
                edges.dedup();
                for &(u, v) in &edges {
                    user_degree[u] += 1;
                    item_degree[v] += 1;
                }
                let flipped: Vec<(usize, usize)> = edges.iter().map(|&(u, v)| (v, u)).collect();
                Channel {
                    items_of_user: Csr::from_pairs(num_users, &edges),
                    users_of_item: Csr::from_pairs(num_items, &flipped),
                    edges,
                }
            })
            .collect();
        Self { num_users, num_items, channels, user_degree, item_degree }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    #[inline]
    pub fn items_of_user(&self, k: Behavior, u: usize) -> &[usize] {
        self.channels[k.index()].items_of_user.neighbors(u)
    }

    #[inline]
    pub fn users_of_item(&self, k: Behavior, v: usize) -> &[usize] {
        self.channels[k.index()].users_of_item.neighbors(v)
    }

    /// `|N_u|` under behavior `k`.
    #[inline]
    pub fn user_degree_in(&self, k: Behavior, u: usize) -> usize {
        self.channels[k.index()].items_of_user.degree(u)
    }

    #[inline]
    pub fn item_degree_in(&self, k: Behavior, v: usize) -> usize {
        self.channels[k.index()].users_of_item.degree(v)
    }

    /// Number of behavioral edges of `u` across all behaviors.
    #[inline]
    pub fn user_degree(&self, u: usize) -> usize {
        self.user_degree[u]
    }

    #[inline]
    pub fn item_degree(&self, v: usize) -> usize {
        self.item_degree[v]
    }

    #[inline]
    pub fn edges(&self, k: Behavior) -> &[(usize, usize)] {
        &self.channels[k.index()].edges
    }

    pub fn num_edges(&self, k: Behavior) -> usize {
        self.channels[k.index()].edges.len()
    }

    pub fn total_edges(&self) -> usize {
        self.channels.iter().map(|c| c.edges.len()).sum()
    }

    pub fn has_edge(&self, k: Behavior, u: usize, v: usize) -> bool {
        u < self.num_users && self.items_of_user(k, u).binary_search(&v).is_ok()
    }

    /// Normalizer of the edge update: `|N_u| + |N_v|` for the endpoints of
    /// `(u, v)` under behavior `k`.
    pub fn edge_neighborhood_size(&self, u: usize, v: usize, k: Behavior) -> Result<usize> {
        if v >= self.num_items || !self.has_edge(k, u, v) {
            return Err(Error::Lookup(format!("no {k} edge between user {u} and item {v}")));
        }
        Ok(self.user_degree_in(k, u) + self.item_degree_in(k, v))
    }

    /// Number of same-behavior edges sharing an endpoint with `(u, v)`;
    /// the edge itself is counted only when `self_loop` is set.
    pub fn adjacent_edge_count(&self, u: usize, v: usize, k: Behavior, self_loop: bool) -> Result<usize> {
        let n = self.edge_neighborhood_size(u, v, k)?;
        Ok(if self_loop { n - 1 } else { n - 2 })
    }

    /// Writes `behavior \t user \t item` lines in lexicographic order.
    pub fn write_edge_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut lines: Vec<(String, usize, usize)> = Vec::with_capacity(self.total_edges());
        for k in Behavior::ALL {
            for &(u, v) in self.edges(k) {
                lines.push((k.as_str().to_string(), u, v));
            }
        }
        lines.sort();
        for (k, u, v) in lines {
            writeln!(w, "{k}\t{u}\t{v}")?;
        }
        Ok(())
    }

    pub fn read_edge_dump<R: BufRead>(num_users: usize, num_items: usize, r: R) -> Result<Self> {
        let mut edges = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line_no = i as u64 + 1;
            let line = line.map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Parse { line: line_no, message: "expected behavior, user, item".into() });
            }
            let k: Behavior = cols[0].parse().map_err(|_| Error::Schema { line: line_no, label: cols[0].into() })?;
            let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse { line: line_no, message: format!("bad id {s:?}") });
            let (u, v) = (parse(cols[1])?, parse(cols[2])?);
            if u >= num_users || v >= num_items {
                return Err(Error::Parse { line: line_no, message: "id out of range".into() });
            }
            edges.push((k, u, v));
        }
        Ok(Self::from_edges(num_users, num_items, edges))
    }

    /// Back to an interaction log with zero timestamps.
    pub fn to_log(&self) -> InteractionLog {
        let mut events = Vec::with_capacity(self.total_edges());
        for behavior in Behavior::ALL {
            for &(user, item) in self.edges(behavior) {
                events.push(Interaction { user, item, behavior, timestamp: 0 });
            }
        }
        InteractionLog::new(events, self.num_users, self.num_items)
    }
}
