use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::arch::{BlockGraph, BlockId};

pub const DEFAULT_PATH_CAP: usize = 1_000_000;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PathMode {
    Count,
    /// Also list every path, failing when there are more than `cap`.
    List { cap: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathReport {
    pub source: BlockId,
    pub sink: BlockId,
    pub path_count: u128,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<Vec<Vec<BlockId>>>,
    /// Blocks on the longest path, both ends included; 0 when unreachable.
    pub longest_path_length: usize,
    pub longest_path: Vec<BlockId>,
}

impl PathReport {
    pub fn contains(&self, path: &[BlockId]) -> bool {
        self.paths.as_ref().is_some_and(|ps| ps.iter().any(|p| p == path))
    }
}

fn endpoints(graph: &BlockGraph, source: BlockId, sink: BlockId) -> Result<(usize, usize), AnalysisError> {
    let idx = |id: BlockId| graph.index_of(id).ok_or_else(|| AnalysisError::UnknownBlock(id.key()));
    Ok((idx(source)?, idx(sink)?))
}

/// Number of source-to-sink paths by DP over a topological order, plus the
/// longest one. In a DAG every directed path is simple.
fn dp(graph: &BlockGraph, s: usize, t: usize) -> Result<(u128, Vec<usize>), AnalysisError> {
    let order = graph.topo_order()?;
    let adj = graph.adjacency();
    let n = graph.nodes.len();
    let mut count = vec![0u128; n];
    // Longest path ending at each node, with its predecessor.
    let mut depth = vec![0usize; n];
    let mut pred = vec![usize::MAX; n];
    count[s] = 1;
    depth[s] = 1;
    for &u in &order {
        if count[u] == 0 {
            continue;
        }
        for &v in &adj[u] {
            count[v] = count[v].saturating_add(count[u]);
            if depth[u] + 1 > depth[v] {
                depth[v] = depth[u] + 1;
                pred[v] = u;
            }
        }
    }
    if count[t] == 0 {
        return Ok((0, Vec::new()));
    }
    let mut path = vec![t];
    while *path.last().expect("non-empty") != s {
        path.push(pred[*path.last().expect("non-empty")]);
    }
    path.reverse();
    Ok((count[t], path))
}

fn list(graph: &BlockGraph, s: usize, t: usize) -> Vec<Vec<BlockId>> {
    let adj = graph.adjacency();
    let mut out = Vec::new();
    let mut stack = vec![s];
    fn walk(adj: &[Vec<usize>], t: usize, stack: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let u = *stack.last().expect("non-empty");
        if u == t {
            out.push(stack.clone());
            return;
        }
        for &v in &adj[u] {
            stack.push(v);
            walk(adj, t, stack, out);
            stack.pop();
        }
    }
    let mut raw = Vec::new();
    walk(&adj, t, &mut stack, &mut raw);
    for p in raw {
        out.push(p.into_iter().map(|i| graph.nodes[i].id).collect());
    }
    out
}

pub fn enumerate_paths(graph: &BlockGraph, source: BlockId, sink: BlockId, mode: PathMode) -> Result<PathReport, AnalysisError> {
    let (s, t) = endpoints(graph, source, sink)?;
    let (path_count, longest) = dp(graph, s, t)?;
    let paths = match mode {
        PathMode::Count => None,
        PathMode::List { cap } => {
            if path_count > cap as u128 {
                return Err(AnalysisError::CapExceeded { count: path_count, cap });
            }
            Some(list(graph, s, t))
        }
    };
    Ok(PathReport {
        source,
        sink,
        path_count,
        paths,
        longest_path_length: longest.len(),
        longest_path: longest.into_iter().map(|i| graph.nodes[i].id).collect(),
    })
}

/// Deepest source-to-sink path, counted in blocks.
pub fn longest_path(graph: &BlockGraph, source: BlockId, sink: BlockId) -> Result<PathReport, AnalysisError> {
    enumerate_paths(graph, source, sink, PathMode::Count)
}
