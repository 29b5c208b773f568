use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::arch::{BlockGraph, BlockNode, LayerSpec, Level, Role};

/// Parameters and MACs attributed to one block, including the transitions
/// on its incoming edges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCost {
    pub block: String,
    pub kind: String,
    pub level: Level,
    pub column: u8,
    pub role: Role,
    pub channels: usize,
    pub stride: usize,
    pub params: u64,
    pub macs: u64,
    /// Parameters this block would add if its shared kernels were not shared.
    pub shared_params_saved: u64,
    pub layers: Vec<LayerCost>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub uses: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharing_group: Option<String>,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCost {
    pub params: u64,
    pub macs: u64,
}

/// Per-block and total cost of a graph. MACs are multiply-accumulates, not
/// 2x FLOPs; batch norm, activations, pooling and adds cost nothing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub graph_hash: String,
    /// `None` when only parameters were counted.
    pub input: Option<(usize, usize)>,
    pub unit: String,
    pub blocks: Vec<BlockCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub by_column: BTreeMap<u8, GroupCost>,
    pub by_level: BTreeMap<Level, GroupCost>,
}

fn node_layers(graph: &BlockGraph, node: &BlockNode) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    for e in graph.incoming(node.id) {
        if let Some(t) = &e.transition {
            let stride = |id| graph.node(id).map_or(1, |n: &BlockNode| n.stride);
            out.extend(crate::arch::transition_layers(&e.name(), t, stride(e.from), stride(e.to)));
        }
    }
    out.extend(node.layers());
    out
}

fn build(graph: &BlockGraph, input: Option<(usize, usize)>) -> CostReport {
    let (h, w) = input.unwrap_or((0, 0));
    let mut counted_groups = HashSet::new();
    let mut blocks = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let mut cost = BlockCost {
            block: node.id.key(),
            kind: node.kind.name().to_string(),
            level: node.id.level,
            column: node.id.column,
            role: node.id.role,
            channels: node.kind.out_channels(),
            stride: node.stride,
            params: 0,
            macs: 0,
            shared_params_saved: 0,
            layers: Vec::new(),
        };
        for layer in node_layers(graph, node) {
            let first = layer.sharing_group.as_ref().is_none_or(|g| counted_groups.insert(g.clone()));
            let params = if first { layer.params() } else { 0 };
            let macs = if input.is_some() { layer.macs(h, w) } else { 0 };
            if layer.sharing_group.is_some() {
                // Every use beyond the first would carry its own kernel unshared.
                cost.shared_params_saved += layer.params() * (layer.uses as u64).saturating_sub(1);
            }
            cost.params += params;
            cost.macs += macs;
            cost.layers.push(LayerCost {
                name: layer.name.clone(),
                params,
                macs,
                uses: layer.uses,
                sharing_group: layer.sharing_group.clone(),
            });
        }
        blocks.push(cost);
    }
    let mut by_column: BTreeMap<u8, GroupCost> = BTreeMap::new();
    let mut by_level: BTreeMap<Level, GroupCost> = BTreeMap::new();
    for b in &blocks {
        for g in [by_column.entry(b.column).or_default(), by_level.entry(b.level).or_default()] {
            g.params += b.params;
            g.macs += b.macs;
        }
    }
    CostReport {
        graph_hash: graph.hash(),
        input,
        unit: "MACs".into(),
        total_params: blocks.iter().map(|b| b.params).sum(),
        total_macs: blocks.iter().map(|b| b.macs).sum(),
        blocks,
        by_column,
        by_level,
    }
}

/// Closed-form parameter count. A shared kernel counts once.
pub fn count_params(graph: &BlockGraph) -> CostReport {
    build(graph, None)
}

/// Parameters plus `C1 * C2 * K1 * K2 * H * W` MACs of every layer at an
/// `h x w` input. Layers applied twice count twice.
pub fn count_flops(graph: &BlockGraph, h: usize, w: usize) -> Result<CostReport, AnalysisError> {
    let stride = graph.total_stride();
    if h == 0 || w == 0 || !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
        return Err(AnalysisError::Indivisible { h, w, stride });
    }
    Ok(build(graph, Some((h, w))))
}

/// `11.7M`, `9.5G` style rendering with one decimal.
pub fn format_count(n: u64) -> String {
    let x = n as f64;
    match n {
        0..=999 => n.to_string(),
        1_000..=999_999 => format!("{:.1}K", x / 1e3),
        1_000_000..=999_999_999 => format!("{:.1}M", x / 1e6),
        _ => format!("{:.1}G", x / 1e9),
    }
}

impl CostReport {
    pub fn block(&self, key: &str) -> Option<&BlockCost> {
        self.blocks.iter().find(|b| b.block == key)
    }

    /// Cost of the shelf proper: blocks and transitions of columns 2 and up.
    /// Column 1 is excluded because its input width is fixed by the backbone.
    pub fn shelf(&self) -> GroupCost {
        self.blocks
            .iter()
            .filter(|b| b.role == Role::Block && b.column >= 2)
            .fold(GroupCost::default(), |acc, b| GroupCost {
                params: acc.params + b.params,
                macs: acc.macs + b.macs,
            })
    }

    pub fn shared_params_saved(&self) -> u64 {
        self.blocks.iter().map(|b| b.shared_params_saved).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table, one row per block plus totals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let input = self.input.map_or("-".to_string(), |(h, w)| format!("{h}x{w}"));
        let _ = writeln!(s, "input {input}   unit {}   graph {}", self.unit, &self.graph_hash[..12]);
        let _ = writeln!(
            s,
            "{:<10} {:<15} {:>8} {:>7} {:>14} {:>16} {:>7}",
            "block", "kind", "channels", "stride", "params", "macs", "shared"
        );
        for b in &self.blocks {
            let label = match b.role {
                Role::Block => b.block.clone(),
                _ => b.block.split('@').next().unwrap_or_default().to_string(),
            };
            let _ = writeln!(
                s,
                "{:<10} {:<15} {:>8} {:>7} {:>14} {:>16} {:>7}",
                label,
                b.kind,
                b.channels,
                format!("1/{}", b.stride),
                b.params,
                b.macs,
                if b.shared_params_saved > 0 { "yes" } else { "" }
            );
        }
        let _ = writeln!(
            s,
            "{:<10} {:<15} {:>8} {:>7} {:>14} {:>16}",
            "total",
            "",
            "",
            "",
            format!("{} ({})", self.total_params, format_count(self.total_params)),
            format!("{} ({})", self.total_macs, format_count(self.total_macs)),
        );
        s
    }
}
