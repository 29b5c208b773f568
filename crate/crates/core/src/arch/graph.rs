use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{Extent, LayerSpec};
use super::spec::{BackboneFamily, BackboneSpec, BlockId, Level, Role, Variant};
use super::ArchError;

/// One backbone stage (column 0). Stage 0 carries the stem.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageSpec {
    pub index: usize,
    pub family: BackboneFamily,
    pub blocks: usize,
    pub in_channels: usize,
    /// Bottleneck width; equals `out_channels` for basic blocks.
    pub mid_channels: usize,
    pub out_channels: usize,
    /// Stride of the first block.
    pub first_stride: usize,
    /// Dilation of the first block and of the remaining blocks.
    pub first_dilation: usize,
    pub dilation: usize,
    /// Output stride of the stage's input relative to the image.
    pub in_stride: usize,
    pub out_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockKind {
    BackboneStage(StageSpec),
    /// 1x1 conv + BN + ReLU shrinking backbone channels (column 1).
    ChannelReduce { in_channels: usize, channels: usize },
    /// Residual block whose two 3x3 convolutions share one kernel.
    SBlock { channels: usize, shared: bool, dropout: f64 },
    /// conv-bn-relu followed by a channel-attention gate.
    LwUpBlock { channels: usize },
    /// 1x1 conv to class logits, then bilinear upsampling to full size.
    Head { in_channels: usize, num_classes: usize, upsample: usize },
    /// Global pool + fully connected layer of an image classifier.
    Classifier { in_channels: usize, classes: usize },
    /// Weightless placeholder in the comparison graphs.
    Plain { channels: usize },
}

impl BlockKind {
    pub fn name(&self) -> &'static str {
        match self {
            BlockKind::BackboneStage(_) => "backbone_stage",
            BlockKind::ChannelReduce { .. } => "channel_reduce",
            BlockKind::SBlock { .. } => "s_block",
            BlockKind::LwUpBlock { .. } => "lw_up_block",
            BlockKind::Head { .. } => "head",
            BlockKind::Classifier { .. } => "classifier",
            BlockKind::Plain { .. } => "plain",
        }
    }

    /// Channels the block expects on its (summed) input.
    pub fn in_channels(&self) -> usize {
        match self {
            BlockKind::BackboneStage(s) => s.in_channels,
            BlockKind::ChannelReduce { in_channels, .. } => *in_channels,
            BlockKind::SBlock { channels, .. } | BlockKind::LwUpBlock { channels } | BlockKind::Plain { channels } => *channels,
            BlockKind::Head { in_channels, .. } | BlockKind::Classifier { in_channels, .. } => *in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            BlockKind::BackboneStage(s) => s.out_channels,
            BlockKind::ChannelReduce { channels, .. } => *channels,
            BlockKind::SBlock { channels, .. } | BlockKind::LwUpBlock { channels } | BlockKind::Plain { channels } => *channels,
            BlockKind::Head { num_classes, .. } => *num_classes,
            BlockKind::Classifier { classes, .. } => *classes,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Lateral,
    Down,
    Up,
}

/// Resampling layer carried by an edge between two shelf blocks.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    /// 3x3 stride-2 conv + BN + ReLU: halves resolution, doubles channels.
    Down { in_channels: usize, out_channels: usize },
    /// 3x3 stride-2 transposed conv + BN + ReLU: doubles resolution, halves channels.
    Up { in_channels: usize, out_channels: usize },
    /// Bilinear x2 then 1x1 conv + BN + ReLU.
    LwUp { in_channels: usize, out_channels: usize },
}

impl Transition {
    pub fn in_channels(&self) -> usize {
        match *self {
            Transition::Down { in_channels, .. } | Transition::Up { in_channels, .. } | Transition::LwUp { in_channels, .. } => in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            Transition::Down { out_channels, .. } | Transition::Up { out_channels, .. } | Transition::LwUp { out_channels, .. } => out_channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockNode {
    pub id: BlockId,
    #[serde(flatten)]
    pub kind: BlockKind,
    /// Output stride of the block relative to the network input.
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: BlockId,
    pub to: BlockId,
    pub kind: EdgeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Transition>,
}

/// The block DAG of one network: nodes on a (level, column) grid joined by
/// lateral, down and up edges. Blocks with several inputs sum them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockGraph {
    /// `None` for a bare backbone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneSpec>,
    /// Shelf channel width per level.
    pub widths: BTreeMap<Level, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub nodes: Vec<BlockNode>,
    pub edges: Vec<Edge>,
    pub source: BlockId,
    pub sink: BlockId,
}

pub fn transition_layers(name: &str, t: &Transition, from_stride: usize, to_stride: usize) -> Vec<LayerSpec> {
    match *t {
        Transition::Down { in_channels, out_channels } => vec![
            LayerSpec::conv(format!("{name}/conv"), in_channels, out_channels, 3, 2, Extent::Stride(to_stride)),
            LayerSpec::batch_norm(format!("{name}/bn"), out_channels, Extent::Stride(to_stride)),
        ],
        Transition::Up { in_channels, out_channels } => vec![
            LayerSpec::conv_transpose(format!("{name}/conv"), in_channels, out_channels, 3, 2, Extent::Stride(from_stride)),
            LayerSpec::batch_norm(format!("{name}/bn"), out_channels, Extent::Stride(to_stride)),
        ],
        Transition::LwUp { in_channels, out_channels } => vec![
            LayerSpec::conv(format!("{name}/conv"), in_channels, out_channels, 1, 1, Extent::Stride(to_stride)),
            LayerSpec::batch_norm(format!("{name}/bn"), out_channels, Extent::Stride(to_stride)),
        ],
    }
}

fn stage_layers(prefix: &str, s: &StageSpec) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    let mut in_c = s.in_channels;
    if s.index == 0 {
        out.push(LayerSpec::conv(format!("{prefix}/stem/conv"), 3, s.in_channels, 7, 2, Extent::Stride(2)));
        out.push(LayerSpec::batch_norm(format!("{prefix}/stem/bn"), s.in_channels, Extent::Stride(2)));
    }
    let at = Extent::Stride(s.out_stride);
    for j in 0..s.blocks {
        let p = format!("{prefix}/b{j}");
        let (stride, dil) = if j == 0 { (s.first_stride, s.first_dilation) } else { (1, s.dilation) };
        match s.family {
            BackboneFamily::ResnetBasic | BackboneFamily::Mini => {
                out.push(LayerSpec::conv(format!("{p}/conv1"), in_c, s.out_channels, 3, stride, at).with_dilation(dil));
                out.push(LayerSpec::batch_norm(format!("{p}/bn1"), s.out_channels, at));
                out.push(LayerSpec::conv(format!("{p}/conv2"), s.out_channels, s.out_channels, 3, 1, at).with_dilation(s.dilation));
                out.push(LayerSpec::batch_norm(format!("{p}/bn2"), s.out_channels, at));
            }
            BackboneFamily::ResnetBottleneck => {
                let input_extent = Extent::Stride(if j == 0 { s.in_stride } else { s.out_stride });
                out.push(LayerSpec::conv(format!("{p}/conv1"), in_c, s.mid_channels, 1, 1, input_extent));
                out.push(LayerSpec::batch_norm(format!("{p}/bn1"), s.mid_channels, input_extent));
                out.push(LayerSpec::conv(format!("{p}/conv2"), s.mid_channels, s.mid_channels, 3, stride, at).with_dilation(dil));
                out.push(LayerSpec::batch_norm(format!("{p}/bn2"), s.mid_channels, at));
                out.push(LayerSpec::conv(format!("{p}/conv3"), s.mid_channels, s.out_channels, 1, 1, at));
                out.push(LayerSpec::batch_norm(format!("{p}/bn3"), s.out_channels, at));
            }
        }
        if j == 0 && (stride != 1 || in_c != s.out_channels) {
            out.push(LayerSpec::conv(format!("{p}/down"), in_c, s.out_channels, 1, stride, at));
            out.push(LayerSpec::batch_norm(format!("{p}/down_bn"), s.out_channels, at));
        }
        in_c = s.out_channels;
    }
    out
}

impl BlockNode {
    /// Parameterized layers of the block, named `"<id>/<layer>"`.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let id = self.id.to_string();
        let at = Extent::Stride(self.stride);
        match &self.kind {
            BlockKind::BackboneStage(s) => stage_layers(&id, s),
            BlockKind::ChannelReduce { in_channels, channels } => vec![
                LayerSpec::conv(format!("{id}/conv"), *in_channels, *channels, 1, 1, at),
                LayerSpec::batch_norm(format!("{id}/bn"), *channels, at),
            ],
            BlockKind::SBlock { channels, shared, .. } => {
                let c = *channels;
                let mut v = if *shared {
                    vec![LayerSpec::conv(format!("{id}/conv"), c, c, 3, 1, at).shared(format!("{id}/conv"), 2)]
                } else {
                    vec![
                        LayerSpec::conv(format!("{id}/conv1"), c, c, 3, 1, at),
                        LayerSpec::conv(format!("{id}/conv2"), c, c, 3, 1, at),
                    ]
                };
                v.push(LayerSpec::batch_norm(format!("{id}/bn1"), c, at));
                v.push(LayerSpec::batch_norm(format!("{id}/bn2"), c, at));
                v
            }
            BlockKind::LwUpBlock { channels } => vec![
                LayerSpec::conv(format!("{id}/conv"), *channels, *channels, 3, 1, at),
                LayerSpec::batch_norm(format!("{id}/bn"), *channels, at),
                LayerSpec::conv(format!("{id}/attention"), *channels, *channels, 1, 1, Extent::Global),
            ],
            // The head's stride is that of its upsampled output.
            BlockKind::Head { in_channels, num_classes, upsample } => vec![LayerSpec::conv(
                format!("{id}/conv"),
                *in_channels,
                *num_classes,
                1,
                1,
                Extent::Stride(self.stride * upsample),
            )],
            BlockKind::Classifier { in_channels, classes } => {
                vec![LayerSpec::linear(format!("{id}/fc"), *in_channels, *classes)]
            }
            BlockKind::Plain { .. } => Vec::new(),
        }
    }
}

impl Edge {
    pub fn name(&self) -> String {
        format!("{}->{}", self.from, self.to)
    }
}

impl BlockGraph {
    pub fn node(&self, id: BlockId) -> Option<&BlockNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn index_of(&self, id: BlockId) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn contains(&self, id: BlockId) -> bool {
        self.index_of(id).is_some()
    }

    /// Looks up a block by display name (`A2`, `head`, `fc`) or key.
    pub fn resolve(&self, name: &str) -> Result<BlockId, ArchError> {
        let role = match name {
            "head" => Some(Role::Head),
            "fc" => Some(Role::Classifier),
            _ => None,
        };
        let id = match role {
            Some(r) => self
                .nodes
                .iter()
                .find(|n| n.id.role == r)
                .map(|n| n.id)
                .ok_or_else(|| ArchError::UnknownBlock(name.to_string()))?,
            None => name.parse()?,
        };
        if !self.contains(id) {
            return Err(ArchError::UnknownBlock(name.to_string()));
        }
        Ok(id)
    }

    pub fn has_edge(&self, from: BlockId, to: BlockId) -> bool {
        self.edges.iter().any(|e| e.from == from && e.to == to)
    }

    /// Edges entering `id`, in insertion order.
    pub fn incoming(&self, id: BlockId) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.to == id)
    }

    /// Successor lists indexed like `nodes`.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let idx: HashMap<BlockId, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            if let (Some(&a), Some(&b)) = (idx.get(&e.from), idx.get(&e.to)) {
                adj[a].push(b);
            }
        }
        adj
    }

    /// Node indices in a topological order (Kahn, stable in node order).
    pub fn topo_order(&self) -> Result<Vec<usize>, ArchError> {
        let adj = self.adjacency();
        let mut indeg = vec![0usize; self.nodes.len()];
        for succ in &adj {
            for &b in succ {
                indeg[b] += 1;
            }
        }
        let mut queue: VecDeque<usize> = (0..self.nodes.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for &b in &adj[i] {
                indeg[b] -= 1;
                if indeg[b] == 0 {
                    queue.push_back(b);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(ArchError::Graph("block graph contains a cycle".into()));
        }
        Ok(order)
    }

    /// Checks the structural invariants: unique ids, edges between known
    /// blocks, acyclicity, reachability from the source, and edge kinds
    /// consistent with level geometry.
    pub fn validate(&self) -> Result<(), ArchError> {
        let mut seen = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if seen.insert(n.id, i).is_some() {
                return Err(ArchError::Graph(format!("duplicate block {}", n.id.key())));
            }
        }
        for e in &self.edges {
            for end in [e.from, e.to] {
                if !seen.contains_key(&end) {
                    return Err(ArchError::Graph(format!("edge {} references unknown block {}", e.name(), end.key())));
                }
            }
            let (a, b) = (e.from.level.index() as isize, e.to.level.index() as isize);
            let ok = match e.kind {
                EdgeKind::Lateral => a == b && e.to.column > e.from.column,
                EdgeKind::Down => b == a + 1 && e.to.column == e.from.column,
                EdgeKind::Up => b == a - 1 && e.to.column == e.from.column,
            };
            if !ok {
                return Err(ArchError::Graph(format!("{:?} edge {} breaks level geometry", e.kind, e.name())));
            }
        }
        if !seen.contains_key(&self.source) || !seen.contains_key(&self.sink) {
            return Err(ArchError::Graph("source or sink is not a block of the graph".into()));
        }
        self.topo_order()?;
        let adj = self.adjacency();
        let mut reached = vec![false; self.nodes.len()];
        let mut stack = vec![seen[&self.source]];
        reached[seen[&self.source]] = true;
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !reached[j] {
                    reached[j] = true;
                    stack.push(j);
                }
            }
        }
        if let Some(i) = reached.iter().position(|r| !r) {
            return Err(ArchError::Graph(format!(
                "block {} is unreachable from {}",
                self.nodes[i].id, self.source
            )));
        }
        Ok(())
    }

    /// Blocks in columns 1 and up that are not heads.
    pub fn shelf_blocks(&self) -> impl Iterator<Item = &BlockNode> {
        self.nodes.iter().filter(|n| n.id.role == Role::Block && n.id.column >= 1)
    }

    /// Largest output stride any block produces; inputs must be divisible by it.
    pub fn total_stride(&self) -> usize {
        self.nodes.iter().map(|n| n.stride).max().unwrap_or(1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ArchError> {
        let g: BlockGraph = serde_json::from_str(text).map_err(|e| ArchError::Json(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    /// SHA-256 of the compact canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("graph serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }
}
