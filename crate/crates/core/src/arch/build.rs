use std::collections::BTreeMap;

use super::graph::{BlockGraph, BlockKind, BlockNode, Edge, EdgeKind, StageSpec, Transition};
use super::spec::{BackboneSpec, BlockId, Level, ShelfSpec, Variant};
use super::ArchError;

fn stage_specs(spec: &BackboneSpec) -> Vec<StageSpec> {
    let exp = spec.expansion();
    let mut in_channels = spec.base_width;
    let mut in_stride = 4;
    let mut prev_dilation = 1;
    (0..4)
        .map(|i| {
            let out_stride = spec.stage_stride(i);
            let dilation = if spec.dilated && i >= 2 { 1 << (i - 1) } else { 1 };
            let stride = if i == 0 || (spec.dilated && i >= 2) { 1 } else { 2 };
            let mid = spec.base_width << i;
            let s = StageSpec {
                index: i,
                family: spec.family,
                blocks: spec.blocks[i],
                in_channels,
                mid_channels: mid,
                out_channels: mid * exp,
                first_stride: stride,
                first_dilation: prev_dilation,
                dilation,
                in_stride,
                out_stride,
            };
            in_channels = s.out_channels;
            in_stride = out_stride;
            prev_dilation = dilation;
            s
        })
        .collect()
}

fn backbone_nodes(spec: &BackboneSpec) -> (Vec<BlockNode>, Vec<Edge>) {
    let nodes: Vec<BlockNode> = stage_specs(spec)
        .into_iter()
        .map(|s| BlockNode {
            id: BlockId::new(Level::from_index(s.index).expect("four stages"), 0),
            stride: s.out_stride,
            kind: BlockKind::BackboneStage(s),
        })
        .collect();
    let edges = nodes
        .windows(2)
        .map(|p| Edge {
            from: p[0].id,
            to: p[1].id,
            kind: EdgeKind::Down,
            transition: None,
        })
        .collect();
    (nodes, edges)
}

/// Column 0 alone: the chain A0 -> B0 -> C0 -> D0 of backbone stages.
pub fn build_backbone(spec: &BackboneSpec) -> Result<BlockGraph, ArchError> {
    spec.validate()?;
    let (nodes, edges) = backbone_nodes(spec);
    let widths = Level::ALL.iter().map(|&l| (l, spec.stage_channels(l.index()))).collect();
    let g = BlockGraph {
        variant: None,
        backbone: Some(spec.clone()),
        widths,
        num_classes: None,
        nodes,
        edges,
        source: BlockId::new(Level::A, 0),
        sink: BlockId::new(Level::D, 0),
    };
    g.validate()?;
    Ok(g)
}

/// The backbone as an image classifier: stages plus global pool and a
/// fully connected layer after D0. Only the cost model accepts it.
pub fn build_backbone_classifier(spec: &BackboneSpec, classes: usize) -> Result<BlockGraph, ArchError> {
    let mut g = build_backbone(spec)?;
    let fc = BlockId::classifier(Level::D, 1);
    g.nodes.push(BlockNode {
        id: fc,
        kind: BlockKind::Classifier {
            in_channels: spec.stage_channels(3),
            classes,
        },
        stride: spec.stage_stride(3),
    });
    g.edges.push(Edge {
        from: BlockId::new(Level::D, 0),
        to: fc,
        kind: EdgeKind::Lateral,
        transition: None,
    });
    g.sink = fc;
    g.validate()?;
    Ok(g)
}

/// Residual block whose two 3x3 convolutions use one kernel (or two
/// independent ones when `shared` is false).
pub fn make_s_block(id: BlockId, channels: usize, dropout: f64, shared: bool) -> BlockNode {
    BlockNode {
        id,
        kind: BlockKind::SBlock {
            channels,
            shared,
            dropout,
        },
        stride: id.level.stride(),
    }
}

/// Resampling between adjacent levels for an input of `in_channels`.
pub fn make_transition(from: Level, to: Level, in_channels: usize, light: bool) -> Result<Transition, ArchError> {
    if from.below() == Some(to) {
        return Ok(Transition::Down {
            in_channels,
            out_channels: 2 * in_channels,
        });
    }
    if from.above() != Some(to) {
        return Err(ArchError::Config(format!("levels {from} and {to} are not adjacent")));
    }
    if !in_channels.is_multiple_of(2) {
        return Err(ArchError::Config(format!(
            "up transition needs an even channel count, got {in_channels}"
        )));
    }
    let out_channels = in_channels / 2;
    Ok(if light {
        Transition::LwUp { in_channels, out_channels }
    } else {
        Transition::Up { in_channels, out_channels }
    })
}

struct Builder {
    nodes: Vec<BlockNode>,
    edges: Vec<Edge>,
}

impl Builder {
    fn node(&mut self, id: BlockId, kind: BlockKind, stride: usize) {
        self.nodes.push(BlockNode { id, kind, stride });
    }

    fn lateral(&mut self, from: BlockId, to: BlockId) {
        self.edges.push(Edge {
            from,
            to,
            kind: EdgeKind::Lateral,
            transition: None,
        });
    }

    fn vertical(&mut self, from: BlockId, to: BlockId, transition: Option<Transition>) {
        let kind = if to.level > from.level { EdgeKind::Down } else { EdgeKind::Up };
        self.edges.push(Edge {
            from,
            to,
            kind,
            transition,
        });
    }
}

/// Builds the block graph of any variant.
///
/// Shelf columns: 1 reduces backbone channels, 2 and 4 run upward, 3 runs
/// downward. Laterals join neighbouring columns on each level except
/// D2 -> D3, so the bottom of column 3 has a single input.
pub fn build_shelf(spec: &ShelfSpec) -> Result<BlockGraph, ArchError> {
    spec.validate()?;
    if spec.variant.is_simplified() {
        let g = build_simplified(spec);
        g.validate()?;
        return Ok(g);
    }
    let variant = spec.variant;
    let bb = &spec.backbone;
    let (nodes, edges) = backbone_nodes(bb);
    let mut b = Builder { nodes, edges };
    let levels = spec.levels();
    let width = |l: Level| spec.width(l).expect("level on shelf");
    let light = variant == Variant::ShelfnetLw;

    let head = |b: &mut Builder, feeder: BlockId, in_channels: usize| {
        let id = BlockId::head(feeder.level, feeder.column + 1);
        let stride = b.nodes.iter().find(|n| n.id == feeder).expect("feeder exists").stride;
        b.node(
            id,
            BlockKind::Head {
                in_channels,
                num_classes: spec.num_classes,
                upsample: stride,
            },
            1,
        );
        b.lateral(feeder, id);
        id
    };

    let sink = if variant == Variant::Fcn {
        head(&mut b, BlockId::new(Level::D, 0), bb.stage_channels(3))
    } else {
        let columns: u8 = if variant == Variant::Segnet { 2 } else { 4 };
        for &l in levels {
            let id = BlockId::new(l, 1);
            b.node(
                id,
                BlockKind::ChannelReduce {
                    in_channels: bb.stage_channels(l.index()),
                    channels: width(l),
                },
                l.stride(),
            );
            b.lateral(BlockId::new(l, 0), id);
        }
        for col in 2..=columns {
            let upward = col % 2 == 0;
            let order: Vec<Level> = if upward {
                levels.iter().rev().copied().collect()
            } else {
                levels.to_vec()
            };
            for (k, &l) in order.iter().enumerate() {
                let id = BlockId::new(l, col);
                let kind = if light && upward {
                    BlockKind::LwUpBlock { channels: width(l) }
                } else {
                    make_s_block(id, width(l), spec.dropout, spec.shared_weights).kind
                };
                b.node(id, kind, l.stride());
                if k > 0 {
                    let prev = order[k - 1];
                    let t = make_transition(prev, l, width(prev), light)?;
                    b.vertical(BlockId::new(prev, col), id, Some(t));
                }
                let skip = match col {
                    3 => l == Level::D || (variant == Variant::Wnet && matches!(l, Level::B | Level::C)),
                    _ => false,
                };
                if !skip {
                    b.lateral(BlockId::new(l, col - 1), id);
                }
            }
        }
        let top = levels[0];
        head(&mut b, BlockId::new(top, columns), width(top))
    };

    let widths: BTreeMap<Level, usize> = levels.iter().map(|&l| (l, width(l))).collect();
    let g = BlockGraph {
        variant: Some(variant),
        backbone: Some(bb.clone()),
        widths,
        num_classes: Some(spec.num_classes),
        nodes: b.nodes,
        edges: b.edges,
        source: BlockId::new(Level::A, 0),
        sink,
    };
    g.validate()?;
    Ok(g)
}

/// Weightless 4x4 grids used to compare path depth: ShelfNet alternates
/// down/up columns, GridNet runs two down columns then two up columns.
fn build_simplified(spec: &ShelfSpec) -> BlockGraph {
    let down_cols: [bool; 4] = match spec.variant {
        Variant::ShelfnetSimplified => [true, false, true, false],
        _ => [true, true, false, false],
    };
    let mut b = Builder {
        nodes: Vec::new(),
        edges: Vec::new(),
    };
    for (ci, &down) in down_cols.iter().enumerate() {
        let col = ci as u8 + 1;
        let order: Vec<Level> = if down {
            Level::ALL.to_vec()
        } else {
            Level::ALL.iter().rev().copied().collect()
        };
        for (k, &l) in order.iter().enumerate() {
            let id = BlockId::new(l, col);
            b.node(
                id,
                BlockKind::Plain {
                    channels: spec.width(l).unwrap_or(0),
                },
                l.stride(),
            );
            if k > 0 {
                b.vertical(BlockId::new(order[k - 1], col), id, None);
            }
            if col > 1 {
                b.lateral(BlockId::new(l, col - 1), id);
            }
        }
    }
    BlockGraph {
        variant: Some(spec.variant),
        backbone: None,
        widths: Level::ALL.iter().filter_map(|&l| spec.width(l).map(|w| (l, w))).collect(),
        num_classes: None,
        nodes: b.nodes,
        edges: b.edges,
        source: BlockId::new(Level::A, 1),
        sink: BlockId::new(Level::A, 4),
    }
}
