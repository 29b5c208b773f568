use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{transition_layers, BlockGraph, BlockKind, BlockNode, Edge, Transition};
use super::layers::{LayerKind, LayerSpec};
use super::spec::{BackboneFamily, BlockId};
use super::ArchError;
use crate::tensor::{kernels, BnConfig, Mode, ParamId, ParamStore, RunningStats, Tape, Tensor4, Var};
use crate::Scalar;

/// How fresh parameters are drawn.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct InitPolicy {
    /// Start the second BN of every S-block at gamma = 0, so the block is
    /// identity + ReLU at initialization.
    pub zero_residual_gamma: bool,
}

/// A block graph with parameters, BN statistics and a dropout RNG.
#[derive(Clone, Debug)]
pub struct ExecutableNet<T: Scalar> {
    graph: BlockGraph,
    order: Vec<usize>,
    layers: HashMap<String, LayerSpec>,
    store: ParamStore<T>,
    stats: BTreeMap<String, RunningStats<T>>,
    bn: BnConfig,
    rng: ChaCha8Rng,
    outputs: BTreeMap<BlockId, Tensor4<T>>,
    pub cache_outputs: bool,
}

/// Per-forward parameter reads, one tape variable per slot.
struct Params<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Params<'_, T> {
    fn get(&mut self, tape: &mut Tape<T>, name: &str) -> Var {
        let id = self.store.id(name).unwrap_or_else(|| panic!("parameter {name} was registered"));
        *self.vars.entry(id).or_insert_with(|| tape.param(self.store, id))
    }
}

fn edge_layers(graph: &BlockGraph, e: &Edge, t: &Transition) -> Vec<LayerSpec> {
    let stride = |id| graph.node(id).map(|n: &BlockNode| n.stride).unwrap_or(1);
    transition_layers(&e.name(), t, stride(e.from), stride(e.to))
}

impl<T: Scalar> ExecutableNet<T> {
    /// Registers and initializes every parameter: conv kernels from a
    /// fan-out scaled normal, BN gamma 1 and beta 0.
    pub fn instantiate(graph: BlockGraph, init: InitPolicy, seed: u64) -> Result<Self, ArchError> {
        graph.validate()?;
        for n in &graph.nodes {
            if matches!(n.kind, BlockKind::Classifier { .. } | BlockKind::Plain { .. }) {
                return Err(ArchError::Unsupported(format!(
                    "{} blocks ({}) are analysis-only and cannot be executed",
                    n.kind.name(),
                    n.id.key()
                )));
            }
        }
        let order = graph.topo_order()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stats = BTreeMap::new();
        let mut layers = HashMap::new();
        for &i in &order {
            let node = &graph.nodes[i];
            let mut specs = Vec::new();
            for e in graph.incoming(node.id) {
                if let Some(t) = &e.transition {
                    specs.extend(edge_layers(&graph, e, t));
                }
            }
            specs.extend(node.layers());
            let zero_gamma = init.zero_residual_gamma && matches!(node.kind, BlockKind::SBlock { .. });
            for spec in specs {
                for (suffix, dims) in spec.tensor_shapes() {
                    let name = format!("{}{suffix}", spec.name);
                    let value = match (spec.kind, suffix) {
                        (LayerKind::BatchNorm, ".gamma") => {
                            let g = if zero_gamma && spec.name.ends_with("/bn2") { 0.0 } else { 1.0 };
                            Tensor4::full(dims, T::lit(g))
                        }
                        (_, ".beta") | (_, ".bias") => Tensor4::zeros(dims),
                        _ => {
                            let fan_out = (spec.c_out * spec.kernel * spec.kernel) as f64;
                            let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("positive std");
                            Tensor4::from_fn(dims, |_, _, _, _| T::lit(normal.sample(&mut rng)))
                        }
                    };
                    store.register(&name, value, spec.sharing_group.as_deref())?;
                }
                if spec.kind == LayerKind::BatchNorm {
                    stats.insert(spec.name.clone(), RunningStats::new(spec.c_out));
                }
                layers.insert(spec.name.clone(), spec);
            }
        }
        // Dropout draws from its own stream so twins with different
        // parameter counts still see the same masks.
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_rng.set_stream(1);
        Ok(Self {
            graph,
            order,
            layers,
            store,
            stats,
            bn: BnConfig::default(),
            rng: dropout_rng,
            outputs: BTreeMap::new(),
            cache_outputs: true,
        })
    }

    pub fn graph(&self) -> &BlockGraph {
        &self.graph
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Running BN statistics keyed by layer name.
    pub fn bn_stats(&self) -> &BTreeMap<String, RunningStats<T>> {
        &self.stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut BTreeMap<String, RunningStats<T>> {
        &mut self.stats
    }

    pub fn bn_config(&self) -> BnConfig {
        self.bn
    }

    pub fn set_bn_config(&mut self, cfg: BnConfig) {
        self.bn = cfg;
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Output of every block from the last forward pass.
    pub fn outputs(&self) -> &BTreeMap<BlockId, Tensor4<T>> {
        &self.outputs
    }

    pub fn output(&self, id: BlockId) -> Option<&Tensor4<T>> {
        self.outputs.get(&id)
    }

    pub fn num_classes(&self) -> usize {
        self.graph.num_classes.unwrap_or_else(|| self.graph.node(self.graph.sink).map_or(0, |n| n.kind.out_channels()))
    }

    /// Inputs must be RGB with sides divisible by the deepest stride.
    pub fn check_input(&self, shape: crate::tensor::Shape4) -> Result<(), ArchError> {
        let s = self.graph.total_stride();
        if shape.c != 3 {
            return Err(ArchError::Input(format!("expected 3 input channels, got {}", shape.c)));
        }
        if shape.h == 0 || shape.w == 0 || !shape.h.is_multiple_of(s) || !shape.w.is_multiple_of(s) {
            return Err(ArchError::Input(format!(
                "input {}x{} is not divisible by the network stride {s}",
                shape.h, shape.w
            )));
        }
        Ok(())
    }

    /// Runs the graph in topological order and returns the sink output:
    /// full-resolution logits for a segmentation net.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var, ArchError> {
        self.check_input(tape.shape(x))?;
        let mut ctx = Ctx {
            params: Params {
                store: &self.store,
                vars: HashMap::new(),
            },
            layers: &self.layers,
            stats: &mut self.stats,
            bn: self.bn,
            mode,
            rng: &mut self.rng,
        };
        let mut vars: HashMap<BlockId, Var> = HashMap::new();
        self.outputs.clear();
        for &i in &self.order {
            let node = &self.graph.nodes[i];
            let mut input = None;
            if node.id == self.graph.source {
                input = Some(x);
            }
            for e in self.graph.incoming(node.id) {
                let mut v = vars[&e.from];
                if let Some(t) = &e.transition {
                    v = ctx.transition(tape, &e.name(), t, v)?;
                }
                input = Some(match input {
                    None => v,
                    Some(acc) => tape.add(acc, v)?,
                });
            }
            let input = input.ok_or_else(|| ArchError::Graph(format!("block {} has no input", node.id)))?;
            let out = ctx.block(tape, node, input)?;
            if self.cache_outputs {
                self.outputs.insert(node.id, tape.value(out).clone());
            }
            vars.insert(node.id, out);
        }
        Ok(vars[&self.graph.sink])
    }

    /// Class probabilities in eval mode.
    pub fn predict(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>, ArchError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, Mode::Eval)?;
        Ok(kernels::softmax_channels(tape.value(out)))
    }
}

struct Ctx<'a, T: Scalar> {
    params: Params<'a, T>,
    layers: &'a HashMap<String, LayerSpec>,
    stats: &'a mut BTreeMap<String, RunningStats<T>>,
    bn: BnConfig,
    mode: Mode,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Ctx<'_, T> {
    /// Applies the conv, transposed conv or BN layer called `name`.
    fn layer(&mut self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var, ArchError> {
        let spec = &self.layers[name];
        Ok(match spec.kind {
            LayerKind::Conv => {
                let w = self.params.get(tape, name);
                tape.conv2d(x, w, spec.stride, spec.padding, spec.dilation)?
            }
            LayerKind::ConvTranspose => {
                let w = self.params.get(tape, name);
                tape.conv_transpose2d(x, w, spec.stride, spec.padding, spec.output_padding)?
            }
            LayerKind::BatchNorm => {
                let g = self.params.get(tape, &format!("{name}.gamma"));
                let b = self.params.get(tape, &format!("{name}.beta"));
                let stats = self.stats.get_mut(name).expect("BN stats registered");
                tape.batch_norm(x, g, b, stats, self.mode, self.bn)?
            }
            LayerKind::Linear => return Err(ArchError::Unsupported(format!("linear layer {name}"))),
        })
    }

    fn conv_bn_relu(&mut self, tape: &mut Tape<T>, conv: &str, bn: &str, x: Var) -> Result<Var, ArchError> {
        let h = self.layer(tape, conv, x)?;
        let h = self.layer(tape, bn, h)?;
        Ok(tape.relu(h))
    }

    fn transition(&mut self, tape: &mut Tape<T>, name: &str, t: &Transition, x: Var) -> Result<Var, ArchError> {
        let x = match t {
            Transition::LwUp { .. } => tape.bilinear_upsample(x, 2)?,
            _ => x,
        };
        self.conv_bn_relu(tape, &format!("{name}/conv"), &format!("{name}/bn"), x)
    }

    fn block(&mut self, tape: &mut Tape<T>, node: &BlockNode, x: Var) -> Result<Var, ArchError> {
        let id = node.id.to_string();
        match &node.kind {
            BlockKind::BackboneStage(s) => {
                let mut h = x;
                if s.index == 0 {
                    h = self.conv_bn_relu(tape, &format!("{id}/stem/conv"), &format!("{id}/stem/bn"), h)?;
                    h = tape.max_pool2d(h, 3, 2, 1)?;
                }
                let bottleneck = s.family == BackboneFamily::ResnetBottleneck;
                for j in 0..s.blocks {
                    let p = format!("{id}/b{j}");
                    let mut y = self.conv_bn_relu(tape, &format!("{p}/conv1"), &format!("{p}/bn1"), h)?;
                    if bottleneck {
                        y = self.conv_bn_relu(tape, &format!("{p}/conv2"), &format!("{p}/bn2"), y)?;
                        y = self.layer(tape, &format!("{p}/conv3"), y)?;
                        y = self.layer(tape, &format!("{p}/bn3"), y)?;
                    } else {
                        y = self.layer(tape, &format!("{p}/conv2"), y)?;
                        y = self.layer(tape, &format!("{p}/bn2"), y)?;
                    }
                    let down = format!("{p}/down");
                    let shortcut = if self.layers.contains_key(&down) {
                        let d = self.layer(tape, &down, h)?;
                        self.layer(tape, &format!("{p}/down_bn"), d)?
                    } else {
                        h
                    };
                    let sum = tape.add(y, shortcut)?;
                    h = tape.relu(sum);
                }
                Ok(h)
            }
            BlockKind::ChannelReduce { .. } => self.conv_bn_relu(tape, &format!("{id}/conv"), &format!("{id}/bn"), x),
            BlockKind::SBlock { shared, dropout, .. } => {
                let (c1, c2) = if *shared {
                    (format!("{id}/conv"), format!("{id}/conv"))
                } else {
                    (format!("{id}/conv1"), format!("{id}/conv2"))
                };
                let h = self.conv_bn_relu(tape, &c1, &format!("{id}/bn1"), x)?;
                let seed = if self.mode == Mode::Train && *dropout > 0.0 { self.rng.random() } else { 0 };
                let h = tape.dropout(h, *dropout, self.mode, seed)?;
                let h = self.layer(tape, &c2, h)?;
                let h = self.layer(tape, &format!("{id}/bn2"), h)?;
                let sum = tape.add(x, h)?;
                Ok(tape.relu(sum))
            }
            BlockKind::LwUpBlock { .. } => {
                let h = self.conv_bn_relu(tape, &format!("{id}/conv"), &format!("{id}/bn"), x)?;
                let pooled = tape.global_avg_pool(h);
                let a = self.layer(tape, &format!("{id}/attention"), pooled)?;
                let gate = tape.sigmoid(a);
                Ok(tape.scale_channels(h, gate)?)
            }
            BlockKind::Head { upsample, .. } => {
                let logits = self.layer(tape, &format!("{id}/conv"), x)?;
                Ok(tape.bilinear_upsample(logits, *upsample)?)
            }
            BlockKind::Classifier { .. } | BlockKind::Plain { .. } => {
                Err(ArchError::Unsupported(format!("cannot execute {}", node.kind.name())))
            }
        }
    }
}
