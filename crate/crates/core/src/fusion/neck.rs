//! Neck compute graphs: stacked CF layers, the FPN+PANet baseline, shortest
//! fusion-path analysis, and parameter counting.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvLayer, GradTape, ResizeMode, Tensor, TensorId};

use super::{CfConfig, CfLayer, StageSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    /// Input stage index.
    Entry(usize),
    /// (node index, output branch index).
    Node(usize, usize),
}

pub enum NodeKind {
    /// Multi-in multi-out fusion layer (counts toward path length).
    CfLayer(CfLayer),
    /// Per-stage 1×1 conv.
    Lateral(ConvLayer),
    /// 1×1 conv matching channel widths across stages.
    ChannelProj(ConvLayer),
    Upsample { factor: usize },
    /// Strided 3×3 conv.
    DownConv(ConvLayer),
    /// Elementwise two-input merge (counts toward path length).
    Sum,
}

impl NodeKind {
    fn is_fusion(&self) -> bool {
        matches!(self, NodeKind::CfLayer(_) | NodeKind::Sum)
    }
}

pub struct Node {
    pub kind: NodeKind,
    pub inputs: Vec<NodeRef>,
}

/// Directed acyclic compute graph of a neck, with tagged entry stages and
/// exit branches. Nodes are stored in topological (construction) order.
pub struct NeckGraph {
    pub nodes: Vec<Node>,
    pub in_stages: Vec<StageSpec>,
    pub out_stages: Vec<StageSpec>,
    pub exits: Vec<NodeRef>,
}

impl NeckGraph {
    /// Executes the graph on the tape. Returns per-exit outputs and the flat
    /// parameter ids in [`NeckGraph::params_mut`] order.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        entries: &[TensorId],
    ) -> Result<(Vec<TensorId>, Vec<TensorId>)> {
        if entries.len() != self.in_stages.len() {
            return Err(Error::ShapeMismatch(format!(
                "neck: {} entries for {} input stages",
                entries.len(),
                self.in_stages.len()
            )));
        }
        let mut param_ids = Vec::new();
        let mut outputs: Vec<Vec<TensorId>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<TensorId> = node
                .inputs
                .iter()
                .map(|r| match *r {
                    NodeRef::Entry(s) => entries[s],
                    NodeRef::Node(n, b) => outputs[n][b],
                })
                .collect();
            let outs = match &node.kind {
                NodeKind::CfLayer(cf) => {
                    let (outs, ids) = cf.forward(tape, &ins)?;
                    param_ids.extend(ids);
                    outs
                }
                NodeKind::Lateral(conv) | NodeKind::ChannelProj(conv) | NodeKind::DownConv(conv) => {
                    let (y, w, b) = tape.apply_conv(ins[0], conv)?;
                    param_ids.push(w);
                    if let Some(b) = b {
                        param_ids.push(b);
                    }
                    vec![y]
                }
                NodeKind::Upsample { factor } => {
                    let (_, _, h, w) = tape.value(ins[0]).dims4()?;
                    vec![tape.resize(ins[0], h * factor, w * factor, ResizeMode::Up)?]
                }
                NodeKind::Sum => vec![tape.add(ins[0], ins[1])?],
            };
            outputs.push(outs);
        }
        let exits = self
            .exits
            .iter()
            .map(|r| match *r {
                NodeRef::Entry(s) => entries[s],
                NodeRef::Node(n, b) => outputs[n][b],
            })
            .collect();
        Ok((exits, param_ids))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            match &mut node.kind {
                NodeKind::CfLayer(cf) => out.extend(cf.params_mut()),
                NodeKind::Lateral(conv) | NodeKind::ChannelProj(conv) | NodeKind::DownConv(conv) => {
                    out.push(&mut conv.weights);
                    if let Some(b) = conv.bias.as_mut() {
                        out.push(b);
                    }
                }
                NodeKind::Upsample { .. } | NodeKind::Sum => {}
            }
        }
        out
    }
}

/// n stacked CF layers: the first maps in_stages → out_stages, the rest
/// out_stages → out_stages.
pub fn build_cf_neck(config: &CfConfig, seed: u64) -> Result<NeckGraph> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = Vec::with_capacity(config.n);
    for layer_idx in 0..config.n {
        let ins = if layer_idx == 0 {
            &config.in_stages
        } else {
            &config.out_stages
        };
        let cf = CfLayer::init(ins, &config.out_stages, config.k, 0.1, &mut rng)?;
        let inputs: Vec<NodeRef> = (0..ins.len())
            .map(|s| {
                if layer_idx == 0 {
                    NodeRef::Entry(s)
                } else {
                    NodeRef::Node(layer_idx - 1, s)
                }
            })
            .collect();
        nodes.push(Node {
            kind: NodeKind::CfLayer(cf),
            inputs,
        });
    }
    let last = nodes.len() - 1;
    let exits = (0..config.out_stages.len())
        .map(|b| NodeRef::Node(last, b))
        .collect();
    Ok(NeckGraph {
        nodes,
        in_stages: config.in_stages.clone(),
        out_stages: config.out_stages.clone(),
        exits,
    })
}

/// FPN top-down pathway (lateral 1×1 convs, upsample, add) followed by the
/// PANet bottom-up pathway (strided 3×3 convs, add). Output stages equal the
/// input stages.
pub fn build_fpn_panet_neck(stages: &[StageSpec], seed: u64) -> Result<NeckGraph> {
    super::validate_stages(stages, "fpn")?;
    if stages.len() < 2 {
        return Err(Error::InvalidArgument(
            "FPN+PANet needs at least two stages".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 0.1;
    let mut nodes: Vec<Node> = Vec::new();
    let push = |nodes: &mut Vec<Node>, kind: NodeKind, inputs: Vec<NodeRef>| -> NodeRef {
        nodes.push(Node { kind, inputs });
        NodeRef::Node(nodes.len() - 1, 0)
    };

    // Lateral convs per stage.
    let laterals: Vec<NodeRef> = stages
        .iter()
        .enumerate()
        .map(|(s, spec)| {
            let conv =
                ConvLayer::init_uniform(spec.channels, spec.channels, 1, 1, 0, scale, &mut rng);
            push(&mut nodes, NodeKind::Lateral(conv), vec![NodeRef::Entry(s)])
        })
        .collect();

    // Top-down: deepest stage passes through; each shallower stage sums its
    // lateral with the upsampled, channel-projected deeper result.
    let last = stages.len() - 1;
    let mut top_down = vec![NodeRef::Entry(0); stages.len()];
    top_down[last] = laterals[last];
    for s in (0..last).rev() {
        let factor = stages[s + 1].scale / stages[s].scale;
        let up = push(
            &mut nodes,
            NodeKind::Upsample { factor },
            vec![top_down[s + 1]],
        );
        let proj = ConvLayer::init_uniform(
            stages[s].channels,
            stages[s + 1].channels,
            1,
            1,
            0,
            scale,
            &mut rng,
        );
        let proj = push(&mut nodes, NodeKind::ChannelProj(proj), vec![up]);
        top_down[s] = push(&mut nodes, NodeKind::Sum, vec![laterals[s], proj]);
    }

    // Bottom-up: each deeper stage sums the downsampled shallower result with
    // its top-down feature.
    let mut bottom_up = vec![top_down[0]; stages.len()];
    for s in 1..stages.len() {
        let stride = stages[s].scale / stages[s - 1].scale;
        let down = ConvLayer::init_uniform(
            stages[s].channels,
            stages[s - 1].channels,
            3,
            stride,
            1,
            scale,
            &mut rng,
        );
        let down = push(&mut nodes, NodeKind::DownConv(down), vec![bottom_up[s - 1]]);
        bottom_up[s] = push(&mut nodes, NodeKind::Sum, vec![down, top_down[s]]);
    }

    Ok(NeckGraph {
        nodes,
        in_stages: stages.to_vec(),
        out_stages: stages.to_vec(),
        exits: bottom_up,
    })
}

/// Number of fusion modules (CF layers, elementwise merges) on the shortest
/// path from an input stage to an output stage. 0-1 BFS over the node DAG.
pub fn path_length(graph: &NeckGraph, from_stage: usize, to_stage: usize) -> Result<usize> {
    if from_stage >= graph.in_stages.len() || to_stage >= graph.exits.len() {
        return Err(Error::InvalidArgument(format!(
            "stage out of range: from {} (of {}), to {} (of {})",
            from_stage,
            graph.in_stages.len(),
            to_stage,
            graph.exits.len()
        )));
    }
    // Adjacency: consumer lists per entry and per node.
    let num_nodes = graph.nodes.len();
    let mut entry_consumers: Vec<Vec<usize>> = vec![Vec::new(); graph.in_stages.len()];
    let mut node_consumers: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
    for (idx, node) in graph.nodes.iter().enumerate() {
        for input in &node.inputs {
            match *input {
                NodeRef::Entry(s) => entry_consumers[s].push(idx),
                NodeRef::Node(n, _) => node_consumers[n].push(idx),
            }
        }
    }
    let mut dist = vec![usize::MAX; num_nodes];
    let mut deque: VecDeque<usize> = VecDeque::new();
    for &n in &entry_consumers[from_stage] {
        let cost = graph.nodes[n].kind.is_fusion() as usize;
        if cost < dist[n] {
            dist[n] = cost;
            if cost == 0 {
                deque.push_front(n);
            } else {
                deque.push_back(n);
            }
        }
    }
    let mut settled = vec![false; num_nodes];
    while let Some(n) = deque.pop_front() {
        if settled[n] {
            continue;
        }
        settled[n] = true;
        for &m in &node_consumers[n] {
            let cost = graph.nodes[m].kind.is_fusion() as usize;
            let cand = dist[n] + cost;
            if cand < dist[m] {
                dist[m] = cand;
                if cost == 0 {
                    deque.push_front(m);
                } else {
                    deque.push_back(m);
                }
            }
        }
    }
    match graph.exits[to_stage] {
        NodeRef::Entry(s) => {
            if s == from_stage {
                Ok(0)
            } else {
                Err(Error::InvalidArgument(format!(
                    "exit {} is a pass-through of entry {}, unreachable from entry {}",
                    to_stage, s, from_stage
                )))
            }
        }
        NodeRef::Node(n, _) => {
            if dist[n] == usize::MAX {
                Err(Error::InvalidArgument(format!(
                    "output stage {} unreachable from input stage {}",
                    to_stage, from_stage
                )))
            } else {
                Ok(dist[n])
            }
        }
    }
}

/// Maximum shortest-path fusion count over all (input, output) stage pairs.
pub fn max_path_length(graph: &NeckGraph) -> Result<usize> {
    let mut max = 0;
    for s in 0..graph.in_stages.len() {
        for t in 0..graph.exits.len() {
            max = max.max(path_length(graph, s, t)?);
        }
    }
    Ok(max)
}

/// Exact parameter element counts split by role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct ParamBreakdown {
    pub conv_weights: usize,
    pub biases: usize,
    pub bn: usize,
    pub prelu: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.conv_weights + self.biases + self.bn + self.prelu
    }

    fn add_conv(&mut self, conv: &ConvLayer) {
        self.conv_weights += conv.weights.len();
        self.biases += conv.bias.as_ref().map_or(0, Tensor::len);
    }
}

/// Per-node and total parameter counts for a neck graph.
pub fn count_params(graph: &NeckGraph) -> (Vec<(String, ParamBreakdown)>, ParamBreakdown) {
    let mut per_node = Vec::new();
    let mut total = ParamBreakdown::default();
    for (idx, node) in graph.nodes.iter().enumerate() {
        let mut counts = ParamBreakdown::default();
        let label = match &node.kind {
            NodeKind::CfLayer(cf) => {
                for row in &cf.goct.convs {
                    for conv in row {
                        counts.add_conv(conv);
                    }
                }
                for branch in &cf.branches {
                    counts.bn += branch.gamma.len() + branch.beta.len();
                    counts.prelu += branch.prelu_slope.len();
                    for layer in branch.csp.layers() {
                        counts.add_conv(layer);
                    }
                }
                format!("node{}:cf_layer", idx)
            }
            NodeKind::Lateral(conv) => {
                counts.add_conv(conv);
                format!("node{}:lateral", idx)
            }
            NodeKind::ChannelProj(conv) => {
                counts.add_conv(conv);
                format!("node{}:channel_proj", idx)
            }
            NodeKind::DownConv(conv) => {
                counts.add_conv(conv);
                format!("node{}:down_conv", idx)
            }
            NodeKind::Upsample { .. } => format!("node{}:upsample", idx),
            NodeKind::Sum => format!("node{}:sum", idx),
        };
        total.conv_weights += counts.conv_weights;
        total.biases += counts.biases;
        total.bn += counts.bn;
        total.prelu += counts.prelu;
        per_node.push((label, counts));
    }
    (per_node, total)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Tensor;

    use super::*;

    fn three_stage_config(n: usize, k: usize) -> CfConfig {
        let stages = vec![
            StageSpec { channels: 4, scale: 1 },
            StageSpec { channels: 8, scale: 2 },
            StageSpec { channels: 16, scale: 4 },
        ];
        CfConfig {
            in_stages: stages.clone(),
            out_stages: stages,
            n,
            k,
        }
    }

    fn rand_entries(tape: &mut GradTape, stages: &[StageSpec], base: usize, seed: u64) -> Vec<TensorId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        stages
            .iter()
            .map(|s| {
                let hw = base / s.scale;
                tape.leaf(Tensor::rand_uniform(&[1, s.channels, hw, hw], -1.0, 1.0, &mut rng))
            })
            .collect()
    }

    #[test]
    fn cf_neck_has_one_node_per_layer() {
        let graph = build_cf_neck(&three_stage_config(2, 1), 0).unwrap();
        assert_eq!(graph.nodes.len(), 2);
        assert!(graph
            .nodes
            .iter()
            .all(|n| matches!(n.kind, NodeKind::CfLayer(_))));
    }

    #[test]
    fn fpn_panet_contains_both_pathways() {
        let stages = three_stage_config(1, 1).in_stages;
        let graph = build_fpn_panet_neck(&stages, 0).unwrap();
        let ups = graph
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Upsample { .. }))
            .count();
        let downs = graph
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::DownConv(_)))
            .count();
        assert_eq!(ups, 2, "top-down chain");
        assert_eq!(downs, 2, "bottom-up chain");
        assert!(build_fpn_panet_neck(&stages[..1], 0).is_err());
    }

    #[test]
    fn both_necks_produce_identical_output_shapes() {
        let config = three_stage_config(2, 1);
        let cf = build_cf_neck(&config, 0).unwrap();
        let fpn = build_fpn_panet_neck(&config.in_stages, 0).unwrap();
        let mut tape = GradTape::new();
        let entries = rand_entries(&mut tape, &config.in_stages, 16, 1);
        let (cf_outs, _) = cf.forward(&mut tape, &entries).unwrap();
        let (fpn_outs, _) = fpn.forward(&mut tape, &entries).unwrap();
        assert_eq!(cf_outs.len(), fpn_outs.len());
        for (a, b) in cf_outs.iter().zip(&fpn_outs) {
            assert_eq!(tape.value(*a).shape(), tape.value(*b).shape());
        }
    }

    #[test]
    fn forward_param_ids_match_params_mut_order() {
        let config = three_stage_config(2, 3);
        for graph in [
            build_cf_neck(&config, 0).unwrap(),
            build_fpn_panet_neck(&config.in_stages, 0).unwrap(),
        ] {
            let mut graph = graph;
            let mut tape = GradTape::new();
            let entries = rand_entries(&mut tape, &config.in_stages, 8, 2);
            let (_, ids) = graph.forward(&mut tape, &entries).unwrap();
            let params = graph.params_mut();
            assert_eq!(params.len(), ids.len());
            for (p, &id) in params.iter().zip(&ids) {
                assert_eq!(p.data(), tape.value(id).data(), "param/id order drift");
            }
        }
    }

    #[test]
    fn single_cf_layer_reaches_every_pair_in_one_hop() {
        let graph = build_cf_neck(&three_stage_config(1, 1), 0).unwrap();
        for s in 0..3 {
            for t in 0..3 {
                assert_eq!(path_length(&graph, s, t).unwrap(), 1);
            }
        }
        assert_eq!(max_path_length(&graph).unwrap(), 1);
    }

    #[test]
    fn stacked_cf_layers_add_one_hop_each() {
        let graph = build_cf_neck(&three_stage_config(2, 1), 0).unwrap();
        assert_eq!(max_path_length(&graph).unwrap(), 2);
    }

    #[test]
    fn fpn_panet_shallow_to_deep_needs_at_least_two_fusions() {
        let stages = three_stage_config(1, 1).in_stages;
        let graph = build_fpn_panet_neck(&stages, 0).unwrap();
        assert!(path_length(&graph, 0, 2).unwrap() >= 2);
    }

    #[test]
    fn cf_is_never_longer_than_the_baseline() {
        let config = three_stage_config(2, 1);
        let cf = build_cf_neck(&config, 0).unwrap();
        let fpn = build_fpn_panet_neck(&config.in_stages, 0).unwrap();
        assert!(max_path_length(&cf).unwrap() <= max_path_length(&fpn).unwrap());
    }

    #[test]
    fn path_length_rejects_bad_stage_indices() {
        let graph = build_cf_neck(&three_stage_config(1, 1), 0).unwrap();
        assert!(path_length(&graph, 3, 0).is_err());
        assert!(path_length(&graph, 0, 3).is_err());
    }

    #[test]
    fn pass_through_exits_resolve_only_for_their_entry() {
        let stages = vec![
            StageSpec { channels: 2, scale: 1 },
            StageSpec { channels: 2, scale: 2 },
        ];
        let graph = NeckGraph {
            nodes: Vec::new(),
            in_stages: stages.clone(),
            out_stages: stages,
            exits: vec![NodeRef::Entry(0), NodeRef::Entry(1)],
        };
        assert_eq!(path_length(&graph, 0, 0).unwrap(), 0);
        assert!(path_length(&graph, 1, 0).is_err());
    }

    #[test]
    fn count_params_agrees_with_layer_counts() {
        let config = three_stage_config(2, 3);
        let graph = build_cf_neck(&config, 0).unwrap();
        let (per_node, total) = count_params(&graph);
        assert_eq!(per_node.len(), 2);
        let mut expected = ParamBreakdown::default();
        for node in &graph.nodes {
            if let NodeKind::CfLayer(cf) = &node.kind {
                expected.conv_weights += cf.goct.conv_weight_count();
                expected.biases += cf.goct.bias_count();
                for branch in &cf.branches {
                    expected.bn += branch.gamma.len() + branch.beta.len();
                    expected.prelu += branch.prelu_slope.len();
                    expected.conv_weights += branch.csp.conv_weight_count();
                    expected.biases += branch.csp.bias_count();
                }
            }
        }
        assert_eq!(total, expected);
        assert_eq!(
            total.total(),
            per_node.iter().map(|(_, c)| c.total()).sum::<usize>()
        );
    }

    #[test]
    fn k_squared_law_holds_for_whole_necks() {
        let k1 = count_params(&build_cf_neck(&three_stage_config(2, 1), 0).unwrap()).1;
        let k3 = count_params(&build_cf_neck(&three_stage_config(2, 3), 0).unwrap()).1;
        // Only the gOctConv kernels scale; CSP and BN/PReLU are K-independent,
        // so compare after removing their shared contribution.
        let csp_etc = |b: ParamBreakdown, goct_w: usize| b.conv_weights - goct_w;
        let goct_w1: usize = build_cf_neck(&three_stage_config(2, 1), 0)
            .unwrap()
            .nodes
            .iter()
            .map(|n| match &n.kind {
                NodeKind::CfLayer(cf) => cf.goct.conv_weight_count(),
                _ => 0,
            })
            .sum();
        let goct_w3: usize = build_cf_neck(&three_stage_config(2, 3), 0)
            .unwrap()
            .nodes
            .iter()
            .map(|n| match &n.kind {
                NodeKind::CfLayer(cf) => cf.goct.conv_weight_count(),
                _ => 0,
            })
            .sum();
        assert_eq!(goct_w3, 9 * goct_w1);
        assert_eq!(csp_etc(k1, goct_w1), csp_etc(k3, goct_w3));
        assert!(k3.total() > k1.total(), "total strictly increases with K");
    }
}
