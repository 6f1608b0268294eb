//! Static layer graphs: declarative wiring, parameter initialization,
//! recorded forward passes, and reverse-mode backward sweeps.
//!
//! Nodes are stored in topological order by construction (a node can only
//! reference already-built nodes), so the forward pass is a single in-order
//! sweep and backward a single reverse sweep with gradient accumulation at
//! fan-outs. Parameters unreachable from the loss simply keep zero gradients.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::glorot_normal;
use super::ops::{
    add_forward, batchnorm_backward, batchnorm_forward, bn_running_update, concat_backward,
    concat_forward, conv3d_backward, conv3d_forward, deconv3d_backward, deconv3d_forward,
    maxpool3d_backward, maxpool3d_forward, relu_backward, relu_forward, BnCache,
};
use super::tensor::{NnError, Tensor5};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Input,
    Conv3d {
        out_channels: usize,
        kernel: (usize, usize, usize),
    },
    Deconv3d {
        out_channels: usize,
        stride: (usize, usize, usize),
    },
    MaxPool3d {
        window: (usize, usize, usize),
    },
    Relu,
    BatchNorm,
    Concat,
    Add,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    /// Indices into the parameter store (kernel+bias, or gain+shift for BN).
    pub param_ids: Vec<usize>,
    /// Indices into the buffer store (BN running mean and variance).
    pub buffer_ids: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub input: usize,
    pub output: usize,
}

/// Incremental graph builder; node methods return ids usable as inputs of
/// later nodes.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    input: Option<usize>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: Vec<usize>) -> usize {
        for &i in &inputs {
            assert!(i < self.nodes.len(), "input id {i} not yet built");
        }
        self.nodes.push(Node {
            name: name.into(),
            kind,
            inputs,
            param_ids: Vec::new(),
            buffer_ids: Vec::new(),
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self) -> usize {
        let id = self.push("input", LayerKind::Input, vec![]);
        self.input = Some(id);
        id
    }

    pub fn conv3d(
        &mut self,
        name: impl Into<String>,
        src: usize,
        out_channels: usize,
        kernel: (usize, usize, usize),
    ) -> usize {
        self.push(
            name,
            LayerKind::Conv3d {
                out_channels,
                kernel,
            },
            vec![src],
        )
    }

    pub fn deconv3d(
        &mut self,
        name: impl Into<String>,
        src: usize,
        out_channels: usize,
        stride: (usize, usize, usize),
    ) -> usize {
        self.push(
            name,
            LayerKind::Deconv3d {
                out_channels,
                stride,
            },
            vec![src],
        )
    }

    pub fn maxpool(&mut self, name: impl Into<String>, src: usize, window: (usize, usize, usize)) -> usize {
        self.push(name, LayerKind::MaxPool3d { window }, vec![src])
    }

    pub fn relu(&mut self, name: impl Into<String>, src: usize) -> usize {
        self.push(name, LayerKind::Relu, vec![src])
    }

    pub fn batchnorm(&mut self, name: impl Into<String>, src: usize) -> usize {
        self.push(name, LayerKind::BatchNorm, vec![src])
    }

    pub fn concat(&mut self, name: impl Into<String>, a: usize, b: usize) -> usize {
        self.push(name, LayerKind::Concat, vec![a, b])
    }

    pub fn add(&mut self, name: impl Into<String>, a: usize, b: usize) -> usize {
        self.push(name, LayerKind::Add, vec![a, b])
    }

    pub fn build(self, output: usize) -> Graph {
        Graph {
            input: self.input.expect("graph has no input node"),
            nodes: self.nodes,
            output,
        }
    }
}

/// One named tensor with Adam moment buffers.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl ParamEntry {
    fn new(name: String, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            name,
            shape,
            data,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        }
    }
}

/// Non-trainable named tensor (BN running statistics).
#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All learnable parameters, BN running statistics, and the optimizer step.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub params: Vec<ParamEntry>,
    pub buffers: Vec<BufferEntry>,
    pub step: u64,
}

impl ParamStore {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Per-node output channel counts, given the graph input's channel count.
pub fn channel_counts(graph: &Graph, in_channels: usize) -> Result<Vec<usize>, NnError> {
    let mut channels = vec![0usize; graph.nodes.len()];
    for (i, node) in graph.nodes.iter().enumerate() {
        channels[i] = match &node.kind {
            LayerKind::Input => in_channels,
            LayerKind::Conv3d { out_channels, .. } | LayerKind::Deconv3d { out_channels, .. } => {
                *out_channels
            }
            LayerKind::MaxPool3d { .. } | LayerKind::Relu | LayerKind::BatchNorm => {
                channels[node.inputs[0]]
            }
            LayerKind::Concat => channels[node.inputs[0]] + channels[node.inputs[1]],
            LayerKind::Add => {
                let (a, b) = (channels[node.inputs[0]], channels[node.inputs[1]]);
                if a != b {
                    return Err(NnError::BadGraph(format!(
                        "add node '{}' mixes {a} and {b} channels",
                        node.name
                    )));
                }
                a
            }
        };
    }
    Ok(channels)
}

/// Propagates an input shape through the graph; index i holds node i's
/// output shape.
pub fn activation_shapes(
    graph: &Graph,
    input_shape: [usize; 5],
) -> Result<Vec<[usize; 5]>, NnError> {
    let channels = channel_counts(graph, input_shape[1])?;
    let mut shapes = vec![[0usize; 5]; graph.nodes.len()];
    for (i, node) in graph.nodes.iter().enumerate() {
        let src = node.inputs.first().map(|&s| shapes[s]);
        shapes[i] = match &node.kind {
            LayerKind::Input => input_shape,
            LayerKind::Conv3d { .. } | LayerKind::Relu | LayerKind::BatchNorm => {
                let mut s = src.unwrap();
                s[1] = channels[i];
                s
            }
            LayerKind::Deconv3d { stride, .. } => {
                let s = src.unwrap();
                [s[0], channels[i], s[2] * stride.0, s[3] * stride.1, s[4] * stride.2]
            }
            LayerKind::MaxPool3d { window } => {
                let s = src.unwrap();
                if s[2] % window.0 != 0 || s[3] % window.1 != 0 || s[4] % window.2 != 0 {
                    return Err(NnError::NotDivisible {
                        dims: (s[2], s[3], s[4]),
                        window: *window,
                    });
                }
                [s[0], channels[i], s[2] / window.0, s[3] / window.1, s[4] / window.2]
            }
            LayerKind::Concat | LayerKind::Add => {
                let a = shapes[node.inputs[0]];
                let b = shapes[node.inputs[1]];
                if a[2..] != b[2..] || a[0] != b[0] {
                    return Err(NnError::BadGraph(format!(
                        "node '{}' joins incompatible shapes {a:?} and {b:?}",
                        node.name
                    )));
                }
                [a[0], channels[i], a[2], a[3], a[4]]
            }
        };
    }
    Ok(shapes)
}

/// Allocates and initializes every parameter of the graph: Glorot-normal
/// kernels, zero biases, unit BN gains, zero shifts, running stats (0, 1).
/// Records parameter indices on the graph nodes.
pub fn initialize_params(
    graph: &mut Graph,
    in_channels: usize,
    rng: &mut impl Rng,
) -> Result<ParamStore, NnError> {
    let channels = channel_counts(graph, in_channels)?;
    let mut store = ParamStore::default();
    for i in 0..graph.nodes.len() {
        let in_ch = graph.nodes[i].inputs.first().map(|&s| channels[s]);
        let node = &mut graph.nodes[i];
        match node.kind {
            LayerKind::Conv3d {
                out_channels,
                kernel: (kx, ky, kz),
            }
            | LayerKind::Deconv3d {
                out_channels,
                stride: (kx, ky, kz),
            } => {
                let ci = in_ch.unwrap();
                let kvol = kx * ky * kz;
                let shape = vec![out_channels, ci, kx, ky, kz];
                let fan_in = ci * kvol;
                let fan_out = out_channels * kvol;
                let kernel = glorot_normal(fan_in, fan_out, out_channels * ci * kvol, rng);
                node.param_ids = vec![store.params.len(), store.params.len() + 1];
                store.params.push(ParamEntry::new(
                    format!("{}.kernel", node.name),
                    shape,
                    kernel,
                ));
                store.params.push(ParamEntry::new(
                    format!("{}.bias", node.name),
                    vec![out_channels],
                    vec![0.0; out_channels],
                ));
            }
            LayerKind::BatchNorm => {
                let c = in_ch.unwrap();
                node.param_ids = vec![store.params.len(), store.params.len() + 1];
                store
                    .params
                    .push(ParamEntry::new(format!("{}.gain", node.name), vec![c], vec![1.0; c]));
                store
                    .params
                    .push(ParamEntry::new(format!("{}.shift", node.name), vec![c], vec![0.0; c]));
                node.buffer_ids = vec![store.buffers.len(), store.buffers.len() + 1];
                store.buffers.push(BufferEntry {
                    name: format!("{}.running_mean", node.name),
                    shape: vec![c],
                    data: vec![0.0; c],
                });
                store.buffers.push(BufferEntry {
                    name: format!("{}.running_var", node.name),
                    shape: vec![c],
                    data: vec![1.0; c],
                });
            }
            _ => {}
        }
    }
    Ok(store)
}

/// Whether a forward pass uses batch statistics (train) or running
/// statistics (infer), and whether it should update the running estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Train { update_running: bool },
    Infer,
}

enum NodeCache {
    None,
    MaxPool(Vec<u32>),
    Bn(BnCache),
}

/// A recorded forward pass: every node's activation plus op-specific caches.
pub struct ForwardPass {
    pub activations: Vec<Tensor5>,
    caches: Vec<NodeCache>,
}

impl ForwardPass {
    pub fn output(&self, graph: &Graph) -> &Tensor5 {
        &self.activations[graph.output]
    }
}

fn kernel_tensor(entry: &ParamEntry) -> Tensor5 {
    Tensor5 {
        shape: [
            entry.shape[0],
            entry.shape[1],
            entry.shape[2],
            entry.shape[3],
            entry.shape[4],
        ],
        data: entry.data.clone(),
    }
}

/// Runs the graph on `input`, recording activations for a later backward
/// sweep. Train mode may update BN running statistics in the store.
pub fn forward(
    graph: &Graph,
    store: &mut ParamStore,
    input: &Tensor5,
    mode: Mode,
) -> Result<ForwardPass, NnError> {
    let mut activations: Vec<Tensor5> = Vec::with_capacity(graph.nodes.len());
    let mut caches: Vec<NodeCache> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let (out, cache) = match &node.kind {
            LayerKind::Input => (input.clone(), NodeCache::None),
            LayerKind::Conv3d { .. } => {
                let kernel = kernel_tensor(&store.params[node.param_ids[0]]);
                let bias = &store.params[node.param_ids[1]].data;
                (
                    conv3d_forward(&activations[node.inputs[0]], &kernel, bias)?,
                    NodeCache::None,
                )
            }
            LayerKind::Deconv3d { stride, .. } => {
                let kernel = kernel_tensor(&store.params[node.param_ids[0]]);
                let bias = &store.params[node.param_ids[1]].data;
                (
                    deconv3d_forward(&activations[node.inputs[0]], &kernel, bias, *stride)?,
                    NodeCache::None,
                )
            }
            LayerKind::MaxPool3d { window } => {
                let (out, argmax) = maxpool3d_forward(&activations[node.inputs[0]], *window)?;
                (out, NodeCache::MaxPool(argmax))
            }
            LayerKind::Relu => (
                relu_forward(&activations[node.inputs[0]]),
                NodeCache::None,
            ),
            LayerKind::BatchNorm => {
                let gain = &store.params[node.param_ids[0]].data;
                let shift = &store.params[node.param_ids[1]].data;
                let rm = &store.buffers[node.buffer_ids[0]].data;
                let rv = &store.buffers[node.buffer_ids[1]].data;
                let train = matches!(mode, Mode::Train { .. });
                let (out, cache) = batchnorm_forward(
                    &activations[node.inputs[0]],
                    gain,
                    shift,
                    rm,
                    rv,
                    train,
                )?;
                if let Mode::Train {
                    update_running: true,
                } = mode
                {
                    let (left, right) = store.buffers.split_at_mut(node.buffer_ids[1]);
                    bn_running_update(
                        &cache,
                        &mut left[node.buffer_ids[0]].data,
                        &mut right[0].data,
                    );
                }
                (out, NodeCache::Bn(cache))
            }
            LayerKind::Concat => (
                concat_forward(&activations[node.inputs[0]], &activations[node.inputs[1]])?,
                NodeCache::None,
            ),
            LayerKind::Add => (
                add_forward(&activations[node.inputs[0]], &activations[node.inputs[1]])?,
                NodeCache::None,
            ),
        };
        activations.push(out);
        caches.push(cache);
    }
    Ok(ForwardPass {
        activations,
        caches,
    })
}

/// Per-parameter gradients aligned with `ParamStore::params`.
pub struct Gradients {
    pub by_param: Vec<Vec<f64>>,
}

/// Reverse-mode sweep from `grad_output` (the loss gradient at the graph
/// output) back to every parameter and the input. Parameters of unreached
/// nodes keep zero gradients.
pub fn backward(
    graph: &Graph,
    store: &ParamStore,
    pass: &ForwardPass,
    grad_output: Tensor5,
) -> Result<Gradients, NnError> {
    let mut by_param: Vec<Vec<f64>> = store
        .params
        .iter()
        .map(|p| vec![0.0; p.data.len()])
        .collect();
    let mut grads: Vec<Option<Tensor5>> = (0..graph.nodes.len()).map(|_| None).collect();
    grads[graph.output] = Some(grad_output);

    let accumulate = |slot: &mut Option<Tensor5>, g: Tensor5| match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
    };

    for i in (0..graph.nodes.len()).rev() {
        let Some(grad_out) = grads[i].take() else {
            continue;
        };
        let node = &graph.nodes[i];
        match &node.kind {
            LayerKind::Input => {}
            LayerKind::Conv3d { .. } => {
                let kernel = kernel_tensor(&store.params[node.param_ids[0]]);
                let (gi, gk, gb) =
                    conv3d_backward(&pass.activations[node.inputs[0]], &kernel, &grad_out)?;
                by_param[node.param_ids[0]]
                    .iter_mut()
                    .zip(&gk.data)
                    .for_each(|(a, b)| *a += b);
                by_param[node.param_ids[1]]
                    .iter_mut()
                    .zip(&gb)
                    .for_each(|(a, b)| *a += b);
                accumulate(&mut grads[node.inputs[0]], gi);
            }
            LayerKind::Deconv3d { stride, .. } => {
                let kernel = kernel_tensor(&store.params[node.param_ids[0]]);
                let (gi, gk, gb) = deconv3d_backward(
                    &pass.activations[node.inputs[0]],
                    &kernel,
                    &grad_out,
                    *stride,
                )?;
                by_param[node.param_ids[0]]
                    .iter_mut()
                    .zip(&gk.data)
                    .for_each(|(a, b)| *a += b);
                by_param[node.param_ids[1]]
                    .iter_mut()
                    .zip(&gb)
                    .for_each(|(a, b)| *a += b);
                accumulate(&mut grads[node.inputs[0]], gi);
            }
            LayerKind::MaxPool3d { .. } => {
                let NodeCache::MaxPool(argmax) = &pass.caches[i] else {
                    unreachable!("maxpool cache");
                };
                let gi = maxpool3d_backward(
                    pass.activations[node.inputs[0]].shape,
                    argmax,
                    &grad_out,
                );
                accumulate(&mut grads[node.inputs[0]], gi);
            }
            LayerKind::Relu => {
                let gi = relu_backward(&pass.activations[node.inputs[0]], &grad_out);
                accumulate(&mut grads[node.inputs[0]], gi);
            }
            LayerKind::BatchNorm => {
                let NodeCache::Bn(cache) = &pass.caches[i] else {
                    unreachable!("bn cache");
                };
                let gain = &store.params[node.param_ids[0]].data;
                let (gi, gg, gs) = batchnorm_backward(
                    &pass.activations[node.inputs[0]],
                    gain,
                    cache,
                    &grad_out,
                );
                by_param[node.param_ids[0]]
                    .iter_mut()
                    .zip(&gg)
                    .for_each(|(a, b)| *a += b);
                by_param[node.param_ids[1]]
                    .iter_mut()
                    .zip(&gs)
                    .for_each(|(a, b)| *a += b);
                accumulate(&mut grads[node.inputs[0]], gi);
            }
            LayerKind::Concat => {
                let ca = pass.activations[node.inputs[0]].shape[1];
                let cb = pass.activations[node.inputs[1]].shape[1];
                let (ga, gb) = concat_backward(&grad_out, ca, cb);
                accumulate(&mut grads[node.inputs[0]], ga);
                accumulate(&mut grads[node.inputs[1]], gb);
            }
            LayerKind::Add => {
                accumulate(&mut grads[node.inputs[0]], grad_out.clone());
                accumulate(&mut grads[node.inputs[1]], grad_out);
            }
        }
    }
    Ok(Gradients { by_param })
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    kind: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreManifest {
    step: u64,
    tensors: Vec<TensorRecord>,
}

fn blob_file_name(index: usize, name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("{index:03}_{safe}.f32")
}

/// Writes the store as `params.json` plus one raw little-endian f32 blob per
/// named tensor (parameters and BN running buffers).
pub fn save_params(store: &ParamStore, dir: impl AsRef<Path>) -> std::io::Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut write_blob = |index: usize, name: &str, shape: &[usize], data: &[f64], kind: &str| {
        let file = blob_file_name(index, name);
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for &v in data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let path = dir.join(&file);
        let result = fs::File::create(path).and_then(|mut f| f.write_all(&bytes));
        tensors.push(TensorRecord {
            name: name.to_string(),
            shape: shape.to_vec(),
            kind: kind.to_string(),
            file,
        });
        result
    };
    for (i, p) in store.params.iter().enumerate() {
        write_blob(i, &p.name, &p.shape, &p.data, "param")?;
    }
    for (i, b) in store.buffers.iter().enumerate() {
        write_blob(store.params.len() + i, &b.name, &b.shape, &b.data, "buffer")?;
    }
    let manifest = StoreManifest {
        step: store.step,
        tensors,
    };
    fs::write(
        dir.join("params.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

/// Reads a store written by [`save_params`]. Adam moments start at zero.
pub fn load_params(dir: impl AsRef<Path>) -> std::io::Result<ParamStore> {
    let dir = dir.as_ref();
    let manifest: StoreManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("params.json"))?)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let mut store = ParamStore {
        step: manifest.step,
        ..Default::default()
    };
    for record in manifest.tensors {
        let bytes = fs::read(dir.join(&record.file))?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let expected: usize = record.shape.iter().product();
        if data.len() != expected {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("blob {} holds {} values, expected {expected}", record.file, data.len()),
            ));
        }
        match record.kind.as_str() {
            "param" => store
                .params
                .push(ParamEntry::new(record.name, record.shape, data)),
            _ => store.buffers.push(BufferEntry {
                name: record.name,
                shape: record.shape,
                data,
            }),
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::mse_loss;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_graph() -> Graph {
        let mut b = GraphBuilder::new();
        let input = b.input();
        let c1 = b.conv3d("c1", input, 3, (3, 3, 3));
        let r1 = b.relu("r1", c1);
        let n1 = b.batchnorm("n1", r1);
        let c2 = b.conv3d("c2", n1, 1, (1, 1, 1));
        b.build(c2)
    }

    #[test]
    fn shapes_propagate() {
        let g = tiny_graph();
        let shapes = activation_shapes(&g, [2, 1, 4, 4, 4]).unwrap();
        assert_eq!(shapes.last().unwrap(), &[2, 1, 4, 4, 4]);
    }

    #[test]
    fn gradient_check_tiny_network() {
        // two conv layers with relu+bn between; all parameter gradients vs
        // central finite differences
        let mut g = tiny_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut store = initialize_params(&mut g, 1, &mut rng).unwrap();
        let input = {
            let mut r = ChaCha8Rng::seed_from_u64(78);
            use rand::Rng;
            Tensor5::from_vec(
                [1, 1, 4, 4, 4],
                (0..64).map(|_| r.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let target = {
            let mut r = ChaCha8Rng::seed_from_u64(79);
            use rand::Rng;
            Tensor5::from_vec(
                [1, 1, 4, 4, 4],
                (0..64).map(|_| r.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };

        let mode = Mode::Train {
            update_running: false,
        };
        let pass = forward(&g, &mut store, &input, mode).unwrap();
        let (_, grad_out) = mse_loss(pass.output(&g), &target).unwrap();
        let grads = backward(&g, &store, &pass, grad_out).unwrap();

        let eval = |store: &mut ParamStore| {
            let pass = forward(&g, store, &input, mode).unwrap();
            mse_loss(pass.output(&g), &target).unwrap().0
        };
        let h = 1e-3;
        for pi in 0..store.params.len() {
            for vi in (0..store.params[pi].data.len()).step_by(5) {
                let orig = store.params[pi].data[vi];
                store.params[pi].data[vi] = orig + h;
                let lp = eval(&mut store.clone());
                store.params[pi].data[vi] = orig - h;
                let lm = eval(&mut store.clone());
                store.params[pi].data[vi] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let ad = grads.by_param[pi][vi];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-4);
                assert!(
                    rel < 1e-4,
                    "param {} [{vi}]: ad {ad} vs fd {fd} (rel {rel})",
                    store.params[pi].name
                );
            }
        }
    }

    #[test]
    fn zero_input_dead_relu_network_has_zero_gradients() {
        let mut b = GraphBuilder::new();
        let input = b.input();
        let c1 = b.conv3d("c1", input, 2, (3, 3, 3));
        let r1 = b.relu("r1", c1);
        let c2 = b.conv3d("c2", r1, 1, (1, 1, 1));
        let mut g = b.build(c2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = initialize_params(&mut g, 1, &mut rng).unwrap();
        // zero biases are the default; zero input then never crosses relu
        let input = Tensor5::zeros([1, 1, 4, 4, 4]);
        let target = Tensor5::zeros([1, 1, 4, 4, 4]);
        let pass = forward(
            &g,
            &mut store,
            &input,
            Mode::Train {
                update_running: false,
            },
        )
        .unwrap();
        let (loss, grad_out) = mse_loss(pass.output(&g), &target).unwrap();
        assert_eq!(loss, 0.0);
        let grads = backward(&g, &store, &pass, grad_out).unwrap();
        for (pi, g) in grads.by_param.iter().enumerate() {
            // the c2 kernel sees zero activations; c1 sees zero upstream grad
            assert!(
                g.iter().all(|&v| v == 0.0),
                "param {} has nonzero grad",
                store.params[pi].name
            );
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut g = tiny_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = initialize_params(&mut g, 1, &mut rng).unwrap();
        let input = Tensor5::from_vec([1, 1, 4, 4, 4], (0..64).map(|i| i as f64 * 0.01).collect())
            .unwrap();
        let a = forward(&g, &mut store, &input, Mode::Infer).unwrap();
        let b = forward(&g, &mut store, &input, Mode::Infer).unwrap();
        assert_eq!(a.output(&g).data, b.output(&g).data);
    }

    #[test]
    fn save_load_roundtrip() {
        let mut g = tiny_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = initialize_params(&mut g, 1, &mut rng).unwrap();
        store.step = 42;
        let dir = tempfile::tempdir().unwrap();
        save_params(&store, dir.path()).unwrap();
        let loaded = load_params(dir.path()).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.params.len(), store.params.len());
        assert_eq!(loaded.buffers.len(), store.buffers.len());
        for (a, b) in store.params.iter().zip(&loaded.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            // values round-trip through f32
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn unreached_parameters_get_zero_gradient() {
        // a conv branch that never reaches the output
        let mut b = GraphBuilder::new();
        let input = b.input();
        let used = b.conv3d("used", input, 1, (1, 1, 1));
        let _orphan = b.conv3d("orphan", input, 4, (3, 3, 3));
        let mut g = b.build(used);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = initialize_params(&mut g, 1, &mut rng).unwrap();
        let input = Tensor5::from_vec([1, 1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let pass = forward(&g, &mut store, &input, Mode::Infer).unwrap();
        let grad_out = Tensor5::from_vec([1, 1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let grads = backward(&g, &store, &pass, grad_out).unwrap();
        let orphan_kernel = &grads.by_param[2];
        assert!(orphan_kernel.iter().all(|&v| v == 0.0));
    }
}
