//! PointNet-style embedding network with hand-written backpropagation.
//!
//! Every point passes through the same stack of dense layers (a "shared
//! MLP"), the per-point features are reduced by a channel-wise maximum, and
//! a dense head maps the pooled feature to an embedding. A linear classifier
//! on the raw (pre-normalization) embedding produces class logits, which the
//! softmax loss and the saliency maps use.
//!
//! All parameters live in one flat `Vec<f64>`; [`LayerSlot`] records where
//! each layer's weights (row-major, `inputs x outputs`) and bias start. The
//! checkpoint format and the optimizer both work on that flat buffer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PointCloud;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    /// Output widths of the shared per-point layers. The last one is the
    /// size of the pooled global feature.
    pub point_mlp_channels: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub embedding_dim: usize,
    pub class_count: usize,
    /// Scale embeddings to unit length before they leave the network.
    pub normalize_embedding: bool,
    pub init_seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            point_mlp_channels: vec![64, 64, 128, 1024],
            head_widths: vec![512, 256],
            embedding_dim: 128,
            class_count: 10,
            normalize_embedding: true,
            init_seed: 0,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let widths = self
            .point_mlp_channels
            .iter()
            .chain(&self.head_widths)
            .chain([&self.embedding_dim, &self.class_count]);
        if self.point_mlp_channels.is_empty() || widths.into_iter().any(|&w| w == 0) {
            return Err(Error::InvalidParam(
                "network needs at least one point layer and all widths >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn global_dim(&self) -> usize {
        *self.point_mlp_channels.last().expect("validated spec")
    }

    /// Layer shapes in parameter order.
    fn shapes(&self) -> Vec<(String, usize, usize)> {
        let mut shapes = Vec::new();
        let mut fan_in = 3;
        for (i, &c) in self.point_mlp_channels.iter().enumerate() {
            shapes.push((format!("point.{i}"), fan_in, c));
            fan_in = c;
        }
        for (i, &c) in self.head_widths.iter().enumerate() {
            shapes.push((format!("head.{i}"), fan_in, c));
            fan_in = c;
        }
        shapes.push(("embedding".into(), fan_in, self.embedding_dim));
        shapes.push(("classifier".into(), self.embedding_dim, self.class_count));
        shapes
    }

    /// Total number of scalars: the sum over layers of `in*out + out`.
    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(_, i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlot {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSlot {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.weight_offset + self.inputs * self.outputs
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias_offset..self.bias_offset + self.outputs
    }

    /// Weights and bias together.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.bias_offset + self.outputs
    }
}

fn layout(spec: &NetworkSpec) -> Vec<LayerSlot> {
    let mut offset = 0;
    spec.shapes()
        .into_iter()
        .map(|(name, inputs, outputs)| {
            let slot = LayerSlot {
                name,
                inputs,
                outputs,
                weight_offset: offset,
                bias_offset: offset + inputs * outputs,
            };
            offset = slot.bias_offset + outputs;
            slot
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    spec: NetworkSpec,
    layers: Vec<LayerSlot>,
    values: Vec<f64>,
}

/// Gradient buffer laid out exactly like [`NetworkParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<f64>);

impl ParamGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self(vec![0.0; params.values.len()])
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&g| g == 0.0)
    }
}

/// Draws weights uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; biases start at zero.
pub fn init_network<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<NetworkParams> {
    spec.validate()?;
    let layers = layout(spec);
    let mut values = vec![0.0; spec.param_count()];
    for slot in &layers {
        let bound = 1.0 / (slot.inputs as f64).sqrt();
        for w in &mut values[slot.weight_range()] {
            *w = rng.random_range(-bound..=bound);
        }
    }
    Ok(NetworkParams {
        spec: spec.clone(),
        layers,
        values,
    })
}

impl NetworkParams {
    pub fn from_values(spec: &NetworkSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for a network of {}",
                values.len(),
                spec.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: "checkpoint".into(),
            });
        }
        Ok(Self {
            spec: spec.clone(),
            layers: layout(spec),
            values,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerSlot] {
        &self.layers
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    fn weights(&self, slot: &LayerSlot) -> &[f64] {
        &self.values[slot.weight_range()]
    }

    fn bias(&self, slot: &LayerSlot) -> &[f64] {
        &self.values[slot.bias_range()]
    }

    fn point_layers(&self) -> &[LayerSlot] {
        &self.layers[..self.spec.point_mlp_channels.len()]
    }

    fn head_layers(&self) -> &[LayerSlot] {
        let p = self.spec.point_mlp_channels.len();
        &self.layers[p..p + self.spec.head_widths.len()]
    }

    fn embedding_layer(&self) -> &LayerSlot {
        &self.layers[self.layers.len() - 2]
    }

    fn classifier_layer(&self) -> &LayerSlot {
        &self.layers[self.layers.len() - 1]
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    shape: Vec<(usize, usize)>,
    point_count: usize,
    /// Row-major `N x 3` input coordinates.
    input: Vec<f64>,
    /// Post-activation outputs of every point layer except the last, each `N x width`.
    point_acts: Vec<Vec<f64>>,
    /// Per-channel maximum of the last point layer's pre-activation.
    pooled_pre: Vec<f64>,
    /// Point that attained each channel maximum (lowest index on ties).
    pub argmax: Vec<usize>,
    /// Post-activation outputs of the dense head layers.
    head_acts: Vec<Vec<f64>>,
    raw_embedding: Vec<f64>,
    norm: f64,
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn point_count(&self) -> usize {
        self.point_count
    }

    /// Global feature after the pooled rectifier.
    pub fn global_feature(&self) -> Vec<f64> {
        self.pooled_pre.iter().map(|&v| v.max(0.0)).collect()
    }

    /// Embedding before length normalization; the classifier reads this.
    pub fn raw_embedding(&self) -> &[f64] {
        &self.raw_embedding
    }

    /// Sign pattern of every rectifier plus the pooling winners. Two traces
    /// with equal patterns lie on the same linear piece of the network.
    pub fn activation_pattern(&self) -> (Vec<bool>, Vec<usize>) {
        let mut mask: Vec<bool> = self
            .point_acts
            .iter()
            .chain(&self.head_acts)
            .flat_map(|a| a.iter().map(|&v| v > 0.0))
            .collect();
        mask.extend(self.pooled_pre.iter().map(|&v| v > 0.0));
        (mask, self.argmax.clone())
    }
}

/// `c = a * b + beta * c` for row-major-or-strided matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm touches in a, b and c.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y = W^T x + b` for a single vector, `W` stored `inputs x outputs`.
fn dense_vec(params: &NetworkParams, slot: &LayerSlot, x: &[f64]) -> Vec<f64> {
    let w = params.weights(slot);
    let mut y = params.bias(slot).to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * slot.outputs..(i + 1) * slot.outputs];
        for (yo, &wo) in y.iter_mut().zip(row) {
            *yo += xi * wo;
        }
    }
    y
}

fn check_finite(values: &[f64], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer: layer.to_owned(),
        })
    }
}

const POOL_CHUNK: usize = 256;

/// Runs the network on a (normalized) cloud.
pub fn forward(params: &NetworkParams, cloud: &PointCloud) -> Result<ForwardTrace> {
    forward_points(params, &cloud.points)
}

pub fn forward_points(params: &NetworkParams, points: &[[f64; 3]]) -> Result<ForwardTrace> {
    let n = points.len();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let input: Vec<f64> = points.iter().flatten().copied().collect();
    check_finite(&input, "input")?;

    let point_layers = params.point_layers();
    let (last, hidden) = point_layers.split_last().expect("validated spec");
    let mut point_acts: Vec<Vec<f64>> = Vec::with_capacity(hidden.len());
    for slot in hidden {
        let x = point_acts.last().unwrap_or(&input);
        let mut h = vec![0.0; n * slot.outputs];
        gemm(
            n,
            slot.inputs,
            slot.outputs,
            x,
            (slot.inputs, 1),
            params.weights(slot),
            (slot.outputs, 1),
            0.0,
            &mut h,
        );
        let b = params.bias(slot);
        for row in h.chunks_exact_mut(slot.outputs) {
            for (v, &bo) in row.iter_mut().zip(b) {
                *v = (*v + bo).max(0.0);
            }
        }
        check_finite(&h, &slot.name)?;
        point_acts.push(h);
    }

    // Last point layer fused with the channel max, in row chunks.
    let x = point_acts.last().unwrap_or(&input);
    let width = last.outputs;
    let bias = params.bias(last);
    let mut pooled_pre = vec![f64::NEG_INFINITY; width];
    let mut argmax = vec![0usize; width];
    let mut chunk = vec![0.0; POOL_CHUNK.min(n) * width];
    for start in (0..n).step_by(POOL_CHUNK) {
        let rows = POOL_CHUNK.min(n - start);
        gemm(
            rows,
            last.inputs,
            width,
            &x[start * last.inputs..],
            (last.inputs, 1),
            params.weights(last),
            (width, 1),
            0.0,
            &mut chunk,
        );
        for (r, row) in chunk[..rows * width].chunks_exact(width).enumerate() {
            let idx = start + r;
            // Select form so the loop vectorizes; strict > keeps the lowest index.
            for ((p, a), (&v, &b)) in pooled_pre.iter_mut().zip(argmax.iter_mut()).zip(row.iter().zip(bias)) {
                let v = v + b;
                let gt = v > *p;
                *p = if gt { v } else { *p };
                *a = if gt { idx } else { *a };
            }
        }
    }
    check_finite(&pooled_pre, &last.name)?;

    let mut feature: Vec<f64> = pooled_pre.iter().map(|&v| v.max(0.0)).collect();
    let mut head_acts = Vec::with_capacity(params.head_layers().len());
    for slot in params.head_layers() {
        let mut h = dense_vec(params, slot, &feature);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        check_finite(&h, &slot.name)?;
        head_acts.push(h.clone());
        feature = h;
    }

    let emb_slot = params.embedding_layer();
    let raw_embedding = dense_vec(params, emb_slot, &feature);
    check_finite(&raw_embedding, &emb_slot.name)?;
    let norm = raw_embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    let embedding = if params.spec.normalize_embedding {
        if norm == 0.0 {
            return Err(Error::NonFinite {
                layer: "embedding (zero norm)".into(),
            });
        }
        raw_embedding.iter().map(|v| v / norm).collect()
    } else {
        raw_embedding.clone()
    };
    let cls = params.classifier_layer();
    let logits = dense_vec(params, cls, &raw_embedding);
    check_finite(&logits, &cls.name)?;

    Ok(ForwardTrace {
        shape: params.layers.iter().map(|l| (l.inputs, l.outputs)).collect(),
        point_count: n,
        input,
        point_acts,
        pooled_pre,
        argmax,
        head_acts,
        raw_embedding,
        norm,
        embedding,
        logits,
    })
}

/// Gradients of a scalar objective with respect to parameters and inputs.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub params: ParamGrads,
    /// d objective / d input point coordinates.
    pub input: Vec<[f64; 3]>,
}

/// Backpropagates upstream gradients on the embedding and logits.
///
/// The pooled maximum routes each channel's gradient to its single argmax
/// point; every other point receives nothing through that channel.
pub fn backward(
    params: &NetworkParams,
    trace: &ForwardTrace,
    d_embedding: &[f64],
    d_logits: &[f64],
) -> Result<Backprop> {
    let shape: Vec<(usize, usize)> = params.layers.iter().map(|l| (l.inputs, l.outputs)).collect();
    if shape != trace.shape {
        return Err(Error::TraceMismatch("layer shapes differ".into()));
    }
    if d_embedding.len() != params.spec.embedding_dim || d_logits.len() != params.spec.class_count
    {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradients of length {}/{} for embedding {} and {} classes",
            d_embedding.len(),
            d_logits.len(),
            params.spec.embedding_dim,
            params.spec.class_count
        )));
    }
    let n = trace.point_count;
    let mut grads = ParamGrads::zeros_like(params);
    let g = &mut grads.0;

    // Classifier reads the raw embedding.
    let cls = params.classifier_layer();
    let mut d_raw = vec![0.0; cls.inputs];
    {
        let w = params.weights(cls);
        for i in 0..cls.inputs {
            let zi = trace.raw_embedding[i];
            let row = &w[i * cls.outputs..(i + 1) * cls.outputs];
            let grow = &mut g[cls.weight_offset + i * cls.outputs..][..cls.outputs];
            let mut acc = 0.0;
            for o in 0..cls.outputs {
                grow[o] += zi * d_logits[o];
                acc += row[o] * d_logits[o];
            }
            d_raw[i] = acc;
        }
        for (gb, &dl) in g[cls.bias_range()].iter_mut().zip(d_logits) {
            *gb += dl;
        }
    }

    // Length normalization: d e / d z = (I - e e^T) / |z|.
    if params.spec.normalize_embedding {
        let e = &trace.embedding;
        let dot: f64 = e.iter().zip(d_embedding).map(|(a, b)| a * b).sum();
        for i in 0..d_raw.len() {
            d_raw[i] += (d_embedding[i] - e[i] * dot) / trace.norm;
        }
    } else {
        for (d, &de) in d_raw.iter_mut().zip(d_embedding) {
            *d += de;
        }
    }

    // Dense layers from the embedding back to the pooled feature.
    let global = trace.global_feature();
    let dense_slots: Vec<&LayerSlot> = params
        .head_layers()
        .iter()
        .chain(std::iter::once(params.embedding_layer()))
        .collect();
    let mut d_out = d_raw;
    for (idx, slot) in dense_slots.iter().enumerate().rev() {
        let input: &[f64] = if idx == 0 { &global } else { &trace.head_acts[idx - 1] };
        let w = params.weights(slot);
        let mut d_in = vec![0.0; slot.inputs];
        for i in 0..slot.inputs {
            let xi = input[i];
            let row = &w[i * slot.outputs..(i + 1) * slot.outputs];
            let grow = &mut g[slot.weight_offset + i * slot.outputs..][..slot.outputs];
            let mut acc = 0.0;
            for o in 0..slot.outputs {
                grow[o] += xi * d_out[o];
                acc += row[o] * d_out[o];
            }
            d_in[i] = acc;
        }
        for (gb, &d) in g[slot.bias_range()].iter_mut().zip(&d_out) {
            *gb += d;
        }
        // Rectifier on the layer input (head activations and the pooled feature).
        for (d, &x) in d_in.iter_mut().zip(input) {
            if x <= 0.0 {
                *d = 0.0;
            }
        }
        d_out = d_in;
    }
    let d_pool = d_out;

    // Last point layer: sparse, one winning point per channel.
    let point_layers = params.point_layers();
    let (last, hidden) = point_layers.split_last().expect("validated spec");
    let x_last: &[f64] = trace.point_acts.last().unwrap_or(&trace.input);
    let mut d_x = vec![0.0; n * last.inputs];
    {
        let w = params.weights(last);
        for c in 0..last.outputs {
            let d = d_pool[c];
            if d == 0.0 {
                continue;
            }
            let p = trace.argmax[c];
            if p >= n {
                return Err(Error::TraceMismatch("argmax outside point range".into()));
            }
            g[last.bias_offset + c] += d;
            for i in 0..last.inputs {
                g[last.weight_offset + i * last.outputs + c] += x_last[p * last.inputs + i] * d;
                d_x[p * last.inputs + i] += w[i * last.outputs + c] * d;
            }
        }
    }

    // Remaining shared layers, dense.
    for (l, slot) in hidden.iter().enumerate().rev() {
        let out = &trace.point_acts[l];
        for (d, &h) in d_x.iter_mut().zip(out) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        let x: &[f64] = if l == 0 { &trace.input } else { &trace.point_acts[l - 1] };
        // dW = X^T dH  (inputs x outputs)
        gemm(
            slot.inputs,
            n,
            slot.outputs,
            x,
            (1, slot.inputs),
            &d_x,
            (slot.outputs, 1),
            1.0,
            &mut g[slot.weight_range()],
        );
        for row in d_x.chunks_exact(slot.outputs) {
            for (gb, &d) in g[slot.bias_range()].iter_mut().zip(row) {
                *gb += d;
            }
        }
        // dX = dH W^T  (N x inputs)
        let mut d_prev = vec![0.0; n * slot.inputs];
        gemm(
            n,
            slot.outputs,
            slot.inputs,
            &d_x,
            (slot.outputs, 1),
            params.weights(slot),
            (1, slot.outputs),
            0.0,
            &mut d_prev,
        );
        d_x = d_prev;
    }

    let input = d_x.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(Backprop {
        params: grads,
        input,
    })
}

/// Embeds every cloud; order is preserved and each result equals [`forward`].
pub fn embed_batch(params: &NetworkParams, clouds: &[PointCloud]) -> Result<Vec<Vec<f64>>> {
    clouds
        .par_iter()
        .map(|c| forward(params, c).map(|t| t.embedding))
        .collect()
}

/// Index of the largest logit, lowest index on ties.
pub fn predicted_class(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Header of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub epoch: usize,
    pub param_count: usize,
    pub spec: NetworkSpec,
}

const CHECKPOINT_FORMAT: &str = "herdid-checkpoint";
const HEADER_END: &[u8] = b"end_header\n";

/// Text header, an `end_header` line, then every parameter as a
/// little-endian f64 in layer order.
pub fn checkpoint_bytes(params: &NetworkParams, seed: u64, epoch: usize) -> Vec<u8> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        seed,
        epoch,
        param_count: params.param_count(),
        spec: params.spec.clone(),
    };
    let mut text = toml::to_string(&header).expect("header serializes");
    if !text.ends_with('\n') {
        let _ = writeln!(text);
    }
    let mut bytes = text.into_bytes();
    bytes.extend_from_slice(HEADER_END);
    for v in &params.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn write_checkpoint(params: &NetworkParams, seed: u64, epoch: usize, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, checkpoint_bytes(params, seed, epoch)).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<(NetworkParams, CheckpointHeader)> {
    let split = bytes
        .windows(HEADER_END.len())
        .position(|w| w == HEADER_END)
        .filter(|&p| p == 0 || bytes[p - 1] == b'\n')
        .ok_or_else(|| Error::parse(path, "missing end_header marker"))?;
    let text = std::str::from_utf8(&bytes[..split]).map_err(|e| Error::parse(path, e))?;
    let header: CheckpointHeader = toml::from_str(text).map_err(|e| Error::parse(path, e))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::parse(path, format!("unexpected format `{}`", header.format)));
    }
    let body = &bytes[split + HEADER_END.len()..];
    if body.len() != header.param_count * 8 {
        return Err(Error::parse(
            path,
            format!("expected {} parameter bytes, found {}", header.param_count * 8, body.len()),
        ));
    }
    let values = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    let params = NetworkParams::from_values(&header.spec, values)?;
    Ok((params, header))
}

pub fn read_checkpoint(path: &Path) -> Result<(NetworkParams, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}
