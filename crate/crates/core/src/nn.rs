//! Dense arrays and the fixed layer stack of the text CNN, with hand-written
//! reverse-mode gradients.
//!
//! Layer order: embedding lookup, 1-D convolutions (stride 1, valid extent)
//! for each filter size, max over time per filter, concatenation, one dense
//! layer with ReLU, then one linear head per task (plus an optional 2-way
//! dummy head).

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD;
use crate::error::{Error, Result};

/// Row-major `f64` array.
#[derive(Clone, Debug, PartialEq)]
pub struct NumArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NumArray {
    pub fn zeros(shape: &[usize]) -> Self {
        NumArray {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(NumArray {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        NumArray {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.shape[1..].iter().product::<usize>();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.shape[1..].iter().product::<usize>();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn add_assign(&mut self, other: &NumArray) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Network dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub filter_sizes: Vec<usize>,
    pub n_filters: usize,
    pub hidden: usize,
    /// Original class count per task; each head has one extra abstain output.
    pub task_classes: Vec<usize>,
    #[serde(default)]
    pub dummy_task: bool,
}

impl Architecture {
    pub fn desk(vocab_size: usize, task_classes: Vec<usize>) -> Self {
        Architecture {
            vocab_size,
            embed_dim: 16,
            filter_sizes: vec![3, 4, 5],
            n_filters: 8,
            hidden: 32,
            task_classes,
            dummy_task: false,
        }
    }

    pub fn pooled_dim(&self) -> usize {
        self.n_filters * self.filter_sizes.len()
    }

    pub fn min_len(&self) -> usize {
        self.filter_sizes.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.n_filters == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument(format!("degenerate architecture {self:?}")));
        }
        if self.filter_sizes.is_empty() || self.filter_sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "filter sizes must be non-empty and positive".into(),
            ));
        }
        if self.task_classes.is_empty() || self.task_classes.iter().any(|&k| k < 2) {
            return Err(Error::InvalidArgument("every task needs at least 2 classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub size: usize,
    /// `[n_filters, size, embed_dim]`
    pub weight: NumArray,
    pub bias: NumArray,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: NumArray,
    pub bias: NumArray,
}

impl Linear {
    fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            weight: NumArray::zeros(&[inp, out]),
            bias: NumArray::zeros(&[out]),
        }
    }

    fn init<R: Rng>(inp: usize, out: usize, rng: &mut R) -> Self {
        Linear {
            weight: NumArray::uniform(&[inp, out], glorot(inp, out), rng),
            bias: NumArray::zeros(&[out]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let out = self.out_dim();
        let mut y = self.bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let w = &self.weight.data()[i * out..(i + 1) * out];
            for (yj, wj) in y.iter_mut().zip(w) {
                *yj += xi * wj;
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backprop(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let out = self.out_dim();
        let mut dx = vec![0.0; x.len()];
        for (b, d) in grad.bias.data_mut().iter_mut().zip(dy) {
            *b += d;
        }
        let gw = grad.weight.data_mut();
        let w = self.weight.data();
        for (i, &xi) in x.iter().enumerate() {
            let row = i * out;
            let mut acc = 0.0;
            for j in 0..out {
                gw[row + j] += xi * dy[j];
                acc += w[row + j] * dy[j];
            }
            dx[i] = acc;
        }
        dx
    }
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Every trainable tensor of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `[vocab, embed_dim]`; row [`PAD`] stays zero.
    pub embedding: NumArray,
    pub conv: Vec<Conv>,
    pub dense: Linear,
    /// One head per task with `k_t + 1` outputs.
    pub heads: Vec<Linear>,
    /// 2-way retain/abstain head used by the N-task loss.
    pub dummy: Option<Linear>,
}

impl LayerParams {
    pub fn zeros(arch: &Architecture) -> Self {
        LayerParams {
            embedding: NumArray::zeros(&[arch.vocab_size, arch.embed_dim]),
            conv: arch
                .filter_sizes
                .iter()
                .map(|&s| Conv {
                    size: s,
                    weight: NumArray::zeros(&[arch.n_filters, s, arch.embed_dim]),
                    bias: NumArray::zeros(&[arch.n_filters]),
                })
                .collect(),
            dense: Linear::zeros(arch.pooled_dim(), arch.hidden),
            heads: arch
                .task_classes
                .iter()
                .map(|&k| Linear::zeros(arch.hidden, k + 1))
                .collect(),
            dummy: arch.dummy_task.then(|| Linear::zeros(arch.hidden, 2)),
        }
    }

    pub fn init<R: Rng>(arch: &Architecture, rng: &mut R) -> Self {
        let d = arch.embed_dim;
        let mut embedding = NumArray::uniform(&[arch.vocab_size, d], glorot(arch.vocab_size, d), rng);
        embedding.row_mut(PAD).fill(0.0);
        let conv = arch
            .filter_sizes
            .iter()
            .map(|&s| Conv {
                size: s,
                weight: NumArray::uniform(&[arch.n_filters, s, d], glorot(s * d, arch.n_filters), rng),
                bias: NumArray::zeros(&[arch.n_filters]),
            })
            .collect();
        let dense = Linear::init(arch.pooled_dim(), arch.hidden, rng);
        let heads = arch
            .task_classes
            .iter()
            .map(|&k| Linear::init(arch.hidden, k + 1, rng))
            .collect();
        let dummy = arch.dummy_task.then(|| Linear::init(arch.hidden, 2, rng));
        LayerParams {
            embedding,
            conv,
            dense,
            heads,
            dummy,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &NumArray| NumArray::zeros(a.shape());
        let zl = |l: &Linear| Linear {
            weight: z(&l.weight),
            bias: z(&l.bias),
        };
        LayerParams {
            embedding: z(&self.embedding),
            conv: self
                .conv
                .iter()
                .map(|c| Conv {
                    size: c.size,
                    weight: z(&c.weight),
                    bias: z(&c.bias),
                })
                .collect(),
            dense: zl(&self.dense),
            heads: self.heads.iter().map(zl).collect(),
            dummy: self.dummy.as_ref().map(zl),
        }
    }

    /// Tensors in a fixed order (used by the optimizer and checkpoints).
    pub fn tensors(&self) -> Vec<&NumArray> {
        let mut v = vec![&self.embedding];
        for c in &self.conv {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        v.push(&self.dense.weight);
        v.push(&self.dense.bias);
        for h in self.heads.iter().chain(self.dummy.as_ref()) {
            v.push(&h.weight);
            v.push(&h.bias);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut NumArray> {
        let mut v = vec![&mut self.embedding];
        for c in &mut self.conv {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v.push(&mut self.dense.weight);
        v.push(&mut self.dense.bias);
        for h in self.heads.iter_mut().chain(self.dummy.as_mut()) {
            v.push(&mut h.weight);
            v.push(&mut h.bias);
        }
        v
    }

    pub fn add_assign(&mut self, other: &LayerParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.shape()[1]
    }

    pub fn min_len(&self) -> usize {
        self.conv.iter().map(|c| c.size).max().unwrap_or(1)
    }

    /// Mean of the embedding rows, excluding the padding row.
    pub fn centroid(&self) -> Vec<f64> {
        let (v, d) = (self.vocab_size(), self.embed_dim());
        let mut c = vec![0.0; d];
        for i in (0..v).filter(|&i| i != PAD) {
            for (cj, e) in c.iter_mut().zip(self.embedding.row(i)) {
                *cj += e;
            }
        }
        let n = (v - 1).max(1) as f64;
        c.iter_mut().for_each(|x| *x /= n);
        c
    }

    /// Writes all tensors as little-endian shape headers followed by raw `f64` values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let tensors = self.tensors();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for t in tensors {
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &s in t.shape() {
                w.write_all(&(s as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads tensors written by [`write_binary`](Self::write_binary); shapes must match `arch`.
    pub fn read_binary<R: Read>(arch: &Architecture, mut r: R) -> Result<Self> {
        let mut params = LayerParams::zeros(arch);
        let err = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(err)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(err)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut tensors = params.tensors_mut();
        if count != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{count} tensors, expected {}",
                tensors.len()
            )));
        }
        for t in tensors.iter_mut() {
            r.read_exact(&mut b4).map_err(err)?;
            let ndim = u32::from_le_bytes(b4) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                r.read_exact(&mut b8).map_err(err)?;
                shape.push(u64::from_le_bytes(b8) as usize);
            }
            if shape != t.shape() {
                return Err(Error::Checkpoint(format!("shape {shape:?}, expected {:?}", t.shape())));
            }
            for x in t.data_mut() {
                r.read_exact(&mut b8).map_err(err)?;
                *x = f64::from_le_bytes(b8);
            }
        }
        Ok(params)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DACXCKPT";

/// Intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct Cache {
    /// Input tokens, right-padded to the largest filter size.
    pub tokens: Vec<usize>,
    /// Looked-up embeddings, `[len, embed_dim]`.
    pub embedded: NumArray,
    /// Winning time step per filter, per filter size.
    argmax: Vec<Vec<usize>>,
    pooled: Vec<f64>,
    pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl Cache {
    /// True when both passes took the same max-pool winners and ReLU pattern,
    /// i.e. the network is on the same linear piece.
    pub fn same_path(&self, other: &Cache) -> bool {
        self.argmax == other.argmax
            && self
                .pre_activation
                .iter()
                .zip(&other.pre_activation)
                .all(|(a, b)| (*a > 0.0) == (*b > 0.0))
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Vec<Vec<f64>>,
    pub dummy_logits: Option<Vec<f64>>,
    pub cache: Cache,
}

/// Right-pads with [`PAD`] up to `min_len`.
pub fn pad_tokens(tokens: &[usize], min_len: usize) -> Vec<usize> {
    let mut t = tokens.to_vec();
    if t.len() < min_len {
        t.resize(min_len, PAD);
    }
    t
}

pub fn embed(params: &LayerParams, tokens: &[usize]) -> Result<NumArray> {
    let (v, d) = (params.vocab_size(), params.embed_dim());
    let mut e = NumArray::zeros(&[tokens.len(), d]);
    for (p, &t) in tokens.iter().enumerate() {
        if t >= v {
            return Err(Error::TokenOutOfRange { index: t, vocab: v });
        }
        e.row_mut(p).copy_from_slice(params.embedding.row(t));
    }
    Ok(e)
}

pub fn forward(params: &LayerParams, tokens: &[usize]) -> Result<Forward> {
    let tokens = pad_tokens(tokens, params.min_len());
    let embedded = embed(params, &tokens)?;
    forward_embedded(params, tokens, embedded)
}

/// Forward pass from an explicit embedding matrix (one row per token).
pub fn forward_embedded(params: &LayerParams, tokens: Vec<usize>, embedded: NumArray) -> Result<Forward> {
    let d = params.embed_dim();
    if embedded.shape() != [tokens.len(), d] {
        return Err(Error::Shape(format!(
            "embedded input {:?} for {} tokens of width {d}",
            embedded.shape(),
            tokens.len()
        )));
    }
    let len = tokens.len();
    if len < params.min_len() {
        return Err(Error::Shape(format!(
            "sequence of {len} is shorter than the widest filter"
        )));
    }
    let mut pooled = Vec::new();
    let mut argmax = Vec::with_capacity(params.conv.len());
    for conv in &params.conv {
        let (nf, s) = (conv.weight.shape()[0], conv.size);
        let span = s * d;
        let mut winners = vec![0usize; nf];
        for (f, winner) in winners.iter_mut().enumerate() {
            let w = &conv.weight.data()[f * span..(f + 1) * span];
            let mut best = f64::NEG_INFINITY;
            for t in 0..=(len - s) {
                let x = &embedded.data()[t * d..t * d + span];
                let v: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                if v > best {
                    best = v;
                    *winner = t;
                }
            }
            pooled.push(best + conv.bias.data()[f]);
        }
        argmax.push(winners);
    }
    let pre_activation = params.dense.apply(&pooled);
    let hidden: Vec<f64> = pre_activation.iter().map(|&x| x.max(0.0)).collect();
    let logits = params.heads.iter().map(|h| h.apply(&hidden)).collect();
    let dummy_logits = params.dummy.as_ref().map(|h| h.apply(&hidden));
    Ok(Forward {
        logits,
        dummy_logits,
        cache: Cache {
            tokens,
            embedded,
            argmax,
            pooled,
            pre_activation,
            hidden,
        },
    })
}

/// Gradients of one backward pass.
#[derive(Clone, Debug)]
pub struct Backward {
    pub params: LayerParams,
    /// `dL/dE` for the looked-up embedding matrix, `[len, embed_dim]`.
    pub input: NumArray,
}

/// Backpropagates per-task logit gradients (and optionally the dummy head's).
pub fn backward(params: &LayerParams, cache: &Cache, dlogits: &[Vec<f64>], ddummy: Option<&[f64]>) -> Result<Backward> {
    if dlogits.len() != params.heads.len() {
        return Err(Error::Shape(format!(
            "{} logit gradients for {} heads",
            dlogits.len(),
            params.heads.len()
        )));
    }
    for (h, g) in params.heads.iter().zip(dlogits) {
        if g.len() != h.out_dim() {
            return Err(Error::Shape(format!(
                "head gradient of {} for {} outputs",
                g.len(),
                h.out_dim()
            )));
        }
    }
    let mut grad = params.zeros_like();
    let hdim = params.dense.out_dim();
    let mut dhidden = vec![0.0; hdim];
    for ((head, g), gh) in params.heads.iter().zip(dlogits).zip(grad.heads.iter_mut()) {
        let dh = head.backprop(&cache.hidden, g, gh);
        dhidden.iter_mut().zip(dh).for_each(|(a, b)| *a += b);
    }
    match (ddummy, &params.dummy, grad.dummy.as_mut()) {
        (Some(g), Some(head), Some(gh)) => {
            if g.len() != 2 {
                return Err(Error::Shape("dummy head gradient must have 2 entries".into()));
            }
            let dh = head.backprop(&cache.hidden, g, gh);
            dhidden.iter_mut().zip(dh).for_each(|(a, b)| *a += b);
        }
        (Some(_), None, _) => return Err(Error::Shape("dummy gradient for a model without dummy head".into())),
        _ => {}
    }
    let dpre: Vec<f64> = dhidden
        .iter()
        .zip(&cache.pre_activation)
        .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
        .collect();
    let dpooled = params.dense.backprop(&cache.pooled, &dpre, &mut grad.dense);

    let d = params.embed_dim();
    let mut dinput = NumArray::zeros(cache.embedded.shape());
    let mut offset = 0;
    for ((conv, gconv), winners) in params.conv.iter().zip(grad.conv.iter_mut()).zip(&cache.argmax) {
        let span = conv.size * d;
        for (f, &t) in winners.iter().enumerate() {
            let g = dpooled[offset + f];
            if g == 0.0 {
                continue;
            }
            gconv.bias.data_mut()[f] += g;
            let x = &cache.embedded.data()[t * d..t * d + span];
            let gw = &mut gconv.weight.data_mut()[f * span..(f + 1) * span];
            gw.iter_mut().zip(x).for_each(|(a, b)| *a += g * b);
            let w = &conv.weight.data()[f * span..(f + 1) * span];
            let dx = &mut dinput.data_mut()[t * d..t * d + span];
            dx.iter_mut().zip(w).for_each(|(a, b)| *a += g * b);
        }
        offset += winners.len();
    }

    for (p, &tok) in cache.tokens.iter().enumerate() {
        if tok == PAD {
            continue;
        }
        let src = dinput.row(p).to_vec();
        grad.embedding
            .row_mut(tok)
            .iter_mut()
            .zip(src)
            .for_each(|(a, b)| *a += b);
    }
    Ok(Backward {
        params: grad,
        input: dinput,
    })
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Chains `dL/dp` through the softmax: `dL/dz_j = p_j (g_j - Σ_i p_i g_i)`.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(dprobs).map(|(p, g)| p * g).sum();
    probs.iter().zip(dprobs).map(|(p, g)| p * (g - dot)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> Architecture {
        Architecture {
            vocab_size: 20,
            embed_dim: 4,
            filter_sizes: vec![3, 4, 5],
            n_filters: 2,
            hidden: 5,
            task_classes: vec![3, 2],
            dummy_task: true,
        }
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] >= 0.0 && p[1] < 1e-300);
        let p = softmax(&[1.0, 2.0, 3.0]);
        for (a, b) in p.iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let params = LayerParams::zeros(&tiny_arch());
        let f = forward(&params, &[1, 2, 3, 4, 5, 6]).unwrap();
        assert!(f.logits.iter().flatten().all(|&x| x == 0.0));
        assert!(f.dummy_logits.unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn crafted_head_gives_constant_logits() {
        let mut arch = tiny_arch();
        arch.task_classes = vec![2];
        arch.dummy_task = false;
        let mut params = LayerParams::zeros(&arch);
        params.dense.bias.data_mut()[0] = 1.0;
        params.heads[0].weight.data_mut()[..3].copy_from_slice(&[0.5, -1.0, 2.0]);
        params.heads[0].bias.data_mut().copy_from_slice(&[0.25, 0.0, -0.5]);
        let f = forward(&params, &[3, 4, 5]).unwrap();
        assert_eq!(f.logits[0], vec![0.75, -1.0, 1.5]);
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let params = LayerParams::zeros(&tiny_arch());
        assert!(matches!(
            forward(&params, &[1, 99, 2]),
            Err(Error::TokenOutOfRange { index: 99, .. })
        ));
    }

    #[test]
    fn short_sequences_are_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = LayerParams::init(&tiny_arch(), &mut rng);
        let f = forward(&params, &[7]).unwrap();
        assert_eq!(f.cache.tokens, vec![7, 0, 0, 0, 0]);
    }

    #[test]
    fn max_pool_ties_route_to_lowest_index() {
        let mut arch = tiny_arch();
        arch.filter_sizes = vec![1];
        arch.n_filters = 1;
        arch.dummy_task = false;
        arch.task_classes = vec![2];
        let mut params = LayerParams::zeros(&arch);
        params.embedding.row_mut(1).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        params.conv[0].weight.data_mut()[0] = 1.0;
        params.dense.weight.data_mut()[0] = 1.0;
        params.heads[0].weight.data_mut()[0] = 1.0;
        let f = forward(&params, &[2, 1, 3, 1]).unwrap();
        let b = backward(&params, &f.cache, &[vec![1.0, 0.0, 0.0]], None).unwrap();
        let nonzero: Vec<usize> = (0..4).filter(|&p| b.input.row(p).iter().any(|&x| x != 0.0)).collect();
        assert_eq!(nonzero, vec![1]);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = LayerParams::init(&tiny_arch(), &mut rng);
        let f = forward(&params, &[1, 2, 3, 4, 5, 6, 7]).unwrap();
        let b = backward(&params, &f.cache, &[vec![0.0; 4], vec![0.0; 3]], Some(&[0.0, 0.0])).unwrap();
        assert!(b.params.tensors().iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
        assert!(b.input.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = LayerParams::init(&tiny_arch(), &mut rng);
        let f = forward(&params, &[1, 2, 3, 4, 5]).unwrap();
        assert!(backward(&params, &f.cache, &[vec![0.0; 4]], None).is_err());
        assert!(backward(&params, &f.cache, &[vec![0.0; 3], vec![0.0; 3]], None).is_err());
    }

    #[test]
    fn padding_row_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = LayerParams::init(&tiny_arch(), &mut rng);
        let f = forward(&params, &[1, 2]).unwrap();
        let b = backward(
            &params,
            &f.cache,
            &[vec![1.0, -1.0, 0.5, 0.2], vec![0.3, 0.1, -0.4]],
            None,
        )
        .unwrap();
        assert!(b.params.embedding.row(PAD).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = LayerParams::init(&arch, &mut rng);
        let mut buf = Vec::new();
        params.write_binary(&mut buf).unwrap();
        let back = LayerParams::read_binary(&arch, buf.as_slice()).unwrap();
        assert_eq!(back, params);
        let mut other = arch.clone();
        other.hidden = 6;
        assert!(LayerParams::read_binary(&other, buf.as_slice()).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // Objective: a fixed random linear functional of all logits.
        let arch = tiny_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tokens = [3, 7, 1, 9, 12, 4, 4, 18];
        for _ in 0..5 {
            let mut params = LayerParams::init(&arch, &mut rng);
            let coef: Vec<Vec<f64>> = vec![
                (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ];
            let dcoef: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let objective = |p: &LayerParams| {
                let f = forward(p, &tokens).unwrap();
                let heads: f64 = f
                    .logits
                    .iter()
                    .flatten()
                    .zip(coef.iter().flatten())
                    .map(|(a, b)| a * b)
                    .sum();
                let dummy: f64 = f.dummy_logits.unwrap().iter().zip(&dcoef).map(|(a, b)| a * b).sum();
                (heads + dummy, f.cache)
            };
            let (_, cache) = objective(&params);
            let analytic = backward(&params, &cache, &coef, Some(&dcoef)).unwrap().params;
            let h = 1e-5;
            let n_tensors = params.tensors().len();
            for ti in 0..n_tensors {
                for i in 0..params.tensors()[ti].len() {
                    let orig = params.tensors()[ti].data()[i];
                    params.tensors_mut()[ti].data_mut()[i] = orig + h;
                    let (fp, cp) = objective(&params);
                    params.tensors_mut()[ti].data_mut()[i] = orig - h;
                    let (fm, cm) = objective(&params);
                    params.tensors_mut()[ti].data_mut()[i] = orig;
                    if !(cp.same_path(&cache) && cm.same_path(&cache)) {
                        continue;
                    }
                    let numeric = (fp - fm) / (2.0 * h);
                    let a = analytic.tensors()[ti].data()[i];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    assert!(rel < 1e-4, "tensor {ti}[{i}]: {a} vs {numeric}");
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_shift_invariant(z in proptest::collection::vec(-30.0f64..30.0, 1..8), c in -50.0f64..50.0) {
            let a = softmax(&z);
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let b = softmax(&shifted);
            let s: f64 = a.iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(&b) {
                proptest::prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
