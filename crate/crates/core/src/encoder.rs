//! Tag-attentive bidirectional LSTM lyric encoder and the MLP that projects
//! the lyric representation into image-tag space.
//!
//! A lyric is read forwards and backwards. At every step the LSTM output
//! `h_t` may be rescaled by an attention gate driven by the image's tag
//! attention vector `ṽ`:
//!
//! ```text
//! m_t = σ(W_hm h_t + W_vm ṽ)
//! s_t = σ(w_ms · m_t)
//! h̃_t = s_t h_t
//! ```
//!
//! `h̃_t` replaces `h_t` as the recurrent input of the next step while the
//! cell state is left untouched. The lyric representation is the final
//! forward output concatenated with the backward output at the first word.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, ensure_finite_slice, sigmoid, Matrix, Rng};
use crate::params::{prefixed, prefixed_mut, Parameters};
use crate::text::EmbeddingTable;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_i: Matrix,
    pub w_f: Matrix,
    pub w_c: Matrix,
    pub w_o: Matrix,
    pub u_i: Matrix,
    pub u_f: Matrix,
    pub u_c: Matrix,
    pub u_o: Matrix,
    pub b_i: Matrix,
    pub b_f: Matrix,
    pub b_c: Matrix,
    pub b_o: Matrix,
}

impl LstmParams {
    /// Glorot-uniform weights, zero biases, forget bias `+1`.
    pub fn new(hidden: usize, input: usize, rng: &mut Rng) -> Self {
        LstmParams {
            w_i: Matrix::glorot(hidden, input, rng),
            w_f: Matrix::glorot(hidden, input, rng),
            w_c: Matrix::glorot(hidden, input, rng),
            w_o: Matrix::glorot(hidden, input, rng),
            u_i: Matrix::glorot(hidden, hidden, rng),
            u_f: Matrix::glorot(hidden, hidden, rng),
            u_c: Matrix::glorot(hidden, hidden, rng),
            u_o: Matrix::glorot(hidden, hidden, rng),
            b_i: Matrix::zeros(hidden, 1),
            b_f: Matrix::filled(hidden, 1, 1.0),
            b_c: Matrix::zeros(hidden, 1),
            b_o: Matrix::zeros(hidden, 1),
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = Matrix::zeros(hidden, input);
        let u = Matrix::zeros(hidden, hidden);
        let b = Matrix::zeros(hidden, 1);
        LstmParams {
            w_i: w.clone(),
            w_f: w.clone(),
            w_c: w.clone(),
            w_o: w,
            u_i: u.clone(),
            u_f: u.clone(),
            u_c: u.clone(),
            u_o: u,
            b_i: b.clone(),
            b_f: b.clone(),
            b_c: b.clone(),
            b_o: b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_i.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.cols()
    }
}

impl Parameters for LstmParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("w_i".into(), &self.w_i),
            ("w_f".into(), &self.w_f),
            ("w_c".into(), &self.w_c),
            ("w_o".into(), &self.w_o),
            ("u_i".into(), &self.u_i),
            ("u_f".into(), &self.u_f),
            ("u_c".into(), &self.u_c),
            ("u_o".into(), &self.u_o),
            ("b_i".into(), &self.b_i),
            ("b_f".into(), &self.b_f),
            ("b_c".into(), &self.b_c),
            ("b_o".into(), &self.b_o),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("w_i".into(), &mut self.w_i),
            ("w_f".into(), &mut self.w_f),
            ("w_c".into(), &mut self.w_c),
            ("w_o".into(), &mut self.w_o),
            ("u_i".into(), &mut self.u_i),
            ("u_f".into(), &mut self.u_f),
            ("u_c".into(), &mut self.u_c),
            ("u_o".into(), &mut self.u_o),
            ("b_i".into(), &mut self.b_i),
            ("b_f".into(), &mut self.b_f),
            ("b_c".into(), &mut self.b_c),
            ("b_o".into(), &mut self.b_o),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `M x H`
    pub w_hm: Matrix,
    /// `M x E`
    pub w_vm: Matrix,
    /// `1 x M`
    pub w_ms: Matrix,
}

impl AttentionParams {
    pub fn new(attention: usize, hidden: usize, input: usize, rng: &mut Rng) -> Self {
        AttentionParams {
            w_hm: Matrix::glorot(attention, hidden, rng),
            w_vm: Matrix::glorot(attention, input, rng),
            w_ms: Matrix::glorot(1, attention, rng),
        }
    }

    pub fn size(&self) -> usize {
        self.w_hm.rows()
    }
}

impl Parameters for AttentionParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("w_hm".into(), &self.w_hm),
            ("w_vm".into(), &self.w_vm),
            ("w_ms".into(), &self.w_ms),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("w_hm".into(), &mut self.w_hm),
            ("w_vm".into(), &mut self.w_vm),
            ("w_ms".into(), &mut self.w_ms),
        ]
    }
}

/// Activations of one LSTM step, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub(crate) r_prev: Vec<f64>,
    pub(crate) c_prev: Vec<f64>,
    pub(crate) i: Vec<f64>,
    pub(crate) f: Vec<f64>,
    pub(crate) g: Vec<f64>,
    pub(crate) o: Vec<f64>,
    pub(crate) c: Vec<f64>,
    pub(crate) tanh_c: Vec<f64>,
    pub(crate) h: Vec<f64>,
}

fn lstm_step_cached(p: &LstmParams, x: &[f64], r_prev: &[f64], c_prev: &[f64]) -> StepCache {
    let pre = |w: &Matrix, u: &Matrix, b: &Matrix| {
        let mut z = b.data().to_vec();
        w.matvec_acc(x, &mut z);
        u.matvec_acc(r_prev, &mut z);
        z
    };
    let i: Vec<f64> = pre(&p.w_i, &p.u_i, &p.b_i).into_iter().map(sigmoid).collect();
    let f: Vec<f64> = pre(&p.w_f, &p.u_f, &p.b_f).into_iter().map(sigmoid).collect();
    let g: Vec<f64> = pre(&p.w_c, &p.u_c, &p.b_c).into_iter().map(f64::tanh).collect();
    let o: Vec<f64> = pre(&p.w_o, &p.u_o, &p.b_o).into_iter().map(sigmoid).collect();
    let c: Vec<f64> = (0..i.len()).map(|k| i[k] * g[k] + f[k] * c_prev[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h = o.iter().zip(&tanh_c).map(|(a, b)| a * b).collect();
    StepCache {
        r_prev: r_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        i,
        f,
        g,
        o,
        c,
        tanh_c,
        h,
    }
}

/// One LSTM cell update, returning `(h_t, C_t)`.
pub fn lstm_step(
    params: &LstmParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let hdim = params.hidden();
    if x.len() != params.input_dim() || h_prev.len() != hdim || c_prev.len() != hdim {
        return Err(Error::shape(format!(
            "lstm step expects x[{}], h[{hdim}], C[{hdim}]; got x[{}], h[{}], C[{}]",
            params.input_dim(),
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let step = lstm_step_cached(params, x, h_prev, c_prev);
    ensure_finite_slice(&step.c, "lstm cell state")?;
    ensure_finite_slice(&step.h, "lstm output")?;
    Ok((step.h, step.c))
}

#[derive(Debug, Clone)]
pub(crate) struct GateCache {
    pub(crate) m: Vec<f64>,
    pub(crate) s: f64,
}

fn gate_cached(att: &AttentionParams, h: &[f64], v_tilde: &[f64]) -> GateCache {
    let mut z = vec![0.0; att.size()];
    att.w_hm.matvec_acc(h, &mut z);
    att.w_vm.matvec_acc(v_tilde, &mut z);
    let m: Vec<f64> = z.into_iter().map(sigmoid).collect();
    let s = sigmoid(dot(att.w_ms.data(), &m));
    GateCache { m, s }
}

/// Attention gate for one step: returns `(h̃_t, s_t)`.
pub fn attention_gate(att: &AttentionParams, h: &[f64], v_tilde: &[f64]) -> Result<(Vec<f64>, f64)> {
    if h.len() != att.w_hm.cols() || v_tilde.len() != att.w_vm.cols() {
        return Err(Error::shape(format!(
            "attention gate expects h[{}] and ṽ[{}]; got h[{}] and ṽ[{}]",
            att.w_hm.cols(),
            att.w_vm.cols(),
            h.len(),
            v_tilde.len()
        )));
    }
    let gate = gate_cached(att, h, v_tilde);
    let h_tilde: Vec<f64> = h.iter().map(|v| v * gate.s).collect();
    ensure_finite_slice(&h_tilde, "attention gate")?;
    Ok((h_tilde, gate.s))
}

/// Accumulates gradients of one gate; returns `dL/dh`.
fn gate_backward(
    att: &AttentionParams,
    h: &[f64],
    v_tilde: &[f64],
    cache: &GateCache,
    d_h_tilde: &[f64],
    grads: &mut AttentionParams,
) -> Vec<f64> {
    let s = cache.s;
    let mut d_h: Vec<f64> = d_h_tilde.iter().map(|d| d * s).collect();
    let d_s = dot(d_h_tilde, h);
    let d_a = d_s * s * (1.0 - s);
    if d_a != 0.0 {
        for (g, m) in grads.w_ms.data_mut().iter_mut().zip(&cache.m) {
            *g += d_a * m;
        }
        let d_zm: Vec<f64> = att
            .w_ms
            .data()
            .iter()
            .zip(&cache.m)
            .map(|(w, m)| d_a * w * m * (1.0 - m))
            .collect();
        grads.w_hm.add_outer(&d_zm, h);
        grads.w_vm.add_outer(&d_zm, v_tilde);
        att.w_hm.matvec_t_acc(&d_zm, &mut d_h);
    }
    d_h
}

/// Pooling applied over the rows of the tag matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Average,
    Max,
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Average => "average",
            Pooling::Max => "max",
        })
    }
}

/// Pooled embedding `ṽ` of an image's top-K predicted tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TagAttentionVector(pub Vec<f64>);

impl TagAttentionVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Indices of the `k` largest entries, largest first; equal values keep the
/// lower index first.
pub fn top_k_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::Parameter(format!(
            "k must be in 1..={}, got {k}",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Embeds every tag name once (`D x E`).
pub fn embed_tag_names(tag_names: &[String], table: &EmbeddingTable) -> Matrix {
    let rows: Vec<Vec<f64>> = tag_names.iter().map(|n| table.embed_phrase(n)).collect();
    Matrix::from_rows(&rows).unwrap_or_else(|_| Matrix::zeros(0, table.dim()))
}

/// `ṽ` from precomputed tag-name embeddings (one row per tag dimension).
pub fn tag_attention_from_embeddings(
    tags: &[f64],
    k: usize,
    pooling: Pooling,
    tag_embeddings: &Matrix,
) -> Result<TagAttentionVector> {
    if tag_embeddings.rows() != tags.len() {
        return Err(Error::shape(format!(
            "{} tag embeddings for a {}-dim tag vector",
            tag_embeddings.rows(),
            tags.len()
        )));
    }
    let selected = top_k_indices(tags, k)?;
    let dim = tag_embeddings.cols();
    let pooled = match pooling {
        Pooling::Average => {
            let mut out = vec![0.0; dim];
            for &i in &selected {
                for (o, v) in out.iter_mut().zip(tag_embeddings.row(i)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= k as f64);
            out
        }
        Pooling::Max => {
            let mut out = vec![f64::NEG_INFINITY; dim];
            for &i in &selected {
                for (o, v) in out.iter_mut().zip(tag_embeddings.row(i)) {
                    *o = o.max(*v);
                }
            }
            out
        }
    };
    ensure_finite_slice(&pooled, "tag attention vector")?;
    Ok(TagAttentionVector(pooled))
}

/// Selects the top-`k` tags, embeds their names and pools the `k x E` tag
/// matrix column-wise.
pub fn tag_attention_vector(
    tags: &[f64],
    k: usize,
    pooling: Pooling,
    tag_names: &[String],
    table: &EmbeddingTable,
) -> Result<TagAttentionVector> {
    if tag_names.len() != tags.len() {
        return Err(Error::shape(format!(
            "{} tag names for a {}-dim tag vector",
            tag_names.len(),
            tags.len()
        )));
    }
    tag_attention_from_embeddings(tags, k, pooling, &embed_tag_names(tag_names, table))
}

/// Forward activations of one reading direction, in processing order.
#[derive(Debug, Clone)]
pub(crate) struct DirectionCache {
    pub(crate) steps: Vec<StepCache>,
    pub(crate) gates: Vec<Option<GateCache>>,
    /// Recurrent output per processed step (`h̃_t` with attention, else `h_t`).
    pub(crate) outputs: Vec<Vec<f64>>,
}

impl DirectionCache {
    pub(crate) fn final_output(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Runs one LSTM over `rows` taken in `order`.
pub(crate) fn run_direction(
    lstm: &LstmParams,
    att: Option<&AttentionParams>,
    rows: &[&[f64]],
    order: &[usize],
    v_tilde: &[f64],
) -> DirectionCache {
    let hdim = lstm.hidden();
    let mut r = vec![0.0; hdim];
    let mut c = vec![0.0; hdim];
    let mut steps = Vec::with_capacity(order.len());
    let mut gates = Vec::with_capacity(order.len());
    let mut outputs = Vec::with_capacity(order.len());
    for &t in order {
        let step = lstm_step_cached(lstm, rows[t], &r, &c);
        let (out, gate) = match att {
            Some(att) => {
                let gate = gate_cached(att, &step.h, v_tilde);
                (step.h.iter().map(|v| v * gate.s).collect(), Some(gate))
            }
            None => (step.h.clone(), None),
        };
        c = step.c.clone();
        r = out.clone();
        steps.push(step);
        gates.push(gate);
        outputs.push(out);
    }
    DirectionCache {
        steps,
        gates,
        outputs,
    }
}

/// Backpropagation through time for one direction. `d_outputs[k]` is the
/// gradient arriving directly at processed step `k`'s output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_direction(
    lstm: &LstmParams,
    att: Option<&AttentionParams>,
    rows: &[&[f64]],
    order: &[usize],
    v_tilde: &[f64],
    cache: &DirectionCache,
    d_outputs: &[Vec<f64>],
    grads: &mut LstmParams,
    mut att_grads: Option<&mut AttentionParams>,
) {
    let hdim = lstm.hidden();
    let mut d_r_next = vec![0.0; hdim];
    let mut d_c_next = vec![0.0; hdim];
    for k in (0..order.len()).rev() {
        let step = &cache.steps[k];
        let x = rows[order[k]];
        let d_r: Vec<f64> = d_r_next
            .iter()
            .zip(&d_outputs[k])
            .map(|(a, b)| a + b)
            .collect();
        let d_h = match (att, &cache.gates[k], att_grads.as_deref_mut()) {
            (Some(att), Some(gate), Some(ag)) => gate_backward(att, &step.h, v_tilde, gate, &d_r, ag),
            _ => d_r,
        };

        let mut d_zi = vec![0.0; hdim];
        let mut d_zf = vec![0.0; hdim];
        let mut d_zg = vec![0.0; hdim];
        let mut d_zo = vec![0.0; hdim];
        let mut d_c_prev = vec![0.0; hdim];
        for j in 0..hdim {
            let d_o = d_h[j] * step.tanh_c[j];
            let d_c = d_c_next[j] + d_h[j] * step.o[j] * (1.0 - step.tanh_c[j] * step.tanh_c[j]);
            let d_i = d_c * step.g[j];
            let d_g = d_c * step.i[j];
            let d_f = d_c * step.c_prev[j];
            d_c_prev[j] = d_c * step.f[j];
            d_zi[j] = d_i * step.i[j] * (1.0 - step.i[j]);
            d_zf[j] = d_f * step.f[j] * (1.0 - step.f[j]);
            d_zg[j] = d_g * (1.0 - step.g[j] * step.g[j]);
            d_zo[j] = d_o * step.o[j] * (1.0 - step.o[j]);
        }

        let mut d_r_prev = vec![0.0; hdim];
        for (dz, u, gw, gu, gb) in [
            (&d_zi, &lstm.u_i, &mut grads.w_i, &mut grads.u_i, &mut grads.b_i),
            (&d_zf, &lstm.u_f, &mut grads.w_f, &mut grads.u_f, &mut grads.b_f),
            (&d_zg, &lstm.u_c, &mut grads.w_c, &mut grads.u_c, &mut grads.b_c),
            (&d_zo, &lstm.u_o, &mut grads.w_o, &mut grads.u_o, &mut grads.b_o),
        ] {
            gw.add_outer(dz, x);
            gu.add_outer(dz, &step.r_prev);
            gb.add_to_column(dz);
            u.matvec_t_acc(dz, &mut d_r_prev);
        }
        d_r_next = d_r_prev;
        d_c_next = d_c_prev;
    }
}

/// Output nonlinearity of the last MLP layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub w: Matrix,
    /// `out x 1`
    pub b: Matrix,
}

/// Fully connected stack: `tanh` on hidden layers, `output` on the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output: OutputActivation,
}

#[derive(Debug, Clone)]
pub(crate) struct MlpCache {
    /// Input of every layer followed by the final output.
    activations: Vec<Vec<f64>>,
}

impl Mlp {
    /// `sizes` lists every width from input to output.
    pub fn new(sizes: &[usize], output: OutputActivation, rng: &mut Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                w: Matrix::glorot(w[1], w[0], rng),
                b: Matrix::zeros(w[1], 1),
            })
            .collect();
        Mlp { layers, output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.cols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.rows())
    }

    pub(crate) fn forward_cached(&self, input: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut activations = vec![input.to_vec()];
        let last = self.layers.len().saturating_sub(1);
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = layer.b.data().to_vec();
            layer.w.matvec_acc(activations.last().unwrap(), &mut z);
            let a = if li < last {
                z.into_iter().map(f64::tanh).collect()
            } else {
                match self.output {
                    OutputActivation::Sigmoid => z.into_iter().map(sigmoid).collect(),
                    OutputActivation::Identity => z,
                }
            };
            activations.push(a);
        }
        (activations.last().unwrap().clone(), MlpCache { activations })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "mlp expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let (out, _) = self.forward_cached(input);
        ensure_finite_slice(&out, "mlp output")?;
        Ok(out)
    }

    /// Accumulates layer gradients and returns `dL/d input`.
    pub(crate) fn backward(&self, cache: &MlpCache, d_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut d_a = d_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let out = &cache.activations[li + 1];
            let d_z: Vec<f64> = if li < last {
                d_a.iter().zip(out).map(|(d, a)| d * (1.0 - a * a)).collect()
            } else {
                match self.output {
                    OutputActivation::Sigmoid => {
                        d_a.iter().zip(out).map(|(d, a)| d * a * (1.0 - a)).collect()
                    }
                    OutputActivation::Identity => d_a.clone(),
                }
            };
            let input = &cache.activations[li];
            grads.layers[li].w.add_outer(&d_z, input);
            grads.layers[li].b.add_to_column(&d_z);
            let mut d_in = vec![0.0; input.len()];
            self.layers[li].w.matvec_t_acc(&d_z, &mut d_in);
            d_a = d_in;
        }
        d_a
    }
}

impl Parameters for Mlp {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("layer{i}.w"), &l.w), (format!("layer{i}.b"), &l.b)])
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layer{i}.w"), &mut l.w),
                    (format!("layer{i}.b"), &mut l.b),
                ]
            })
            .collect()
    }
}

/// Sizes and switches of the lyric encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub attention_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub output_dim: usize,
    pub attention: bool,
    /// Use one set of attention weights for both directions.
    pub share_attention: bool,
    /// Number of trainable mood rows; `None` disables the mood input.
    pub moods: Option<usize>,
}

impl EncoderConfig {
    pub fn new(embed_dim: usize, output_dim: usize) -> Self {
        EncoderConfig {
            embed_dim,
            hidden: 128,
            attention_dim: 128,
            mlp_hidden: vec![512],
            output_dim,
            attention: false,
            share_attention: false,
            moods: None,
        }
    }

    fn mlp_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![2 * self.hidden + self.moods.map_or(0, |_| self.embed_dim)];
        sizes.extend(&self.mlp_hidden);
        sizes.push(self.output_dim);
        sizes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub att_fwd: Option<AttentionParams>,
    /// `None` while `att_fwd` is set means the backward direction shares
    /// `att_fwd`.
    pub att_bwd: Option<AttentionParams>,
    pub mlp: Mlp,
    /// `n_moods x E`
    pub mood_table: Option<Matrix>,
}

impl EncoderParams {
    pub fn new(config: &EncoderConfig, rng: &mut Rng) -> Self {
        let (e, h, m) = (config.embed_dim, config.hidden, config.attention_dim);
        let fwd = LstmParams::new(h, e, rng);
        let bwd = LstmParams::new(h, e, rng);
        let (att_fwd, att_bwd) = if config.attention {
            let a = AttentionParams::new(m, h, e, rng);
            let b = (!config.share_attention).then(|| AttentionParams::new(m, h, e, rng));
            (Some(a), b)
        } else {
            (None, None)
        };
        let mlp = Mlp::new(&config.mlp_sizes(), OutputActivation::Sigmoid, rng);
        let mood_table = config.moods.map(|n| Matrix::glorot(n, e, rng));
        EncoderParams {
            fwd,
            bwd,
            att_fwd,
            att_bwd,
            mlp,
            mood_table,
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }

    pub fn embed_dim(&self) -> usize {
        self.fwd.input_dim()
    }

    pub fn has_attention(&self) -> bool {
        self.att_fwd.is_some()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    fn backward_attention(&self) -> Option<&AttentionParams> {
        self.att_bwd.as_ref().or(self.att_fwd.as_ref())
    }

    /// Full forward pass: bi-LSTM, optional mood, MLP.
    pub(crate) fn forward_cached(
        &self,
        rows: &[&[f64]],
        v_tilde: Option<&[f64]>,
        mood: Option<usize>,
    ) -> Result<(Vec<f64>, EncoderCache)> {
        let (rep, bilstm) = self.encode_cached(rows, v_tilde)?;
        let input = self.projection_input(&rep, mood)?;
        let (out, mlp) = self.mlp.forward_cached(&input);
        ensure_finite_slice(&out, "projected lyric")?;
        Ok((out, EncoderCache { bilstm, mlp, mood }))
    }

    fn encode_cached(&self, rows: &[&[f64]], v_tilde: Option<&[f64]>) -> Result<(Vec<f64>, BiLstmCache)> {
        if rows.is_empty() {
            return Err(Error::EmptyLyric("cannot encode an empty sequence".into()));
        }
        let e = self.embed_dim();
        if let Some(bad) = rows.iter().find(|r| r.len() != e) {
            return Err(Error::shape(format!("word vector of width {} for a {e}-wide encoder", bad.len())));
        }
        let v = match (self.has_attention(), v_tilde) {
            (true, Some(v)) if v.len() == e => v.to_vec(),
            (true, Some(v)) => {
                return Err(Error::shape(format!("tag attention vector of width {} for a {e}-wide encoder", v.len())))
            }
            (true, None) => {
                return Err(Error::Parameter("attention encoder needs a tag attention vector".into()))
            }
            (false, _) => Vec::new(),
        };
        let n = rows.len();
        let fwd_order: Vec<usize> = (0..n).collect();
        let bwd_order: Vec<usize> = (0..n).rev().collect();
        let fwd = run_direction(&self.fwd, self.att_fwd.as_ref(), rows, &fwd_order, &v);
        let bwd = run_direction(&self.bwd, self.backward_attention(), rows, &bwd_order, &v);
        let mut rep = fwd.final_output().to_vec();
        rep.extend_from_slice(bwd.final_output());
        ensure_finite_slice(&rep, "lyric representation")?;
        Ok((rep, BiLstmCache { fwd, bwd, v_tilde: v }))
    }

    fn projection_input(&self, rep: &[f64], mood: Option<usize>) -> Result<Vec<f64>> {
        if rep.len() != 2 * self.hidden() {
            return Err(Error::shape(format!(
                "lyric representation of width {}, expected {}",
                rep.len(),
                2 * self.hidden()
            )));
        }
        let mut input = rep.to_vec();
        match (&self.mood_table, mood) {
            (Some(table), Some(id)) => {
                if id >= table.rows() {
                    return Err(Error::Index(format!("mood id {id} with {} moods", table.rows())));
                }
                input.extend_from_slice(table.row(id));
            }
            (Some(table), None) => input.extend(std::iter::repeat_n(0.0, table.cols())),
            (None, _) => {}
        }
        Ok(input)
    }

    /// Backpropagates `d_output` (gradient w.r.t. the projected lyric) and
    /// accumulates into `grads`. The word embeddings are inputs only and
    /// receive no gradient.
    pub(crate) fn backward(
        &self,
        rows: &[&[f64]],
        cache: &EncoderCache,
        d_output: &[f64],
        grads: &mut EncoderParams,
    ) {
        let d_input = self.mlp.backward(&cache.mlp, d_output, &mut grads.mlp);
        let h = self.hidden();
        if let (Some(id), Some(g)) = (cache.mood, grads.mood_table.as_mut()) {
            for (gm, d) in g.row_mut(id).iter_mut().zip(&d_input[2 * h..]) {
                *gm += d;
            }
        }
        self.backward_bilstm(rows, &cache.bilstm, &d_input[..h], &d_input[h..2 * h], grads);
    }

    fn backward_bilstm(
        &self,
        rows: &[&[f64]],
        cache: &BiLstmCache,
        d_fwd_final: &[f64],
        d_bwd_final: &[f64],
        grads: &mut EncoderParams,
    ) {
        let n = rows.len();
        let h = self.hidden();
        let fwd_order: Vec<usize> = (0..n).collect();
        let bwd_order: Vec<usize> = (0..n).rev().collect();
        let final_only = |d: &[f64]| {
            let mut v = vec![vec![0.0; h]; n];
            v[n - 1] = d.to_vec();
            v
        };
        let shared = self.att_fwd.is_some() && self.att_bwd.is_none();
        backward_direction(
            &self.fwd,
            self.att_fwd.as_ref(),
            rows,
            &fwd_order,
            &cache.v_tilde,
            &cache.fwd,
            &final_only(d_fwd_final),
            &mut grads.fwd,
            grads.att_fwd.as_mut(),
        );
        let bwd_att_grads = if shared {
            grads.att_fwd.as_mut()
        } else {
            grads.att_bwd.as_mut()
        };
        backward_direction(
            &self.bwd,
            self.backward_attention(),
            rows,
            &bwd_order,
            &cache.v_tilde,
            &cache.bwd,
            &final_only(d_bwd_final),
            &mut grads.bwd,
            bwd_att_grads,
        );
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BiLstmCache {
    pub(crate) fwd: DirectionCache,
    pub(crate) bwd: DirectionCache,
    pub(crate) v_tilde: Vec<f64>,
}

/// Forward activations of the whole encoder for one lyric.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    bilstm: BiLstmCache,
    mlp: MlpCache,
    mood: Option<usize>,
}

impl Parameters for EncoderParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = prefixed("fwd", self.fwd.blocks()).collect();
        out.extend(prefixed("bwd", self.bwd.blocks()));
        if let Some(a) = &self.att_fwd {
            out.extend(prefixed("att_fwd", a.blocks()));
        }
        if let Some(a) = &self.att_bwd {
            out.extend(prefixed("att_bwd", a.blocks()));
        }
        out.extend(prefixed("mlp", self.mlp.blocks()));
        if let Some(m) = &self.mood_table {
            out.push(("mood_table".into(), m));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = prefixed_mut("fwd", self.fwd.blocks_mut()).collect();
        out.extend(prefixed_mut("bwd", self.bwd.blocks_mut()));
        if let Some(a) = &mut self.att_fwd {
            out.extend(prefixed_mut("att_fwd", a.blocks_mut()));
        }
        if let Some(a) = &mut self.att_bwd {
            out.extend(prefixed_mut("att_bwd", a.blocks_mut()));
        }
        out.extend(prefixed_mut("mlp", self.mlp.blocks_mut()));
        if let Some(m) = &mut self.mood_table {
            out.push(("mood_table".into(), m));
        }
        out
    }
}

pub(crate) fn matrix_rows(m: &Matrix) -> Vec<&[f64]> {
    (0..m.rows()).map(|r| m.row(r)).collect()
}

/// Bidirectional encoding `h→_final ∥ h←_1` of an embedded lyric
/// (`len x E`).
pub fn encode_lyric(
    params: &EncoderParams,
    embedded: &Matrix,
    v_tilde: Option<&TagAttentionVector>,
) -> Result<Vec<f64>> {
    let rows = matrix_rows(embedded);
    let (rep, _) = params.encode_cached(&rows, v_tilde.map(TagAttentionVector::as_slice))?;
    Ok(rep)
}

/// Maps a lyric representation (plus optional mood) into tag space.
pub fn project(params: &EncoderParams, lyric_rep: &[f64], mood: Option<usize>) -> Result<Vec<f64>> {
    let input = params.projection_input(lyric_rep, mood)?;
    params.mlp.forward(&input)
}

/// Per-step attention gates `s_t` of each direction, in processing order.
/// Empty when attention is disabled.
pub fn attention_weights(
    params: &EncoderParams,
    embedded: &Matrix,
    v_tilde: &TagAttentionVector,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = matrix_rows(embedded);
    let (_, cache) = params.encode_cached(&rows, Some(v_tilde.as_slice()))?;
    let gates = |d: &DirectionCache| d.gates.iter().flatten().map(|g| g.s).collect();
    Ok((gates(&cache.fwd), gates(&cache.bwd)))
}

/// Gradients of `d_output · projected_lyric` with respect to every encoder
/// parameter, from a fresh forward pass.
pub fn encoder_backward(
    params: &EncoderParams,
    embedded: &Matrix,
    v_tilde: Option<&TagAttentionVector>,
    mood: Option<usize>,
    d_output: &[f64],
) -> Result<EncoderParams> {
    if d_output.len() != params.output_dim() {
        return Err(Error::shape(format!(
            "upstream gradient of width {}, expected {}",
            d_output.len(),
            params.output_dim()
        )));
    }
    let rows = matrix_rows(embedded);
    let (_, cache) = params.forward_cached(&rows, v_tilde.map(TagAttentionVector::as_slice), mood)?;
    let mut grads = params.zeros_like();
    params.backward(&rows, &cache, d_output, &mut grads);
    Ok(grads)
}
