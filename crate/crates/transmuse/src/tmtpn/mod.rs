//! Transformer-based multi-service traffic forecaster.
//!
//! Encoder-decoder architecture with learned linear input embeddings,
//! sinusoidal positional encoding, multi-head attention, post-norm residual
//! blocks, teacher-forced parallel decoding behind a look-ahead mask during
//! training, and step-by-step autoregressive decoding at inference time.

mod checkpoint;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::WindowSample;
use crate::mat::{softmax_rows, Matrix};
use tape::{NodeId, Tape};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("non-finite value in model input")]
    NonFiniteInput,
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("input shape {got:?} does not match config {want:?}")]
    ShapeMismatch {
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("no training samples")]
    NoSamples,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmtpnConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    /// Input window length T.
    pub input_len: usize,
    /// Forecast horizon F.
    pub horizon: usize,
    /// Service count K.
    pub num_services: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TmtpnConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            d_ffn: 128,
            dropout: 0.1,
            input_len: 30,
            horizon: 5,
            num_services: 1,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            seed: 0,
        }
    }
}

impl TmtpnConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail("d_model must be positive and even");
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return fail("d_model must be divisible by num_heads");
        }
        if self.enc_layers == 0
            || self.dec_layers == 0
            || self.d_ffn == 0
            || self.input_len == 0
            || self.horizon == 0
            || self.num_services == 0
            || self.batch_size == 0
            || self.max_epochs == 0
        {
            return fail("all size fields must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return fail("lr must be finite and non-negative");
        }
        Ok(())
    }
}

/// Transformer parameters plus config and the seed state for the next
/// training run's dropout/shuffle streams.
#[derive(Debug, Clone, PartialEq)]
pub struct TmtpnModel {
    pub config: TmtpnConfig,
    names: Vec<String>,
    params: Vec<Matrix>,
    pub rng_state: u64,
}

/// Per-epoch (train_loss, val_loss) pairs plus the index of the best
/// validation epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

fn param_specs(cfg: &TmtpnConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.d_model;
    let k = cfg.num_services;
    let ffn = cfg.d_ffn;
    let mut specs = vec![
        ("embed.w".to_string(), k, d),
        ("embed.b".to_string(), 1, d),
        ("dec_embed.w".to_string(), k, d),
        ("dec_embed.b".to_string(), 1, d),
    ];
    let attn = |prefix: &str, specs: &mut Vec<(String, usize, usize)>| {
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push((format!("{prefix}.{w}"), d, d));
        }
        specs.push((format!("{prefix}.bo"), 1, d));
    };
    let norm = |prefix: &str, specs: &mut Vec<(String, usize, usize)>| {
        specs.push((format!("{prefix}.g"), 1, d));
        specs.push((format!("{prefix}.b"), 1, d));
    };
    let ffn_block = |prefix: &str, specs: &mut Vec<(String, usize, usize)>| {
        specs.push((format!("{prefix}.w1"), d, ffn));
        specs.push((format!("{prefix}.b1"), 1, ffn));
        specs.push((format!("{prefix}.w2"), ffn, d));
        specs.push((format!("{prefix}.b2"), 1, d));
    };
    for i in 0..cfg.enc_layers {
        attn(&format!("enc{i}.attn"), &mut specs);
        norm(&format!("enc{i}.ln1"), &mut specs);
        ffn_block(&format!("enc{i}.ffn"), &mut specs);
        norm(&format!("enc{i}.ln2"), &mut specs);
    }
    for i in 0..cfg.dec_layers {
        attn(&format!("dec{i}.self_attn"), &mut specs);
        norm(&format!("dec{i}.ln1"), &mut specs);
        attn(&format!("dec{i}.cross_attn"), &mut specs);
        norm(&format!("dec{i}.ln2"), &mut specs);
        ffn_block(&format!("dec{i}.ffn"), &mut specs);
        norm(&format!("dec{i}.ln3"), &mut specs);
    }
    specs.push(("head.w".to_string(), d, k));
    specs.push(("head.b".to_string(), 1, k));
    specs
}

impl TmtpnModel {
    /// Seeded Xavier-uniform initialization; layer-norm gains start at 1 and
    /// all biases at 0.
    pub fn new(config: TmtpnConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, rows, cols) in param_specs(&config) {
            let last = name.rsplit('.').next().unwrap_or("");
            let m = if last == "g" {
                Matrix::from_vec(rows, cols, vec![1.0; rows * cols])
            } else if last.starts_with('b') {
                Matrix::zeros(rows, cols)
            } else {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Matrix::from_vec(rows, cols, data)
            };
            names.push(name);
            params.push(m);
        }
        let rng_state = config.seed;
        Ok(Self {
            config,
            names,
            params,
            rng_state,
        })
    }

    pub fn from_parts(
        config: TmtpnConfig,
        named: Vec<(String, Matrix)>,
        rng_state: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != named.len() {
            return Err(ModelError::Corrupt(format!(
                "expected {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((name, rows, cols), (got_name, m)) in specs.into_iter().zip(named) {
            if name != got_name || m.rows() != rows || m.cols() != cols {
                return Err(ModelError::Corrupt(format!(
                    "tensor {got_name} ({}x{}) does not match expected {name} ({rows}x{cols})",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(ModelError::Corrupt(format!("tensor {name} is non-finite")));
            }
            names.push(name);
            params.push(m);
        }
        Ok(Self {
            config,
            names,
            params,
            rng_state,
        })
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.params.iter())
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|m| m.data().len()).sum()
    }

    fn index(&self) -> HashMap<&str, usize> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect()
    }
}

/// Sinusoidal positional encoding: entry `(pos, 2i)` is
/// `sin(pos / 10000^(2i/d_model))` and `(pos, 2i+1)` the matching cosine.
pub fn positional_encoding(length: usize, d_model: usize) -> Result<Matrix, ModelError> {
    if length == 0 {
        return Err(ModelError::Config("length must be at least 1".into()));
    }
    if d_model == 0 || d_model % 2 != 0 {
        return Err(ModelError::Config("d_model must be positive and even".into()));
    }
    let mut pe = Matrix::zeros(length, d_model);
    for pos in 0..length {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe[(pos, 2 * i)] = angle.sin();
            pe[(pos, 2 * i + 1)] = angle.cos();
        }
    }
    Ok(pe)
}

/// Additive look-ahead mask: `-inf` strictly above the diagonal, 0 elsewhere.
pub fn look_ahead_mask(f: usize) -> Matrix {
    let mut m = Matrix::zeros(f, f);
    for i in 0..f {
        for j in (i + 1)..f {
            m[(i, j)] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Plain scaled dot-product attention:
/// `softmax(Q K^T / sqrt(d_k) + mask) V`, softmax row-wise.
pub fn scaled_dot_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&Matrix>,
) -> Result<Matrix, ModelError> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(ModelError::ShapeMismatch {
            got: (k.rows(), k.cols()),
            want: (v.rows(), q.cols()),
        });
    }
    let mut scores = q.matmul_transb(k).scale(1.0 / (q.cols() as f64).sqrt());
    if let Some(m) = mask {
        if m.rows() != scores.rows() || m.cols() != scores.cols() {
            return Err(ModelError::ShapeMismatch {
                got: (m.rows(), m.cols()),
                want: (scores.rows(), scores.cols()),
            });
        }
        scores = scores.add(m);
    }
    Ok(softmax_rows(&scores).matmul(v))
}

/// Plain multi-head attention over named projection weights. Heads are
/// column slices of the full projections; outputs are concatenated and
/// projected back to `d_model`.
pub fn multi_head_attention(
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    wo: &Matrix,
    bo: &Matrix,
    q_in: &Matrix,
    k_in: &Matrix,
    v_in: &Matrix,
    mask: Option<&Matrix>,
    num_heads: usize,
) -> Result<Matrix, ModelError> {
    let d_model = wq.cols();
    if num_heads == 0 || d_model % num_heads != 0 {
        return Err(ModelError::Config(
            "d_model must be divisible by num_heads".into(),
        ));
    }
    let dk = d_model / num_heads;
    let q = q_in.matmul(wq);
    let k = k_in.matmul(wk);
    let v = v_in.matmul(wv);
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let cols: Vec<usize> = (h * dk..(h + 1) * dk).collect();
        heads.push(scaled_dot_attention(
            &q.select_cols(&cols),
            &k.select_cols(&cols),
            &v.select_cols(&cols),
            mask,
        )?);
    }
    let rows = q_in.rows();
    let mut cat = Matrix::zeros(rows, d_model);
    for (h, head) in heads.iter().enumerate() {
        for i in 0..rows {
            for j in 0..dk {
                cat[(i, h * dk + j)] = head[(i, j)];
            }
        }
    }
    let mut out = cat.matmul(wo);
    for i in 0..rows {
        for j in 0..d_model {
            out[(i, j)] += bo[(0, j)];
        }
    }
    Ok(out)
}

/// Forecast that repeats the last observed row for every future step.
pub fn persistence_baseline(x: &Matrix, f: usize) -> Matrix {
    let last = x.row(x.rows() - 1).to_vec();
    Matrix::from_rows(&vec![last; f])
}

// ---------------------------------------------------------------------------
// Tape-based forward pass.

struct Graph<'m> {
    tape: Tape,
    ids: Vec<NodeId>,
    index: HashMap<&'m str, usize>,
    cfg: &'m TmtpnConfig,
    dropout: Option<ChaCha8Rng>,
}

impl<'m> Graph<'m> {
    fn new(model: &'m TmtpnModel, trainable: bool, dropout_rng: Option<ChaCha8Rng>) -> Self {
        let mut tape = Tape::new();
        let ids = model
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Self {
            tape,
            ids,
            index: model.index(),
            cfg: &model.config,
            dropout: dropout_rng,
        }
    }

    fn p(&self, name: &str) -> NodeId {
        self.ids[*self.index.get(name).expect("known parameter name")]
    }

    fn dropout(&mut self, x: NodeId) -> NodeId {
        let p = self.cfg.dropout;
        let Some(rng) = self.dropout.as_mut() else {
            return x;
        };
        if p == 0.0 {
            return x;
        }
        let v = self.tape.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        let keep = 1.0 / (1.0 - p);
        let data = (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = self.tape.constant(Matrix::from_vec(rows, cols, data));
        self.tape.mul_elem(x, mask)
    }

    fn mha(
        &mut self,
        prefix: &str,
        q_in: NodeId,
        k_in: NodeId,
        v_in: NodeId,
        mask: Option<NodeId>,
    ) -> NodeId {
        let (d, heads) = (self.cfg.d_model, self.cfg.num_heads);
        let dk = d / heads;
        let q = {
            let w = self.p(&format!("{prefix}.wq"));
            self.tape.matmul(q_in, w)
        };
        let k = {
            let w = self.p(&format!("{prefix}.wk"));
            self.tape.matmul(k_in, w)
        };
        let v = {
            let w = self.p(&format!("{prefix}.wv"));
            self.tape.matmul(v_in, w)
        };
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dk, dk);
            let kh = self.tape.slice_cols(k, h * dk, dk);
            let vh = self.tape.slice_cols(v, h * dk, dk);
            let mut scores = self.tape.matmul_transb(qh, kh);
            scores = self.tape.scale(scores, 1.0 / (dk as f64).sqrt());
            if let Some(m) = mask {
                scores = self.tape.add(scores, m);
            }
            let att = self.tape.softmax_rows(scores);
            parts.push(self.tape.matmul(att, vh));
        }
        let cat = self.tape.concat_cols(&parts);
        let wo = self.p(&format!("{prefix}.wo"));
        let bo = self.p(&format!("{prefix}.bo"));
        let proj = self.tape.matmul(cat, wo);
        self.tape.add_bias(proj, bo)
    }

    fn add_norm(&mut self, residual: NodeId, sublayer: NodeId, ln_prefix: &str) -> NodeId {
        let dropped = self.dropout(sublayer);
        let sum = self.tape.add(residual, dropped);
        let g = self.p(&format!("{ln_prefix}.g"));
        let b = self.p(&format!("{ln_prefix}.b"));
        self.tape.layer_norm(sum, g, b)
    }

    fn ffn(&mut self, prefix: &str, x: NodeId) -> NodeId {
        let w1 = self.p(&format!("{prefix}.w1"));
        let b1 = self.p(&format!("{prefix}.b1"));
        let w2 = self.p(&format!("{prefix}.w2"));
        let b2 = self.p(&format!("{prefix}.b2"));
        let h = self.tape.matmul(x, w1);
        let h = self.tape.add_bias(h, b1);
        let h = self.tape.relu(h);
        let h = self.tape.matmul(h, w2);
        self.tape.add_bias(h, b2)
    }

    fn embed(&mut self, prefix: &str, x: NodeId, len: usize) -> NodeId {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let e = self.tape.matmul(x, w);
        let e = self.tape.add_bias(e, b);
        let pe = positional_encoding(len, self.cfg.d_model).expect("validated config");
        let pe = self.tape.constant(pe);
        self.tape.add(e, pe)
    }

    /// Full encoder-decoder pass; `dec_in` is the (already shifted) decoder
    /// input of `f_len` rows.
    fn forward(&mut self, x: NodeId, dec_in: NodeId, t_len: usize, f_len: usize) -> NodeId {
        let mut enc = self.embed("embed", x, t_len);
        for i in 0..self.cfg.enc_layers {
            let attn = self.mha(&format!("enc{i}.attn"), enc, enc, enc, None);
            enc = self.add_norm(enc, attn, &format!("enc{i}.ln1"));
            let ff = self.ffn(&format!("enc{i}.ffn"), enc);
            enc = self.add_norm(enc, ff, &format!("enc{i}.ln2"));
        }
        let mask = self.tape.constant(look_ahead_mask(f_len));
        let mut dec = self.embed("dec_embed", dec_in, f_len);
        for i in 0..self.cfg.dec_layers {
            let attn = self.mha(&format!("dec{i}.self_attn"), dec, dec, dec, Some(mask));
            dec = self.add_norm(dec, attn, &format!("dec{i}.ln1"));
            let cross = self.mha(&format!("dec{i}.cross_attn"), dec, enc, enc, None);
            dec = self.add_norm(dec, cross, &format!("dec{i}.ln2"));
            let ff = self.ffn(&format!("dec{i}.ffn"), dec);
            dec = self.add_norm(dec, ff, &format!("dec{i}.ln3"));
        }
        let w = self.p("head.w");
        let b = self.p("head.b");
        let out = self.tape.matmul(dec, w);
        self.tape.add_bias(out, b)
    }
}

fn shifted_decoder_input(y: &Matrix) -> Matrix {
    let mut dec = Matrix::zeros(y.rows(), y.cols());
    for i in 1..y.rows() {
        for j in 0..y.cols() {
            dec[(i, j)] = y[(i - 1, j)];
        }
    }
    dec
}

fn check_input(model: &TmtpnModel, x: &Matrix) -> Result<(), ModelError> {
    if x.rows() != model.config.input_len || x.cols() != model.config.num_services {
        return Err(ModelError::ShapeMismatch {
            got: (x.rows(), x.cols()),
            want: (model.config.input_len, model.config.num_services),
        });
    }
    if !x.is_finite() {
        return Err(ModelError::NonFiniteInput);
    }
    Ok(())
}

/// Teacher-forced forward pass: all `F` positions in one pass with the
/// shifted ground truth `[0, y_1, ..., y_{F-1}]` as decoder input. Dropout
/// is disabled.
pub fn forward_train(model: &TmtpnModel, x: &Matrix, y: &Matrix) -> Result<Matrix, ModelError> {
    check_input(model, x)?;
    if y.rows() != model.config.horizon || y.cols() != model.config.num_services {
        return Err(ModelError::ShapeMismatch {
            got: (y.rows(), y.cols()),
            want: (model.config.horizon, model.config.num_services),
        });
    }
    if !y.is_finite() {
        return Err(ModelError::NonFiniteInput);
    }
    let mut graph = Graph::new(model, false, None);
    let xid = graph.tape.constant(x.clone());
    let did = graph.tape.constant(shifted_decoder_input(y));
    let out = graph.forward(xid, did, x.rows(), y.rows());
    Ok(graph.tape.value(out).clone())
}

/// Autoregressive forecast: the decoder input starts as a zero row and each
/// step appends the newest prediction, for `F` iterations.
pub fn forecast(model: &TmtpnModel, x: &Matrix) -> Result<Matrix, ModelError> {
    check_input(model, x)?;
    let f = model.config.horizon;
    let k = model.config.num_services;
    let mut dec_rows: Vec<Vec<f64>> = vec![vec![0.0; k]];
    let mut preds: Vec<Vec<f64>> = Vec::with_capacity(f);
    for step in 0..f {
        let mut graph = Graph::new(model, false, None);
        let xid = graph.tape.constant(x.clone());
        let did = graph.tape.constant(Matrix::from_rows(&dec_rows));
        let out = graph.forward(xid, did, x.rows(), step + 1);
        let out = graph.tape.value(out);
        let newest = out.row(step).to_vec();
        if newest.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput);
        }
        preds.push(newest.clone());
        dec_rows.push(newest);
    }
    Ok(Matrix::from_rows(&preds))
}

/// Minimize teacher-forced MSE over shuffled mini-batches with Adam.
/// Deterministic given the config seed; the returned model carries the
/// parameters of the best validation epoch.
pub fn train(
    model: &TmtpnModel,
    train_samples: &[WindowSample],
    val_samples: &[WindowSample],
) -> Result<(TmtpnModel, TrainLog), ModelError> {
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(ModelError::NoSamples);
    }
    let cfg = model.config.clone();
    let mut current = model.clone();

    // Adam state.
    let mut m: Vec<Matrix> = current
        .params
        .iter()
        .map(|p| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    let mut v = m.clone();
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut step = 0usize;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(current.rng_state ^ 0x5351_8A5F_0E7C_1D2B);
    let mut dropout_seed = current.rng_state ^ 0xA24B_1F60_93C7_55ED;

    let mut log = TrainLog {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params = current.params.clone();

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Matrix> = current
                .params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect();
            let scale = 1.0 / batch.len() as f64;
            for &si in batch {
                let sample = &train_samples[si];
                let dropout_rng = if cfg.dropout > 0.0 {
                    dropout_seed = dropout_seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
                    Some(ChaCha8Rng::seed_from_u64(dropout_seed))
                } else {
                    None
                };
                let mut graph = Graph::new(&current, true, dropout_rng);
                let xid = graph.tape.constant(sample.input.clone());
                let did = graph
                    .tape
                    .constant(shifted_decoder_input(&sample.target));
                let out = graph.forward(xid, did, sample.input.rows(), sample.target.rows());
                let tid = graph.tape.constant(sample.target.clone());
                let loss = graph.tape.mse_loss(out, tid);
                let loss_val = graph.tape.value(loss)[(0, 0)];
                if !loss_val.is_finite() {
                    return Err(ModelError::Diverged { epoch });
                }
                epoch_loss += loss_val;
                graph.tape.backward(loss);
                for (pi, g) in grads.iter_mut().enumerate() {
                    if let Some(pg) = graph.tape.grad(graph.ids[pi]) {
                        for (gv, pv) in g.data_mut().iter_mut().zip(pg.data()) {
                            *gv += pv * scale;
                        }
                    }
                }
            }
            // Adam update.
            step += 1;
            let bc1 = 1.0 - beta1f(beta1, step);
            let bc2 = 1.0 - beta1f(beta2, step);
            for pi in 0..current.params.len() {
                let g = &grads[pi];
                let mp = m[pi].data_mut();
                let vp = v[pi].data_mut();
                let pp = current.params[pi].data_mut();
                for j in 0..g.data().len() {
                    let gj = g.data()[j];
                    mp[j] = beta1 * mp[j] + (1.0 - beta1) * gj;
                    vp[j] = beta2 * vp[j] + (1.0 - beta2) * gj * gj;
                    let mhat = mp[j] / bc1;
                    let vhat = vp[j] / bc2;
                    pp[j] -= cfg.lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        let train_loss = epoch_loss / train_samples.len() as f64;
        let val_loss = mean_mse(&current, val_samples)?;
        if !val_loss.is_finite() {
            return Err(ModelError::Diverged { epoch });
        }
        log.train_loss.push(train_loss);
        log.val_loss.push(val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            log.best_epoch = epoch;
            best_params = current.params.clone();
        }
    }
    current.params = best_params;
    current.rng_state = current.rng_state.wrapping_add(cfg.max_epochs as u64);
    Ok((current, log))
}

fn beta1f(beta: f64, step: usize) -> f64 {
    beta.powi(step as i32)
}

/// Mean teacher-forced MSE over a sample set, dropout disabled.
pub fn mean_mse(model: &TmtpnModel, samples: &[WindowSample]) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::NoSamples);
    }
    let mut total = 0.0;
    for s in samples {
        let pred = forward_train(model, &s.input, &s.target)?;
        let n = (pred.rows() * pred.cols()) as f64;
        total += pred
            .data()
            .iter()
            .zip(s.target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
    }
    Ok(total / samples.len() as f64)
}

/// Analytic parameter gradients of the training loss for one sample, keyed
/// by parameter name. Used by the finite-difference check.
pub fn loss_and_gradients(
    model: &TmtpnModel,
    x: &Matrix,
    y: &Matrix,
) -> Result<(f64, Vec<(String, Matrix)>), ModelError> {
    check_input(model, x)?;
    let mut graph = Graph::new(model, true, None);
    let xid = graph.tape.constant(x.clone());
    let did = graph.tape.constant(shifted_decoder_input(y));
    let out = graph.forward(xid, did, x.rows(), y.rows());
    let tid = graph.tape.constant(y.clone());
    let loss = graph.tape.mse_loss(out, tid);
    let loss_val = graph.tape.value(loss)[(0, 0)];
    graph.tape.backward(loss);
    let grads = model
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let g = graph
                .tape
                .grad(graph.ids[i])
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(model.params[i].rows(), model.params[i].cols()));
            (n.clone(), g)
        })
        .collect();
    Ok((loss_val, grads))
}

/// Loss for a (possibly perturbed) copy of the parameters; the probe for
/// central finite differences.
pub fn loss_with_params(
    model: &TmtpnModel,
    params: &[(String, Matrix)],
    x: &Matrix,
    y: &Matrix,
) -> Result<f64, ModelError> {
    let probe = TmtpnModel::from_parts(model.config.clone(), params.to_vec(), model.rng_state)?;
    let pred = forward_train(&probe, x, y)?;
    let n = (pred.rows() * pred.cols()) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TmtpnConfig {
        TmtpnConfig {
            d_model: 8,
            num_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_ffn: 16,
            dropout: 0.0,
            input_len: 4,
            horizon: 2,
            num_services: 3,
            lr: 1e-3,
            batch_size: 4,
            max_epochs: 3,
            seed: 42,
        }
    }

    fn sample_xy(cfg: &TmtpnConfig, offset: f64) -> (Matrix, Matrix) {
        let x = Matrix::from_vec(
            cfg.input_len,
            cfg.num_services,
            (0..cfg.input_len * cfg.num_services)
                .map(|i| ((i as f64 + offset) * 0.7).sin() * 0.5 + 0.5)
                .collect(),
        );
        let y = Matrix::from_vec(
            cfg.horizon,
            cfg.num_services,
            (0..cfg.horizon * cfg.num_services)
                .map(|i| ((i as f64 + offset) * 0.3).cos() * 0.5 + 0.5)
                .collect(),
        );
        (x, y)
    }

    #[test]
    fn positional_encoding_hand_values() {
        let pe = positional_encoding(3, 4).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe[(1, 0)] - 1f64.sin()).abs() < 1e-12);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(3, 5).is_err());
    }

    #[test]
    fn look_ahead_mask_shape_and_entries() {
        assert_eq!(look_ahead_mask(1).data(), &[0.0]);
        let m = look_ahead_mask(2);
        assert_eq!(m[(0, 0)], 0.0);
        assert_eq!(m[(0, 1)], f64::NEG_INFINITY);
        assert_eq!(m[(1, 0)], 0.0);
        assert_eq!(m[(1, 1)], 0.0);
    }

    #[test]
    fn attention_uniform_scores_average_values() {
        // Zero queries -> equal scores -> each output row is the mean of V.
        let q = Matrix::zeros(2, 2);
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let v = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 3.0], vec![3.0, 3.0]]);
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        for i in 0..2 {
            assert!((out[(i, 0)] - 2.0).abs() < 1e-12);
            assert!((out[(i, 1)] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let q = Matrix::from_rows(&[vec![0.2, -1.0], vec![2.0, 0.5]]);
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        // V's rows sum to 1, so any convex combination does too.
        for i in 0..2 {
            let sum: f64 = out.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(out.row(i).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn attention_delta_mask_selects_self() {
        // Mask away everything except the diagonal: output == V.
        let n = 3;
        let q = Matrix::from_rows(&[vec![0.5, 0.1], vec![0.9, 0.2], vec![0.1, 0.8]]);
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]);
        let mut mask = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    mask[(i, j)] = f64::NEG_INFINITY;
                }
            }
        }
        let out = scaled_dot_attention(&q, &q, &v, Some(&mask)).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_single_head_equals_plain_attention_with_projections() {
        let cfg = tiny_config();
        let model = TmtpnModel::new(TmtpnConfig {
            num_heads: 1,
            ..cfg
        })
        .unwrap();
        let idx = model.index();
        let get = |n: &str| &model.params[idx[n]];
        let x = Matrix::from_rows(&[vec![0.1; 8], vec![0.5; 8]]);
        let mha = multi_head_attention(
            get("enc0.attn.wq"),
            get("enc0.attn.wk"),
            get("enc0.attn.wv"),
            get("enc0.attn.wo"),
            get("enc0.attn.bo"),
            &x,
            &x,
            &x,
            None,
            1,
        )
        .unwrap();
        let q = x.matmul(get("enc0.attn.wq"));
        let k = x.matmul(get("enc0.attn.wk"));
        let v = x.matmul(get("enc0.attn.wv"));
        let plain = scaled_dot_attention(&q, &k, &v, None).unwrap();
        let mut expect = plain.matmul(get("enc0.attn.wo"));
        for i in 0..expect.rows() {
            for j in 0..expect.cols() {
                expect[(i, j)] += get("enc0.attn.bo")[(0, j)];
            }
        }
        for (a, b) in mha.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_zero_values_give_bias_only_output() {
        let cfg = tiny_config();
        let model = TmtpnModel::new(cfg).unwrap();
        let idx = model.index();
        let get = |n: &str| &model.params[idx[n]];
        let x = Matrix::from_rows(&[vec![0.3; 8], vec![0.7; 8]]);
        let zeros = Matrix::zeros(2, 8);
        let out = multi_head_attention(
            get("enc0.attn.wq"),
            get("enc0.attn.wk"),
            get("enc0.attn.wv"),
            get("enc0.attn.wo"),
            get("enc0.attn.bo"),
            &x,
            &x,
            &zeros,
            None,
            2,
        )
        .unwrap();
        for i in 0..2 {
            for j in 0..8 {
                assert!((out[(i, j)] - get("enc0.attn.bo")[(0, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_train_shape_and_determinism() {
        let cfg = tiny_config();
        let model = TmtpnModel::new(cfg.clone()).unwrap();
        let (x, y) = sample_xy(&cfg, 0.0);
        let a = forward_train(&model, &x, &y).unwrap();
        let b = forward_train(&model, &x, &y).unwrap();
        assert_eq!(a.rows(), cfg.horizon);
        assert_eq!(a.cols(), cfg.num_services);
        assert_eq!(a, b);
    }

    #[test]
    fn forward_train_rejects_bad_shapes_and_non_finite() {
        let cfg = tiny_config();
        let model = TmtpnModel::new(cfg.clone()).unwrap();
        let (x, y) = sample_xy(&cfg, 0.0);
        let bad = Matrix::zeros(2, 2);
        assert!(forward_train(&model, &bad, &y).is_err());
        let mut nan_x = x.clone();
        nan_x.data_mut()[0] = f64::NAN;
        assert!(matches!(
            forward_train(&model, &nan_x, &y),
            Err(ModelError::NonFiniteInput)
        ));
        assert!(forward_train(&model, &x, &y).is_ok());
    }

    #[test]
    fn causality_of_masked_decoder() {
        let cfg = TmtpnConfig {
            horizon: 4,
            ..tiny_config()
        };
        let model = TmtpnModel::new(cfg.clone()).unwrap();
        let (x, y) = sample_xy(&cfg, 1.0);
        let base = forward_train(&model, &x, &y).unwrap();
        for t in 0..cfg.horizon {
            let mut perturbed = y.clone();
            for i in t..cfg.horizon {
                for j in 0..cfg.num_services {
                    perturbed[(i, j)] += 3.7 + i as f64;
                }
            }
            let out = forward_train(&model, &x, &perturbed).unwrap();
            for i in 0..=t.min(cfg.horizon - 1) {
                for j in 0..cfg.num_services {
                    assert!(
                        (out[(i, j)] - base[(i, j)]).abs() < 1e-9,
                        "position {i} changed when perturbing >= {t}"
                    );
                }
            }
        }
    }

    #[test]
    fn forecast_single_step_matches_forward_train() {
        let cfg = TmtpnConfig {
            horizon: 1,
            ..tiny_config()
        };
        let model = TmtpnModel::new(cfg.clone()).unwrap();
        let (x, _) = sample_xy(&cfg, 2.0);
        let y_any = Matrix::zeros(1, cfg.num_services);
        let tf = forward_train(&model, &x, &y_any).unwrap();
        let ar = forecast(&model, &x).unwrap();
        for (a, b) in tf.data().iter().zip(ar.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forecast_outputs_finite() {
        let cfg = tiny_config();
        let model = TmtpnModel::new(cfg.clone()).unwrap();
        let (x, _) = sample_xy(&cfg, 3.0);
        let out = forecast(&model, &x).unwrap();
        assert!(out.is_finite());
        assert_eq!((out.rows(), out.cols()), (cfg.horizon, cfg.num_services));
    }

    #[test]
    fn persistence_baseline_rules() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let p = persistence_baseline(&x, 3);
        for i in 0..3 {
            assert_eq!(p.row(i), &[3.0, 4.0]);
        }
        // On a ramp of slope s, MAE over F steps is s * (F+1) / 2.
        let s = 0.5;
        let f = 4;
        let ramp = Matrix::from_rows(&[vec![0.0], vec![s], vec![2.0 * s]]);
        let pred = persistence_baseline(&ramp, f);
        let truth =
            Matrix::from_rows(&(1..=f).map(|j| vec![2.0 * s + j as f64 * s]).collect::<Vec<_>>());
        let mae = crate::metrics::mae(&truth, &pred).unwrap();
        assert!((mae - s * (f as f64 + 1.0) / 2.0).abs() < 1e-12);
    }

    fn make_samples(cfg: &TmtpnConfig, count: usize) -> Vec<WindowSample> {
        (0..count)
            .map(|i| {
                let (input, target) = sample_xy(cfg, i as f64 * 0.37);
                WindowSample {
                    input,
                    target,
                    origin_index: i,
                }
            })
            .collect()
    }

    #[test]
    fn train_is_deterministic_and_zero_lr_is_inert() {
        let cfg = tiny_config();
        let model = TmtpnModel::new(cfg.clone()).unwrap();
        let samples = make_samples(&cfg, 8);
        let (m1, log1) = train(&model, &samples[..6], &samples[6..]).unwrap();
        let (m2, log2) = train(&model, &samples[..6], &samples[6..]).unwrap();
        assert_eq!(log1, log2);
        assert_eq!(m1.params, m2.params);

        let frozen = TmtpnModel::new(TmtpnConfig { lr: 0.0, ..cfg }).unwrap();
        let (after, log) = train(&frozen, &samples[..6], &samples[6..]).unwrap();
        assert_eq!(after.params, frozen.params);
        assert!(log
            .train_loss
            .windows(2)
            .all(|w| (w[0] - w[1]).abs() < 1e-15));
    }

    #[test]
    fn train_reduces_loss_on_learnable_data() {
        let cfg = TmtpnConfig {
            lr: 1e-2,
            max_epochs: 10,
            ..tiny_config()
        };
        let model = TmtpnModel::new(cfg.clone()).unwrap();
        // Learnable task: target is a fixed affine function of nothing —
        // constant targets are the easiest possible regression.
        let samples: Vec<WindowSample> = (0..10)
            .map(|i| {
                let (input, _) = sample_xy(&cfg, i as f64);
                let target = Matrix::from_vec(
                    cfg.horizon,
                    cfg.num_services,
                    vec![0.25; cfg.horizon * cfg.num_services],
                );
                WindowSample {
                    input,
                    target,
                    origin_index: i,
                }
            })
            .collect();
        let (trained, log) = train(&model, &samples[..8], &samples[8..]).unwrap();
        assert!(log.val_loss[log.best_epoch] < log.val_loss[0] * 0.5);
        assert!(trained.params.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.num_heads = 3;
        assert!(TmtpnModel::new(cfg).is_err());
        let mut cfg = tiny_config();
        cfg.dropout = 1.0;
        assert!(TmtpnModel::new(cfg).is_err());
        let mut cfg = tiny_config();
        cfg.d_model = 7;
        assert!(TmtpnModel::new(cfg).is_err());
    }
}
