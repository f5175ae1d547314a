//! A small pre-norm transformer encoder-decoder.
//!
//! The decoder's final hidden states `h_t` are exposed directly so that the
//! caller can apply a dropout mask before the language-model head. There is
//! no dropout anywhere else in the network.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BOS, EOS};
use crate::tape::{kernels, Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence of length {len} exceeds the position table ({max})")]
    TooLong { len: usize, max: usize },
    #[error("empty input or target sequence")]
    Empty,
    #[error("decoder input must start with <s>")]
    MissingBos,
    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl ModelDims {
    pub fn new(vocab: usize) -> Self {
        ModelDims {
            vocab,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ff: 128,
            max_len: 96,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidDims(m.to_string()));
        if self.vocab < 4 {
            return bad("vocabulary too small");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_len == 0 {
            return bad("zero-sized dimension");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: NormIds,
    attn: AttnIds,
    ln2: NormIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: NormIds,
    self_attn: AttnIds,
    ln2: NormIds,
    cross_attn: AttnIds,
    ln3: NormIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: ParamId,
    pos: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: NormIds,
    decoder: Vec<DecoderLayer>,
    dec_norm: NormIds,
    lm_head: ParamId,
}

/// Probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabDistribution(Vec<f64>);

impl VocabDistribution {
    /// Accepts a vector whose entries lie in `[0, 1]` and sum to 1 within 1e-6.
    pub fn new(p: Vec<f64>) -> Option<Self> {
        let ok = !p.is_empty()
            && p.iter().all(|v| (0.0..=1.0).contains(v))
            && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-6;
        ok.then_some(VocabDistribution(p))
    }

    pub fn from_logits(mut logits: Vec<f64>) -> Self {
        kernels::softmax_in_place(&mut logits);
        VocabDistribution(logits)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> u32 {
        argmax(&self.0)
    }
}

impl AsRef<[f64]> for VocabDistribution {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    dims: ModelDims,
    params: ParamStore,
    layout: Layout,
}

impl Seq2Seq {
    /// Randomly initialized model; weights ~ N(0, 1/fan_in), norms at identity.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = dims.d_model;
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
        };
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        let embed = params.add("embed", normal(dims.vocab, d, 1.0));
        let pos = params.add("pos", normal(dims.max_len, d, 0.5));

        let norm = |params: &mut ParamStore, name: &str| NormIds {
            gain: params.add(format!("{name}.gain"), Array2::ones((1, d))),
            bias: params.add(format!("{name}.bias"), Array2::zeros((1, d))),
        };
        let mut layers_enc = Vec::new();
        let mut layers_dec = Vec::new();
        // Weight tensors are drawn in a fixed order so a seed pins the model.
        let attn = |params: &mut ParamStore, name: &str, normal: &mut dyn FnMut(usize, usize, f64) -> Matrix| AttnIds {
            q: params.add(format!("{name}.q"), normal(d, d, lin(d))),
            k: params.add(format!("{name}.k"), normal(d, d, lin(d))),
            v: params.add(format!("{name}.v"), normal(d, d, lin(d))),
            o: params.add(format!("{name}.o"), normal(d, d, lin(d))),
        };
        let ffn = |params: &mut ParamStore, name: &str, normal: &mut dyn FnMut(usize, usize, f64) -> Matrix| FfnIds {
            w1: params.add(format!("{name}.w1"), normal(d, dims.d_ff, lin(d))),
            b1: params.add(format!("{name}.b1"), Array2::zeros((1, dims.d_ff))),
            w2: params.add(format!("{name}.w2"), normal(dims.d_ff, d, lin(dims.d_ff))),
            b2: params.add(format!("{name}.b2"), Array2::zeros((1, d))),
        };
        for l in 0..dims.n_layers {
            let p = format!("enc.{l}");
            layers_enc.push(EncoderLayer {
                ln1: norm(&mut params, &format!("{p}.ln1")),
                attn: attn(&mut params, &format!("{p}.attn"), &mut normal),
                ln2: norm(&mut params, &format!("{p}.ln2")),
                ffn: ffn(&mut params, &format!("{p}.ffn"), &mut normal),
            });
        }
        let enc_norm = norm(&mut params, "enc.ln");
        for l in 0..dims.n_layers {
            let p = format!("dec.{l}");
            layers_dec.push(DecoderLayer {
                ln1: norm(&mut params, &format!("{p}.ln1")),
                self_attn: attn(&mut params, &format!("{p}.self"), &mut normal),
                ln2: norm(&mut params, &format!("{p}.ln2")),
                cross_attn: attn(&mut params, &format!("{p}.cross"), &mut normal),
                ln3: norm(&mut params, &format!("{p}.ln3")),
                ffn: ffn(&mut params, &format!("{p}.ffn"), &mut normal),
            });
        }
        let dec_norm = norm(&mut params, "dec.ln");
        let lm_head = params.add("lm_head", normal(d, dims.vocab, lin(d)));
        Ok(Seq2Seq {
            dims,
            params,
            layout: Layout {
                embed,
                pos,
                encoder: layers_enc,
                enc_norm,
                decoder: layers_dec,
                dec_norm,
                lm_head,
            },
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn lm_head_id(&self) -> ParamId {
        self.layout.lm_head
    }

    /// The `d_model x vocab` output projection `W`.
    pub fn lm_head_weights(&self) -> &Matrix {
        self.params.get(self.layout.lm_head)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Empty);
        }
        if ids.len() > self.dims.max_len {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max: self.dims.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.dims.vocab) {
            return Err(ModelError::TokenOutOfRange { id, vocab: self.dims.vocab });
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape, ids: &[u32]) -> Var {
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let table = tape.param(self.layout.embed);
        let tok = tape.gather_rows(table, &rows);
        let pos_table = tape.param(self.layout.pos);
        let pos = tape.gather_rows(pos_table, &positions);
        tape.add(tok, pos)
    }

    fn norm(&self, tape: &mut Tape, x: Var, ids: NormIds) -> Var {
        let g = tape.param(ids.gain);
        let b = tape.param(ids.bias);
        tape.layer_norm(x, g, b)
    }

    fn attention(&self, tape: &mut Tape, xq: Var, xkv: Var, ids: AttnIds, causal: bool) -> Var {
        let (wq, wk, wv, wo) = (tape.param(ids.q), tape.param(ids.k), tape.param(ids.v), tape.param(ids.o));
        let q = tape.matmul(xq, wq);
        let k = tape.matmul(xkv, wk);
        let v = tape.matmul(xkv, wv);
        let heads = self.dims.n_heads;
        let dh = self.dims.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh),
                    tape.slice_cols(k, h * dh, dh),
                    tape.slice_cols(v, h * dh, dh),
                )
            };
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, causal);
            outs.push(tape.matmul(attn, vh));
        }
        let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        tape.matmul(joined, wo)
    }

    fn ffn(&self, tape: &mut Tape, x: Var, ids: FfnIds) -> Var {
        let (w1, b1, w2, b2) = (tape.param(ids.w1), tape.param(ids.b1), tape.param(ids.w2), tape.param(ids.b2));
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2);
        tape.add_row(h, b2)
    }

    /// Encoder output for source ids `x`.
    pub fn encode(&self, tape: &mut Tape, x: &[u32]) -> Result<Var, ModelError> {
        self.check_ids(x)?;
        let mut e = self.embed(tape, x);
        for layer in &self.layout.encoder {
            let a = self.norm(tape, e, layer.ln1);
            let a = self.attention(tape, a, a, layer.attn, false);
            e = tape.add(e, a);
            let f = self.norm(tape, e, layer.ln2);
            let f = self.ffn(tape, f, layer.ffn);
            e = tape.add(e, f);
        }
        Ok(self.norm(tape, e, self.layout.enc_norm))
    }

    /// Teacher-forced decoder states: row `t` is `h_t`, computed from the
    /// encoder output and `y_in[..=t]` only.
    pub fn decode(&self, tape: &mut Tape, enc: Var, y_in: &[u32]) -> Result<Var, ModelError> {
        self.check_ids(y_in)?;
        if y_in[0] != BOS {
            return Err(ModelError::MissingBos);
        }
        let mut h = self.embed(tape, y_in);
        for layer in &self.layout.decoder {
            let a = self.norm(tape, h, layer.ln1);
            let a = self.attention(tape, a, a, layer.self_attn, true);
            h = tape.add(h, a);
            let c = self.norm(tape, h, layer.ln2);
            let c = self.attention(tape, c, enc, layer.cross_attn, false);
            h = tape.add(h, c);
            let f = self.norm(tape, h, layer.ln3);
            let f = self.ffn(tape, f, layer.ffn);
            h = tape.add(h, f);
        }
        Ok(self.norm(tape, h, self.layout.dec_norm))
    }

    /// `h_t` for every decoder position (one row each).
    pub fn encode_decode(&self, tape: &mut Tape, x: &[u32], y_in: &[u32]) -> Result<Var, ModelError> {
        let enc = self.encode(tape, x)?;
        self.decode(tape, enc, y_in)
    }

    /// Tape-free convenience wrapper around [`Seq2Seq::encode_decode`].
    pub fn hidden_states(&self, x: &[u32], y_in: &[u32]) -> Result<Matrix, ModelError> {
        let mut tape = Tape::new(&self.params);
        let h = self.encode_decode(&mut tape, x, y_in)?;
        Ok(tape.value(h).to_owned())
    }

    /// `softmax(Wᵀ h)` for a single hidden vector.
    pub fn lm_head(&self, h: &[f64]) -> VocabDistribution {
        let w = self.lm_head_weights();
        let h = ndarray::ArrayView1::from(h);
        VocabDistribution::from_logits(h.dot(w).to_vec())
    }

    /// Greedy autoregressive decoding without dropout. Returns generated ids
    /// (excluding `<s>`), ending with `</s>` unless `max_len` was reached.
    pub fn greedy_decode(&self, x: &[u32], max_len: usize) -> Result<Vec<u32>, ModelError> {
        let mut state = self.start_decoding(x)?;
        let mut out = Vec::new();
        let mut prev = BOS;
        let limit = max_len.min(self.dims.max_len);
        while out.len() < limit {
            let logits = self.step(&mut state, prev);
            let next = argmax(logits.as_slice().expect("contiguous"));
            out.push(next);
            if next == EOS {
                break;
            }
            prev = next;
        }
        Ok(out)
    }

    /// Logits of every step of greedy decoding; used to check that the
    /// cached decoder agrees with the teacher-forced one.
    pub fn incremental_logits(&self, x: &[u32], y_in: &[u32]) -> Result<Matrix, ModelError> {
        self.check_ids(y_in)?;
        let mut state = self.start_decoding(x)?;
        let mut out = Matrix::zeros((y_in.len(), self.dims.vocab));
        for (t, &tok) in y_in.iter().enumerate() {
            out.row_mut(t).assign(&self.step(&mut state, tok));
        }
        Ok(out)
    }

    fn start_decoding(&self, x: &[u32]) -> Result<DecodeState, ModelError> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, x)?;
        let enc = tape.value(enc).to_owned();
        let d = self.dims.d_model;
        let mut cross = Vec::with_capacity(self.layout.decoder.len());
        for layer in &self.layout.decoder {
            let k = enc.dot(self.params.get(layer.cross_attn.k));
            let v = enc.dot(self.params.get(layer.cross_attn.v));
            cross.push((k, v));
        }
        Ok(DecodeState {
            pos: 0,
            self_kv: vec![(Matrix::zeros((0, d)), Matrix::zeros((0, d))); self.layout.decoder.len()],
            cross,
        })
    }

    fn step(&self, state: &mut DecodeState, token: u32) -> Array1<f64> {
        let p = &self.params;
        let row = |id: ParamId, i: usize| p.get(id).slice(s![i..i + 1, ..]).to_owned();
        let mut h = row(self.layout.embed, token as usize) + row(self.layout.pos, state.pos);
        let ln = |x: &Matrix, ids: NormIds| kernels::layer_norm(x.view(), p.get(ids.gain).view(), p.get(ids.bias).view()).0;
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let a = ln(&h, layer.ln1);
            let q = a.dot(p.get(layer.self_attn.q));
            let k = a.dot(p.get(layer.self_attn.k));
            let v = a.dot(p.get(layer.self_attn.v));
            let (ks, vs) = &mut state.self_kv[l];
            ks.push_row(k.row(0)).expect("width matches");
            vs.push_row(v.row(0)).expect("width matches");
            let att = self.cached_attention(&q, ks.view(), vs.view());
            h += &att.dot(p.get(layer.self_attn.o));

            let c = ln(&h, layer.ln2);
            let q = c.dot(p.get(layer.cross_attn.q));
            let (ck, cv) = &state.cross[l];
            let att = self.cached_attention(&q, ck.view(), cv.view());
            h += &att.dot(p.get(layer.cross_attn.o));

            let f = ln(&h, layer.ln3);
            let mut f = f.dot(p.get(layer.ffn.w1)) + p.get(layer.ffn.b1);
            f.mapv_inplace(kernels::gelu);
            h += &(f.dot(p.get(layer.ffn.w2)) + p.get(layer.ffn.b2));
        }
        state.pos += 1;
        let h = ln(&h, self.layout.dec_norm);
        h.dot(self.lm_head_weights()).index_axis_move(Axis(0), 0)
    }

    fn cached_attention(&self, q: &Matrix, k: ArrayView2<f64>, v: ArrayView2<f64>) -> Matrix {
        let heads = self.dims.n_heads;
        let dh = self.dims.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros((1, self.dims.d_model));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()).mapv(|x| x * scale);
            kernels::softmax_rows(&mut scores, false);
            out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        }
        out
    }
}

struct DecodeState {
    pos: usize,
    self_kv: Vec<(Matrix, Matrix)>,
    cross: Vec<(Matrix, Matrix)>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Seq2Seq {
        let dims = ModelDims {
            vocab: 20,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            max_len: 16,
        };
        Seq2Seq::new(dims, 11).unwrap()
    }

    #[test]
    fn one_hidden_vector_per_position() {
        let m = tiny();
        let h = m.hidden_states(&[5, 6, 7], &[BOS, 9, 10, 11]).unwrap();
        assert_eq!(h.dim(), (4, 8));
    }

    #[test]
    fn decoder_is_causal() {
        let m = tiny();
        let a = m.hidden_states(&[5, 6, 7], &[BOS, 9, 10, 11, 12]).unwrap();
        let b = m.hidden_states(&[5, 6, 7], &[BOS, 9, 10, 17, 4]).unwrap();
        // positions 0..=2 only see y[..=2], which is shared
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny();
        let a = m.hidden_states(&[5, 6], &[BOS, 9]).unwrap();
        let b = m.hidden_states(&[5, 6], &[BOS, 9]).unwrap();
        assert_eq!(a, b);
        assert_eq!(Seq2Seq::new(m.dims(), 11).unwrap().params(), m.params());
    }

    #[test]
    fn rejects_bad_ids() {
        let m = tiny();
        assert_eq!(
            m.hidden_states(&[5, 25], &[BOS]).unwrap_err(),
            ModelError::TokenOutOfRange { id: 25, vocab: 20 }
        );
        assert_eq!(m.hidden_states(&[], &[BOS]).unwrap_err(), ModelError::Empty);
        assert_eq!(m.hidden_states(&[5], &[9]).unwrap_err(), ModelError::MissingBos);
        assert!(matches!(m.hidden_states(&[5; 17], &[BOS]), Err(ModelError::TooLong { .. })));
    }

    #[test]
    fn lm_head_properties() {
        let m = tiny();
        let uniform = m.lm_head(&[0.0; 8]);
        assert!(uniform.probs().iter().all(|&p| (p - 1.0 / 20.0).abs() < 1e-15));
        let h = [0.3, -1.0, 0.2, 0.9, -0.4, 0.1, 0.5, -0.7];
        let p = m.lm_head(&h);
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let scores = ndarray::ArrayView1::from(&h[..]).dot(m.lm_head_weights());
        assert_eq!(p.argmax(), argmax(scores.as_slice().unwrap()));
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn cached_decoder_matches_teacher_forcing() {
        let m = tiny();
        let x = [5, 6, 7, 8];
        let y = [BOS, 9, 10, 11, 12, 3];
        let full = m.hidden_states(&x, &y).unwrap().dot(m.lm_head_weights());
        let inc = m.incremental_logits(&x, &y).unwrap();
        for (a, b) in full.iter().zip(inc.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let m = tiny();
        let a = m.greedy_decode(&[5, 6, 7], 10).unwrap();
        assert_eq!(a, m.greedy_decode(&[5, 6, 7], 10).unwrap());
        assert!(a.len() <= 10);
        if let Some(i) = a.iter().position(|&t| t == EOS) {
            assert_eq!(i, a.len() - 1);
        }
    }
}
