//! Tape-graph builders for the forward pass. The same code runs in f32 for
//! training and f64 for gradient checks.

use ndarray::Array2;

use super::params::{ArchConfig, DecoderParams, LstmParams, ModelParams, CONV_STRIDES};
use super::ModelError;
use framequal_tape::{Scalar, Tape, Var};

const LN_EPS: f64 = 1e-5;
/// Sigmoid outputs are clamped to [SQUASH_CLAMP, 1 - SQUASH_CLAMP] so frame
/// scores stay strictly inside (1, 5) even in f32.
const SQUASH_CLAMP: f64 = 1e-6;

pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

pub enum DecoderVars {
    Linear {
        w: Var,
        b: Var,
    },
    Recurrent {
        fw: LstmVars,
        bw: LstmVars,
        out_w: Var,
        out_b: Var,
    },
}

pub struct EncoderLayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

/// Leaf nodes for every parameter tensor, in `tensors()` order.
pub struct ParamVars {
    pub conv_w: Vec<Var>,
    pub conv_b: Vec<Var>,
    pub pos_w: Var,
    pub layers: Vec<EncoderLayerVars>,
    pub decoder: DecoderVars,
}

impl ParamVars {
    /// Vars in the same stable order as `ModelParams::tensors`.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            out.push(*w);
            out.push(*b);
        }
        out.push(self.pos_w);
        for l in &self.layers {
            out.extend([
                l.wq, l.wk, l.wv, l.wo, l.bo, l.ffn_w1, l.ffn_b1, l.ffn_w2, l.ffn_b2,
            ]);
        }
        match &self.decoder {
            DecoderVars::Linear { w, b } => out.extend([*w, *b]),
            DecoderVars::Recurrent { fw, bw, out_w, out_b } => {
                for l in [fw, bw] {
                    out.extend([l.wx, l.wh, l.b]);
                }
                out.extend([*out_w, *out_b]);
            }
        }
        out
    }
}

pub fn inject_params<S: Scalar>(tape: &mut Tape<S>, p: &ModelParams<S>) -> ParamVars {
    ParamVars {
        conv_w: p.conv_w.iter().map(|w| tape.leaf(w.clone())).collect(),
        conv_b: p.conv_b.iter().map(|b| tape.leaf(b.clone())).collect(),
        pos_w: tape.leaf(p.pos_w.clone()),
        layers: p
            .layers
            .iter()
            .map(|l| EncoderLayerVars {
                wq: tape.leaf(l.wq.clone()),
                wk: tape.leaf(l.wk.clone()),
                wv: tape.leaf(l.wv.clone()),
                wo: tape.leaf(l.wo.clone()),
                bo: tape.leaf(l.bo.clone()),
                ffn_w1: tape.leaf(l.ffn_w1.clone()),
                ffn_b1: tape.leaf(l.ffn_b1.clone()),
                ffn_w2: tape.leaf(l.ffn_w2.clone()),
                ffn_b2: tape.leaf(l.ffn_b2.clone()),
            })
            .collect(),
        decoder: match &p.decoder {
            DecoderParams::Linear { w, b } => DecoderVars::Linear {
                w: tape.leaf(w.clone()),
                b: tape.leaf(b.clone()),
            },
            DecoderParams::Recurrent { fw, bw, out_w, out_b } => {
                let mut inject_lstm = |l: &LstmParams<S>| LstmVars {
                    wx: tape.leaf(l.wx.clone()),
                    wh: tape.leaf(l.wh.clone()),
                    b: tape.leaf(l.b.clone()),
                };
                let fw = inject_lstm(fw);
                let bw = inject_lstm(bw);
                DecoderVars::Recurrent {
                    fw,
                    bw,
                    out_w: tape.leaf(out_w.clone()),
                    out_b: tape.leaf(out_b.clone()),
                }
            }
        },
    }
}

/// Strided conv stack as fold-then-matmul stages; kernel width equals stride,
/// so each frame sees exactly its own 320 samples. A final per-frame
/// layernorm stabilizes training.
pub fn extract_graph<S: Scalar>(tape: &mut Tape<S>, pv: &ParamVars, input: Var) -> Var {
    let mut x = input;
    for (i, &stride) in CONV_STRIDES.iter().enumerate() {
        let folded = tape.fold_rows(x, stride);
        let proj = tape.matmul(folded, pv.conv_w[i]);
        let biased = tape.add_rowvec(proj, pv.conv_b[i]);
        x = tape.silu(biased);
    }
    tape.layernorm_rows(x, S::from_f64(LN_EPS))
}

/// Pre-norm transformer with convolutional relative positions added to the
/// input; works for any T >= 1.
pub fn encode_graph<S: Scalar>(
    tape: &mut Tape<S>,
    pv: &ParamVars,
    arch: &ArchConfig,
    z: Var,
) -> Var {
    let pos = tape.depthwise_conv_time(z, pv.pos_w);
    let pos_act = tape.silu(pos);
    let mut x = tape.add(z, pos_act);

    let dh = arch.d_model / arch.n_heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    for l in &pv.layers {
        let ln1 = tape.layernorm_rows(x, S::from_f64(LN_EPS));
        let q = tape.matmul(ln1, l.wq);
        let k = tape.matmul(ln1, l.wk);
        let v = tape.matmul(ln1, l.wv);
        let mut heads = Vec::with_capacity(arch.n_heads);
        for h in 0..arch.n_heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = tape.col_slice(q, c0, c1);
            let kh = tape.col_slice(k, c0, c1);
            let vh = tape.col_slice(v, c0, c1);
            let logits = tape.matmul_nt(qh, kh);
            let scaled = tape.scale(logits, scale);
            let attn = tape.softmax_rows(scaled);
            heads.push(tape.matmul(attn, vh));
        }
        let cat = tape.concat_cols(&heads);
        let proj = tape.matmul(cat, l.wo);
        let attn_out = tape.add_rowvec(proj, l.bo);
        x = tape.add(x, attn_out);

        let ln2 = tape.layernorm_rows(x, S::from_f64(LN_EPS));
        let f1 = tape.matmul(ln2, l.ffn_w1);
        let f1b = tape.add_rowvec(f1, l.ffn_b1);
        let a = tape.silu(f1b);
        let f2 = tape.matmul(a, l.ffn_w2);
        let f2b = tape.add_rowvec(f2, l.ffn_b2);
        x = tape.add(x, f2b);
    }
    tape.layernorm_rows(x, S::from_f64(LN_EPS))
}

/// Divides every frame by the L2 norm of the time-pooled embedding.
pub fn l2_normalize_graph<S: Scalar>(tape: &mut Tape<S>, h: Var) -> Result<Var, ModelError> {
    let pooled = tape.mean_rows(h);
    let sq = tape.mul(pooled, pooled);
    let sumsq = tape.sum_all(sq);
    let norm = tape.sqrt(sumsq);
    if tape.scalar_value(norm).to_f64() <= 1e-12 {
        return Err(ModelError::ZeroEmbedding);
    }
    Ok(tape.div_by_scalar_var(h, norm))
}

fn lstm_dir_graph<S: Scalar>(tape: &mut Tape<S>, p: &LstmVars, x: Var, reverse: bool) -> Var {
    let t_len = tape.value(x).nrows();
    let h_dim = tape.value(p.wh).nrows();
    let xproj_all = tape.matmul(x, p.wx);
    let xproj = tape.add_rowvec(xproj_all, p.b);
    let mut h_prev = tape.leaf(Array2::zeros((1, h_dim)));
    let mut c_prev = tape.leaf(Array2::zeros((1, h_dim)));
    let mut outputs = vec![h_prev; t_len];
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for t in order {
        let xt = tape.row_slice(xproj, t, t + 1);
        let hproj = tape.matmul(h_prev, p.wh);
        let gates = tape.add(xt, hproj);
        let gi = tape.col_slice(gates, 0, h_dim);
        let gf = tape.col_slice(gates, h_dim, 2 * h_dim);
        let gg = tape.col_slice(gates, 2 * h_dim, 3 * h_dim);
        let go = tape.col_slice(gates, 3 * h_dim, 4 * h_dim);
        let i = tape.sigmoid(gi);
        let f = tape.sigmoid(gf);
        let g = tape.tanh(gg);
        let o = tape.sigmoid(go);
        let fc = tape.mul(f, c_prev);
        let ig = tape.mul(i, g);
        let c = tape.add(fc, ig);
        let ct = tape.tanh(c);
        let h = tape.mul(o, ct);
        outputs[t] = h;
        h_prev = h;
        c_prev = c;
    }
    tape.concat_rows(&outputs)
}

/// Frame scores q_t = 1 + 4 * sigmoid(raw_t) as a T x 1 column.
pub fn decode_graph<S: Scalar>(tape: &mut Tape<S>, pv: &ParamVars, h: Var) -> Var {
    let raw = match &pv.decoder {
        DecoderVars::Linear { w, b } => {
            let proj = tape.matmul(h, *w);
            tape.add_rowvec(proj, *b)
        }
        DecoderVars::Recurrent { fw, bw, out_w, out_b } => {
            let f = lstm_dir_graph(tape, fw, h, false);
            let b = lstm_dir_graph(tape, bw, h, true);
            let cat = tape.concat_cols(&[f, b]);
            let proj = tape.matmul(cat, *out_w);
            tape.add_rowvec(proj, *out_b)
        }
    };
    let sig = tape.sigmoid_clamped(raw, S::from_f64(SQUASH_CLAMP));
    let scaled = tape.scale(sig, S::from_f64(4.0));
    tape.add_scalar(scaled, S::one())
}

pub struct ForwardVars {
    /// Feature-extractor output, T x d.
    pub z: Var,
    /// Normalized encoder output, T x d.
    pub h_norm: Var,
    /// Frame scores, T x 1.
    pub q: Var,
    /// Utterance prediction, 1 x 1.
    pub y_hat: Var,
}

/// Full-context forward pass from an input column matrix (N x 1).
pub fn forward_graph<S: Scalar>(
    tape: &mut Tape<S>,
    pv: &ParamVars,
    arch: &ArchConfig,
    input: Array2<S>,
) -> Result<ForwardVars, ModelError> {
    let input = tape.leaf(input);
    let z = extract_graph(tape, pv, input);
    let h = encode_graph(tape, pv, arch, z);
    let h_norm = l2_normalize_graph(tape, h)?;
    let q = decode_graph(tape, pv, h_norm);
    let y_hat = tape.mean_all(q);
    Ok(ForwardVars { z, h_norm, q, y_hat })
}

/// Standalone encode-normalize-decode of latent rows [m-1, end) taken from a
/// shared feature sequence; `m`/`end` follow SliceSpec's 1-based inclusive
/// convention translated by the caller to 0-based half-open row indices.
pub fn slice_branch_graph<S: Scalar>(
    tape: &mut Tape<S>,
    pv: &ParamVars,
    arch: &ArchConfig,
    z: Var,
    row0: usize,
    row1: usize,
) -> Result<(Var, Var), ModelError> {
    let z_slice = tape.row_slice(z, row0, row1);
    let h = encode_graph(tape, pv, arch, z_slice);
    let h_norm = l2_normalize_graph(tape, h)?;
    let q = decode_graph(tape, pv, h_norm);
    Ok((h_norm, q))
}
