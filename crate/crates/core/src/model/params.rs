//! Parameter container and architecture descriptor.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use framequal_tape::Scalar;

/// Strides of the three convolution stages; the product is the 320-sample
/// frame stride (20 ms at 16 kHz).
pub const CONV_STRIDES: [usize; 3] = [8, 8, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Linear,
    Recurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Output channels of the three conv stages; the last equals `d_model`.
    pub conv_channels: [usize; 3],
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    /// Odd kernel width of the positional depthwise convolution.
    pub pos_kernel: usize,
    pub decoder: DecoderVariant,
    /// Recurrent decoder features per direction.
    pub rnn_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            conv_channels: [16, 32, 64],
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ffn_dim: 128,
            pos_kernel: 9,
            decoder: DecoderVariant::Linear,
            rnn_hidden: 128,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.conv_channels[2] != self.d_model {
            return Err(ModelError::BadArch(
                "last conv channel count must equal d_model".into(),
            ));
        }
        if self.conv_channels.contains(&0) || self.d_model == 0 || self.ffn_dim == 0 {
            return Err(ModelError::BadArch("zero width".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadArch(
                "d_model must be divisible by n_heads".into(),
            ));
        }
        if self.n_layers == 0 {
            return Err(ModelError::BadArch("need at least one layer".into()));
        }
        if self.pos_kernel % 2 == 0 || self.pos_kernel == 0 {
            return Err(ModelError::BadArch("pos_kernel must be odd".into()));
        }
        if self.rnn_hidden == 0 {
            return Err(ModelError::BadArch("rnn_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayerParams<S> {
    pub wq: Array2<S>,
    pub wk: Array2<S>,
    pub wv: Array2<S>,
    pub wo: Array2<S>,
    pub bo: Array2<S>,
    pub ffn_w1: Array2<S>,
    pub ffn_b1: Array2<S>,
    pub ffn_w2: Array2<S>,
    pub ffn_b2: Array2<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams<S> {
    /// Input projection, d_model x 4h; gate order [i, f, g, o].
    pub wx: Array2<S>,
    /// Hidden projection, h x 4h.
    pub wh: Array2<S>,
    pub b: Array2<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum DecoderParams<S> {
    Linear {
        w: Array2<S>,
        b: Array2<S>,
    },
    Recurrent {
        fw: LstmParams<S>,
        bw: LstmParams<S>,
        out_w: Array2<S>,
        out_b: Array2<S>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<S> {
    /// Stage i maps folded rows of width stride_i * c_{i-1} to c_i channels.
    pub conv_w: Vec<Array2<S>>,
    pub conv_b: Vec<Array2<S>>,
    /// Depthwise positional kernel, pos_kernel x d_model.
    pub pos_w: Array2<S>,
    pub layers: Vec<EncoderLayerParams<S>>,
    pub decoder: DecoderParams<S>,
}

impl<S: Scalar> ModelParams<S> {
    /// Xavier-uniform init, biases zero; deterministic in `seed`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xavier = |rows: usize, cols: usize| -> Array2<S> {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| S::from_f64(rng.gen_range(-a..a)))
        };

        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut c_in = 1;
        for (i, &stride) in CONV_STRIDES.iter().enumerate() {
            let c_out = arch.conv_channels[i];
            conv_w.push(xavier(stride * c_in, c_out));
            conv_b.push(Array2::zeros((1, c_out)));
            c_in = c_out;
        }

        let pos_w = xavier(arch.pos_kernel, arch.d_model);

        let d = arch.d_model;
        let layers = (0..arch.n_layers)
            .map(|_| EncoderLayerParams {
                wq: xavier(d, d),
                wk: xavier(d, d),
                wv: xavier(d, d),
                wo: xavier(d, d),
                bo: Array2::zeros((1, d)),
                ffn_w1: xavier(d, arch.ffn_dim),
                ffn_b1: Array2::zeros((1, arch.ffn_dim)),
                ffn_w2: xavier(arch.ffn_dim, d),
                ffn_b2: Array2::zeros((1, d)),
            })
            .collect();

        let decoder = match arch.decoder {
            DecoderVariant::Linear => DecoderParams::Linear {
                w: xavier(d, 1),
                b: Array2::zeros((1, 1)),
            },
            DecoderVariant::Recurrent => {
                let h = arch.rnn_hidden;
                let lstm = |rng_xavier: &mut dyn FnMut(usize, usize) -> Array2<S>| LstmParams {
                    wx: rng_xavier(d, 4 * h),
                    wh: rng_xavier(h, 4 * h),
                    b: Array2::zeros((1, 4 * h)),
                };
                let fw = lstm(&mut xavier);
                let bw = lstm(&mut xavier);
                DecoderParams::Recurrent {
                    fw,
                    bw,
                    out_w: xavier(2 * h, 1),
                    out_b: Array2::zeros((1, 1)),
                }
            }
        };

        Ok(ModelParams {
            conv_w,
            conv_b,
            pos_w,
            layers,
            decoder,
        })
    }

    /// Named tensors in a stable order; the trainer and checkpoints rely on
    /// the enumeration being exhaustive.
    pub fn tensors(&self) -> Vec<(String, &Array2<S>)> {
        let mut out: Vec<(String, &Array2<S>)> = Vec::new();
        for (i, (w, b)) in self.conv_w.iter().zip(&self.conv_b).enumerate() {
            out.push((format!("conv{i}.w"), w));
            out.push((format!("conv{i}.b"), b));
        }
        out.push(("pos.w".into(), &self.pos_w));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("enc{i}.wq"), &l.wq));
            out.push((format!("enc{i}.wk"), &l.wk));
            out.push((format!("enc{i}.wv"), &l.wv));
            out.push((format!("enc{i}.wo"), &l.wo));
            out.push((format!("enc{i}.bo"), &l.bo));
            out.push((format!("enc{i}.ffn_w1"), &l.ffn_w1));
            out.push((format!("enc{i}.ffn_b1"), &l.ffn_b1));
            out.push((format!("enc{i}.ffn_w2"), &l.ffn_w2));
            out.push((format!("enc{i}.ffn_b2"), &l.ffn_b2));
        }
        match &self.decoder {
            DecoderParams::Linear { w, b } => {
                out.push(("dec.w".into(), w));
                out.push(("dec.b".into(), b));
            }
            DecoderParams::Recurrent { fw, bw, out_w, out_b } => {
                for (tag, l) in [("fw", fw), ("bw", bw)] {
                    out.push((format!("dec.{tag}.wx"), &l.wx));
                    out.push((format!("dec.{tag}.wh"), &l.wh));
                    out.push((format!("dec.{tag}.b"), &l.b));
                }
                out.push(("dec.out_w".into(), out_w));
                out.push(("dec.out_b".into(), out_b));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<S>)> {
        let mut out: Vec<(String, &mut Array2<S>)> = Vec::new();
        for (i, (w, b)) in self.conv_w.iter_mut().zip(&mut self.conv_b).enumerate() {
            out.push((format!("conv{i}.w"), w));
            out.push((format!("conv{i}.b"), b));
        }
        out.push(("pos.w".into(), &mut self.pos_w));
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("enc{i}.wq"), &mut l.wq));
            out.push((format!("enc{i}.wk"), &mut l.wk));
            out.push((format!("enc{i}.wv"), &mut l.wv));
            out.push((format!("enc{i}.wo"), &mut l.wo));
            out.push((format!("enc{i}.bo"), &mut l.bo));
            out.push((format!("enc{i}.ffn_w1"), &mut l.ffn_w1));
            out.push((format!("enc{i}.ffn_b1"), &mut l.ffn_b1));
            out.push((format!("enc{i}.ffn_w2"), &mut l.ffn_w2));
            out.push((format!("enc{i}.ffn_b2"), &mut l.ffn_b2));
        }
        match &mut self.decoder {
            DecoderParams::Linear { w, b } => {
                out.push(("dec.w".into(), w));
                out.push(("dec.b".into(), b));
            }
            DecoderParams::Recurrent { fw, bw, out_w, out_b } => {
                for (tag, l) in [("fw", fw), ("bw", bw)] {
                    out.push((format!("dec.{tag}.wx"), &mut l.wx));
                    out.push((format!("dec.{tag}.wh"), &mut l.wh));
                    out.push((format!("dec.{tag}.b"), &mut l.b));
                }
                out.push(("dec.out_w".into(), out_w));
                out.push(("dec.out_b".into(), out_b));
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn convert<S2: Scalar>(&self) -> ModelParams<S2> {
        let conv = |a: &Array2<S>| a.mapv(|x| S2::from_f64(x.to_f64()));
        ModelParams {
            conv_w: self.conv_w.iter().map(conv).collect(),
            conv_b: self.conv_b.iter().map(conv).collect(),
            pos_w: conv(&self.pos_w),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayerParams {
                    wq: conv(&l.wq),
                    wk: conv(&l.wk),
                    wv: conv(&l.wv),
                    wo: conv(&l.wo),
                    bo: conv(&l.bo),
                    ffn_w1: conv(&l.ffn_w1),
                    ffn_b1: conv(&l.ffn_b1),
                    ffn_w2: conv(&l.ffn_w2),
                    ffn_b2: conv(&l.ffn_b2),
                })
                .collect(),
            decoder: match &self.decoder {
                DecoderParams::Linear { w, b } => DecoderParams::Linear {
                    w: conv(w),
                    b: conv(b),
                },
                DecoderParams::Recurrent { fw, bw, out_w, out_b } => DecoderParams::Recurrent {
                    fw: LstmParams {
                        wx: conv(&fw.wx),
                        wh: conv(&fw.wh),
                        b: conv(&fw.b),
                    },
                    bw: LstmParams {
                        wx: conv(&bw.wx),
                        wh: conv(&bw.wh),
                        b: conv(&bw.b),
                    },
                    out_w: conv(out_w),
                    out_b: conv(out_b),
                },
            },
        }
    }
}
