//! Encoder (IDM), decoder (FDM) and VQ bottleneck for the grid world.
//!
//! Encoder: the two frames as 2 channels → 3×3 conv stack (ReLU) → flatten →
//! dense hidden (ReLU) → dense `d_z` = `z_pre`, then nearest-code quantization.
//! Decoder: `z_q` broadcast to every pixel and concatenated with the current
//! frame → 3×3 conv stack (ReLU) → 1×1 single-channel head.

use serde::{Deserialize, Serialize};

use super::env::{Frame, PIXELS, SIDE};
use super::tape::{Real, Tape, Tensor, Var};
use super::GridError;
use crate::container::{self, Container};
use crate::numerics::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridModelConfig {
    pub enc_channels: Vec<usize>,
    pub enc_hidden: usize,
    pub d_z: usize,
    pub dec_channels: Vec<usize>,
    pub codebook_size: usize,
    pub beta: f64,
    /// Rows of the robust head W (one-hot action targets).
    pub d_y: usize,
}

impl Default for GridModelConfig {
    fn default() -> Self {
        Self {
            enc_channels: vec![128, 128, 128],
            enc_hidden: 64,
            d_z: 32,
            dec_channels: vec![32, 32, 32, 32],
            codebook_size: 5,
            beta: 0.25,
            d_y: 4,
        }
    }
}

impl GridModelConfig {
    pub fn validate(&self) -> Result<(), GridError> {
        let widths = self.enc_channels.iter().chain(&self.dec_channels);
        if widths.clone().any(|&c| c == 0) || self.enc_hidden == 0 || self.d_z == 0 || self.d_y == 0 {
            return Err(GridError::Config("layer widths must be positive".into()));
        }
        if self.codebook_size == 0 {
            return Err(GridError::Config("codebook_size must be at least 1".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(GridError::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Indices into the flat parameter list.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub enc_conv: Vec<(usize, usize)>,
    pub fc1: (usize, usize),
    pub fc2: (usize, usize),
    pub dec_conv: Vec<(usize, usize)>,
    pub head: (usize, usize),
    pub codebook: usize,
    pub w: usize,
}

/// Names and shapes of every parameter, in storage order.
pub(crate) fn layout(cfg: &GridModelConfig) -> (Layout, Vec<(String, usize, usize)>) {
    let mut shapes = Vec::new();
    let mut push = |name: String, r: usize, c: usize| {
        shapes.push((name, r, c));
        shapes.len() - 1
    };
    let mut cin = 2;
    let mut enc_conv = Vec::new();
    for (i, &c) in cfg.enc_channels.iter().enumerate() {
        enc_conv.push((push(format!("enc.conv{i}.w"), 9 * cin, c), push(format!("enc.conv{i}.b"), 1, c)));
        cin = c;
    }
    let fc1 = (push("enc.fc1.w".into(), PIXELS * cin, cfg.enc_hidden), push("enc.fc1.b".into(), 1, cfg.enc_hidden));
    let fc2 = (push("enc.fc2.w".into(), cfg.enc_hidden, cfg.d_z), push("enc.fc2.b".into(), 1, cfg.d_z));
    let mut cin = cfg.d_z + 1;
    let mut dec_conv = Vec::new();
    for (i, &c) in cfg.dec_channels.iter().enumerate() {
        dec_conv.push((push(format!("dec.conv{i}.w"), 9 * cin, c), push(format!("dec.conv{i}.b"), 1, c)));
        cin = c;
    }
    let head = (push("dec.head.w".into(), cin, 1), push("dec.head.b".into(), 1, 1));
    let codebook = push("codebook".into(), cfg.codebook_size, cfg.d_z);
    let w = push("W".into(), cfg.d_y, cfg.d_z);
    (Layout { enc_conv, fc1, fc2, dec_conv, head, codebook, w }, shapes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridLamParams {
    pub config: GridModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
}

impl GridLamParams {
    /// He-normal weights, zero biases, codebook and W ~ N(0, 1/d_z).
    pub fn init(cfg: &GridModelConfig, rng: &mut RngStream) -> Result<Self, GridError> {
        cfg.validate()?;
        let (lay, shapes) = layout(cfg);
        let mut tensors = Vec::with_capacity(shapes.len());
        for (i, (name, r, c)) in shapes.iter().enumerate() {
            let std = if i == lay.codebook || i == lay.w {
                1.0 / (cfg.d_z as f64).sqrt()
            } else if name.ends_with(".b") {
                0.0
            } else {
                (2.0 / *r as f64).sqrt()
            };
            let data = if std == 0.0 { vec![0.0; r * c] } else { rng.gaussian_vec(r * c, std).into_iter().map(|v| v as f32).collect() };
            tensors.push(Tensor::new(*r, *c, data));
        }
        Ok(Self { config: cfg.clone(), names: shapes.into_iter().map(|s| s.0).collect(), tensors })
    }

    pub(crate) fn layout(&self) -> Layout {
        layout(&self.config).0
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn codebook(&self) -> &Tensor<f32> {
        &self.tensors[self.layout().codebook]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn push_tensors(&self, c: &mut Container, prefix: &str) {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            c.push(container::Tensor::f64(&format!("{prefix}{name}"), &[t.rows, t.cols], t.data.iter().map(|v| *v as f64).collect()));
        }
    }

    pub fn from_tensors(cfg: &GridModelConfig, c: &Container, prefix: &str) -> Result<Self, GridError> {
        cfg.validate()?;
        let (_, shapes) = layout(cfg);
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, r, cols) in &shapes {
            let (dims, data) = c.f64s(&format!("{prefix}{name}"))?;
            if dims != [*r, *cols] {
                return Err(GridError::Shape(format!("{name}: stored {dims:?}, config expects [{r}, {cols}]")));
            }
            tensors.push(Tensor::new(*r, *cols, data.iter().map(|v| *v as f32).collect()));
        }
        Ok(Self { config: cfg.clone(), names: shapes.into_iter().map(|s| s.0).collect(), tensors })
    }
}

/// Frames stacked as channels: `[N·16, k]` for `k` frames per sample.
pub fn pack<T: Real>(frames: &[&[Frame]]) -> Tensor<T> {
    let n = frames[0].len();
    let k = frames.len();
    let mut data = Vec::with_capacity(n * PIXELS * k);
    for i in 0..n {
        for px in 0..PIXELS {
            for f in frames {
                data.push(T::from(f[i][px]).unwrap());
            }
        }
    }
    Tensor::new(n * PIXELS, k, data)
}

/// Every parameter placed on `tape` as a leaf, in storage order.
pub(crate) fn bind<T: Real>(tape: &mut Tape<T>, tensors: &[Tensor<T>]) -> Vec<Var> {
    tensors.iter().map(|t| tape.leaf(t.clone())).collect()
}

fn conv_stack<T: Real>(tape: &mut Tape<T>, vars: &[Var], layers: &[(usize, usize)], mut x: Var) -> Var {
    for &(w, b) in layers {
        let cols = tape.im2col(x, SIDE, SIDE);
        let y = tape.matmul(cols, vars[w], false);
        let y = tape.add_bias(y, vars[b]);
        x = tape.relu(y);
    }
    x
}

/// `z_pre` for a `[N·16, 2]` input.
pub(crate) fn encode_on<T: Real>(tape: &mut Tape<T>, vars: &[Var], lay: &Layout, input: Var) -> Var {
    let n = tape.value(input).rows / PIXELS;
    let h = conv_stack(tape, vars, &lay.enc_conv, input);
    let width = tape.value(h).cols;
    let flat = tape.reshape(h, n, PIXELS * width);
    let h = tape.matmul(flat, vars[lay.fc1.0], false);
    let h = tape.add_bias(h, vars[lay.fc1.1]);
    let h = tape.relu(h);
    let z = tape.matmul(h, vars[lay.fc2.0], false);
    tape.add_bias(z, vars[lay.fc2.1])
}

/// Predicted next frame `[N·16, 1]` from the current frame `[N·16, 1]` and `z` `[N, d_z]`.
pub(crate) fn decode_on<T: Real>(tape: &mut Tape<T>, vars: &[Var], lay: &Layout, obs: Var, z: Var) -> Var {
    let zb = tape.broadcast_rows(z, PIXELS);
    let x = tape.concat_cols(zb, obs);
    let h = conv_stack(tape, vars, &lay.dec_conv, x);
    let y = tape.matmul(h, vars[lay.head.0], false);
    tape.add_bias(y, vars[lay.head.1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    /// `[N, d_z]` continuous embeddings.
    pub z_pre: Tensor<f32>,
    pub z_q: Tensor<f32>,
    pub codes: Vec<usize>,
}

/// Batch encoding of `(obs, obs_next)` pairs.
pub fn encode(p: &GridLamParams, obs: &[Frame], obs_next: &[Frame]) -> Encoded {
    let lay = p.layout();
    let mut tape = Tape::new();
    let vars = bind(&mut tape, &p.tensors);
    let input = tape.leaf(pack(&[obs, obs_next]));
    let z = encode_on(&mut tape, &vars, &lay, input);
    let (q, codes) = tape.quantize(z, vars[lay.codebook]);
    Encoded { z_pre: tape.value(z).clone(), z_q: tape.value(q).clone(), codes }
}

/// Batch decoding: one predicted frame per row of `z`.
pub fn decode(p: &GridLamParams, obs: &[Frame], z: &Tensor<f32>) -> Vec<Frame> {
    let lay = p.layout();
    let mut tape = Tape::new();
    let vars = bind(&mut tape, &p.tensors);
    let o = tape.leaf(pack(&[obs]));
    let zv = tape.leaf(z.clone());
    let y = decode_on(&mut tape, &vars, &lay, o, zv);
    tape.value(y)
        .data
        .chunks_exact(PIXELS)
        .map(|c| {
            let mut f = [0.0; PIXELS];
            f.copy_from_slice(c);
            f
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_lam::tape::KERNEL_OFFSETS;

    fn small() -> GridModelConfig {
        GridModelConfig { enc_channels: vec![4, 3], enc_hidden: 5, d_z: 3, dec_channels: vec![4, 2], codebook_size: 5, beta: 0.25, d_y: 4 }
    }

    fn frames(seed: u64, n: usize) -> Vec<Frame> {
        let mut rng = RngStream::new(seed, 1);
        (0..n)
            .map(|_| {
                let mut f = [0.0; PIXELS];
                f.iter_mut().for_each(|v| *v = rng.uniform() as f32);
                f
            })
            .collect()
    }

    /// Direct nested-loop 3×3 same-padding convolution + bias + ReLU on one frame.
    fn conv_reference(x: &[Vec<f64>], w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<Vec<f64>> {
        let cin = x[0].len();
        let cout = w.cols;
        let mut out = vec![vec![0.0; cout]; PIXELS];
        for r in 0..4isize {
            for c in 0..4isize {
                for o in 0..cout {
                    let mut acc = b.data[o] as f64;
                    for kr in -1..=1isize {
                        for kc in -1..=1isize {
                            let (rr, cc) = (r + kr, c + kc);
                            if !(0..4).contains(&rr) || !(0..4).contains(&cc) {
                                continue;
                            }
                            let k = ((kr + 1) * 3 + (kc + 1)) as usize;
                            for i in 0..cin {
                                acc += x[(rr * 4 + cc) as usize][i] * w.data[(k * cin + i) * cout + o] as f64;
                            }
                        }
                    }
                    out[(r * 4 + c) as usize][o] = acc.max(0.0);
                }
            }
        }
        out
    }

    #[test]
    fn kernel_offsets_match_reference_layout() {
        for (k, (dr, dc)) in KERNEL_OFFSETS.iter().enumerate() {
            assert_eq!(((dr + 1) * 3 + (dc + 1)) as usize, k);
        }
    }

    #[test]
    fn decoder_matches_straight_line_reimplementation() {
        let cfg = small();
        let p = GridLamParams::init(&cfg, &mut RngStream::new(3, 0)).unwrap();
        let lay = p.layout();
        let obs = frames(1, 1);
        let z = Tensor::new(1, 3, vec![0.3f32, -1.2, 0.7]);
        let got = decode(&p, &obs, &z)[0];

        let mut x: Vec<Vec<f64>> = (0..PIXELS).map(|px| vec![0.3, -1.2, 0.7, obs[0][px] as f64]).collect();
        for &(w, b) in &lay.dec_conv {
            x = conv_reference(&x, &p.tensors[w], &p.tensors[b]);
        }
        let (hw, hb) = (&p.tensors[lay.head.0], &p.tensors[lay.head.1]);
        for px in 0..PIXELS {
            let y: f64 = hb.data[0] as f64 + x[px].iter().zip(&hw.data).map(|(a, w)| a * *w as f64).sum::<f64>();
            assert!((y - got[px] as f64).abs() < 1e-4, "pixel {px}: {y} vs {}", got[px]);
        }
    }

    #[test]
    fn encoder_matches_straight_line_reimplementation() {
        let cfg = small();
        let p = GridLamParams::init(&cfg, &mut RngStream::new(4, 0)).unwrap();
        let lay = p.layout();
        let (o, on) = (frames(2, 1), frames(3, 1));
        let got = encode(&p, &o, &on);

        let mut x: Vec<Vec<f64>> = (0..PIXELS).map(|px| vec![o[0][px] as f64, on[0][px] as f64]).collect();
        for &(w, b) in &lay.enc_conv {
            x = conv_reference(&x, &p.tensors[w], &p.tensors[b]);
        }
        let flat: Vec<f64> = x.concat();
        let dense = |input: &[f64], w: &Tensor<f32>, b: &Tensor<f32>, relu: bool| -> Vec<f64> {
            (0..w.cols)
                .map(|j| {
                    let v = b.data[j] as f64 + input.iter().enumerate().map(|(i, a)| a * w.data[i * w.cols + j] as f64).sum::<f64>();
                    if relu {
                        v.max(0.0)
                    } else {
                        v
                    }
                })
                .collect()
        };
        let h = dense(&flat, &p.tensors[lay.fc1.0], &p.tensors[lay.fc1.1], true);
        let z = dense(&h, &p.tensors[lay.fc2.0], &p.tensors[lay.fc2.1], false);
        for (a, b) in z.iter().zip(&got.z_pre.data) {
            assert!((a - *b as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_decoder_weights_give_the_head_bias() {
        let cfg = small();
        let mut p = GridLamParams::init(&cfg, &mut RngStream::new(5, 0)).unwrap();
        let lay = p.layout();
        for &(w, _) in lay.dec_conv.iter().chain([&lay.head]) {
            p.tensors[w].data.iter_mut().for_each(|v| *v = 0.0);
        }
        p.tensors[lay.head.1].data[0] = 0.625;
        let out = decode(&p, &frames(6, 3), &Tensor::new(3, 3, vec![1.0; 9]));
        assert_eq!(out.len(), 3);
        assert!(out.iter().flatten().all(|v| *v == 0.625));
    }

    #[test]
    fn single_code_makes_quantized_latent_constant() {
        let cfg = GridModelConfig { codebook_size: 1, ..small() };
        let p = GridLamParams::init(&cfg, &mut RngStream::new(6, 0)).unwrap();
        let e = encode(&p, &frames(7, 10), &frames(8, 10));
        assert!(e.codes.iter().all(|&c| c == 0));
        for r in 0..10 {
            assert_eq!(e.z_q.row(r), p.codebook().row(0));
        }
    }

    #[test]
    fn identical_inputs_encode_identically() {
        let p = GridLamParams::init(&small(), &mut RngStream::new(7, 0)).unwrap();
        let mut o = frames(9, 1);
        o.push(o[0]);
        let mut on = frames(10, 1);
        on.push(on[0]);
        let e = encode(&p, &o, &on);
        assert_eq!(e.z_pre.row(0), e.z_pre.row(1));
        assert_eq!(e.codes[0], e.codes[1]);
    }

    #[test]
    fn default_parameter_count() {
        let p = GridLamParams::init(&GridModelConfig::default(), &mut RngStream::new(0, 0)).unwrap();
        let enc = (9 * 2 * 128 + 128) + 2 * (9 * 128 * 128 + 128) + (16 * 128 * 64 + 64) + (64 * 32 + 32);
        let dec = (9 * 33 * 32 + 32) + 3 * (9 * 32 * 32 + 32) + (32 + 1);
        assert_eq!(p.param_count(), enc + dec + 5 * 32 + 4 * 32);
    }

    #[test]
    fn container_round_trip() {
        let cfg = small();
        let p = GridLamParams::init(&cfg, &mut RngStream::new(8, 0)).unwrap();
        let mut c = Container::new(serde_json::json!({}));
        p.push_tensors(&mut c, "model.");
        assert_eq!(GridLamParams::from_tensors(&cfg, &c, "model.").unwrap(), p);
    }
}
