//! Multi-scale convolutional encoder-decoder used as the learned transform pair.
//!
//! Encoder level `s` applies a 3x3 convolution, a per-channel scale/shift and
//! a ReLU; levels after the first see the 2x2 average-pooled output of the
//! previous level. The bottleneck code is soft-thresholded. Each decoder level
//! upsamples (nearest), convolves, applies scale/shift and ReLU, and adds the
//! encoder features of the same scale. A final convolution with bias maps back
//! to one channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Feature channels per scale, finest first.
    pub channels: Vec<usize>,
    /// Output is `u + net(u)` instead of `net(u)`.
    #[serde(default = "yes")]
    pub residual: bool,
}

fn yes() -> bool {
    true
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: vec![8, 16],
            residual: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid("encoder-decoder needs at least one non-empty scale"));
        }
        if self.channels.len() > 8 {
            return Err(Error::invalid("encoder-decoder supports at most 8 scales"));
        }
        Ok(())
    }

    /// Total downsampling factor between input and bottleneck.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.channels.len() - 1)
    }

    pub fn check_size(&self, n: usize) -> Result<()> {
        let f = self.downsample_factor();
        if n == 0 || !n.is_multiple_of(f) {
            return Err(Error::invalid(format!(
                "image side {n} not divisible by encoder downsampling factor {f}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    w: usize,
    scale: usize,
    shift: usize,
}

/// Offsets of every tensor inside the flat weight vector.
#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<ConvLayer>,
    /// `dec[s]` maps scale `s` back to scale `s - 1`; index 0 unused.
    dec: Vec<ConvLayer>,
    out_w: usize,
    out_bias: usize,
    len: usize,
}

impl Layout {
    fn new(ch: &[usize]) -> Self {
        let mut off = 0;
        let mut take = |k: usize| {
            let o = off;
            off += k;
            o
        };
        let mut enc = Vec::with_capacity(ch.len());
        for s in 0..ch.len() {
            let cin = if s == 0 { 1 } else { ch[s - 1] };
            let cout = ch[s];
            enc.push(ConvLayer {
                cin,
                cout,
                w: take(cout * cin * 9),
                scale: take(cout),
                shift: take(cout),
            });
        }
        let mut dec = vec![ConvLayer { cin: 0, cout: 0, w: 0, scale: 0, shift: 0 }];
        for s in 1..ch.len() {
            let (cin, cout) = (ch[s], ch[s - 1]);
            dec.push(ConvLayer {
                cin,
                cout,
                w: take(cout * cin * 9),
                scale: take(cout),
                shift: take(cout),
            });
        }
        let out_w = take(ch[0] * 9);
        let out_bias = take(1);
        Layout { enc, dec, out_w, out_bias, len: off }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    config: NetConfig,
    layout: Layout,
    weights: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct NetTape {
    n: usize,
    enc_in: Vec<Vec<f64>>,
    enc_pre: Vec<Vec<f64>>,
    enc_act: Vec<Vec<f64>>,
    code_in: Vec<f64>,
    dec_in: Vec<Vec<f64>>,
    dec_pre: Vec<Vec<f64>>,
    dec_act: Vec<Vec<f64>>,
    d0: Vec<f64>,
}

impl EncoderDecoder {
    /// He-initialized weights; the output convolution starts small so a
    /// residual network is close to the identity.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config.channels);
        let mut weights = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |w: &mut [f64], std: f64| {
            let d = Normal::new(0.0, std).expect("positive std");
            w.iter_mut().for_each(|v| *v = d.sample(&mut rng));
        };
        let convs: Vec<ConvLayer> =
            layout.enc.iter().chain(layout.dec.iter().skip(1)).copied().collect();
        for l in convs {
            let std = (2.0 / (9 * l.cin) as f64).sqrt();
            fill(&mut weights[l.w..l.w + l.cout * l.cin * 9], std);
            weights[l.scale..l.scale + l.cout].iter_mut().for_each(|v| *v = 1.0);
        }
        let c0 = config.channels[0];
        let std = 0.1 * (1.0 / (9 * c0) as f64).sqrt();
        fill(&mut weights[layout.out_w..layout.out_w + c0 * 9], std);
        Ok(EncoderDecoder { config, layout, weights })
    }

    pub fn from_weights(config: NetConfig, weights: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config.channels);
        if weights.len() != layout.len {
            return Err(Error::invalid(format!(
                "expected {} encoder-decoder weights, got {}",
                layout.len,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("encoder-decoder weights must be finite"));
        }
        Ok(EncoderDecoder { config, layout, weights })
    }

    /// Number of weights a network of this shape has.
    pub fn weight_count(config: &NetConfig) -> usize {
        Layout::new(&config.channels).len
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn forward(&self, u: &[f64], n: usize, eps: f64) -> Result<Vec<f64>> {
        Ok(self.forward_tape(u, n, eps)?.0)
    }

    pub fn forward_tape(&self, u: &[f64], n: usize, eps: f64) -> Result<(Vec<f64>, NetTape)> {
        self.config.check_size(n)?;
        if u.len() != n * n {
            return Err(Error::invalid("encoder-decoder input length mismatch"));
        }
        let ch = &self.config.channels;
        let s_count = ch.len();
        let w = &self.weights;
        let mut tape = NetTape { n, ..Default::default() };

        let mut input = u.to_vec();
        let mut side = n;
        for s in 0..s_count {
            let l = self.layout.enc[s];
            if s > 0 {
                input = avg_pool(&tape.enc_act[s - 1], ch[s - 1], side * 2);
            }
            let mut pre = vec![0.0; l.cout * side * side];
            conv3x3(&input, l.cin, side, &w[l.w..], l.cout, &mut pre);
            let act = scale_shift_relu(&pre, &w[l.scale..], &w[l.shift..], l.cout);
            tape.enc_in.push(input.clone());
            tape.enc_pre.push(pre);
            tape.enc_act.push(act);
            if s + 1 < s_count {
                side /= 2;
            }
        }

        tape.code_in = tape.enc_act[s_count - 1].clone();
        let mut d: Vec<f64> = tape.code_in.iter().map(|&v| soft(v, eps)).collect();
        tape.dec_in = vec![Vec::new(); s_count];
        tape.dec_pre = vec![Vec::new(); s_count];
        tape.dec_act = vec![Vec::new(); s_count];
        for s in (1..s_count).rev() {
            let l = self.layout.dec[s];
            let up = nearest_up(&d, l.cin, side);
            side *= 2;
            let mut pre = vec![0.0; l.cout * side * side];
            conv3x3(&up, l.cin, side, &w[l.w..], l.cout, &mut pre);
            let act = scale_shift_relu(&pre, &w[l.scale..], &w[l.shift..], l.cout);
            d = act.iter().zip(&tape.enc_act[s - 1]).map(|(a, e)| a + e).collect();
            tape.dec_in[s] = up;
            tape.dec_pre[s] = pre;
            tape.dec_act[s] = act;
        }

        let mut out = vec![0.0; n * n];
        conv3x3(&d, ch[0], n, &w[self.layout.out_w..], 1, &mut out);
        let bias = w[self.layout.out_bias];
        for (o, &ui) in out.iter_mut().zip(u) {
            *o += bias;
            if self.config.residual {
                *o += ui;
            }
        }
        tape.d0 = d;
        Ok((out, tape))
    }

    /// Back-propagate `g_out` through a recorded forward pass. Weight
    /// gradients accumulate into `g_w`; returns `(g_u, g_eps)`.
    pub fn backward(
        &self,
        tape: &NetTape,
        g_out: &[f64],
        eps: f64,
        g_w: &mut [f64],
    ) -> (Vec<f64>, f64) {
        let ch = &self.config.channels;
        let s_count = ch.len();
        let n = tape.n;
        let w = &self.weights;
        let lay = &self.layout;

        let mut g_u = if self.config.residual { g_out.to_vec() } else { vec![0.0; n * n] };
        g_w[lay.out_bias] += g_out.iter().sum::<f64>();
        let mut g_d = vec![0.0; ch[0] * n * n];
        conv3x3_backward(&tape.d0, ch[0], n, &w[lay.out_w..], 1, g_out, &mut g_d, &mut g_w[lay.out_w..]);

        let mut g_enc: Vec<Vec<f64>> =
            tape.enc_act.iter().map(|a| vec![0.0; a.len()]).collect();
        let mut side = n;
        for s in 1..s_count {
            let l = lay.dec[s];
            for (ge, gd) in g_enc[s - 1].iter_mut().zip(&g_d) {
                *ge += gd;
            }
            let g_pre = scale_shift_relu_backward(
                &tape.dec_pre[s],
                &tape.dec_act[s],
                &g_d,
                &w[l.scale..],
                l.cout,
                g_w,
                l.scale,
                l.shift,
            );
            let mut g_up = vec![0.0; l.cin * side * side];
            conv3x3_backward(&tape.dec_in[s], l.cin, side, &w[l.w..], l.cout, &g_pre, &mut g_up, &mut g_w[l.w..]);
            g_d = nearest_up_backward(&g_up, l.cin, side / 2);
            side /= 2;
        }

        let mut g_eps = 0.0;
        for ((ge, &gd), &v) in g_enc[s_count - 1].iter_mut().zip(&g_d).zip(&tape.code_in) {
            if v.abs() > eps {
                *ge += gd;
                g_eps -= v.signum() * gd;
            }
        }

        for s in (0..s_count).rev() {
            let l = lay.enc[s];
            let g_pre = scale_shift_relu_backward(
                &tape.enc_pre[s],
                &tape.enc_act[s],
                &g_enc[s],
                &w[l.scale..],
                l.cout,
                g_w,
                l.scale,
                l.shift,
            );
            let mut g_in = vec![0.0; l.cin * side * side];
            conv3x3_backward(&tape.enc_in[s], l.cin, side, &w[l.w..], l.cout, &g_pre, &mut g_in, &mut g_w[l.w..]);
            if s == 0 {
                for (a, b) in g_u.iter_mut().zip(&g_in) {
                    *a += b;
                }
            } else {
                let back = avg_pool_backward(&g_in, l.cin, side);
                for (a, b) in g_enc[s - 1].iter_mut().zip(&back) {
                    *a += b;
                }
                side *= 2;
            }
        }
        (g_u, g_eps)
    }
}

/// Soft-thresholding that also accepts negative thresholds (used by finite
/// differences around `eps = 0`).
#[inline]
pub(crate) fn soft(v: f64, eps: f64) -> f64 {
    if v.abs() <= eps || v == 0.0 {
        0.0
    } else {
        v - eps * v.signum()
    }
}

/// Zero-padded 3x3 convolution of a `cin x side x side` stack into `cout`
/// maps. `w` is laid out `[cout][cin][3][3]`.
fn conv3x3(inp: &[f64], cin: usize, side: usize, w: &[f64], cout: usize, out: &mut [f64]) {
    let hw = side * side;
    out[..cout * hw].iter_mut().for_each(|v| *v = 0.0);
    for o in 0..cout {
        let out_o = &mut out[o * hw..(o + 1) * hw];
        for c in 0..cin {
            let in_c = &inp[c * hw..(c + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[((o * cin + c) * 3 + ky) * 3 + kx];
                    let (rows, cols) = shifted_ranges(side, ky, kx);
                    for i in rows {
                        let src = (i + ky - 1) * side;
                        let dst = i * side;
                        for j in cols.clone() {
                            out_o[dst + j] += wv * in_c[src + j + kx - 1];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    inp: &[f64],
    cin: usize,
    side: usize,
    w: &[f64],
    cout: usize,
    g_out: &[f64],
    g_in: &mut [f64],
    g_w: &mut [f64],
) {
    let hw = side * side;
    for o in 0..cout {
        let go = &g_out[o * hw..(o + 1) * hw];
        for c in 0..cin {
            let in_c = &inp[c * hw..(c + 1) * hw];
            let gi = &mut g_in[c * hw..(c + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let idx = ((o * cin + c) * 3 + ky) * 3 + kx;
                    let wv = w[idx];
                    let (rows, cols) = shifted_ranges(side, ky, kx);
                    let mut acc = 0.0;
                    for i in rows {
                        let src = (i + ky - 1) * side;
                        let dst = i * side;
                        for j in cols.clone() {
                            let g = go[dst + j];
                            acc += g * in_c[src + j + kx - 1];
                            gi[src + j + kx - 1] += wv * g;
                        }
                    }
                    g_w[idx] += acc;
                }
            }
        }
    }
}

/// Output rows/cols whose shifted source pixel lies inside the image.
#[inline]
fn shifted_ranges(side: usize, ky: usize, kx: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let lo = |k: usize| if k == 0 { 1 } else { 0 };
    let hi = |k: usize| if k == 2 { side - 1 } else { side };
    (lo(ky)..hi(ky), lo(kx)..hi(kx))
}

fn scale_shift_relu(pre: &[f64], scale: &[f64], shift: &[f64], c: usize) -> Vec<f64> {
    let hw = pre.len() / c;
    let mut out = vec![0.0; pre.len()];
    for k in 0..c {
        for (o, &p) in out[k * hw..(k + 1) * hw].iter_mut().zip(&pre[k * hw..(k + 1) * hw]) {
            *o = (scale[k] * p + shift[k]).max(0.0);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn scale_shift_relu_backward(
    pre: &[f64],
    act: &[f64],
    g_act: &[f64],
    scale: &[f64],
    c: usize,
    g_w: &mut [f64],
    scale_off: usize,
    shift_off: usize,
) -> Vec<f64> {
    let hw = pre.len() / c;
    let mut g_pre = vec![0.0; pre.len()];
    for k in 0..c {
        let (mut gs, mut gt) = (0.0, 0.0);
        for i in k * hw..(k + 1) * hw {
            if act[i] > 0.0 {
                let g = g_act[i];
                gt += g;
                gs += g * pre[i];
                g_pre[i] = g * scale[k];
            }
        }
        g_w[scale_off + k] += gs;
        g_w[shift_off + k] += gt;
    }
    g_pre
}

/// 2x2 mean pooling of a `c x side x side` stack.
fn avg_pool(x: &[f64], c: usize, side: usize) -> Vec<f64> {
    let h = side / 2;
    let mut out = vec![0.0; c * h * h];
    for k in 0..c {
        let src = &x[k * side * side..];
        let dst = &mut out[k * h * h..];
        for i in 0..h {
            for j in 0..h {
                let a = (2 * i) * side + 2 * j;
                dst[i * h + j] = 0.25 * (src[a] + src[a + 1] + src[a + side] + src[a + side + 1]);
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool`]; `side` is the pooled side.
fn avg_pool_backward(g: &[f64], c: usize, side: usize) -> Vec<f64> {
    let big = side * 2;
    let mut out = vec![0.0; c * big * big];
    for k in 0..c {
        for i in 0..side {
            for j in 0..side {
                let v = 0.25 * g[k * side * side + i * side + j];
                let a = k * big * big + (2 * i) * big + 2 * j;
                out[a] = v;
                out[a + 1] = v;
                out[a + big] = v;
                out[a + big + 1] = v;
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling; `side` is the input side.
fn nearest_up(x: &[f64], c: usize, side: usize) -> Vec<f64> {
    let big = side * 2;
    let mut out = vec![0.0; c * big * big];
    for k in 0..c {
        for i in 0..big {
            for j in 0..big {
                out[k * big * big + i * big + j] = x[k * side * side + (i / 2) * side + j / 2];
            }
        }
    }
    out
}

/// Adjoint of [`nearest_up`]; `side` is the small side.
fn nearest_up_backward(g: &[f64], c: usize, side: usize) -> Vec<f64> {
    let big = side * 2;
    let mut out = vec![0.0; c * side * side];
    for k in 0..c {
        for i in 0..big {
            for j in 0..big {
                out[k * side * side + (i / 2) * side + j / 2] += g[k * big * big + i * big + j];
            }
        }
    }
    out
}
