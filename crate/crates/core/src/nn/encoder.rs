//! Convolutional state encoder: `[conv 3x3/2 -> ReLU -> BatchNorm -> Dropout2d] x 3 -> linear`.
//!
//! Activations are kept channels-last (`[N, H, W, C]`); the input grid is
//! channel-major and transposed on entry.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{linear_bwd, linear_fwd};
use super::params::{Init, Layout, P};
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::obs::{CHANNELS, COLS, ROWS};

const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: Vec<usize>,
    pub embed: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: CHANNELS,
            rows: ROWS,
            cols: COLS,
            channels: vec![32, 64, 128],
            embed: 32,
            dropout: 0.1,
        }
    }
}

/// Output side of a 3x3, stride-2, padding-1 convolution.
pub fn conv_out(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

impl EncoderConfig {
    pub fn input_len(&self) -> usize {
        self.in_channels * self.rows * self.cols
    }

    /// Spatial shape after every conv stage.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut out = vec![];
        let (mut h, mut w) = (self.rows, self.cols);
        for _ in &self.channels {
            h = conv_out(h);
            w = conv_out(w);
            out.push((h, w));
        }
        out
    }

    pub fn flat_len(&self) -> usize {
        let (h, w) = *self.shapes().last().expect("at least one conv");
        h * w * self.channels.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.embed == 0 || self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid("encoder needs at least one conv and non-empty shapes"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Stage {
    c_in: usize,
    c_out: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    w: P,
    b: P,
    gamma: P,
    beta: P,
    run_mean: P,
    run_var: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    stages: Vec<Stage>,
    fc_w: P,
    fc_b: P,
}

pub struct StageCache<T> {
    cols: Vec<T>,
    pre_relu: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
    drop_mask: Vec<T>,
}

pub struct EncoderCache<T> {
    n: usize,
    stages: Vec<StageCache<T>>,
    flat: Vec<T>,
    train: bool,
}

impl Encoder {
    /// Registers parameters in `params` and running statistics in `buffers`.
    pub fn new(cfg: EncoderConfig, params: &mut Layout, buffers: &mut Layout) -> Self {
        let mut stages = vec![];
        let (mut h, mut w) = (cfg.rows, cfg.cols);
        let mut c_in = cfg.in_channels;
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            let fan_in = 9 * c_in;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let wp = params.add(format!("enc.conv{}.weight", i + 1), &[c_out, 3, 3, c_in], Init::Uniform(bound));
            let bp = params.add(format!("enc.conv{}.bias", i + 1), &[c_out], Init::Uniform(bound));
            stages.push(Stage {
                c_in,
                c_out,
                h_in: h,
                w_in: w,
                h_out: conv_out(h),
                w_out: conv_out(w),
                w: wp,
                b: bp,
                gamma: P::default(),
                beta: P::default(),
                run_mean: buffers.add(format!("enc.bn{}.running_mean", i + 1), &[c_out], Init::Zeros),
                run_var: buffers.add(format!("enc.bn{}.running_var", i + 1), &[c_out], Init::Ones),
            });
            h = conv_out(h);
            w = conv_out(w);
            c_in = c_out;
        }
        for (i, s) in stages.iter_mut().enumerate() {
            s.gamma = params.add(format!("enc.bn{}.weight", i + 1), &[s.c_out], Init::Ones);
            s.beta = params.add(format!("enc.bn{}.bias", i + 1), &[s.c_out], Init::Zeros);
        }
        let (fc_w, fc_b) = params.linear("enc.fc", cfg.flat_len(), cfg.embed);
        Self {
            cfg,
            stages,
            fc_w,
            fc_b,
        }
    }

    /// Encodes `n` channel-major grids into `n × embed` features.
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        params: &[T],
        buffers: &[T],
        grids: &[T],
        n: usize,
        train: bool,
        rng: &mut R,
    ) -> (Vec<T>, EncoderCache<T>) {
        let cfg = &self.cfg;
        assert_eq!(grids.len(), n * cfg.input_len());
        let (c0, h0, w0) = (cfg.in_channels, cfg.rows, cfg.cols);
        let mut x = vec![T::zero(); grids.len()];
        for s in 0..n {
            let src = &grids[s * cfg.input_len()..(s + 1) * cfg.input_len()];
            let dst = &mut x[s * cfg.input_len()..(s + 1) * cfg.input_len()];
            for c in 0..c0 {
                for i in 0..h0 * w0 {
                    dst[i * c0 + c] = src[c * h0 * w0 + i];
                }
            }
        }
        let mut caches = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let m = n * st.h_out * st.w_out;
            let kk = 9 * st.c_in;
            let mut cols = vec![T::zero(); m * kk];
            im2col(&x, n, st, &mut cols);
            let mut z = vec![T::zero(); m * st.c_out];
            linear_fwd(&cols, m, kk, st.w.of(params), st.b.of(params), &mut z);
            let a: Vec<T> = z.iter().map(|&v| v.max(T::zero())).collect();

            let co = st.c_out;
            let (mean, var) = if train {
                channel_stats(&a, co)
            } else {
                (st.run_mean.of(buffers).to_vec(), st.run_var.of(buffers).to_vec())
            };
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::c(BN_EPS)).sqrt()).collect();
            let gamma = st.gamma.of(params);
            let beta = st.beta.of(params);
            let mut xhat = vec![T::zero(); m * co];
            let mut y = vec![T::zero(); m * co];
            for r in 0..m {
                for c in 0..co {
                    let i = r * co + c;
                    xhat[i] = (a[i] - mean[c]) * inv_std[c];
                    y[i] = gamma[c] * xhat[i] + beta[c];
                }
            }

            let mut drop_mask = vec![];
            if train && cfg.dropout > 0.0 {
                let keep = T::c(1.0 / (1.0 - cfg.dropout));
                drop_mask = (0..n * co)
                    .map(|_| if rng.random::<f64>() < cfg.dropout { T::zero() } else { keep })
                    .collect();
                let per = st.h_out * st.w_out;
                for r in 0..m {
                    let s = r / per;
                    for c in 0..co {
                        y[r * co + c] *= drop_mask[s * co + c];
                    }
                }
            }
            caches.push(StageCache {
                cols,
                pre_relu: z,
                xhat,
                inv_std,
                mean,
                var,
                drop_mask,
            });
            x = y;
        }
        let flat_len = cfg.flat_len();
        let mut out = vec![T::zero(); n * cfg.embed];
        linear_fwd(&x, n, flat_len, self.fc_w.of(params), self.fc_b.of(params), &mut out);
        (
            out,
            EncoderCache {
                n,
                stages: caches,
                flat: x,
                train,
            },
        )
    }

    /// Accumulates parameter gradients for upstream gradient `d_out` (`n × embed`).
    pub fn backward<T: Scalar>(&self, params: &[T], cache: &EncoderCache<T>, d_out: &[T], grads: &mut [T]) {
        let n = cache.n;
        let flat_len = self.cfg.flat_len();
        let mut dx = vec![T::zero(); n * flat_len];
        {
            let (dw, rest) = split_pair(grads, self.fc_w, self.fc_b);
            linear_bwd(&cache.flat, n, flat_len, self.fc_w.of(params), d_out, dw, rest, Some(&mut dx));
        }
        for (si, st) in self.stages.iter().enumerate().rev() {
            let sc = &cache.stages[si];
            let co = st.c_out;
            let m = n * st.h_out * st.w_out;
            let mut dy = dx;
            if !sc.drop_mask.is_empty() {
                let per = st.h_out * st.w_out;
                for r in 0..m {
                    let s = r / per;
                    for c in 0..co {
                        dy[r * co + c] *= sc.drop_mask[s * co + c];
                    }
                }
            }
            let gamma = st.gamma.of(params);
            let mut dgamma = vec![T::zero(); co];
            let mut dbeta = vec![T::zero(); co];
            for r in 0..m {
                for c in 0..co {
                    let i = r * co + c;
                    dgamma[c] += dy[i] * sc.xhat[i];
                    dbeta[c] += dy[i];
                }
            }
            let mut da = vec![T::zero(); m * co];
            if cache.train {
                let mn = T::c(m as f64);
                for r in 0..m {
                    for c in 0..co {
                        let i = r * co + c;
                        let dxh = dy[i] * gamma[c];
                        da[i] = sc.inv_std[c] / mn
                            * (mn * dxh - gamma[c] * dbeta[c] - sc.xhat[i] * gamma[c] * dgamma[c]);
                    }
                }
            } else {
                for r in 0..m {
                    for c in 0..co {
                        let i = r * co + c;
                        da[i] = dy[i] * gamma[c] * sc.inv_std[c];
                    }
                }
            }
            for (g, v) in st.gamma.of_mut(grads).iter_mut().zip(&dgamma) {
                *g += *v;
            }
            for (g, v) in st.beta.of_mut(grads).iter_mut().zip(&dbeta) {
                *g += *v;
            }
            for (d, &z) in da.iter_mut().zip(&sc.pre_relu) {
                if z <= T::zero() {
                    *d = T::zero();
                }
            }
            let kk = 9 * st.c_in;
            let need_input = si > 0;
            let mut dcols = if need_input { vec![T::zero(); m * kk] } else { vec![] };
            {
                let (dw, db) = split_pair(grads, st.w, st.b);
                linear_bwd(
                    &sc.cols,
                    m,
                    kk,
                    st.w.of(params),
                    &da,
                    dw,
                    db,
                    need_input.then_some(&mut dcols[..]),
                );
            }
            dx = if need_input {
                let mut d = vec![T::zero(); n * st.h_in * st.w_in * st.c_in];
                col2im(&dcols, n, st, &mut d);
                d
            } else {
                vec![]
            };
        }
    }

    /// Folds the batch statistics of a training pass into the running estimates.
    pub fn update_running<T: Scalar>(&self, cache: &EncoderCache<T>, buffers: &mut [T]) {
        if !cache.train {
            return;
        }
        let mom = T::c(BN_MOMENTUM);
        for (st, sc) in self.stages.iter().zip(&cache.stages) {
            let m = cache.n * st.h_out * st.w_out;
            let unbias = if m > 1 {
                T::c(m as f64 / (m as f64 - 1.0))
            } else {
                T::one()
            };
            for (r, &v) in st.run_mean.of_mut(buffers).iter_mut().zip(&sc.mean) {
                *r = (T::one() - mom) * *r + mom * v;
            }
            for (r, &v) in st.run_var.of_mut(buffers).iter_mut().zip(&sc.var) {
                *r = (T::one() - mom) * *r + mom * v * unbias;
            }
        }
    }
}

/// Disjoint mutable views of two adjacent tensors (`a` directly precedes `b`).
fn split_pair<T>(data: &mut [T], a: P, b: P) -> (&mut [T], &mut [T]) {
    debug_assert_eq!(a.off + a.len, b.off);
    let (_, rest) = data.split_at_mut(a.off);
    let (x, rest) = rest.split_at_mut(a.len);
    (x, &mut rest[..b.len])
}

fn channel_stats<T: Scalar>(a: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let m = a.len() / c;
    let mn = T::c(m as f64);
    let mut mean = vec![T::zero(); c];
    for row in a.chunks_exact(c) {
        for (s, &v) in mean.iter_mut().zip(row) {
            *s += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= mn);
    let mut var = vec![T::zero(); c];
    for row in a.chunks_exact(c) {
        for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= mn);
    (mean, var)
}

fn im2col<T: Scalar>(x: &[T], n: usize, st: &Stage, cols: &mut [T]) {
    let c = st.c_in;
    let kk = 9 * c;
    for s in 0..n {
        let img = &x[s * st.h_in * st.w_in * c..(s + 1) * st.h_in * st.w_in * c];
        for oy in 0..st.h_out {
            for ox in 0..st.w_out {
                let row = &mut cols[((s * st.h_out + oy) * st.w_out + ox) * kk..][..kk];
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        let dst = &mut row[(ky * 3 + kx) * c..][..c];
                        if iy < 0 || ix < 0 || iy >= st.h_in as isize || ix >= st.w_in as isize {
                            dst.fill(T::zero());
                        } else {
                            let off = (iy as usize * st.w_in + ix as usize) * c;
                            dst.copy_from_slice(&img[off..off + c]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], n: usize, st: &Stage, dx: &mut [T]) {
    let c = st.c_in;
    let kk = 9 * c;
    for s in 0..n {
        let img = &mut dx[s * st.h_in * st.w_in * c..(s + 1) * st.h_in * st.w_in * c];
        for oy in 0..st.h_out {
            for ox in 0..st.w_out {
                let row = &cols[((s * st.h_out + oy) * st.w_out + ox) * kk..][..kk];
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= st.h_in as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= st.w_in as isize {
                            continue;
                        }
                        let off = (iy as usize * st.w_in + ix as usize) * c;
                        for (d, &v) in img[off..off + c].iter_mut().zip(&row[(ky * 3 + kx) * c..][..c]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_chain() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.shapes(), vec![(21, 25), (11, 13), (6, 7)]);
        assert_eq!(cfg.flat_len(), 5376);
    }

    /// Direct 3x3 stride-2 convolution on a channel-major image.
    fn direct_conv(img: &[f64], c: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let o = bias.len();
        let (ho, wo) = (conv_out(h), conv_out(w));
        let mut out = vec![0.0; ho * wo * o];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[oc];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            let ix = (2 * ox + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ic in 0..c {
                                acc += weight[((oc * 3 + ky) * 3 + kx) * c + ic]
                                    * img[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(oy * wo + ox) * o + oc] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let (c, h, w, o) = (3, 7, 6, 4);
        let img: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let weight: Vec<f64> = (0..o * 9 * c).map(|i| (i as f64 * 0.3).cos()).collect();
        let bias = vec![0.1, -0.2, 0.3, 0.0];
        let mut nhwc = vec![0.0; img.len()];
        for ch in 0..c {
            for i in 0..h * w {
                nhwc[i * c + ch] = img[ch * h * w + i];
            }
        }
        let st = Stage {
            c_in: c,
            c_out: o,
            h_in: h,
            w_in: w,
            h_out: conv_out(h),
            w_out: conv_out(w),
            w: P::default(),
            b: P::default(),
            gamma: P::default(),
            beta: P::default(),
            run_mean: P::default(),
            run_var: P::default(),
        };
        let m = st.h_out * st.w_out;
        let mut cols = vec![0.0; m * 9 * c];
        im2col(&nhwc, 1, &st, &mut cols);
        let mut out = vec![0.0; m * o];
        linear_fwd(&cols, m, 9 * c, &weight, &bias, &mut out);
        for (a, b) in out.iter().zip(direct_conv(&img, c, h, w, &weight, &bias)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
