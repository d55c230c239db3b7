//! Convolutional-recurrent sequence recognizer: two conv/pool stages collapse
//! the height, a bidirectional tanh RNN reads the columns, and a linear layer
//! emits log-probabilities over blank + alphabet for every 4-pixel column step.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ctc::LogitsSequence;
use super::ops::{self, Tensor};
use super::optim::ParamLayout;
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproximatorArch {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub hidden: usize,
    pub input_height: usize,
    pub classes: usize,
}

impl ApproximatorArch {
    pub fn for_strips(input_height: usize, classes: usize) -> Self {
        ApproximatorArch {
            conv1_channels: 8,
            conv2_channels: 16,
            hidden: 24,
            input_height,
            classes,
        }
    }

    fn features(&self) -> usize {
        self.conv2_channels * (self.input_height / 4)
    }

    /// Output length for an input of the given width.
    pub fn timesteps(&self, width: usize) -> usize {
        width / 4
    }
}

#[derive(Clone, Debug)]
struct Blocks {
    conv1: (Range<usize>, Range<usize>),
    conv2: (Range<usize>, Range<usize>),
    fwd: Rnn,
    bwd: Rnn,
    out_w: Range<usize>,
    out_b: Range<usize>,
}

#[derive(Clone, Debug)]
struct Rnn {
    wx: Range<usize>,
    wh: Range<usize>,
    b: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApproximatorModel {
    arch: ApproximatorArch,
    layout: ParamLayout,
    params: Vec<f64>,
}

pub struct ApproximatorTape {
    input: Tensor,
    a1: Tensor,
    p1: Tensor,
    a2: Tensor,
    feats: Vec<f64>,
    h_fwd: Vec<f64>,
    h_bwd: Vec<f64>,
    probs: Vec<f64>,
    logits: LogitsSequence,
}

impl ApproximatorTape {
    pub fn logits(&self) -> &LogitsSequence {
        &self.logits
    }
}

impl ApproximatorModel {
    pub fn new(arch: ApproximatorArch, seed: u64) -> Result<Self> {
        if arch.input_height == 0 || arch.input_height % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "approximator input height {} must be a positive multiple of 4",
                arch.input_height
            )));
        }
        if arch.classes < 2 || arch.hidden == 0 || arch.conv1_channels == 0 || arch.conv2_channels == 0 {
            return Err(Error::InvalidArgument("approximator dimensions must be positive".into()));
        }
        let mut layout = ParamLayout::default();
        let b = Self::blocks_for(&arch, &mut layout);
        let mut params = vec![0.0; layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = |range: Range<usize>, fan_in: usize, params: &mut [f64], rng: &mut ChaCha8Rng| {
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite");
            for p in &mut params[range] {
                *p = n.sample(rng);
            }
        };
        he(b.conv1.0.clone(), 9, &mut params, &mut rng);
        he(b.conv2.0.clone(), 9 * arch.conv1_channels, &mut params, &mut rng);
        let bound = 1.0 / (arch.hidden as f64).sqrt();
        for rnn in [&b.fwd, &b.bwd] {
            for r in [rnn.wx.clone(), rnn.wh.clone()] {
                for p in &mut params[r] {
                    *p = rng.gen_range(-bound..bound);
                }
            }
        }
        let bound = 1.0 / ((2 * arch.hidden) as f64).sqrt();
        for p in &mut params[b.out_w.clone()] {
            *p = rng.gen_range(-bound..bound);
        }
        Ok(ApproximatorModel { arch, layout, params })
    }

    pub fn from_parts(arch: ApproximatorArch, params: Vec<f64>) -> Result<Self> {
        let mut layout = ParamLayout::default();
        Self::blocks_for(&arch, &mut layout);
        if params.len() != layout.len() {
            return Err(Error::InvalidArgument(format!(
                "approximator expects {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        Ok(ApproximatorModel { arch, layout, params })
    }

    fn blocks_for(arch: &ApproximatorArch, layout: &mut ParamLayout) -> Blocks {
        let (c1, c2, hd, f, k) = (
            arch.conv1_channels,
            arch.conv2_channels,
            arch.hidden,
            arch.features(),
            arch.classes,
        );
        let conv1 = (layout.push("conv1.weight", c1 * 9), layout.push("conv1.bias", c1));
        let conv2 = (layout.push("conv2.weight", c2 * c1 * 9), layout.push("conv2.bias", c2));
        let mut rnn = |dir: &str| Rnn {
            wx: layout.push(format!("rnn_{dir}.wx"), hd * f),
            wh: layout.push(format!("rnn_{dir}.wh"), hd * hd),
            b: layout.push(format!("rnn_{dir}.bias"), hd),
        };
        let fwd = rnn("fwd");
        let bwd = rnn("bwd");
        let out_w = layout.push("out.weight", k * 2 * hd);
        let out_b = layout.push("out.bias", k);
        Blocks {
            conv1,
            conv2,
            fwd,
            bwd,
            out_w,
            out_b,
        }
    }

    fn blocks(&self) -> Blocks {
        Self::blocks_for(&self.arch, &mut ParamLayout::default())
    }

    pub fn arch(&self) -> &ApproximatorArch {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn approximate(&self, image: &Image) -> Result<LogitsSequence> {
        Ok(self.forward(image)?.logits)
    }

    pub fn forward(&self, image: &Image) -> Result<ApproximatorTape> {
        let (h, w) = (image.height(), image.width());
        if h != self.arch.input_height || w == 0 || w % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "approximator needs height {} and a width divisible by 4, got {h}x{w}",
                self.arch.input_height
            )));
        }
        let a = &self.arch;
        let b = self.blocks();
        let p = &self.params;
        let input = Tensor::from_plane(h, w, image.data().to_vec());
        let mut a1 = ops::conv2d(&input, &p[b.conv1.0.clone()], &p[b.conv1.1.clone()], a.conv1_channels, 3);
        ops::relu_inplace(&mut a1);
        let p1 = ops::avg_pool2(&a1);
        let mut a2 = ops::conv2d(&p1, &p[b.conv2.0.clone()], &p[b.conv2.1.clone()], a.conv2_channels, 3);
        ops::relu_inplace(&mut a2);
        let p2 = ops::avg_pool2(&a2);

        let t_len = p2.width;
        let f = a.features();
        let rows = p2.height;
        // feats[t][c * rows + y]
        let mut feats = vec![0.0; t_len * f];
        for c in 0..p2.channels {
            for y in 0..rows {
                for t in 0..t_len {
                    feats[t * f + c * rows + y] = p2.data[c * rows * t_len + y * t_len + t];
                }
            }
        }

        let hd = a.hidden;
        let h_fwd = rnn_forward(p, &b.fwd, &feats, t_len, f, hd, false);
        let h_bwd = rnn_forward(p, &b.bwd, &feats, t_len, f, hd, true);

        let k = a.classes;
        let wo = &p[b.out_w.clone()];
        let bo = &p[b.out_b.clone()];
        let mut values = vec![0.0; t_len * k];
        let mut probs = vec![0.0; t_len * k];
        for t in 0..t_len {
            let hf = &h_fwd[t * hd..(t + 1) * hd];
            let hb = &h_bwd[t * hd..(t + 1) * hd];
            let z = &mut values[t * k..(t + 1) * k];
            for (j, zj) in z.iter_mut().enumerate() {
                let row = &wo[j * 2 * hd..(j + 1) * 2 * hd];
                *zj = bo[j]
                    + row[..hd].iter().zip(hf).map(|(x, y)| x * y).sum::<f64>()
                    + row[hd..].iter().zip(hb).map(|(x, y)| x * y).sum::<f64>();
            }
            let lse = ops::log_sum_exp(z);
            for (j, zj) in z.iter_mut().enumerate() {
                *zj -= lse;
                probs[t * k + j] = zj.exp();
            }
        }
        Ok(ApproximatorTape {
            input,
            a1,
            p1,
            a2,
            feats,
            h_fwd,
            h_bwd,
            probs,
            logits: LogitsSequence {
                timesteps: t_len,
                classes: k,
                values,
            },
        })
    }

    /// Backpropagate dL/d(log-probabilities). Returns dL/d(input pixels).
    pub fn backward(&self, tape: &ApproximatorTape, grad_logprobs: &[f64], mut grad_params: Option<&mut [f64]>) -> Vec<f64> {
        let a = &self.arch;
        let b = self.blocks();
        let p = &self.params;
        let (k, hd, f) = (a.classes, a.hidden, a.features());
        let t_len = tape.logits.timesteps;

        // through log-softmax
        let mut dz = vec![0.0; t_len * k];
        for t in 0..t_len {
            let g = &grad_logprobs[t * k..(t + 1) * k];
            let total: f64 = g.iter().sum();
            for j in 0..k {
                dz[t * k + j] = g[j] - tape.probs[t * k + j] * total;
            }
        }

        let wo = &p[b.out_w.clone()];
        let mut dh_f = vec![0.0; t_len * hd];
        let mut dh_b = vec![0.0; t_len * hd];
        for t in 0..t_len {
            let hf = &tape.h_fwd[t * hd..(t + 1) * hd];
            let hb = &tape.h_bwd[t * hd..(t + 1) * hd];
            for j in 0..k {
                let d = dz[t * k + j];
                if d == 0.0 {
                    continue;
                }
                let row = &wo[j * 2 * hd..(j + 1) * 2 * hd];
                for u in 0..hd {
                    dh_f[t * hd + u] += d * row[u];
                    dh_b[t * hd + u] += d * row[hd + u];
                }
                if let Some(g) = grad_params.as_deref_mut() {
                    let gw = &mut g[b.out_w.start + j * 2 * hd..b.out_w.start + (j + 1) * 2 * hd];
                    for u in 0..hd {
                        gw[u] += d * hf[u];
                        gw[hd + u] += d * hb[u];
                    }
                    g[b.out_b.start + j] += d;
                }
            }
        }

        let mut dfeats = vec![0.0; t_len * f];
        rnn_backward(p, &b.fwd, tape, &tape.h_fwd, &dh_f, &mut dfeats, t_len, f, hd, false, grad_params.as_deref_mut());
        rnn_backward(p, &b.bwd, tape, &tape.h_bwd, &dh_b, &mut dfeats, t_len, f, hd, true, grad_params.as_deref_mut());

        let rows = a.input_height / 4;
        let mut dp2 = Tensor::zeros(a.conv2_channels, rows, t_len);
        for c in 0..a.conv2_channels {
            for y in 0..rows {
                for t in 0..t_len {
                    dp2.data[c * rows * t_len + y * t_len + t] = dfeats[t * f + c * rows + y];
                }
            }
        }
        let mut da2 = ops::avg_pool2_backward(&dp2, tape.a2.height, tape.a2.width);
        ops::relu_backward_inplace(&tape.a2, &mut da2);
        let dp1 = conv_back(p, &b.conv2, &tape.p1, &da2, grad_params.as_deref_mut());
        let mut da1 = ops::avg_pool2_backward(&dp1, tape.a1.height, tape.a1.width);
        ops::relu_backward_inplace(&tape.a1, &mut da1);
        conv_back(p, &b.conv1, &tape.input, &da1, grad_params).data
    }
}

fn conv_back(
    p: &[f64],
    block: &(Range<usize>, Range<usize>),
    input: &Tensor,
    grad_out: &Tensor,
    grads: Option<&mut [f64]>,
) -> Tensor {
    let (wr, br) = block;
    match grads {
        Some(g) => {
            let (gw, gb) = g[wr.start..br.end].split_at_mut(wr.len());
            ops::conv2d_backward(input, &p[wr.clone()], grad_out, 3, Some((gw, gb)))
        }
        None => ops::conv2d_backward(input, &p[wr.clone()], grad_out, 3, None),
    }
}

fn rnn_forward(p: &[f64], rnn: &Rnn, feats: &[f64], t_len: usize, f: usize, hd: usize, reverse: bool) -> Vec<f64> {
    let wx = &p[rnn.wx.clone()];
    let wh = &p[rnn.wh.clone()];
    let bias = &p[rnn.b.clone()];
    let mut hs = vec![0.0; t_len * hd];
    let mut prev = vec![0.0; hd];
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let x = &feats[t * f..(t + 1) * f];
        for u in 0..hd {
            let mut s = bias[u];
            s += wx[u * f..(u + 1) * f].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            s += wh[u * hd..(u + 1) * hd].iter().zip(&prev).map(|(a, b)| a * b).sum::<f64>();
            hs[t * hd + u] = s.tanh();
        }
        prev.copy_from_slice(&hs[t * hd..(t + 1) * hd]);
    }
    hs
}

#[allow(clippy::too_many_arguments)]
fn rnn_backward(
    p: &[f64],
    rnn: &Rnn,
    tape: &ApproximatorTape,
    hs: &[f64],
    dh_out: &[f64],
    dfeats: &mut [f64],
    t_len: usize,
    f: usize,
    hd: usize,
    reverse: bool,
    mut grads: Option<&mut [f64]>,
) {
    let wx = &p[rnn.wx.clone()];
    let wh = &p[rnn.wh.clone()];
    let mut carry = vec![0.0; hd];
    let mut da = vec![0.0; hd];
    for step in (0..t_len).rev() {
        let t = if reverse { t_len - 1 - step } else { step };
        let prev_t = if step == 0 {
            None
        } else if reverse {
            Some(t + 1)
        } else {
            Some(t - 1)
        };
        for u in 0..hd {
            let h = hs[t * hd + u];
            da[u] = (dh_out[t * hd + u] + carry[u]) * (1.0 - h * h);
        }
        let x = &tape.feats[t * f..(t + 1) * f];
        let dx = &mut dfeats[t * f..(t + 1) * f];
        carry.fill(0.0);
        for u in 0..hd {
            let d = da[u];
            if d == 0.0 {
                continue;
            }
            for (dxi, w) in dx.iter_mut().zip(&wx[u * f..(u + 1) * f]) {
                *dxi += d * w;
            }
            if prev_t.is_some() {
                for (c, w) in carry.iter_mut().zip(&wh[u * hd..(u + 1) * hd]) {
                    *c += d * w;
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let gx = &mut g[rnn.wx.start + u * f..rnn.wx.start + (u + 1) * f];
                for (gi, xi) in gx.iter_mut().zip(x) {
                    *gi += d * xi;
                }
                if let Some(pt) = prev_t {
                    let hp = &hs[pt * hd..(pt + 1) * hd];
                    let gh = &mut g[rnn.wh.start + u * hd..rnn.wh.start + (u + 1) * hd];
                    for (gi, hi) in gh.iter_mut().zip(hp) {
                        *gi += d * hi;
                    }
                }
                g[rnn.b.start + u] += d;
            }
        }
    }
}
