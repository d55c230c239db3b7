//! Encoder-decoder image cleaner with skip connections.
//!
//! Output is `sigmoid(head(decoder) + skip_gain * (2x - 1))`. The head starts
//! at zero, so a fresh model is a monotone contrast stretch that leaves every
//! pixel on the same side of 0.5.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, Tensor};
use super::optim::ParamLayout;
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessorArch {
    pub levels: usize,
    pub base_channels: usize,
    pub skip_gain: f64,
}

impl Default for PreprocessorArch {
    fn default() -> Self {
        PreprocessorArch {
            levels: 2,
            base_channels: 8,
            skip_gain: 4.0,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: Range<usize>,
    bias: Range<usize>,
    cin: usize,
    cout: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessorModel {
    arch: PreprocessorArch,
    layout: ParamLayout,
    params: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
pub struct PreprocessorTape {
    input: Tensor,
    enc_in: Vec<Tensor>,
    enc_out: Vec<Tensor>,
    dec_in: Vec<Tensor>,
    dec_out: Vec<Tensor>,
    output: Vec<f64>,
}

impl PreprocessorTape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl PreprocessorModel {
    pub fn new(arch: PreprocessorArch, seed: u64) -> Result<Self> {
        if arch.levels == 0 || arch.base_channels == 0 {
            return Err(Error::InvalidArgument("preprocessor needs at least one level and channel".into()));
        }
        let mut layout = ParamLayout::default();
        let blocks = Self::blocks_for(&arch, &mut layout);
        let mut params = vec![0.0; layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &blocks {
            let std = (2.0 / (b.cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for p in &mut params[b.weight.clone()] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(PreprocessorModel { arch, layout, params })
    }

    pub fn from_parts(arch: PreprocessorArch, params: Vec<f64>) -> Result<Self> {
        let mut layout = ParamLayout::default();
        Self::blocks_for(&arch, &mut layout);
        if params.len() != layout.len() {
            return Err(Error::InvalidArgument(format!(
                "preprocessor expects {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        Ok(PreprocessorModel { arch, layout, params })
    }

    fn channels(arch: &PreprocessorArch, level: usize) -> usize {
        arch.base_channels << level
    }

    // enc0..=encL, then dec(L-1)..=dec0; the head occupies the last two blocks of the layout
    fn blocks_for(arch: &PreprocessorArch, layout: &mut ParamLayout) -> Vec<ConvBlock> {
        let mut blocks = Vec::new();
        for l in 0..=arch.levels {
            let cin = if l == 0 { 1 } else { Self::channels(arch, l - 1) };
            let cout = Self::channels(arch, l);
            let weight = layout.push(format!("enc{l}.weight"), cout * cin * 9);
            let bias = layout.push(format!("enc{l}.bias"), cout);
            blocks.push(ConvBlock { weight, bias, cin, cout });
        }
        for l in (0..arch.levels).rev() {
            let cin = Self::channels(arch, l + 1) + Self::channels(arch, l);
            let cout = Self::channels(arch, l);
            let weight = layout.push(format!("dec{l}.weight"), cout * cin * 9);
            let bias = layout.push(format!("dec{l}.bias"), cout);
            blocks.push(ConvBlock { weight, bias, cin, cout });
        }
        layout.push("head.weight", arch.base_channels);
        layout.push("head.bias", 1);
        blocks
    }

    fn conv_blocks(&self) -> Vec<ConvBlock> {
        let mut scratch = ParamLayout::default();
        Self::blocks_for(&self.arch, &mut scratch)
    }

    fn head(&self) -> (Range<usize>, Range<usize>) {
        let n = self.layout.blocks().len();
        (self.layout.blocks()[n - 2].1.clone(), self.layout.blocks()[n - 1].1.clone())
    }

    pub fn arch(&self) -> &PreprocessorArch {
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

    pub fn check_shape(&self, height: usize, width: usize) -> Result<()> {
        let m = 1usize << self.arch.levels;
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} is not divisible by {m} for a {}-level preprocessor",
                self.arch.levels
            )));
        }
        Ok(())
    }

    pub fn preprocess(&self, image: &Image) -> Result<Image> {
        let tape = self.forward(image)?;
        Image::from_vec(image.height(), image.width(), tape.output)
    }

    pub fn forward(&self, image: &Image) -> Result<PreprocessorTape> {
        let (h, w) = (image.height(), image.width());
        self.check_shape(h, w)?;
        let blocks = self.conv_blocks();
        let levels = self.arch.levels;
        let p = &self.params;
        let input = Tensor::from_plane(h, w, image.data().to_vec());

        let mut enc_in = Vec::with_capacity(levels + 1);
        let mut enc_out: Vec<Tensor> = Vec::with_capacity(levels + 1);
        for (l, b) in blocks.iter().take(levels + 1).enumerate() {
            let x = if l == 0 { input.clone() } else { ops::avg_pool2(&enc_out[l - 1]) };
            let mut y = ops::conv2d(&x, &p[b.weight.clone()], &p[b.bias.clone()], b.cout, 3);
            ops::relu_inplace(&mut y);
            enc_in.push(x);
            enc_out.push(y);
        }
        let mut dec_in = Vec::with_capacity(levels);
        let mut dec_out: Vec<Tensor> = Vec::with_capacity(levels);
        for (i, b) in blocks.iter().skip(levels + 1).enumerate() {
            let l = levels - 1 - i;
            let prev = if i == 0 { &enc_out[levels] } else { &dec_out[i - 1] };
            let cat = ops::concat_channels(&ops::upsample2(prev), &enc_out[l]);
            let mut y = ops::conv2d(&cat, &p[b.weight.clone()], &p[b.bias.clone()], b.cout, 3);
            ops::relu_inplace(&mut y);
            dec_in.push(cat);
            dec_out.push(y);
        }

        let (hw, hb) = self.head();
        let top = dec_out.last().expect("at least one level");
        let gain = self.arch.skip_gain;
        let bias = p[hb.start];
        let mut output = vec![0.0; h * w];
        for (i, o) in output.iter_mut().enumerate() {
            let mut z = bias + gain * (2.0 * input.data[i] - 1.0);
            for (c, wc) in p[hw.clone()].iter().enumerate() {
                z += wc * top.data[c * h * w + i];
            }
            *o = ops::sigmoid(z);
        }
        Ok(PreprocessorTape {
            input,
            enc_in,
            enc_out,
            dec_in,
            dec_out,
            output,
        })
    }

    /// Backpropagate `grad_output` (dL/d output pixel). Parameter gradients are
    /// accumulated into `grad_params` when given; the input gradient is returned.
    pub fn backward(&self, tape: &PreprocessorTape, grad_output: &[f64], mut grad_params: Option<&mut [f64]>) -> Vec<f64> {
        let blocks = self.conv_blocks();
        let levels = self.arch.levels;
        let p = &self.params;
        let (h, w) = (tape.input.height, tape.input.width);
        let plane = h * w;
        let (hw, hb) = self.head();
        let gain = self.arch.skip_gain;
        let top = tape.dec_out.last().expect("at least one level");

        let dz: Vec<f64> = grad_output
            .iter()
            .zip(&tape.output)
            .map(|(g, o)| g * o * (1.0 - o))
            .collect();
        let mut grad_input: Vec<f64> = dz.iter().map(|d| d * 2.0 * gain).collect();
        let mut grad_top = top.zeros_like();
        for (c, wc) in p[hw.clone()].iter().enumerate() {
            let tc = &top.data[c * plane..(c + 1) * plane];
            let gt = &mut grad_top.data[c * plane..(c + 1) * plane];
            let mut acc = 0.0;
            for i in 0..plane {
                acc += dz[i] * tc[i];
                gt[i] = wc * dz[i];
            }
            if let Some(g) = grad_params.as_deref_mut() {
                g[hw.start + c] += acc;
            }
        }
        if let Some(g) = grad_params.as_deref_mut() {
            g[hb.start] += dz.iter().sum::<f64>();
        }

        let mut grad_enc: Vec<Tensor> = tape.enc_out.iter().map(Tensor::zeros_like).collect();
        let mut grad = grad_top;
        for i in (0..levels).rev() {
            let b = &blocks[levels + 1 + i];
            let l = levels - 1 - i;
            ops::relu_backward_inplace(&tape.dec_out[i], &mut grad);
            let g_cat = conv_backward(&tape.dec_in[i], p, b, &grad, grad_params.as_deref_mut());
            let up_channels = tape.dec_in[i].channels - tape.enc_out[l].channels;
            let (g_up, g_skip) = ops::split_channels(&g_cat, up_channels);
            for (a, s) in grad_enc[l].data.iter_mut().zip(&g_skip.data) {
                *a += s;
            }
            grad = ops::upsample2_backward(&g_up);
        }
        // `grad` now holds the gradient of the bottleneck output
        for (a, s) in grad_enc[levels].data.iter_mut().zip(&grad.data) {
            *a += s;
        }
        for l in (0..=levels).rev() {
            let b = &blocks[l];
            let mut g = std::mem::replace(&mut grad_enc[l], Tensor::zeros(0, 0, 0));
            ops::relu_backward_inplace(&tape.enc_out[l], &mut g);
            let g_in = conv_backward(&tape.enc_in[l], p, b, &g, grad_params.as_deref_mut());
            if l == 0 {
                for (a, s) in grad_input.iter_mut().zip(&g_in.data) {
                    *a += s;
                }
            } else {
                let below = &tape.enc_out[l - 1];
                let pooled = ops::avg_pool2_backward(&g_in, below.height, below.width);
                for (a, s) in grad_enc[l - 1].data.iter_mut().zip(&pooled.data) {
                    *a += s;
                }
            }
        }
        grad_input
    }
}

fn conv_backward(input: &Tensor, params: &[f64], b: &ConvBlock, grad_out: &Tensor, grads: Option<&mut [f64]>) -> Tensor {
    let weight = &params[b.weight.clone()];
    match grads {
        Some(g) => {
            debug_assert_eq!(b.weight.end, b.bias.start);
            let (gw, gb) = g[b.weight.start..b.bias.end].split_at_mut(b.weight.len());
            ops::conv2d_backward(input, weight, grad_out, 3, Some((gw, gb)))
        }
        None => ops::conv2d_backward(input, weight, grad_out, 3, None),
    }
}
