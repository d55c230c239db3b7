//! Dense CHW tensor kernels with hand-written backward passes.

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_plane(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Tensor {
            channels: 1,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(self.channels, self.height, self.width)
    }
}

/// 3x3 (or any odd `k`) convolution with zero "same" padding.
/// `weight` is laid out `[out][in][ky][kx]`.
pub fn conv2d(input: &Tensor, weight: &[f64], bias: &[f64], out_channels: usize, k: usize) -> Tensor {
    let (cin, h, w) = (input.channels, input.height, input.width);
    debug_assert_eq!(weight.len(), out_channels * cin * k * k);
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(out_channels, h, w);
    let plane = h * w;
    for o in 0..out_channels {
        let out_plane = &mut out.data[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for i in 0..cin {
            let in_plane = &input.data[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let wv = weight[((o * cin + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = col_range(dx, w);
                    for y in row_range(dy, h) {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut out_plane[y * w + x0..y * w + x1];
                        let src_start = (sy * w) as isize + x0 as isize + dx;
                        let src = &in_plane[src_start as usize..src_start as usize + (x1 - x0)];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv2d`]. Accumulates weight and bias gradients when given
/// and returns the gradient with respect to the input.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    k: usize,
    param_grads: Option<(&mut [f64], &mut [f64])>,
) -> Tensor {
    let (cin, h, w) = (input.channels, input.height, input.width);
    let cout = grad_out.channels;
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut grad_in = input.zeros_like();
    let mut param_grads = param_grads;
    for o in 0..cout {
        let g_plane = &grad_out.data[o * plane..(o + 1) * plane];
        if let Some((_, gb)) = param_grads.as_mut() {
            gb[o] += g_plane.iter().sum::<f64>();
        }
        for i in 0..cin {
            let in_plane = &input.data[i * plane..(i + 1) * plane];
            let gi_plane = &mut grad_in.data[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let (x0, x1) = col_range(dx, w);
                    let mut acc = 0.0;
                    for y in row_range(dy, h) {
                        let sy = (y as isize + dy) as usize;
                        let g = &g_plane[y * w + x0..y * w + x1];
                        let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                        let src = &in_plane[s0..s0 + (x1 - x0)];
                        acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        let gi = &mut gi_plane[s0..s0 + (x1 - x0)];
                        for (d, gv) in gi.iter_mut().zip(g) {
                            *d += wv * gv;
                        }
                    }
                    if let Some((gw, _)) = param_grads.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    grad_in
}

#[inline]
fn col_range(dx: isize, w: usize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)).max(x0 as isize) as usize;
    (x0.min(w), x1.min(w))
}

#[inline]
fn row_range(dy: isize, h: usize) -> std::ops::Range<usize> {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy.max(0)).max(0) as usize;
    y0.min(h)..y1.max(y0.min(h))
}

pub fn relu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero gradient entries where the (post-activation) output is not positive.
pub fn relu_backward_inplace(activated: &Tensor, grad: &mut Tensor) {
    for (g, a) in grad.data.iter_mut().zip(&activated.data) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 average pooling; height and width must be even.
pub fn avg_pool2(input: &Tensor) -> Tensor {
    let (h2, w2) = (input.height / 2, input.width / 2);
    let mut out = Tensor::zeros(input.channels, h2, w2);
    for c in 0..input.channels {
        let src = input.channel(c);
        for y in 0..h2 {
            for x in 0..w2 {
                let a = src[2 * y * input.width + 2 * x];
                let b = src[2 * y * input.width + 2 * x + 1];
                let cc = src[(2 * y + 1) * input.width + 2 * x];
                let d = src[(2 * y + 1) * input.width + 2 * x + 1];
                out.data[c * h2 * w2 + y * w2 + x] = 0.25 * (a + b + cc + d);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &Tensor, height: usize, width: usize) -> Tensor {
    let mut g = Tensor::zeros(grad_out.channels, height, width);
    let (h2, w2) = (grad_out.height, grad_out.width);
    for c in 0..grad_out.channels {
        for y in 0..h2 {
            for x in 0..w2 {
                let v = 0.25 * grad_out.data[c * h2 * w2 + y * w2 + x];
                let base = c * height * width;
                g.data[base + 2 * y * width + 2 * x] += v;
                g.data[base + 2 * y * width + 2 * x + 1] += v;
                g.data[base + (2 * y + 1) * width + 2 * x] += v;
                g.data[base + (2 * y + 1) * width + 2 * x + 1] += v;
            }
        }
    }
    g
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(input: &Tensor) -> Tensor {
    let (h, w) = (input.height * 2, input.width * 2);
    let mut out = Tensor::zeros(input.channels, h, w);
    for c in 0..input.channels {
        for y in 0..h {
            for x in 0..w {
                out.data[c * h * w + y * w + x] = input.data[c * input.plane() + (y / 2) * input.width + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let (h, w) = (grad_out.height / 2, grad_out.width / 2);
    let mut g = Tensor::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        for y in 0..grad_out.height {
            for x in 0..grad_out.width {
                g.data[c * h * w + (y / 2) * w + x / 2] += grad_out.data[c * grad_out.plane() + y * grad_out.width + x];
            }
        }
    }
    g
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

pub fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let cut = first * t.plane();
    (
        Tensor {
            channels: first,
            height: t.height,
            width: t.width,
            data: t.data[..cut].to_vec(),
        },
        Tensor {
            channels: t.channels - first,
            height: t.height,
            width: t.width,
            data: t.data[cut..].to_vec(),
        },
    )
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &Tensor, weight: &[f64], bias: &[f64], cout: usize, k: usize) -> Tensor {
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(cout, input.height, input.width);
        for o in 0..cout {
            for y in 0..input.height as isize {
                for x in 0..input.width as isize {
                    let mut s = bias[o];
                    for i in 0..input.channels {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (yy, xx) = (y + ky - pad, x + kx - pad);
                                if yy < 0 || xx < 0 || yy >= input.height as isize || xx >= input.width as isize {
                                    continue;
                                }
                                s += weight[((o * input.channels + i) * k + ky as usize) * k + kx as usize]
                                    * input.data[i * input.plane() + yy as usize * input.width + xx as usize];
                            }
                        }
                    }
                    out.data[o * input.plane() + y as usize * input.width + x as usize] = s;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive() {
        let input = Tensor {
            channels: 2,
            height: 5,
            width: 7,
            data: pseudo(70, 1),
        };
        let w = pseudo(3 * 2 * 9, 2);
        let b = pseudo(3, 3);
        let fast = conv2d(&input, &w, &b, 3, 3);
        let slow = naive_conv(&input, &w, &b, 3, 3);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and w: check both gradients against the inner product.
        let input = Tensor {
            channels: 2,
            height: 4,
            width: 6,
            data: pseudo(48, 4),
        };
        let w = pseudo(2 * 2 * 9, 5);
        let zero_b = vec![0.0; 2];
        let g = Tensor {
            channels: 2,
            height: 4,
            width: 6,
            data: pseudo(48, 6),
        };
        let y = conv2d(&input, &w, &zero_b, 2, 3);
        let ip: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 2];
        let gi = conv2d_backward(&input, &w, &g, 3, Some((&mut gw, &mut gb)));
        let via_input: f64 = gi.data.iter().zip(&input.data).map(|(a, b)| a * b).sum();
        let via_weight: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((ip - via_input).abs() < 1e-10);
        assert!((ip - via_weight).abs() < 1e-10);
        assert!((gb[0] - g.channel(0).iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_up_to_scale() {
        let x = Tensor {
            channels: 1,
            height: 4,
            width: 4,
            data: pseudo(16, 7),
        };
        let u = upsample2(&avg_pool2(&x));
        assert_eq!(u.data.len(), 16);
        let g = Tensor {
            channels: 1,
            height: 2,
            width: 2,
            data: pseudo(4, 8),
        };
        let p = avg_pool2(&x);
        let lhs: f64 = p.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let back = avg_pool2_backward(&g, 4, 4);
        let rhs: f64 = back.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let up = upsample2(&g);
        let lhs: f64 = up.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = upsample2_backward(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_handles_infinities() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
