//! Minimal CHW tensors and the layers the encoder–decoder needs, each with a
//! hand-written backward pass. Convolutions are 3×3, stride 1, zero padded.

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_planes(height: usize, width: usize, planes: &[&[T]]) -> Self {
        let mut data = Vec::with_capacity(planes.len() * height * width);
        for p in planes {
            debug_assert_eq!(p.len(), height * width);
            data.extend_from_slice(p);
        }
        Self {
            channels: planes.len(),
            height,
            width,
            data,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    fn same_shape(&self) -> Self {
        Self::zeros(self.channels, self.height, self.width)
    }
}

/// Eight-lane dot product; fixed association order keeps results reproducible.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let (x, y) = (&a[k * 8..k * 8 + 8], &b[k * 8..k * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for k in chunks * 8..a.len() {
        tail += a[k] * b[k];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Valid output columns `[x0, x1)` and rows `[y0, y1)` for a tap offset.
#[inline]
fn span(offset: isize, len: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset.max(0)) as usize;
    (lo, hi)
}

/// A 3×3 convolution whose weights live in a shared flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Offset of the `[out][in][3][3]` weights; biases follow directly.
    pub offset: usize,
}

impl Conv3x3 {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * 9
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    pub fn forward<T: Real>(&self, params: &[T], input: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(input.channels, self.in_channels);
        let (h, w) = (input.height, input.width);
        let weights = &params[self.offset..self.offset + self.weight_len()];
        let bias = &params[self.offset + self.weight_len()..self.offset + self.param_len()];
        let mut out = Tensor::zeros(self.out_channels, h, w);
        let n = h * w;
        for o in 0..self.out_channels {
            let plane = &mut out.data[o * n..(o + 1) * n];
            plane.fill(bias[o]);
            for i in 0..self.in_channels {
                let src = input.plane(i);
                let kernel = &weights[(o * self.in_channels + i) * 9..][..9];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, w);
                        let wv = kernel[ky * 3 + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            axpy(
                                wv,
                                &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)],
                                &mut plane[y * w + x0..y * w + x1],
                            );
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when requested.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: &mut [T],
        want_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (h, w) = (input.height, input.width);
        let n = h * w;
        let wl = self.weight_len();
        let weights = &params[self.offset..self.offset + wl];
        let (gw, gb) = grads[self.offset..self.offset + self.param_len()].split_at_mut(wl);
        let mut grad_in = want_input_grad.then(|| input.same_shape());
        for o in 0..self.out_channels {
            let go = grad_out.plane(o);
            gb[o] += go.iter().copied().sum::<T>();
            for i in 0..self.in_channels {
                let src = input.plane(i);
                let base = (o * self.in_channels + i) * 9;
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(dx, w);
                        let sx0 = (x0 as isize + dx) as usize;
                        let len = x1 - x0;
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            acc += dot(&go[y * w + x0..y * w + x1], &src[sy * w + sx0..sy * w + sx0 + len]);
                        }
                        gw[base + ky * 3 + kx] += acc;
                        if let Some(gi) = grad_in.as_mut() {
                            let wv = weights[base + ky * 3 + kx];
                            let gplane = &mut gi.data[i * n..(i + 1) * n];
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                axpy(
                                    wv,
                                    &go[y * w + x0..y * w + x1],
                                    &mut gplane[sy * w + sx0..sy * w + sx0 + len],
                                );
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(pre: &Tensor<T>) -> Tensor<T> {
    let mut out = pre.clone();
    for v in &mut out.data {
        *v = *v * sigmoid(*v);
    }
    out
}

pub fn silu_backward<T: Real>(pre: &Tensor<T>, grad_post: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_post.clone();
    for (gv, &x) in g.data.iter_mut().zip(&pre.data) {
        let s = sigmoid(x);
        *gv *= s * (T::one() + x * (T::one() - s));
    }
    g
}

pub fn avg_pool2<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = Tensor::zeros(input.channels, h, w);
    let quarter = T::lit(0.25);
    for c in 0..input.channels {
        let src = input.plane(c);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * input.width + 2 * x;
                let s = src[i] + src[i + 1] + src[i + input.width] + src[i + input.width + 1];
                out.data[c * h * w + y * w + x] = s * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (grad_out.height * 2, grad_out.width * 2);
    let mut g = Tensor::zeros(grad_out.channels, h, w);
    let quarter = T::lit(0.25);
    for c in 0..grad_out.channels {
        for y in 0..h {
            for x in 0..w {
                g.data[c * h * w + y * w + x] =
                    grad_out.data[c * grad_out.plane_len() + (y / 2) * grad_out.width + x / 2] * quarter;
            }
        }
    }
    g
}

pub fn upsample2<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input.height * 2, input.width * 2);
    let mut out = Tensor::zeros(input.channels, h, w);
    for c in 0..input.channels {
        for y in 0..h {
            for x in 0..w {
                out.data[c * h * w + y * w + x] =
                    input.data[c * input.plane_len() + (y / 2) * input.width + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (grad_out.height / 2, grad_out.width / 2);
    let mut g = Tensor::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        let src = grad_out.plane(c);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * grad_out.width + 2 * x;
                g.data[c * h * w + y * w + x] =
                    src[i] + src[i + 1] + src[i + grad_out.width] + src[i + grad_out.width + 1];
            }
        }
    }
    g
}

pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Tensor {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

pub fn split<T: Real>(t: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let n = t.plane_len();
    let (a, b) = t.data.split_at(first * n);
    (
        Tensor {
            channels: first,
            height: t.height,
            width: t.width,
            data: a.to_vec(),
        },
        Tensor {
            channels: t.channels - first,
            height: t.height,
            width: t.width,
            data: b.to_vec(),
        },
    )
}

pub fn add_assign<T: Real>(acc: &mut Tensor<T>, other: &Tensor<T>) {
    for (a, &b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct zero-padded correlation, the textbook definition.
    fn naive_conv(input: &Tensor<f64>, conv: &Conv3x3, params: &[f64]) -> Tensor<f64> {
        let (h, w) = (input.height, input.width);
        let mut out = Tensor::zeros(conv.out_channels, h, w);
        for o in 0..conv.out_channels {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = params[conv.offset + conv.weight_len() + o];
                    for i in 0..conv.in_channels {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, x + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wv = params[conv.offset + ((o * conv.in_channels + i) * 3 + ky as usize) * 3 + kx as usize];
                                acc += wv * input.data[i * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out.data[o * h * w + y as usize * w + x as usize] = acc;
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * scale).collect()
    }

    #[test]
    fn conv_matches_naive_definition() {
        let conv = Conv3x3 {
            in_channels: 2,
            out_channels: 3,
            offset: 5,
        };
        let mut params = vec![0.0; 5];
        params.extend(ramp(conv.param_len(), 0.3));
        let input = Tensor {
            channels: 2,
            height: 5,
            width: 7,
            data: ramp(70, 1.0),
        };
        let fast = conv.forward(&params, &input);
        let slow = naive_conv(&input, &conv, &params);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> - bias terms == <x, conv^T g>
        let conv = Conv3x3 {
            in_channels: 2,
            out_channels: 2,
            offset: 0,
        };
        let mut params = ramp(conv.param_len(), 0.5);
        for b in &mut params[conv.weight_len()..] {
            *b = 0.0;
        }
        let x = Tensor {
            channels: 2,
            height: 6,
            width: 4,
            data: ramp(48, 1.0),
        };
        let g = Tensor {
            channels: 2,
            height: 6,
            width: 4,
            data: ramp(48, 0.7).into_iter().rev().collect(),
        };
        let y = conv.forward(&params, &x);
        let mut grads = vec![0.0; conv.param_len()];
        let gx = conv.backward(&params, &x, &g, &mut grads, true).unwrap();
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // weight gradient of a linear map equals <d y / d w, g>
        let wsum: f64 = grads[..conv.weight_len()].iter().zip(&params).map(|(a, b)| a * b).sum();
        assert!((wsum - lhs).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_pairs() {
        let x = Tensor {
            channels: 1,
            height: 4,
            width: 4,
            data: ramp(16, 1.0),
        };
        let g = Tensor {
            channels: 1,
            height: 2,
            width: 2,
            data: vec![1.0, -2.0, 0.5, 3.0],
        };
        let lp: f64 = avg_pool2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rp: f64 = avg_pool2_backward(&g).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lp - rp).abs() < 1e-12);
        let lu: f64 = upsample2(&g).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let ru: f64 = upsample2_backward(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        assert!((lu - ru).abs() < 1e-12);
    }

    #[test]
    fn dot_matches_naive() {
        let a = ramp(29, 1.0);
        let b = ramp(29, 0.3);
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
