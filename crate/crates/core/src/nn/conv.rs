//! 2-D convolution (im2col + GEMM) and spatial resampling layers.
//!
//! Feature maps are `(C, H, W)` arrays; batching is the caller's loop.

use crate::num::{c, Real};
use ndarray::{Array1, Array2, Array3};

/// Same-padded, stride-1 convolution with odd kernel size.
///
/// The kernel is stored flattened as `(out_c, in_c*kh*kw)` so forward and
/// backward are single GEMMs against the im2col patch matrix.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Real> {
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T: Real> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache<T: Real> {
    patches: Array2<T>,
    height: usize,
    width: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(w4: ndarray::Array4<T>, b: Array1<T>) -> Self {
        let (out_c, in_c, kh, kw) = w4.dim();
        debug_assert_eq!(out_c, b.len());
        let w = w4
            .into_shape_with_order((out_c, in_c * kh * kw))
            .expect("kernel reshape");
        Conv2d { w, b, in_c, kh, kw }
    }

    pub fn out_channels(&self) -> usize {
        self.w.nrows()
    }

    fn im2col(&self, x: &Array3<T>) -> Array2<T> {
        let (in_c, h, w) = x.dim();
        debug_assert_eq!(in_c, self.in_c);
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let k = in_c * self.kh * self.kw;
        let mut patches = Array2::zeros((h * w, k));
        for y in 0..h {
            for xx in 0..w {
                let row = y * w + xx;
                let mut col = 0;
                for ci in 0..in_c {
                    for dy in 0..self.kh {
                        let sy = y as isize + dy as isize - ph as isize;
                        for dx in 0..self.kw {
                            let sx = xx as isize + dx as isize - pw as isize;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                patches[[row, col]] = x[[ci, sy as usize, sx as usize]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
        patches
    }

    fn col2im(&self, gpatches: &Array2<T>, h: usize, w: usize) -> Array3<T> {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let mut gx = Array3::zeros((self.in_c, h, w));
        for y in 0..h {
            for xx in 0..w {
                let row = y * w + xx;
                let mut col = 0;
                for ci in 0..self.in_c {
                    for dy in 0..self.kh {
                        let sy = y as isize + dy as isize - ph as isize;
                        for dx in 0..self.kw {
                            let sx = xx as isize + dx as isize - pw as isize;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                gx[[ci, sy as usize, sx as usize]] += gpatches[[row, col]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn forward(&self, x: &Array3<T>) -> (Array3<T>, Conv2dCache<T>) {
        let (_, h, w) = x.dim();
        let patches = self.im2col(x);
        let y_mat = patches.dot(&self.w.t()); // (H·W, out_c)
        let out_c = self.out_channels();
        let mut y = Array3::zeros((out_c, h, w));
        for oc in 0..out_c {
            let bias = self.b[oc];
            for yy in 0..h {
                for xx in 0..w {
                    y[[oc, yy, xx]] = y_mat[[yy * w + xx, oc]] + bias;
                }
            }
        }
        (y, Conv2dCache { patches, height: h, width: w })
    }

    pub fn backward(
        &self,
        cache: &Conv2dCache<T>,
        gy: &Array3<T>,
    ) -> (Array3<T>, Conv2dGrads<T>) {
        let (out_c, h, w) = gy.dim();
        let mut gy_mat = Array2::zeros((h * w, out_c));
        for oc in 0..out_c {
            for yy in 0..h {
                for xx in 0..w {
                    gy_mat[[yy * w + xx, oc]] = gy[[oc, yy, xx]];
                }
            }
        }
        let gw = gy_mat.t().dot(&cache.patches); // (out_c, K)
        let gb = gy_mat.sum_axis(ndarray::Axis(0));
        let gpatches = gy_mat.dot(&self.w); // (H·W, K)
        let gx = self.col2im(&gpatches, cache.height, cache.width);
        (gx, Conv2dGrads { w: gw, b: gb })
    }

    pub fn zero_grads(&self) -> Conv2dGrads<T> {
        Conv2dGrads {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }
}

impl<T: Real> Conv2dGrads<T> {
    pub fn add(&mut self, other: &Conv2dGrads<T>) {
        self.w += &other.w;
        self.b += &other.b;
    }
}

/// 2×2 average pooling, stride 2.
#[derive(Debug, Clone, Copy)]
pub struct AvgPool2;

impl AvgPool2 {
    pub fn forward<T: Real>(x: &Array3<T>) -> Array3<T> {
        let (ch, h, w) = x.dim();
        let quarter = c::<T>(0.25);
        Array3::from_shape_fn((ch, h / 2, w / 2), |(ci, y, xx)| {
            (x[[ci, 2 * y, 2 * xx]]
                + x[[ci, 2 * y, 2 * xx + 1]]
                + x[[ci, 2 * y + 1, 2 * xx]]
                + x[[ci, 2 * y + 1, 2 * xx + 1]])
                * quarter
        })
    }

    pub fn backward<T: Real>(gy: &Array3<T>, in_h: usize, in_w: usize) -> Array3<T> {
        let (ch, _, _) = gy.dim();
        let quarter = c::<T>(0.25);
        Array3::from_shape_fn((ch, in_h, in_w), |(ci, y, xx)| {
            gy[[ci, y / 2, xx / 2]] * quarter
        })
    }
}

/// 2×2 max pooling, stride 2; the cache stores the winning offsets.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2;

pub struct MaxPool2Cache {
    argmax: Vec<u8>,
    in_h: usize,
    in_w: usize,
}

impl MaxPool2 {
    pub fn forward<T: Real>(x: &Array3<T>) -> (Array3<T>, MaxPool2Cache) {
        let (ch, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array3::zeros((ch, oh, ow));
        let mut argmax = vec![0u8; ch * oh * ow];
        for ci in 0..ch {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut best = x[[ci, 2 * yy, 2 * xx]];
                    let mut best_k = 0u8;
                    for k in 1..4u8 {
                        let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                        let v = x[[ci, 2 * yy + dy, 2 * xx + dx]];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    y[[ci, yy, xx]] = best;
                    argmax[(ci * oh + yy) * ow + xx] = best_k;
                }
            }
        }
        (y, MaxPool2Cache { argmax, in_h: h, in_w: w })
    }

    pub fn backward<T: Real>(cache: &MaxPool2Cache, gy: &Array3<T>) -> Array3<T> {
        let (ch, oh, ow) = gy.dim();
        let mut gx = Array3::zeros((ch, cache.in_h, cache.in_w));
        for ci in 0..ch {
            for yy in 0..oh {
                for xx in 0..ow {
                    let k = cache.argmax[(ci * oh + yy) * ow + xx];
                    let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                    gx[[ci, 2 * yy + dy, 2 * xx + dx]] += gy[[ci, yy, xx]];
                }
            }
        }
        gx
    }
}

/// Nearest-neighbor 2× upsampling.
#[derive(Debug, Clone, Copy)]
pub struct Upsample2;

impl Upsample2 {
    pub fn forward<T: Real>(x: &Array3<T>) -> Array3<T> {
        let (ch, h, w) = x.dim();
        Array3::from_shape_fn((ch, h * 2, w * 2), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
    }

    pub fn backward<T: Real>(gy: &Array3<T>) -> Array3<T> {
        let (ch, h2, w2) = gy.dim();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut gx = Array3::zeros((ch, h, w));
        for ci in 0..ch {
            for y in 0..h2 {
                for xx in 0..w2 {
                    gx[[ci, y / 2, xx / 2]] += gy[[ci, y, xx]];
                }
            }
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::Initializer;
    use crate::rng::{stream_rng, Stream};
    use ndarray::Array3;

    fn rand_map(ch: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        use rand::Rng;
        let mut rng = stream_rng(seed, Stream::ModelInit, 99);
        Array3::from_shape_simple_fn((ch, h, w), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut init = Initializer::new(stream_rng(0, Stream::ModelInit, 0));
        let conv = Conv2d::new(init.conv::<f64>(3, 2, 3, 3), Array1::from_vec(vec![0.1, -0.2, 0.05]));
        let x = rand_map(2, 5, 4, 1);
        let gy = rand_map(3, 5, 4, 2);

        let (_, cache) = conv.forward(&x);
        let (gx, grads) = conv.backward(&cache, &gy);
        let loss = |conv: &Conv2d<f64>, x: &Array3<f64>| (&conv.forward(x).0 * &gy).sum();

        let h = 1e-6;
        for ci in 0..2 {
            for y in 0..5 {
                for xx in 0..4 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[[ci, y, xx]] += h;
                    xm[[ci, y, xx]] -= h;
                    let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
                    assert!(
                        (fd - gx[[ci, y, xx]]).abs() < 1e-6,
                        "gx[{ci},{y},{xx}]: fd {fd} vs {}",
                        gx[[ci, y, xx]]
                    );
                }
            }
        }
        for i in 0..conv.w.nrows() {
            for j in 0..conv.w.ncols() {
                let mut cp = conv.clone();
                let mut cm = conv.clone();
                cp.w[[i, j]] += h;
                cm.w[[i, j]] -= h;
                let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
                assert!((fd - grads.w[[i, j]]).abs() < 1e-6);
            }
        }
        for oc in 0..3 {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.b[oc] += h;
            cm.b[oc] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - grads.b[oc]).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_and_upsample_backward_match_finite_differences() {
        let x = rand_map(2, 4, 4, 5);
        let gy_avg = rand_map(2, 2, 2, 6);
        let gx = AvgPool2::backward(&gy_avg, 4, 4);
        let h = 1e-6;
        for ci in 0..2 {
            for y in 0..4 {
                for xx in 0..4 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[[ci, y, xx]] += h;
                    xm[[ci, y, xx]] -= h;
                    let fd = ((&AvgPool2::forward(&xp) * &gy_avg).sum()
                        - (&AvgPool2::forward(&xm) * &gy_avg).sum())
                        / (2.0 * h);
                    assert!((fd - gx[[ci, y, xx]]).abs() < 1e-8);
                }
            }
        }

        let (_, cache) = MaxPool2::forward(&x);
        let gx_max = MaxPool2::backward(&cache, &gy_avg);
        for ci in 0..2 {
            for y in 0..4 {
                for xx in 0..4 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[[ci, y, xx]] += h;
                    xm[[ci, y, xx]] -= h;
                    let fd = ((&MaxPool2::forward(&xp).0 * &gy_avg).sum()
                        - (&MaxPool2::forward(&xm).0 * &gy_avg).sum())
                        / (2.0 * h);
                    assert!((fd - gx_max[[ci, y, xx]]).abs() < 1e-8);
                }
            }
        }

        let gy_up = rand_map(2, 8, 8, 7);
        let gx_up = Upsample2::backward(&gy_up);
        for ci in 0..2 {
            for y in 0..4 {
                for xx in 0..4 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[[ci, y, xx]] += h;
                    xm[[ci, y, xx]] -= h;
                    let fd = ((&Upsample2::forward(&xp) * &gy_up).sum()
                        - (&Upsample2::forward(&xm) * &gy_up).sum())
                        / (2.0 * h);
                    assert!((fd - gx_up[[ci, y, xx]]).abs() < 1e-8);
                }
            }
        }
    }
}
