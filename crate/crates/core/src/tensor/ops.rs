use super::{ChannelStats, Real, Shape, Tensor};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidShape("stride must be positive".into()));
        }
        if weight.c != input.c {
            return Err(Error::InvalidShape(format!(
                "kernel expects {} input channels, got {}",
                weight.c, input.c
            )));
        }
        let (ph, pw) = (input.h + 2 * pad, input.w + 2 * pad);
        if weight.h == 0 || weight.w == 0 || weight.h > ph || weight.w > pw {
            return Err(Error::InvalidShape(format!(
                "kernel {}x{} does not fit padded input {ph}x{pw}",
                weight.h, weight.w
            )));
        }
        Ok(ConvGeom {
            in_c: input.c,
            in_h: input.h,
            in_w: input.w,
            out_c: weight.n,
            kh: weight.h,
            kw: weight.w,
            stride,
            pad,
            out_h: (ph - weight.h) / stride + 1,
            out_w: (pw - weight.w) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1×1, stride-1, unpadded kernel reads the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Real>(&self, sample: &[T], cols: &mut [T]) {
        let p = self.positions();
        for c in 0..self.in_c {
            let plane = &sample[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    let dst = &mut cols[row..row + p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy as usize >= self.in_h {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix as usize >= self.in_w {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], sample_grad: &mut [T]) {
        let p = self.positions();
        sample_grad.fill(T::zero());
        for c in 0..self.in_c {
            let plane =
                &mut sample_grad[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    let src = &cols[row..row + p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.in_w {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `weight` is laid out (out_c, in_c, kh, kw).
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding)?;
    if bias.len() != g.out_c {
        return Err(Error::InvalidShape(format!(
            "bias has {} entries for {} output channels",
            bias.len(),
            g.out_c
        )));
    }
    let n = input.shape().n;
    let out_shape = Shape::new(n, g.out_c, g.out_h, g.out_w);
    let mut out = Tensor::zeros(out_shape);
    let (k, p) = (g.patch(), g.positions());
    let w = weight.data();
    par::for_each_chunk_mut(out.data_mut(), out_shape.sample_len(), |i, dst| {
        let sample = input.sample(i);
        let mut cols_buf;
        let cols: &[T] = if g.is_pointwise() {
            sample
        } else {
            cols_buf = vec![T::zero(); k * p];
            g.im2col(sample, &mut cols_buf);
            &cols_buf
        };
        T::gemm(
            g.out_c,
            k,
            p,
            T::one(),
            w,
            (k as isize, 1),
            cols,
            (p as isize, 1),
            T::zero(),
            dst,
            (p as isize, 1),
        );
        for (o, row) in dst.chunks_mut(p).enumerate() {
            let b = bias[o];
            row.iter_mut().for_each(|v| *v = *v + b);
        }
    });
    Ok(out)
}

/// Gradients of a convolution. Fields are `None` when not requested.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Vec<T>>,
}

/// Backward pass of [`conv2d`]. Parameter gradients are summed over the
/// batch in sample order.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    upstream: &Tensor<T>,
    want_input: bool,
    want_params: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding)?;
    let n = input.shape().n;
    let expected = Shape::new(n, g.out_c, g.out_h, g.out_w);
    if upstream.shape() != expected {
        return Err(Error::InvalidShape(format!(
            "upstream {} does not match conv output {expected}",
            upstream.shape()
        )));
    }
    let (k, p) = (g.patch(), g.positions());
    let w = weight.data();

    let per_sample = par::map_range(n, |i| {
        let sample = input.sample(i);
        let dout = upstream.sample(i);
        let mut cols_buf;
        let cols: &[T] = if g.is_pointwise() {
            sample
        } else {
            cols_buf = vec![T::zero(); k * p];
            g.im2col(sample, &mut cols_buf);
            &cols_buf
        };
        let params = want_params.then(|| {
            let mut dw = vec![T::zero(); g.out_c * k];
            T::gemm(
                g.out_c,
                p,
                k,
                T::one(),
                dout,
                (p as isize, 1),
                cols,
                (1, p as isize),
                T::zero(),
                &mut dw,
                (k as isize, 1),
            );
            let db: Vec<T> = dout.chunks(p).map(|row| row.iter().copied().sum()).collect();
            (dw, db)
        });
        let dinput = want_input.then(|| {
            let mut dcols = vec![T::zero(); k * p];
            T::gemm(
                k,
                g.out_c,
                p,
                T::one(),
                w,
                (1, k as isize),
                dout,
                (p as isize, 1),
                T::zero(),
                &mut dcols,
                (p as isize, 1),
            );
            let mut dx = vec![T::zero(); g.in_c * g.in_h * g.in_w];
            if g.is_pointwise() {
                dx.copy_from_slice(&dcols);
            } else {
                g.col2im(&dcols, &mut dx);
            }
            dx
        });
        (params, dinput)
    });

    let mut grads = ConvGrads {
        input: None,
        weight: None,
        bias: None,
    };
    if want_params {
        let mut dw = vec![T::zero(); g.out_c * k];
        let mut db = vec![T::zero(); g.out_c];
        for (params, _) in &per_sample {
            let (sw, sb) = params.as_ref().expect("requested");
            dw.iter_mut().zip(sw).for_each(|(a, b)| *a = *a + *b);
            db.iter_mut().zip(sb).for_each(|(a, b)| *a = *a + *b);
        }
        grads.weight = Some(Tensor::from_vec(weight.shape(), dw)?);
        grads.bias = Some(db);
    }
    if want_input {
        let mut dx = Vec::with_capacity(input.shape().len());
        for (_, d) in per_sample {
            dx.extend(d.expect("requested"));
        }
        grads.input = Some(Tensor::from_vec(input.shape(), dx)?);
    }
    Ok(grads)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` where the forward input was positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != upstream.shape() {
        return Err(Error::InvalidShape(format!(
            "relu upstream {} vs input {}",
            upstream.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Per-pixel softmax across channels, max-shifted.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    let mut scratch = vec![0.0f64; s.c];
    for n in 0..s.n {
        let src = logits.sample(n);
        let base = n * s.sample_len();
        for px in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for (c, e) in scratch.iter_mut().enumerate() {
                *e = src[c * plane + px].f64();
                max = max.max(*e);
            }
            let mut sum = 0.0;
            for e in scratch.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            let dst = out.data_mut();
            for (c, e) in scratch.iter().enumerate() {
                dst[base + c * plane + px] = T::of(e / sum);
            }
        }
    }
    out
}

/// Source taps for one output coordinate of a half-pixel bilinear resize.
#[derive(Debug, Clone, Copy)]
struct Tap1d {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn bilinear_taps(in_len: usize, factor: usize) -> Vec<Tap1d> {
    (0..in_len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = src - lo as f64;
            Tap1d {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Bilinear upsampling by an integer factor (align-corners off).
pub fn upsample_bilinear<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::InvalidShape("upsample factor must be >= 1".into()));
    }
    let s = input.shape();
    if factor == 1 {
        return Ok(input.clone());
    }
    let out_shape = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    let ty = bilinear_taps(s.h, factor);
    let tx = bilinear_taps(s.w, factor);
    let mut out = Tensor::zeros(out_shape);
    let out_plane = out_shape.plane();
    par::for_each_chunk_mut(out.data_mut(), out_plane, |idx, dst| {
        let src = input.plane(idx / s.c, idx % s.c);
        for (oy, ry) in ty.iter().enumerate() {
            let row_lo = &src[ry.lo * s.w..(ry.lo + 1) * s.w];
            let row_hi = &src[ry.hi * s.w..(ry.hi + 1) * s.w];
            for (ox, rx) in tx.iter().enumerate() {
                let top = row_lo[rx.lo].f64() * rx.w_lo + row_lo[rx.hi].f64() * rx.w_hi;
                let bottom = row_hi[rx.lo].f64() * rx.w_lo + row_hi[rx.hi].f64() * rx.w_hi;
                dst[oy * out_shape.w + ox] = T::of(top * ry.w_lo + bottom * ry.w_hi);
            }
        }
    });
    Ok(out)
}

/// Transpose of [`upsample_bilinear`].
pub fn upsample_bilinear_backward<T: Real>(
    upstream: &Tensor<T>,
    factor: usize,
    input_shape: Shape,
) -> Result<Tensor<T>> {
    let s = input_shape;
    if factor == 0
        || upstream.shape() != Shape::new(s.n, s.c, s.h * factor, s.w * factor)
    {
        return Err(Error::InvalidShape(format!(
            "upsample upstream {} does not match input {s} at factor {factor}",
            upstream.shape()
        )));
    }
    if factor == 1 {
        return Ok(upstream.clone());
    }
    let ty = bilinear_taps(s.h, factor);
    let tx = bilinear_taps(s.w, factor);
    let ow = s.w * factor;
    let mut grad = Tensor::zeros(s);
    par::for_each_chunk_mut(grad.data_mut(), s.plane(), |idx, dst| {
        let up = upstream.plane(idx / s.c, idx % s.c);
        let mut acc = vec![0.0f64; s.plane()];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let g = up[oy * ow + ox].f64();
                acc[ry.lo * s.w + rx.lo] += g * ry.w_lo * rx.w_lo;
                acc[ry.lo * s.w + rx.hi] += g * ry.w_lo * rx.w_hi;
                acc[ry.hi * s.w + rx.lo] += g * ry.w_hi * rx.w_lo;
                acc[ry.hi * s.w + rx.hi] += g * ry.w_hi * rx.w_hi;
            }
        }
        dst.iter_mut().zip(acc).for_each(|(d, a)| *d = T::of(a));
    });
    Ok(grad)
}

/// Which axes moments are taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsScope {
    /// One entry per sample, moments over (h, w).
    PerSample,
    /// One entry for the batch, moments over (n, h, w).
    PerBatch,
}

/// Per-channel mean and population variance.
pub fn channel_statistics<T: Real>(input: &Tensor<T>, scope: StatsScope) -> Vec<ChannelStats> {
    let s = input.shape();
    let moments = |planes: &mut dyn Iterator<Item = &[T]>| -> (f64, f64) {
        let planes: Vec<&[T]> = planes.collect();
        let count = (planes.len() * s.plane()) as f64;
        let mean = planes
            .iter()
            .flat_map(|p| p.iter())
            .map(|v| v.f64())
            .sum::<f64>()
            / count;
        let var = planes
            .iter()
            .flat_map(|p| p.iter())
            .map(|v| (v.f64() - mean).powi(2))
            .sum::<f64>()
            / count;
        (mean, var)
    };
    match scope {
        StatsScope::PerSample => (0..s.n)
            .map(|n| {
                let (means, vars) = (0..s.c)
                    .map(|c| moments(&mut std::iter::once(input.plane(n, c))))
                    .unzip();
                ChannelStats { means, vars }
            })
            .collect(),
        StatsScope::PerBatch => {
            let (means, vars) = (0..s.c)
                .map(|c| moments(&mut (0..s.n).map(|n| input.plane(n, c))))
                .unzip();
            vec![ChannelStats { means, vars }]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Shape, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 1, 4, 5), |i| i as f64 * 0.5 - 3.0);
        let w = t64(Shape::new(1, 1, 1, 1), vec![1.0]);
        let y = conv2d(&x, &w, &[0.0], 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = Tensor::<f32>::from_fn(Shape::new(1, 3, 6, 6), |i| i as f32);
        let w = Tensor::<f32>::zeros(Shape::new(2, 3, 3, 3));
        let y = conv2d(&x, &w, &[0.25, -1.5], 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 3, 3));
        assert!(y.plane(0, 0).iter().all(|&v| v == 0.25));
        assert!(y.plane(0, 1).iter().all(|&v| v == -1.5));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 2, 5, 4), |i| ((i * 7) % 11) as f64 - 5.0);
        let w = Tensor::<f64>::from_fn(Shape::new(3, 2, 3, 3), |i| ((i * 5) % 7) as f64 * 0.1);
        let b = [0.1, -0.2, 0.3];
        let y = conv2d(&x, &w, &b, 2, 1).unwrap();
        let ys = y.shape();
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..ys.h {
                    for ox in 0..ys.w {
                        let mut acc = b[o];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 4 {
                                        acc += w.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        assert!((y.at(n, o, oy, ox) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3));
        assert!(matches!(conv2d(&x, &w, &[0.0], 1, 1), Err(Error::InvalidShape(_))));
        let w = Tensor::<f32>::zeros(Shape::new(1, 3, 7, 7));
        assert!(matches!(conv2d(&x, &w, &[0.0], 1, 0), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn relu_cases() {
        let x = t64(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = t64(Shape::new(1, 1, 1, 2), vec![0.5, 3.0]);
        assert_eq!(relu(&pos), pos);
        let g = relu_backward(&t64(Shape::new(1, 1, 1, 2), vec![-1.0, 2.0]), &t64(Shape::new(1, 1, 1, 2), vec![7.0, 7.0]))
            .unwrap();
        assert_eq!(g.data(), &[0.0, 7.0]);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax_channels(&Tensor::<f64>::zeros(Shape::new(1, 5, 2, 2)));
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let p = softmax_channels(&t64(Shape::new(1, 2, 1, 1), vec![1000.0, 0.0]));
        assert_eq!(p.data(), &[1.0, 0.0]);

        let p = softmax_channels(&t64(Shape::new(1, 2, 1, 1), vec![2f64.ln(), 0.0]));
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn upsample_identity_and_constant() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 3, 3), |i| i as f64);
        assert_eq!(upsample_bilinear(&x, 1).unwrap(), x);
        let c = Tensor::<f64>::filled(Shape::new(2, 1, 3, 2), 0.7);
        let up = upsample_bilinear(&c, 4).unwrap();
        assert_eq!(up.shape(), Shape::new(2, 1, 12, 8));
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_half_pixel_convention() {
        // 1-D [0, 1] at factor 2: sources -0.25→0 (clamped), 0.25, 0.75, 1.25→hi clamp.
        let x = t64(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]);
        let up = upsample_bilinear(&x, 2).unwrap();
        let got: Vec<f64> = up.plane(0, 0)[..4].to_vec();
        let want = [0.0, 0.25, 0.75, 1.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{got:?}");
        }
    }

    #[test]
    fn statistics_cases() {
        let c = Tensor::<f64>::filled(Shape::new(1, 1, 3, 3), 3.0);
        let s = &channel_statistics(&c, StatsScope::PerSample)[0];
        assert_eq!((s.means[0], s.vars[0]), (3.0, 0.0));

        let x = t64(Shape::new(1, 1, 2, 2), vec![1.0, 3.0, 3.0, 1.0]);
        let s = &channel_statistics(&x, StatsScope::PerSample)[0];
        assert_eq!((s.means[0], s.vars[0]), (2.0, 1.0));

        let one = Tensor::<f64>::from_fn(Shape::new(1, 2, 3, 3), |i| (i as f64).sin());
        let batch = Tensor::stack(&[&one, &one, &one]).unwrap();
        let per_batch = channel_statistics(&batch, StatsScope::PerBatch);
        let per_sample = channel_statistics(&one, StatsScope::PerSample);
        assert_eq!(per_batch.len(), 1);
        for c in 0..2 {
            assert!((per_batch[0].means[c] - per_sample[0].means[c]).abs() < 1e-15);
            assert!((per_batch[0].vars[c] - per_sample[0].vars[c]).abs() < 1e-15);
        }
    }
}
