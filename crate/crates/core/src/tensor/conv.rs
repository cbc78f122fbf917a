//! Batched 2D convolution and transposed convolution.
//!
//! All routines are im2col/col2im reductions to GEMM. Parallelism is over
//! batch examples with disjoint output slices, so results are bit-identical
//! regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> ConvSpec {
        ConvSpec { stride, padding }
    }
}

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be >= 1".to_string()));
    }
    let padded = input + 2 * pad;
    if kernel > padded {
        return Err(Error::shape(
            "conv2d",
            format!("kernel extent {kernel} exceeds padded input extent {padded} (input {input}, pad {pad})"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn deconv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("deconv2d", "stride must be >= 1".to_string()));
    }
    let grown = (input - 1) * stride + kernel;
    if grown < 2 * pad + 1 {
        return Err(Error::shape(
            "deconv2d",
            format!("padding {pad} too large for input {input}, kernel {kernel}, stride {stride}"),
        ));
    }
    Ok(grown - 2 * pad)
}

fn dims4<'a, S: Scalar>(t: &'a Tensor<S>, context: &'static str) -> Result<&'a [usize]> {
    if t.shape().len() != 4 {
        return Err(Error::shape(context, format!("expected rank-4 tensor, got {:?}", t.shape())));
    }
    Ok(t.shape())
}

/// Gathers sliding-window patches of `src` (one example, `[c, sh_dim, sw_dim]`)
/// into `cols[c*kh*kw, ph_count*pw_count]`, reading zeros outside bounds.
/// Patch position `(pi, pj)` samples `src[c, pi*sh + di - ph, pj*sw + dj - pw]`.
#[allow(clippy::too_many_arguments)]
fn gather_cols<S: Scalar>(
    src: &[S],
    c: usize,
    src_h: usize,
    src_w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    ph_count: usize,
    pw_count: usize,
    cols: &mut [S],
) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let npos = ph_count * pw_count;
    debug_assert_eq!(cols.len(), c * kh * kw * npos);
    for c0 in 0..c {
        let plane = &src[c0 * src_h * src_w..(c0 + 1) * src_h * src_w];
        for di in 0..kh {
            for dj in 0..kw {
                let row = ((c0 * kh) + di) * kw + dj;
                let out_row = &mut cols[row * npos..(row + 1) * npos];
                for pi in 0..ph_count {
                    let si = (pi * sh + di) as isize - ph as isize;
                    let base = pi * pw_count;
                    if si < 0 || si >= src_h as isize {
                        out_row[base..base + pw_count].iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src_row = &plane[si as usize * src_w..(si as usize + 1) * src_w];
                    for pj in 0..pw_count {
                        let sj = (pj * sw + dj) as isize - pw as isize;
                        out_row[base + pj] = if sj < 0 || sj >= src_w as isize {
                            S::zero()
                        } else {
                            src_row[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather_cols`]: scatter-adds `cols` back into `dst`.
#[allow(clippy::too_many_arguments)]
fn scatter_cols_add<S: Scalar>(
    dst: &mut [S],
    c: usize,
    dst_h: usize,
    dst_w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    ph_count: usize,
    pw_count: usize,
    cols: &[S],
) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let npos = ph_count * pw_count;
    debug_assert_eq!(cols.len(), c * kh * kw * npos);
    for c0 in 0..c {
        let plane = &mut dst[c0 * dst_h * dst_w..(c0 + 1) * dst_h * dst_w];
        for di in 0..kh {
            for dj in 0..kw {
                let row = ((c0 * kh) + di) * kw + dj;
                let in_row = &cols[row * npos..(row + 1) * npos];
                for pi in 0..ph_count {
                    let si = (pi * sh + di) as isize - ph as isize;
                    if si < 0 || si >= dst_h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[si as usize * dst_w..(si as usize + 1) * dst_w];
                    for pj in 0..pw_count {
                        let sj = (pj * sw + dj) as isize - pw as isize;
                        if sj >= 0 && (sj as usize) < dst_w {
                            dst_row[sj as usize] += in_row[base_idx(pi, pw_count, pj)];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn base_idx(pi: usize, pw_count: usize, pj: usize) -> usize {
    pi * pw_count + pj
}

pub struct ConvShapes {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv_shapes<S: Scalar>(x: &Tensor<S>, kernel: &Tensor<S>, spec: ConvSpec) -> Result<ConvShapes> {
    let xs = dims4(x, "conv2d input")?;
    let ks = dims4(kernel, "conv2d kernel")?;
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {kc} input channels, input has {c_in}"),
        ));
    }
    let oh = conv_out_dim(h, kh, spec.stride.0, spec.padding.0)?;
    let ow = conv_out_dim(w, kw, spec.stride.1, spec.padding.1)?;
    Ok(ConvShapes { n, c_in, c_out, h, w, kh, kw, oh, ow })
}

pub fn deconv_shapes<S: Scalar>(x: &Tensor<S>, kernel: &Tensor<S>, spec: ConvSpec) -> Result<ConvShapes> {
    let xs = dims4(x, "deconv2d input")?;
    let ks = dims4(kernel, "deconv2d kernel")?;
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (kc, c_out, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c_in {
        return Err(Error::shape(
            "deconv2d",
            format!("kernel expects {kc} input channels, input has {c_in}"),
        ));
    }
    let oh = deconv_out_dim(h, kh, spec.stride.0, spec.padding.0)?;
    let ow = deconv_out_dim(w, kw, spec.stride.1, spec.padding.1)?;
    Ok(ConvShapes { n, c_in, c_out, h, w, kh, kw, oh, ow })
}

/// x: `[n, c_in, h, w]`, kernel: `[c_out, c_in, kh, kw]` -> `[n, c_out, oh, ow]`.
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: ConvSpec,
) -> Result<Tensor<S>> {
    let s = conv_shapes(x, kernel, spec)?;
    if let Some(b) = bias {
        if b.shape() != [s.c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} != [{}]", b.shape(), s.c_out),
            ));
        }
    }
    let kk = s.c_in * s.kh * s.kw;
    let npos = s.oh * s.ow;
    let mut out = Tensor::zeros(&[s.n, s.c_out, s.oh, s.ow]);
    let xstride = s.c_in * s.h * s.w;
    let ostride = s.c_out * npos;
    let xd = x.data();
    let kd = kernel.data();
    out.data_mut()
        .par_chunks_mut(ostride)
        .enumerate()
        .for_each(|(i, out_ex)| {
            let mut cols = vec![S::zero(); kk * npos];
            gather_cols(
                &xd[i * xstride..(i + 1) * xstride],
                s.c_in,
                s.h,
                s.w,
                s.kh,
                s.kw,
                spec,
                s.oh,
                s.ow,
                &mut cols,
            );
            unsafe {
                S::gemm(
                    s.c_out,
                    kk,
                    npos,
                    S::one(),
                    kd.as_ptr(),
                    kk as isize,
                    1,
                    cols.as_ptr(),
                    npos as isize,
                    1,
                    S::zero(),
                    out_ex.as_mut_ptr(),
                    npos as isize,
                    1,
                );
            }
            if let Some(b) = bias {
                for c in 0..s.c_out {
                    let bv = b.data()[c];
                    out_ex[c * npos..(c + 1) * npos].iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Ok(out)
}

/// Gradients of `conv2d_forward` given upstream gradient `gy`.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    spec: ConvSpec,
    gy: &[S],
    want_bias: bool,
) -> Result<(Tensor<S>, Tensor<S>, Option<Tensor<S>>)> {
    let s = conv_shapes(x, kernel, spec)?;
    debug_assert_eq!(gy.len(), s.n * s.c_out * s.oh * s.ow);
    let kk = s.c_in * s.kh * s.kw;
    let npos = s.oh * s.ow;
    let xstride = s.c_in * s.h * s.w;
    let ostride = s.c_out * npos;
    let xd = x.data();
    let kd = kernel.data();
    let gd = gy;

    // dX: scatter of K^T * G, disjoint per example.
    let mut gx = Tensor::zeros(x.shape());
    gx.data_mut()
        .par_chunks_mut(xstride)
        .enumerate()
        .for_each(|(i, gx_ex)| {
            let mut cols = vec![S::zero(); kk * npos];
            unsafe {
                S::gemm(
                    kk,
                    s.c_out,
                    npos,
                    S::one(),
                    kd.as_ptr(),
                    1,
                    kk as isize,
                    gd[i * ostride..].as_ptr(),
                    npos as isize,
                    1,
                    S::zero(),
                    cols.as_mut_ptr(),
                    npos as isize,
                    1,
                );
            }
            scatter_cols_add(gx_ex, s.c_in, s.h, s.w, s.kh, s.kw, spec, s.oh, s.ow, &cols);
        });

    // dK: per-example partials, then an order-fixed serial sum.
    let partials: Vec<Vec<S>> = (0..s.n)
        .into_par_iter()
        .map(|i| {
            let mut cols = vec![S::zero(); kk * npos];
            gather_cols(
                &xd[i * xstride..(i + 1) * xstride],
                s.c_in,
                s.h,
                s.w,
                s.kh,
                s.kw,
                spec,
                s.oh,
                s.ow,
                &mut cols,
            );
            let mut gk = vec![S::zero(); s.c_out * kk];
            unsafe {
                S::gemm(
                    s.c_out,
                    npos,
                    kk,
                    S::one(),
                    gd[i * ostride..].as_ptr(),
                    npos as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    npos as isize,
                    S::zero(),
                    gk.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
            gk
        })
        .collect();
    let mut gk = Tensor::zeros(kernel.shape());
    for part in &partials {
        gk.data_mut().iter_mut().zip(part).for_each(|(a, &b)| *a += b);
    }

    let gb = if want_bias {
        let mut b = Tensor::zeros(&[s.c_out]);
        for i in 0..s.n {
            for c in 0..s.c_out {
                let base = i * ostride + c * npos;
                let mut acc = S::zero();
                for v in &gd[base..base + npos] {
                    acc += *v;
                }
                b.data_mut()[c] += acc;
            }
        }
        Some(b)
    } else {
        None
    };
    Ok((gx, gk, gb))
}

/// x: `[n, c_in, h, w]`, kernel: `[c_in, c_out, kh, kw]` -> `[n, c_out, oh, ow]`
/// with `oh = (h-1)*sh - 2*ph + kh`.
pub fn deconv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: ConvSpec,
) -> Result<Tensor<S>> {
    let s = deconv_shapes(x, kernel, spec)?;
    if let Some(b) = bias {
        if b.shape() != [s.c_out] {
            return Err(Error::shape(
                "deconv2d",
                format!("bias shape {:?} != [{}]", b.shape(), s.c_out),
            ));
        }
    }
    let cokk = s.c_out * s.kh * s.kw;
    let npos = s.h * s.w;
    let xstride = s.c_in * npos;
    let ostride = s.c_out * s.oh * s.ow;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = Tensor::zeros(&[s.n, s.c_out, s.oh, s.ow]);
    out.data_mut()
        .par_chunks_mut(ostride)
        .enumerate()
        .for_each(|(i, out_ex)| {
            let mut cols = vec![S::zero(); cokk * npos];
            unsafe {
                S::gemm(
                    cokk,
                    s.c_in,
                    npos,
                    S::one(),
                    kd.as_ptr(),
                    1,
                    cokk as isize,
                    xd[i * xstride..].as_ptr(),
                    npos as isize,
                    1,
                    S::zero(),
                    cols.as_mut_ptr(),
                    npos as isize,
                    1,
                );
            }
            scatter_cols_add(out_ex, s.c_out, s.oh, s.ow, s.kh, s.kw, spec, s.h, s.w, &cols);
            if let Some(b) = bias {
                for c in 0..s.c_out {
                    let bv = b.data()[c];
                    out_ex[c * s.oh * s.ow..(c + 1) * s.oh * s.ow]
                        .iter_mut()
                        .for_each(|v| *v += bv);
                }
            }
        });
    Ok(out)
}

/// Gradients of `deconv2d_forward` given upstream gradient `gy`.
pub fn deconv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    spec: ConvSpec,
    gy: &[S],
    want_bias: bool,
) -> Result<(Tensor<S>, Tensor<S>, Option<Tensor<S>>)> {
    let s = deconv_shapes(x, kernel, spec)?;
    debug_assert_eq!(gy.len(), s.n * s.c_out * s.oh * s.ow);
    let cokk = s.c_out * s.kh * s.kw;
    let npos = s.h * s.w;
    let xstride = s.c_in * npos;
    let ostride = s.c_out * s.oh * s.ow;
    let xd = x.data();
    let kd = kernel.data();
    let gd = gy;

    // dX[ci, pos] = K'[ci, cokk] * gather(gy)[cokk, pos]
    let mut gx = Tensor::zeros(x.shape());
    gx.data_mut()
        .par_chunks_mut(xstride)
        .enumerate()
        .for_each(|(i, gx_ex)| {
            let mut cols = vec![S::zero(); cokk * npos];
            gather_cols(
                &gd[i * ostride..(i + 1) * ostride],
                s.c_out,
                s.oh,
                s.ow,
                s.kh,
                s.kw,
                spec,
                s.h,
                s.w,
                &mut cols,
            );
            unsafe {
                S::gemm(
                    s.c_in,
                    cokk,
                    npos,
                    S::one(),
                    kd.as_ptr(),
                    cokk as isize,
                    1,
                    cols.as_ptr(),
                    npos as isize,
                    1,
                    S::zero(),
                    gx_ex.as_mut_ptr(),
                    npos as isize,
                    1,
                );
            }
        });

    let partials: Vec<Vec<S>> = (0..s.n)
        .into_par_iter()
        .map(|i| {
            let mut cols = vec![S::zero(); cokk * npos];
            gather_cols(
                &gd[i * ostride..(i + 1) * ostride],
                s.c_out,
                s.oh,
                s.ow,
                s.kh,
                s.kw,
                spec,
                s.h,
                s.w,
                &mut cols,
            );
            let mut gk = vec![S::zero(); s.c_in * cokk];
            unsafe {
                S::gemm(
                    s.c_in,
                    npos,
                    cokk,
                    S::one(),
                    xd[i * xstride..].as_ptr(),
                    npos as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    npos as isize,
                    S::zero(),
                    gk.as_mut_ptr(),
                    cokk as isize,
                    1,
                );
            }
            gk
        })
        .collect();
    let mut gk = Tensor::zeros(kernel.shape());
    for part in &partials {
        gk.data_mut().iter_mut().zip(part).for_each(|(a, &b)| *a += b);
    }

    let gb = if want_bias {
        let mut b = Tensor::zeros(&[s.c_out]);
        let plane = s.oh * s.ow;
        for i in 0..s.n {
            for c in 0..s.c_out {
                let base = i * ostride + c * plane;
                let mut acc = S::zero();
                for v in &gd[base..base + plane] {
                    acc += *v;
                }
                b.data_mut()[c] += acc;
            }
        }
        Some(b)
    } else {
        None
    };
    Ok((gx, gk, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution, the independent reference.
    pub fn conv2d_naive(x: &Tensor<f64>, k: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
        let s = conv_shapes(x, k, spec).unwrap();
        let mut out = Tensor::zeros(&[s.n, s.c_out, s.oh, s.ow]);
        for n in 0..s.n {
            for co in 0..s.c_out {
                for i in 0..s.oh {
                    for j in 0..s.ow {
                        let mut acc = 0.0;
                        for ci in 0..s.c_in {
                            for di in 0..s.kh {
                                for dj in 0..s.kw {
                                    let si = (i * spec.stride.0 + di) as isize - spec.padding.0 as isize;
                                    let sj = (j * spec.stride.1 + dj) as isize - spec.padding.1 as isize;
                                    if si >= 0 && sj >= 0 && (si as usize) < s.h && (sj as usize) < s.w {
                                        let xi = ((n * s.c_in + ci) * s.h + si as usize) * s.w + sj as usize;
                                        let ki = ((co * s.c_in + ci) * s.kh + di) * s.kw + dj;
                                        acc += x.data()[xi] * k.data()[ki];
                                    }
                                }
                            }
                        }
                        let oi = ((n * s.c_out + co) * s.oh + i) * s.ow + j;
                        out.data_mut()[oi] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d_forward(&x, &k, None, ConvSpec::new((1, 1), (0, 0))).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn output_shape_matches_shape_law() {
        // 36x64 input, 3x9 kernel, stride (1,2), pad (1,4) -> 36x32
        let x = Tensor::<f64>::zeros(&[1, 1, 36, 64]);
        let k = Tensor::<f64>::zeros(&[1, 1, 3, 9]);
        let y = conv2d_forward(&x, &k, None, ConvSpec::new((1, 2), (1, 4))).unwrap();
        assert_eq!(y.shape(), &[1, 1, 36, 32]);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let spec = ConvSpec::new((1, 1), (1, 1));
        let fast = conv2d_forward(&x, &k, None, spec).unwrap();
        let slow = conv2d_naive(&x, &k, spec);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn deconv_identity_and_width_law() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = deconv2d_forward(&x, &k, None, ConvSpec::new((1, 1), (0, 0))).unwrap();
        assert_eq!(y.data(), x.data());

        // 36x8 input, kernel 3x4, stride (1,2), pad (1,1) -> width 16
        let x = Tensor::<f64>::zeros(&[1, 1, 36, 8]);
        let k = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        let y = deconv2d_forward(&x, &k, None, ConvSpec::new((1, 2), (1, 1))).unwrap();
        assert_eq!(y.shape(), &[1, 1, 36, 16]);
    }

    /// Draws a geometry where the stride exactly divides the padded extent,
    /// so conv followed by the adjoint deconv lands back on the input shape.
    pub fn random_adjoint_geometry(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, ConvSpec) {
        loop {
            let n = rng.gen_range(1..3);
            let ci = rng.gen_range(1..4);
            let co = rng.gen_range(1..4);
            let kh = rng.gen_range(1..5);
            let kw = rng.gen_range(1..5);
            let spec = ConvSpec::new(
                (rng.gen_range(1..3), rng.gen_range(1..3)),
                (rng.gen_range(0..2), rng.gen_range(0..2)),
            );
            let oh = rng.gen_range(1..6);
            let ow = rng.gen_range(1..6);
            let h = (oh - 1) * spec.stride.0 + kh;
            let w = (ow - 1) * spec.stride.1 + kw;
            if h <= 2 * spec.padding.0 || w <= 2 * spec.padding.1 {
                continue;
            }
            let (h, w) = (h - 2 * spec.padding.0, w - 2 * spec.padding.1);
            return (vec![n, ci, h, w], vec![co, ci, kh, kw], spec);
        }
    }

    /// <conv(x, K), y> == <x, deconv(y, K)> where the deconv kernel is the
    /// conv kernel reindexed from [co,ci,kh,kw] to [co(=in),ci(=out),kh,kw].
    #[test]
    fn conv_deconv_adjointness() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..20 {
            let (xshape, kshape, spec) = random_adjoint_geometry(&mut rng);
            let x = rand_tensor(&mut rng, &xshape);
            let k = rand_tensor(&mut rng, &kshape);
            let cx = conv2d_forward(&x, &k, None, spec).unwrap();
            let y = rand_tensor(&mut rng, cx.shape());
            let dy = deconv2d_forward(&y, &k, None, spec).unwrap();
            assert_eq!(dy.shape(), x.shape());
            let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()),
                "case {case}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn shape_mismatch_reports_extents() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f64>::zeros(&[3, 5, 3, 3]);
        let err = conv2d_forward(&x, &k, None, ConvSpec::new((1, 1), (0, 0))).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('5') && msg.contains('2'), "{msg}");

        let k = Tensor::<f64>::zeros(&[3, 2, 6, 3]);
        let err = conv2d_forward(&x, &k, None, ConvSpec::new((1, 1), (0, 0))).unwrap_err();
        assert!(err.to_string().contains("kernel extent 6"), "{err}");
    }
}
