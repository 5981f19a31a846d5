//! Plain (non-recording) kernels shared by the tape and by inference code.
//!
//! Image tensors are `(N, C, H, W)`. Channel-wise helpers accept any rank
//! >= 2 and treat everything after axis 1 as a flattened spatial extent.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

fn dims4(op: &'static str, t: &Tensor<impl Real>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => shape_err(op, format!("expected (N, C, H, W), got {s:?}")),
    }
}

/// `(N, C, S)` view of a tensor with rank >= 2.
pub(crate) fn channel_view(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err(op, format!("expected rank >= 2, got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub fn conv_out_extent(extent: usize, stride: usize) -> usize {
    (extent + 2 - 3) / stride + 1
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, stride: usize, cols: &mut [T]) {
    let ho = conv_out_extent(h, stride);
    let wo = conv_out_extent(w, stride);
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * plane..][..plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, stride: usize, dx: &mut [T]) {
    let ho = conv_out_extent(h, stride);
    let wo = conv_out_extent(w, stride);
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * plane..][..plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    if stride != 1 && stride != 2 {
        return shape_err("conv2d", format!("stride must be 1 or 2, got {stride}"));
    }
    let (n, c, h, w) = dims4("conv2d", x)?;
    let o = match *weight.shape() {
        [o, wc, 3, 3] if wc == c => o,
        ref s => {
            return shape_err(
                "conv2d",
                format!("weight {s:?} incompatible with input channels {c} (3x3 only)"),
            )
        }
    };
    if let Some(b) = bias {
        if b.shape() != [o] {
            return shape_err("conv2d", format!("bias {:?} for {o} outputs", b.shape()));
        }
    }
    if h == 0 || w == 0 {
        return shape_err("conv2d", "empty spatial extent");
    }
    Ok((n, c, h, w, o))
}

/// 3x3 convolution, zero padding 1, stride 1 or 2.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w, o) = check_conv(x, weight, bias, stride)?;
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let plane = ho * wo;
    let mut out = vec![T::zero(); n * o * plane];
    let mut cols = vec![T::zero(); c * 9 * plane];
    for ni in 0..n {
        im2col(
            &x.data()[ni * c * h * w..][..c * h * w],
            c,
            h,
            w,
            stride,
            &mut cols,
        );
        let y = &mut out[ni * o * plane..][..o * plane];
        if let Some(b) = bias {
            for (oc, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            false,
            false,
            o,
            plane,
            c * 9,
            T::one(),
            weight.data(),
            &cols,
            beta,
            y,
        );
    }
    Tensor::new(&[n, o, ho, wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w, o) = check_conv(x, weight, None, stride)?;
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    if grad_out.shape() != [n, o, ho, wo] {
        return shape_err("conv2d_backward", format!("grad {:?}", grad_out.shape()));
    }
    let plane = ho * wo;
    let mut dx = vec![T::zero(); n * c * h * w];
    let mut dw = vec![T::zero(); o * c * 9];
    let mut db = vec![T::zero(); o];
    let mut cols = vec![T::zero(); c * 9 * plane];
    let mut dcols = vec![T::zero(); c * 9 * plane];
    for ni in 0..n {
        let dy = &grad_out.data()[ni * o * plane..][..o * plane];
        for (oc, chunk) in dy.chunks(plane).enumerate() {
            db[oc] = db[oc] + chunk.iter().copied().sum::<T>();
        }
        im2col(
            &x.data()[ni * c * h * w..][..c * h * w],
            c,
            h,
            w,
            stride,
            &mut cols,
        );
        T::gemm(
            false,
            true,
            o,
            c * 9,
            plane,
            T::one(),
            dy,
            &cols,
            T::one(),
            &mut dw,
        );
        T::gemm(
            true,
            false,
            c * 9,
            plane,
            o,
            T::one(),
            weight.data(),
            dy,
            T::zero(),
            &mut dcols,
        );
        col2im(
            &dcols,
            c,
            h,
            w,
            stride,
            &mut dx[ni * c * h * w..][..c * h * w],
        );
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(&[o], db)?,
    ))
}

/// Per-position dense layer over the channel axis: `(N, C, *) -> (N, O, *)`
/// with weight `(O, C)`. For rank-2 input this is an ordinary dense layer.
pub fn linear<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, c, s) = channel_view("linear", x.shape())?;
    let o = match *weight.shape() {
        [o, wc] if wc == c => o,
        ref ws => return shape_err("linear", format!("weight {ws:?} for {c} input channels")),
    };
    if let Some(b) = bias {
        if b.shape() != [o] {
            return shape_err("linear", format!("bias {:?} for {o} outputs", b.shape()));
        }
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[1] = o;
    let mut out = vec![T::zero(); n * o * s];
    for ni in 0..n {
        let xs = &x.data()[ni * c * s..][..c * s];
        let y = &mut out[ni * o * s..][..o * s];
        if s == 1 {
            // dense row: y = W x
            for oc in 0..o {
                let wr = &weight.data()[oc * c..][..c];
                y[oc] = wr.iter().zip(xs).map(|(&a, &b)| a * b).sum();
            }
        } else {
            T::gemm(
                false,
                false,
                o,
                s,
                c,
                T::one(),
                weight.data(),
                xs,
                T::zero(),
                y,
            );
        }
        if let Some(b) = bias {
            for (oc, chunk) in y.chunks_mut(s).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, s) = channel_view("linear_backward", x.shape())?;
    let o = weight.shape()[0];
    let mut dx = vec![T::zero(); n * c * s];
    let mut dw = vec![T::zero(); o * c];
    let mut db = vec![T::zero(); o];
    for ni in 0..n {
        let xs = &x.data()[ni * c * s..][..c * s];
        let dy = &grad_out.data()[ni * o * s..][..o * s];
        for (oc, chunk) in dy.chunks(s).enumerate() {
            db[oc] = db[oc] + chunk.iter().copied().sum::<T>();
        }
        T::gemm(false, true, o, c, s, T::one(), dy, xs, T::one(), &mut dw);
        T::gemm(
            true,
            false,
            c,
            s,
            o,
            T::one(),
            weight.data(),
            dy,
            T::zero(),
            &mut dx[ni * c * s..][..c * s],
        );
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(&[o], db)?,
    ))
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
        (sa, sb) => return shape_err("matmul", format!("{sa:?} x {sb:?}")),
    };
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        false,
        false,
        m,
        n,
        k,
        T::one(),
        a.data(),
        b.data(),
        T::zero(),
        &mut out,
    );
    Tensor::new(&[m, n], out)
}

pub(crate) fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut da = vec![T::zero(); m * k];
    let mut db = vec![T::zero(); k * n];
    T::gemm(
        false,
        true,
        m,
        k,
        n,
        T::one(),
        g.data(),
        b.data(),
        T::zero(),
        &mut da,
    );
    T::gemm(
        true,
        false,
        k,
        n,
        m,
        T::one(),
        a.data(),
        g.data(),
        T::zero(),
        &mut db,
    );
    (
        Tensor::new(a.shape(), da).unwrap(),
        Tensor::new(b.shape(), db).unwrap(),
    )
}

/// Interpolation taps along one axis: `(i0, i1, w0, w1)` per output index,
/// using half-pixel centers and edge clamping.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

fn check_resize(
    op: &'static str,
    x: &Tensor<impl Real>,
    oh: usize,
    ow: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = dims4(op, x)?;
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return shape_err(op, format!("cannot resize {h}x{w} to {oh}x{ow}"));
    }
    Ok((n, c, h, w))
}

pub fn resize_bilinear<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_resize("resize_bilinear", x, oh, ow)?;
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, wy0, wy1) in &ty {
            for &(x0, x1, wx0, wx1) in &tx {
                let v = (plane[y0 * w + x0].as_f64() * wx0 + plane[y0 * w + x1].as_f64() * wx1)
                    * wy0
                    + (plane[y1 * w + x0].as_f64() * wx0 + plane[y1 * w + x1].as_f64() * wx1) * wy1;
                out.push(T::from_f64_lossy(v));
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub(crate) fn resize_bilinear_backward<T: Real>(g: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    if (h, w) == (oh, ow) {
        return g.clone();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![0.0f64; n * c * h * w];
    for (plane, gp) in dx.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gv = gp[oy * ow + ox].as_f64();
                plane[y0 * w + x0] += gv * wy0 * wx0;
                plane[y0 * w + x1] += gv * wy0 * wx1;
                plane[y1 * w + x0] += gv * wy1 * wx0;
                plane[y1 * w + x1] += gv * wy1 * wx1;
            }
        }
    }
    Tensor::new(
        &[n, c, h, w],
        dx.into_iter().map(T::from_f64_lossy).collect(),
    )
    .unwrap()
}

fn nearest_index(d: usize, input: usize, output: usize) -> usize {
    (d * input / output).min(input - 1)
}

pub fn resize_nearest<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_resize("resize_nearest", x, oh, ow)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            let iy = nearest_index(oy, h, oh);
            for ox in 0..ow {
                out.push(plane[iy * w + nearest_index(ox, w, ow)]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub(crate) fn resize_nearest_backward<T: Real>(g: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, gp) in dx.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
        for oy in 0..oh {
            let iy = nearest_index(oy, h, oh);
            for ox in 0..ow {
                let i = iy * w + nearest_index(ox, w, ow);
                plane[i] = plane[i] + gp[oy * ow + ox];
            }
        }
    }
    Tensor::new(&[n, c, h, w], dx).unwrap()
}

/// Concatenate along axis 1.
pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = match xs.first() {
        Some(t) => *t,
        None => return shape_err("concat_channels", "no inputs"),
    };
    let (n, _, s) = channel_view("concat_channels", first.shape())?;
    let mut total_c = 0;
    for t in xs {
        let (tn, tc, ts) = channel_view("concat_channels", t.shape())?;
        if tn != n || ts != s || t.shape()[2..] != first.shape()[2..] {
            return shape_err(
                "concat_channels",
                format!("{:?} vs {:?}", t.shape(), first.shape()),
            );
        }
        total_c += tc;
    }
    let mut out = Vec::with_capacity(n * total_c * s);
    for ni in 0..n {
        for t in xs {
            let tc = t.shape()[1];
            out.extend_from_slice(&t.data()[ni * tc * s..(ni + 1) * tc * s]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = total_c;
    Tensor::new(&shape, out)
}

/// Per-sample channel gather along axis 1. `indices[n]` lists the source
/// channels for sample `n`; repeats are allowed.
pub fn gather_channels<T: Real>(x: &Tensor<T>, indices: &[Vec<usize>]) -> Result<Tensor<T>> {
    let (n, c, s) = channel_view("gather_channels", x.shape())?;
    if indices.len() != n {
        return shape_err(
            "gather_channels",
            format!("{} index lists for batch {n}", indices.len()),
        );
    }
    let k = indices.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(n * k * s);
    for (ni, idx) in indices.iter().enumerate() {
        if idx.len() != k {
            return shape_err("gather_channels", "ragged index lists");
        }
        for &ci in idx {
            if ci >= c {
                return shape_err("gather_channels", format!("channel {ci} out of {c}"));
            }
            out.extend_from_slice(&x.data()[(ni * c + ci) * s..][..s]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[1] = k;
    Tensor::new(&shape, out)
}

/// `(N, C, H, W) -> (N, C)` spatial maximum, plus the flat argmax per plane.
pub fn global_max_pool<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, s) = channel_view("global_max_pool", x.shape())?;
    if s == 0 {
        return shape_err("global_max_pool", "empty spatial extent");
    }
    let mut vals = Vec::with_capacity(n * c);
    let mut arg = Vec::with_capacity(n * c);
    for plane in x.data().chunks(s) {
        let (i, v) =
            plane.iter().enumerate().fold(
                (0, plane[0]),
                |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
            );
        vals.push(v);
        arg.push(i);
    }
    Ok((Tensor::new(&[n, c], vals)?, arg))
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, s) = channel_view("global_avg_pool", x.shape())?;
    if s == 0 {
        return shape_err("global_avg_pool", "empty spatial extent");
    }
    let inv = T::one() / T::from_usize(s).unwrap();
    let vals = x
        .data()
        .chunks(s)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c], vals)
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub fn channel_moments<T: Real>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, s) = channel_view("channel_moments", x.shape())?;
    let count = (n * s) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            for &v in &x.data()[(ni * c + ci) * s..][..s] {
                mean[ci] += v.as_f64();
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for ni in 0..n {
        for ci in 0..c {
            for &v in &x.data()[(ni * c + ci) * s..][..s] {
                let d = v.as_f64() - mean[ci];
                var[ci] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((mean, var))
}

/// `x * scale[c] + shift[c]` per channel.
pub fn channel_affine<T: Real>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Result<Tensor<T>> {
    let (_, c, s) = channel_view("channel_affine", x.shape())?;
    if scale.len() != c || shift.len() != c {
        return shape_err(
            "channel_affine",
            format!("{} params for {c} channels", scale.len()),
        );
    }
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_mut(s).enumerate() {
        let (a, b) = (scale[i % c], shift[i % c]);
        plane.iter_mut().for_each(|v| *v = *v * a + b);
    }
    Ok(out)
}
