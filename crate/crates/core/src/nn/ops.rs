//! Forward and backward kernels for the layers the U-Net uses.
//!
//! All tensors are NCHW. Convolutions use odd square kernels with "same"
//! zero padding and are lowered to GEMM through an im2col buffer, one sample
//! at a time so that a sample's output never depends on its batch neighbours.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Writes the `(C·k·k) × (H·W)` patch matrix of one `C×H×W` sample.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    debug_assert_eq!(col.len(), c * k * k * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                // valid output columns: 0 <= x + dx < w
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize) - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    out[x1..].fill(T::zero());
                }
            }
        }
    }
}

/// Row and column strides of a matrix operand.
type Strides = (usize, usize);

/// Row-major `r × c` matrix read as its transpose.
fn transposed(cols: usize) -> Strides {
    (1, cols)
}

/// `C = A B + beta C` with `A (m×k)`, `B (k×n)` and `C (m×n)` addressed through
/// explicit strides, so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Scalar>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
    sc: Strides,
) {
    let extent = |rows: usize, cols: usize, (rs, cs): Strides| (rows - 1) * rs + (cols - 1) * cs + 1;
    if m == 0 || n == 0 {
        return;
    }
    assert!(k > 0, "gemm_strided: empty inner dimension");
    assert!(extent(m, k, sa) <= a.len(), "gemm_strided: lhs extent");
    assert!(extent(k, n, sb) <= b.len(), "gemm_strided: rhs extent");
    assert!(extent(m, n, sc) <= c.len(), "gemm_strided: output extent");
    // SAFETY: the asserts above keep every strided index inside its slice.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        )
    }
}

/// `K[o, c, ky, kx]` to `K'[c, o, k-1-ky, k-1-kx]`.
fn rotate_kernel<T: Scalar>(kernel: &[T], o: usize, c: usize, k: usize) -> Vec<T> {
    let kk = k * k;
    let mut out = vec![T::zero(); kernel.len()];
    for oc in 0..o {
        for ci in 0..c {
            for j in 0..kk {
                out[(ci * o + oc) * kk + (kk - 1 - j)] = kernel[(oc * c + ci) * kk + j];
            }
        }
    }
    out
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = input.nchw()?;
    let (o, kc, kh, kw) = kernel.nchw()?;
    if kc != c {
        return Err(Error::shape(format!(
            "conv: input has {c} channels, kernel expects {kc}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(format!("conv: kernel must be odd square, got {kh}×{kw}")));
    }
    if bias.dims() != [o] {
        return Err(Error::shape(format!(
            "conv: bias {:?} does not match {o} output channels",
            bias.dims()
        )));
    }
    Ok((n, c, h, w, o, kh))
}

/// Same-padded 2-D convolution (cross-correlation), stride 1.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w, o, k) = conv_dims(input, kernel, bias)?;
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = Tensor::zeros(&[n, o, h, w]);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    let x = input.data();
    let b = bias.data();
    for s in 0..n {
        let xs = &x[s * c * hw..(s + 1) * c * hw];
        let ys = &mut out.data_mut()[s * o * hw..(s + 1) * o * hw];
        let patches: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, c, h, w, k, &mut col);
            &col
        };
        // computed as Yᵀ = Pᵀ Kᵀ: pixels are the long GEMM dimension
        gemm_strided(
            (hw, ckk, o),
            patches,
            transposed(hw),
            kernel.data(),
            transposed(ckk),
            T::zero(),
            ys,
            transposed(hw),
        );
        for (oc, row) in ys.chunks_exact_mut(hw).enumerate() {
            let bo = b[oc];
            row.iter_mut().for_each(|v| *v += bo);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`]. The input gradient is skipped (returned as
/// `None`) when `need_input_grad` is false.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w, o, k) = conv_dims(input, kernel, bias)?;
    if grad_out.dims() != [n, o, h, w] {
        return Err(Error::shape(format!(
            "conv backward: grad {:?} vs output {:?}",
            grad_out.dims(),
            [n, o, h, w]
        )));
    }
    let hw = h * w;
    let ckk = c * k * k;
    let mut gk = Tensor::zeros(kernel.dims());
    let mut gb = Tensor::zeros(bias.dims());
    let mut gx = need_input_grad.then(|| Tensor::zeros(input.dims()));
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    // The input gradient is a same-padded correlation of dY with the kernel
    // rotated by 180° and its channel axes swapped.
    let okk = o * k * k;
    let rotated = gx.as_ref().map(|_| rotate_kernel(kernel.data(), o, c, k));
    let mut gcol = if k == 1 || gx.is_none() { Vec::new() } else { vec![T::zero(); okk * hw] };
    let x = input.data();
    let gy = grad_out.data();
    for s in 0..n {
        let xs = &x[s * c * hw..(s + 1) * c * hw];
        let gys = &gy[s * o * hw..(s + 1) * o * hw];
        // dKᵀ (ckk × o) += patches (ckk × hw) · dYᵀ (hw × o)
        let patches: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, c, h, w, k, &mut col);
            &col
        };
        gemm_strided(
            (ckk, hw, o),
            patches,
            (hw, 1),
            gys,
            transposed(hw),
            T::one(),
            gk.data_mut(),
            transposed(ckk),
        );
        for (oc, row) in gys.chunks_exact(hw).enumerate() {
            let acc: T = row.iter().copied().sum();
            gb.data_mut()[oc] += acc;
        }
        if let (Some(gx), Some(rot)) = (gx.as_mut(), rotated.as_ref()) {
            let gy_patches: &[T] = if k == 1 {
                gys
            } else {
                im2col(gys, o, h, w, k, &mut gcol);
                &gcol
            };
            let gxs = &mut gx.data_mut()[s * c * hw..(s + 1) * c * hw];
            gemm_strided(
                (hw, okk, c),
                gy_patches,
                transposed(hw),
                rot,
                transposed(okk),
                T::zero(),
                gxs,
                transposed(hw),
            );
        }
    }
    Ok((gx, gk, gb))
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient where the forward output was positive.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(output.dims(), data).expect("relu dims")
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    Tensor::from_vec(output.dims(), data).expect("sigmoid dims")
}

/// 2×2 max-pool, stride 2. Returns the pooled tensor and, per output element,
/// the flat input index that won (first maximum on ties).
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = x.nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("max-pool needs even extents, got {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    let od = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * w + 2 * xx;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                od[o] = data[best];
                argmax.push(best as u32);
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward<T: Scalar>(
    input_dims: &[usize],
    argmax: &[u32],
    grad: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_dims);
    let gd = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad.data()) {
        gd[idx as usize] += g;
    }
    gx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            let srow = &s[(y / 2) * w..(y / 2 + 1) * w];
            for (xx, v) in d[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *v = srow[xx / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample2_backward<T: Scalar>(input_dims: &[usize], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let mut gx = Tensor::zeros(input_dims);
    let (n, c, h, w) = gx.nchw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let g = grad.data();
    let d = gx.data_mut();
    for plane in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                d[plane * h * w + (y / 2) * w + xx / 2] += g[plane * oh * ow + y * ow + xx];
            }
        }
    }
    Ok(gx)
}

/// Concatenates two NCHW tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.nchw()?;
    let (nb, cb, hb, wb) = b.nchw()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat {:?} with {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * hw);
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * ca * hw..(s + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[s * cb * hw..(s + 1) * cb * hw]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Scalar>(
    grad: &Tensor<T>,
    ca: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad.nchw()?;
    let cb = c - ca;
    let hw = h * w;
    let mut ga = Vec::with_capacity(n * ca * hw);
    let mut gb = Vec::with_capacity(n * cb * hw);
    for s in 0..n {
        let chunk = &grad.data()[s * c * hw..(s + 1) * c * hw];
        ga.extend_from_slice(&chunk[..ca * hw]);
        gb.extend_from_slice(&chunk[ca * hw..]);
    }
    Ok((
        Tensor::from_vec(&[n, ca, h, w], ga)?,
        Tensor::from_vec(&[n, cb, h, w], gb)?,
    ))
}
