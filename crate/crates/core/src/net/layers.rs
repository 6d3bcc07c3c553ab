//! Layer kernels with hand-written backward passes.
//!
//! Every kernel runs in a fixed loop order, so results are bit-identical
//! from run to run.

use rand::Rng;

use super::{NetError, Tensor};

fn conv_out(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom, NetError> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c || kh != kw {
        return Err(NetError::Shape(format!(
            "conv2d weight {:?} does not fit input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let (Some(ho), Some(wo)) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad)) else {
        return Err(NetError::Shape(format!(
            "conv2d kernel {:?} does not fit padded input {:?}",
            weight.shape(),
            x.shape()
        )));
    };
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        k: kh,
        ho,
        wo,
        stride,
        pad,
    })
}

/// Unfolds one batch item into a `(c·k·k, ho·wo)` column matrix.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                            x[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x (n, c, h, w)` with `weight (o, c, k, k)` plus a
/// per-channel `bias (o)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor, NetError> {
    let g = conv_geom(x, weight, stride, pad)?;
    if bias.len() != g.o {
        return Err(NetError::Shape(format!(
            "conv2d bias {:?} does not match weight {:?}",
            bias.shape(),
            weight.shape()
        )));
    }
    let hw = g.ho * g.wo;
    let ckk = g.c * g.k * g.k;
    let mut out = Tensor::zeros(&[g.n, g.o, g.ho, g.wo]);
    let mut cols = vec![0.0; ckk * hw];
    let in_item = g.c * g.h * g.w;
    let wd = weight.data();
    for b in 0..g.n {
        let xs = &x.data()[b * in_item..(b + 1) * in_item];
        let os = &mut out.data_mut()[b * g.o * hw..(b + 1) * g.o * hw];
        let direct = g.k == 1 && g.stride == 1 && g.pad == 0;
        let cols: &[f64] = if direct {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        for oc in 0..g.o {
            let dst = &mut os[oc * hw..(oc + 1) * hw];
            dst.fill(bias.data()[oc]);
            for r in 0..ckk {
                let wv = wd[oc * ckk + r];
                if wv == 0.0 {
                    continue;
                }
                let src = &cols[r * hw..(r + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), NetError> {
    let g = conv_geom(x, weight, stride, pad)?;
    if dout.shape() != [g.n, g.o, g.ho, g.wo] {
        return Err(NetError::Shape(format!(
            "conv2d output gradient {:?} does not match forward output {:?}",
            dout.shape(),
            [g.n, g.o, g.ho, g.wo]
        )));
    }
    let hw = g.ho * g.wo;
    let ckk = g.c * g.k * g.k;
    let in_item = g.c * g.h * g.w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[g.o]);
    let mut cols = vec![0.0; ckk * hw];
    let mut dcols = vec![0.0; ckk * hw];
    let wd = weight.data();
    let direct = g.k == 1 && g.stride == 1 && g.pad == 0;
    for b in 0..g.n {
        let xs = &x.data()[b * in_item..(b + 1) * in_item];
        let ds = &dout.data()[b * g.o * hw..(b + 1) * g.o * hw];
        if !direct {
            im2col(xs, &g, &mut cols);
        }
        let cols_ref: &[f64] = if direct { xs } else { &cols };
        dcols.fill(0.0);
        for oc in 0..g.o {
            let drow = &ds[oc * hw..(oc + 1) * hw];
            db.data_mut()[oc] += drow.iter().sum::<f64>();
            for r in 0..ckk {
                let src = &cols_ref[r * hw..(r + 1) * hw];
                let acc: f64 = drow.iter().zip(src).map(|(a, b)| a * b).sum();
                dw.data_mut()[oc * ckk + r] += acc;
                let wv = wd[oc * ckk + r];
                if wv != 0.0 {
                    let dst = &mut dcols[r * hw..(r + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(drow) {
                        *d += wv * s;
                    }
                }
            }
        }
        let dxs = &mut dx.data_mut()[b * in_item..(b + 1) * in_item];
        if direct {
            for (d, s) in dxs.iter_mut().zip(&dcols) {
                *d += s;
            }
        } else {
            col2im(&dcols, &g, dxs);
        }
    }
    Ok((dx, dw, db))
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Gradient of [`relu`], gated on the forward output.
pub fn relu_backward(out: &Tensor, dout: &Tensor) -> Tensor {
    let mut dx = dout.clone();
    dx.data_mut().iter_mut().zip(out.data()).for_each(|(d, &y)| {
        if y <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

/// Max pooling with a square window. Returns the output and, per output
/// element, the flat input index that won (first in scan order on ties).
pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Vec<usize>), NetError> {
    let (n, c, h, w) = x.dims4()?;
    let (Some(ho), Some(wo)) = (conv_out(h, kernel, stride, 0), conv_out(w, kernel, stride, 0)) else {
        return Err(NetError::Shape(format!(
            "pool window {kernel} does not fit input {:?}",
            x.shape()
        )));
    };
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    let xd = x.data();
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = (plane * h + oy * stride + ky) * w + ox * stride + kx;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out.data_mut()[o] = best;
                arg[o] = best_i;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2d_backward(input_shape: &[usize], argmax: &[usize], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (o, &i) in argmax.iter().enumerate() {
        dx.data_mut()[i] += dout.data()[o];
    }
    dx
}

/// `x (n, in) · weightᵀ + bias`, with `weight (out, in)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, NetError> {
    let (n, fin) = x.dims2()?;
    let (fout, win) = weight.dims2()?;
    if win != fin || bias.len() != fout {
        return Err(NetError::Shape(format!(
            "linear weight {:?} / bias {:?} do not fit input {:?}",
            weight.shape(),
            bias.shape(),
            x.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, fout]);
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let od = out.data_mut();
    for r in 0..n {
        let xr = &xd[r * fin..(r + 1) * fin];
        for o in 0..fout {
            let wr = &wd[o * fin..(o + 1) * fin];
            od[r * fout + o] = bd[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(out)
}

/// Gradients of [`linear`] with respect to input, weight and bias.
pub fn linear_backward(x: &Tensor, weight: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor), NetError> {
    let (n, fin) = x.dims2()?;
    let (fout, _) = weight.dims2()?;
    if dout.shape() != [n, fout] {
        return Err(NetError::Shape(format!(
            "linear output gradient {:?} does not match {:?}",
            dout.shape(),
            [n, fout]
        )));
    }
    let mut dx = Tensor::zeros(&[n, fin]);
    let mut dw = Tensor::zeros(&[fout, fin]);
    let mut db = Tensor::zeros(&[fout]);
    let (xd, wd, dd) = (x.data(), weight.data(), dout.data());
    for r in 0..n {
        let xr = &xd[r * fin..(r + 1) * fin];
        for o in 0..fout {
            let g = dd[r * fout + o];
            if g == 0.0 {
                continue;
            }
            db.data_mut()[o] += g;
            let wr = &wd[o * fin..(o + 1) * fin];
            let dxr = &mut dx.data_mut()[r * fin..(r + 1) * fin];
            for (d, w) in dxr.iter_mut().zip(wr) {
                *d += g * w;
            }
            let dwr = &mut dw.data_mut()[o * fin..(o + 1) * fin];
            for (d, xv) in dwr.iter_mut().zip(xr) {
                *d += g * xv;
            }
        }
    }
    Ok((dx, dw, db))
}

/// Row-wise softmax of a `(n, k)` tensor.
pub fn softmax(x: &Tensor) -> Result<Tensor, NetError> {
    let (n, k) = x.dims2()?;
    let mut out = x.clone();
    for r in 0..n {
        let row = &mut out.data_mut()[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Gradient of [`softmax`] given its output.
pub fn softmax_backward(out: &Tensor, dout: &Tensor) -> Result<Tensor, NetError> {
    let (n, k) = out.dims2()?;
    let mut dx = Tensor::zeros(&[n, k]);
    for r in 0..n {
        let y = &out.data()[r * k..(r + 1) * k];
        let dy = &dout.data()[r * k..(r + 1) * k];
        let inner: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
        for j in 0..k {
            dx.data_mut()[r * k + j] = y[j] * (dy[j] - inner);
        }
    }
    Ok(dx)
}

/// He-uniform sample for a tensor whose fan-in is `fan_in`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

/// A 2-d convolution with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn he(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        Conv2d {
            weight: he_uniform(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetError> {
        conv2d(x, &self.weight, &self.bias, self.stride, self.pad)
    }

    /// Returns `(dx, dweight, dbias)`.
    pub fn backward(&self, x: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor), NetError> {
        conv2d_backward(x, &self.weight, self.stride, self.pad, dout)
    }
}

/// A fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn he(fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: he_uniform(&[fout, fin], fin, rng),
            bias: Tensor::zeros(&[fout]),
        }
    }

    /// Small-variance init used for output heads.
    pub fn scaled(fin: usize, fout: usize, std_scale: f64, rng: &mut impl Rng) -> Self {
        let mut l = Linear::he(fin, fout, rng);
        l.weight.scale(std_scale);
        l
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetError> {
        linear(x, &self.weight, &self.bias)
    }

    pub fn backward(&self, x: &Tensor, dout: &Tensor) -> Result<(Tensor, Tensor, Tensor), NetError> {
        linear_backward(x, &self.weight, dout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let w = t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::zeros(&[2]);
        assert_eq!(conv2d(&x, &w, &b, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_zero_weights_and_hand_sum() {
        let x = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let zero = conv2d(&x, &Tensor::zeros(&[4, 1, 3, 3]), &Tensor::zeros(&[4]), 1, 1).unwrap();
        assert_eq!(zero.shape(), &[1, 4, 3, 3]);
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let ones = conv2d(&x, &Tensor::filled(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(ones.shape(), &[1, 1, 1, 1]);
        assert_eq!(ones.data()[0], 9.0);
    }

    #[test]
    fn conv_output_size_and_errors() {
        let x = Tensor::zeros(&[1, 3, 9, 7]);
        let w = Tensor::zeros(&[5, 3, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[5]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5, 4]);
        let bad = conv2d(&x, &Tensor::zeros(&[5, 2, 3, 3]), &Tensor::zeros(&[5]), 1, 1);
        let msg = bad.unwrap_err().to_string();
        assert!(msg.contains("[5, 2, 3, 3]") && msg.contains("[1, 3, 9, 7]"), "{msg}");
        assert!(conv2d(&Tensor::zeros(&[1, 3, 2, 2]), &w, &Tensor::zeros(&[5]), 1, 0).is_err());
    }

    #[test]
    fn relu_pool_softmax() {
        let r = relu(&t(&[2], &[-1.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 2.0]);
        let (p, arg) = max_pool2d(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), 2, 2).unwrap();
        assert_eq!(p.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let s = softmax(&t(&[1, 4], &[0.3; 4])).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = softmax(&t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1000.0])).unwrap();
        for r in 0..2 {
            let sum: f64 = s.data()[r * 3..r * 3 + 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_tie_goes_to_first() {
        let (_, arg) = max_pool2d(&t(&[1, 1, 2, 2], &[5.0, 5.0, 5.0, 5.0]), 2, 2).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn linear_known_values() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 1.0, 0.5, -1.0]);
        let b = t(&[2], &[0.0, 10.0]);
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[3.0, 8.5]);
    }
}
