use super::Tensor;
use crate::error::{Error, Result};

struct Dims {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

fn dims(input: &Tensor, weight: &Tensor, padding: usize) -> Result<Dims> {
    let (&[c_in, h, w], &[c_out, wc_in, k, k2]) = (input.shape(), weight.shape()) else {
        return Err(Error::Conv(format!(
            "expected input [C,H,W] and weight [O,C,k,k], got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    };
    if wc_in != c_in {
        return Err(Error::Conv(format!(
            "channel mismatch: input has {c_in}, weight expects {wc_in}"
        )));
    }
    if k != k2 || !(k == 1 || k == 3) {
        return Err(Error::Conv(format!("unsupported kernel {k}x{k2}")));
    }
    if padding != (k - 1) / 2 {
        return Err(Error::Conv(format!(
            "only same padding is supported: kernel {k} needs padding {}, got {padding}",
            (k - 1) / 2
        )));
    }
    Ok(Dims {
        c_in,
        c_out,
        h,
        w,
        k,
        pad: padding,
    })
}

/// Overlap of a kernel tap offset with the image along one axis:
/// output positions `lo..hi` read input at `pos + off`.
#[inline]
fn span(off: isize, n: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).min(n as isize).max(0) as usize;
    (lo, hi)
}

pub(super) fn forward(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let d = dims(input, weight, padding)?;
    if bias.numel() != d.c_out {
        return Err(Error::Conv(format!(
            "bias has {} entries for {} output channels",
            bias.numel(),
            d.c_out
        )));
    }
    let hw = d.h * d.w;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; d.c_out * hw];
    for co in 0..d.c_out {
        let o = &mut out[co * hw..(co + 1) * hw];
        o.fill(bias.data()[co]);
        for ci in 0..d.c_in {
            let xi = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..d.k {
                let dy = ky as isize - d.pad as isize;
                let (y0, y1) = span(dy, d.h);
                for kx in 0..d.k {
                    let dx = kx as isize - d.pad as isize;
                    let (x0, x1) = span(dx, d.w);
                    let wv = wt[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
                    for y in y0..y1 {
                        let src_row = ((y as isize + dy) as usize) * d.w;
                        let orow = &mut o[y * d.w + x0..y * d.w + x1];
                        let irow = &xi[(src_row as isize + x0 as isize + dx) as usize
                            ..(src_row as isize + x1 as isize + dx) as usize];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.c_out, d.h, d.w], out)
}

/// Returns (grad_input, grad_weight, grad_bias); the first two only when requested.
pub(super) fn backward(
    input: &Tensor,
    weight: &Tensor,
    g: &[f64],
    padding: usize,
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let d = dims(input, weight, padding).expect("shapes validated in forward");
    let hw = d.h * d.w;
    let x = input.data();
    let wt = weight.data();
    let gb: Vec<f64> = (0..d.c_out).map(|co| g[co * hw..(co + 1) * hw].iter().sum()).collect();
    let mut gi = want_input.then(|| vec![0.0; x.len()]);
    let mut gw = want_weight.then(|| vec![0.0; wt.len()]);

    for co in 0..d.c_out {
        let go = &g[co * hw..(co + 1) * hw];
        for ci in 0..d.c_in {
            let xi = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..d.k {
                let dy = ky as isize - d.pad as isize;
                let (y0, y1) = span(dy, d.h);
                for kx in 0..d.k {
                    let dx = kx as isize - d.pad as isize;
                    let (x0, x1) = span(dx, d.w);
                    let widx = ((co * d.c_in + ci) * d.k + ky) * d.k + kx;
                    let wv = wt[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src = ((y as isize + dy) as usize) * d.w;
                        let s0 = (src as isize + x0 as isize + dx) as usize;
                        let s1 = (src as isize + x1 as isize + dx) as usize;
                        let grow = &go[y * d.w + x0..y * d.w + x1];
                        if gw.is_some() {
                            acc += grow.iter().zip(&xi[s0..s1]).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(gi) = gi.as_mut() {
                            let dst = &mut gi[ci * hw + s0..ci * hw + s1];
                            for (dv, gv) in dst.iter_mut().zip(grow) {
                                *dv += wv * gv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gi, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_1x1_kernel_is_a_no_op() {
        let input = Tensor::new([2, 3, 3], (0..18).map(|v| v as f64).collect()).unwrap();
        let weight = Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bias = Tensor::zeros([2]);
        let out = forward(&input, &weight, &bias, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn ones_kernel_on_constant_input() {
        // direct summation: interior = 9·c·C_in + bias, edge = 6·c·C_in + bias, corner = 4·c·C_in + bias
        let (c, c_in, b) = (1.5, 2usize, 0.25);
        let input = Tensor::full([c_in, 5, 5], c);
        let weight = Tensor::full([1, c_in, 3, 3], 1.0);
        let bias = Tensor::full([1], b);
        let out = forward(&input, &weight, &bias, 1).unwrap();
        let at = |y: usize, x: usize| out.data()[y * 5 + x];
        assert_eq!(at(2, 2), 9.0 * c * c_in as f64 + b);
        assert_eq!(at(0, 2), 6.0 * c * c_in as f64 + b);
        assert_eq!(at(0, 0), 4.0 * c * c_in as f64 + b);
    }

    #[test]
    fn rejects_bad_geometry() {
        let input = Tensor::zeros([2, 4, 4]);
        let bias = Tensor::zeros([1]);
        let w3 = Tensor::zeros([1, 3, 3, 3]);
        assert!(forward(&input, &w3, &bias, 1).is_err());
        let w5 = Tensor::zeros([1, 2, 5, 5]);
        assert!(forward(&input, &w5, &bias, 2).is_err());
        let w = Tensor::zeros([1, 2, 3, 3]);
        assert!(forward(&input, &w, &bias, 0).is_err());
    }
}
