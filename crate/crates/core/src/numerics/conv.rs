//! Direct convolution kernels over channel-last `[H, W, C]` maps.

use crate::error::{Error, Result};

use super::tensor::Tensor;

struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

fn geometry(x: &Tensor, w: &Tensor, stride: usize) -> Result<Geometry> {
    let [h, wd, cin] = x.shape()[..] else {
        return Err(Error::dim("conv2d", format!("input must be [H, W, C], got {:?}", x.shape())));
    };
    let [k, k2, wcin, cout] = w.shape()[..] else {
        return Err(Error::dim("conv2d", format!("kernel must be [K, K, Cin, Cout], got {:?}", w.shape())));
    };
    if k != k2 || k % 2 == 0 {
        return Err(Error::dim("conv2d", format!("kernel must be square and odd, got {k}x{k2}")));
    }
    if wcin != cin {
        return Err(Error::dim("conv2d", format!("kernel expects {wcin} channels, input has {cin}")));
    }
    if stride == 0 {
        return Err(Error::dim("conv2d", "stride must be positive"));
    }
    let pad = k / 2;
    Ok(Geometry {
        h,
        w: wd,
        cin,
        k,
        cout,
        pad,
        stride,
        oh: (h + 2 * pad - k) / stride + 1,
        ow: (wd + 2 * pad - k) / stride + 1,
    })
}

impl Geometry {
    /// Input coordinate for output coordinate `o` and kernel tap `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        (o * self.stride + t).checked_sub(self.pad).filter(|&i| i < extent)
    }
}

pub fn output_extent(input: usize, k: usize, stride: usize) -> usize {
    (input + 2 * (k / 2) - k) / stride + 1
}

pub(crate) fn forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let g = geometry(x, w, stride)?;
    if b.len() != g.cout {
        return Err(Error::dim("conv2d", format!("bias has {} entries for {} outputs", b.len(), g.cout)));
    }
    let (xd, wd) = (x.data(), w.data());
    let mut out = Vec::with_capacity(g.oh * g.ow * g.cout);
    for _ in 0..g.oh * g.ow {
        out.extend_from_slice(b.data());
    }
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o = (oy * g.ow + ox) * g.cout;
            let acc = &mut out[o..o + g.cout];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xrow = &xd[(iy * g.w + ix) * g.cin..][..g.cin];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let wrow = &wd[((ky * g.k + kx) * g.cin + ci) * g.cout..][..g.cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new([g.oh, g.ow, g.cout], out)
}

/// Returns `(dx, dw, db)` for upstream gradient `dout`.
pub(crate) fn backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    stride: usize,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let g = geometry(x, w, stride)?;
    let (xd, wd, gd) = (x.data(), w.data(), dout.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let grow = &gd[(oy * g.ow + ox) * g.cout..][..g.cout];
            for (d, &v) in db.iter_mut().zip(grow) {
                *d += v;
            }
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xo = (iy * g.w + ix) * g.cin;
                    for ci in 0..g.cin {
                        let wo = ((ky * g.k + kx) * g.cin + ci) * g.cout;
                        let wrow = &wd[wo..wo + g.cout];
                        let xv = xd[xo + ci];
                        let mut acc = 0.0;
                        for ((dwv, &wv), &gv) in dw[wo..wo + g.cout].iter_mut().zip(wrow).zip(grow) {
                            *dwv += xv * gv;
                            acc += wv * gv;
                        }
                        dx[xo + ci] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        db,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tap_kernel_copies_input() {
        let x = Tensor::new([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::row(vec![0.0]);
        let y = forward(&x, &w, &b, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn box_kernel_sums_neighbourhood() {
        // 3x3 ones kernel, stride 1, zero padding: centre of a 3x3 map sums all.
        let x = Tensor::new([3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::new([3, 3, 1, 1], vec![1.0; 9]).unwrap();
        let b = Tensor::row(vec![0.5]);
        let y = forward(&x, &w, &b, 1).unwrap();
        assert_eq!(y.data()[4], 45.5);
        // corner (0,0) sees 1,2,4,5
        assert_eq!(y.data()[0], 12.5);
    }

    #[test]
    fn stride_two_halves_extent() {
        assert_eq!(output_extent(32, 3, 2), 16);
        assert_eq!(output_extent(1, 3, 2), 1);
        assert_eq!(output_extent(4, 1, 2), 2);
        let x = Tensor::zeros([8, 8, 2]);
        let w = Tensor::zeros([3, 3, 2, 5]);
        let y = forward(&x, &w, &Tensor::row(vec![0.0; 5]), 2).unwrap();
        assert_eq!(y.shape(), &[4, 4, 5]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros([4, 4, 3]);
        let w = Tensor::zeros([3, 3, 2, 1]);
        assert!(forward(&x, &w, &Tensor::scalar(0.0), 1).is_err());
    }
}
