//! 2-D cross-correlation kernels (NCHW input, OIHW kernel) via im2col + GEMM.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [batch, in_ch, height, width] = *x else {
            return Err(Error::shape(format!("conv2d input must be NCHW, got {x:?}")));
        };
        let [out_ch, k_in, kh, kw] = *k else {
            return Err(Error::shape(format!("conv2d kernel must be OIHW, got {k:?}")));
        };
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be >= 1"));
        }
        if k_in != in_ch {
            return Err(Error::shape(format!(
                "conv2d kernel expects {k_in} input channels, input has {in_ch}"
            )));
        }
        let (ph, pw) = (height + 2 * pad, width + 2 * pad);
        if kh > ph || kw > pw || kh == 0 || kw == 0 {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(Self {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    /// Output positions `[lo, hi)` whose source `o * stride + k - pad` lies
    /// inside `[0, extent)`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        let hi = if self.pad + extent <= k { 0 } else { (self.pad + extent - k).div_ceil(s).min(out) };
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let (sp, hw) = (self.spatial(), self.height * self.width);
        let mut row = 0;
        for c in 0..self.in_ch {
            let plane = &img[c * hw..(c + 1) * hw];
            for i in 0..self.kh {
                let (ylo, yhi) = self.valid(i, self.height, self.out_h);
                for j in 0..self.kw {
                    let (xlo, xhi) = self.valid(j, self.width, self.out_w);
                    let dst = &mut cols[row * sp..(row + 1) * sp];
                    dst.fill(T::zero());
                    for oy in ylo..yhi {
                        let src = &plane[(oy * self.stride + i - self.pad) * self.width..];
                        let drow = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if self.stride == 1 {
                            let x0 = xlo + j - self.pad;
                            drow[xlo..xhi].copy_from_slice(&src[x0..x0 + xhi - xlo]);
                        } else {
                            for ox in xlo..xhi {
                                drow[ox] = src[ox * self.stride + j - self.pad];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let (sp, hw) = (self.spatial(), self.height * self.width);
        let mut row = 0;
        for c in 0..self.in_ch {
            let plane = &mut img[c * hw..(c + 1) * hw];
            for i in 0..self.kh {
                let (ylo, yhi) = self.valid(i, self.height, self.out_h);
                for j in 0..self.kw {
                    let (xlo, xhi) = self.valid(j, self.width, self.out_w);
                    let src = &cols[row * sp..(row + 1) * sp];
                    for oy in ylo..yhi {
                        let y = oy * self.stride + i - self.pad;
                        let dst = &mut plane[y * self.width..(y + 1) * self.width];
                        let srow = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        for ox in xlo..xhi {
                            let x = ox * self.stride + j - self.pad;
                            dst[x] = dst[x] + srow[ox];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), kernel.shape(), stride, pad)?;
    let (patch, sp) = (g.patch(), g.spatial());
    let mut cols = vec![T::zero(); patch * sp];
    let mut out = vec![T::zero(); g.batch * g.out_ch * sp];
    for n in 0..g.batch {
        g.im2col(&x.data()[n * g.image()..(n + 1) * g.image()], &mut cols);
        T::gemm(
            g.out_ch,
            patch,
            sp,
            T::one(),
            kernel.data(),
            (patch as isize, 1),
            &cols,
            (sp as isize, 1),
            T::zero(),
            &mut out[n * g.out_ch * sp..(n + 1) * g.out_ch * sp],
            (sp as isize, 1),
        );
    }
    Ok(Tensor::from_parts(g.out_shape(), out))
}

/// Gradients with respect to the input and the kernel. The im2col buffer is
/// rebuilt here rather than saved from the forward pass.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dk: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = ConvGeometry::new(x.shape(), kernel.shape(), stride, pad)?;
    if dout.shape() != g.out_shape().as_slice() {
        return Err(Error::shape("conv2d backward: upstream gradient shape mismatch"));
    }
    let (patch, sp) = (g.patch(), g.spatial());
    let mut cols = vec![T::zero(); patch * sp];
    let mut dcols = vec![T::zero(); patch * sp];
    let mut dx = want_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dk = want_dk.then(|| vec![T::zero(); kernel.numel()]);
    for n in 0..g.batch {
        let dout_n = &dout.data()[n * g.out_ch * sp..(n + 1) * g.out_ch * sp];
        if let Some(dk) = dk.as_mut() {
            g.im2col(&x.data()[n * g.image()..(n + 1) * g.image()], &mut cols);
            // dK[O, patch] += dout_n[O, sp] * cols^T
            T::gemm(
                g.out_ch,
                sp,
                patch,
                T::one(),
                dout_n,
                (sp as isize, 1),
                &cols,
                (1, sp as isize),
                T::one(),
                dk,
                (patch as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[patch, sp] = K^T * dout_n
            T::gemm(
                patch,
                g.out_ch,
                sp,
                T::one(),
                kernel.data(),
                (1, patch as isize),
                dout_n,
                (sp as isize, 1),
                T::zero(),
                &mut dcols,
                (sp as isize, 1),
            );
            g.col2im_add(&dcols, &mut dx[n * g.image()..(n + 1) * g.image()]);
        }
    }
    Ok((
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dk.map(|d| Tensor::from_parts(kernel.shape().to_vec(), d)),
    ))
}
