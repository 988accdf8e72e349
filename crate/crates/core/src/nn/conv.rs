//! 2-D convolution (cross-correlation) and its transpose on N × C × H × W
//! arrays, both lowered to GEMM through im2col/col2im.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::Rng;

use super::{ParamId, ParameterStore, Scalar};
use crate::error::{Error, Result};

/// Geometry of a strided, zero-padded sliding window over a C × H × W image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Geometry {
    fn out_dim(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
        let span = (len + 2 * p).checked_sub(k)?;
        (span % s == 0).then_some(span / s + 1)
    }

    pub fn out_hw(&self) -> Result<(usize, usize)> {
        let h = Self::out_dim(self.in_h, self.kernel.0, self.stride.0, self.pad.0);
        let w = Self::out_dim(self.in_w, self.kernel.1, self.stride.1, self.pad.1);
        match (h, w) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::Shape(format!(
                "{}x{} input incompatible with kernel {:?}, stride {:?}, padding {:?}",
                self.in_h, self.in_w, self.kernel, self.stride, self.pad
            ))),
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }
}

/// (C·kh·kw) × (H'·W') patch matrix.
pub fn im2col<T: Scalar>(img: ArrayView3<T>, g: &Geometry) -> Result<Array2<T>> {
    let (oh, ow) = g.out_hw()?;
    let img = img.as_standard_layout();
    let src = img.as_slice().expect("standard layout");
    let (kh, kw) = g.kernel;
    let mut cols = Array2::zeros((g.rows(), oh * ow));
    let dst = cols.as_slice_mut().expect("fresh array");
    let (h, w) = (g.in_h as isize, g.in_w as isize);
    for c in 0..g.channels {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let out_row = &mut dst[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride.0 + ki) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = (c as isize * h + iy) * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride.1 + kj) as isize - g.pad.1 as isize;
                        if ix >= 0 && ix < w {
                            out_row[oy * ow + ox] = src[(base + ix) as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(cols)
}

/// Adjoint of [`im2col`]: scatters patch columns back, summing overlaps.
pub fn col2im<T: Scalar>(cols: ArrayView2<T>, g: &Geometry) -> Result<Array3<T>> {
    let (oh, ow) = g.out_hw()?;
    if cols.dim() != (g.rows(), oh * ow) {
        return Err(Error::Shape(format!("col2im got {:?}", cols.dim())));
    }
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let (kh, kw) = g.kernel;
    let mut img = Array3::zeros((g.channels, g.in_h, g.in_w));
    let dst = img.as_slice_mut().expect("fresh array");
    let (h, w) = (g.in_h as isize, g.in_w as isize);
    for c in 0..g.channels {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let in_row = &src[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride.0 + ki) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = (c as isize * h + iy) * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride.1 + kj) as isize - g.pad.1 as isize;
                        if ix >= 0 && ix < w {
                            dst[(base + ix) as usize] += in_row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

pub struct ConvCache<T> {
    cols: Vec<Array2<T>>,
    geom: Geometry,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel.0 * kernel.1;
        let w = store.add_uniform(format!("{name}.w"), &[out_ch, in_ch, kernel.0, kernel.1], fan_in, rng);
        let b = store.add_uniform(format!("{name}.b"), &[out_ch], fan_in, rng);
        Conv2d {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        Geometry {
            channels: self.in_ch,
            in_h: h,
            in_w: w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn weight_matrix<'a, T: Scalar>(&self, store: &'a ParameterStore<T>) -> ArrayView2<'a, T> {
        store
            .value4(self.w)
            .into_shape((self.out_ch, self.in_ch * self.kernel.0 * self.kernel.1))
            .expect("contiguous weights")
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        x: ArrayView4<T>,
    ) -> Result<(Array4<T>, ConvCache<T>)> {
        let (n, c, h, w) = x.dim();
        if c != self.in_ch {
            return Err(Error::Shape(format!("conv expects {} channels, got {c}", self.in_ch)));
        }
        let geom = self.geometry(h, w);
        let (oh, ow) = geom.out_hw()?;
        let wm = self.weight_matrix(store);
        let bias = store.value1(self.b);
        let mut out = Array4::zeros((n, self.out_ch, oh, ow));
        let mut cols = Vec::with_capacity(n);
        for (i, img) in x.outer_iter().enumerate() {
            let col = im2col(img, &geom)?;
            let y = wm.dot(&col);
            let mut o = out.index_axis_mut(Axis(0), i);
            for (co, mut plane) in o.outer_iter_mut().enumerate() {
                let row = y.row(co);
                let b = bias[co];
                for (dst, &v) in plane.iter_mut().zip(row.iter()) {
                    *dst = v + b;
                }
            }
            cols.push(col);
        }
        Ok((out, ConvCache { cols, geom }))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &ConvCache<T>,
        grad_out: &Array4<T>,
    ) -> Result<Array4<T>> {
        let (n, _, oh, ow) = grad_out.dim();
        let g = cache.geom;
        let mut dx = Array4::zeros((n, self.in_ch, g.in_h, g.in_w));
        let rows = self.in_ch * self.kernel.0 * self.kernel.1;
        let mut dw = Array2::<T>::zeros((self.out_ch, rows));
        {
            let wm = self.weight_matrix(store);
            for i in 0..n {
                let go = grad_out
                    .index_axis(Axis(0), i)
                    .as_standard_layout()
                    .into_owned()
                    .into_shape((self.out_ch, oh * ow))
                    .expect("contiguous");
                dw = dw + go.dot(&cache.cols[i].t());
                let dcols = wm.t().dot(&go);
                dx.index_axis_mut(Axis(0), i).assign(&col2im(dcols.view(), &g)?);
            }
        }
        let db = grad_out.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        let shape = store.value(self.w).raw_dim();
        *store.grad_mut(self.w) += &dw.into_shape(shape).expect("shape");
        *store.grad_mut(self.b) += &db.into_dyn();
        Ok(dx)
    }
}

/// Transposed convolution: the gradient-of-conv operator with learnable
/// weights laid out as (in, out, kh, kw).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

pub struct ConvTransposeCache<T> {
    x: Array4<T>,
    geom: Geometry,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel.0 * kernel.1 / (stride.0 * stride.1).max(1);
        let w = store.add_uniform(format!("{name}.w"), &[in_ch, out_ch, kernel.0, kernel.1], fan_in, rng);
        let b = store.add_uniform(format!("{name}.b"), &[out_ch], fan_in, rng);
        ConvTranspose2d {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |len: usize, k: usize, s: usize, p: usize| {
            ((len - 1) * s + k).checked_sub(2 * p)
        };
        match (
            dim(h, self.kernel.0, self.stride.0, self.pad.0),
            dim(w, self.kernel.1, self.stride.1, self.pad.1),
        ) {
            (Some(a), Some(b)) if h > 0 && w > 0 => Ok((a, b)),
            _ => Err(Error::Shape(format!("transposed conv cannot take {h}x{w}"))),
        }
    }

    fn weight_matrix<'a, T: Scalar>(&self, store: &'a ParameterStore<T>) -> ArrayView2<'a, T> {
        store
            .value4(self.w)
            .into_shape((self.in_ch, self.out_ch * self.kernel.0 * self.kernel.1))
            .expect("contiguous weights")
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        x: ArrayView4<T>,
    ) -> Result<(Array4<T>, ConvTransposeCache<T>)> {
        let (n, c, h, w) = x.dim();
        if c != self.in_ch {
            return Err(Error::Shape(format!(
                "transposed conv expects {} channels, got {c}",
                self.in_ch
            )));
        }
        let (oh, ow) = self.out_hw(h, w)?;
        // the forward conv this operator is the adjoint of maps oh×ow → h×w
        let geom = Geometry {
            channels: self.out_ch,
            in_h: oh,
            in_w: ow,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        if geom.out_hw()? != (h, w) {
            return Err(Error::Shape(format!("transposed conv geometry mismatch for {h}x{w}")));
        }
        let wm = self.weight_matrix(store);
        let bias = store.value1(self.b);
        let mut out = Array4::zeros((n, self.out_ch, oh, ow));
        for (i, img) in x.outer_iter().enumerate() {
            let xm = img
                .as_standard_layout()
                .into_owned()
                .into_shape((c, h * w))
                .expect("contiguous");
            let cols = wm.t().dot(&xm);
            let mut y = col2im(cols.view(), &geom)?;
            for (co, mut plane) in y.outer_iter_mut().enumerate() {
                plane += bias[co];
            }
            out.index_axis_mut(Axis(0), i).assign(&y);
        }
        Ok((
            out,
            ConvTransposeCache {
                x: x.to_owned(),
                geom,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &ConvTransposeCache<T>,
        grad_out: &Array4<T>,
    ) -> Result<Array4<T>> {
        let (n, c, h, w) = cache.x.dim();
        let mut dx = Array4::zeros((n, c, h, w));
        let mut dw = Array2::<T>::zeros((self.in_ch, self.out_ch * self.kernel.0 * self.kernel.1));
        {
            let wm = self.weight_matrix(store);
            for i in 0..n {
                let cols = im2col(grad_out.index_axis(Axis(0), i), &cache.geom)?;
                let xm = cache
                    .x
                    .index_axis(Axis(0), i)
                    .as_standard_layout()
                    .into_owned()
                    .into_shape((c, h * w))
                    .expect("contiguous");
                dw = dw + xm.dot(&cols.t());
                let d = wm.dot(&cols);
                dx.index_axis_mut(Axis(0), i)
                    .assign(&d.into_shape((c, h, w)).expect("shape"));
            }
        }
        let db = grad_out.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        let shape = store.value(self.w).raw_dim();
        *store.grad_mut(self.w) += &dw.into_shape(shape).expect("shape");
        *store.grad_mut(self.b) += &db.into_dyn();
        Ok(dx)
    }
}
