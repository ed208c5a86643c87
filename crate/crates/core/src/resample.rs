//! Separable linear resampling plans shared by the autograd ops and the
//! image-space degradation pipeline.
//!
//! Every supported resize (nearest, bilinear, area, box crop) is a separable
//! linear map, so a plan is a list of `(source index, weight)` taps per output
//! coordinate along each axis.

use crate::error::{shape_err, Result};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq)]
pub struct AxisPlan {
    pub len_in: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisPlan {
    pub fn len_out(&self) -> usize {
        self.taps.len()
    }

    pub fn identity(len: usize) -> Self {
        Self { len_in: len, taps: (0..len).map(|i| vec![(i, 1.0)]).collect() }
    }

    pub fn nearest(len_in: usize, len_out: usize) -> Self {
        let taps = (0..len_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * len_in as f64 / len_out as f64).floor() as usize;
                vec![(src.min(len_in - 1), 1.0)]
            })
            .collect();
        Self { len_in, taps }
    }

    /// Bilinear resize with the align-corners-false convention: output sample
    /// `o` sits at source coordinate `(o + 0.5)·len_in/len_out − 0.5`,
    /// clamped to the valid range.
    pub fn bilinear(len_in: usize, len_out: usize) -> Self {
        let scale = len_in as f64 / len_out as f64;
        let taps = (0..len_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                Self::linear_taps(src, len_in)
            })
            .collect();
        Self { len_in, taps }
    }

    /// Block mean over `factor` consecutive samples.
    pub fn area(len_in: usize, factor: usize) -> Result<Self> {
        if factor == 0 || !len_in.is_multiple_of(factor) {
            return Err(shape_err!("area downsample: extent {len_in} not divisible by {factor}"));
        }
        let w = 1.0 / factor as f64;
        let taps = (0..len_in / factor)
            .map(|o| (0..factor).map(|j| (o * factor + j, w)).collect())
            .collect();
        Ok(Self { len_in, taps })
    }

    /// Bilinear sampling of the normalized interval `[start, end)` of the axis
    /// onto `len_out` samples (ROI-align with one sample per bin).
    pub fn crop(len_in: usize, start: f64, end: f64, len_out: usize) -> Result<Self> {
        if !(end > start) {
            return Err(shape_err!("degenerate crop interval [{start}, {end})"));
        }
        let origin = start * len_in as f64;
        let step = (end - start) * len_in as f64 / len_out as f64;
        let taps = (0..len_out)
            .map(|o| {
                let src = origin + (o as f64 + 0.5) * step - 0.5;
                Self::linear_taps(src.clamp(0.0, (len_in - 1) as f64), len_in)
            })
            .collect();
        Ok(Self { len_in, taps })
    }

    fn linear_taps(src: f64, len_in: usize) -> Vec<(usize, f64)> {
        let i0 = (src.floor() as usize).min(len_in - 1);
        let i1 = (i0 + 1).min(len_in - 1);
        let frac = src - i0 as f64;
        if i1 == i0 || frac == 0.0 {
            vec![(i0, 1.0)]
        } else {
            vec![(i0, 1.0 - frac), (i1, frac)]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResamplePlan {
    pub rows: AxisPlan,
    pub cols: AxisPlan,
}

impl ResamplePlan {
    pub fn new(rows: AxisPlan, cols: AxisPlan) -> Self {
        Self { rows, cols }
    }

    pub fn in_dims(&self) -> (usize, usize) {
        (self.rows.len_in, self.cols.len_in)
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.rows.len_out(), self.cols.len_out())
    }

    /// Resample one `h×w` plane.
    pub fn apply<T: Float>(&self, src: &[T], dst: &mut [T]) {
        let (h, w) = self.in_dims();
        let (ho, wo) = self.out_dims();
        debug_assert_eq!(src.len(), h * w);
        debug_assert_eq!(dst.len(), ho * wo);
        let mut tmp = vec![T::zero(); ho * w];
        for (oy, taps) in self.rows.taps.iter().enumerate() {
            let out_row = &mut tmp[oy * w..(oy + 1) * w];
            for &(iy, wt) in taps {
                let wt = T::c(wt);
                for (o, &s) in out_row.iter_mut().zip(&src[iy * w..(iy + 1) * w]) {
                    *o += wt * s;
                }
            }
        }
        for oy in 0..ho {
            let row = &tmp[oy * w..(oy + 1) * w];
            for (ox, taps) in self.cols.taps.iter().enumerate() {
                let mut acc = T::zero();
                for &(ix, wt) in taps {
                    acc += T::c(wt) * row[ix];
                }
                dst[oy * wo + ox] = acc;
            }
        }
    }

    /// Adjoint of [`apply`](Self::apply): scatter-add `grad_out` into `grad_in`.
    pub fn apply_transpose<T: Float>(&self, grad_out: &[T], grad_in: &mut [T]) {
        let (_, w) = self.in_dims();
        let (ho, wo) = self.out_dims();
        let mut tmp = vec![T::zero(); ho * w];
        for oy in 0..ho {
            let row = &mut tmp[oy * w..(oy + 1) * w];
            for (ox, taps) in self.cols.taps.iter().enumerate() {
                let g = grad_out[oy * wo + ox];
                for &(ix, wt) in taps {
                    row[ix] += T::c(wt) * g;
                }
            }
        }
        for (oy, taps) in self.rows.taps.iter().enumerate() {
            let src_row = &tmp[oy * w..(oy + 1) * w];
            for &(iy, wt) in taps {
                let wt = T::c(wt);
                for (gi, &g) in grad_in[iy * w..(iy + 1) * w].iter_mut().zip(src_row) {
                    *gi += wt * g;
                }
            }
        }
    }
}
