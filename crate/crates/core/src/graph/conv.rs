//! Cross-correlation kernels for `N×Cin×H×W` inputs and `Cout×Cin×k×k` weights.

use std::borrow::Cow;

use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Unfolds one sample into a `patch_len × out_plane` matrix.
    fn im2col<'a>(&self, sample: &'a [f64]) -> Cow<'a, [f64]> {
        if self.is_pointwise() {
            return Cow::Borrowed(sample);
        }
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let mut col = vec![0.0; self.patch_len() * oh * ow];
        for ci in 0..self.in_channels {
            let plane = &sample[ci * self.height * self.width..(ci + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Cow::Owned(col)
    }

    /// Folds a column matrix back onto a sample, accumulating overlaps.
    fn col2im(&self, col: &[f64], sample: &mut [f64]) {
        if self.is_pointwise() {
            for (s, c) in sample.iter_mut().zip(col) {
                *s += c;
            }
            return;
        }
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for ci in 0..self.in_channels {
            let plane = &mut sample[ci * self.height * self.width..(ci + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                plane[iy as usize * self.width + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn columns<'a>(geo: &ConvGeometry, x: &'a [f64]) -> Vec<Cow<'a, [f64]>> {
    let per = geo.in_channels * geo.height * geo.width;
    x.par_chunks(per).map(|s| geo.im2col(s)).collect()
}

pub(crate) fn forward(geo: &ConvGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane = geo.out_plane();
    let patch = geo.patch_len();
    let cols = columns(geo, x);
    let mut out = vec![0.0; geo.batch * geo.out_channels * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (n, co) = (idx / geo.out_channels, idx % geo.out_channels);
        let col = &cols[n];
        if let Some(b) = bias {
            dst.fill(b[co]);
        }
        let wrow = &w[co * patch..(co + 1) * patch];
        for (r, &wv) in wrow.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            let src = &col[r * plane..(r + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * s;
            }
        }
    });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

pub(crate) fn backward(
    geo: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    want: (bool, bool, bool),
) -> ConvGrads {
    let plane = geo.out_plane();
    let patch = geo.patch_len();
    let per_out = geo.out_channels * plane;

    let dbias = want.2.then(|| {
        (0..geo.out_channels)
            .map(|co| {
                (0..geo.batch)
                    .map(|n| dout[n * per_out + co * plane..n * per_out + (co + 1) * plane].iter().sum::<f64>())
                    .sum()
            })
            .collect()
    });

    let dw = want.1.then(|| {
        let cols = columns(geo, x);
        let mut dw = vec![0.0; geo.out_channels * patch];
        dw.par_chunks_mut(patch).enumerate().for_each(|(co, dst)| {
            for (n, col) in cols.iter().enumerate() {
                let g = &dout[n * per_out + co * plane..n * per_out + (co + 1) * plane];
                for (r, d) in dst.iter_mut().enumerate() {
                    let src = &col[r * plane..(r + 1) * plane];
                    *d += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        });
        dw
    });

    let dx = want.0.then(|| {
        let per_in = geo.in_channels * geo.height * geo.width;
        let mut dx = vec![0.0; geo.batch * per_in];
        dx.par_chunks_mut(per_in).enumerate().for_each(|(n, dst)| {
            let mut dcol = vec![0.0; patch * plane];
            for co in 0..geo.out_channels {
                let g = &dout[n * per_out + co * plane..n * per_out + (co + 1) * plane];
                let wrow = &w[co * patch..(co + 1) * patch];
                for (r, &wv) in wrow.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    let d = &mut dcol[r * plane..(r + 1) * plane];
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += wv * gv;
                    }
                }
            }
            geo.col2im(&dcol, dst);
        });
        dx
    });

    ConvGrads { dx, dw, dbias }
}
