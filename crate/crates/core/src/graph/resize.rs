//! Bilinear (half-pixel centers, edge clamped) and nearest-neighbour resampling
//! over the trailing two axes of a tensor.

/// Source taps for one output coordinate.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let w_hi = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - w_hi,
                w_hi,
            }
        })
        .collect()
}

pub(crate) fn bilinear_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, ry) in ty.iter().enumerate() {
            let top = &src[ry.lo * w..(ry.lo + 1) * w];
            let bottom = &src[ry.hi * w..(ry.hi + 1) * w];
            for (ox, rx) in tx.iter().enumerate() {
                let upper = rx.w_lo * top[rx.lo] + rx.w_hi * top[rx.hi];
                let lower = rx.w_lo * bottom[rx.lo] + rx.w_hi * bottom[rx.hi];
                dst[oy * ow + ox] = ry.w_lo * upper + ry.w_hi * lower;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    dout: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return dout.to_vec();
    }
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                dst[ry.lo * w + rx.lo] += ry.w_lo * rx.w_lo * v;
                dst[ry.lo * w + rx.hi] += ry.w_lo * rx.w_hi * v;
                dst[ry.hi * w + rx.lo] += ry.w_hi * rx.w_lo * v;
                dst[ry.hi * w + rx.hi] += ry.w_hi * rx.w_hi * v;
            }
        }
    }
    dx
}

/// Nearest-neighbour resampling; source index `floor((i + 0.5) * in / out)`.
pub(crate) fn nearest(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let pick = |i: usize, input: usize, output: usize| ((2 * i + 1) * input / (2 * output)).min(input - 1);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let sy = pick(oy, h, oh);
            for ox in 0..ow {
                out.push(src[sy * w + pick(ox, w, ow)]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_pixel_upsample_row() {
        let out = bilinear_forward(&[1.0, 3.0], 1, (1, 2), (1, 4));
        assert_eq!(out, vec![1.0, 1.5, 2.5, 3.0]);
    }

    #[test]
    fn constant_field_stays_constant() {
        let out = bilinear_forward(&[7.0], 1, (1, 1), (2, 2));
        assert_eq!(out, vec![7.0; 4]);
    }

    #[test]
    fn nearest_keeps_values_from_input() {
        let x = [0.0, 1.0, 1.0, 0.0];
        let out = nearest(&x, 1, (2, 2), (3, 5));
        assert!(out.iter().all(|v| *v == 0.0 || *v == 1.0));
        assert_eq!(nearest(&x, 1, (2, 2), (2, 2)), x.to_vec());
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <A x, y> == <x, A^T y>
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..35).map(|i| (i as f64 * 0.71).cos()).collect();
        let ax = bilinear_forward(&x, 1, (3, 4), (5, 7));
        let aty = bilinear_backward(&y, 1, (3, 4), (5, 7));
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
