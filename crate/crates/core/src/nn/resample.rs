//! Fixed linear resampling operators (nearest, bilinear, bicubic) expressed as
//! sparse tap lists, so the same operator drives both the forward pass and the
//! transposed backward pass.

use serde::{Deserialize, Serialize};

use super::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Nearest,
    #[default]
    Bilinear,
    Bicubic,
}

impl std::str::FromStr for Interp {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(Interp::Nearest),
            "bilinear" | "linear" => Ok(Interp::Bilinear),
            "bicubic" | "cubic" => Ok(Interp::Bicubic),
            other => Err(crate::Error::invalid(format!("unknown interpolation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Interp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Interp::Nearest => "nearest",
            Interp::Bilinear => "bilinear",
            Interp::Bicubic => "bicubic",
        })
    }
}

/// `out[j] = Σ w · in[i]` over the taps of output `j`.
#[derive(Clone, Debug)]
pub struct SparseMap<T> {
    pub in_len: usize,
    pub out_len: usize,
    pub taps: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> SparseMap<T> {
    pub fn apply(&self, input: &[T], output: &mut [T]) {
        debug_assert_eq!(input.len(), self.in_len);
        for (o, taps) in output.iter_mut().zip(&self.taps) {
            let mut acc = T::zero();
            for &(i, w) in taps {
                acc += w * input[i];
            }
            *o = acc;
        }
    }

    /// Accumulates `Mᵀ · grad_out` into `grad_in`.
    pub fn apply_transpose(&self, grad_out: &[T], grad_in: &mut [T]) {
        for (&g, taps) in grad_out.iter().zip(&self.taps) {
            for &(i, w) in taps {
                grad_in[i] += w * g;
            }
        }
    }

    /// Separable 2-D resize of an `in_h × in_w` plane to `out_h × out_w`.
    pub fn resize2d(in_h: usize, in_w: usize, out_h: usize, out_w: usize, interp: Interp) -> Self {
        let rows = taps1d::<T>(in_h, out_h, interp);
        let cols = taps1d::<T>(in_w, out_w, interp);
        let mut taps = Vec::with_capacity(out_h * out_w);
        for row in &rows {
            for col in &cols {
                let mut t = Vec::with_capacity(row.len() * col.len());
                for &(r, wr) in row {
                    for &(c, wc) in col {
                        t.push((r * in_w + c, wr * wc));
                    }
                }
                taps.push(t);
            }
        }
        Self {
            in_len: in_h * in_w,
            out_len: out_h * out_w,
            taps,
        }
    }

    /// 1-D resampling of a length-`in_len` signal to `out_len` samples.
    pub fn resize1d(in_len: usize, out_len: usize, interp: Interp) -> Self {
        Self {
            in_len,
            out_len,
            taps: taps1d(in_len, out_len, interp),
        }
    }
}

/// Interpolation taps with half-pixel centers (`align_corners = false`).
pub fn taps1d<T: Scalar>(in_len: usize, out_len: usize, interp: Interp) -> Vec<Vec<(usize, T)>> {
    assert!(in_len > 0 && out_len > 0, "resample lengths must be positive");
    let scale = in_len as f64 / out_len as f64;
    let last = in_len as i64 - 1;
    let clamp = |i: i64| i.clamp(0, last) as usize;
    (0..out_len)
        .map(|j| match interp {
            Interp::Nearest => {
                let i = ((j as f64 * scale).floor() as i64).min(last);
                vec![(i as usize, T::one())]
            }
            Interp::Bilinear => {
                let src = ((j as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = src.floor() as i64;
                let frac = src - i0 as f64;
                let i0c = clamp(i0);
                let i1c = clamp(i0 + 1);
                if frac == 0.0 || i0c == i1c {
                    vec![(i0c, T::one())]
                } else {
                    vec![(i0c, T::lit(1.0 - frac)), (i1c, T::lit(frac))]
                }
            }
            Interp::Bicubic => {
                let src = (j as f64 + 0.5) * scale - 0.5;
                let i0 = src.floor() as i64;
                let t = src - i0 as f64;
                if t == 0.0 {
                    return vec![(clamp(i0), T::one())];
                }
                let w = cubic_weights(t);
                let mut taps: Vec<(usize, T)> = Vec::with_capacity(4);
                for (k, wk) in w.iter().enumerate() {
                    let idx = clamp(i0 - 1 + k as i64);
                    match taps.iter_mut().find(|(i, _)| *i == idx) {
                        Some(tap) => tap.1 += T::lit(*wk),
                        None => taps.push((idx, T::lit(*wk))),
                    }
                }
                taps
            }
        })
        .collect()
}

/// Keys cubic convolution weights with `a = -0.75`.
fn cubic_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_exact_identity() {
        for interp in [Interp::Nearest, Interp::Bilinear, Interp::Bicubic] {
            let map = SparseMap::<f32>::resize2d(5, 7, 5, 7, interp);
            let input: Vec<f32> = (0..35).map(|i| i as f32 * 0.1).collect();
            let mut out = vec![0.0; 35];
            map.apply(&input, &mut out);
            assert_eq!(out, input, "{interp}");
        }
    }

    #[test]
    fn taps_form_a_partition_of_unity() {
        for interp in [Interp::Nearest, Interp::Bilinear, Interp::Bicubic] {
            for (i, o) in [(10, 3), (3, 10), (50176, 1024), (7, 7)] {
                for t in taps1d::<f64>(i, o, interp) {
                    let s: f64 = t.iter().map(|(_, w)| w).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilinear_downsample_by_two_averages_pairs() {
        let map = SparseMap::<f64>::resize1d(4, 2, Interp::Bilinear);
        let mut out = vec![0.0; 2];
        map.apply(&[1.0, 3.0, 5.0, 7.0], &mut out);
        assert_eq!(out, vec![2.0, 6.0]);
    }

    #[test]
    fn transpose_is_adjoint() {
        let map = SparseMap::<f64>::resize2d(6, 5, 4, 9, Interp::Bicubic);
        let x: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..36).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut mx = vec![0.0; 36];
        map.apply(&x, &mut mx);
        let mut mty = vec![0.0; 30];
        map.apply_transpose(&y, &mut mty);
        let lhs: f64 = mx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&mty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
