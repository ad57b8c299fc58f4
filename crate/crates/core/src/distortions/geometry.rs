//! Geometric transforms as sparse bilinear tap plans.
//!
//! Every transform is expressed as an inverse-mapped bilinear warp that
//! re-registers the result onto the original `(h, w)` grid with zero
//! padding, so one tap representation serves both the plain application
//! path and the differentiable graph path.

use crate::autodiff::ops::SparseTaps;
use crate::scalar::Scalar;

/// Bilinear taps for a single output pixel sampling source coords
/// `(sy, sx)`; out-of-bounds corners contribute weight zero.
fn bilinear_taps<F: Scalar>(sy: f64, sx: f64, h: usize, w: usize) -> [(u32, F); 4] {
    let mut taps = [(0u32, F::zero()); 4];
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let corners = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1.0, (1.0 - fy) * fx),
        (y0 + 1.0, x0, fy * (1.0 - fx)),
        (y0 + 1.0, x0 + 1.0, fy * fx),
    ];
    for (slot, (cy, cx, wgt)) in taps.iter_mut().zip(corners) {
        if cy >= 0.0 && cx >= 0.0 && (cy as usize) < h && (cx as usize) < w && wgt != 0.0 {
            *slot = ((cy as usize * w + cx as usize) as u32, F::from_f64c(wgt));
        }
    }
    taps
}

fn plan_from_inverse_map<F: Scalar>(
    h: usize,
    w: usize,
    src_of: impl Fn(f64, f64) -> (f64, f64),
) -> SparseTaps<F> {
    let mut taps = Vec::with_capacity(h * w);
    for oy in 0..h {
        for ox in 0..w {
            let (sy, sx) = src_of(oy as f64, ox as f64);
            taps.push(bilinear_taps(sy, sx, h, w));
        }
    }
    SparseTaps { taps }
}

/// Rotation by `angle_deg` (counterclockwise) about the image center.
pub fn rotate_plan<F: Scalar>(h: usize, w: usize, angle_deg: f64) -> SparseTaps<F> {
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    plan_from_inverse_map(h, w, move |oy, ox| {
        let dy = oy - cy;
        let dx = ox - cx;
        (cy + dy * cos - dx * sin, cx + dy * sin + dx * cos)
    })
}

/// Subpixel translation by `(dy, dx)` pixels.
pub fn translate_plan<F: Scalar>(h: usize, w: usize, dy: f64, dx: f64) -> SparseTaps<F> {
    plan_from_inverse_map(h, w, move |oy, ox| (oy - dy, ox - dx))
}

/// Uniform scaling by `factor` about the center: `factor < 1` shrinks with a
/// zero border, `factor > 1` zooms (center crop).
pub fn scale_plan<F: Scalar>(h: usize, w: usize, factor: f64) -> SparseTaps<F> {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    plan_from_inverse_map(h, w, move |oy, ox| {
        (cy + (oy - cy) / factor, cx + (ox - cx) / factor)
    })
}

/// Horizontal shear by `angle_deg` about the center row.
pub fn shear_plan<F: Scalar>(h: usize, w: usize, angle_deg: f64) -> SparseTaps<F> {
    let s = angle_deg.to_radians().tan();
    let cy = (h as f64 - 1.0) / 2.0;
    plan_from_inverse_map(h, w, move |oy, ox| (oy, ox - s * (oy - cy)))
}

/// Identity plan (used by zero-parameter edge cases).
pub fn identity_plan<F: Scalar>(h: usize, w: usize) -> SparseTaps<F> {
    plan_from_inverse_map(h, w, |oy, ox| (oy, ox))
}

/// Keep exactly `ceil(p * h * w)` pixels inside a (near-square) rectangle
/// anchored at `(top, left)`; everything else is dropped. The kept count is
/// exact: if the rectangle overshoots, cells are trimmed from its tail in
/// row-major order.
///
/// Returns a `(h * w)` mask of 0/1 values.
pub fn crop_mask(h: usize, w: usize, p: f64, top: usize, left: usize) -> Vec<u8> {
    let total = h * w;
    let target = (p * total as f64).ceil() as usize;
    let target = target.clamp(1, total);
    let (rect_h, rect_w) = crop_rect_dims(h, w, target);
    debug_assert!(top + rect_h <= h && left + rect_w <= w);
    let extra = rect_h * rect_w - target;

    let mut mask = vec![0u8; total];
    let mut trimmed = 0;
    // Trim from the rectangle's tail (last row, rightmost cells first).
    for ry in (0..rect_h).rev() {
        for rx in (0..rect_w).rev() {
            let keep = trimmed >= extra;
            if !keep {
                trimmed += 1;
                continue;
            }
            mask[(top + ry) * w + (left + rx)] = 1;
        }
    }
    mask
}

/// Near-square rectangle dimensions covering at least `target` cells.
pub fn crop_rect_dims(h: usize, w: usize, target: usize) -> (usize, usize) {
    let ideal_h = ((target as f64) * (h as f64) / (w as f64)).sqrt().round() as usize;
    let mut rect_h = ideal_h.clamp(1, h);
    let mut rect_w = target.div_ceil(rect_h);
    if rect_w > w {
        rect_w = w;
        rect_h = target.div_ceil(rect_w);
    }
    debug_assert!(rect_h <= h && rect_h * rect_w >= target);
    (rect_h, rect_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rotation_is_identity() {
        let plan = rotate_plan::<f64>(8, 8, 0.0);
        let src: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
        let mut dst = vec![0.0; 64];
        plan.apply_plane(&src, &mut dst);
        for (a, b) in src.iter().zip(dst.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_scale_is_identity() {
        let plan = scale_plan::<f64>(8, 8, 1.0);
        let src: Vec<f64> = (0..64).map(|i| (i * 7 % 64) as f64 / 64.0).collect();
        let mut dst = vec![0.0; 64];
        plan.apply_plane(&src, &mut dst);
        for (a, b) in src.iter().zip(dst.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn translate_by_integer_shifts_exactly() {
        let plan = translate_plan::<f64>(4, 4, 1.0, 0.0);
        let src: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut dst = vec![0.0; 16];
        plan.apply_plane(&src, &mut dst);
        // Row 0 falls outside (zero), row r reads row r-1.
        for x in 0..4 {
            assert_eq!(dst[x], 0.0);
            assert_eq!(dst[4 + x], src[x]);
        }
    }

    #[test]
    fn crop_mask_keeps_exact_count() {
        for &(h, w, p) in &[(128usize, 128usize, 0.1f64), (32, 32, 0.1), (16, 20, 0.37), (16, 16, 1.0)] {
            let target = (p * (h * w) as f64).ceil() as usize;
            let mask = crop_mask(h, w, p, 0, 0);
            let kept: usize = mask.iter().map(|&m| m as usize).sum();
            assert_eq!(kept, target.clamp(1, h * w), "h={h} w={w} p={p}");
        }
    }
}
