use super::Tensor;

/// Mirror-without-edge-repeat index mapping. Accepts any signed coordinate
/// and folds it into `[0, n)` with period `2n - 2`, so pads wider than the
/// image still resolve. A single-element axis maps everything to 0.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Reflection-pad the two spatial axes by `pad` on every side.
pub fn reflect_pad(x: &Tensor, pad: usize) -> Tensor {
    if pad == 0 {
        return x.clone();
    }
    let (n, c, h, w) = x.dim();
    let mut out = Tensor::zeros((n, c, h + 2 * pad, w + 2 * pad));
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..h + 2 * pad {
                let sy = reflect_index(oy as isize - pad as isize, h);
                for ox in 0..w + 2 * pad {
                    let sx = reflect_index(ox as isize - pad as isize, w);
                    out[[b, ch, oy, ox]] = x[[b, ch, sy, sx]];
                }
            }
        }
    }
    out
}

/// Fold gradients of a reflect-padded tensor back onto the original shape.
pub fn reflect_pad_backward(gy_padded: &Tensor, pad: usize, orig_h: usize, orig_w: usize) -> Tensor {
    let (n, c, hp, wp) = gy_padded.dim();
    debug_assert_eq!(hp, orig_h + 2 * pad);
    debug_assert_eq!(wp, orig_w + 2 * pad);
    if pad == 0 {
        return gy_padded.clone();
    }
    let mut gx = Tensor::zeros((n, c, orig_h, orig_w));
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..hp {
                let sy = reflect_index(oy as isize - pad as isize, orig_h);
                for ox in 0..wp {
                    let sx = reflect_index(ox as isize - pad as isize, orig_w);
                    gx[[b, ch, sy, sx]] += gy_padded[[b, ch, oy, ox]];
                }
            }
        }
    }
    gx
}
