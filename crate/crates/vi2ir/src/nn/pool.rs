use super::pad::reflect_index;
use super::Tensor;

/// 3x3 stride-2 average pooling with reflect padding 1. Maps (h, w) to
/// (ceil(h/2), ceil(w/2)) and preserves constant images exactly on
/// integer-valued inputs.
pub fn avg_pool_down(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dim();
    assert!(h > 0 && w > 0, "empty input to avg_pool_down");
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut y = Tensor::zeros((n, c, oh, ow));
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for di in -1..=1isize {
                        let sy = reflect_index(2 * oy as isize + di, h);
                        for dj in -1..=1isize {
                            let sx = reflect_index(2 * ox as isize + dj, w);
                            acc += x[[b, ch, sy, sx]];
                        }
                    }
                    y[[b, ch, oy, ox]] = acc / 9.0;
                }
            }
        }
    }
    y
}

/// Adjoint of `avg_pool_down` for an original input of size (h, w).
pub fn avg_pool_down_backward(gy: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, oh, ow) = gy.dim();
    debug_assert_eq!((oh, ow), (h.div_ceil(2), w.div_ceil(2)));
    let mut gx = Tensor::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gy[[b, ch, oy, ox]] / 9.0;
                    for di in -1..=1isize {
                        let sy = reflect_index(2 * oy as isize + di, h);
                        for dj in -1..=1isize {
                            let sx = reflect_index(2 * ox as isize + dj, w);
                            gx[[b, ch, sy, sx]] += g;
                        }
                    }
                }
            }
        }
    }
    gx
}
