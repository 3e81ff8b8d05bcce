use super::Tensor;

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Tensor, gy: &Tensor, slope: f64) -> Tensor {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &v| {
        if v <= 0.0 {
            *g *= slope;
        }
    });
    gx
}

/// tanh rescaled onto an arbitrary output interval (lo, hi):
/// y = mid + half * tanh(x). The default interval (-1, 1) is the identity
/// rescale.
pub fn tanh_range(x: &Tensor, lo: f64, hi: f64) -> Tensor {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    x.mapv(|v| mid + half * v.tanh())
}

pub fn tanh_range_backward(x: &Tensor, gy: &Tensor, lo: f64, hi: f64) -> Tensor {
    let half = 0.5 * (hi - lo);
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &v| {
        let t = v.tanh();
        *g *= half * (1.0 - t * t);
    });
    gx
}
