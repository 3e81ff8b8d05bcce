use ndarray::Axis;

use super::param::{Grads, ParamId, ParamStore, Params};
use super::Tensor;

const EPS: f64 = 1e-5;

/// Instance normalization with learned per-channel affine parameters.
/// Statistics are computed per (sample, channel) over the spatial axes, so
/// the result is independent of batch composition.
#[derive(Debug, Clone)]
pub struct InstanceNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl InstanceNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.alloc(format!("{name}.g"), &[channels], || 1.0);
        let beta = store.alloc(format!("{name}.bt"), &[channels], || 0.0);
        InstanceNorm2d {
            gamma,
            beta,
            channels,
        }
    }

    pub fn forward(&self, ps: Params, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "instance norm channels");
        let gamma = ps.view1(self.gamma);
        let beta = ps.view1(self.beta);
        let m = (h * w) as f64;
        let mut y = Tensor::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                let plane = x.index_axis(Axis(0), b);
                let plane = plane.index_axis(Axis(0), ch);
                let mean = plane.sum() / m;
                let var = plane.mapv(|v| (v - mean) * (v - mean)).sum() / m;
                let inv_std = 1.0 / (var + EPS).sqrt();
                let (g, bt) = (gamma[ch], beta[ch]);
                let mut out_plane = y.index_axis_mut(Axis(0), b);
                let mut out_plane = out_plane.index_axis_mut(Axis(0), ch);
                ndarray::Zip::from(&mut out_plane)
                    .and(&plane)
                    .for_each(|o, &v| *o = g * (v - mean) * inv_std + bt);
            }
        }
        y
    }

    pub fn backward(&self, ps: Params, gs: &mut Grads, x: &Tensor, gy: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        let gamma = ps.view1(self.gamma);
        let m = (h * w) as f64;
        let mut gx = Tensor::zeros((n, c, h, w));
        let mut g_gamma = vec![0.0; c];
        let mut g_beta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let plane = x.index_axis(Axis(0), b);
                let plane = plane.index_axis(Axis(0), ch);
                let gplane = gy.index_axis(Axis(0), b);
                let gplane = gplane.index_axis(Axis(0), ch);
                let mean = plane.sum() / m;
                let var = plane.mapv(|v| (v - mean) * (v - mean)).sum() / m;
                let inv_std = 1.0 / (var + EPS).sqrt();

                // Accumulate affine grads via the normalized activations.
                let mut sum_gy = 0.0;
                let mut sum_gy_xhat = 0.0;
                for (g, v) in gplane.iter().zip(plane.iter()) {
                    let xhat = (v - mean) * inv_std;
                    sum_gy += g;
                    sum_gy_xhat += g * xhat;
                }
                g_gamma[ch] += sum_gy_xhat;
                g_beta[ch] += sum_gy;

                // dx = (gamma*inv_std/m) * (m*gy - sum(gy) - xhat*sum(gy*xhat))
                let scale = gamma[ch] * inv_std / m;
                let mut out_plane = gx.index_axis_mut(Axis(0), b);
                let mut out_plane = out_plane.index_axis_mut(Axis(0), ch);
                ndarray::Zip::from(&mut out_plane)
                    .and(&plane)
                    .and(&gplane)
                    .for_each(|o, &v, &g| {
                        let xhat = (v - mean) * inv_std;
                        *o = scale * (m * g - sum_gy - xhat * sum_gy_xhat);
                    });
            }
        }
        gs.add(self.gamma, &g_gamma);
        gs.add(self.beta, &g_beta);
        gx
    }
}
