//! Minimal f64 neural-network building blocks with analytic gradients.
//!
//! Everything is hand-rolled and sequential: layers are plain structs over
//! flat `Vec<f64>` buffers, forward passes return explicit caches, and every
//! backward pass is the exact adjoint of its forward pass. That keeps the
//! whole stack deterministic (no thread-order effects) and lets gradient
//! checks compare the analytic gradients against central finite differences
//! in double precision.
//!
//! Activations are ELU (continuously differentiable) and sigmoid; the only
//! kink-free exception would be ReLU-family activations, which are avoided
//! precisely so finite-difference probes never straddle a non-smooth point.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// One sample's feature map, `(channel, row, col)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Feat {
    pub fn zeros(c: usize, h: usize, w: usize) -> Feat {
        Feat {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_parts(c: usize, h: usize, w: usize, data: Vec<f64>) -> Feat {
        debug_assert_eq!(data.len(), c * h * w);
        Feat { c, h, w, data }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

/// ELU with alpha = 1: smooth at 0 up to first derivative.
#[inline]
pub fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

/// d elu / d v, as a function of the pre-activation.
#[inline]
pub fn elu_deriv(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        v.exp()
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// 2D convolution with square kernel, configurable stride and zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out_ch][in_ch][kernel][kernel]` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Conv2d {
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    /// He-normal weights (std = sqrt(2 / fan_in)), zero bias. Draw order is
    /// fixed (weights in index order), so a seeded source reproduces init.
    pub fn init_he(&mut self, rng: &mut impl Rng) {
        let fan_in = (self.in_ch * self.kernel * self.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("std is finite");
        for w in &mut self.weight {
            *w = normal.sample(rng);
        }
        for b in &mut self.bias {
            *b = 0.0;
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Feat) -> Feat {
        debug_assert_eq!(x.c, self.in_ch);
        let (oh, ow) = self.out_hw(x.h, x.w);
        let mut out = Feat::zeros(self.out_ch, oh, ow);
        let k = self.kernel;
        for oc in 0..self.out_ch {
            let out_plane = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
            out_plane.fill(self.bias[oc]);
            for ic in 0..self.in_ch {
                let xin = x.plane(ic);
                let wbase = ((oc * self.in_ch) + ic) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weight[wbase + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let xrow = &xin[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let orow = &mut out_plane[oy * ow..(oy + 1) * ow];
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < x.w as isize {
                                    orow[ox] += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulate parameter gradients into `gw`/`gb` and optionally return
    /// the gradient with respect to the input.
    pub fn backward(
        &self,
        x: &Feat,
        gout: &Feat,
        gw: &mut [f64],
        gb: &mut [f64],
        want_gx: bool,
    ) -> Option<Feat> {
        debug_assert_eq!(gw.len(), self.weight.len());
        debug_assert_eq!(gb.len(), self.bias.len());
        let (oh, ow) = (gout.h, gout.w);
        let k = self.kernel;
        let mut gx = if want_gx {
            Some(Feat::zeros(x.c, x.h, x.w))
        } else {
            None
        };
        for oc in 0..self.out_ch {
            let gplane = gout.plane(oc);
            gb[oc] += gplane.iter().sum::<f64>();
            for ic in 0..self.in_ch {
                let xin = x.plane(ic);
                let wbase = ((oc * self.in_ch) + ic) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = wbase + ky * k + kx;
                        let wv = self.weight[widx];
                        let mut gwv = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let xrow = &xin[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < x.w as isize {
                                    gwv += grow[ox] * xrow[ix as usize];
                                    if let Some(gx) = gx.as_mut() {
                                        gx.data[(ic * x.h + iy as usize) * x.w + ix as usize] +=
                                            wv * grow[ox];
                                    }
                                }
                            }
                        }
                        gw[widx] += gwv;
                    }
                }
            }
        }
        gx
    }
}

/// Fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out_dim][in_dim]` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize) -> Linear {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn init_he(&mut self, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, (2.0 / self.in_dim as f64).sqrt()).expect("std is finite");
        for w in &mut self.weight {
            *w = normal.sample(rng);
        }
        for b in &mut self.bias {
            *b = 0.0;
        }
    }

    /// Gaussian weights with the given std, zero bias (detector-head init).
    pub fn init_normal(&mut self, std: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, std).expect("std is finite");
        for w in &mut self.weight {
            *w = normal.sample(rng);
        }
        for b in &mut self.bias {
            *b = 0.0;
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn backward(
        &self,
        x: &[f64],
        gout: &[f64],
        gw: &mut [f64],
        gb: &mut [f64],
        want_gx: bool,
    ) -> Option<Vec<f64>> {
        debug_assert_eq!(gout.len(), self.out_dim);
        for (o, &g) in gout.iter().enumerate() {
            gb[o] += g;
            let row = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
            for (gw_i, &x_i) in row.iter_mut().zip(x) {
                *gw_i += g * x_i;
            }
        }
        if !want_gx {
            return None;
        }
        let mut gx = vec![0.0; self.in_dim];
        for (o, &g) in gout.iter().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for (gx_i, &w_i) in gx.iter_mut().zip(row) {
                *gx_i += g * w_i;
            }
        }
        Some(gx)
    }
}

/// Mean over the spatial extent of each channel.
pub fn global_avg_pool(x: &Feat) -> Vec<f64> {
    let area = (x.h * x.w) as f64;
    (0..x.c)
        .map(|c| x.plane(c).iter().sum::<f64>() / area)
        .collect()
}

pub fn global_avg_pool_backward(g: &[f64], c: usize, h: usize, w: usize) -> Feat {
    let mut out = Feat::zeros(c, h, w);
    let area = (h * w) as f64;
    for (ch, &gc) in g.iter().enumerate() {
        let v = gc / area;
        out.data[ch * h * w..(ch + 1) * h * w].fill(v);
    }
    out
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample_nearest2(x: &Feat) -> Feat {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Feat::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let srow = &src[(oy / 2) * x.w..(oy / 2 + 1) * x.w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for ox in 0..ow {
                drow[ox] = srow[ox / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest2`]: each source cell collects its 2x2 block.
pub fn upsample_nearest2_backward(g: &Feat) -> Feat {
    let (ih, iw) = (g.h / 2, g.w / 2);
    let mut out = Feat::zeros(g.c, ih, iw);
    for c in 0..g.c {
        let src = g.plane(c);
        let dst = &mut out.data[c * ih * iw..(c + 1) * ih * iw];
        for gy in 0..g.h {
            let srow = &src[gy * g.w..(gy + 1) * g.w];
            let drow = &mut dst[(gy / 2) * iw..(gy / 2 + 1) * iw];
            for gx in 0..g.w {
                drow[gx / 2] += srow[gx];
            }
        }
    }
    out
}

/// Stack two feature maps along the channel axis (U-Net style skip join).
pub fn concat_channels(a: &Feat, b: &Feat) -> Feat {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity((a.c + b.c) * a.h * a.w);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feat::from_parts(a.c + b.c, a.h, a.w, data)
}

/// Split a gradient back into the two concatenated parts.
pub fn split_channels(g: &Feat, c_first: usize) -> (Feat, Feat) {
    let plane = g.h * g.w;
    let first = Feat::from_parts(c_first, g.h, g.w, g.data[..c_first * plane].to_vec());
    let second = Feat::from_parts(
        g.c - c_first,
        g.h,
        g.w,
        g.data[c_first * plane..].to_vec(),
    );
    (first, second)
}
