//! Layer forward/backward kernels. Shapes follow the planar image layout of
//! [`crate::image::Image`]; activations passed between layers are raw `f32`
//! buffers plus explicit dimensions.

use super::{ParamCollection, LEAK};
use crate::nn::params::Param;
use crate::rng::Pcg32;

fn he_normal(rng: &mut Pcg32, fan_in: usize, n: usize, scale: f32) -> Vec<f32> {
    let std = (2.0 / fan_in as f32).sqrt() * scale;
    (0..n).map(|_| rng.normal_f32() * std).collect()
}

/// 3x3 convolution, zero padding 1, configurable stride.
/// Output spatial size is `floor((n - 1) / stride) + 1`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        Conv2d {
            name: name.into(),
            in_ch,
            out_ch,
            stride,
        }
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side - 1) / self.stride + 1
    }

    pub fn init(&self, params: &mut ParamCollection, rng: &mut Pcg32) {
        let n = self.out_ch * self.in_ch * 9;
        params.add(Param {
            name: format!("{}.w", self.name),
            shape: vec![self.out_ch, self.in_ch, 3, 3],
            data: he_normal(rng, self.in_ch * 9, n, 1.0),
        });
        params.add(Param::zeros(format!("{}.b", self.name), vec![self.out_ch]));
    }

    /// `x` is `[in_ch, h, w]` flat; returns `[out_ch, oh, ow]` flat.
    pub fn forward(&self, params: &ParamCollection, x: &[f32], h: usize, w: usize) -> Vec<f32> {
        let wgt = &params.get(&format!("{}.w", self.name)).data;
        let bias = &params.get(&format!("{}.b", self.name)).data;
        let (oh, ow) = (self.out_side(h), self.out_side(w));
        let mut out = vec![0.0f32; self.out_ch * oh * ow];
        for oc in 0..self.out_ch {
            let wbase = oc * self.in_ch * 9;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[oc];
                    let iy0 = (oy * self.stride) as i64 - 1;
                    let ix0 = (ox * self.stride) as i64 - 1;
                    for ic in 0..self.in_ch {
                        let plane = ic * h * w;
                        let wk = wbase + ic * 9;
                        for ky in 0..3i64 {
                            let iy = iy0 + ky;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let row = plane + iy as usize * w;
                            for kx in 0..3i64 {
                                let ix = ix0 + kx;
                                if ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                acc += wgt[wk + (ky * 3 + kx) as usize] * x[row + ix as usize];
                            }
                        }
                    }
                    out[oc * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        out
    }

    /// Accumulates weight/bias grads into `grads` and returns the input grad.
    pub fn backward(
        &self,
        params: &ParamCollection,
        x: &[f32],
        h: usize,
        w: usize,
        gy: &[f32],
        grads: &mut ParamCollection,
    ) -> Vec<f32> {
        let wgt = &params.get(&format!("{}.w", self.name)).data;
        let (oh, ow) = (self.out_side(h), self.out_side(w));
        let mut gx = vec![0.0f32; self.in_ch * h * w];
        {
            let gw = &mut grads.get_mut(&format!("{}.w", self.name)).data;
            for oc in 0..self.out_ch {
                let wbase = oc * self.in_ch * 9;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gy[oc * oh * ow + oy * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        let iy0 = (oy * self.stride) as i64 - 1;
                        let ix0 = (ox * self.stride) as i64 - 1;
                        for ic in 0..self.in_ch {
                            let plane = ic * h * w;
                            let wk = wbase + ic * 9;
                            for ky in 0..3i64 {
                                let iy = iy0 + ky;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                let row = plane + iy as usize * w;
                                for kx in 0..3i64 {
                                    let ix = ix0 + kx;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    let idx = row + ix as usize;
                                    gw[wk + (ky * 3 + kx) as usize] += g * x[idx];
                                    gx[idx] += g * wgt[wk + (ky * 3 + kx) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let gb = &mut grads.get_mut(&format!("{}.b", self.name)).data;
        for oc in 0..self.out_ch {
            let base = oc * oh * ow;
            gb[oc] += gy[base..base + oh * ow].iter().sum::<f32>();
        }
        gx
    }
}

/// 2x2 transposed convolution with stride 2: doubles the spatial side.
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvTranspose2x2 {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        ConvTranspose2x2 {
            name: name.into(),
            in_ch,
            out_ch,
        }
    }

    pub fn init(&self, params: &mut ParamCollection, rng: &mut Pcg32) {
        let n = self.in_ch * self.out_ch * 4;
        params.add(Param {
            name: format!("{}.w", self.name),
            shape: vec![self.in_ch, self.out_ch, 2, 2],
            data: he_normal(rng, self.in_ch, n, 1.0),
        });
        params.add(Param::zeros(format!("{}.b", self.name), vec![self.out_ch]));
    }

    /// `x` is `[in_ch, h, w]`; returns `[out_ch, 2h, 2w]`.
    pub fn forward(&self, params: &ParamCollection, x: &[f32], h: usize, w: usize) -> Vec<f32> {
        let wgt = &params.get(&format!("{}.w", self.name)).data;
        let bias = &params.get(&format!("{}.b", self.name)).data;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; self.out_ch * oh * ow];
        for oc in 0..self.out_ch {
            out[oc * oh * ow..(oc + 1) * oh * ow].fill(bias[oc]);
        }
        for ic in 0..self.in_ch {
            for y in 0..h {
                for x_ in 0..w {
                    let v = x[ic * h * w + y * w + x_];
                    if v == 0.0 {
                        continue;
                    }
                    for oc in 0..self.out_ch {
                        let wk = (ic * self.out_ch + oc) * 4;
                        let obase = oc * oh * ow;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                out[obase + (2 * y + dy) * ow + (2 * x_ + dx)] +=
                                    v * wgt[wk + dy * 2 + dx];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        params: &ParamCollection,
        x: &[f32],
        h: usize,
        w: usize,
        gy: &[f32],
        grads: &mut ParamCollection,
    ) -> Vec<f32> {
        let wgt = &params.get(&format!("{}.w", self.name)).data;
        let (oh, ow) = (2 * h, 2 * w);
        let mut gx = vec![0.0f32; self.in_ch * h * w];
        {
            let gw = &mut grads.get_mut(&format!("{}.w", self.name)).data;
            for ic in 0..self.in_ch {
                for y in 0..h {
                    for x_ in 0..w {
                        let xv = x[ic * h * w + y * w + x_];
                        let mut acc = 0.0f32;
                        for oc in 0..self.out_ch {
                            let wk = (ic * self.out_ch + oc) * 4;
                            let obase = oc * oh * ow;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let g = gy[obase + (2 * y + dy) * ow + (2 * x_ + dx)];
                                    acc += g * wgt[wk + dy * 2 + dx];
                                    gw[wk + dy * 2 + dx] += g * xv;
                                }
                            }
                        }
                        gx[ic * h * w + y * w + x_] = acc;
                    }
                }
            }
        }
        let gb = &mut grads.get_mut(&format!("{}.b", self.name)).data;
        for oc in 0..self.out_ch {
            let base = oc * oh * ow;
            gb[oc] += gy[base..base + oh * ow].iter().sum::<f32>();
        }
        gx
    }
}

/// Dense layer `y = W x + b`, `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, params: &mut ParamCollection, rng: &mut Pcg32) {
        self.init_scaled(params, rng, 1.0);
    }

    /// `scale` shrinks the init; the final localizability projection starts
    /// small so early teacher logits stay near uniform.
    pub fn init_scaled(&self, params: &mut ParamCollection, rng: &mut Pcg32, scale: f32) {
        params.add(Param {
            name: format!("{}.w", self.name),
            shape: vec![self.out_dim, self.in_dim],
            data: he_normal(rng, self.in_dim, self.out_dim * self.in_dim, scale),
        });
        params.add(Param::zeros(format!("{}.b", self.name), vec![self.out_dim]));
    }

    pub fn forward(&self, params: &ParamCollection, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.in_dim);
        let w = &params.get(&format!("{}.w", self.name)).data;
        let b = &params.get(&format!("{}.b", self.name)).data;
        let mut out = vec![0.0f32; self.out_dim];
        for o in 0..self.out_dim {
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(x.iter()) {
                acc += wi * xi;
            }
            out[o] = acc;
        }
        out
    }

    pub fn backward(
        &self,
        params: &ParamCollection,
        x: &[f32],
        gy: &[f32],
        grads: &mut ParamCollection,
    ) -> Vec<f32> {
        let w = &params.get(&format!("{}.w", self.name)).data;
        let mut gx = vec![0.0f32; self.in_dim];
        {
            let gw = &mut grads.get_mut(&format!("{}.w", self.name)).data;
            for o in 0..self.out_dim {
                let g = gy[o];
                if g == 0.0 {
                    continue;
                }
                let row = o * self.in_dim;
                for i in 0..self.in_dim {
                    gw[row + i] += g * x[i];
                    gx[i] += g * w[row + i];
                }
            }
        }
        let gb = &mut grads.get_mut(&format!("{}.b", self.name)).data;
        for (o, g) in gy.iter().enumerate() {
            gb[o] += g;
        }
        gx
    }
}

/// Bias-free linear layer whose weight rows are L2-normalized on the fly:
/// `z_o = (w_o / ||w_o||) . x`. Each output behaves as a unit prototype
/// direction, so the logit scale tracks the input scale instead of shrinking
/// with `1/sqrt(fan_in)`.
#[derive(Debug, Clone)]
pub struct NormalizedLinear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl NormalizedLinear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        NormalizedLinear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, params: &mut ParamCollection, rng: &mut Pcg32) {
        params.add(Param {
            name: format!("{}.w", self.name),
            shape: vec![self.out_dim, self.in_dim],
            data: (0..self.out_dim * self.in_dim)
                .map(|_| rng.normal_f32())
                .collect(),
        });
    }

    pub fn forward(&self, params: &ParamCollection, x: &[f32]) -> Vec<f32> {
        let w = &params.get(&format!("{}.w", self.name)).data;
        let mut out = vec![0.0f32; self.out_dim];
        for o in 0..self.out_dim {
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut dot = 0.0f64;
            let mut nrm = 0.0f64;
            for (wi, xi) in row.iter().zip(x.iter()) {
                dot += *wi as f64 * *xi as f64;
                nrm += *wi as f64 * *wi as f64;
            }
            out[o] = (dot / nrm.sqrt().max(1e-12)) as f32;
        }
        out
    }

    pub fn backward(
        &self,
        params: &ParamCollection,
        x: &[f32],
        gy: &[f32],
        grads: &mut ParamCollection,
    ) -> Vec<f32> {
        let w = &params.get(&format!("{}.w", self.name)).data;
        let gw = &mut grads.get_mut(&format!("{}.w", self.name)).data;
        let mut gx = vec![0.0f32; self.in_dim];
        for o in 0..self.out_dim {
            let g = gy[o];
            if g == 0.0 {
                continue;
            }
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut dot = 0.0f64;
            let mut nrm2 = 0.0f64;
            for (wi, xi) in row.iter().zip(x.iter()) {
                dot += *wi as f64 * *xi as f64;
                nrm2 += *wi as f64 * *wi as f64;
            }
            let nrm = nrm2.sqrt().max(1e-12);
            let z = dot / nrm;
            // d z / d x = w_hat ; d z / d w = (x - w_hat * z) / ||w||
            for i in 0..self.in_dim {
                let what = row[i] as f64 / nrm;
                gx[i] += (g as f64 * what) as f32;
                gw[o * self.in_dim + i] +=
                    (g as f64 * (x[i] as f64 - what * z) / nrm) as f32;
            }
        }
        gx
    }
}

pub fn leaky_relu(xs: &[f32]) -> Vec<f32> {
    xs.iter().map(|&v| if v > 0.0 { v } else { LEAK * v }).collect()
}

/// L2 normalization to the unit sphere; returns `(unit, norm)`. Inputs with
/// vanishing norm pass through unscaled.
pub fn l2norm(xs: &[f32]) -> (Vec<f32>, f32) {
    let norm = (xs.iter().map(|&v| v as f64 * v as f64).sum::<f64>()).sqrt() as f32;
    if norm < 1e-12 {
        return (xs.to_vec(), 1.0);
    }
    (xs.iter().map(|&v| v / norm).collect(), norm)
}

/// Backward through [`l2norm`] given the unit output and the stored norm:
/// `gx = (g - y (y . g)) / norm`.
pub fn l2norm_backward(unit: &[f32], norm: f32, gy: &[f32]) -> Vec<f32> {
    let dot: f32 = unit.iter().zip(gy.iter()).map(|(&y, &g)| y * g).sum();
    unit.iter()
        .zip(gy.iter())
        .map(|(&y, &g)| (g - y * dot) / norm)
        .collect()
}

/// Affine-free layer normalization over a flat vector:
/// `y = (x - mean) / sqrt(var + eps)`. Returns `(y, inv_std)`. Removes the
/// per-sample common mode and fixes the output norm near `sqrt(n)`.
pub fn layer_norm(xs: &[f32]) -> (Vec<f32>, f32) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    (
        xs.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect(),
        inv as f32,
    )
}

/// Backward through [`layer_norm`] given the normalized output and stored
/// inverse std: `gx = inv * (g - mean(g) - y * mean(g * y))`.
pub fn layer_norm_backward(y: &[f32], inv_std: f32, gy: &[f32]) -> Vec<f32> {
    let n = y.len() as f64;
    let mean_g = gy.iter().map(|&g| g as f64).sum::<f64>() / n;
    let mean_gy = y
        .iter()
        .zip(gy.iter())
        .map(|(&yv, &g)| yv as f64 * g as f64)
        .sum::<f64>()
        / n;
    y.iter()
        .zip(gy.iter())
        .map(|(&yv, &g)| {
            (inv_std as f64 * (g as f64 - mean_g - yv as f64 * mean_gy)) as f32
        })
        .collect()
}

/// `pre` is the pre-activation input that produced the forward output.
pub fn leaky_relu_backward(pre: &[f32], gy: &[f32]) -> Vec<f32> {
    pre.iter()
        .zip(gy.iter())
        .map(|(&p, &g)| if p > 0.0 { g } else { LEAK * g })
        .collect()
}

/// Global average pool over the spatial extent of `[ch, h, w]`.
pub fn gap(x: &[f32], ch: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = (h * w) as f32;
    (0..ch)
        .map(|c| x[c * h * w..(c + 1) * h * w].iter().sum::<f32>() / hw)
        .collect()
}

pub fn gap_backward(gy: &[f32], ch: usize, h: usize, w: usize) -> Vec<f32> {
    let hw = (h * w) as f32;
    let mut gx = vec![0.0f32; ch * h * w];
    for c in 0..ch {
        let g = gy[c] / hw;
        gx[c * h * w..(c + 1) * h * w].fill(g);
    }
    gx
}

/// Stack of [`Linear`] layers with leaky ReLU between them (none after the
/// last). Covers all three projection heads.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Per-layer inputs and pre-activations captured during `forward_train`.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    inputs: Vec<Vec<f32>>,
    pres: Vec<Vec<f32>>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`, layer names `{prefix}.fc{i}`.
    pub fn new(prefix: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(format!("{prefix}.fc{i}"), d[0], d[1]))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn init(&self, params: &mut ParamCollection, rng: &mut Pcg32, last_scale: f32) {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.init_scaled(params, rng, if i == last { last_scale } else { 1.0 });
        }
    }

    pub fn forward(&self, params: &ParamCollection, x: &[f32]) -> Vec<f32> {
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(params, &cur);
            if i + 1 < self.layers.len() {
                cur = leaky_relu(&cur);
            }
        }
        cur
    }

    pub fn forward_train(&self, params: &ParamCollection, x: &[f32]) -> (Vec<f32>, MlpTrace) {
        let mut trace = MlpTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            pres: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            trace.inputs.push(cur.clone());
            let pre = layer.forward(params, &cur);
            trace.pres.push(pre.clone());
            cur = if i + 1 < self.layers.len() {
                leaky_relu(&pre)
            } else {
                pre
            };
        }
        (cur, trace)
    }

    pub fn backward(
        &self,
        params: &ParamCollection,
        trace: &MlpTrace,
        gy: &[f32],
        grads: &mut ParamCollection,
    ) -> Vec<f32> {
        let mut g = gy.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                g = leaky_relu_backward(&trace.pres[i], &g);
            }
            g = self.layers[i].backward(params, &trace.inputs[i], &g, grads);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;

    /// Central-difference gradient of a scalar-valued function of a flat
    /// parameter vector.
    fn fd_grad(f: &mut dyn FnMut(&[f32]) -> f64, x: &[f32], eps: f32) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        let mut buf = x.to_vec();
        for i in 0..x.len() {
            let orig = buf[i];
            buf[i] = orig + eps;
            let up = f(&buf);
            buf[i] = orig - eps;
            let down = f(&buf);
            buf[i] = orig;
            g.push((up - down) / (2.0 * eps as f64));
        }
        g
    }

    fn assert_grads_close(analytic: &[f32], numeric: &[f64], tol: f64, what: &str) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            let denom = n.abs().max(1e-3);
            let rel = ((a as f64) - n).abs() / denom;
            assert!(rel < tol, "{what}[{i}]: analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn conv_shapes() {
        let conv = Conv2d::new("c", 2, 3, 2);
        assert_eq!(conv.out_side(8), 4);
        assert_eq!(conv.out_side(7), 4);
        assert_eq!(conv.out_side(1), 1);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = Pcg32::new(1, 1);
        let conv = Conv2d::new("c", 2, 3, 2);
        let mut params = ParamCollection::new();
        conv.init(&mut params, &mut rng);
        let (h, w) = (5, 5);
        let x: Vec<f32> = (0..2 * h * w).map(|_| rng.normal_f32() * 0.5).collect();
        // target: a fixed random projection of the output, so the scalar loss
        // exercises every output element
        let (oh, ow) = (conv.out_side(h), conv.out_side(w));
        let proj: Vec<f32> = (0..3 * oh * ow).map(|_| rng.normal_f32()).collect();

        let loss = |out: &[f32]| -> f64 {
            out.iter().zip(&proj).map(|(&o, &p)| (o * p) as f64).sum()
        };
        let gy: Vec<f32> = proj.clone();

        let mut grads = params.zeros_like();
        let gx = conv.backward(&params, &x, h, w, &gy, &mut grads);

        // input gradient
        let mut f_input = |xs: &[f32]| loss(&conv.forward(&params, xs, h, w));
        let fd_x = fd_grad(&mut f_input, &x, 1e-3);
        assert_grads_close(&gx, &fd_x, 2e-2, "conv gx");

        // weight gradient
        let wdata = params.get("c.w").data.clone();
        let mut f_w = |ws: &[f32]| {
            let mut p2 = params.clone();
            p2.get_mut("c.w").data.copy_from_slice(ws);
            loss(&conv.forward(&p2, &x, h, w))
        };
        let fd_w = fd_grad(&mut f_w, &wdata, 1e-3);
        assert_grads_close(&grads.get("c.w").data, &fd_w, 2e-2, "conv gw");
    }

    #[test]
    fn conv_transpose_doubles_and_gradients_match() {
        let mut rng = Pcg32::new(2, 1);
        let ct = ConvTranspose2x2::new("u", 3, 2);
        let mut params = ParamCollection::new();
        ct.init(&mut params, &mut rng);
        let (h, w) = (3, 3);
        let x: Vec<f32> = (0..3 * h * w).map(|_| rng.normal_f32() * 0.5).collect();
        let out = ct.forward(&params, &x, h, w);
        assert_eq!(out.len(), 2 * 6 * 6);

        let proj: Vec<f32> = (0..out.len()).map(|_| rng.normal_f32()).collect();
        let loss = |o: &[f32]| o.iter().zip(&proj).map(|(&a, &p)| (a * p) as f64).sum::<f64>();
        let mut grads = params.zeros_like();
        let gx = ct.backward(&params, &x, h, w, &proj, &mut grads);

        let mut f_input = |xs: &[f32]| loss(&ct.forward(&params, xs, h, w));
        let fd_x = fd_grad(&mut f_input, &x, 1e-3);
        assert_grads_close(&gx, &fd_x, 2e-2, "convT gx");
    }

    #[test]
    fn linear_matches_manual() {
        let mut params = ParamCollection::new();
        params.add(Param {
            name: "l.w".into(),
            shape: vec![2, 3],
            data: vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5],
        });
        params.add(Param {
            name: "l.b".into(),
            shape: vec![2],
            data: vec![0.1, -0.1],
        });
        let lin = Linear::new("l", 3, 2);
        let y = lin.forward(&params, &[1.0, 2.0, 3.0]);
        assert!((y[0] - (1.0 - 3.0 + 0.1)).abs() < 1e-6);
        assert!((y[1] - (0.5 + 1.0 + 1.5 - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = Pcg32::new(3, 1);
        let mlp = Mlp::new("h", &[4, 6, 3]);
        let mut params = ParamCollection::new();
        mlp.init(&mut params, &mut rng, 1.0);
        let x: Vec<f32> = (0..4).map(|_| rng.normal_f32()).collect();
        let proj: Vec<f32> = (0..3).map(|_| rng.normal_f32()).collect();
        let loss =
            |o: &[f32]| o.iter().zip(&proj).map(|(&a, &p)| (a * p) as f64).sum::<f64>();

        let (_, trace) = mlp.forward_train(&params, &x);
        let mut grads = params.zeros_like();
        let gx = mlp.backward(&params, &trace, &proj, &mut grads);

        let mut f_input = |xs: &[f32]| loss(&mlp.forward(&params, xs));
        let fd_x = fd_grad(&mut f_input, &x, 1e-3);
        assert_grads_close(&gx, &fd_x, 2e-2, "mlp gx");

        let w0 = params.get("h.fc0.w").data.clone();
        let mut f_w = |ws: &[f32]| {
            let mut p2 = params.clone();
            p2.get_mut("h.fc0.w").data.copy_from_slice(ws);
            loss(&mlp.forward(&p2, &x))
        };
        let fd_w = fd_grad(&mut f_w, &w0, 1e-3);
        assert_grads_close(&grads.get("h.fc0.w").data, &fd_w, 2e-2, "mlp gw0");
    }

    #[test]
    fn gap_averages_planes() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0];
        let g = gap(&x, 2, 2, 2);
        assert_eq!(g, vec![2.5, 10.0]);
        let back = gap_backward(&[4.0, 8.0], 2, 2, 2);
        assert_eq!(back[0], 1.0);
        assert_eq!(back[4], 2.0);
    }
}
