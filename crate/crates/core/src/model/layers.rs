//! Layer primitives with explicit forward/backward passes.
//!
//! Tensors are flat `Vec<f32>` in row-major order. Image batches are laid
//! out as `[frames, channels, height, width]`; sequences as
//! `[batch, time, features]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// `C = A·B + beta·C` for row-major `A (m×k)`, `B (k×n)`, `C (m×n)`.
///
/// `a_t` / `b_t` mean the operand is stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(len: usize) -> Self {
        Self {
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    pub fn uniform<R: Rng>(len: usize, limit: f32, rng: &mut R) -> Self {
        Self {
            value: (0..len).map(|_| rng.gen_range(-limit..=limit)).collect(),
            grad: vec![0.0; len],
        }
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        } else {
            self.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

fn im2col(input: &[f32], cin: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    out[..x0.min(w)].iter_mut().for_each(|v| *v = 0.0);
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                    out[x1.max(x0)..].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
}

fn col2im(cols: &[f32], cin: usize, h: usize, w: usize, k: usize, out: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x1 <= x0 {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// 2-D convolution, stride 1, "same" zero padding, odd square kernel,
/// fused ReLU.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    /// `[cout, cin·k·k]`
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new<R: Rng>(cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = cin * kernel * kernel;
        let limit = (6.0 / fan_in as f32).sqrt();
        Self {
            cin,
            cout,
            kernel,
            weight: Param::uniform(cout * fan_in, limit, rng),
            bias: Param::zeros(cout),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Returns post-ReLU activations `[frames, cout, h, w]`.
    pub fn forward(&self, input: &[f32], frames: usize, h: usize, w: usize) -> Vec<f32> {
        let hw = h * w;
        let kk = self.cin * self.kernel * self.kernel;
        let mut cols = vec![0.0f32; kk * hw];
        let mut out = vec![0.0f32; frames * self.cout * hw];
        for f in 0..frames {
            let src = &input[f * self.cin * hw..(f + 1) * self.cin * hw];
            let dst = &mut out[f * self.cout * hw..(f + 1) * self.cout * hw];
            for (co, plane) in dst.chunks_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v = self.bias.value[co]);
            }
            if self.kernel == 1 {
                gemm(self.cout, kk, hw, &self.weight.value, false, src, false, dst, 1.0);
            } else {
                im2col(src, self.cin, h, w, self.kernel, &mut cols);
                gemm(self.cout, kk, hw, &self.weight.value, false, &cols, false, dst, 1.0);
            }
            dst.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_input_grad`. `grad_out` is the gradient w.r.t. the post-ReLU
    /// output and is consumed.
    pub fn backward(
        &mut self,
        input: &[f32],
        output: &[f32],
        mut grad_out: Vec<f32>,
        frames: usize,
        h: usize,
        w: usize,
        need_input_grad: bool,
    ) -> Option<Vec<f32>> {
        let hw = h * w;
        let kk = self.cin * self.kernel * self.kernel;
        for (g, &o) in grad_out.iter_mut().zip(output) {
            if o <= 0.0 {
                *g = 0.0;
            }
        }
        let mut cols = vec![0.0f32; kk * hw];
        let mut dcols = vec![0.0f32; kk * hw];
        let mut grad_in = if need_input_grad {
            vec![0.0f32; frames * self.cin * hw]
        } else {
            Vec::new()
        };
        for f in 0..frames {
            let src = &input[f * self.cin * hw..(f + 1) * self.cin * hw];
            let dout = &grad_out[f * self.cout * hw..(f + 1) * self.cout * hw];
            if dout.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (co, plane) in dout.chunks(hw).enumerate() {
                self.bias.grad[co] += plane.iter().sum::<f32>();
            }
            let cols_ref: &[f32] = if self.kernel == 1 {
                src
            } else {
                im2col(src, self.cin, h, w, self.kernel, &mut cols);
                &cols
            };
            // dW[cout, kk] += dout[cout, hw] · colsᵀ[hw, kk]
            gemm(self.cout, hw, kk, dout, false, cols_ref, true, &mut self.weight.grad, 1.0);
            if need_input_grad {
                let gin = &mut grad_in[f * self.cin * hw..(f + 1) * self.cin * hw];
                if self.kernel == 1 {
                    gemm(kk, self.cout, hw, &self.weight.value, true, dout, false, gin, 1.0);
                } else {
                    gemm(kk, self.cout, hw, &self.weight.value, true, dout, false, &mut dcols, 0.0);
                    col2im(&dcols, self.cin, h, w, self.kernel, gin);
                }
            }
        }
        need_input_grad.then_some(grad_in)
    }
}

/// 2×2 max pooling, stride 2, floor semantics.
pub struct PoolOutput {
    pub values: Vec<f32>,
    /// Flat input index of each selected maximum.
    pub argmax: Vec<u32>,
}

pub fn max_pool2(input: &[f32], planes: usize, h: usize, w: usize) -> PoolOutput {
    let (oh, ow) = (h / 2, w / 2);
    let mut values = vec![0.0f32; planes * oh * ow];
    let mut argmax = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let i0 = base + 2 * y * w + 2 * x;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                let o = (p * oh + y) * ow + x;
                values[o] = input[best];
                argmax[o] = best as u32;
            }
        }
    }
    PoolOutput { values, argmax }
}

pub fn max_pool2_backward(grad_out: &[f32], argmax: &[u32], input_len: usize) -> Vec<f32> {
    let mut grad_in = vec![0.0f32; input_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        grad_in[i as usize] += g;
    }
    grad_in
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Linear,
}

/// Fully connected layer `y = act(x·W + b)`, `W` stored `[in, out]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new<R: Rng>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = match activation {
            Activation::Relu => (6.0 / input as f32).sqrt(),
            _ => (6.0 / (input + output) as f32).sqrt(),
        };
        Self {
            input,
            output,
            activation,
            weight: Param::uniform(input * output, limit, rng),
            bias: Param::zeros(output),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f32], batch: usize) -> Vec<f32> {
        let mut y = Vec::with_capacity(batch * self.output);
        for _ in 0..batch {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(batch, self.input, self.output, x, false, &self.weight.value, false, &mut y, 1.0);
        match self.activation {
            Activation::Relu => y.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Tanh => y.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Linear => {}
        }
        y
    }

    pub fn backward(&mut self, x: &[f32], y: &[f32], mut grad_y: Vec<f32>, batch: usize) -> Vec<f32> {
        match self.activation {
            Activation::Relu => {
                for (g, &o) in grad_y.iter_mut().zip(y) {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for (g, &o) in grad_y.iter_mut().zip(y) {
                    *g *= 1.0 - o * o;
                }
            }
            Activation::Linear => {}
        }
        for row in grad_y.chunks(self.output) {
            for (b, g) in self.bias.grad.iter_mut().zip(row) {
                *b += g;
            }
        }
        gemm(self.input, batch, self.output, x, true, &grad_y, false, &mut self.weight.grad, 1.0);
        let mut grad_x = vec![0.0f32; batch * self.input];
        gemm(batch, self.output, self.input, &grad_y, false, &self.weight.value, true, &mut grad_x, 0.0);
        grad_x
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Which recurrent cell aggregates the per-frame features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecurrentKind {
    Lstm,
    Gru,
}

/// Single-layer recurrent cell returning the last hidden state.
///
/// LSTM gate order is `i, f, g, o` with sigmoid gates, tanh candidate/output.
/// GRU uses the "reset after" formulation with separate input and recurrent
/// biases, gate order `z, r, h`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Recurrent {
    pub kind: RecurrentKind,
    pub input: usize,
    pub units: usize,
    /// `[input, gates·units]`
    pub w_input: Param,
    /// `[units, gates·units]`
    pub w_hidden: Param,
    pub bias: Param,
    /// GRU only: bias added to the recurrent projection.
    pub bias_hidden: Param,
}

/// Values saved during a recurrent forward pass.
pub struct RecurrentCache {
    /// `[batch·time, gates·units]` input projections (bias included).
    proj: Vec<f32>,
    /// Per step: activated gates `[batch, gates·units]`.
    gates: Vec<Vec<f32>>,
    /// GRU only: recurrent candidate projection before the reset gate.
    hidden_cand: Vec<Vec<f32>>,
    /// States `h_0..h_T` (and `c_0..c_T` for LSTM), each `[batch, units]`.
    h: Vec<Vec<f32>>,
    c: Vec<Vec<f32>>,
}

impl Recurrent {
    pub fn new<R: Rng>(kind: RecurrentKind, input: usize, units: usize, rng: &mut R) -> Self {
        let gates = kind.gates();
        let in_limit = (6.0 / (input + units) as f32).sqrt();
        let h_limit = (1.0 / units as f32).sqrt();
        let mut bias = Param::zeros(gates * units);
        let bias_hidden = match kind {
            RecurrentKind::Lstm => {
                bias.value[units..2 * units].iter_mut().for_each(|b| *b = 1.0);
                Param::zeros(0)
            }
            RecurrentKind::Gru => Param::zeros(gates * units),
        };
        Self {
            kind,
            input,
            units,
            w_input: Param::uniform(input * gates * units, in_limit, rng),
            w_hidden: Param::uniform(units * gates * units, h_limit, rng),
            bias,
            bias_hidden,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w_input.len() + self.w_hidden.len() + self.bias.len() + self.bias_hidden.len()
    }

    /// `x` is `[batch, time, input]`; returns `(h_T, cache)`.
    pub fn forward(&self, x: &[f32], batch: usize, time: usize) -> (Vec<f32>, RecurrentCache) {
        let u = self.units;
        let gu = self.kind.gates() * u;
        let mut proj = Vec::with_capacity(batch * time * gu);
        for _ in 0..batch * time {
            proj.extend_from_slice(&self.bias.value);
        }
        gemm(batch * time, self.input, gu, x, false, &self.w_input.value, false, &mut proj, 1.0);

        let mut h = vec![vec![0.0f32; batch * u]];
        let mut c = vec![vec![0.0f32; batch * u]];
        let mut gates_all = Vec::with_capacity(time);
        let mut hidden_cand = Vec::new();
        for t in 0..time {
            let mut z = vec![0.0f32; batch * gu];
            match self.kind {
                RecurrentKind::Lstm => {
                    for b in 0..batch {
                        z[b * gu..(b + 1) * gu]
                            .copy_from_slice(&proj[(b * time + t) * gu..(b * time + t + 1) * gu]);
                    }
                    gemm(batch, u, gu, &h[t], false, &self.w_hidden.value, false, &mut z, 1.0);
                    let mut c_next = vec![0.0f32; batch * u];
                    let mut h_next = vec![0.0f32; batch * u];
                    for b in 0..batch {
                        let zr = &mut z[b * gu..(b + 1) * gu];
                        for j in 0..u {
                            let i_g = sigmoid(zr[j]);
                            let f_g = sigmoid(zr[u + j]);
                            let g_g = zr[2 * u + j].tanh();
                            let o_g = sigmoid(zr[3 * u + j]);
                            zr[j] = i_g;
                            zr[u + j] = f_g;
                            zr[2 * u + j] = g_g;
                            zr[3 * u + j] = o_g;
                            let cn = f_g * c[t][b * u + j] + i_g * g_g;
                            c_next[b * u + j] = cn;
                            h_next[b * u + j] = o_g * cn.tanh();
                        }
                    }
                    c.push(c_next);
                    h.push(h_next);
                }
                RecurrentKind::Gru => {
                    let mut rec = Vec::with_capacity(batch * gu);
                    for _ in 0..batch {
                        rec.extend_from_slice(&self.bias_hidden.value);
                    }
                    gemm(batch, u, gu, &h[t], false, &self.w_hidden.value, false, &mut rec, 1.0);
                    let mut h_next = vec![0.0f32; batch * u];
                    for b in 0..batch {
                        let p = &proj[(b * time + t) * gu..(b * time + t + 1) * gu];
                        let r = &rec[b * gu..(b + 1) * gu];
                        let zr = &mut z[b * gu..(b + 1) * gu];
                        for j in 0..u {
                            let zg = sigmoid(p[j] + r[j]);
                            let rg = sigmoid(p[u + j] + r[u + j]);
                            let hc = (p[2 * u + j] + rg * r[2 * u + j]).tanh();
                            zr[j] = zg;
                            zr[u + j] = rg;
                            zr[2 * u + j] = hc;
                            h_next[b * u + j] = zg * h[t][b * u + j] + (1.0 - zg) * hc;
                        }
                    }
                    hidden_cand.push(rec);
                    h.push(h_next);
                }
            }
            gates_all.push(z);
        }
        let last = h[time].clone();
        (
            last,
            RecurrentCache {
                proj,
                gates: gates_all,
                hidden_cand,
                h,
                c,
            },
        )
    }

    /// Backpropagation through time from the gradient of `h_T`; returns the
    /// gradient w.r.t. `x`.
    pub fn backward(
        &mut self,
        x: &[f32],
        cache: &RecurrentCache,
        grad_last: &[f32],
        batch: usize,
        time: usize,
    ) -> Vec<f32> {
        let u = self.units;
        let gu = self.kind.gates() * u;
        let mut dproj = vec![0.0f32; batch * time * gu];
        let mut dh = grad_last.to_vec();
        let mut dc = vec![0.0f32; batch * u];
        for t in (0..time).rev() {
            let g = &cache.gates[t];
            let mut dz = vec![0.0f32; batch * gu];
            let mut dh_prev = vec![0.0f32; batch * u];
            match self.kind {
                RecurrentKind::Lstm => {
                    let c_prev = &cache.c[t];
                    let c_cur = &cache.c[t + 1];
                    for b in 0..batch {
                        for j in 0..u {
                            let k = b * u + j;
                            let (i_g, f_g, g_g, o_g) =
                                (g[b * gu + j], g[b * gu + u + j], g[b * gu + 2 * u + j], g[b * gu + 3 * u + j]);
                            let tc = c_cur[k].tanh();
                            let d_o = dh[k] * tc;
                            let dcs = dc[k] + dh[k] * o_g * (1.0 - tc * tc);
                            let d_i = dcs * g_g;
                            let d_g = dcs * i_g;
                            let d_f = dcs * c_prev[k];
                            dc[k] = dcs * f_g;
                            let zr = &mut dz[b * gu..(b + 1) * gu];
                            zr[j] = d_i * i_g * (1.0 - i_g);
                            zr[u + j] = d_f * f_g * (1.0 - f_g);
                            zr[2 * u + j] = d_g * (1.0 - g_g * g_g);
                            zr[3 * u + j] = d_o * o_g * (1.0 - o_g);
                        }
                    }
                    for b in 0..batch {
                        dproj[(b * time + t) * gu..(b * time + t + 1) * gu]
                            .copy_from_slice(&dz[b * gu..(b + 1) * gu]);
                    }
                    gemm(u, batch, gu, &cache.h[t], true, &dz, false, &mut self.w_hidden.grad, 1.0);
                    gemm(batch, gu, u, &dz, false, &self.w_hidden.value, true, &mut dh_prev, 0.0);
                }
                RecurrentKind::Gru => {
                    let h_prev = &cache.h[t];
                    let rec = &cache.hidden_cand[t];
                    // Gradient w.r.t. the recurrent projection (incl. bias_hidden).
                    let mut drec = vec![0.0f32; batch * gu];
                    for b in 0..batch {
                        for j in 0..u {
                            let k = b * u + j;
                            let (zg, rg, hc) = (g[b * gu + j], g[b * gu + u + j], g[b * gu + 2 * u + j]);
                            let dhk = dh[k];
                            let d_z = dhk * (h_prev[k] - hc);
                            let d_hc = dhk * (1.0 - zg);
                            dh_prev[k] += dhk * zg;
                            let da_h = d_hc * (1.0 - hc * hc);
                            let d_r = da_h * rec[b * gu + 2 * u + j];
                            let da_z = d_z * zg * (1.0 - zg);
                            let da_r = d_r * rg * (1.0 - rg);
                            let p = (b * time + t) * gu;
                            dproj[p + j] = da_z;
                            dproj[p + u + j] = da_r;
                            dproj[p + 2 * u + j] = da_h;
                            drec[b * gu + j] = da_z;
                            drec[b * gu + u + j] = da_r;
                            drec[b * gu + 2 * u + j] = da_h * rg;
                        }
                    }
                    for row in drec.chunks(gu) {
                        for (bg, d) in self.bias_hidden.grad.iter_mut().zip(row) {
                            *bg += d;
                        }
                    }
                    gemm(u, batch, gu, h_prev, true, &drec, false, &mut self.w_hidden.grad, 1.0);
                    gemm(batch, gu, u, &drec, false, &self.w_hidden.value, true, &mut dh_prev, 1.0);
                }
            }
            dh = dh_prev;
        }
        for row in dproj.chunks(gu) {
            for (bg, d) in self.bias.grad.iter_mut().zip(row) {
                *bg += d;
            }
        }
        gemm(self.input, batch * time, gu, x, true, &dproj, false, &mut self.w_input.grad, 1.0);
        let mut dx = vec![0.0f32; batch * time * self.input];
        gemm(batch * time, gu, self.input, &dproj, false, &self.w_input.value, true, &mut dx, 0.0);
        let _ = &cache.proj;
        dx
    }
}

impl RecurrentKind {
    pub fn gates(self) -> usize {
        match self {
            RecurrentKind::Lstm => 4,
            RecurrentKind::Gru => 3,
        }
    }
}

/// Row-wise softmax of `[batch, classes]` logits.
pub fn softmax_rows(logits: &[f32], classes: usize) -> Vec<f32> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(classes) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}
