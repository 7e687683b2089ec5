use super::params::{NetworkParams, ParamGrads};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Add(Var, Var),
    AddChannel { x: Var, v: Var },
    AddScalar(Var),
    Scale(Var, f64),
    Silu(Var),
    Softplus(Var),
    Concat(Var, Var),
    Upsample2(Var),
    Linear { x: Var, w: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation over one network's parameters so that
/// gradients can be pulled back to those parameters.
pub struct Tape<'p> {
    params: &'p NetworkParams,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p NetworkParams) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(64),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn params(&self) -> &'p NetworkParams {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| shape_err(format!("network has no parameter named {name}")))?;
        let t = &self.params.tensors()[idx];
        let value = Tensor::new(t.shape.clone(), t.values.clone())?;
        Ok(self.push(value, Op::Param(idx)))
    }

    /// 3x3 (or any odd square kernel) convolution with zero padding `k/2`.
    pub fn conv2d(&mut self, x: Var, layer: &str, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{layer}.weight"))?;
        let b = self.param(&format!("{layer}.bias"))?;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.shape.len() != 4 || xv.shape.len() != 3 || wv.shape[1] != xv.shape[0] {
            return Err(shape_err(format!(
                "{layer}: weight {:?} incompatible with input {:?}",
                wv.shape, xv.shape
            )));
        }
        let out = conv_forward(xv, wv, bv, stride);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride }))
    }

    pub fn linear(&mut self, x: Var, layer: &str) -> Result<Var> {
        let w = self.param(&format!("{layer}.weight"))?;
        let b = self.param(&format!("{layer}.bias"))?;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (d_out, d_in) = (wv.shape[0], wv.shape[1]);
        if xv.len() != d_in {
            return Err(shape_err(format!("{layer}: input length {} != {d_in}", xv.len())));
        }
        let data = (0..d_out)
            .map(|o| {
                let row = &wv.data[o * d_in..(o + 1) * d_in];
                bv.data[o] + row.iter().zip(&xv.data).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok(self.push(Tensor { shape: vec![d_out], data }, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(shape_err(format!("add: {:?} vs {:?}", av.shape, bv.shape)));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let shape = av.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    /// Broadcast a per-channel vector over a `[C, H, W]` map.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        let (c, h, w) = xv.dims3();
        if vv.len() != c {
            return Err(shape_err(format!("add_channel: {} channels vs vector {}", c, vv.len())));
        }
        let mut out = xv.clone();
        for (ch, plane) in out.data.chunks_mut(h * w).enumerate() {
            let s = vv.data[ch];
            plane.iter_mut().for_each(|p| *p += s);
        }
        Ok(self.push(out, Op::AddChannel { x, v }))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = Tensor {
            shape: self.value(x).shape.clone(),
            data: self.value(x).data.iter().map(|v| v + s).collect(),
        };
        self.push(out, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = Tensor {
            shape: self.value(x).shape.clone(),
            data: self.value(x).data.iter().map(|v| v * s).collect(),
        };
        self.push(out, Op::Scale(x, s))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| v * sigmoid(v)).collect(),
        };
        self.push(out, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| softplus(v)).collect(),
        };
        self.push(out, Op::Softplus(x))
    }

    /// Channel concatenation of two maps with equal spatial size.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ca, h, w) = av.dims3();
        let (cb, hb, wb) = bv.dims3();
        if (h, w) != (hb, wb) {
            return Err(shape_err(format!("concat: {:?} vs {:?}", av.shape, bv.shape)));
        }
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(&av.data);
        data.extend_from_slice(&bv.data);
        Ok(self.push(Tensor { shape: vec![ca + cb, h, w], data }, Op::Concat(a, b)))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3();
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                let src = &xv.data[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                let dst = &mut data[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
                for (x2, d) in dst.iter_mut().enumerate() {
                    *d = src[x2 / 2];
                }
            }
        }
        self.push(Tensor { shape: vec![c, h2, w2], data }, Op::Upsample2(x))
    }

    /// Reverse sweep from the given output seeds; returns gradients for every
    /// parameter of the network (zero where a parameter was not used).
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> ParamGrads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, v, g);
        }
        let mut out = ParamGrads::zeros_like(self.params);
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(p) => {
                    for (a, b) in out.values[*p].iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                Op::Conv2d { x, w, b, stride } => {
                    let (gx, gw, gb) = conv_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &g,
                        *stride,
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddChannel { x, v } => {
                    let (c, h, w) = g.dims3();
                    let gv = (0..c)
                        .map(|ch| g.data[ch * h * w..(ch + 1) * h * w].iter().sum())
                        .collect();
                    accumulate(&mut grads, *v, Tensor { shape: vec![c], data: gv });
                    accumulate(&mut grads, *x, g);
                }
                Op::AddScalar(x) => accumulate(&mut grads, *x, g),
                Op::Scale(x, s) => {
                    let data = g.data.iter().map(|v| v * s).collect();
                    accumulate(&mut grads, *x, Tensor { shape: g.shape, data });
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(&gi, &v)| {
                            let s = sigmoid(v);
                            gi * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, Tensor { shape: g.shape, data });
                }
                Op::Softplus(x) => {
                    let xv = &self.nodes[x.0].value;
                    let data = g.data.iter().zip(&xv.data).map(|(&gi, &v)| gi * sigmoid(v)).collect();
                    accumulate(&mut grads, *x, Tensor { shape: g.shape, data });
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[a.0].value.len();
                    let ga = Tensor {
                        shape: self.nodes[a.0].value.shape.clone(),
                        data: g.data[..na].to_vec(),
                    };
                    let gb = Tensor {
                        shape: self.nodes[b.0].value.shape.clone(),
                        data: g.data[na..].to_vec(),
                    };
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Upsample2(x) => {
                    let (c, h, w) = self.nodes[x.0].value.dims3();
                    let w2 = 2 * w;
                    let mut data = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y2 in 0..2 * h {
                            let src = &g.data[(ch * 2 * h + y2) * w2..(ch * 2 * h + y2 + 1) * w2];
                            let dst = &mut data[(ch * h + y2 / 2) * w..(ch * h + y2 / 2 + 1) * w];
                            for (x2, s) in src.iter().enumerate() {
                                dst[x2 / 2] += s;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor { shape: vec![c, h, w], data });
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let (d_out, d_in) = (wv.shape[0], wv.shape[1]);
                    let mut gx = vec![0.0; d_in];
                    let mut gw = vec![0.0; d_out * d_in];
                    for o in 0..d_out {
                        let go = g.data[o];
                        for i in 0..d_in {
                            gx[i] += go * wv.data[o * d_in + i];
                            gw[o * d_in + i] = go * xv.data[i];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor { shape: vec![d_in], data: gx });
                    accumulate(&mut grads, *w, Tensor { shape: wv.shape.clone(), data: gw });
                    accumulate(&mut grads, *b, g);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Range of output columns `ox` whose source column `ox*stride + k - pad`
/// lies inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (ci, h, wd) = x.dims3();
    let (co, k) = (w.shape[0], w.shape[2]);
    let pad = k / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        let out_plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        out_plane.iter_mut().for_each(|v| *v = b.data[o]);
        for i in 0..ci {
            let in_plane = &x.data[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(ho, h, ky, pad, stride);
                for kx in 0..k {
                    let wv = w.data[((o * ci + i) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = valid_range(wo, wd, kx, pad, stride);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let in_row = &in_plane[iy * wd..(iy + 1) * wd];
                        let out_row = &mut out_plane[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let src = &in_row[ox_lo + kx - pad..ox_hi + kx - pad];
                            for (d, s) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * in_row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![co, ho, wo],
        data: out,
    }
}

fn conv_backward(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize) -> (Tensor, Tensor, Tensor) {
    let (ci, h, wd) = x.dims3();
    let (co, ho, wo) = g.dims3();
    let k = w.shape[2];
    let pad = k / 2;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; co];
    for o in 0..co {
        let g_plane = &g.data[o * ho * wo..(o + 1) * ho * wo];
        gb[o] = g_plane.iter().sum();
        for i in 0..ci {
            let in_plane = &x.data[i * h * wd..(i + 1) * h * wd];
            let gx_plane = &mut gx[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(ho, h, ky, pad, stride);
                for kx in 0..k {
                    let widx = ((o * ci + i) * k + ky) * k + kx;
                    let wv = w.data[widx];
                    let (ox_lo, ox_hi) = valid_range(wo, wd, kx, pad, stride);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let g_row = &g_plane[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let lo = ox_lo + kx - pad;
                            let hi = ox_hi + kx - pad;
                            let in_row = &in_plane[iy * wd + lo..iy * wd + hi];
                            let gs = &g_row[ox_lo..ox_hi];
                            acc += gs.iter().zip(in_row).map(|(a, b)| a * b).sum::<f64>();
                            let gx_row = &mut gx_plane[iy * wd + lo..iy * wd + hi];
                            for (d, s) in gx_row.iter_mut().zip(gs) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                acc += g_row[ox] * in_plane[iy * wd + ix];
                                gx_plane[iy * wd + ix] += wv * g_row[ox];
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (
        Tensor { shape: x.shape.clone(), data: gx },
        Tensor { shape: w.shape.clone(), data: gw },
        Tensor { shape: vec![co], data: gb },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamInit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct definition of a zero-padded convolution, used as oracle.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
        let (ci, h, wd) = x.dims3();
        let (co, k) = (w.shape[0], w.shape[2]);
        let pad = (k / 2) as isize;
        let ho = (h + 2 * (k / 2) - k) / stride + 1;
        let wo = (wd + 2 * (k / 2) - k) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.data[o];
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride) as isize + ky as isize - pad;
                                let ix = (ox * stride) as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w.data[((o * ci + i) * k + ky) * k + kx]
                                    * x.data[(i * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = s;
                }
            }
        }
        Tensor { shape: vec![co, ho, wo], data: out }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(ci, co, h, w, stride) in &[(2, 3, 7, 5, 1), (3, 2, 8, 8, 2), (1, 4, 9, 6, 2)] {
            let x = random_tensor(&mut rng, &[ci, h, w]);
            let wt = random_tensor(&mut rng, &[co, ci, 3, 3]);
            let b = random_tensor(&mut rng, &[co]);
            let fast = conv_forward(&x, &wt, &b, stride);
            let slow = conv_naive(&x, &wt, &b, stride);
            assert_eq!(fast.shape, slow.shape);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Finite differences through every op on a small composite graph.
    #[test]
    fn tape_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut init = ParamInit { rng: &mut rng, params: NetworkParams::new() };
        init.conv("a", 2, 3, 3).unwrap();
        init.conv("down", 3, 3, 3).unwrap();
        init.conv("b", 6, 1, 3).unwrap();
        init.linear("t", 4, 3).unwrap();
        let params = init.params;
        let x = random_tensor(&mut rng, &[2, 6, 6]);
        let temb = random_tensor(&mut rng, &[4]);
        let probe = random_tensor(&mut rng, &[1, 6, 6]);

        let run = |p: &NetworkParams| -> (f64, ParamGrads) {
            let mut tape = Tape::new(p);
            let xi = tape.input(x.clone());
            let ti = tape.input(temb.clone());
            let h = tape.conv2d(xi, "a", 1).unwrap();
            let tv = tape.linear(ti, "t").unwrap();
            let h = tape.add_channel(h, tv).unwrap();
            let h = tape.silu(h);
            let d = tape.conv2d(h, "down", 2).unwrap();
            let d = tape.softplus(d);
            let u = tape.upsample2(d);
            let u = tape.add(u, h).unwrap();
            let c = tape.concat(u, h).unwrap();
            let out = tape.conv2d(c, "b", 1).unwrap();
            let out = tape.add_scalar(out, 0.3);
            let val = tape.value(out);
            let loss: f64 = val.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum();
            let grads = tape.backward(vec![(out, probe.clone())]);
            (loss, grads)
        };

        let (_, grads) = run(&params);
        let eps = 1e-6;
        for (ti, t) in params.tensors().iter().enumerate() {
            for j in (0..t.values.len()).step_by(5) {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].values[j] += eps;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].values[j] -= eps;
                let fd = (run(&plus).0 - run(&minus).0) / (2.0 * eps);
                let an = grads.values[ti][j];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "{}[{j}]: fd={fd} analytic={an}",
                    t.name
                );
            }
        }
    }
}
