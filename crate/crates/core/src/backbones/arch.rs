//! Graph-level forward passes and parameter layouts of the encoder towers.

use std::rc::Rc;

use rand::Rng;

use super::{Arch, OutputMode};
use crate::nn::{same_padding, Bound, Graph, Tensor, Var};

pub(crate) const STEM_KERNEL: usize = 7;
pub(crate) const STEM_STRIDE: usize = 2;
pub(crate) const RESNET_KERNELS: [usize; 3] = [8, 5, 3];
pub(crate) const LN_EPS: f64 = 1e-5;

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Fan-in scaled uniform.
    Uniform { fan_in: usize },
    /// Orthogonal `[rows, cols]`.
    Orthogonal,
    Zeros,
    Ones,
    /// `N(0, std²)`.
    Normal(f64),
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Shape-level description of one tower.
#[derive(Clone, Debug)]
pub(crate) struct Tower {
    pub prefix: String,
    pub arch: Arch,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
}

/// Per-call forward options.
pub(crate) struct Ctx<'r, R: Rng + ?Sized> {
    /// Dropout is active only when a generator is supplied.
    pub rng: Option<&'r mut R>,
    pub dropout: f64,
}

impl<R: Rng + ?Sized> Ctx<'_, R> {
    fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        let p = self.dropout;
        let Some(rng) = self.rng.as_deref_mut() else { return x };
        if p <= 0.0 {
            return x;
        }
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let data = (0..n).map(|_| if rng.random_bool(1.0 - p) { keep } else { 0.0 }).collect();
        let m = g.constant(Tensor::new(&shape, data));
        g.mul(x, m)
    }
}

/// Fixed sinusoidal position table: `(t, 2i) = sin(t / 10000^(2i/d))`,
/// `(t, 2i+1) = cos(...)`. `width` must be even.
pub fn sinusoidal_table(steps: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; steps * width];
    for t in 0..steps {
        for i in 0..width / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / width as f64);
            let angle = t as f64 / freq;
            data[t * width + 2 * i] = angle.sin();
            data[t * width + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[steps, width], data)
}

impl Tower {
    fn p(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    fn gates(&self) -> usize {
        match self.arch {
            Arch::Lstm => 4,
            Arch::Gru => 3,
            _ => 0,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let w = self.width;
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
        let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init), name: String| {
            push(format!("{name}.g"), vec![w], Init::Ones);
            push(format!("{name}.b"), vec![w], Init::Zeros);
        };
        push(self.p("stem.w"), vec![STEM_KERNEL, 1, w], Init::Uniform { fan_in: STEM_KERNEL });
        push(self.p("stem.b"), vec![w], Init::Zeros);
        norm(&mut push, self.p("stem.ln"));
        match self.arch {
            Arch::Lstm | Arch::Gru => {
                let h = w / 2;
                let gw = self.gates() * h;
                for l in 0..self.layers {
                    for dir in ["fwd", "bwd"] {
                        let base = self.p(&format!("rnn{l}.{dir}"));
                        push(format!("{base}.wx"), vec![w, gw], Init::Uniform { fan_in: w });
                        push(format!("{base}.wh"), vec![h, gw], Init::Orthogonal);
                        push(format!("{base}.bx"), vec![gw], Init::Zeros);
                        if self.arch == Arch::Gru {
                            push(format!("{base}.bh"), vec![gw], Init::Zeros);
                        }
                    }
                }
            }
            Arch::ResNet => {
                for l in 0..self.layers {
                    for (j, k) in RESNET_KERNELS.iter().enumerate() {
                        let base = self.p(&format!("block{l}.conv{j}"));
                        push(format!("{base}.w"), vec![*k, w, w], Init::Uniform { fan_in: k * w });
                        push(format!("{base}.b"), vec![w], Init::Zeros);
                        norm(&mut push, self.p(&format!("block{l}.ln{j}")));
                    }
                    norm(&mut push, self.p(&format!("block{l}.shortcut")));
                }
            }
            Arch::Transformer => {
                push(self.p("start"), vec![w], Init::Normal(0.02));
                let f = self.ff_mult * w;
                for l in 0..self.layers {
                    let base = self.p(&format!("layer{l}"));
                    norm(&mut push, format!("{base}.ln1"));
                    for m in ["q", "k", "v", "o"] {
                        push(format!("{base}.attn.{m}.w"), vec![w, w], Init::Orthogonal);
                        push(format!("{base}.attn.{m}.b"), vec![w], Init::Zeros);
                    }
                    norm(&mut push, format!("{base}.ln2"));
                    push(format!("{base}.ff1.w"), vec![w, f], Init::Uniform { fan_in: w });
                    push(format!("{base}.ff1.b"), vec![f], Init::Zeros);
                    push(format!("{base}.ff2.w"), vec![f, w], Init::Uniform { fan_in: f });
                    push(format!("{base}.ff2.b"), vec![w], Init::Zeros);
                }
                norm(&mut push, self.p("final_ln"));
            }
        }
        push(self.p("head.w"), vec![w, w], Init::Uniform { fan_in: w });
        push(self.p("head.b"), vec![w], Init::Zeros);
        push(self.p("proj1.w"), vec![w, w], Init::Uniform { fan_in: w });
        push(self.p("proj1.b"), vec![w], Init::Zeros);
        push(self.p("proj2.w"), vec![w, w], Init::Uniform { fan_in: w });
        push(self.p("proj2.b"), vec![w], Init::Zeros);
        specs
    }

    pub fn num_params(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    fn linear(&self, g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
        let y = g.matmul(x, p.get(&self.p(&format!("{name}.w"))));
        g.add_bias(y, p.get(&self.p(&format!("{name}.b"))))
    }

    fn norm(&self, g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
        let y = g.layer_norm(x, LN_EPS);
        let y = g.mul_bias(y, p.get(&self.p(&format!("{name}.g"))));
        g.add_bias(y, p.get(&self.p(&format!("{name}.b"))))
    }

    fn conv(&self, g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize) -> Var {
        let y = g.conv1d(x, p.get(&self.p(&format!("{name}.w"))), stride);
        g.add_bias(y, p.get(&self.p(&format!("{name}.b"))))
    }

    /// Stem convolution, normalization and rectifier: `[B, L]` → `[B, ceil(L/2), w]`.
    fn stem(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let (b, l) = (g.shape(x)[0], g.shape(x)[1]);
        let x = g.reshape(x, &[b, l, 1]);
        let y = self.conv(g, p, "stem", x, STEM_STRIDE);
        let y = self.norm(g, p, "stem.ln", y);
        g.relu(y)
    }

    /// Backbone output before the final linear layer: `[B, w]` pooled or
    /// `[B, T, w]` per step. `valid` gives per-row valid input lengths for
    /// the attention padding mask.
    pub fn backbone<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mode: OutputMode,
        valid: Option<&[usize]>,
        ctx: &mut Ctx<'_, R>,
    ) -> Var {
        let h = self.stem(g, p, x);
        match self.arch {
            Arch::Lstm | Arch::Gru => {
                let mut y = h;
                for l in 0..self.layers {
                    y = self.birnn(g, p, l, y);
                }
                match mode {
                    OutputMode::PerStep => y,
                    OutputMode::Pooled => {
                        let t = g.shape(y)[1];
                        g.select(y, 1, t - 1)
                    }
                }
            }
            Arch::ResNet => {
                let mut y = h;
                for l in 0..self.layers {
                    y = self.res_block(g, p, l, y);
                }
                match mode {
                    OutputMode::PerStep => y,
                    OutputMode::Pooled => g.mean_axis(y, 1),
                }
            }
            Arch::Transformer => {
                let y = self.transformer(g, p, h, valid, ctx);
                let steps = g.shape(y)[1];
                match mode {
                    OutputMode::PerStep => g.narrow(y, 1, 1, steps - 1),
                    OutputMode::Pooled => g.select(y, 1, 0),
                }
            }
        }
    }

    /// Backbone followed by the width→width linear layer.
    pub fn features<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mode: OutputMode,
        valid: Option<&[usize]>,
        ctx: &mut Ctx<'_, R>,
    ) -> Var {
        let h = self.backbone(g, p, x, mode, valid, ctx);
        self.linear(g, p, "head", h)
    }

    /// Projector: linear, rectifier, linear. Applies per step on `[B, T, w]`.
    pub fn project(&self, g: &mut Graph, p: &Bound, h: Var) -> Var {
        let y = self.linear(g, p, "proj1", h);
        let y = g.relu(y);
        self.linear(g, p, "proj2", y)
    }

    fn birnn(&self, g: &mut Graph, p: &Bound, layer: usize, x: Var) -> Var {
        let fwd = self.rnn_direction(g, p, &format!("rnn{layer}.fwd"), x, false);
        let bwd = self.rnn_direction(g, p, &format!("rnn{layer}.bwd"), x, true);
        g.concat(&[fwd, bwd], 2)
    }

    fn rnn_direction(&self, g: &mut Graph, p: &Bound, name: &str, x: Var, reverse: bool) -> Var {
        let (b, t) = (g.shape(x)[0], g.shape(x)[1]);
        let h_dim = self.width / 2;
        let wx = p.get(&self.p(&format!("{name}.wx")));
        let wh = p.get(&self.p(&format!("{name}.wh")));
        let bx = p.get(&self.p(&format!("{name}.bx")));
        let xw = g.matmul(x, wx);
        let xw = g.add_bias(xw, bx);
        let mut h = g.constant(Tensor::zeros(&[b, h_dim]));
        let mut c = g.constant(Tensor::zeros(&[b, h_dim]));
        let mut outs: Vec<Option<Var>> = vec![None; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let xt = g.select(xw, 1, step);
            let hw = g.matmul(h, wh);
            match self.arch {
                Arch::Lstm => {
                    let gates = g.add(xt, hw);
                    let i = g.narrow(gates, 1, 0, h_dim);
                    let i = g.sigmoid(i);
                    let f = g.narrow(gates, 1, h_dim, h_dim);
                    let f = g.sigmoid(f);
                    let cand = g.narrow(gates, 1, 2 * h_dim, h_dim);
                    let cand = g.tanh(cand);
                    let o = g.narrow(gates, 1, 3 * h_dim, h_dim);
                    let o = g.sigmoid(o);
                    let keep = g.mul(f, c);
                    let write = g.mul(i, cand);
                    c = g.add(keep, write);
                    let tc = g.tanh(c);
                    h = g.mul(o, tc);
                }
                _ => {
                    let bh = p.get(&self.p(&format!("{name}.bh")));
                    let hw = g.add_bias(hw, bh);
                    let xr = g.narrow(xt, 1, 0, h_dim);
                    let hr = g.narrow(hw, 1, 0, h_dim);
                    let r = g.add(xr, hr);
                    let r = g.sigmoid(r);
                    let xz = g.narrow(xt, 1, h_dim, h_dim);
                    let hz = g.narrow(hw, 1, h_dim, h_dim);
                    let z = g.add(xz, hz);
                    let z = g.sigmoid(z);
                    let xn = g.narrow(xt, 1, 2 * h_dim, h_dim);
                    let hn = g.narrow(hw, 1, 2 * h_dim, h_dim);
                    let rh = g.mul(r, hn);
                    let n = g.add(xn, rh);
                    let n = g.tanh(n);
                    // h' = (1 - z) * n + z * h = n + z * (h - n)
                    let d = g.sub(h, n);
                    let zd = g.mul(z, d);
                    h = g.add(n, zd);
                }
            }
            outs[step] = Some(g.reshape(h, &[b, 1, h_dim]));
        }
        let outs: Vec<Var> = outs.into_iter().map(Option::unwrap).collect();
        g.concat(&outs, 1)
    }

    fn res_block(&self, g: &mut Graph, p: &Bound, l: usize, x: Var) -> Var {
        let mut y = x;
        for j in 0..RESNET_KERNELS.len() {
            y = self.conv(g, p, &format!("block{l}.conv{j}"), y, 1);
            y = self.norm(g, p, &format!("block{l}.ln{j}"), y);
            if j + 1 < RESNET_KERNELS.len() {
                y = g.relu(y);
            }
        }
        let s = self.norm(g, p, &format!("block{l}.shortcut"), x);
        let sum = g.add(y, s);
        g.relu(sum)
    }

    fn transformer<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        h: Var,
        valid: Option<&[usize]>,
        ctx: &mut Ctx<'_, R>,
    ) -> Var {
        let (b, t, w) = (g.shape(h)[0], g.shape(h)[1], self.width);
        let s = t + 1;
        let start = p.get(&self.p("start"));
        let start = g.reshape(start, &[1, 1, w]);
        let start = g.expand(start, 0, b);
        let x = g.concat(&[start, h], 1);
        let pos = g.constant(sinusoidal_table(s, w));
        let mut x = g.add_bias(x, pos);
        let mask = valid.map(|lens| self.key_mask(lens, b, s));
        for l in 0..self.layers {
            let base = format!("layer{l}");
            let y = self.norm(g, p, &format!("{base}.ln1"), x);
            let y = self.attention(g, p, &base, y, mask.clone());
            let y = ctx.dropout(g, y);
            x = g.add(x, y);
            let y = self.norm(g, p, &format!("{base}.ln2"), x);
            let y = self.linear(g, p, &format!("{base}.ff1"), y);
            let y = g.relu(y);
            let y = self.linear(g, p, &format!("{base}.ff2"), y);
            let y = ctx.dropout(g, y);
            x = g.add(x, y);
        }
        self.norm(g, p, "final_ln", x)
    }

    /// Additive mask `[B*H, S, S]`: `-inf` on keys past each row's valid
    /// stem steps (the start token is always valid).
    fn key_mask(&self, lens: &[usize], b: usize, s: usize) -> Rc<Tensor> {
        let hds = self.heads;
        let mut data = vec![0.0; b * hds * s * s];
        for (bi, &len) in lens.iter().enumerate() {
            let (steps, _) = same_padding(len, STEM_KERNEL, STEM_STRIDE);
            let valid = steps + 1;
            for hi in 0..hds {
                for q in 0..s {
                    let row = ((bi * hds + hi) * s + q) * s;
                    for k in valid..s {
                        data[row + k] = f64::NEG_INFINITY;
                    }
                }
            }
        }
        Rc::new(Tensor::new(&[b * hds, s, s], data))
    }

    fn attention(&self, g: &mut Graph, p: &Bound, base: &str, x: Var, mask: Option<Rc<Tensor>>) -> Var {
        let (b, s, w) = (g.shape(x)[0], g.shape(x)[1], self.width);
        let hds = self.heads;
        let dh = w / hds;
        let split = |g: &mut Graph, m: &str| {
            let y = self.linear(g, p, &format!("{base}.attn.{m}"), x);
            let y = g.reshape(y, &[b, s, hds, dh]);
            let y = g.permute(y, &[0, 2, 1, 3]);
            g.reshape(y, &[b * hds, s, dh])
        };
        let q = split(g, "q");
        let k = split(g, "k");
        let v = split(g, "v");
        let scores = g.bmm(q, k, true);
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            let m = g.constant((*m).clone());
            scores = g.add(scores, m);
        }
        let probs = g.softmax(scores);
        let out = g.bmm(probs, v, false);
        let out = g.reshape(out, &[b, hds, s, dh]);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[b, s, w]);
        self.linear(g, p, &format!("{base}.attn.o"), out)
    }
}
