use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Vocab;
use crate::error::{Error, Result};
use crate::linalg::{gemm, Op};
use crate::util::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub max_positions: usize,
    /// Hidden width of the feed-forward block as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            max_positions: 128,
            ffn_mult: 4,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.max_positions < 2 || self.ffn_mult == 0 {
            return Err(Error::Config("model needs layers, width, heads, positions >= 2 and ffn_mult".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    fn ffn(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Offsets of every tensor in the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig, vocab: usize) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn();
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok = take(vocab * d);
        let pos = take(cfg.max_positions * d);
        let layers = (0..cfg.layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * f),
                b1: take(f),
                w2: take(f * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        Self {
            tok,
            pos,
            layers,
            lnf_g,
            lnf_b,
            total: at,
        }
    }
}

/// Pre-LN causal transformer with learned positions and a tied output
/// embedding. Attention projections carry no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel {
    cfg: ModelConfig,
    vocab: Vocab,
    layout: Layout,
    params: Vec<f64>,
}

pub type Grads = Vec<f64>;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise layer norm of `t x d`; returns output, normalised input and 1/std.
fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let t = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; t];
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = g[j] * h + b[j];
        }
    }
    (out, xhat, rstd)
}

/// Accumulates gain/bias gradients and returns d(input).
fn layer_norm_backward(dy: &[f64], xhat: &[f64], rstd: &[f64], g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let d = g.len();
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rstd.len() {
        let (dyr, xr) = (&dy[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * xr[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xr[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
        }
    }
    dx
}

/// Columns `h*hd .. (h+1)*hd` of a `t x d` buffer, as a contiguous `t x hd`.
fn head_cols(x: &[f64], t: usize, d: usize, h: usize, hd: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * hd);
    for r in 0..t {
        out.extend_from_slice(&x[r * d + h * hd..r * d + (h + 1) * hd]);
    }
    out
}

fn add_head_cols(dst: &mut [f64], src: &[f64], t: usize, d: usize, h: usize, hd: usize) {
    for r in 0..t {
        dst[r * d + h * hd..r * d + (h + 1) * hd]
            .iter_mut()
            .zip(&src[r * hd..(r + 1) * hd])
            .for_each(|(a, b)| *a += b);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[derive(Debug, Clone)]
struct LayerTrace {
    a: Vec<f64>,
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, `t x t` attention weights (zero above the diagonal).
    p: Vec<Vec<f64>>,
    o: Vec<f64>,
    b: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    pre: Vec<f64>,
    f: Vec<f64>,
}

/// Activations of a full forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    ids: Vec<u32>,
    start: usize,
    layers: Vec<LayerTrace>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    /// Final normalised hidden states, `t x d`.
    hf: Vec<f64>,
}

/// Keys and values of every processed position, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeCache {
    start: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecodeCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl SeqModel {
    pub fn new(cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg, vocab.size());
        let mut params = vec![0.0; layout.total];
        let mut rng = seeded_rng(seed);
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let d = cfg.d_model;
        let f = cfg.ffn();
        let mut fill = |off: usize, n: usize| {
            for p in &mut params[off..off + n] {
                *p = normal.sample(&mut rng);
            }
        };
        fill(layout.tok, vocab.size() * d);
        fill(layout.pos, cfg.max_positions * d);
        for l in &layout.layers {
            for off in [l.wq, l.wk, l.wv, l.wo] {
                fill(off, d * d);
            }
            fill(l.w1, d * f);
            fill(l.w2, f * d);
        }
        for l in &layout.layers {
            params[l.ln1_g..l.ln1_g + d].iter_mut().for_each(|x| *x = 1.0);
            params[l.ln2_g..l.ln2_g + d].iter_mut().for_each(|x| *x = 1.0);
        }
        params[layout.lnf_g..layout.lnf_g + d].iter_mut().for_each(|x| *x = 1.0);
        Ok(Self {
            cfg,
            vocab,
            layout,
            params,
        })
    }

    pub fn from_params(cfg: ModelConfig, vocab: Vocab, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg, vocab.size());
        if params.len() != layout.total {
            return Err(Error::Schema(format!(
                "model needs {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Schema("model parameters contain a non-finite value".into()));
        }
        Ok(Self {
            cfg,
            vocab,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grads(&self) -> Grads {
        vec![0.0; self.params.len()]
    }

    fn p(&self, off: usize, n: usize) -> &[f64] {
        &self.params[off..off + n]
    }

    fn check_ids(&self, ids: &[u32], start: usize) -> Result<()> {
        if ids.is_empty() || start + ids.len() > self.cfg.max_positions {
            return Err(Error::Domain(format!(
                "{} tokens from position {start} do not fit {} positions",
                ids.len(),
                self.cfg.max_positions
            )));
        }
        if let Some(&t) = ids.iter().find(|&&t| t as usize >= self.vocab.size()) {
            return Err(Error::Range(format!("token {t} is outside the vocabulary")));
        }
        Ok(())
    }

    /// Forward pass with `ids[t]` at position `start + t`.
    pub(crate) fn forward_trace(&self, ids: &[u32], start: usize) -> Result<Trace> {
        self.check_ids(ids, start)?;
        let d = self.cfg.d_model;
        let f = self.cfg.ffn();
        let nh = self.cfg.heads;
        let hd = d / nh;
        let t = ids.len();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = vec![0.0; t * d];
        for (r, &id) in ids.iter().enumerate() {
            let tok = self.p(self.layout.tok + id as usize * d, d);
            let pos = self.p(self.layout.pos + (start + r) * d, d);
            for j in 0..d {
                x[r * d + j] = tok[j] + pos[j];
            }
        }
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for lo in &self.layout.layers {
            let (a, ln1_xhat, ln1_rstd) = layer_norm(&x, d, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d));
            let mut q = vec![0.0; t * d];
            let mut k = vec![0.0; t * d];
            let mut v = vec![0.0; t * d];
            gemm(Op::N, Op::N, t, d, d, &a, self.p(lo.wq, d * d), 0.0, &mut q);
            gemm(Op::N, Op::N, t, d, d, &a, self.p(lo.wk, d * d), 0.0, &mut k);
            gemm(Op::N, Op::N, t, d, d, &a, self.p(lo.wv, d * d), 0.0, &mut v);
            let mut o = vec![0.0; t * d];
            let mut ps = Vec::with_capacity(nh);
            for h in 0..nh {
                let (qh, kh, vh) = (head_cols(&q, t, d, h, hd), head_cols(&k, t, d, h, hd), head_cols(&v, t, d, h, hd));
                let mut s = vec![0.0; t * t];
                gemm(Op::N, Op::T, t, hd, t, &qh, &kh, 0.0, &mut s);
                for r in 0..t {
                    let row = &mut s[r * t..(r + 1) * t];
                    let max = row[..=r].iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                    let mut sum = 0.0;
                    for (c, x) in row.iter_mut().enumerate() {
                        if c <= r {
                            *x = (*x * scale - max).exp();
                            sum += *x;
                        } else {
                            *x = 0.0;
                        }
                    }
                    row[..=r].iter_mut().for_each(|x| *x /= sum);
                }
                let mut oh = vec![0.0; t * hd];
                gemm(Op::N, Op::N, t, t, hd, &s, &vh, 0.0, &mut oh);
                add_head_cols(&mut o, &oh, t, d, h, hd);
                ps.push(s);
            }
            let mut attn = vec![0.0; t * d];
            gemm(Op::N, Op::N, t, d, d, &o, self.p(lo.wo, d * d), 0.0, &mut attn);
            add_into(&mut x, &attn);

            let (b, ln2_xhat, ln2_rstd) = layer_norm(&x, d, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d));
            let mut pre = vec![0.0; t * f];
            for r in 0..t {
                pre[r * f..(r + 1) * f].copy_from_slice(self.p(lo.b1, f));
            }
            gemm(Op::N, Op::N, t, d, f, &b, self.p(lo.w1, d * f), 1.0, &mut pre);
            let fa: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
            let mut ffn = vec![0.0; t * d];
            for r in 0..t {
                ffn[r * d..(r + 1) * d].copy_from_slice(self.p(lo.b2, d));
            }
            gemm(Op::N, Op::N, t, f, d, &fa, self.p(lo.w2, f * d), 1.0, &mut ffn);
            add_into(&mut x, &ffn);

            layers.push(LayerTrace {
                a,
                ln1_xhat,
                ln1_rstd,
                q,
                k,
                v,
                p: ps,
                o,
                b,
                ln2_xhat,
                ln2_rstd,
                pre,
                f: fa,
            });
        }
        let (hf, lnf_xhat, lnf_rstd) = layer_norm(&x, d, self.p(self.layout.lnf_g, d), self.p(self.layout.lnf_b, d));
        Ok(Trace {
            ids: ids.to_vec(),
            start,
            layers,
            lnf_xhat,
            lnf_rstd,
            hf,
        })
    }

    /// Logits for the given rows of `hf` (`rows.len() x V`).
    fn project(&self, hf: &[f64], rows: &[usize]) -> Vec<f64> {
        let d = self.cfg.d_model;
        let v = self.vocab.size();
        let mut h = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            h.extend_from_slice(&hf[r * d..(r + 1) * d]);
        }
        let mut out = vec![0.0; rows.len() * v];
        gemm(Op::N, Op::T, rows.len(), d, v, &h, self.p(self.layout.tok, v * d), 0.0, &mut out);
        out
    }

    /// Uncached logits at every position, `t x V`, with `ids[0]` at position
    /// `start`.
    pub fn logits_all(&self, ids: &[u32], start: usize) -> Result<Vec<f64>> {
        let trace = self.forward_trace(ids, start)?;
        let rows: Vec<usize> = (0..ids.len()).collect();
        Ok(self.project(&trace.hf, &rows))
    }

    /// Sum over `positions` of `-log softmax(logits_t)[ids[t + 1]]`. With
    /// `grads`, also accumulates `scale` times its gradient.
    pub(crate) fn nll_positions(
        &self,
        ids: &[u32],
        start: usize,
        positions: &[usize],
        grads: Option<(&mut [f64], f64)>,
    ) -> Result<f64> {
        let trace = self.forward_trace(ids, start)?;
        let v = self.vocab.size();
        let logits = self.project(&trace.hf, positions);
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; logits.len()];
        for (i, &t) in positions.iter().enumerate() {
            let row = &logits[i * v..(i + 1) * v];
            let target = ids[t + 1] as usize;
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[target];
            for (j, dl) in dlogits[i * v..(i + 1) * v].iter_mut().enumerate() {
                *dl = (row[j] - lse).exp();
            }
            dlogits[i * v + target] -= 1.0;
        }
        if let Some((g, scale)) = grads {
            dlogits.iter_mut().for_each(|x| *x *= scale);
            self.backward(&trace, positions, &dlogits, g);
        }
        Ok(loss)
    }

    fn backward(&self, tr: &Trace, positions: &[usize], dlogits: &[f64], g: &mut [f64]) {
        let d = self.cfg.d_model;
        let f = self.cfg.ffn();
        let nh = self.cfg.heads;
        let hd = d / nh;
        let v = self.vocab.size();
        let t = tr.ids.len();
        let p = positions.len();
        let scale = 1.0 / (hd as f64).sqrt();
        let lay = &self.layout;

        // tied projection: logits = H E^T
        let mut h = Vec::with_capacity(p * d);
        for &r in positions {
            h.extend_from_slice(&tr.hf[r * d..(r + 1) * d]);
        }
        gemm(Op::T, Op::N, v, p, d, dlogits, &h, 1.0, &mut g[lay.tok..lay.tok + v * d]);
        let mut dh = vec![0.0; p * d];
        gemm(Op::N, Op::N, p, v, d, dlogits, self.p(lay.tok, v * d), 0.0, &mut dh);
        let mut dhf = vec![0.0; t * d];
        for (i, &r) in positions.iter().enumerate() {
            add_into(&mut dhf[r * d..(r + 1) * d], &dh[i * d..(i + 1) * d]);
        }
        let (dg, db) = split_pair(g, lay.lnf_g, lay.lnf_b, d);
        let mut dx = layer_norm_backward(&dhf, &tr.lnf_xhat, &tr.lnf_rstd, self.p(lay.lnf_g, d), dg, db);

        for (lo, lt) in lay.layers.iter().zip(&tr.layers).rev() {
            // feed-forward block
            let mut dfa = vec![0.0; t * f];
            gemm(Op::T, Op::N, f, t, d, &lt.f, &dx, 1.0, &mut g[lo.w2..lo.w2 + f * d]);
            for r in 0..t {
                add_into(&mut g[lo.b2..lo.b2 + d], &dx[r * d..(r + 1) * d]);
            }
            gemm(Op::N, Op::T, t, d, f, &dx, self.p(lo.w2, f * d), 0.0, &mut dfa);
            for (df, &z) in dfa.iter_mut().zip(&lt.pre) {
                *df *= gelu_grad(z);
            }
            gemm(Op::T, Op::N, d, t, f, &lt.b, &dfa, 1.0, &mut g[lo.w1..lo.w1 + d * f]);
            for r in 0..t {
                add_into(&mut g[lo.b1..lo.b1 + f], &dfa[r * f..(r + 1) * f]);
            }
            let mut dbn = vec![0.0; t * d];
            gemm(Op::N, Op::T, t, f, d, &dfa, self.p(lo.w1, d * f), 0.0, &mut dbn);
            let (dg, db) = split_pair(g, lo.ln2_g, lo.ln2_b, d);
            let dmid = layer_norm_backward(&dbn, &lt.ln2_xhat, &lt.ln2_rstd, self.p(lo.ln2_g, d), dg, db);
            add_into(&mut dx, &dmid);

            // attention block
            gemm(Op::T, Op::N, d, t, d, &lt.o, &dx, 1.0, &mut g[lo.wo..lo.wo + d * d]);
            let mut dout = vec![0.0; t * d];
            gemm(Op::N, Op::T, t, d, d, &dx, self.p(lo.wo, d * d), 0.0, &mut dout);
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            for head in 0..nh {
                let doh = head_cols(&dout, t, d, head, hd);
                let (qh, kh, vh) = (
                    head_cols(&lt.q, t, d, head, hd),
                    head_cols(&lt.k, t, d, head, hd),
                    head_cols(&lt.v, t, d, head, hd),
                );
                let pm = &lt.p[head];
                let mut dp = vec![0.0; t * t];
                gemm(Op::N, Op::T, t, hd, t, &doh, &vh, 0.0, &mut dp);
                let mut dvh = vec![0.0; t * hd];
                gemm(Op::T, Op::N, t, t, hd, pm, &doh, 0.0, &mut dvh);
                let mut ds = vec![0.0; t * t];
                for r in 0..t {
                    let dot: f64 = (0..=r).map(|c| dp[r * t + c] * pm[r * t + c]).sum();
                    for c in 0..=r {
                        ds[r * t + c] = pm[r * t + c] * (dp[r * t + c] - dot) * scale;
                    }
                }
                let mut dqh = vec![0.0; t * hd];
                gemm(Op::N, Op::N, t, t, hd, &ds, &kh, 0.0, &mut dqh);
                let mut dkh = vec![0.0; t * hd];
                gemm(Op::T, Op::N, t, t, hd, &ds, &qh, 0.0, &mut dkh);
                add_head_cols(&mut dq, &dqh, t, d, head, hd);
                add_head_cols(&mut dk, &dkh, t, d, head, hd);
                add_head_cols(&mut dv, &dvh, t, d, head, hd);
            }
            let mut da = vec![0.0; t * d];
            for (off, dproj) in [(lo.wq, &dq), (lo.wk, &dk), (lo.wv, &dv)] {
                gemm(Op::T, Op::N, d, t, d, &lt.a, dproj, 1.0, &mut g[off..off + d * d]);
                gemm(Op::N, Op::T, t, d, d, dproj, self.p(off, d * d), 1.0, &mut da);
            }
            let (dg, db) = split_pair(g, lo.ln1_g, lo.ln1_b, d);
            let din = layer_norm_backward(&da, &lt.ln1_xhat, &lt.ln1_rstd, self.p(lo.ln1_g, d), dg, db);
            add_into(&mut dx, &din);
        }

        for (r, &id) in tr.ids.iter().enumerate() {
            let row = &dx[r * d..(r + 1) * d];
            let off = lay.tok + id as usize * d;
            add_into(&mut g[off..off + d], row);
            let off = lay.pos + (tr.start + r) * d;
            add_into(&mut g[off..off + d], row);
        }
    }

    /// Run a prefix in one pass and keep its keys/values. Returns the cache and
    /// the logits at the last position.
    pub fn prefill(&self, ids: &[u32], start: usize) -> Result<(DecodeCache, Vec<f64>)> {
        let tr = self.forward_trace(ids, start)?;
        let cache = DecodeCache {
            start,
            keys: tr.layers.iter().map(|l| l.k.clone()).collect(),
            values: tr.layers.iter().map(|l| l.v.clone()).collect(),
            len: ids.len(),
        };
        let logits = self.project(&tr.hf, &[ids.len() - 1]);
        Ok((cache, logits))
    }

    pub fn empty_cache(&self, start: usize) -> DecodeCache {
        DecodeCache {
            start,
            keys: vec![Vec::new(); self.cfg.layers],
            values: vec![Vec::new(); self.cfg.layers],
            len: 0,
        }
    }

    /// Append one token to the cache and return the logits at its position.
    pub fn decode_step_cached(&self, cache: &mut DecodeCache, token: u32) -> Result<Vec<f64>> {
        let d = self.cfg.d_model;
        let f = self.cfg.ffn();
        let nh = self.cfg.heads;
        let hd = d / nh;
        let pos = cache.start + cache.len;
        if pos >= self.cfg.max_positions {
            return Err(Error::Domain(format!("cache is full at {pos} positions")));
        }
        if token as usize >= self.vocab.size() {
            return Err(Error::Range(format!("token {token} is outside the vocabulary")));
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x: Vec<f64> = self
            .p(self.layout.tok + token as usize * d, d)
            .iter()
            .zip(self.p(self.layout.pos + pos * d, d))
            .map(|(a, b)| a + b)
            .collect();
        let n = cache.len + 1;
        for (l, lo) in self.layout.layers.iter().enumerate() {
            let (a, _, _) = layer_norm(&x, d, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d));
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            gemm(Op::N, Op::N, 1, d, d, &a, self.p(lo.wq, d * d), 0.0, &mut q);
            gemm(Op::N, Op::N, 1, d, d, &a, self.p(lo.wk, d * d), 0.0, &mut k);
            gemm(Op::N, Op::N, 1, d, d, &a, self.p(lo.wv, d * d), 0.0, &mut v);
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            let mut o = vec![0.0; d];
            let mut s = vec![0.0; n];
            for h in 0..nh {
                let qh = &q[h * hd..(h + 1) * hd];
                for (c, sc) in s.iter_mut().enumerate() {
                    *sc = scale * qh.iter().zip(&keys[c * d + h * hd..c * d + (h + 1) * hd]).map(|(a, b)| a * b).sum::<f64>();
                }
                let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                s.iter_mut().for_each(|x| {
                    *x = (*x - max).exp();
                    sum += *x;
                });
                for (c, &w) in s.iter().enumerate() {
                    let w = w / sum;
                    for (oj, vj) in o[h * hd..(h + 1) * hd].iter_mut().zip(&values[c * d + h * hd..c * d + (h + 1) * hd]) {
                        *oj += w * vj;
                    }
                }
            }
            gemm(Op::N, Op::N, 1, d, d, &o, self.p(lo.wo, d * d), 1.0, &mut x);
            let (b, _, _) = layer_norm(&x, d, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d));
            let mut pre = self.p(lo.b1, f).to_vec();
            gemm(Op::N, Op::N, 1, d, f, &b, self.p(lo.w1, d * f), 1.0, &mut pre);
            pre.iter_mut().for_each(|z| *z = gelu(*z));
            add_into(&mut x, self.p(lo.b2, d));
            gemm(Op::N, Op::N, 1, f, d, &pre, self.p(lo.w2, f * d), 1.0, &mut x);
        }
        cache.len = n;
        let (hf, _, _) = layer_norm(&x, d, self.p(self.layout.lnf_g, d), self.p(self.layout.lnf_b, d));
        Ok(self.project(&hf, &[0]))
    }
}

/// Two disjoint `d`-length gradient slices at `a` and `b` (`a < b`).
fn split_pair(g: &mut [f64], a: usize, b: usize, d: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + d <= b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a..a + d], &mut hi[..d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use rand::Rng;

    fn tiny(seed: u64) -> SeqModel {
        let cfg = ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            max_positions: 16,
            ffn_mult: 2,
            init_std: 0.5,
        };
        SeqModel::new(cfg, Vocab::new(2, 3).unwrap(), seed).unwrap()
    }

    fn random_ids(n: usize, v: usize, seed: u64) -> Vec<u32> {
        let mut rng = seeded_rng(seed);
        (0..n).map(|_| rng.random_range(0..v as u32)).collect()
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let mut rng = seeded_rng(1);
        let d = 5;
        let x: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
        let b = vec![0.1; d];
        let w: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |x: &[f64]| layer_norm(x, d, &g, &b).0.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let (_, xhat, rstd) = layer_norm(&x, d, &g, &b);
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        let dx = layer_norm_backward(&w, &xhat, &rstd, &g, &mut dg, &mut db);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let num = (f(&xp) - f(&xm)) / 2e-6;
            assert!((num - dx[i]).abs() < 1e-7, "{i}: {num} vs {}", dx[i]);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn causal_perturbation_leaves_earlier_logits() {
        let m = tiny(3);
        let v = m.vocab().size();
        let ids = random_ids(9, v, 4);
        let base = m.logits_all(&ids, 0).unwrap();
        for t in 1..ids.len() {
            let mut changed = ids.clone();
            changed[t] = (changed[t] + 1) % v as u32;
            let other = m.logits_all(&changed, 0).unwrap();
            assert_eq!(&base[..t * v], &other[..t * v], "position {t}");
            assert_ne!(&base[t * v..(t + 1) * v], &other[t * v..(t + 1) * v]);
        }
    }

    #[test]
    fn cached_decoding_matches_full_recompute() {
        let m = tiny(5);
        let v = m.vocab().size();
        let ids = random_ids(10, v, 6);
        // offset start exercises the shifted position lookup
        let full = m.logits_all(&ids, 3).unwrap();
        let mut cache = m.empty_cache(3);
        for (t, &id) in ids.iter().enumerate() {
            let step = m.decode_step_cached(&mut cache, id).unwrap();
            let gap = step.iter().zip(&full[t * v..(t + 1) * v]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(gap < 1e-12, "step {t}: {gap}");
        }
        let (mut pc, last) = m.prefill(&ids[..4], 3).unwrap();
        assert_eq!(pc.len(), 4);
        assert!(last.iter().zip(&full[3 * v..4 * v]).all(|(a, b)| (a - b).abs() < 1e-12));
        let next = m.decode_step_cached(&mut pc, ids[4]).unwrap();
        assert!(next.iter().zip(&full[4 * v..5 * v]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        let m = tiny(1);
        assert!(m.logits_all(&[], 0).is_err());
        assert!(m.logits_all(&[99], 0).is_err());
        assert!(m.logits_all(&[0; 17], 0).is_err());
        assert!(m.logits_all(&[0; 16], 1).is_err());
        let mut c = m.empty_cache(4);
        for _ in 0..12 {
            m.decode_step_cached(&mut c, 1).unwrap();
        }
        assert!(m.decode_step_cached(&mut c, 1).is_err());
    }

    #[test]
    fn indivisible_heads_are_a_config_error() {
        let cfg = ModelConfig {
            d_model: 10,
            heads: 4,
            ..Default::default()
        };
        assert!(matches!(SeqModel::new(cfg, Vocab::new(1, 2).unwrap(), 0), Err(Error::Config(_))));
    }
}
