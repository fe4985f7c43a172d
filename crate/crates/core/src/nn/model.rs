//! Forward pass, teacher-forced scoring and exact backpropagation.

use super::config::PosEncoding;
use super::kernels::{
    axpy, dot, gelu, gelu_grad, layernorm_bwd, layernorm_fwd, linear_bwd, linear_fwd, log_softmax,
};
use super::params::{BlockOffsets, ModelState};
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Log-probabilities over the vocabulary for one position (natural log).
pub type LogProbRow = Vec<f64>;

struct Rope<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    half: usize,
}

impl<T: Scalar> Rope<T> {
    fn new(len: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        Rope { cos, sin, half }
    }

    /// Rotates every head of rows `rows` in place; `inverse` applies the transpose.
    fn apply(&self, x: &mut [T], d: usize, head_dim: usize, rows: std::ops::Range<usize>, inverse: bool) {
        for t in rows {
            let c = &self.cos[t * self.half..(t + 1) * self.half];
            let s = &self.sin[t * self.half..(t + 1) * self.half];
            let row = &mut x[t * d..(t + 1) * d];
            for head in row.chunks_exact_mut(head_dim) {
                for i in 0..self.half {
                    let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                    let sn = if inverse { -s[i] } else { s[i] };
                    head[2 * i] = x0 * c[i] - x1 * sn;
                    head[2 * i + 1] = x0 * sn + x1 * c[i];
                }
            }
        }
    }
}

struct LayerTrace<T> {
    ln1_xhat: Vec<T>,
    ln1_rstd: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    att: Vec<T>,
    o: Vec<T>,
    ln2_xhat: Vec<T>,
    ln2_rstd: Vec<T>,
    m: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

/// Activations retained for the backward pass.
///
/// Rows before `first_row` are only computed as far as the last block's keys
/// and values; their outputs are never read.
pub(crate) struct Trace<T> {
    tokens: Vec<u32>,
    first_row: usize,
    layers: Vec<LayerTrace<T>>,
    lnf_xhat: Vec<T>,
    lnf_rstd: Vec<T>,
    z: Vec<T>,
    rope: Option<Rope<T>>,
}

impl<T: Scalar> Trace<T> {
    fn len(&self) -> usize {
        self.tokens.len()
    }
}

fn split2<T>(buf: &mut [T], first: usize, second_len: usize, at: usize) -> (&mut [T], &mut [T]) {
    buf[first..at + second_len].split_at_mut(at - first)
}

impl<T: Scalar> ModelState<T> {
    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Shape("forward pass needs at least one token".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                limit: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn p(&self, off: usize, len: usize) -> &[T] {
        &self.params[off..off + len]
    }

    /// Runs the network over `tokens`; outputs are valid for rows `>= first_row`.
    pub(crate) fn forward_trace(&self, tokens: &[u32], first_row: usize) -> Trace<T> {
        let cfg = &self.config;
        let lay = self.layout();
        let (len, d) = (tokens.len(), cfg.d_model);
        let hd = cfg.head_dim();
        let first_row = first_row.min(len - 1);

        let mut h = vec![T::zero(); len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut h[t * d..(t + 1) * d];
            row.copy_from_slice(self.p(lay.tok_emb + tok as usize * d, d));
            if let Some(pe) = lay.pos_emb {
                axpy(T::one(), self.p(pe + t * d, d), row);
            }
        }
        let rope = match cfg.pos_encoding {
            PosEncoding::Rotary => Some(Rope::new(len, hd, cfg.rope_base)),
            PosEncoding::LearnedAbsolute => None,
        };

        let n_layers = lay.blocks.len();
        let mut layers = Vec::with_capacity(n_layers);
        for (l, b) in lay.blocks.iter().enumerate() {
            let r0 = if l + 1 == n_layers { first_row } else { 0 };
            let tr = self.block_fwd(b, &mut h, len, r0, rope.as_ref());
            layers.push(tr);
        }

        let mut lnf_xhat = vec![T::zero(); len * d];
        let mut lnf_rstd = vec![T::zero(); len];
        let mut z = vec![T::zero(); len * d];
        let r0 = first_row;
        layernorm_fwd(
            &h[r0 * d..],
            d,
            self.p(lay.lnf_w, d),
            self.p(lay.lnf_b, d),
            &mut lnf_xhat[r0 * d..],
            &mut lnf_rstd[r0..],
            &mut z[r0 * d..],
        );
        Trace {
            tokens: tokens.to_vec(),
            first_row,
            layers,
            lnf_xhat,
            lnf_rstd,
            z,
            rope,
        }
    }

    fn block_fwd(
        &self,
        b: &BlockOffsets,
        h: &mut [T],
        len: usize,
        r0: usize,
        rope: Option<&Rope<T>>,
    ) -> LayerTrace<T> {
        let cfg = &self.config;
        let (d, f, nh) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let hd = cfg.head_dim();
        let zeros = |n: usize| vec![T::zero(); n];

        let mut tr = LayerTrace {
            ln1_xhat: zeros(len * d),
            ln1_rstd: zeros(len),
            a: zeros(len * d),
            q: zeros(len * d),
            k: zeros(len * d),
            v: zeros(len * d),
            att: zeros(nh * len * len),
            o: zeros(len * d),
            ln2_xhat: zeros(len * d),
            ln2_rstd: zeros(len),
            m: zeros(len * d),
            u: zeros(len * f),
            g: zeros(len * f),
        };

        layernorm_fwd(
            h,
            d,
            self.p(b.ln1_w, d),
            self.p(b.ln1_b, d),
            &mut tr.ln1_xhat,
            &mut tr.ln1_rstd,
            &mut tr.a,
        );
        linear_fwd(&tr.a[r0 * d..], d, self.p(b.wq, d * d), self.p(b.bq, d), d, &mut tr.q[r0 * d..]);
        linear_fwd(&tr.a, d, self.p(b.wk, d * d), self.p(b.bk, d), d, &mut tr.k);
        linear_fwd(&tr.a, d, self.p(b.wv, d * d), self.p(b.bv, d), d, &mut tr.v);
        if let Some(rope) = rope {
            rope.apply(&mut tr.q, d, hd, r0..len, false);
            rope.apply(&mut tr.k, d, hd, 0..len, false);
        }

        let scale = T::one() / T::of(hd as f64).sqrt();
        for head in 0..nh {
            let c0 = head * hd;
            for t in r0..len {
                let qt = &tr.q[t * d + c0..t * d + c0 + hd];
                let row = &mut tr.att[(head * len + t) * len..(head * len + t) * len + t + 1];
                let mut max = T::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qt, &tr.k[j * d + c0..j * d + c0 + hd]) * scale;
                    max = max.max(*s);
                }
                let mut sum = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let inv = T::one() / sum;
                let ot = &mut tr.o[t * d + c0..t * d + c0 + hd];
                for (j, s) in row.iter_mut().enumerate() {
                    *s *= inv;
                    axpy(*s, &tr.v[j * d + c0..j * d + c0 + hd], ot);
                }
            }
        }

        let mut proj = zeros(len * d);
        linear_fwd(&tr.o[r0 * d..], d, self.p(b.wo, d * d), self.p(b.bo, d), d, &mut proj[r0 * d..]);
        for (x, p) in h[r0 * d..].iter_mut().zip(&proj[r0 * d..]) {
            *x += *p;
        }

        layernorm_fwd(
            &h[r0 * d..],
            d,
            self.p(b.ln2_w, d),
            self.p(b.ln2_b, d),
            &mut tr.ln2_xhat[r0 * d..],
            &mut tr.ln2_rstd[r0..],
            &mut tr.m[r0 * d..],
        );
        linear_fwd(&tr.m[r0 * d..], d, self.p(b.w1, d * f), self.p(b.b1, f), f, &mut tr.u[r0 * f..]);
        for (g, &u) in tr.g[r0 * f..].iter_mut().zip(&tr.u[r0 * f..]) {
            *g = gelu(u);
        }
        linear_fwd(&tr.g[r0 * f..], f, self.p(b.w2, f * d), self.p(b.b2, d), d, &mut proj[r0 * d..]);
        for (x, p) in h[r0 * d..].iter_mut().zip(&proj[r0 * d..]) {
            *x += *p;
        }
        tr
    }

    fn head_logits(&self, z_row: &[T]) -> Vec<T> {
        let lay = self.layout();
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let mut out = vec![T::zero(); v];
        linear_fwd(z_row, d, self.p(lay.head_w, d * v), self.p(lay.head_b, v), v, &mut out);
        out
    }

    fn row_logprobs(&self, tr: &Trace<T>, row: usize) -> Vec<T> {
        debug_assert!(row >= tr.first_row);
        let d = self.config.d_model;
        log_softmax(&self.head_logits(&tr.z[row * d..(row + 1) * d]))
    }

    /// One row per input position: row `t` is the distribution of token `t+1`
    /// given tokens `0..=t`.
    pub fn forward_logprobs(&self, tokens: &[u32]) -> Result<Vec<LogProbRow>> {
        self.check_tokens(tokens)?;
        let tr = self.forward_trace(tokens, 0);
        Ok((0..tokens.len())
            .map(|r| self.row_logprobs(&tr, r).into_iter().map(T::f64).collect())
            .collect())
    }

    /// Distribution of the token following `prefix`.
    pub fn next_token_logprobs(&self, prefix: &[u32]) -> Result<LogProbRow> {
        self.check_tokens(prefix)?;
        let tr = self.forward_trace(prefix, prefix.len() - 1);
        Ok(self
            .row_logprobs(&tr, prefix.len() - 1)
            .into_iter()
            .map(T::f64)
            .collect())
    }

    fn scored_sequence(&self, context: &[u32], response: &[u32]) -> Result<Vec<u32>> {
        if context.is_empty() {
            return Err(Error::Shape("context must contain at least one token".into()));
        }
        if response.is_empty() {
            return Err(Error::Shape("response must be non-empty".into()));
        }
        let total = context.len() + response.len();
        if total > self.config.max_seq_len {
            return Err(Error::Length {
                len: total,
                limit: self.config.max_seq_len,
            });
        }
        let mut seq = Vec::with_capacity(total - 1);
        seq.extend_from_slice(context);
        seq.extend_from_slice(&response[..response.len() - 1]);
        self.check_tokens(&seq)?;
        if let Some(&bad) = response.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Shape(format!("response token {bad} out of range")));
        }
        Ok(seq)
    }

    /// Teacher-forced log π(response[t] | context, response[..t]) for every t.
    pub fn score_response(&self, context: &[u32], response: &[u32]) -> Result<Vec<f64>> {
        let seq = self.scored_sequence(context, response)?;
        let base = context.len() - 1;
        let tr = self.forward_trace(&seq, base);
        Ok(response
            .iter()
            .enumerate()
            .map(|(t, &y)| self.row_logprobs(&tr, base + t)[y as usize].f64())
            .collect())
    }

    /// Loss `-Σ_t w_t · log π(response[t] | context, response[..t])` and its
    /// exact gradient. Weights are constants.
    pub fn weighted_nll_grad(&self, context: &[u32], response: &[u32], weights: &[f64]) -> Result<(f64, Vec<T>)> {
        if weights.len() != response.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} response tokens",
                weights.len(),
                response.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss weight {w}")));
        }
        let mut grad = vec![T::zero(); self.num_params()];
        if response.is_empty() {
            return Ok((0.0, grad));
        }
        let seq = self.scored_sequence(context, response)?;
        if weights.iter().all(|&w| w == 0.0) {
            return Ok((0.0, grad));
        }
        let lay = self.layout().clone();
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let base = context.len() - 1;
        let tr = self.forward_trace(&seq, base);

        let mut loss = 0.0;
        let mut dz = vec![T::zero(); seq.len() * d];
        let (dw_head, db_head) = split2(&mut grad, lay.head_w, v, lay.head_b);
        let w_head = self.p(lay.head_w, d * v);
        for (t, (&y, &w)) in response.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let r = base + t;
            let lp = self.row_logprobs(&tr, r);
            loss -= w * lp[y as usize].f64();
            let wt = T::of(w);
            let mut dlogits: Vec<T> = lp.iter().map(|&l| wt * l.exp()).collect();
            dlogits[y as usize] -= wt;
            linear_bwd(
                &tr.z[r * d..(r + 1) * d],
                d,
                w_head,
                v,
                &dlogits,
                dw_head,
                db_head,
                Some(&mut dz[r * d..(r + 1) * d]),
            );
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        self.backward(&tr, &dz, &mut grad);
        Ok((loss, grad))
    }

    fn backward(&self, tr: &Trace<T>, dz: &[T], grad: &mut [T]) {
        let cfg = &self.config;
        let lay = self.layout();
        let (len, d, f, nh) = (tr.len(), cfg.d_model, cfg.d_ff, cfg.n_heads);
        let hd = cfg.head_dim();
        let zeros = |n: usize| vec![T::zero(); n];

        let mut dh = zeros(len * d);
        {
            let (dg, db) = split2(grad, lay.lnf_w, d, lay.lnf_b);
            layernorm_bwd(dz, d, self.p(lay.lnf_w, d), &tr.lnf_xhat, &tr.lnf_rstd, dg, db, &mut dh);
        }

        for (b, lt) in lay.blocks.iter().zip(&tr.layers).rev() {
            // MLP branch
            let mut dgelu = zeros(len * f);
            {
                let (dw, db) = split2(grad, b.w2, d, b.b2);
                linear_bwd(&lt.g, f, self.p(b.w2, f * d), d, &dh, dw, db, Some(&mut dgelu));
            }
            for (dg, &u) in dgelu.iter_mut().zip(&lt.u) {
                *dg *= gelu_grad(u);
            }
            let mut dm = zeros(len * d);
            {
                let (dw, db) = split2(grad, b.w1, f, b.b1);
                linear_bwd(&lt.m, d, self.p(b.w1, d * f), f, &dgelu, dw, db, Some(&mut dm));
            }
            {
                let (dg, db) = split2(grad, b.ln2_w, d, b.ln2_b);
                layernorm_bwd(&dm, d, self.p(b.ln2_w, d), &lt.ln2_xhat, &lt.ln2_rstd, dg, db, &mut dh);
            }

            // attention branch
            let mut d_o = zeros(len * d);
            {
                let (dw, db) = split2(grad, b.wo, d, b.bo);
                linear_bwd(&lt.o, d, self.p(b.wo, d * d), d, &dh, dw, db, Some(&mut d_o));
            }
            let mut dq = zeros(len * d);
            let mut dk = zeros(len * d);
            let mut dv = zeros(len * d);
            let scale = T::one() / T::of(hd as f64).sqrt();
            let mut dp = zeros(len);
            for head in 0..nh {
                let c0 = head * hd;
                for t in 0..len {
                    let dot_t = &d_o[t * d + c0..t * d + c0 + hd];
                    if dot_t.iter().all(|x| x.is_zero()) {
                        continue;
                    }
                    let row = &lt.att[(head * len + t) * len..(head * len + t) * len + t + 1];
                    let mut sum = T::zero();
                    for (j, &p) in row.iter().enumerate() {
                        let vj = &lt.v[j * d + c0..j * d + c0 + hd];
                        dp[j] = dot(dot_t, vj);
                        sum += p * dp[j];
                        axpy(p, dot_t, &mut dv[j * d + c0..j * d + c0 + hd]);
                    }
                    let qt = &lt.q[t * d + c0..t * d + c0 + hd];
                    for (j, &p) in row.iter().enumerate() {
                        let ds = p * (dp[j] - sum) * scale;
                        axpy(ds, &lt.k[j * d + c0..j * d + c0 + hd], &mut dq[t * d + c0..t * d + c0 + hd]);
                        axpy(ds, qt, &mut dk[j * d + c0..j * d + c0 + hd]);
                    }
                }
            }
            if let Some(rope) = tr.rope.as_ref() {
                rope.apply(&mut dq, d, hd, 0..len, true);
                rope.apply(&mut dk, d, hd, 0..len, true);
            }
            let mut da = zeros(len * d);
            for (dy, w_off, b_off) in [(&dq, b.wq, b.bq), (&dk, b.wk, b.bk), (&dv, b.wv, b.bv)] {
                let (dw, db) = split2(grad, w_off, d, b_off);
                linear_bwd(&lt.a, d, self.p(w_off, d * d), d, dy, dw, db, Some(&mut da));
            }
            {
                let (dg, db) = split2(grad, b.ln1_w, d, b.ln1_b);
                layernorm_bwd(&da, d, self.p(b.ln1_w, d), &lt.ln1_xhat, &lt.ln1_rstd, dg, db, &mut dh);
            }
        }

        for (t, &tok) in tr.tokens.iter().enumerate() {
            let src = &dh[t * d..(t + 1) * d];
            axpy(T::one(), src, &mut grad[lay.tok_emb + tok as usize * d..][..d]);
            if let Some(pe) = lay.pos_emb {
                axpy(T::one(), src, &mut grad[pe + t * d..][..d]);
            }
        }
    }
}
