//! A tiny pre-norm decoder-only transformer with hand-written
//! backpropagation, small enough to gradient-check parameter by parameter.
//!
//! Everything runs in f64 with a fixed evaluation order, so a seed fully
//! determines any run that uses the model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Feed-forward width as a multiple of the model width.
const FF_MULT: usize = 4;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub context: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.context == 0 || self.layers == 0 {
            return Err(Error::InvalidParameter(
                "vocab_size, context and layers must be positive".into(),
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        FF_MULT * self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// All parameters of one model. Also reused as the container for parameter
/// gradients and optimizer moments, which share the same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    pub config: LmConfig,
    pub(crate) tok_embed: Vec<f64>,
    pub(crate) pos_embed: Vec<f64>,
    pub(crate) layers: Vec<LayerParams>,
    pub(crate) lnf_g: Vec<f64>,
    pub(crate) lnf_b: Vec<f64>,
    pub(crate) w_out: Vec<f64>,
}

impl TinyLm {
    /// All-zero parameter arrays; used for gradients and optimizer state.
    pub fn zeros(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let (v, n, d, f) = (config.vocab_size, config.context, config.d_model, config.d_ff());
        let layer = || LayerParams {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            wq: vec![0.0; d * d],
            bq: vec![0.0; d],
            wk: vec![0.0; d * d],
            bk: vec![0.0; d],
            wv: vec![0.0; d * d],
            bv: vec![0.0; d],
            wo: vec![0.0; d * d],
            bo: vec![0.0; d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w1: vec![0.0; d * f],
            b1: vec![0.0; f],
            w2: vec![0.0; f * d],
            b2: vec![0.0; d],
        };
        Ok(Self {
            config,
            tok_embed: vec![0.0; v * d],
            pos_embed: vec![0.0; n * d],
            layers: (0..config.layers).map(|_| layer()).collect(),
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
            w_out: vec![0.0; d * v],
        })
    }

    /// Gaussian-initialized weights, zero biases, unit layer-norm gains, and
    /// a zero output projection, so a fresh model scores every token
    /// uniformly.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        let mut lm = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut fill = |buf: &mut Vec<f64>| {
            for x in buf.iter_mut() {
                *x = normal.sample(&mut rng);
            }
        };
        fill(&mut lm.tok_embed);
        fill(&mut lm.pos_embed);
        for layer in &mut lm.layers {
            fill(&mut layer.wq);
            fill(&mut layer.wk);
            fill(&mut layer.wv);
            fill(&mut layer.wo);
            fill(&mut layer.w1);
            fill(&mut layer.w2);
            layer.ln1_g.fill(1.0);
            layer.ln2_g.fill(1.0);
        }
        lm.lnf_g.fill(1.0);
        // w_out stays zero: logits are identically zero before training.
        Ok(lm)
    }

    /// Named parameter arrays with shapes, in canonical order.
    pub fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        let (v, n, d, f) = (c.vocab_size, c.context, c.d_model, c.d_ff());
        let mut out = vec![
            ("tok_embed".to_string(), vec![v, d]),
            ("pos_embed".to_string(), vec![n, d]),
        ];
        for i in 0..c.layers {
            let pre = format!("layer{i}.");
            out.push((format!("{pre}ln1_g"), vec![d]));
            out.push((format!("{pre}ln1_b"), vec![d]));
            out.push((format!("{pre}wq"), vec![d, d]));
            out.push((format!("{pre}bq"), vec![d]));
            out.push((format!("{pre}wk"), vec![d, d]));
            out.push((format!("{pre}bk"), vec![d]));
            out.push((format!("{pre}wv"), vec![d, d]));
            out.push((format!("{pre}bv"), vec![d]));
            out.push((format!("{pre}wo"), vec![d, d]));
            out.push((format!("{pre}bo"), vec![d]));
            out.push((format!("{pre}ln2_g"), vec![d]));
            out.push((format!("{pre}ln2_b"), vec![d]));
            out.push((format!("{pre}w1"), vec![d, f]));
            out.push((format!("{pre}b1"), vec![f]));
            out.push((format!("{pre}w2"), vec![f, d]));
            out.push((format!("{pre}b2"), vec![d]));
        }
        out.push(("lnf_g".to_string(), vec![d]));
        out.push(("lnf_b".to_string(), vec![d]));
        out.push(("w_out".to_string(), vec![d, v]));
        out
    }

    /// Parameter arrays in the same order as [`Self::named_shapes`].
    pub fn arrays(&self) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> = vec![&self.tok_embed, &self.pos_embed];
        for l in &self.layers {
            out.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2,
            ]);
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.w_out]);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = vec![&mut self.tok_embed, &mut self.pos_embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_out]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if tokens.len() > self.config.context {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds context {}",
                tokens.len(),
                self.config.context
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Next-token logits at every input position. Row `t` is the
    /// distribution over the token following `tokens[t]`, conditioned only
    /// on `tokens[..=t]`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let (logits, _) = self.forward_cached(tokens)?;
        Ok(logits)
    }

    pub(crate) fn forward_cached(
        &self,
        tokens: &[usize],
    ) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let (t_len, d, f, v) = (tokens.len(), c.d_model, c.d_ff(), c.vocab_size);
        let heads = c.heads;
        let d_head = c.d_head();
        let scale = 1.0 / (d_head as f64).sqrt();

        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let dst = &mut x[t * d..(t + 1) * d];
            let te = &self.tok_embed[tok * d..(tok + 1) * d];
            let pe = &self.pos_embed[t * d..(t + 1) * d];
            for i in 0..d {
                dst[i] = te[i] + pe[i];
            }
        }

        let mut cache = ForwardCache {
            layers: Vec::with_capacity(c.layers),
            lnf: LnCache::empty(),
            lnf_out: Vec::new(),
        };

        for layer in &self.layers {
            let (ln1_out, ln1) = layer_norm(&x, &layer.ln1_g, &layer.ln1_b, t_len, d);

            let mut q = layer.bq.repeat(t_len);
            let mut k = layer.bk.repeat(t_len);
            let mut vv = layer.bv.repeat(t_len);
            matmul_acc(&ln1_out, &layer.wq, &mut q, t_len, d, d);
            matmul_acc(&ln1_out, &layer.wk, &mut k, t_len, d, d);
            matmul_acc(&ln1_out, &layer.wv, &mut vv, t_len, d, d);

            // Causal attention, one head at a time.
            let mut probs = vec![0.0; heads * t_len * t_len];
            let mut ctx = vec![0.0; t_len * d];
            for h in 0..heads {
                let off = h * d_head;
                for t in 0..t_len {
                    let qt = &q[t * d + off..t * d + off + d_head];
                    let row = &mut probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                    let mut max = f64::NEG_INFINITY;
                    for u in 0..=t {
                        let ku = &k[u * d + off..u * d + off + d_head];
                        row[u] = dot(qt, ku) * scale;
                        max = max.max(row[u]);
                    }
                    let mut sum = 0.0;
                    for u in 0..=t {
                        row[u] = (row[u] - max).exp();
                        sum += row[u];
                    }
                    let ctx_t = &mut ctx[t * d + off..t * d + off + d_head];
                    for u in 0..=t {
                        row[u] /= sum;
                        let vu = &vv[u * d + off..u * d + off + d_head];
                        for (c, &vi) in ctx_t.iter_mut().zip(vu) {
                            *c += row[u] * vi;
                        }
                    }
                }
            }

            let mut attn_out = layer.bo.repeat(t_len);
            matmul_acc(&ctx, &layer.wo, &mut attn_out, t_len, d, d);
            let mut res1 = x.clone();
            for i in 0..t_len * d {
                res1[i] += attn_out[i];
            }

            let (ln2_out, ln2) = layer_norm(&res1, &layer.ln2_g, &layer.ln2_b, t_len, d);
            let mut ffn_pre = layer.b1.repeat(t_len);
            matmul_acc(&ln2_out, &layer.w1, &mut ffn_pre, t_len, d, f);
            let ffn_act: Vec<f64> = ffn_pre.iter().map(|&z| gelu(z)).collect();
            let mut ffn_out = layer.b2.repeat(t_len);
            matmul_acc(&ffn_act, &layer.w2, &mut ffn_out, t_len, f, d);

            let mut res2 = res1.clone();
            for i in 0..t_len * d {
                res2[i] += ffn_out[i];
            }

            cache.layers.push(LayerCache {
                ln1,
                ln1_out,
                q,
                k,
                v: vv,
                probs,
                ctx,
                ln2,
                ln2_out,
                ffn_pre,
                ffn_act,
            });
            x = res2;
        }

        let (lnf_out, lnf) = layer_norm(&x, &self.lnf_g, &self.lnf_b, t_len, d);
        let mut logits = vec![vec![0.0; v]; t_len];
        for t in 0..t_len {
            let xt = &lnf_out[t * d..(t + 1) * d];
            let row = &mut logits[t];
            for (i, &xi) in xt.iter().enumerate() {
                let wr = &self.w_out[i * v..(i + 1) * v];
                for (o, &wv) in row.iter_mut().zip(wr) {
                    *o += xi * wv;
                }
            }
        }
        cache.lnf = lnf;
        cache.lnf_out = lnf_out;
        Ok((logits, cache))
    }

    /// Exact gradients of `Σ_t ⟨dlogits[t], logits[t]⟩` with respect to every
    /// parameter array. `dlogits` must have one row of vocabulary length per
    /// input position; rows of zeros contribute nothing.
    pub fn backward(&self, tokens: &[usize], dlogits: &[Vec<f64>]) -> Result<TinyLm> {
        let mut grads = TinyLm::zeros(self.config)?;
        let (_, cache) = self.forward_cached(tokens)?;
        self.backward_cached_into(tokens, &cache, dlogits, &mut grads)?;
        Ok(grads)
    }

    /// As [`Self::backward`], but reusing a forward cache and accumulating
    /// into an existing gradient buffer.
    pub(crate) fn backward_cached_into(
        &self,
        tokens: &[usize],
        cache: &ForwardCache,
        dlogits: &[Vec<f64>],
        grads: &mut TinyLm,
    ) -> Result<()> {
        let c = &self.config;
        let (t_len, d, f, v) = (tokens.len(), c.d_model, c.d_ff(), c.vocab_size);
        if dlogits.len() != t_len || dlogits.iter().any(|r| r.len() != v) {
            return Err(Error::InvalidInput(format!(
                "gradient rows must be {t_len} x {v}"
            )));
        }
        let heads = c.heads;
        let d_head = c.d_head();
        let scale = 1.0 / (d_head as f64).sqrt();

        // Output projection.
        let mut d_lnf_out = vec![0.0; t_len * d];
        for t in 0..t_len {
            let dl = &dlogits[t];
            let xt = &cache.lnf_out[t * d..(t + 1) * d];
            let dxt = &mut d_lnf_out[t * d..(t + 1) * d];
            for i in 0..d {
                let gw = &mut grads.w_out[i * v..(i + 1) * v];
                let xi = xt[i];
                for (g, &dv) in gw.iter_mut().zip(dl) {
                    *g += xi * dv;
                }
                dxt[i] = dot(dl, &self.w_out[i * v..(i + 1) * v]);
            }
        }

        let mut dx = layer_norm_backward(
            &d_lnf_out,
            &cache.lnf,
            &self.lnf_g,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
            t_len,
            d,
        );

        for (li, layer) in self.layers.iter().enumerate().rev() {
            let lc = &cache.layers[li];
            let gl = &mut grads.layers[li];

            // res2 = res1 + ffn(ln2(res1)); dx currently holds d(res2).
            let d_ffn_out = dx.clone();
            // FFN backward.
            let mut d_act = vec![0.0; t_len * f];
            matmul_b_transposed(&d_ffn_out, &layer.w2, &mut d_act, t_len, d, f);
            matmul_at_b(&lc.ffn_act, &d_ffn_out, &mut gl.w2, t_len, f, d);
            col_sums(&d_ffn_out, &mut gl.b2, t_len, d);
            let mut d_pre = vec![0.0; t_len * f];
            for i in 0..t_len * f {
                d_pre[i] = d_act[i] * gelu_grad(lc.ffn_pre[i]);
            }
            let mut d_ln2_out = vec![0.0; t_len * d];
            matmul_b_transposed(&d_pre, &layer.w1, &mut d_ln2_out, t_len, f, d);
            matmul_at_b(&lc.ln2_out, &d_pre, &mut gl.w1, t_len, d, f);
            col_sums(&d_pre, &mut gl.b1, t_len, f);

            let d_res1_from_ln2 = layer_norm_backward(
                &d_ln2_out,
                &lc.ln2,
                &layer.ln2_g,
                &mut gl.ln2_g,
                &mut gl.ln2_b,
                t_len,
                d,
            );
            // d(res1) = d(res2) + ln2 path.
            let mut d_res1 = dx;
            for i in 0..t_len * d {
                d_res1[i] += d_res1_from_ln2[i];
            }

            // res1 = x_in + attn_out.
            let d_attn_out = &d_res1;
            let mut d_ctx = vec![0.0; t_len * d];
            matmul_b_transposed(d_attn_out, &layer.wo, &mut d_ctx, t_len, d, d);
            matmul_at_b(&lc.ctx, d_attn_out, &mut gl.wo, t_len, d, d);
            col_sums(d_attn_out, &mut gl.bo, t_len, d);

            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            for h in 0..heads {
                let off = h * d_head;
                for t in 0..t_len {
                    let probs = &lc.probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                    let d_ctx_t = &d_ctx[t * d + off..t * d + off + d_head];
                    // dA_u = d_ctx_t . v_u ; dv_u += A_u * d_ctx_t
                    let mut d_a = vec![0.0; t + 1];
                    for u in 0..=t {
                        let vu = &lc.v[u * d + off..u * d + off + d_head];
                        let dv_u = &mut dv[u * d + off..u * d + off + d_head];
                        d_a[u] = dot(d_ctx_t, vu);
                        for (o, &ci) in dv_u.iter_mut().zip(d_ctx_t) {
                            *o += probs[u] * ci;
                        }
                    }
                    // Softmax backward: ds_u = A_u (dA_u - Σ A_w dA_w).
                    let dot_pa: f64 = (0..=t).map(|u| probs[u] * d_a[u]).sum();
                    for u in 0..=t {
                        let ds = probs[u] * (d_a[u] - dot_pa) * scale;
                        let ku = &lc.k[u * d + off..u * d + off + d_head];
                        let qt = &lc.q[t * d + off..t * d + off + d_head];
                        let dq_t = &mut dq[t * d + off..t * d + off + d_head];
                        for (o, &ki) in dq_t.iter_mut().zip(ku) {
                            *o += ds * ki;
                        }
                        let dk_u = &mut dk[u * d + off..u * d + off + d_head];
                        for (o, &qi) in dk_u.iter_mut().zip(qt) {
                            *o += ds * qi;
                        }
                    }
                }
            }

            let mut d_ln1_out = vec![0.0; t_len * d];
            matmul_b_transposed(&dq, &layer.wq, &mut d_ln1_out, t_len, d, d);
            matmul_b_transposed(&dk, &layer.wk, &mut d_ln1_out, t_len, d, d);
            matmul_b_transposed(&dv, &layer.wv, &mut d_ln1_out, t_len, d, d);
            matmul_at_b(&lc.ln1_out, &dq, &mut gl.wq, t_len, d, d);
            matmul_at_b(&lc.ln1_out, &dk, &mut gl.wk, t_len, d, d);
            matmul_at_b(&lc.ln1_out, &dv, &mut gl.wv, t_len, d, d);
            col_sums(&dq, &mut gl.bq, t_len, d);
            col_sums(&dk, &mut gl.bk, t_len, d);
            col_sums(&dv, &mut gl.bv, t_len, d);

            let d_x_from_ln1 = layer_norm_backward(
                &d_ln1_out,
                &lc.ln1,
                &layer.ln1_g,
                &mut gl.ln1_g,
                &mut gl.ln1_b,
                t_len,
                d,
            );
            // d(x_in) = d(res1) + ln1 path.
            let mut d_x_in = d_res1;
            for i in 0..t_len * d {
                d_x_in[i] += d_x_from_ln1[i];
            }
            dx = d_x_in;
        }

        for (t, &tok) in tokens.iter().enumerate() {
            let src = &dx[t * d..(t + 1) * d];
            let te = &mut grads.tok_embed[tok * d..(tok + 1) * d];
            for i in 0..d {
                te[i] += src[i];
            }
            let pe = &mut grads.pos_embed[t * d..(t + 1) * d];
            for i in 0..d {
                pe[i] += src[i];
            }
        }
        Ok(())
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LnCache {
    fn empty() -> Self {
        Self {
            xhat: Vec::new(),
            rstd: Vec::new(),
        }
    }
}

struct LayerCache {
    ln1: LnCache,
    ln1_out: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    ln2_out: Vec<f64>,
    ffn_pre: Vec<f64>,
    ffn_act: Vec<f64>,
}

pub(crate) struct ForwardCache {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    lnf_out: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], t_len: usize, d: usize) -> (Vec<f64>, LnCache) {
    let mut out = vec![0.0; t_len * d];
    let mut xhat = vec![0.0; t_len * d];
    let mut rstd = vec![0.0; t_len];
    for t in 0..t_len {
        let xt = &x[t * d..(t + 1) * d];
        let mean = xt.iter().sum::<f64>() / d as f64;
        let var = xt.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for i in 0..d {
            let h = (xt[i] - mean) * r;
            xhat[t * d + i] = h;
            out[t * d + i] = g[i] * h + b[i];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    t_len: usize,
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; t_len * d];
    for t in 0..t_len {
        let dy_t = &dy[t * d..(t + 1) * d];
        let xhat_t = &cache.xhat[t * d..(t + 1) * d];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in 0..d {
            dg[i] += dy_t[i] * xhat_t[i];
            db[i] += dy_t[i];
            let dxh = dy_t[i] * g[i];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat_t[i];
        }
        let inv_d = 1.0 / d as f64;
        let r = cache.rstd[t];
        for i in 0..d {
            let dxh = dy_t[i] * g[i];
            dx[t * d + i] =
                r * (dxh - inv_d * sum_dxhat - xhat_t[i] * inv_d * sum_dxhat_xhat);
        }
    }
    dx
}

/// out[t, j] += Σ_i x[t, i] * w[i, j]
fn matmul_acc(x: &[f64], w: &[f64], out: &mut [f64], t_len: usize, d_in: usize, d_out: usize) {
    for t in 0..t_len {
        let xr = &x[t * d_in..(t + 1) * d_in];
        let or = &mut out[t * d_out..(t + 1) * d_out];
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wr = &w[i * d_out..(i + 1) * d_out];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xi * wv;
            }
        }
    }
}

/// out[t, i] += Σ_j dy[t, j] * w[i, j]   (i.e. dY · Wᵀ)
fn matmul_b_transposed(
    dy: &[f64],
    w: &[f64],
    out: &mut [f64],
    t_len: usize,
    d_out: usize,
    d_in: usize,
) {
    for t in 0..t_len {
        let dr = &dy[t * d_out..(t + 1) * d_out];
        let or = &mut out[t * d_in..(t + 1) * d_in];
        for (i, o) in or.iter_mut().enumerate() {
            let wr = &w[i * d_out..(i + 1) * d_out];
            *o += dot(dr, wr);
        }
    }
}

/// Four-lane dot product; the fixed lane order keeps results deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// dw[i, j] += Σ_t x[t, i] * dy[t, j]   (i.e. Xᵀ · dY)
fn matmul_at_b(x: &[f64], dy: &[f64], dw: &mut [f64], t_len: usize, d_in: usize, d_out: usize) {
    for t in 0..t_len {
        let xr = &x[t * d_in..(t + 1) * d_in];
        let dr = &dy[t * d_out..(t + 1) * d_out];
        for (i, &xi) in xr.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wr = &mut dw[i * d_out..(i + 1) * d_out];
            for (o, &dv) in wr.iter_mut().zip(dr) {
                *o += xi * dv;
            }
        }
    }
}

fn col_sums(x: &[f64], out: &mut [f64], t_len: usize, d: usize) {
    for t in 0..t_len {
        let xr = &x[t * d..(t + 1) * d];
        for i in 0..d {
            out[i] += xr[i];
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> LmConfig {
        LmConfig {
            vocab_size: 12,
            context: 16,
            layers: 2,
            d_model: 8,
            heads: 2,
        }
    }

    #[test]
    fn fresh_model_is_uniform() {
        let lm = TinyLm::init(tiny_config(), 0).unwrap();
        let logits = lm.forward(&[0, 3, 7]).unwrap();
        for row in logits {
            for z in row {
                assert_eq!(z, 0.0);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let lm = perturbed_model(42);
        let a = lm.forward(&[1, 2, 3, 4]).unwrap();
        let b = lm.forward(&[1, 2, 3, 4]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn causality_ignores_future_tokens() {
        let lm = perturbed_model(7);
        let a = lm.forward(&[1, 2, 3, 4, 5]).unwrap();
        let b = lm.forward(&[1, 2, 3, 5, 4]).unwrap();
        for t in 0..3 {
            for (x, y) in a[t].iter().zip(&b[t]) {
                assert_eq!(x, y, "position {t} depends on the future");
            }
        }
    }

    #[test]
    fn rejects_overlength_and_foreign_tokens() {
        let lm = TinyLm::init(tiny_config(), 0).unwrap();
        assert!(lm.forward(&vec![0; 17]).is_err());
        assert!(lm.forward(&[0, 99]).is_err());
        assert!(lm.forward(&[]).is_err());
    }

    /// A model with every parameter nudged away from its init so that no
    /// gradient path is accidentally zero (w_out in particular).
    fn perturbed_model(seed: u64) -> TinyLm {
        let mut lm = TinyLm::init(tiny_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        for arr in lm.arrays_mut() {
            for x in arr.iter_mut() {
                *x += rng.random_range(-0.2..0.2);
            }
        }
        lm
    }

    #[test]
    fn zero_logit_grads_give_zero_param_grads() {
        let lm = perturbed_model(3);
        let tokens = [1, 4, 2, 9];
        let dlogits = vec![vec![0.0; 12]; 4];
        let grads = lm.backward(&tokens, &dlogits).unwrap();
        for arr in grads.arrays() {
            assert!(arr.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn param_grads_scale_linearly() {
        let lm = perturbed_model(5);
        let tokens = [1, 4, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dl: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let doubled: Vec<Vec<f64>> = dl
            .iter()
            .map(|r| r.iter().map(|x| 2.0 * x).collect())
            .collect();
        let g1 = lm.backward(&tokens, &dl).unwrap();
        let g2 = lm.backward(&tokens, &doubled).unwrap();
        for (a, b) in g1.arrays().iter().zip(g2.arrays().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_everywhere() {
        let lm = perturbed_model(11);
        let tokens = [1, 4, 2, 9, 6];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dlogits: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let grads = lm.backward(&tokens, &dlogits).unwrap();

        let loss = |model: &TinyLm| -> f64 {
            let logits = model.forward(&tokens).unwrap();
            logits
                .iter()
                .zip(&dlogits)
                .map(|(row, dl)| row.iter().zip(dl).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };

        let h = 1e-5;
        let names = lm.named_shapes();
        let mut probe = lm.clone();
        let mut worst: f64 = 0.0;
        for (ai, garr) in grads.arrays().iter().enumerate() {
            // Check a deterministic sample of coordinates per array.
            let len = garr.len();
            let step = (len / 7).max(1);
            for idx in (0..len).step_by(step) {
                let orig = probe.arrays()[ai][idx];
                probe.arrays_mut()[ai][idx] = orig + h;
                let plus = loss(&probe);
                probe.arrays_mut()[ai][idx] = orig - h;
                let minus = loss(&probe);
                probe.arrays_mut()[ai][idx] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = garr[idx];
                // Floor at 1e-3 so structurally-zero gradients (e.g. the key
                // bias, which shifts every attention score equally) are
                // judged against difference noise, not against zero.
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
                assert!(
                    rel <= 1e-4,
                    "array {} ({}) idx {idx}: analytic {analytic} vs numeric {numeric}",
                    names[ai].0,
                    ai
                );
            }
        }
        // The whole model should be comfortably inside the tolerance.
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn backward_rejects_mismatched_shapes() {
        let lm = perturbed_model(2);
        assert!(lm.backward(&[1, 2], &[vec![0.0; 12]]).is_err());
        assert!(lm.backward(&[1, 2], &[vec![0.0; 5], vec![0.0; 5]]).is_err());
    }

    #[test]
    fn named_shapes_match_array_lengths() {
        let lm = TinyLm::init(tiny_config(), 0).unwrap();
        let shapes = lm.named_shapes();
        let arrays = lm.arrays();
        assert_eq!(shapes.len(), arrays.len());
        for ((name, shape), arr) in shapes.iter().zip(arrays) {
            let expect: usize = shape.iter().product();
            assert_eq!(expect, arr.len(), "array {name}");
        }
    }
}
