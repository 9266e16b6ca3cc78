//! A small prompt-conditioned encoder-decoder transformer with hand-written
//! backpropagation.
//!
//! Layout: one pre-norm encoder layer (self-attention + GELU feed-forward)
//! and one pre-norm decoder layer (causal self-attention, cross-attention,
//! feed-forward), a final norm on each side and an untied output projection.
//! Prompt rows are prepended to the encoder input and are treated exactly
//! like token embedding rows: both are scaled by `sqrt(d_model)` and then
//! receive sinusoidal positions, so prompt rows occupy positions `0..p`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    argmax, gelu, gelu_grad, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, sinusoidal_positions,
    softmax_in_place, Matrix, Param, Scalar,
};
use crate::vocab::EOS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Longest encoder or decoder sequence (prompt rows included).
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::field("vocab_size", "must be at least 2"));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::field("d_model", "must be a positive multiple of heads"));
        }
        if self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::field("d_ff", "sizes must be positive"));
        }
        Ok(())
    }
}

/// Teacher-forced loss for one sample.
#[derive(Clone, Debug)]
pub struct QaLoss<T> {
    /// Mean negative log-likelihood over target tokens.
    pub value: f64,
    pub token_nll: Vec<f64>,
    /// Gradient with respect to the prompt rows that were passed in.
    pub prompt_grad: Matrix<T>,
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
struct Linear<T> {
    w: Param<T>,
    b: Param<T>,
}

impl<T: Scalar> Linear<T> {
    fn new(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / inp as f64).sqrt();
        Self {
            w: Param::uniform(inp, out, bound, rng),
            b: Param::zeros(1, out),
        }
    }

    fn inp(&self) -> usize {
        self.w.rows
    }

    fn out(&self) -> usize {
        self.w.cols
    }

    fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let (i, o) = (self.inp(), self.out());
        let mut y = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            y.extend_from_slice(&self.b.value);
        }
        matmul_acc(x, &self.w.value, &mut y, rows, i, o);
        y
    }

    /// Accumulates weight gradients and returns dx.
    fn backward(&mut self, x: &[T], dy: &[T], rows: usize) -> Vec<T> {
        let (i, o) = (self.inp(), self.out());
        matmul_at_b_acc(x, dy, &mut self.w.grad, rows, i, o);
        for r in 0..rows {
            for (g, &d) in self.b.grad.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
                *g += d;
            }
        }
        let mut dx = vec![T::zero(); rows * i];
        matmul_a_bt_acc(dy, &self.w.value, &mut dx, rows, o, i);
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerNorm<T> {
    gain: Param<T>,
    bias: Param<T>,
}

struct LnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn new(d: usize) -> Self {
        Self {
            gain: Param::filled(1, d, T::one()),
            bias: Param::zeros(1, d),
        }
    }

    fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, LnCache<T>) {
        let d = self.gain.cols;
        let eps = T::of(1e-5);
        let n = T::of(d as f64);
        let mut y = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                y[r * d + c] = h * self.gain.value[c] + self.bias.value[c];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&mut self, dy: &[T], cache: &LnCache<T>, rows: usize) -> Vec<T> {
        let d = self.gain.cols;
        let n = T::of(d as f64);
        let mut dx = vec![T::zero(); rows * d];
        let mut dxhat = vec![T::zero(); d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let g = &dy[r * d..(r + 1) * d];
            for c in 0..d {
                self.gain.grad[c] += g[c] * xh[c];
                self.bias.grad[c] += g[c];
                dxhat[c] = g[c] * self.gain.value[c];
            }
            let sum_d = dxhat.iter().copied().sum::<T>();
            let sum_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
            let is = cache.inv_std[r];
            for c in 0..d {
                dx[r * d + c] = is * (dxhat[c] - sum_d / n - xh[c] * sum_dx / n);
            }
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Attention<T> {
    q: Linear<T>,
    k: Linear<T>,
    v: Linear<T>,
    o: Linear<T>,
    heads: usize,
    /// Learned score bias per head and clipped relative offset `j - i`.
    rel: Option<Param<T>>,
}

/// Relative offsets are clipped to `[-REL_RANGE, REL_RANGE]`.
pub const REL_RANGE: usize = 8;

fn rel_bucket(i: usize, j: usize) -> usize {
    let off = j as i64 - i as i64;
    (off.clamp(-(REL_RANGE as i64), REL_RANGE as i64) + REL_RANGE as i64) as usize
}

struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// heads × lq × lk
    probs: Vec<T>,
    concat: Vec<T>,
    lq: usize,
    lk: usize,
}

impl<T: Scalar> Attention<T> {
    fn new(d: usize, heads: usize, relative: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(d, d, rng),
            k: Linear::new(d, d, rng),
            v: Linear::new(d, d, rng),
            o: Linear::new(d, d, rng),
            heads,
            rel: relative.then(|| Param::uniform(heads, 2 * REL_RANGE + 1, 1.0, rng)),
        }
    }

    fn forward(&self, xq: &[T], lq: usize, xkv: &[T], lk: usize, causal: bool) -> (Vec<T>, AttnCache<T>) {
        let d = self.q.out();
        let dh = d / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let q = self.q.forward(xq, lq);
        let k = self.k.forward(xkv, lk);
        let v = self.v.forward(xkv, lk);
        let mut probs = vec![T::zero(); self.heads * lq * lk];
        let mut concat = vec![T::zero(); lq * d];
        for h in 0..self.heads {
            let off = h * dh;
            for i in 0..lq {
                let qi = &q[i * d + off..i * d + off + dh];
                let prow = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                for (j, p) in prow.iter_mut().enumerate() {
                    *p = if causal && j > i {
                        T::neg_infinity()
                    } else {
                        let b = match &self.rel {
                            Some(r) => r.value[h * (2 * REL_RANGE + 1) + rel_bucket(i, j)],
                            None => T::zero(),
                        };
                        crate::nn::dot(qi, &k[j * d + off..j * d + off + dh]) * scale + b
                    };
                }
                softmax_in_place(prow);
                let out = &mut concat[i * d + off..i * d + off + dh];
                for (j, &p) in prow.iter().enumerate() {
                    if p == T::zero() {
                        continue;
                    }
                    let vj = &v[j * d + off..j * d + off + dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        let y = self.o.forward(&concat, lq);
        (
            y,
            AttnCache {
                q,
                k,
                v,
                probs,
                concat,
                lq,
                lk,
            },
        )
    }

    /// Returns (dxq, dxkv).
    fn backward(&mut self, dy: &[T], c: &AttnCache<T>, xq: &[T], xkv: &[T]) -> (Vec<T>, Vec<T>) {
        let d = self.q.out();
        let dh = d / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (lq, lk) = (c.lq, c.lk);
        let dconcat = self.o.backward(&c.concat, dy, lq);
        let mut dq = vec![T::zero(); lq * d];
        let mut dk = vec![T::zero(); lk * d];
        let mut dv = vec![T::zero(); lk * d];
        let mut dp = vec![T::zero(); lk];
        for h in 0..self.heads {
            let off = h * dh;
            for i in 0..lq {
                let prow = &c.probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let doi = &dconcat[i * d + off..i * d + off + dh];
                let mut rowsum = T::zero();
                for j in 0..lk {
                    let p = prow[j];
                    if p == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vj = &c.v[j * d + off..j * d + off + dh];
                    dp[j] = crate::nn::dot(doi, vj);
                    rowsum += dp[j] * p;
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (g, &o) in dvj.iter_mut().zip(doi) {
                        *g += p * o;
                    }
                }
                for j in 0..lk {
                    let p = prow[j];
                    if p == T::zero() {
                        continue;
                    }
                    let dsb = p * (dp[j] - rowsum);
                    if let Some(r) = &mut self.rel {
                        r.grad[h * (2 * REL_RANGE + 1) + rel_bucket(i, j)] += dsb;
                    }
                    let ds = dsb * scale;
                    let kj = &c.k[j * d + off..j * d + off + dh];
                    let qi = &c.q[i * d + off..i * d + off + dh];
                    for t in 0..dh {
                        dq[i * d + off + t] += ds * kj[t];
                        dk[j * d + off + t] += ds * qi[t];
                    }
                }
            }
        }
        let dxq = self.q.backward(xq, &dq, lq);
        let mut dxkv = self.k.backward(xkv, &dk, lk);
        let dxv = self.v.backward(xkv, &dv, lk);
        for (a, b) in dxkv.iter_mut().zip(dxv) {
            *a += b;
        }
        (dxq, dxkv)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct FeedForward<T> {
    up: Linear<T>,
    down: Linear<T>,
}

struct FfCache<T> {
    pre: Vec<T>,
    act: Vec<T>,
}

impl<T: Scalar> FeedForward<T> {
    fn new(d: usize, f: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(d, f, rng),
            down: Linear::new(f, d, rng),
        }
    }

    fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, FfCache<T>) {
        let pre = self.up.forward(x, rows);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let y = self.down.forward(&act, rows);
        (y, FfCache { pre, act })
    }

    fn backward(&mut self, x: &[T], dy: &[T], c: &FfCache<T>, rows: usize) -> Vec<T> {
        let mut dact = self.down.backward(&c.act, dy, rows);
        for (g, &p) in dact.iter_mut().zip(&c.pre) {
            *g *= gelu_grad(p);
        }
        self.up.backward(x, &dact, rows)
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Trainable encoder-decoder, generic over the scalar type.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel<T: Scalar = f32> {
    pub config: ModelConfig,
    tok_emb: Param<T>,
    /// Decoder input at position 0, in place of a begin-of-sequence token.
    dec_start: Param<T>,
    enc_ln1: LayerNorm<T>,
    enc_attn: Attention<T>,
    enc_ln2: LayerNorm<T>,
    enc_ff: FeedForward<T>,
    enc_lnf: LayerNorm<T>,
    dec_ln1: LayerNorm<T>,
    dec_self: Attention<T>,
    dec_ln2: LayerNorm<T>,
    dec_cross: Attention<T>,
    dec_ln3: LayerNorm<T>,
    dec_ff: FeedForward<T>,
    dec_lnf: LayerNorm<T>,
    out: Linear<T>,
    positions: Matrix<T>,
}

struct EncCache<T> {
    ln1: LnCache<T>,
    a: Vec<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    b: Vec<T>,
    ff: FfCache<T>,
    lnf: LnCache<T>,
    len: usize,
}

struct DecCache<T> {
    ln1: LnCache<T>,
    a: Vec<T>,
    self_attn: AttnCache<T>,
    ln2: LnCache<T>,
    b: Vec<T>,
    cross: AttnCache<T>,
    ln3: LnCache<T>,
    g: Vec<T>,
    ff: FfCache<T>,
    lnf: LnCache<T>,
    z: Vec<T>,
    len: usize,
}

impl<T: Scalar> Seq2SeqModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        // Stored at 1/sqrt(d) scale; the forward pass multiplies by sqrt(d).
        let emb_bound = (3.0f64).sqrt() / (d as f64).sqrt();
        Ok(Self {
            config,
            tok_emb: Param::uniform(config.vocab_size, d, emb_bound, &mut rng),
            dec_start: Param::uniform(1, d, emb_bound, &mut rng),
            enc_ln1: LayerNorm::new(d),
            enc_attn: Attention::new(d, config.heads, true, &mut rng),
            enc_ln2: LayerNorm::new(d),
            enc_ff: FeedForward::new(d, config.d_ff, &mut rng),
            enc_lnf: LayerNorm::new(d),
            dec_ln1: LayerNorm::new(d),
            dec_self: Attention::new(d, config.heads, true, &mut rng),
            dec_ln2: LayerNorm::new(d),
            dec_cross: Attention::new(d, config.heads, false, &mut rng),
            dec_ln3: LayerNorm::new(d),
            dec_ff: FeedForward::new(d, config.d_ff, &mut rng),
            dec_lnf: LayerNorm::new(d),
            out: Linear::new(d, config.vocab_size, &mut rng),
            positions: sinusoidal_positions(config.max_positions, d),
        })
    }

    fn input_scale(&self) -> T {
        T::of((self.config.d_model as f64).sqrt())
    }

    /// All parameters with stable names, in the order used by the optimizer
    /// and by checkpoints.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut v: Vec<(String, &Param<T>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("dec_start".into(), &self.dec_start),
        ];
        for (name, ln) in [
            ("enc_ln1", &self.enc_ln1),
            ("enc_ln2", &self.enc_ln2),
            ("enc_lnf", &self.enc_lnf),
            ("dec_ln1", &self.dec_ln1),
            ("dec_ln2", &self.dec_ln2),
            ("dec_ln3", &self.dec_ln3),
            ("dec_lnf", &self.dec_lnf),
        ] {
            v.push((format!("{name}.gain"), &ln.gain));
            v.push((format!("{name}.bias"), &ln.bias));
        }
        for (name, a) in [
            ("enc_attn", &self.enc_attn),
            ("dec_self", &self.dec_self),
            ("dec_cross", &self.dec_cross),
        ] {
            for (sub, l) in [("q", &a.q), ("k", &a.k), ("v", &a.v), ("o", &a.o)] {
                v.push((format!("{name}.{sub}.w"), &l.w));
                v.push((format!("{name}.{sub}.b"), &l.b));
            }
            if let Some(r) = &a.rel {
                v.push((format!("{name}.rel"), r));
            }
        }
        for (name, f) in [("enc_ff", &self.enc_ff), ("dec_ff", &self.dec_ff)] {
            v.push((format!("{name}.up.w"), &f.up.w));
            v.push((format!("{name}.up.b"), &f.up.b));
            v.push((format!("{name}.down.w"), &f.down.w));
            v.push((format!("{name}.down.b"), &f.down.b));
        }
        v.push(("out.w".into(), &self.out.w));
        v.push(("out.b".into(), &self.out.b));
        v
    }

    /// Mutable view of [`Self::params`], same order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = vec![&mut self.tok_emb, &mut self.dec_start];
        for ln in [
            &mut self.enc_ln1,
            &mut self.enc_ln2,
            &mut self.enc_lnf,
            &mut self.dec_ln1,
            &mut self.dec_ln2,
            &mut self.dec_ln3,
            &mut self.dec_lnf,
        ] {
            v.push(&mut ln.gain);
            v.push(&mut ln.bias);
        }
        for a in [&mut self.enc_attn, &mut self.dec_self, &mut self.dec_cross] {
            for l in [&mut a.q, &mut a.k, &mut a.v, &mut a.o] {
                v.push(&mut l.w);
                v.push(&mut l.b);
            }
            if let Some(r) = &mut a.rel {
                v.push(r);
            }
        }
        for f in [&mut self.enc_ff, &mut self.dec_ff] {
            v.push(&mut f.up.w);
            v.push(&mut f.up.b);
            v.push(&mut f.down.w);
            v.push(&mut f.down.b);
        }
        v.push(&mut self.out.w);
        v.push(&mut self.out.b);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfVocab {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn check_lengths(&self, prompt: &Matrix<T>, input: &[usize], dec_len: usize) -> Result<()> {
        if prompt.rows > 0 && prompt.cols != self.config.d_model {
            return Err(Error::Validation(format!(
                "prompt width {} does not match d_model {}",
                prompt.cols, self.config.d_model
            )));
        }
        let enc_len = prompt.rows + input.len();
        if enc_len == 0 {
            return Err(Error::EmptyInput);
        }
        if enc_len > self.config.max_positions || dec_len > self.config.max_positions {
            return Err(Error::Validation(format!(
                "sequence length {} exceeds max_positions {}",
                enc_len.max(dec_len),
                self.config.max_positions
            )));
        }
        Ok(())
    }

    fn embed(&self, prompt: Option<&Matrix<T>>, tokens: &[usize]) -> Vec<T> {
        let d = self.config.d_model;
        let s = self.input_scale();
        let p = prompt.map_or(0, |m| m.rows);
        let len = p + tokens.len();
        let mut x = vec![T::zero(); len * d];
        if let Some(m) = prompt {
            for (o, &v) in x[..p * d].iter_mut().zip(&m.data) {
                *o = v * s;
            }
        }
        for (i, &t) in tokens.iter().enumerate() {
            let src = &self.tok_emb.value[t * d..(t + 1) * d];
            for (o, &v) in x[(p + i) * d..(p + i + 1) * d].iter_mut().zip(src) {
                *o = v * s;
            }
        }
        for (o, &pe) in x.iter_mut().zip(&self.positions.data[..len * d]) {
            *o += pe;
        }
        x
    }

    fn encode(&self, prompt: &Matrix<T>, input: &[usize]) -> (Vec<T>, EncCache<T>) {
        let len = prompt.rows + input.len();
        let x0 = self.embed(Some(prompt), input);
        let (a, ln1) = self.enc_ln1.forward(&x0, len);
        let (att, attn) = self.enc_attn.forward(&a, len, &a, len, false);
        let x1: Vec<T> = x0.iter().zip(&att).map(|(&u, &v)| u + v).collect();
        let (b, ln2) = self.enc_ln2.forward(&x1, len);
        let (f, ff) = self.enc_ff.forward(&b, len);
        let x2: Vec<T> = x1.iter().zip(&f).map(|(&u, &v)| u + v).collect();
        let (e, lnf) = self.enc_lnf.forward(&x2, len);
        (
            e,
            EncCache {
                ln1,
                a,
                attn,
                ln2,
                b,
                ff,
                lnf,
                len,
            },
        )
    }

    /// `dec_in` excludes the start row, so `dec_in.len() + 1` rows are decoded.
    fn decode(&self, enc: &[T], enc_len: usize, dec_in: &[usize]) -> (Vec<T>, DecCache<T>) {
        let len = dec_in.len() + 1;
        let start = Matrix::from_vec(1, self.config.d_model, self.dec_start.value.clone());
        let y0 = self.embed(Some(&start), dec_in);
        let (a, ln1) = self.dec_ln1.forward(&y0, len);
        let (s, self_attn) = self.dec_self.forward(&a, len, &a, len, true);
        let y1: Vec<T> = y0.iter().zip(&s).map(|(&u, &v)| u + v).collect();
        let (b, ln2) = self.dec_ln2.forward(&y1, len);
        let (c, cross) = self.dec_cross.forward(&b, len, enc, enc_len, false);
        let y2: Vec<T> = y1.iter().zip(&c).map(|(&u, &v)| u + v).collect();
        let (g, ln3) = self.dec_ln3.forward(&y2, len);
        let (f, ff) = self.dec_ff.forward(&g, len);
        let y3: Vec<T> = y2.iter().zip(&f).map(|(&u, &v)| u + v).collect();
        let (z, lnf) = self.dec_lnf.forward(&y3, len);
        let logits = self.out.forward(&z, len);
        (
            logits,
            DecCache {
                ln1,
                a,
                self_attn,
                ln2,
                b,
                cross,
                ln3,
                g,
                ff,
                lnf,
                z,
                len,
            },
        )
    }

    fn decoder_input(target: &[usize]) -> &[usize] {
        &target[..target.len() - 1]
    }

    fn nll_rows(logits: &[T], targets: &[usize], vocab: usize) -> (Vec<f64>, Vec<T>) {
        let mut probs = logits.to_vec();
        let mut nll = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            softmax_in_place(row);
            let p = row[t].to_f64().unwrap_or(0.0).max(f64::MIN_POSITIVE);
            nll.push(-p.ln());
        }
        (nll, probs)
    }

    /// Loss without touching gradients.
    pub fn loss(&self, prompt: &Matrix<T>, input: &[usize], target: &[usize]) -> Result<f64> {
        self.validate_pair(prompt, input, target)?;
        let (enc, ec) = self.encode(prompt, input);
        let dec_in = Self::decoder_input(target);
        let (logits, _) = self.decode(&enc, ec.len, dec_in);
        let (nll, _) = Self::nll_rows(&logits, target, self.config.vocab_size);
        Ok(nll.iter().sum::<f64>() / nll.len() as f64)
    }

    fn validate_pair(&self, prompt: &Matrix<T>, input: &[usize], target: &[usize]) -> Result<()> {
        if target.is_empty() {
            return Err(Error::Validation("target must contain at least one token".into()));
        }
        self.check_tokens(input)?;
        self.check_tokens(target)?;
        self.check_lengths(prompt, input, target.len())
    }

    /// Teacher-forced loss for one sample. Gradients are accumulated into the
    /// model parameters (scaled by `weight`); the prompt gradient (also
    /// scaled) is returned so the caller can route it back to whichever
    /// prompts were composed.
    pub fn forward_loss(
        &mut self,
        prompt: &Matrix<T>,
        input: &[usize],
        target: &[usize],
        weight: f64,
    ) -> Result<QaLoss<T>> {
        self.validate_pair(prompt, input, target)?;
        let d = self.config.d_model;
        let vocab = self.config.vocab_size;
        let (enc, ec) = self.encode(prompt, input);
        let dec_in = Self::decoder_input(target);
        let (logits, dc) = self.decode(&enc, ec.len, dec_in);
        let (nll, probs) = Self::nll_rows(&logits, target, vocab);
        let n = target.len();
        let value = nll.iter().sum::<f64>() / n as f64;

        // d loss / d logits = (softmax - onehot) * weight / n
        let w = T::of(weight / n as f64);
        let mut dlogits = probs;
        for (r, &t) in target.iter().enumerate() {
            dlogits[r * vocab + t] -= T::one();
        }
        for g in dlogits.iter_mut() {
            *g *= w;
        }

        let len = dc.len;
        let dz = self.out.backward(&dc.z, &dlogits, len);
        let dy3 = self.dec_lnf.backward(&dz, &dc.lnf, len);
        // y3 = y2 + ff(ln3(y2))
        let dg = self.dec_ff.backward(&dc.g, &dy3, &dc.ff, len);
        let mut dy2 = self.dec_ln3.backward(&dg, &dc.ln3, len);
        add_into(&mut dy2, &dy3);
        // y2 = y1 + cross(ln2(y1), enc)
        let (db, denc) = self.dec_cross.backward(&dy2, &dc.cross, &dc.b, &enc);
        let mut dy1 = self.dec_ln2.backward(&db, &dc.ln2, len);
        add_into(&mut dy1, &dy2);
        // y1 = y0 + self(ln1(y0))
        let (da_q, da_kv) = self.dec_self.backward(&dy1, &dc.self_attn, &dc.a, &dc.a);
        let mut da = da_q;
        add_into(&mut da, &da_kv);
        let mut dy0 = self.dec_ln1.backward(&da, &dc.ln1, len);
        add_into(&mut dy0, &dy1);
        let s = self.input_scale();
        for (g, &v) in self.dec_start.grad.iter_mut().zip(&dy0[..d]) {
            *g += v * s;
        }
        self.scatter_embedding_grad(&dy0, dec_in, 1);

        // Encoder.
        let el = ec.len;
        let dx2 = self.enc_lnf.backward(&denc, &ec.lnf, el);
        let db = self.enc_ff.backward(&ec.b, &dx2, &ec.ff, el);
        let mut dx1 = self.enc_ln2.backward(&db, &ec.ln2, el);
        add_into(&mut dx1, &dx2);
        let (daq, dakv) = self.enc_attn.backward(&dx1, &ec.attn, &ec.a, &ec.a);
        let mut da = daq;
        add_into(&mut da, &dakv);
        let mut dx0 = self.enc_ln1.backward(&da, &ec.ln1, el);
        add_into(&mut dx0, &dx1);

        let p = prompt.rows;
        let s = self.input_scale();
        let prompt_grad = Matrix::from_vec(p, d, dx0[..p * d].iter().map(|&g| g * s).collect());
        self.scatter_embedding_grad(&dx0, input, p);

        Ok(QaLoss {
            value,
            token_nll: nll,
            prompt_grad,
        })
    }

    fn scatter_embedding_grad(&mut self, dx: &[T], tokens: &[usize], row_offset: usize) {
        let d = self.config.d_model;
        let s = self.input_scale();
        for (i, &t) in tokens.iter().enumerate() {
            let src = &dx[(row_offset + i) * d..(row_offset + i + 1) * d];
            let dst = &mut self.tok_emb.grad[t * d..(t + 1) * d];
            for (g, &v) in dst.iter_mut().zip(src) {
                *g += v * s;
            }
        }
    }

    /// Next-token distribution after `prefix` (decoder side), for tests and
    /// diagnostics.
    pub fn next_token_probs(&self, prompt: &Matrix<T>, input: &[usize], prefix: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(input)?;
        self.check_tokens(prefix)?;
        self.check_lengths(prompt, input, prefix.len() + 1)?;
        let (enc, ec) = self.encode(prompt, input);
        let (logits, dc) = self.decode(&enc, ec.len, prefix);
        let v = self.config.vocab_size;
        let mut row = logits[(dc.len - 1) * v..dc.len * v].to_vec();
        softmax_in_place(&mut row);
        Ok(row.iter().map(|x| x.to_f64().unwrap_or(0.0)).collect())
    }

    /// Greedy decoding: argmax (lowest id on ties) until EOS or `max_len`
    /// tokens. The returned sequence includes the EOS when one is produced.
    pub fn greedy_decode(&self, prompt: &Matrix<T>, input: &[usize], max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::field("max_len", "must be at least 1"));
        }
        self.check_tokens(input)?;
        self.check_lengths(prompt, input, max_len)?;
        let (enc, ec) = self.encode(prompt, input);
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(max_len);
        let mut dec_in = Vec::with_capacity(max_len);
        while out.len() < max_len {
            let (logits, dc) = self.decode(&enc, ec.len, &dec_in);
            let last = &logits[(dc.len - 1) * v..dc.len * v];
            let tok = argmax(last);
            out.push(tok);
            if tok == EOS {
                break;
            }
            dec_in.push(tok);
        }
        Ok(out)
    }

    #[cfg(test)]
    pub(crate) fn set_output_bias(&mut self, bias: Vec<T>) {
        self.out.b.value = bias;
        self.out.w.value.iter_mut().for_each(|w| *w = T::zero());
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize, d: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: d,
            heads: 2,
            d_ff: 2 * d,
            max_positions: 32,
        }
    }

    #[test]
    fn uniform_output_gives_log_vocab_loss() {
        let mut m = Seq2SeqModel::<f64>::new(tiny(16, 8), 1).unwrap();
        m.set_output_bias(vec![0.0; 16]);
        let prompt = Matrix::zeros(0, 8);
        let l = m.loss(&prompt, &[3, 4, 5], &[7, EOS]).unwrap();
        assert!((l - (16f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_token_vocab_zero_logits_is_ln2() {
        let mut m = Seq2SeqModel::<f64>::new(tiny(2, 8), 1).unwrap();
        m.set_output_bias(vec![0.0; 2]);
        let prompt = Matrix::zeros(0, 8);
        let l = m.loss(&prompt, &[0], &[1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn near_certain_model_has_near_zero_loss() {
        let mut m = Seq2SeqModel::<f64>::new(tiny(16, 8), 1).unwrap();
        let mut b = vec![-60.0; 16];
        b[EOS] = 60.0;
        m.set_output_bias(b);
        let l = m.loss(&Matrix::zeros(0, 8), &[3, 4], &[EOS]).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let mut m = Seq2SeqModel::<f32>::new(tiny(16, 8), 1).unwrap();
        let err = m.forward_loss(&Matrix::zeros(0, 8), &[3, 99], &[EOS], 1.0);
        assert!(matches!(err, Err(Error::TokenOutOfVocab { id: 99, .. })));
    }

    #[test]
    fn decode_respects_max_len_and_is_deterministic() {
        let m = Seq2SeqModel::<f32>::new(tiny(16, 8), 3).unwrap();
        let prompt = Matrix::zeros(2, 8);
        let one = m.greedy_decode(&prompt, &[4, 5, 6], 1).unwrap();
        assert_eq!(one.len(), 1);
        let a = m.greedy_decode(&prompt, &[4, 5, 6], 5).unwrap();
        let b = m.greedy_decode(&prompt, &[4, 5, 6], 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn params_and_params_mut_align() {
        let mut m = Seq2SeqModel::<f32>::new(tiny(16, 8), 3).unwrap();
        let shapes: Vec<(usize, usize)> = m.params().iter().map(|(_, p)| (p.rows, p.cols)).collect();
        let shapes_mut: Vec<(usize, usize)> = m.params_mut().iter().map(|p| (p.rows, p.cols)).collect();
        assert_eq!(shapes, shapes_mut);
        let names: std::collections::HashSet<_> = m.params().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), shapes.len());
    }
}
