//! Attentional guidance: GRU decoder with bilinear attention over the
//! feature sequence, trained by teacher-forced cross entropy.
//!
//! Output classes are the alphabet symbols followed by EOS. The embedding
//! table has one extra row for the start token, which is never predicted.

use crate::ctc::LabelSequence;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuidanceConfig {
    pub feature_width: usize,
    pub num_symbols: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub max_decode_len: usize,
}

impl GuidanceConfig {
    pub fn new(feature_width: usize, num_symbols: usize) -> Self {
        Self {
            feature_width,
            num_symbols,
            embed_dim: 32,
            hidden: 64,
            max_decode_len: 32,
        }
    }

    pub fn eos(&self) -> usize {
        self.num_symbols
    }

    pub fn sos(&self) -> usize {
        self.num_symbols + 1
    }

    pub fn num_outputs(&self) -> usize {
        self.num_symbols + 1
    }
}

/// GRU gates are laid out `[r | z | n]` in `w_x`, `w_h`, `b_x`, `b_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance {
    pub config: GuidanceConfig,
    pub embedding: ParamId,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b_x: ParamId,
    pub b_h: ParamId,
    pub w_attn: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

/// Decoder state between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub s: Var,
    pub t: usize,
    pub emitted: Vec<usize>,
}

/// Per-sequence values shared by every decode step.
#[derive(Debug, Clone, Copy)]
pub struct AttentionContext {
    pub h: Var,
    h_t: Var,
}

impl Guidance {
    /// Registers parameters under `guidance.*`.
    pub fn new<S: Scalar>(config: GuidanceConfig, store: &mut ParamStore<S>, rng: &mut SplitMix64) -> Self {
        let (c, e, h, k) = (config.feature_width, config.embed_dim, config.hidden, config.num_outputs());
        Self {
            config,
            embedding: store.add_uniform("guidance.embedding", &[k + 1, e], e, rng),
            w_x: store.add_uniform("guidance.gru.w_x", &[e + c, 3 * h], h, rng),
            w_h: store.add_uniform("guidance.gru.w_h", &[h, 3 * h], h, rng),
            b_x: store.add_uniform("guidance.gru.b_x", &[3 * h], h, rng),
            b_h: store.add_uniform("guidance.gru.b_h", &[3 * h], h, rng),
            w_attn: store.add_uniform("guidance.attention.weight", &[h, c], h, rng),
            w_out: store.add_uniform("guidance.output.weight", &[h, k], h, rng),
            b_out: store.add_uniform("guidance.output.bias", &[k], h, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.embedding,
            self.w_x,
            self.w_h,
            self.b_x,
            self.b_h,
            self.w_attn,
            self.w_out,
            self.b_out,
        ]
    }

    pub fn context<S: Scalar>(&self, tape: &mut Tape<S>, h: Var) -> Result<AttentionContext> {
        match *tape.shape(h) {
            [_, c] if c == self.config.feature_width => {}
            ref s => {
                return Err(Error::shape(
                    "guidance",
                    format!("features {s:?}, expected width {}", self.config.feature_width),
                ))
            }
        }
        let h_t = tape.transpose2d(h)?;
        Ok(AttentionContext { h, h_t })
    }

    pub fn initial_state<S: Scalar>(&self, tape: &mut Tape<S>) -> Var {
        tape.constant(Tensor::zeros(&[1, self.config.hidden]))
    }

    /// `alpha_t(i) = softmax_i(s_prev W_a h_i)`, shape `[1, T]`.
    pub fn attention_weights<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        s_prev: Var,
        ctx: &AttentionContext,
    ) -> Result<Var> {
        let w = tape.param(store, self.w_attn);
        let q = tape.matmul(s_prev, w)?;
        let scores = tape.matmul(q, ctx.h_t)?;
        tape.row_softmax(scores)
    }

    /// `g_t = Σ_i alpha_t(i) h_i`, shape `[1, C]`.
    pub fn glimpse<S: Scalar>(&self, tape: &mut Tape<S>, alpha: Var, ctx: &AttentionContext) -> Result<Var> {
        tape.matmul(alpha, ctx.h)
    }

    /// GRU update on input `[embedding(y_prev) | g_t]`.
    pub fn gru_step<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        y_prev: usize,
        glimpse: Var,
        s_prev: Var,
    ) -> Result<Var> {
        let hsz = self.config.hidden;
        let table = tape.param(store, self.embedding);
        let emb = tape.embedding(table, &[y_prev])?;
        let x = tape.concat(&[emb, glimpse], 1)?;
        let w_x = tape.param(store, self.w_x);
        let w_h = tape.param(store, self.w_h);
        let b_x = tape.param(store, self.b_x);
        let b_h = tape.param(store, self.b_h);
        let gx = tape.matmul(x, w_x)?;
        let gx = tape.add(gx, b_x)?;
        let gh = tape.matmul(s_prev, w_h)?;
        let gh = tape.add(gh, b_h)?;
        let part = |tape: &mut Tape<S>, v: Var, k: usize| tape.slice(v, 1, k * hsz, (k + 1) * hsz);
        let (xr, xz, xn) = (part(tape, gx, 0)?, part(tape, gx, 1)?, part(tape, gx, 2)?);
        let (hr, hz, hn) = (part(tape, gh, 0)?, part(tape, gh, 1)?, part(tape, gh, 2)?);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z)?;
        let rh = tape.mul(r, hn)?;
        let n = tape.add(xn, rh)?;
        let n = tape.tanh(n)?;
        // s = (1 - z) n + z s_prev = n + z (s_prev - n)
        let diff = tape.sub(s_prev, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    /// `W^T s_t + b` over symbols + EOS.
    pub fn output_logits<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, s: Var) -> Result<Var> {
        let w = tape.param(store, self.w_out);
        let b = tape.param(store, self.b_out);
        let z = tape.matmul(s, w)?;
        tape.add(z, b)
    }

    pub fn output_distribution<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, s: Var) -> Result<Var> {
        let z = self.output_logits(tape, store, s)?;
        tape.row_softmax(z)
    }

    /// One decode step: attend with `s_{t-1}`, update the GRU, emit logits.
    pub fn step<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        ctx: &AttentionContext,
        y_prev: usize,
        s_prev: Var,
    ) -> Result<(Var, Var)> {
        let alpha = self.attention_weights(tape, store, s_prev, ctx)?;
        let g = self.glimpse(tape, alpha, ctx)?;
        let s = self.gru_step(tape, store, y_prev, g, s_prev)?;
        let logits = self.output_logits(tape, store, s)?;
        Ok((s, logits))
    }

    /// Mean over steps of `-ln y_t[target_t]`; targets are the label then EOS,
    /// inputs the start token then the label.
    pub fn teacher_forced_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        h: Var,
        label: &LabelSequence,
    ) -> Result<Var> {
        let steps = label.len() + 1;
        if steps > self.config.max_decode_len {
            return Err(Error::Contract(format!(
                "label of length {} exceeds max decode length {}",
                label.len(),
                self.config.max_decode_len
            )));
        }
        if let Some(&bad) = label.indices.iter().find(|&&i| i >= self.config.num_symbols) {
            return Err(Error::Index {
                what: "guidance symbol",
                index: bad,
                size: self.config.num_symbols,
            });
        }
        let ctx = self.context(tape, h)?;
        let mut s = self.initial_state(tape);
        let mut prev = self.config.sos();
        let mut all_logits = Vec::with_capacity(steps);
        let targets: Vec<usize> = label.indices.iter().copied().chain([self.config.eos()]).collect();
        for &target in &targets {
            let (s_next, logits) = self.step(tape, store, &ctx, prev, s)?;
            all_logits.push(logits);
            s = s_next;
            prev = target;
        }
        let k = self.config.num_outputs();
        let stacked = tape.concat(&all_logits, 0)?;
        let logp = tape.row_log_softmax(stacked)?;
        let mut onehot = Tensor::zeros(&[steps, k]);
        for (t, &target) in targets.iter().enumerate() {
            onehot.data_mut()[t * k + target] = S::one();
        }
        let onehot = tape.constant(onehot);
        let picked = tape.mul(logp, onehot)?;
        let total = tape.sum(picked)?;
        tape.scale(total, S::lit(-1.0 / steps as f64))
    }

    /// Greedy decoding until EOS or `max_len` symbols.
    pub fn greedy_infer<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        h: Var,
        max_len: usize,
    ) -> Result<LabelSequence> {
        if max_len == 0 {
            return Err(Error::Contract("max_len must be at least 1".into()));
        }
        let ctx = self.context(tape, h)?;
        let mut state = DecoderState {
            s: self.initial_state(tape),
            t: 0,
            emitted: Vec::new(),
        };
        let mut prev = self.config.sos();
        while state.t < max_len {
            let (s, logits) = self.step(tape, store, &ctx, prev, state.s)?;
            state.s = s;
            state.t += 1;
            let row = tape.value(logits).data();
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == self.config.eos() {
                break;
            }
            state.emitted.push(best);
            prev = best;
        }
        Ok(LabelSequence::new(state.emitted))
    }
}
