//! CNN-encoded, return-conditioned causal transformer over interleaved
//! `(R_t, s_t, a_{t-1})` tokens. Behaviour-cloning mode drops the return token.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderCache, EncoderConfig};
use super::layers::{gelu, gelu_grad, linear_bwd, linear_fwd, rmsnorm_bwd, rmsnorm_fwd};
use super::params::{Init, Layout, P};
use super::scalar::Scalar;
use crate::dataset::{Batch, PAD_ACTION};
use crate::error::{Error, Result};
use crate::sim::control::N_ACTIONS;
use crate::sim::world::MAX_DECISIONS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ReturnConditioned,
    Bc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub context: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Size of the absolute timestep embedding table.
    pub max_timestep: usize,
    /// Returns are divided by this before their affine embedding.
    pub return_scale: f64,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            context: 20,
            d_model: 32,
            layers: 4,
            heads: 1,
            mlp_ratio: 4,
            max_timestep: MAX_DECISIONS as usize,
            return_scale: MAX_DECISIONS as f64,
            mode: Mode::ReturnConditioned,
        }
    }
}

impl ModelConfig {
    pub fn bc() -> Self {
        Self {
            mode: Mode::Bc,
            ..Self::default()
        }
    }

    pub fn tokens_per_step(&self) -> usize {
        match self.mode {
            Mode::ReturnConditioned => 3,
            Mode::Bc => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.context == 0 || self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.max_timestep == 0 || !(self.return_scale > 0.0) {
            return Err(Error::invalid("timestep table and return scale must be positive"));
        }
        Ok(())
    }

    /// Architectures are interchangeable when every shape agrees.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        if self != other {
            return Err(Error::ConfigMismatch(format!(
                "model configs differ: {} vs {}",
                serde_json::to_string(self).unwrap_or_default(),
                serde_json::to_string(other).unwrap_or_default()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    norm1: P,
    q: (P, P),
    k: (P, P),
    v: (P, P),
    o: (P, P),
    norm2: P,
    fc1: (P, P),
    fc2: (P, P),
}

/// Parameter layout plus the handles needed by the kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub cfg: ModelConfig,
    pub params: Layout,
    pub buffers: Layout,
    pub encoder: Encoder,
    /// Parameters below this offset belong to the state encoder.
    pub encoder_len: usize,
    ret: Option<(P, P)>,
    state: (P, P),
    action: P,
    time: P,
    emb_norm: P,
    blocks: Vec<Block>,
    final_norm: P,
    head: (P, P),
}

const EMBED_STD: f64 = 0.02;

impl Arch {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = Layout::default();
        let mut buffers = Layout::default();
        let encoder = Encoder::new(cfg.encoder.clone(), &mut params, &mut buffers);
        let encoder_len = params.len;
        let d = cfg.d_model;
        let ret = match cfg.mode {
            Mode::ReturnConditioned => Some(params.linear("emb.return", 1, d)),
            Mode::Bc => None,
        };
        let state = params.linear("emb.state", cfg.encoder.embed, d);
        let action = params.add("emb.action", &[N_ACTIONS + 1, d], Init::Normal(EMBED_STD));
        let time = params.add("emb.timestep", &[cfg.max_timestep, d], Init::Normal(EMBED_STD));
        let emb_norm = params.add("emb.norm", &[d], Init::Ones);
        let hidden = cfg.mlp_ratio * d;
        let blocks = (0..cfg.layers)
            .map(|i| Block {
                norm1: params.add(format!("blocks.{i}.norm1"), &[d], Init::Ones),
                q: params.linear(&format!("blocks.{i}.attn.q"), d, d),
                k: params.linear(&format!("blocks.{i}.attn.k"), d, d),
                v: params.linear(&format!("blocks.{i}.attn.v"), d, d),
                o: params.linear(&format!("blocks.{i}.attn.o"), d, d),
                norm2: params.add(format!("blocks.{i}.norm2"), &[d], Init::Ones),
                fc1: params.linear(&format!("blocks.{i}.mlp.fc1"), d, hidden),
                fc2: params.linear(&format!("blocks.{i}.mlp.fc2"), hidden, d),
            })
            .collect();
        let final_norm = params.add("final_norm", &[d], Init::Ones);
        let head = params.linear("head", d, N_ACTIONS);
        Ok(Self {
            cfg,
            params,
            buffers,
            encoder,
            encoder_len,
            ret,
            state,
            action,
            time,
            emb_norm,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len
    }
}

/// Parameters and running statistics of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel<T> {
    pub arch: Arch,
    pub params: Vec<T>,
    pub buffers: Vec<T>,
}

/// One left-padded window's valid suffix, ready for the transformer.
#[derive(Debug, Clone, Copy)]
pub struct SeqInput<'a> {
    pub returns: &'a [f32],
    pub prev_actions: &'a [u8],
    pub timesteps: &'a [u8],
}

struct BlockCache<T> {
    h: Vec<T>,
    u: Vec<T>,
    inv1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    h1: Vec<T>,
    w: Vec<T>,
    inv2: Vec<T>,
    f1: Vec<T>,
    g: Vec<T>,
}

pub struct SeqCache<T> {
    steps: usize,
    returns: Vec<T>,
    prev_actions: Vec<u8>,
    timesteps: Vec<u8>,
    emb: Vec<T>,
    x0: Vec<T>,
    inv0: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    hl: Vec<T>,
    inv_f: Vec<T>,
    hf_act: Vec<T>,
}

pub struct Forward<T> {
    /// `n_valid × N_ACTIONS`, valid tokens in batch order.
    pub logits: Vec<T>,
    /// Flat `(window, slot)` index of each valid token.
    pub valid: Vec<usize>,
    pub targets: Vec<u8>,
    encoder: EncoderCache<T>,
    seqs: Vec<SeqCache<T>>,
    seq_offsets: Vec<usize>,
}

impl<T> Forward<T> {
    pub fn n_valid(&self) -> usize {
        self.valid.len()
    }
}

impl<T: Scalar> SeqModel<T> {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        let arch = Arch::new(cfg)?;
        let params = arch.params.init(rng);
        let buffers = arch.buffers.init(rng);
        Ok(Self { arch, params, buffers })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    /// State embeddings for `n` channel-major grids.
    pub fn encode<R: Rng>(&self, grids: &[T], n: usize, train: bool, rng: &mut R) -> Result<Vec<T>> {
        if grids.len() != n * self.arch.cfg.encoder.input_len() {
            return Err(Error::invalid(format!(
                "expected {} grid values, got {}",
                n * self.arch.cfg.encoder.input_len(),
                grids.len()
            )));
        }
        Ok(self.arch.encoder.forward(&self.params, &self.buffers, grids, n, train, rng).0)
    }

    fn check_seq(&self, emb: &[T], seq: &SeqInput) -> Result<usize> {
        let n = seq.prev_actions.len();
        let cfg = &self.arch.cfg;
        if n == 0 || n > cfg.context {
            return Err(Error::invalid(format!("sequence of {n} steps, context is {}", cfg.context)));
        }
        if seq.timesteps.len() != n || emb.len() != n * cfg.encoder.embed {
            return Err(Error::invalid("sequence arrays have mismatched lengths"));
        }
        if cfg.mode == Mode::ReturnConditioned && seq.returns.len() != n {
            return Err(Error::invalid("missing return-to-go tokens"));
        }
        if seq.timesteps.iter().any(|&t| t as usize >= cfg.max_timestep) {
            return Err(Error::invalid("timestep beyond the embedding table"));
        }
        if seq.prev_actions.iter().any(|&a| a > PAD_ACTION) {
            return Err(Error::invalid("action id beyond the embedding table"));
        }
        Ok(n)
    }

    /// Action logits at every timestep of a single sequence (`n × N_ACTIONS`).
    pub fn sequence_logits(&self, emb: &[T], seq: &SeqInput) -> Result<Vec<T>> {
        self.check_seq(emb, seq)?;
        let cache = self.seq_forward(emb, seq);
        Ok(self.head_logits(&cache))
    }

    pub fn forward<R: Rng>(&self, batch: &Batch, train: bool, rng: &mut R) -> Result<Forward<T>> {
        let cfg = &self.arch.cfg;
        let k = batch.context;
        let input_len = cfg.encoder.input_len();
        if k > cfg.context {
            return Err(Error::invalid(format!("window of {k} exceeds context {}", cfg.context)));
        }
        let rows = batch.size * k;
        if batch.mask.len() != rows
            || batch.prev_actions.len() != rows
            || batch.timesteps.len() != rows
            || batch.targets.len() != rows
            || batch.returns.len() != rows
            || batch.grids.len() != rows * input_len
        {
            return Err(Error::invalid("batch arrays have inconsistent lengths"));
        }
        let mut starts = Vec::with_capacity(batch.size);
        for b in 0..batch.size {
            let m = &batch.mask[b * k..(b + 1) * k];
            let start = m.iter().position(|&v| v).unwrap_or(k);
            if m[start..].iter().any(|&v| !v) {
                return Err(Error::invalid(format!("mask of window {b} is not a contiguous valid suffix")));
            }
            starts.push(start);
        }
        let valid: Vec<usize> = (0..batch.size)
            .flat_map(|b| (b * k + starts[b])..((b + 1) * k))
            .collect();
        if valid.iter().any(|&i| batch.targets[i] as usize >= N_ACTIONS) {
            return Err(Error::invalid("target action out of range"));
        }
        let mut grids = Vec::with_capacity(valid.len() * input_len);
        for &i in &valid {
            grids.extend(batch.grids[i * input_len..(i + 1) * input_len].iter().map(|&v| T::c(v as f64)));
        }
        let (emb, enc_cache) =
            self.arch
                .encoder
                .forward(&self.params, &self.buffers, &grids, valid.len(), train, rng);
        let e = cfg.encoder.embed;
        let mut seq_offsets = Vec::with_capacity(batch.size);
        let mut off = 0;
        for &start in &starts {
            seq_offsets.push(off);
            off += k - start;
        }
        let live: Vec<usize> = (0..batch.size).filter(|&b| starts[b] < k).collect();
        let seqs: Vec<SeqCache<T>> = live
            .par_iter()
            .map(|&b| {
                let range = (b * k + starts[b])..((b + 1) * k);
                let n = range.len();
                let seq = SeqInput {
                    returns: &batch.returns[range.clone()],
                    prev_actions: &batch.prev_actions[range.clone()],
                    timesteps: &batch.timesteps[range],
                };
                let rows = &emb[seq_offsets[b] * e..(seq_offsets[b] + n) * e];
                self.check_seq(rows, &seq).map(|_| self.seq_forward(rows, &seq))
            })
            .collect::<Result<_>>()?;
        let mut logits = Vec::with_capacity(valid.len() * N_ACTIONS);
        for s in &seqs {
            logits.extend(self.head_logits(s));
        }
        let targets = valid.iter().map(|&i| batch.targets[i]).collect();
        Ok(Forward {
            logits,
            valid,
            targets,
            encoder: enc_cache,
            seqs,
            seq_offsets: live.iter().map(|&b| seq_offsets[b]).collect(),
        })
    }

    /// Gradient of the loss w.r.t. every parameter given `d logits`.
    pub fn backward(&self, fwd: &Forward<T>, dlogits: &[T]) -> Vec<T> {
        let base = self.arch.encoder_len;
        let tail = self.arch.params.len - base;
        let e = self.arch.cfg.encoder.embed;
        let parts: Vec<(Vec<T>, Vec<T>)> = fwd
            .seqs
            .par_iter()
            .zip(fwd.seq_offsets.par_iter())
            .map(|(s, &off)| {
                let mut g = vec![T::zero(); tail];
                let dl = &dlogits[off * N_ACTIONS..(off + s.steps) * N_ACTIONS];
                let demb = self.seq_backward(s, dl, &mut g, base);
                (g, demb)
            })
            .collect();
        let mut grads = vec![T::zero(); self.arch.params.len];
        let mut d_emb = vec![T::zero(); fwd.valid.len() * e];
        for ((g, demb), &off) in parts.iter().zip(&fwd.seq_offsets) {
            for (dst, &v) in grads[base..].iter_mut().zip(g) {
                *dst += v;
            }
            d_emb[off * e..off * e + demb.len()].copy_from_slice(demb);
        }
        self.arch.encoder.backward(&self.params, &fwd.encoder, &d_emb, &mut grads);
        grads
    }

    pub fn update_running_stats(&mut self, fwd: &Forward<T>) {
        self.arch.encoder.update_running(&fwd.encoder, &mut self.buffers);
    }

    fn head_logits(&self, c: &SeqCache<T>) -> Vec<T> {
        let d = self.arch.cfg.d_model;
        let (hw, hb) = self.arch.head;
        let mut out = vec![T::zero(); c.steps * N_ACTIONS];
        linear_fwd(&c.hf_act, c.steps, d, hw.of(&self.params), hb.of(&self.params), &mut out);
        out
    }

    fn seq_forward(&self, emb: &[T], seq: &SeqInput) -> SeqCache<T> {
        let a = &self.arch;
        let cfg = &a.cfg;
        let p = &self.params;
        let d = cfg.d_model;
        let tpt = cfg.tokens_per_step();
        let n = seq.prev_actions.len();
        let l = n * tpt;
        let e = cfg.encoder.embed;
        let scale = T::c(1.0 / cfg.return_scale);
        let returns: Vec<T> = match cfg.mode {
            Mode::ReturnConditioned => seq.returns.iter().map(|&r| T::c(r as f64) * scale).collect(),
            Mode::Bc => vec![],
        };

        let mut x0 = vec![T::zero(); l * d];
        let mut state_rows = vec![T::zero(); n * d];
        linear_fwd(emb, n, e, a.state.0.of(p), a.state.1.of(p), &mut state_rows);
        let time = a.time.of(p);
        let act = a.action.of(p);
        for i in 0..n {
            let t = seq.timesteps[i] as usize;
            let te = &time[t * d..(t + 1) * d];
            let base = i * tpt;
            let mut slot = 0;
            if let Some((rw, rb)) = a.ret {
                let (rw, rb) = (rw.of(p), rb.of(p));
                let row = &mut x0[base * d..(base + 1) * d];
                for j in 0..d {
                    row[j] = returns[i] * rw[j] + rb[j] + te[j];
                }
                slot = 1;
            }
            let row = &mut x0[(base + slot) * d..(base + slot + 1) * d];
            for j in 0..d {
                row[j] = state_rows[i * d + j] + te[j];
            }
            let av = seq.prev_actions[i] as usize;
            let row = &mut x0[(base + slot + 1) * d..(base + slot + 2) * d];
            for j in 0..d {
                row[j] = act[av * d + j] + te[j];
            }
        }
        let mut h = vec![T::zero(); l * d];
        let mut inv0 = vec![T::zero(); l];
        rmsnorm_fwd(&x0, d, a.emb_norm.of(p), &mut h, &mut inv0);

        let heads = cfg.heads;
        let dh = d / heads;
        let sc = T::c(1.0 / (dh as f64).sqrt());
        let hidden = cfg.mlp_ratio * d;
        let mut blocks = Vec::with_capacity(a.blocks.len());
        for blk in &a.blocks {
            let mut u = vec![T::zero(); l * d];
            let mut inv1 = vec![T::zero(); l];
            rmsnorm_fwd(&h, d, blk.norm1.of(p), &mut u, &mut inv1);
            let mut q = vec![T::zero(); l * d];
            let mut k = vec![T::zero(); l * d];
            let mut v = vec![T::zero(); l * d];
            linear_fwd(&u, l, d, blk.q.0.of(p), blk.q.1.of(p), &mut q);
            linear_fwd(&u, l, d, blk.k.0.of(p), blk.k.1.of(p), &mut k);
            linear_fwd(&u, l, d, blk.v.0.of(p), blk.v.1.of(p), &mut v);
            let mut probs = vec![T::zero(); heads * l * l];
            let mut ctx = vec![T::zero(); l * d];
            for hd in 0..heads {
                let c0 = hd * dh;
                let pm = &mut probs[hd * l * l..(hd + 1) * l * l];
                for i in 0..l {
                    let qi = &q[i * d + c0..i * d + c0 + dh];
                    let mut mx = T::neg_infinity();
                    for j in 0..=i {
                        let kj = &k[j * d + c0..j * d + c0 + dh];
                        let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * sc;
                        pm[i * l + j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = T::zero();
                    for j in 0..=i {
                        let v = (pm[i * l + j] - mx).exp();
                        pm[i * l + j] = v;
                        z += v;
                    }
                    for j in 0..=i {
                        pm[i * l + j] /= z;
                    }
                    let out = &mut ctx[i * d + c0..i * d + c0 + dh];
                    for j in 0..=i {
                        let w = pm[i * l + j];
                        for (o, &vv) in out.iter_mut().zip(&v[j * d + c0..j * d + c0 + dh]) {
                            *o += w * vv;
                        }
                    }
                }
            }
            let mut attn = vec![T::zero(); l * d];
            linear_fwd(&ctx, l, d, blk.o.0.of(p), blk.o.1.of(p), &mut attn);
            let h1: Vec<T> = h.iter().zip(&attn).map(|(&x, &y)| x + y).collect();
            let mut w = vec![T::zero(); l * d];
            let mut inv2 = vec![T::zero(); l];
            rmsnorm_fwd(&h1, d, blk.norm2.of(p), &mut w, &mut inv2);
            let mut f1 = vec![T::zero(); l * hidden];
            linear_fwd(&w, l, d, blk.fc1.0.of(p), blk.fc1.1.of(p), &mut f1);
            let g: Vec<T> = f1.iter().map(|&x| gelu(x)).collect();
            let mut f2 = vec![T::zero(); l * d];
            linear_fwd(&g, l, hidden, blk.fc2.0.of(p), blk.fc2.1.of(p), &mut f2);
            let h2: Vec<T> = h1.iter().zip(&f2).map(|(&x, &y)| x + y).collect();
            blocks.push(BlockCache {
                h: std::mem::replace(&mut h, h2),
                u,
                inv1,
                q,
                k,
                v,
                probs,
                ctx,
                h1,
                w,
                inv2,
                f1,
                g,
            });
        }
        let mut hf = vec![T::zero(); l * d];
        let mut inv_f = vec![T::zero(); l];
        rmsnorm_fwd(&h, d, a.final_norm.of(p), &mut hf, &mut inv_f);
        let mut hf_act = Vec::with_capacity(n * d);
        for i in 0..n {
            let r = i * tpt + tpt - 1;
            hf_act.extend_from_slice(&hf[r * d..(r + 1) * d]);
        }
        SeqCache {
            steps: n,
            returns,
            prev_actions: seq.prev_actions.to_vec(),
            timesteps: seq.timesteps.to_vec(),
            emb: emb.to_vec(),
            x0,
            inv0,
            blocks,
            hl: h,
            inv_f,
            hf_act,
        }
    }

    /// Accumulates transformer gradients into `g` (offset by `base`) and
    /// returns the gradient w.r.t. the state embeddings.
    fn seq_backward(&self, c: &SeqCache<T>, dlogits: &[T], g: &mut [T], base: usize) -> Vec<T> {
        let a = &self.arch;
        let cfg = &a.cfg;
        let p = &self.params;
        let d = cfg.d_model;
        let tpt = cfg.tokens_per_step();
        let n = c.steps;
        let l = n * tpt;
        let e = cfg.encoder.embed;
        let hidden = cfg.mlp_ratio * d;
        let sh = |x: P| x.shifted(base);

        let mut dhf_act = vec![T::zero(); n * d];
        {
            let (hw, hb) = a.head;
            let (dw, db) = pair_mut(g, sh(hw), sh(hb));
            linear_bwd(&c.hf_act, n, d, hw.of(p), dlogits, dw, db, Some(&mut dhf_act));
        }
        let mut dhf = vec![T::zero(); l * d];
        for i in 0..n {
            let r = i * tpt + tpt - 1;
            dhf[r * d..(r + 1) * d].copy_from_slice(&dhf_act[i * d..(i + 1) * d]);
        }
        let mut dh = vec![T::zero(); l * d];
        rmsnorm_bwd(&c.hl, d, a.final_norm.of(p), &c.inv_f, &dhf, sh(a.final_norm).of_mut(g), &mut dh);

        let heads = cfg.heads;
        let dh_sz = d / heads;
        let sc = T::c(1.0 / (dh_sz as f64).sqrt());
        for (blk, bc) in a.blocks.iter().zip(&c.blocks).rev() {
            // MLP branch
            let mut dg = vec![T::zero(); l * hidden];
            {
                let (dw, db) = pair_mut(g, sh(blk.fc2.0), sh(blk.fc2.1));
                linear_bwd(&bc.g, l, hidden, blk.fc2.0.of(p), &dh, dw, db, Some(&mut dg));
            }
            for (x, &f) in dg.iter_mut().zip(&bc.f1) {
                *x *= gelu_grad(f);
            }
            let mut dw_in = vec![T::zero(); l * d];
            {
                let (dw, db) = pair_mut(g, sh(blk.fc1.0), sh(blk.fc1.1));
                linear_bwd(&bc.w, l, d, blk.fc1.0.of(p), &dg, dw, db, Some(&mut dw_in));
            }
            let mut dh1 = vec![T::zero(); l * d];
            rmsnorm_bwd(&bc.h1, d, blk.norm2.of(p), &bc.inv2, &dw_in, sh(blk.norm2).of_mut(g), &mut dh1);
            for (x, &y) in dh1.iter_mut().zip(&dh) {
                *x += y;
            }
            // attention branch
            let mut dctx = vec![T::zero(); l * d];
            {
                let (dw, db) = pair_mut(g, sh(blk.o.0), sh(blk.o.1));
                linear_bwd(&bc.ctx, l, d, blk.o.0.of(p), &dh1, dw, db, Some(&mut dctx));
            }
            let mut dq = vec![T::zero(); l * d];
            let mut dk = vec![T::zero(); l * d];
            let mut dv = vec![T::zero(); l * d];
            let mut dp = vec![T::zero(); l];
            for hd in 0..heads {
                let c0 = hd * dh_sz;
                let pm = &bc.probs[hd * l * l..(hd + 1) * l * l];
                for i in 0..l {
                    let dci = &dctx[i * d + c0..i * d + c0 + dh_sz];
                    let mut dot = T::zero();
                    for j in 0..=i {
                        let vj = &bc.v[j * d + c0..j * d + c0 + dh_sz];
                        dp[j] = dci.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                        dot += dp[j] * pm[i * l + j];
                        let w = pm[i * l + j];
                        for (o, &x) in dv[j * d + c0..j * d + c0 + dh_sz].iter_mut().zip(dci) {
                            *o += w * x;
                        }
                    }
                    for j in 0..=i {
                        let ds = pm[i * l + j] * (dp[j] - dot) * sc;
                        for t in 0..dh_sz {
                            dq[i * d + c0 + t] += ds * bc.k[j * d + c0 + t];
                            dk[j * d + c0 + t] += ds * bc.q[i * d + c0 + t];
                        }
                    }
                }
            }
            let mut du = vec![T::zero(); l * d];
            let mut tmp = vec![T::zero(); l * d];
            for (lin, dy) in [(blk.q, &dq), (blk.k, &dk), (blk.v, &dv)] {
                let (dw, db) = pair_mut(g, sh(lin.0), sh(lin.1));
                linear_bwd(&bc.u, l, d, lin.0.of(p), dy, dw, db, Some(&mut tmp));
                for (x, &y) in du.iter_mut().zip(&tmp) {
                    *x += y;
                }
            }
            let mut dh_prev = vec![T::zero(); l * d];
            rmsnorm_bwd(&bc.h, d, blk.norm1.of(p), &bc.inv1, &du, sh(blk.norm1).of_mut(g), &mut dh_prev);
            for (x, &y) in dh_prev.iter_mut().zip(&dh1) {
                *x += y;
            }
            dh = dh_prev;
        }
        let mut dx0 = vec![T::zero(); l * d];
        rmsnorm_bwd(&c.x0, d, a.emb_norm.of(p), &c.inv0, &dh, sh(a.emb_norm).of_mut(g), &mut dx0);

        let mut dstate = vec![T::zero(); n * d];
        {
            let dtime = sh(a.time).of_mut(g);
            for i in 0..n {
                let t = c.timesteps[i] as usize;
                for r in i * tpt..(i + 1) * tpt {
                    for j in 0..d {
                        dtime[t * d + j] += dx0[r * d + j];
                    }
                }
            }
        }
        let slot = if a.ret.is_some() { 1 } else { 0 };
        if let Some((rw, rb)) = a.ret {
            let (dw, db) = pair_mut(g, sh(rw), sh(rb));
            for i in 0..n {
                let r = i * tpt;
                for j in 0..d {
                    dw[j] += dx0[r * d + j] * c.returns[i];
                    db[j] += dx0[r * d + j];
                }
            }
        }
        {
            let dact = sh(a.action).of_mut(g);
            for i in 0..n {
                let r = i * tpt + slot + 1;
                let av = c.prev_actions[i] as usize;
                for j in 0..d {
                    dact[av * d + j] += dx0[r * d + j];
                }
            }
        }
        for i in 0..n {
            let r = i * tpt + slot;
            dstate[i * d..(i + 1) * d].copy_from_slice(&dx0[r * d..(r + 1) * d]);
        }
        let mut demb = vec![T::zero(); n * e];
        let (dw, db) = pair_mut(g, sh(a.state.0), sh(a.state.1));
        linear_bwd(&c.emb, n, e, a.state.0.of(p), &dstate, dw, db, Some(&mut demb));
        demb
    }
}

/// Disjoint mutable views of a weight and the bias stored right after it.
fn pair_mut<T>(data: &mut [T], w: P, b: P) -> (&mut [T], &mut [T]) {
    debug_assert_eq!(w.off + w.len, b.off);
    let (_, rest) = data.split_at_mut(w.off);
    let (x, rest) = rest.split_at_mut(w.len);
    (x, &mut rest[..b.len])
}
