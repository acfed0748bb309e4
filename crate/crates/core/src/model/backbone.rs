use crate::autodiff::{Parameters, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

use super::batch::TokenBatch;
use super::config::TransformerConfig;
use super::lora::{LoraSet, LoraTarget, Proj};

const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone)]
pub struct Layer {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Layer {
    fn new(cfg: &TransformerConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ffn();
        let resid_std = INIT_STD / (2.0 * cfg.n_layers as f32).sqrt();
        let w = |shape: &[usize], std: f32, rng: &mut Rng| Tensor::randn(shape, std, rng).with_grad();
        let z = |n: usize| Tensor::zeros(&[n]).with_grad();
        let one = |n: usize| Tensor::filled(&[n], 1.0).with_grad();
        Layer {
            ln1_gain: one(d),
            ln1_bias: z(d),
            wq: w(&[d, d], INIT_STD, rng),
            bq: z(d),
            wk: w(&[d, d], INIT_STD, rng),
            bk: z(d),
            wv: w(&[d, d], INIT_STD, rng),
            bv: z(d),
            wo: w(&[d, d], resid_std, rng),
            bo: z(d),
            ln2_gain: one(d),
            ln2_bias: z(d),
            w1: w(&[d, f], INIT_STD, rng),
            b1: z(f),
            w2: w(&[f, d], resid_std, rng),
            b2: z(d),
        }
    }

    pub fn proj(&self, p: Proj) -> (&Tensor, &Tensor) {
        match p {
            Proj::Q => (&self.wq, &self.bq),
            Proj::K => (&self.wk, &self.bk),
            Proj::V => (&self.wv, &self.bv),
            Proj::O => (&self.wo, &self.bo),
        }
    }

    fn proj_weight_mut(&mut self, p: Proj) -> &mut Tensor {
        match p {
            Proj::Q => &mut self.wq,
            Proj::K => &mut self.wk,
            Proj::V => &mut self.wv,
            Proj::O => &mut self.wo,
        }
    }
}

/// Pre-norm decoder-only transformer trunk (embeddings, blocks, final norm).
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: TransformerConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<Layer>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
}

impl Backbone {
    pub fn new(config: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let tok_emb = Tensor::randn(&[config.vocab_size, d], INIT_STD, rng).with_grad();
        let pos_emb = Tensor::randn(&[config.max_seq_len, d], INIT_STD, rng).with_grad();
        let layers = (0..config.n_layers).map(|_| Layer::new(&config, rng)).collect();
        Ok(Backbone {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: Tensor::filled(&[d], 1.0).with_grad(),
            lnf_bias: Tensor::zeros(&[d]).with_grad(),
        })
    }

    fn project(&self, tape: &mut Tape, x: Var, layer: usize, p: Proj, adapters: Option<&LoraSet>) -> Result<Var> {
        let (w, b) = self.layers[layer].proj(p);
        let wv = tape.param(w);
        let bv = tape.param(b);
        let y = tape.matmul(x, wv)?;
        let mut y = tape.add_row(y, bv)?;
        if let Some(ad) = adapters.and_then(|s| s.get(LoraTarget { layer, proj: p })) {
            ad.check_against(w)?;
            let a1 = tape.param(&ad.a1);
            let a2 = tape.param(&ad.a2);
            let low = tape.matmul(x, a1)?;
            let delta = tape.matmul(low, a2)?;
            let delta = tape.scale(delta, ad.scaling());
            y = tape.add(y, delta)?;
        }
        Ok(y)
    }

    /// Final-layer hidden states, one row per (sequence, position):
    /// shape `(batch·seq)×d_model`.
    pub fn forward(&self, tape: &mut Tape, batch: &TokenBatch, adapters: Option<&LoraSet>) -> Result<Var> {
        let tok = tape.param(&self.tok_emb);
        let pos = tape.param(&self.pos_emb);
        let te = tape.embedding(tok, batch.ids())?;
        let pe = tape.embedding(pos, &batch.positions())?;
        let mut x = tape.add(te, pe)?;
        for (li, layer) in self.layers.iter().enumerate() {
            let g1 = tape.param(&layer.ln1_gain);
            let b1 = tape.param(&layer.ln1_bias);
            let h = tape.layernorm(x, g1, b1)?;
            let q = self.project(tape, h, li, Proj::Q, adapters)?;
            let k = self.project(tape, h, li, Proj::K, adapters)?;
            let v = self.project(tape, h, li, Proj::V, adapters)?;
            let a = tape.causal_attention(q, k, v, batch.batch(), batch.seq(), self.config.n_heads)?;
            let o = self.project(tape, a, li, Proj::O, adapters)?;
            x = tape.add(x, o)?;

            let g2 = tape.param(&layer.ln2_gain);
            let b2 = tape.param(&layer.ln2_bias);
            let h = tape.layernorm(x, g2, b2)?;
            let w1 = tape.param(&layer.w1);
            let bb1 = tape.param(&layer.b1);
            let w2 = tape.param(&layer.w2);
            let bb2 = tape.param(&layer.b2);
            let f = tape.matmul(h, w1)?;
            let f = tape.add_row(f, bb1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, bb2)?;
            x = tape.add(x, f)?;
        }
        let gf = tape.param(&self.lnf_gain);
        let bf = tape.param(&self.lnf_bias);
        tape.layernorm(x, gf, bf)
    }

    /// Copy of this backbone with every adapter folded into its weight:
    /// `W' = W + (α/r)·A1·A2`.
    pub fn merged(&self, adapters: &LoraSet) -> Result<Backbone> {
        let mut out = self.clone();
        for ad in &adapters.adapters {
            let w = out.layers[ad.target.layer].proj_weight_mut(ad.target.proj);
            ad.check_against(w)?;
            let delta = ad.delta();
            w.data_mut().iter_mut().zip(&delta).for_each(|(x, d)| *x += d);
        }
        Ok(out)
    }
}

impl Parameters for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("backbone.tok_emb", &self.tok_emb);
        f("backbone.pos_emb", &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("backbone.layers.{i}");
            f(&format!("{p}.ln1.gain"), &l.ln1_gain);
            f(&format!("{p}.ln1.bias"), &l.ln1_bias);
            f(&format!("{p}.wq"), &l.wq);
            f(&format!("{p}.bq"), &l.bq);
            f(&format!("{p}.wk"), &l.wk);
            f(&format!("{p}.bk"), &l.bk);
            f(&format!("{p}.wv"), &l.wv);
            f(&format!("{p}.bv"), &l.bv);
            f(&format!("{p}.wo"), &l.wo);
            f(&format!("{p}.bo"), &l.bo);
            f(&format!("{p}.ln2.gain"), &l.ln2_gain);
            f(&format!("{p}.ln2.bias"), &l.ln2_bias);
            f(&format!("{p}.w1"), &l.w1);
            f(&format!("{p}.b1"), &l.b1);
            f(&format!("{p}.w2"), &l.w2);
            f(&format!("{p}.b2"), &l.b2);
        }
        f("backbone.ln_f.gain", &self.lnf_gain);
        f("backbone.ln_f.bias", &self.lnf_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("backbone.tok_emb", &mut self.tok_emb);
        f("backbone.pos_emb", &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("backbone.layers.{i}");
            f(&format!("{p}.ln1.gain"), &mut l.ln1_gain);
            f(&format!("{p}.ln1.bias"), &mut l.ln1_bias);
            f(&format!("{p}.wq"), &mut l.wq);
            f(&format!("{p}.bq"), &mut l.bq);
            f(&format!("{p}.wk"), &mut l.wk);
            f(&format!("{p}.bk"), &mut l.bk);
            f(&format!("{p}.wv"), &mut l.wv);
            f(&format!("{p}.bv"), &mut l.bv);
            f(&format!("{p}.wo"), &mut l.wo);
            f(&format!("{p}.bo"), &mut l.bo);
            f(&format!("{p}.ln2.gain"), &mut l.ln2_gain);
            f(&format!("{p}.ln2.bias"), &mut l.ln2_bias);
            f(&format!("{p}.w1"), &mut l.w1);
            f(&format!("{p}.b1"), &mut l.b1);
            f(&format!("{p}.w2"), &mut l.w2);
            f(&format!("{p}.b2"), &mut l.b2);
        }
        f("backbone.ln_f.gain", &mut self.lnf_gain);
        f("backbone.ln_f.bias", &mut self.lnf_bias);
    }
}
