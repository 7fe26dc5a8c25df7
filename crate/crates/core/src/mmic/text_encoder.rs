//! Learned prompt encoder: token embeddings, learned positions, and two
//! masked self-attention blocks. Trained jointly with the denoiser.

use crate::container::Container;
use crate::error::Result;
use crate::mmic::vocab::{Prompt, N_T_MAX};
use crate::nn::{
    attention, attention_backward, silu, silu_backward, AttnCache, Initializer, LayerNorm,
    LayerNormGrads, Linear, LinearGrads,
};
use crate::num::Real;
use ndarray::Array2;

#[derive(Debug, Clone)]
struct SelfAttnBlock<T: Real> {
    ln1: LayerNorm<T>,
    w_q: Array2<T>,
    w_k: Array2<T>,
    w_v: Array2<T>,
    w_o: Array2<T>,
    ln2: LayerNorm<T>,
    ffn1: Linear<T>,
    ffn2: Linear<T>,
}

#[derive(Debug, Clone)]
struct SelfAttnGrads<T: Real> {
    ln1: LayerNormGrads<T>,
    w_q: Array2<T>,
    w_k: Array2<T>,
    w_v: Array2<T>,
    w_o: Array2<T>,
    ln2: LayerNormGrads<T>,
    ffn1: LinearGrads<T>,
    ffn2: LinearGrads<T>,
}

struct SelfAttnCache<T: Real> {
    ln1: crate::nn::norm::LayerNormCache<T>,
    h1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: AttnCache<T>,
    attn_out: Array2<T>,
    x2: Array2<T>,
    ln2: crate::nn::norm::LayerNormCache<T>,
    h2: Array2<T>,
    f1: Array2<T>,
}

impl<T: Real> SelfAttnBlock<T> {
    fn new(d: usize, init: &mut Initializer) -> Self {
        SelfAttnBlock {
            ln1: LayerNorm::new(d),
            w_q: init.dense(d, d),
            w_k: init.dense(d, d),
            w_v: init.dense(d, d),
            w_o: Array2::zeros((d, d)),
            ln2: LayerNorm::new(d),
            ffn1: Linear::new(init.dense(d, 2 * d), Some(ndarray::Array1::zeros(2 * d))),
            ffn2: Linear::new(init.dense(2 * d, d), Some(ndarray::Array1::zeros(d))),
        }
    }

    fn forward(&self, x: &Array2<T>, mask: &[bool]) -> (Array2<T>, SelfAttnCache<T>) {
        let (h1, ln1_c) = self.ln1.forward(x);
        let q = h1.dot(&self.w_q);
        let k = h1.dot(&self.w_k);
        let v = h1.dot(&self.w_v);
        let (attn_out, attn_c) = attention(&q, &k, &v, Some(mask));
        let x2 = x + &attn_out.dot(&self.w_o);
        let (h2, ln2_c) = self.ln2.forward(&x2);
        let f1 = self.ffn1.forward(&h2);
        let fa = silu(&f1);
        let f2 = self.ffn2.forward(&fa);
        let y = &x2 + &f2;
        (
            y,
            SelfAttnCache { ln1: ln1_c, h1, q, k, v, attn: attn_c, attn_out, x2, ln2: ln2_c, h2, f1 },
        )
    }

    fn backward(&self, cache: &SelfAttnCache<T>, gy: &Array2<T>) -> (Array2<T>, SelfAttnGrads<T>) {
        // FFN branch
        let fa = silu(&cache.f1);
        let (g_fa, g_ffn2) = self.ffn2.backward(&fa, gy);
        let g_f1 = silu_backward(&cache.f1, &g_fa);
        let (g_h2, g_ffn1) = self.ffn1.backward(&cache.h2, &g_f1);
        let (g_x2_ln, g_ln2) = self.ln2.backward(&cache.ln2, &g_h2);
        let g_x2 = gy + &g_x2_ln;

        // attention branch
        let g_attn_out = g_x2.dot(&self.w_o.t());
        let g_w_o = cache.attn_out.t().dot(&g_x2);
        let (g_q, g_k, g_v) =
            attention_backward(&cache.q, &cache.k, &cache.v, &cache.attn, &g_attn_out);
        let g_h1 =
            g_q.dot(&self.w_q.t()) + g_k.dot(&self.w_k.t()) + g_v.dot(&self.w_v.t());
        let g_w_q = cache.h1.t().dot(&g_q);
        let g_w_k = cache.h1.t().dot(&g_k);
        let g_w_v = cache.h1.t().dot(&g_v);
        let (g_x_ln, g_ln1) = self.ln1.backward(&cache.ln1, &g_h1);
        let g_x = &g_x2 + &g_x_ln;

        (
            g_x,
            SelfAttnGrads { ln1: g_ln1, w_q: g_w_q, w_k: g_w_k, w_v: g_w_v, w_o: g_w_o, ln2: g_ln2, ffn1: g_ffn1, ffn2: g_ffn2 },
        )
    }

    fn zero_grads(&self) -> SelfAttnGrads<T> {
        SelfAttnGrads {
            ln1: self.ln1.zero_grads(),
            w_q: Array2::zeros(self.w_q.dim()),
            w_k: Array2::zeros(self.w_k.dim()),
            w_v: Array2::zeros(self.w_v.dim()),
            w_o: Array2::zeros(self.w_o.dim()),
            ln2: self.ln2.zero_grads(),
            ffn1: self.ffn1.zero_grads(),
            ffn2: self.ffn2.zero_grads(),
        }
    }

    fn zip<'a>(
        &'a mut self,
        g: &'a SelfAttnGrads<T>,
        ps: &mut Vec<&'a mut [T]>,
        gs: &mut Vec<&'a [T]>,
    ) {
        ps.push(self.ln1.gamma.as_slice_mut().unwrap());
        gs.push(g.ln1.gamma.as_slice().unwrap());
        ps.push(self.ln1.beta.as_slice_mut().unwrap());
        gs.push(g.ln1.beta.as_slice().unwrap());
        ps.push(self.w_q.as_slice_mut().unwrap());
        gs.push(g.w_q.as_slice().unwrap());
        ps.push(self.w_k.as_slice_mut().unwrap());
        gs.push(g.w_k.as_slice().unwrap());
        ps.push(self.w_v.as_slice_mut().unwrap());
        gs.push(g.w_v.as_slice().unwrap());
        ps.push(self.w_o.as_slice_mut().unwrap());
        gs.push(g.w_o.as_slice().unwrap());
        ps.push(self.ln2.gamma.as_slice_mut().unwrap());
        gs.push(g.ln2.gamma.as_slice().unwrap());
        ps.push(self.ln2.beta.as_slice_mut().unwrap());
        gs.push(g.ln2.beta.as_slice().unwrap());
        ps.push(self.ffn1.w.as_slice_mut().unwrap());
        gs.push(g.ffn1.w.as_slice().unwrap());
        ps.push(self.ffn1.b.as_mut().unwrap().as_slice_mut().unwrap());
        gs.push(g.ffn1.b.as_ref().unwrap().as_slice().unwrap());
        ps.push(self.ffn2.w.as_slice_mut().unwrap());
        gs.push(g.ffn2.w.as_slice().unwrap());
        ps.push(self.ffn2.b.as_mut().unwrap().as_slice_mut().unwrap());
        gs.push(g.ffn2.b.as_ref().unwrap().as_slice().unwrap());
    }

    fn save(&self, ckpt: &mut Container, prefix: &str) {
        ckpt.insert(&format!("{prefix}.ln1.gamma"), &self.ln1.gamma);
        ckpt.insert(&format!("{prefix}.ln1.beta"), &self.ln1.beta);
        ckpt.insert(&format!("{prefix}.w_q"), &self.w_q);
        ckpt.insert(&format!("{prefix}.w_k"), &self.w_k);
        ckpt.insert(&format!("{prefix}.w_v"), &self.w_v);
        ckpt.insert(&format!("{prefix}.w_o"), &self.w_o);
        ckpt.insert(&format!("{prefix}.ln2.gamma"), &self.ln2.gamma);
        ckpt.insert(&format!("{prefix}.ln2.beta"), &self.ln2.beta);
        ckpt.insert(&format!("{prefix}.ffn1.w"), &self.ffn1.w);
        ckpt.insert(&format!("{prefix}.ffn1.b"), self.ffn1.b.as_ref().unwrap());
        ckpt.insert(&format!("{prefix}.ffn2.w"), &self.ffn2.w);
        ckpt.insert(&format!("{prefix}.ffn2.b"), self.ffn2.b.as_ref().unwrap());
    }

    fn load(&mut self, ckpt: &Container, prefix: &str) -> Result<()> {
        self.ln1.gamma = ckpt.get1(&format!("{prefix}.ln1.gamma"))?;
        self.ln1.beta = ckpt.get1(&format!("{prefix}.ln1.beta"))?;
        self.w_q = ckpt.get2(&format!("{prefix}.w_q"))?;
        self.w_k = ckpt.get2(&format!("{prefix}.w_k"))?;
        self.w_v = ckpt.get2(&format!("{prefix}.w_v"))?;
        self.w_o = ckpt.get2(&format!("{prefix}.w_o"))?;
        self.ln2.gamma = ckpt.get1(&format!("{prefix}.ln2.gamma"))?;
        self.ln2.beta = ckpt.get1(&format!("{prefix}.ln2.beta"))?;
        self.ffn1.w = ckpt.get2(&format!("{prefix}.ffn1.w"))?;
        self.ffn1.b = Some(ckpt.get1(&format!("{prefix}.ffn1.b"))?);
        self.ffn2.w = ckpt.get2(&format!("{prefix}.ffn2.w"))?;
        self.ffn2.b = Some(ckpt.get1(&format!("{prefix}.ffn2.b"))?);
        Ok(())
    }
}

/// Prompt encoder producing the text conditioning stream.
#[derive(Debug, Clone)]
pub struct TextEncoder<T: Real> {
    pub embed: Array2<T>,
    pub pos: Array2<T>,
    block1: SelfAttnBlock<T>,
    block2: SelfAttnBlock<T>,
}

#[derive(Debug, Clone)]
pub struct TextEncoderGrads<T: Real> {
    pub embed: Array2<T>,
    pub pos: Array2<T>,
    block1: SelfAttnGrads<T>,
    block2: SelfAttnGrads<T>,
}

pub struct TextEncoderCache<T: Real> {
    c1: SelfAttnCache<T>,
    c2: SelfAttnCache<T>,
}

impl<T: Real> TextEncoder<T> {
    pub fn new(vocab_size: usize, d_c: usize, init: &mut Initializer) -> Self {
        TextEncoder {
            embed: init.dense(vocab_size, d_c),
            pos: init.dense(N_T_MAX, d_c),
            block1: SelfAttnBlock::new(d_c, init),
            block2: SelfAttnBlock::new(d_c, init),
        }
    }

    pub fn d_c(&self) -> usize {
        self.embed.ncols()
    }

    /// Encode a prompt: `(N_T_MAX × d_c)` matrix plus the active mask.
    pub fn forward(&self, prompt: &Prompt) -> (Array2<T>, Vec<bool>, TextEncoderCache<T>) {
        let d = self.d_c();
        let mut x = Array2::zeros((N_T_MAX, d));
        for (i, &tok) in prompt.tokens.iter().enumerate() {
            for j in 0..d {
                x[[i, j]] = self.embed[[tok as usize, j]] + self.pos[[i, j]];
            }
        }
        let mask = prompt.mask();
        let (x1, c1) = self.block1.forward(&x, &mask);
        let (x2, c2) = self.block2.forward(&x1, &mask);
        (x2, mask, TextEncoderCache { c1, c2 })
    }

    pub fn encode(&self, prompt: &Prompt) -> (Array2<T>, Vec<bool>) {
        let (out, mask, _) = self.forward(prompt);
        (out, mask)
    }

    pub fn backward(
        &self,
        prompt: &Prompt,
        cache: &TextEncoderCache<T>,
        g_out: &Array2<T>,
    ) -> TextEncoderGrads<T> {
        let (g_x1, g_b2) = self.block2.backward(&cache.c2, g_out);
        let (g_x, g_b1) = self.block1.backward(&cache.c1, &g_x1);
        let mut g_embed = Array2::zeros(self.embed.dim());
        for (i, &tok) in prompt.tokens.iter().enumerate() {
            for j in 0..self.d_c() {
                g_embed[[tok as usize, j]] += g_x[[i, j]];
            }
        }
        TextEncoderGrads { embed: g_embed, pos: g_x, block1: g_b1, block2: g_b2 }
    }

    pub fn zero_grads(&self) -> TextEncoderGrads<T> {
        TextEncoderGrads {
            embed: Array2::zeros(self.embed.dim()),
            pos: Array2::zeros(self.pos.dim()),
            block1: self.block1.zero_grads(),
            block2: self.block2.zero_grads(),
        }
    }

    pub fn zip_params<'a>(
        &'a mut self,
        g: &'a TextEncoderGrads<T>,
    ) -> (Vec<&'a mut [T]>, Vec<&'a [T]>) {
        let mut ps: Vec<&'a mut [T]> = Vec::new();
        let mut gs: Vec<&'a [T]> = Vec::new();
        ps.push(self.embed.as_slice_mut().unwrap());
        gs.push(g.embed.as_slice().unwrap());
        ps.push(self.pos.as_slice_mut().unwrap());
        gs.push(g.pos.as_slice().unwrap());
        self.block1.zip(&g.block1, &mut ps, &mut gs);
        self.block2.zip(&g.block2, &mut ps, &mut gs);
        (ps, gs)
    }

    pub fn save(&self, ckpt: &mut Container) {
        ckpt.insert("text.embed", &self.embed);
        ckpt.insert("text.pos", &self.pos);
        self.block1.save(ckpt, "text.block1");
        self.block2.save(ckpt, "text.block2");
    }

    pub fn load(&mut self, ckpt: &Container) -> Result<()> {
        self.embed = ckpt.get2("text.embed")?;
        self.pos = ckpt.get2("text.pos")?;
        self.block1.load(ckpt, "text.block1")?;
        self.block2.load(ckpt, "text.block2")?;
        Ok(())
    }
}

impl<T: Real> TextEncoderGrads<T> {
    pub fn add(&mut self, other: &TextEncoderGrads<T>) {
        self.embed += &other.embed;
        self.pos += &other.pos;
        for (a, b) in [(&mut self.block1, &other.block1), (&mut self.block2, &other.block2)] {
            a.ln1.add(&b.ln1);
            a.w_q += &b.w_q;
            a.w_k += &b.w_k;
            a.w_v += &b.w_v;
            a.w_o += &b.w_o;
            a.ln2.add(&b.ln2);
            a.ffn1.add(&b.ffn1);
            a.ffn2.add(&b.ffn2);
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.embed.mapv_inplace(|v| v * factor);
        self.pos.mapv_inplace(|v| v * factor);
        for b in [&mut self.block1, &mut self.block2] {
            b.ln1.gamma.mapv_inplace(|v| v * factor);
            b.ln1.beta.mapv_inplace(|v| v * factor);
            b.w_q.mapv_inplace(|v| v * factor);
            b.w_k.mapv_inplace(|v| v * factor);
            b.w_v.mapv_inplace(|v| v * factor);
            b.w_o.mapv_inplace(|v| v * factor);
            b.ln2.gamma.mapv_inplace(|v| v * factor);
            b.ln2.beta.mapv_inplace(|v| v * factor);
            b.ffn1.w.mapv_inplace(|v| v * factor);
            if let Some(bb) = b.ffn1.b.as_mut() {
                bb.mapv_inplace(|v| v * factor);
            }
            b.ffn2.w.mapv_inplace(|v| v * factor);
            if let Some(bb) = b.ffn2.b.as_mut() {
                bb.mapv_inplace(|v| v * factor);
            }
        }
    }
}
