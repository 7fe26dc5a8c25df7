//! UNet-style conditional denoiser.
//!
//! Three resolution levels with residual blocks, timestep conditioning added
//! per channel, and one decoupled cross-attention block at the bottom
//! resolution. The identity-stream key/value projections are not part of this
//! model: they are owned by the identity projector and passed in per call, so
//! the denoiser checkpoint stays frozen while the projector trains.

use crate::backbone::condition::{
    decoupled_attention, decoupled_attention_backward, BundleGrads, ConditionBundle,
    DecoupledCache, DecoupledGrads,
};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{
    silu, silu_backward, AvgPool2, Conv2d, Conv2dGrads, Initializer, LayerNorm, LayerNormGrads,
    Linear, LinearGrads, StreamKv, StreamKvGrads, Upsample2,
};
use crate::num::{c, Real};
use ndarray::{s, Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

/// Denoiser hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub channels: [usize; 3],
    pub d_cond: usize,
    pub time_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            input_size: 32,
            channels: [16, 32, 64],
            d_cond: 64,
            time_dim: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size % 4 != 0 || self.input_size < 8 {
            return Err(Error::config("input size must be a multiple of 4 and >= 8"));
        }
        if self.time_dim % 2 != 0 || self.time_dim < 4 {
            return Err(Error::config("time dim must be even and >= 4"));
        }
        Ok(())
    }
}

fn chw_to_rows<T: Real>(x: &Array3<T>) -> Array2<T> {
    let (ch, h, w) = x.dim();
    let mut rows = Array2::zeros((h * w, ch));
    for ci in 0..ch {
        for y in 0..h {
            for xx in 0..w {
                rows[[y * w + xx, ci]] = x[[ci, y, xx]];
            }
        }
    }
    rows
}

fn rows_to_chw<T: Real>(rows: &Array2<T>, h: usize, w: usize) -> Array3<T> {
    let ch = rows.ncols();
    let mut x = Array3::zeros((ch, h, w));
    for ci in 0..ch {
        for y in 0..h {
            for xx in 0..w {
                x[[ci, y, xx]] = rows[[y * w + xx, ci]];
            }
        }
    }
    x
}

/// Sinusoidal timestep features, shape `(1, dim)`.
pub fn timestep_embedding<T: Real>(t: usize, dim: usize) -> Array2<T> {
    let half = dim / 2;
    let mut emb = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        emb[[0, 2 * i]] = c::<T>(angle.sin());
        emb[[0, 2 * i + 1]] = c::<T>(angle.cos());
    }
    emb
}

// ---------------------------------------------------------------------------
// residual block

#[derive(Debug, Clone)]
struct ResBlock<T: Real> {
    ln1: LayerNorm<T>,
    conv1: Conv2d<T>,
    tproj: Linear<T>,
    ln2: LayerNorm<T>,
    conv2: Conv2d<T>,
    skip: Option<Conv2d<T>>,
}

#[derive(Debug, Clone)]
struct ResBlockGrads<T: Real> {
    ln1: LayerNormGrads<T>,
    conv1: Conv2dGrads<T>,
    tproj: LinearGrads<T>,
    ln2: LayerNormGrads<T>,
    conv2: Conv2dGrads<T>,
    skip: Option<Conv2dGrads<T>>,
}

struct ResBlockCache<T: Real> {
    ln1: crate::nn::norm::LayerNormCache<T>,
    n1: Array2<T>,
    conv1: crate::nn::conv::Conv2dCache<T>,
    ln2: crate::nn::norm::LayerNormCache<T>,
    n2: Array2<T>,
    conv2: crate::nn::conv::Conv2dCache<T>,
    skip: Option<crate::nn::conv::Conv2dCache<T>>,
    h: usize,
    w: usize,
}

impl<T: Real> ResBlockGrads<T> {
    fn add(&mut self, o: &Self) {
        self.ln1.add(&o.ln1);
        self.conv1.add(&o.conv1);
        self.tproj.add(&o.tproj);
        self.ln2.add(&o.ln2);
        self.conv2.add(&o.conv2);
        if let (Some(a), Some(b)) = (self.skip.as_mut(), o.skip.as_ref()) {
            a.add(b);
        }
    }

    fn scale(&mut self, f: T) {
        self.ln1.gamma.mapv_inplace(|v| v * f);
        self.ln1.beta.mapv_inplace(|v| v * f);
        self.conv1.w.mapv_inplace(|v| v * f);
        self.conv1.b.mapv_inplace(|v| v * f);
        self.tproj.w.mapv_inplace(|v| v * f);
        if let Some(b) = self.tproj.b.as_mut() {
            b.mapv_inplace(|v| v * f);
        }
        self.ln2.gamma.mapv_inplace(|v| v * f);
        self.ln2.beta.mapv_inplace(|v| v * f);
        self.conv2.w.mapv_inplace(|v| v * f);
        self.conv2.b.mapv_inplace(|v| v * f);
        if let Some(s) = self.skip.as_mut() {
            s.w.mapv_inplace(|v| v * f);
            s.b.mapv_inplace(|v| v * f);
        }
    }
}

impl<T: Real> ResBlock<T> {
    fn new(cin: usize, cout: usize, time_dim: usize, init: &mut Initializer) -> Self {
        ResBlock {
            ln1: LayerNorm::new(cin),
            conv1: Conv2d::new(init.conv(cout, cin, 3, 3), Array1::zeros(cout)),
            tproj: Linear::new(init.dense(time_dim, cout), Some(Array1::zeros(cout))),
            ln2: LayerNorm::new(cout),
            conv2: Conv2d::new(init.conv(cout, cout, 3, 3), Array1::zeros(cout)),
            skip: (cin != cout)
                .then(|| Conv2d::new(init.conv(cout, cin, 1, 1), Array1::zeros(cout))),
        }
    }

    fn forward(&self, x: &Array3<T>, silu_temb: &Array2<T>) -> (Array3<T>, ResBlockCache<T>) {
        let (_, h, w) = x.dim();
        let rows = chw_to_rows(x);
        let (n1, ln1_cache) = self.ln1.forward(&rows);
        let a1 = silu(&n1);
        let (mut hmap, conv1_cache) = self.conv1.forward(&rows_to_chw(&a1, h, w));
        let tp = self.tproj.forward(silu_temb);
        for ci in 0..hmap.dim().0 {
            let bias = tp[[0, ci]];
            hmap.slice_mut(s![ci, .., ..]).mapv_inplace(|v| v + bias);
        }
        let rows2 = chw_to_rows(&hmap);
        let (n2, ln2_cache) = self.ln2.forward(&rows2);
        let a2 = silu(&n2);
        let (h2, conv2_cache) = self.conv2.forward(&rows_to_chw(&a2, h, w));

        let (skip_out, skip_cache) = match &self.skip {
            Some(conv) => {
                let (y, cache) = conv.forward(x);
                (y, Some(cache))
            }
            None => (x.clone(), None),
        };
        let y = &skip_out + &h2;
        (
            y,
            ResBlockCache { ln1: ln1_cache, n1, conv1: conv1_cache, ln2: ln2_cache, n2, conv2: conv2_cache, skip: skip_cache, h, w },
        )
    }

    /// Returns `(g_x, g_silu_temb, grads)`.
    fn backward(
        &self,
        cache: &ResBlockCache<T>,
        silu_temb: &Array2<T>,
        gy: &Array3<T>,
    ) -> (Array3<T>, Array2<T>, ResBlockGrads<T>) {
        let (h, w) = (cache.h, cache.w);
        let (g_a2_chw, g_conv2) = self.conv2.backward(&cache.conv2, gy);
        let g_n2 = silu_backward(&cache.n2, &chw_to_rows(&g_a2_chw));
        let (g_rows2, g_ln2) = self.ln2.backward(&cache.ln2, &g_n2);
        let g_h = rows_to_chw(&g_rows2, h, w);

        let cout = g_h.dim().0;
        let mut g_tp = Array2::zeros((1, cout));
        for ci in 0..cout {
            g_tp[[0, ci]] = g_h.slice(s![ci, .., ..]).sum();
        }
        let (g_silu_temb, g_tproj) = self.tproj.backward(silu_temb, &g_tp);

        let (g_a1_chw, g_conv1) = self.conv1.backward(&cache.conv1, &g_h);
        let g_n1 = silu_backward(&cache.n1, &chw_to_rows(&g_a1_chw));
        let (g_rows, g_ln1) = self.ln1.backward(&cache.ln1, &g_n1);
        let mut g_x = rows_to_chw(&g_rows, h, w);

        let g_skip = match (&self.skip, &cache.skip) {
            (Some(conv), Some(sc)) => {
                let (g_x_skip, g_skip_conv) = conv.backward(sc, gy);
                g_x += &g_x_skip;
                Some(g_skip_conv)
            }
            _ => {
                g_x += gy;
                None
            }
        };

        (
            g_x,
            g_silu_temb,
            ResBlockGrads { ln1: g_ln1, conv1: g_conv1, tproj: g_tproj, ln2: g_ln2, conv2: g_conv2, skip: g_skip },
        )
    }

    fn zero_grads(&self) -> ResBlockGrads<T> {
        ResBlockGrads {
            ln1: self.ln1.zero_grads(),
            conv1: self.conv1.zero_grads(),
            tproj: self.tproj.zero_grads(),
            ln2: self.ln2.zero_grads(),
            conv2: self.conv2.zero_grads(),
            skip: self.skip.as_ref().map(|c| c.zero_grads()),
        }
    }

    fn zip<'a>(
        &'a mut self,
        g: &'a ResBlockGrads<T>,
        ps: &mut Vec<&'a mut [T]>,
        gs: &mut Vec<&'a [T]>,
    ) {
        ps.push(self.ln1.gamma.as_slice_mut().unwrap());
        gs.push(g.ln1.gamma.as_slice().unwrap());
        ps.push(self.ln1.beta.as_slice_mut().unwrap());
        gs.push(g.ln1.beta.as_slice().unwrap());
        ps.push(self.conv1.w.as_slice_mut().unwrap());
        gs.push(g.conv1.w.as_slice().unwrap());
        ps.push(self.conv1.b.as_slice_mut().unwrap());
        gs.push(g.conv1.b.as_slice().unwrap());
        ps.push(self.tproj.w.as_slice_mut().unwrap());
        gs.push(g.tproj.w.as_slice().unwrap());
        ps.push(self.tproj.b.as_mut().unwrap().as_slice_mut().unwrap());
        gs.push(g.tproj.b.as_ref().unwrap().as_slice().unwrap());
        ps.push(self.ln2.gamma.as_slice_mut().unwrap());
        gs.push(g.ln2.gamma.as_slice().unwrap());
        ps.push(self.ln2.beta.as_slice_mut().unwrap());
        gs.push(g.ln2.beta.as_slice().unwrap());
        ps.push(self.conv2.w.as_slice_mut().unwrap());
        gs.push(g.conv2.w.as_slice().unwrap());
        ps.push(self.conv2.b.as_slice_mut().unwrap());
        gs.push(g.conv2.b.as_slice().unwrap());
        if let (Some(skip), Some(gskip)) = (self.skip.as_mut(), g.skip.as_ref()) {
            ps.push(skip.w.as_slice_mut().unwrap());
            gs.push(gskip.w.as_slice().unwrap());
            ps.push(skip.b.as_slice_mut().unwrap());
            gs.push(gskip.b.as_slice().unwrap());
        }
    }

    fn save(&self, ckpt: &mut Container, prefix: &str) {
        ckpt.insert(&format!("{prefix}.ln1.gamma"), &self.ln1.gamma);
        ckpt.insert(&format!("{prefix}.ln1.beta"), &self.ln1.beta);
        ckpt.insert(&format!("{prefix}.conv1.w"), &self.conv1.w);
        ckpt.insert(&format!("{prefix}.conv1.b"), &self.conv1.b);
        ckpt.insert(&format!("{prefix}.tproj.w"), &self.tproj.w);
        ckpt.insert(&format!("{prefix}.tproj.b"), self.tproj.b.as_ref().unwrap());
        ckpt.insert(&format!("{prefix}.ln2.gamma"), &self.ln2.gamma);
        ckpt.insert(&format!("{prefix}.ln2.beta"), &self.ln2.beta);
        ckpt.insert(&format!("{prefix}.conv2.w"), &self.conv2.w);
        ckpt.insert(&format!("{prefix}.conv2.b"), &self.conv2.b);
        if let Some(skip) = &self.skip {
            ckpt.insert(&format!("{prefix}.skip.w"), &skip.w);
            ckpt.insert(&format!("{prefix}.skip.b"), &skip.b);
        }
    }

    fn load(&mut self, ckpt: &Container, prefix: &str) -> Result<()> {
        self.ln1.gamma = ckpt.get1(&format!("{prefix}.ln1.gamma"))?;
        self.ln1.beta = ckpt.get1(&format!("{prefix}.ln1.beta"))?;
        self.conv1.w = ckpt.get2(&format!("{prefix}.conv1.w"))?;
        self.conv1.b = ckpt.get1(&format!("{prefix}.conv1.b"))?;
        self.tproj.w = ckpt.get2(&format!("{prefix}.tproj.w"))?;
        self.tproj.b = Some(ckpt.get1(&format!("{prefix}.tproj.b"))?);
        self.ln2.gamma = ckpt.get1(&format!("{prefix}.ln2.gamma"))?;
        self.ln2.beta = ckpt.get1(&format!("{prefix}.ln2.beta"))?;
        self.conv2.w = ckpt.get2(&format!("{prefix}.conv2.w"))?;
        self.conv2.b = ckpt.get1(&format!("{prefix}.conv2.b"))?;
        if let Some(skip) = self.skip.as_mut() {
            skip.w = ckpt.get2(&format!("{prefix}.skip.w"))?;
            skip.b = ckpt.get1(&format!("{prefix}.skip.b"))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// cross-attention block

#[derive(Debug, Clone)]
struct CrossAttnBlock<T: Real> {
    ln: LayerNorm<T>,
    w_q: Array2<T>,
    text_kv: StreamKv<T>,
    image_kv: StreamKv<T>,
    w_o: Array2<T>,
}

#[derive(Debug, Clone)]
struct CrossAttnGrads<T: Real> {
    ln: LayerNormGrads<T>,
    attn: DecoupledGrads<T>,
    w_o: Array2<T>,
}

struct CrossAttnCache<T: Real> {
    ln: crate::nn::norm::LayerNormCache<T>,
    t_norm: Array2<T>,
    attn_out: Array2<T>,
    dec: DecoupledCache<T>,
    h: usize,
    w: usize,
}

impl<T: Real> CrossAttnGrads<T> {
    fn add(&mut self, o: &Self) {
        self.ln.add(&o.ln);
        self.attn.w_q += &o.attn.w_q;
        self.attn.text.add(&o.attn.text);
        self.attn.image.add(&o.attn.image);
        self.w_o += &o.w_o;
    }

    fn scale(&mut self, f: T) {
        self.ln.gamma.mapv_inplace(|v| v * f);
        self.ln.beta.mapv_inplace(|v| v * f);
        self.attn.w_q.mapv_inplace(|v| v * f);
        self.attn.text.w_k.mapv_inplace(|v| v * f);
        self.attn.text.w_v.mapv_inplace(|v| v * f);
        self.attn.image.w_k.mapv_inplace(|v| v * f);
        self.attn.image.w_v.mapv_inplace(|v| v * f);
        self.w_o.mapv_inplace(|v| v * f);
    }
}

impl<T: Real> CrossAttnBlock<T> {
    fn new(ch: usize, d_cond: usize, init: &mut Initializer) -> Self {
        CrossAttnBlock {
            ln: LayerNorm::new(ch),
            w_q: init.dense(ch, ch),
            text_kv: StreamKv { w_k: init.dense(d_cond, ch), w_v: init.dense(d_cond, ch) },
            image_kv: StreamKv { w_k: init.dense(d_cond, ch), w_v: init.dense(d_cond, ch) },
            w_o: Array2::zeros((ch, ch)),
        }
    }

    fn forward(
        &self,
        x: &Array3<T>,
        bundle: &ConditionBundle<T>,
        id_kv: Option<&StreamKv<T>>,
    ) -> Result<(Array3<T>, CrossAttnCache<T>)> {
        let (_, h, w) = x.dim();
        let tokens = chw_to_rows(x);
        let (t_norm, ln_cache) = self.ln.forward(&tokens);
        let (attn_out, dec) = decoupled_attention(
            &t_norm,
            bundle,
            &self.w_q,
            &self.text_kv,
            &self.image_kv,
            id_kv,
        )?;
        let y_tokens = &tokens + &attn_out.dot(&self.w_o);
        Ok((
            rows_to_chw(&y_tokens, h, w),
            CrossAttnCache { ln: ln_cache, t_norm, attn_out, dec, h, w },
        ))
    }

    /// Returns `(g_x, grads, bundle grads, identity-projection grads)`.
    fn backward(
        &self,
        cache: &CrossAttnCache<T>,
        bundle: &ConditionBundle<T>,
        id_kv: Option<&StreamKv<T>>,
        gy: &Array3<T>,
    ) -> (Array3<T>, CrossAttnGrads<T>, BundleGrads<T>, Option<StreamKvGrads<T>>) {
        let g_tokens_out = chw_to_rows(gy);
        let g_attn_out = g_tokens_out.dot(&self.w_o.t());
        let g_w_o = cache.attn_out.t().dot(&g_tokens_out);
        let (g_t_norm, mut dec_grads, bundle_grads) = decoupled_attention_backward(
            &cache.t_norm,
            bundle,
            &self.w_q,
            &self.text_kv,
            &self.image_kv,
            id_kv,
            &cache.dec,
            &g_attn_out,
        );
        let (g_tokens_ln, g_ln) = self.ln.backward(&cache.ln, &g_t_norm);
        let g_tokens = &g_tokens_out + &g_tokens_ln;
        let g_id_kv = dec_grads.identity.take();
        (
            rows_to_chw(&g_tokens, cache.h, cache.w),
            CrossAttnGrads { ln: g_ln, attn: dec_grads, w_o: g_w_o },
            bundle_grads,
            g_id_kv,
        )
    }

    fn zero_grads(&self) -> CrossAttnGrads<T> {
        CrossAttnGrads {
            ln: self.ln.zero_grads(),
            attn: DecoupledGrads {
                w_q: Array2::zeros(self.w_q.dim()),
                text: self.text_kv.zero_grads(),
                image: self.image_kv.zero_grads(),
                identity: None,
            },
            w_o: Array2::zeros(self.w_o.dim()),
        }
    }

    fn zip<'a>(
        &'a mut self,
        g: &'a CrossAttnGrads<T>,
        ps: &mut Vec<&'a mut [T]>,
        gs: &mut Vec<&'a [T]>,
    ) {
        ps.push(self.ln.gamma.as_slice_mut().unwrap());
        gs.push(g.ln.gamma.as_slice().unwrap());
        ps.push(self.ln.beta.as_slice_mut().unwrap());
        gs.push(g.ln.beta.as_slice().unwrap());
        ps.push(self.w_q.as_slice_mut().unwrap());
        gs.push(g.attn.w_q.as_slice().unwrap());
        ps.push(self.text_kv.w_k.as_slice_mut().unwrap());
        gs.push(g.attn.text.w_k.as_slice().unwrap());
        ps.push(self.text_kv.w_v.as_slice_mut().unwrap());
        gs.push(g.attn.text.w_v.as_slice().unwrap());
        ps.push(self.image_kv.w_k.as_slice_mut().unwrap());
        gs.push(g.attn.image.w_k.as_slice().unwrap());
        ps.push(self.image_kv.w_v.as_slice_mut().unwrap());
        gs.push(g.attn.image.w_v.as_slice().unwrap());
        ps.push(self.w_o.as_slice_mut().unwrap());
        gs.push(g.w_o.as_slice().unwrap());
    }

    fn save(&self, ckpt: &mut Container, prefix: &str) {
        ckpt.insert(&format!("{prefix}.ln.gamma"), &self.ln.gamma);
        ckpt.insert(&format!("{prefix}.ln.beta"), &self.ln.beta);
        ckpt.insert(&format!("{prefix}.w_q"), &self.w_q);
        ckpt.insert(&format!("{prefix}.text.w_k"), &self.text_kv.w_k);
        ckpt.insert(&format!("{prefix}.text.w_v"), &self.text_kv.w_v);
        ckpt.insert(&format!("{prefix}.image.w_k"), &self.image_kv.w_k);
        ckpt.insert(&format!("{prefix}.image.w_v"), &self.image_kv.w_v);
        ckpt.insert(&format!("{prefix}.w_o"), &self.w_o);
    }

    fn load(&mut self, ckpt: &Container, prefix: &str) -> Result<()> {
        self.ln.gamma = ckpt.get1(&format!("{prefix}.ln.gamma"))?;
        self.ln.beta = ckpt.get1(&format!("{prefix}.ln.beta"))?;
        self.w_q = ckpt.get2(&format!("{prefix}.w_q"))?;
        self.text_kv.w_k = ckpt.get2(&format!("{prefix}.text.w_k"))?;
        self.text_kv.w_v = ckpt.get2(&format!("{prefix}.text.w_v"))?;
        self.image_kv.w_k = ckpt.get2(&format!("{prefix}.image.w_k"))?;
        self.image_kv.w_v = ckpt.get2(&format!("{prefix}.image.w_v"))?;
        self.w_o = ckpt.get2(&format!("{prefix}.w_o"))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// full denoiser

#[derive(Debug, Clone)]
pub struct Denoiser<T: Real> {
    pub cfg: BackboneConfig,
    temb_l1: Linear<T>,
    temb_l2: Linear<T>,
    conv_in: Conv2d<T>,
    down0: ResBlock<T>,
    down1: ResBlock<T>,
    down2: ResBlock<T>,
    attn: CrossAttnBlock<T>,
    mid: ResBlock<T>,
    up1: ResBlock<T>,
    up0: ResBlock<T>,
    out_ln: LayerNorm<T>,
    conv_out: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct DenoiserGrads<T: Real> {
    temb_l1: LinearGrads<T>,
    temb_l2: LinearGrads<T>,
    conv_in: Conv2dGrads<T>,
    down0: ResBlockGrads<T>,
    down1: ResBlockGrads<T>,
    down2: ResBlockGrads<T>,
    attn: CrossAttnGrads<T>,
    mid: ResBlockGrads<T>,
    up1: ResBlockGrads<T>,
    up0: ResBlockGrads<T>,
    out_ln: LayerNormGrads<T>,
    conv_out: Conv2dGrads<T>,
}

pub struct DenoiserCache<T: Real> {
    temb0: Array2<T>,
    e1: Array2<T>,
    s1: Array2<T>,
    e2: Array2<T>,
    silu_temb: Array2<T>,
    conv_in: crate::nn::conv::Conv2dCache<T>,
    down0: ResBlockCache<T>,
    down1: ResBlockCache<T>,
    down2: ResBlockCache<T>,
    attn: CrossAttnCache<T>,
    mid: ResBlockCache<T>,
    up1: ResBlockCache<T>,
    up0: ResBlockCache<T>,
    out_ln: crate::nn::norm::LayerNormCache<T>,
    n_out: Array2<T>,
    conv_out: crate::nn::conv::Conv2dCache<T>,
}

fn concat_channels<T: Real>(a: &Array3<T>, b: &Array3<T>) -> Array3<T> {
    let (ca, h, w) = a.dim();
    let (cb, _, _) = b.dim();
    let mut out = Array3::zeros((ca + cb, h, w));
    out.slice_mut(s![0..ca, .., ..]).assign(a);
    out.slice_mut(s![ca.., .., ..]).assign(b);
    out
}

impl<T: Real> Denoiser<T> {
    pub fn new(cfg: BackboneConfig, init: &mut Initializer) -> Result<Self> {
        cfg.validate()?;
        let [c0, c1, c2] = cfg.channels;
        Ok(Denoiser {
            temb_l1: Linear::new(init.dense(cfg.time_dim, cfg.time_dim), Some(Array1::zeros(cfg.time_dim))),
            temb_l2: Linear::new(init.dense(cfg.time_dim, cfg.time_dim), Some(Array1::zeros(cfg.time_dim))),
            conv_in: Conv2d::new(init.conv(c0, cfg.in_channels, 3, 3), Array1::zeros(c0)),
            down0: ResBlock::new(c0, c0, cfg.time_dim, init),
            down1: ResBlock::new(c0, c1, cfg.time_dim, init),
            down2: ResBlock::new(c1, c2, cfg.time_dim, init),
            attn: CrossAttnBlock::new(c2, cfg.d_cond, init),
            mid: ResBlock::new(c2, c2, cfg.time_dim, init),
            up1: ResBlock::new(c2 + c1, c1, cfg.time_dim, init),
            up0: ResBlock::new(c1 + c0, c0, cfg.time_dim, init),
            out_ln: LayerNorm::new(c0),
            conv_out: Conv2d::new(
                ndarray::Array4::zeros((cfg.in_channels, c0, 3, 3)),
                Array1::zeros(cfg.in_channels),
            ),
            cfg,
        })
    }

    /// Predict the noise component of `z` at timestep `t`.
    pub fn forward(
        &self,
        z: &Array3<T>,
        t: usize,
        bundle: &ConditionBundle<T>,
        id_kv: Option<&StreamKv<T>>,
    ) -> Result<(Array3<T>, DenoiserCache<T>)> {
        bundle.validate(self.cfg.d_cond)?;
        let (cz, h, w) = z.dim();
        if cz != self.cfg.in_channels || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(Error::shape(format!(
                "latent {cz}x{h}x{w} does not match config {}x{s}x{s}",
                self.cfg.in_channels,
                s = self.cfg.input_size
            )));
        }

        let temb0 = timestep_embedding::<T>(t, self.cfg.time_dim);
        let e1 = self.temb_l1.forward(&temb0);
        let s1 = silu(&e1);
        let e2 = self.temb_l2.forward(&s1);
        let silu_temb = silu(&e2);

        let (x0, conv_in_cache) = self.conv_in.forward(z);
        let (d0, down0_cache) = self.down0.forward(&x0, &silu_temb);
        let p0 = AvgPool2::forward(&d0);
        let (d1, down1_cache) = self.down1.forward(&p0, &silu_temb);
        let p1 = AvgPool2::forward(&d1);
        let (d2, down2_cache) = self.down2.forward(&p1, &silu_temb);
        let (at, attn_cache) = self.attn.forward(&d2, bundle, id_kv)?;
        let (m, mid_cache) = self.mid.forward(&at, &silu_temb);
        let u1_in = concat_channels(&Upsample2::forward(&m), &d1);
        let (u1, up1_cache) = self.up1.forward(&u1_in, &silu_temb);
        let u0_in = concat_channels(&Upsample2::forward(&u1), &d0);
        let (u0, up0_cache) = self.up0.forward(&u0_in, &silu_temb);

        let rows = chw_to_rows(&u0);
        let (n_out, out_ln_cache) = self.out_ln.forward(&rows);
        let a_out = silu(&n_out);
        let (eps, conv_out_cache) = self.conv_out.forward(&rows_to_chw(&a_out, h, w));

        Ok((
            eps,
            DenoiserCache {
                temb0, e1, s1, e2, silu_temb,
                conv_in: conv_in_cache,
                down0: down0_cache,
                down1: down1_cache,
                down2: down2_cache,
                attn: attn_cache,
                mid: mid_cache,
                up1: up1_cache,
                up0: up0_cache,
                out_ln: out_ln_cache, n_out,
                conv_out: conv_out_cache,
            },
        ))
    }

    /// Convenience forward that discards the cache.
    pub fn predict_noise(
        &self,
        z: &Array3<T>,
        t: usize,
        bundle: &ConditionBundle<T>,
        id_kv: Option<&StreamKv<T>>,
    ) -> Result<Array3<T>> {
        Ok(self.forward(z, t, bundle, id_kv)?.0)
    }

    /// Full backward pass. Returns the gradient with respect to the input
    /// latent, the denoiser parameter gradients, the condition-stream
    /// gradients, and (when identity projections were supplied) their grads.
    pub fn backward(
        &self,
        cache: &DenoiserCache<T>,
        bundle: &ConditionBundle<T>,
        id_kv: Option<&StreamKv<T>>,
        g_eps: &Array3<T>,
    ) -> (Array3<T>, DenoiserGrads<T>, BundleGrads<T>, Option<StreamKvGrads<T>>) {
        let hs = self.cfg.input_size;
        let [_, c1, c2] = self.cfg.channels;

        let (g_a_out_chw, g_conv_out) = self.conv_out.backward(&cache.conv_out, g_eps);
        let g_n_out = silu_backward(&cache.n_out, &chw_to_rows(&g_a_out_chw));
        let (g_rows_out, g_out_ln) = self.out_ln.backward(&cache.out_ln, &g_n_out);
        let g_u0 = rows_to_chw(&g_rows_out, hs, hs);

        let (g_u0_in, g_temb_up0, g_up0) = self.up0.backward(&cache.up0, &cache.silu_temb, &g_u0);
        let g_u1_up = g_u0_in.slice(s![0..c1, .., ..]).to_owned();
        let mut g_d0 = g_u0_in.slice(s![c1.., .., ..]).to_owned();
        let g_u1 = Upsample2::backward(&g_u1_up);

        let (g_u1_in, g_temb_up1, g_up1) = self.up1.backward(&cache.up1, &cache.silu_temb, &g_u1);
        let g_m_up = g_u1_in.slice(s![0..c2, .., ..]).to_owned();
        let mut g_d1 = g_u1_in.slice(s![c2.., .., ..]).to_owned();
        let g_m = Upsample2::backward(&g_m_up);

        let (g_at, g_temb_mid, g_mid) = self.mid.backward(&cache.mid, &cache.silu_temb, &g_m);
        let (g_d2, g_attn, bundle_grads, g_id_kv) =
            self.attn.backward(&cache.attn, bundle, id_kv, &g_at);
        let (g_p1, g_temb_d2, g_down2) = self.down2.backward(&cache.down2, &cache.silu_temb, &g_d2);
        g_d1 += &AvgPool2::backward(&g_p1, hs / 2, hs / 2);
        let (g_p0, g_temb_d1, g_down1) = self.down1.backward(&cache.down1, &cache.silu_temb, &g_d1);
        g_d0 += &AvgPool2::backward(&g_p0, hs, hs);
        let (g_x0, g_temb_d0, g_down0) = self.down0.backward(&cache.down0, &cache.silu_temb, &g_d0);
        let (g_z, g_conv_in) = self.conv_in.backward(&cache.conv_in, &g_x0);

        // timestep path: sum contributions from every block
        let mut g_silu_temb = g_temb_up0;
        g_silu_temb += &g_temb_up1;
        g_silu_temb += &g_temb_mid;
        g_silu_temb += &g_temb_d2;
        g_silu_temb += &g_temb_d1;
        g_silu_temb += &g_temb_d0;
        let g_e2 = silu_backward(&cache.e2, &g_silu_temb);
        let (g_s1, g_temb_l2) = self.temb_l2.backward(&cache.s1, &g_e2);
        let g_e1 = silu_backward(&cache.e1, &g_s1);
        let (_, g_temb_l1) = self.temb_l1.backward(&cache.temb0, &g_e1);

        (
            g_z,
            DenoiserGrads {
                temb_l1: g_temb_l1,
                temb_l2: g_temb_l2,
                conv_in: g_conv_in,
                down0: g_down0,
                down1: g_down1,
                down2: g_down2,
                attn: g_attn,
                mid: g_mid,
                up1: g_up1,
                up0: g_up0,
                out_ln: g_out_ln,
                conv_out: g_conv_out,
            },
            bundle_grads,
            g_id_kv,
        )
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn zero_grads(&self) -> DenoiserGrads<T> {
        DenoiserGrads {
            temb_l1: self.temb_l1.zero_grads(),
            temb_l2: self.temb_l2.zero_grads(),
            conv_in: self.conv_in.zero_grads(),
            down0: self.down0.zero_grads(),
            down1: self.down1.zero_grads(),
            down2: self.down2.zero_grads(),
            attn: self.attn.zero_grads(),
            mid: self.mid.zero_grads(),
            up1: self.up1.zero_grads(),
            up0: self.up0.zero_grads(),
            out_ln: self.out_ln.zero_grads(),
            conv_out: self.conv_out.zero_grads(),
        }
    }

    pub fn add_grads(acc: &mut DenoiserGrads<T>, o: &DenoiserGrads<T>) {
        acc.temb_l1.add(&o.temb_l1);
        acc.temb_l2.add(&o.temb_l2);
        acc.conv_in.add(&o.conv_in);
        acc.down0.add(&o.down0);
        acc.down1.add(&o.down1);
        acc.down2.add(&o.down2);
        acc.attn.add(&o.attn);
        acc.mid.add(&o.mid);
        acc.up1.add(&o.up1);
        acc.up0.add(&o.up0);
        acc.out_ln.add(&o.out_ln);
        acc.conv_out.add(&o.conv_out);
    }

    pub fn scale_grads(g: &mut DenoiserGrads<T>, f: T) {
        let scale_lin = |l: &mut LinearGrads<T>| {
            l.w.mapv_inplace(|v| v * f);
            if let Some(b) = l.b.as_mut() {
                b.mapv_inplace(|v| v * f);
            }
        };
        scale_lin(&mut g.temb_l1);
        scale_lin(&mut g.temb_l2);
        g.conv_in.w.mapv_inplace(|v| v * f);
        g.conv_in.b.mapv_inplace(|v| v * f);
        g.down0.scale(f);
        g.down1.scale(f);
        g.down2.scale(f);
        g.attn.scale(f);
        g.mid.scale(f);
        g.up1.scale(f);
        g.up0.scale(f);
        g.out_ln.gamma.mapv_inplace(|v| v * f);
        g.out_ln.beta.mapv_inplace(|v| v * f);
        g.conv_out.w.mapv_inplace(|v| v * f);
        g.conv_out.b.mapv_inplace(|v| v * f);
    }

    /// Aligned parameter/gradient slices for the optimizer; a single traversal
    /// builds both sides so they cannot drift apart.
    pub fn zip_params<'a>(
        &'a mut self,
        g: &'a DenoiserGrads<T>,
    ) -> (Vec<&'a mut [T]>, Vec<&'a [T]>) {
        let mut ps: Vec<&'a mut [T]> = Vec::with_capacity(80);
        let mut gs: Vec<&'a [T]> = Vec::with_capacity(80);
        ps.push(self.temb_l1.w.as_slice_mut().unwrap());
        gs.push(g.temb_l1.w.as_slice().unwrap());
        ps.push(self.temb_l1.b.as_mut().unwrap().as_slice_mut().unwrap());
        gs.push(g.temb_l1.b.as_ref().unwrap().as_slice().unwrap());
        ps.push(self.temb_l2.w.as_slice_mut().unwrap());
        gs.push(g.temb_l2.w.as_slice().unwrap());
        ps.push(self.temb_l2.b.as_mut().unwrap().as_slice_mut().unwrap());
        gs.push(g.temb_l2.b.as_ref().unwrap().as_slice().unwrap());
        ps.push(self.conv_in.w.as_slice_mut().unwrap());
        gs.push(g.conv_in.w.as_slice().unwrap());
        ps.push(self.conv_in.b.as_slice_mut().unwrap());
        gs.push(g.conv_in.b.as_slice().unwrap());
        self.down0.zip(&g.down0, &mut ps, &mut gs);
        self.down1.zip(&g.down1, &mut ps, &mut gs);
        self.down2.zip(&g.down2, &mut ps, &mut gs);
        self.attn.zip(&g.attn, &mut ps, &mut gs);
        self.mid.zip(&g.mid, &mut ps, &mut gs);
        self.up1.zip(&g.up1, &mut ps, &mut gs);
        self.up0.zip(&g.up0, &mut ps, &mut gs);
        ps.push(self.out_ln.gamma.as_slice_mut().unwrap());
        gs.push(g.out_ln.gamma.as_slice().unwrap());
        ps.push(self.out_ln.beta.as_slice_mut().unwrap());
        gs.push(g.out_ln.beta.as_slice().unwrap());
        ps.push(self.conv_out.w.as_slice_mut().unwrap());
        gs.push(g.conv_out.w.as_slice().unwrap());
        ps.push(self.conv_out.b.as_slice_mut().unwrap());
        gs.push(g.conv_out.b.as_slice().unwrap());
        (ps, gs)
    }

    pub fn num_params(&self) -> usize {
        let mut model = self.clone();
        let grads = self.zero_grads();
        let (ps, _) = model.zip_params(&grads);
        ps.iter().map(|p| p.len()).sum()
    }

    pub fn to_container(&self) -> Container {
        let manifest = serde_json::json!({
            "kind": "denoiser",
            "config": serde_json::to_value(&self.cfg).unwrap(),
        });
        let mut ckpt = Container::new(manifest);
        ckpt.insert("temb_l1.w", &self.temb_l1.w);
        ckpt.insert("temb_l1.b", self.temb_l1.b.as_ref().unwrap());
        ckpt.insert("temb_l2.w", &self.temb_l2.w);
        ckpt.insert("temb_l2.b", self.temb_l2.b.as_ref().unwrap());
        ckpt.insert("conv_in.w", &self.conv_in.w);
        ckpt.insert("conv_in.b", &self.conv_in.b);
        self.down0.save(&mut ckpt, "down0");
        self.down1.save(&mut ckpt, "down1");
        self.down2.save(&mut ckpt, "down2");
        self.attn.save(&mut ckpt, "attn");
        self.mid.save(&mut ckpt, "mid");
        self.up1.save(&mut ckpt, "up1");
        self.up0.save(&mut ckpt, "up0");
        ckpt.insert("out_ln.gamma", &self.out_ln.gamma);
        ckpt.insert("out_ln.beta", &self.out_ln.beta);
        ckpt.insert("conv_out.w", &self.conv_out.w);
        ckpt.insert("conv_out.b", &self.conv_out.b);
        ckpt
    }

    pub fn from_container(ckpt: &Container) -> Result<Self> {
        let cfg: BackboneConfig = serde_json::from_value(ckpt.manifest["config"].clone())
            .map_err(|e| Error::Container(format!("denoiser config: {e}")))?;
        let mut init = Initializer::new(crate::rng::stream_rng(0, crate::rng::Stream::ModelInit, 0));
        let mut model = Denoiser::new(cfg, &mut init)?;
        model.temb_l1.w = ckpt.get2("temb_l1.w")?;
        model.temb_l1.b = Some(ckpt.get1("temb_l1.b")?);
        model.temb_l2.w = ckpt.get2("temb_l2.w")?;
        model.temb_l2.b = Some(ckpt.get1("temb_l2.b")?);
        model.conv_in.w = ckpt.get2("conv_in.w")?;
        model.conv_in.b = ckpt.get1("conv_in.b")?;
        model.down0.load(ckpt, "down0")?;
        model.down1.load(ckpt, "down1")?;
        model.down2.load(ckpt, "down2")?;
        model.attn.load(ckpt, "attn")?;
        model.mid.load(ckpt, "mid")?;
        model.up1.load(ckpt, "up1")?;
        model.up0.load(ckpt, "up0")?;
        model.out_ln.gamma = ckpt.get1("out_ln.gamma")?;
        model.out_ln.beta = ckpt.get1("out_ln.beta")?;
        model.conv_out.w = ckpt.get2("conv_out.w")?;
        model.conv_out.b = ckpt.get1("conv_out.b")?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            in_channels: 2,
            input_size: 8,
            channels: [4, 6, 8],
            d_cond: 5,
            time_dim: 8,
        }
    }

    fn tiny_setup() -> (Denoiser<f64>, Array3<f64>, ConditionBundle<f64>, StreamKv<f64>) {
        let mut init = Initializer::new(stream_rng(1, Stream::ModelInit, 7));
        let mut model = Denoiser::new(tiny_cfg(), &mut init).unwrap();
        // the output conv is zero-initialized; give it values so gradients flow
        model.conv_out.w = init.dense(model.conv_out.w.nrows(), model.conv_out.w.ncols());
        model.attn.w_o = init.dense(8, 8);
        let z = {
            let mut rng = stream_rng(2, Stream::ModelInit, 8);
            Array3::from_shape_simple_fn((2, 8, 8), || rng.gen_range(-1.0..1.0))
        };
        let bundle = ConditionBundle {
            text: init.dense(6, 5),
            text_mask: vec![true, true, true, true, false, false],
            image: init.dense(3, 5),
            identity: init.dense(2, 5),
            lambda_image: 0.8,
            lambda_id: 1.2,
        };
        let id_kv = StreamKv { w_k: init.dense(5, 8), w_v: init.dense(5, 8) };
        (model, z, bundle, id_kv)
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let (model, z, bundle, id_kv) = tiny_setup();
        let a = model.predict_noise(&z, 3, &bundle, Some(&id_kv)).unwrap();
        let b = model.predict_noise(&z, 3, &bundle, Some(&id_kv)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), z.dim());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (model, z, bundle, id_kv) = tiny_setup();
        let gy = {
            let mut rng = stream_rng(3, Stream::ModelInit, 9);
            Array3::from_shape_simple_fn((2, 8, 8), || rng.gen_range(-1.0..1.0))
        };
        let (_, cache) = model.forward(&z, 5, &bundle, Some(&id_kv)).unwrap();
        let (g_z, _, g_bundle, g_id_kv) = model.backward(&cache, &bundle, Some(&id_kv), &gy);

        let loss = |z: &Array3<f64>, b: &ConditionBundle<f64>, kv: &StreamKv<f64>| {
            (&model.predict_noise(z, 5, b, Some(kv)).unwrap() * &gy).sum()
        };
        let h = 1e-6;
        let mut rng = stream_rng(4, Stream::ModelInit, 10);
        for _ in 0..24 {
            let ci = rng.gen_range(0..2);
            let y = rng.gen_range(0..8);
            let x = rng.gen_range(0..8);
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[[ci, y, x]] += h;
            zm[[ci, y, x]] -= h;
            let fd = (loss(&zp, &bundle, &id_kv) - loss(&zm, &bundle, &id_kv)) / (2.0 * h);
            let an = g_z[[ci, y, x]];
            assert!(
                (fd - an).abs() < 1e-5 * (1.0 + fd.abs().max(an.abs())),
                "latent grad at ({ci},{y},{x}): fd {fd} vs {an}"
            );
        }
        // identity tokens and projections: the projector-training path
        for i in 0..bundle.identity.nrows() {
            for j in 0..bundle.identity.ncols() {
                let mut bp = bundle.clone();
                let mut bm = bundle.clone();
                bp.identity[[i, j]] += h;
                bm.identity[[i, j]] -= h;
                let fd = (loss(&z, &bp, &id_kv) - loss(&z, &bm, &id_kv)) / (2.0 * h);
                let an = g_bundle.identity[[i, j]];
                assert!(
                    (fd - an).abs() < 1e-5 * (1.0 + fd.abs().max(an.abs())),
                    "identity token grad ({i},{j}): fd {fd} vs {an}"
                );
            }
        }
        let g_id_kv = g_id_kv.unwrap();
        for i in 0..id_kv.w_k.nrows() {
            for j in 0..id_kv.w_k.ncols() {
                let mut kp = id_kv.clone();
                let mut km = id_kv.clone();
                kp.w_k[[i, j]] += h;
                km.w_k[[i, j]] -= h;
                let fd = (loss(&z, &bundle, &kp) - loss(&z, &bundle, &km)) / (2.0 * h);
                let an = g_id_kv.w_k[[i, j]];
                assert!(
                    (fd - an).abs() < 1e-5 * (1.0 + fd.abs().max(an.abs())),
                    "id w_k grad ({i},{j}): fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (model, z, bundle, id_kv) = tiny_setup();
        let gy = {
            let mut rng = stream_rng(5, Stream::ModelInit, 11);
            Array3::from_shape_simple_fn((2, 8, 8), || rng.gen_range(-1.0..1.0))
        };
        let (_, cache) = model.forward(&z, 7, &bundle, Some(&id_kv)).unwrap();
        let (_, grads, _, _) = model.backward(&cache, &bundle, Some(&id_kv), &gy);

        let mut probe = model.clone();
        let (ps, gs) = probe.zip_params(&grads);
        assert_eq!(ps.len(), gs.len());
        for (p, g) in ps.iter().zip(gs.iter()) {
            assert_eq!(p.len(), g.len(), "parameter/gradient length mismatch");
        }
        let n_groups = ps.len();
        drop(ps);
        drop(gs);

        // probe a few coordinates in every 5th parameter group
        let h = 1e-6;
        let mut rng = stream_rng(6, Stream::ModelInit, 12);
        for gi in (0..n_groups).step_by(5) {
            let (idx, analytic) = {
                let mut m = model.clone();
                let (ps, gs) = m.zip_params(&grads);
                let len = ps[gi].len();
                let idx = rng.gen_range(0..len);
                (idx, gs[gi][idx])
            };
            let eval = |delta: f64| {
                let mut m = model.clone();
                {
                    let (mut ps, _) = m.zip_params(&grads);
                    ps[gi][idx] += delta;
                }
                (&m.predict_noise(&z, 7, &bundle, Some(&id_kv)).unwrap() * &gy).sum()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - analytic).abs() < 1e-5 * (1.0 + fd.abs().max(analytic.abs())),
                "param group {gi} idx {idx}: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let (model, z, bundle, id_kv) = tiny_setup();
        let ckpt = model.to_container();
        let back = Denoiser::<f64>::from_container(&ckpt).unwrap();
        let a = model.predict_noise(&z, 3, &bundle, Some(&id_kv)).unwrap();
        let b = back.predict_noise(&z, 3, &bundle, Some(&id_kv)).unwrap();
        assert_eq!(a, b);
    }
}
