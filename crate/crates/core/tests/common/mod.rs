//! Straight-line f64 re-implementation of the translation model, one sentence
//! at a time and without padding. Used as an independent oracle.

#![allow(dead_code)]

use std::collections::HashMap;

use neuralloc::data::{Example, EOS_ID};
use neuralloc::mask::{Side, Site, SiteKey};
use neuralloc::model::{ModelConfig, TransformerModel};

/// Called with every site activation (`rows × width`, row-major) before it
/// is used downstream; may modify it in place.
pub type Hook<'a> = dyn FnMut(usize, SiteKey, &mut [f64]) + 'a;

pub struct Oracle {
    pub cfg: ModelConfig,
    pub p: HashMap<String, Vec<f64>>,
}

fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let x = a[i * k + p];
            for j in 0..m {
                out[i * m + j] += x * b[p * m + j];
            }
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = g.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        for j in 0..d {
            out.push((row[j] - mean) * rs * g[j] + b[j]);
        }
    }
    out
}

impl Oracle {
    pub fn new(model: &TransformerModel) -> Self {
        let p = model
            .params
            .iter()
            .map(|(_, p)| (p.name().to_string(), p.value.data().iter().map(|&v| v as f64).collect()))
            .collect();
        Self { cfg: model.config().clone(), p }
    }

    fn w(&self, name: &str) -> &[f64] {
        self.p.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    fn linear(&self, x: &[f64], prefix: &str, w: &str, b: &str, d_in: usize, d_out: usize) -> Vec<f64> {
        let rows = x.len() / d_in;
        let mut y = mm(x, self.w(&format!("{prefix}.{w}")), rows, d_in, d_out);
        add_bias(&mut y, self.w(&format!("{prefix}.{b}")));
        y
    }

    fn norm(&self, x: &[f64], prefix: &str) -> Vec<f64> {
        layer_norm(x, self.w(&format!("{prefix}.gain")), self.w(&format!("{prefix}.bias")))
    }

    fn embed(&self, ids: &[u32]) -> Vec<f64> {
        let d = self.cfg.d_model;
        let table = self.w("embed");
        let scale = (d as f64).sqrt();
        let mut out = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            for i in 0..d {
                let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let angle = pos as f64 / rate;
                let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                out.push(table[id as usize * d + i] * scale + pe);
            }
        }
        out
    }

    fn attention(&self, prefix: &str, q_in: &[f64], kv_in: &[f64], causal: bool) -> Vec<f64> {
        let d = self.cfg.d_model;
        let h = self.cfg.num_heads;
        let dh = d / h;
        let (tq, tk) = (q_in.len() / d, kv_in.len() / d);
        let q = self.linear(q_in, prefix, "wq", "bq", d, d);
        let k = self.linear(kv_in, prefix, "wk", "bk", d, d);
        let v = self.linear(kv_in, prefix, "wv", "bv", d, d);
        let mut ctx = vec![0.0; tq * d];
        for head in 0..h {
            let c0 = head * dh;
            for i in 0..tq {
                let visible = if causal { i + 1 } else { tk };
                let scores: Vec<f64> = (0..visible)
                    .map(|j| (0..dh).map(|e| q[i * d + c0 + e] * k[j * d + c0 + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for (j, e) in ex.iter().enumerate() {
                    for c in 0..dh {
                        ctx[i * d + c0 + c] += e / z * v[j * d + c0 + c];
                    }
                }
            }
        }
        self.linear(&ctx, prefix, "wo", "bo", d, d)
    }

    fn ffn(&self, prefix: &str, x: &[f64], key: SiteKey, ex: usize, hook: &mut Hook) -> Vec<f64> {
        let (d, f) = (self.cfg.d_model, self.cfg.d_ffn);
        let mut hidden: Vec<f64> = self.linear(x, prefix, "w1", "b1", d, f).into_iter().map(|v| v.max(0.0)).collect();
        hook(ex, key, &mut hidden);
        self.linear(&hidden, prefix, "w2", "b2", f, d)
    }

    /// Summed cross-entropy of one example's target tokens (including EOS).
    pub fn example_loss(&self, ex_index: usize, ex: &Example, hook: &mut Hook) -> f64 {
        let d = self.cfg.d_model;
        let mut src = ex.src.clone();
        src.push(EOS_ID);
        let mut x = self.embed(&src);
        for l in 1..=self.cfg.num_layers {
            let p = format!("enc.{l}");
            let n = self.norm(&x, &format!("{p}.norm_attn"));
            let mut a = self.attention(&format!("{p}.self_attn"), &n, &n, false);
            hook(ex_index, SiteKey { side: Side::Encoder, layer: l, site: Site::SelfAttnOut }, &mut a);
            x.iter_mut().zip(&a).for_each(|(v, a)| *v += a);
            let n = self.norm(&x, &format!("{p}.norm_ffn"));
            let y = self.ffn(&format!("{p}.ffn"), &n, SiteKey { side: Side::Encoder, layer: l, site: Site::FfnInner }, ex_index, hook);
            x.iter_mut().zip(&y).for_each(|(v, a)| *v += a);
        }
        let memory = self.norm(&x, "enc.norm");

        let mut tgt_in = vec![EOS_ID];
        tgt_in.extend_from_slice(&ex.tgt);
        let mut tgt_out = ex.tgt.clone();
        tgt_out.push(EOS_ID);
        let mut x = self.embed(&tgt_in);
        for l in 1..=self.cfg.num_layers {
            let p = format!("dec.{l}");
            let n = self.norm(&x, &format!("{p}.norm_self"));
            let mut a = self.attention(&format!("{p}.self_attn"), &n, &n, true);
            hook(ex_index, SiteKey { side: Side::Decoder, layer: l, site: Site::SelfAttnOut }, &mut a);
            x.iter_mut().zip(&a).for_each(|(v, a)| *v += a);
            let n = self.norm(&x, &format!("{p}.norm_cross"));
            let mut c = self.attention(&format!("{p}.cross_attn"), &n, &memory, false);
            hook(ex_index, SiteKey { side: Side::Decoder, layer: l, site: Site::CrossAttnOut }, &mut c);
            x.iter_mut().zip(&c).for_each(|(v, a)| *v += a);
            let n = self.norm(&x, &format!("{p}.norm_ffn"));
            let y = self.ffn(&format!("{p}.ffn"), &n, SiteKey { side: Side::Decoder, layer: l, site: Site::FfnInner }, ex_index, hook);
            x.iter_mut().zip(&y).for_each(|(v, a)| *v += a);
        }
        let x = self.norm(&x, "dec.norm");
        let v = self.cfg.vocab_size;
        let mut logits = match self.p.get("out.w") {
            Some(w) => mm(&x, w, tgt_in.len(), d, v),
            None => {
                let e = self.w("embed");
                let mut t = vec![0.0; d * v];
                for r in 0..v {
                    for c in 0..d {
                        t[c * v + r] = e[r * d + c];
                    }
                }
                mm(&x, &t, tgt_in.len(), d, v)
            }
        };
        add_bias(&mut logits, self.w("out.b"));
        let mut total = 0.0;
        for (row, &t) in logits.chunks(v).zip(&tgt_out) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
        }
        total
    }

    /// Summed loss over examples.
    pub fn loss(&self, examples: &[Example], hook: &mut Hook) -> f64 {
        examples.iter().enumerate().map(|(i, e)| self.example_loss(i, e, hook)).sum()
    }

    /// Mean token loss, as the model's training objective.
    pub fn mean_loss(&self, examples: &[Example], hook: &mut Hook) -> f64 {
        let tokens: usize = examples.iter().map(|e| e.tgt.len() + 1).sum();
        self.loss(examples, hook) / tokens as f64
    }
}

pub fn no_hook(_: usize, _: SiteKey, _: &mut [f64]) {}

/// Site activations of one example, captured without modification.
pub fn capture(oracle: &Oracle, ex: &Example) -> HashMap<SiteKey, Vec<f64>> {
    let mut seen = HashMap::new();
    oracle.example_loss(0, ex, &mut |_, key, h: &mut [f64]| {
        seen.insert(key, h.to_vec());
    });
    seen
}
