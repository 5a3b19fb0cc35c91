//! Pre-norm encoder–decoder transformer with registered neuron sites.

use std::collections::BTreeSet;

use neuralloc_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, PairId, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::mask::{apply_mask, Mask, NeuronRegistry, Side, Site, SiteKey};

const NEG_INF: f32 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f32,
    pub language_pairs: Vec<PairId>,
    /// Output projection reuses the (shared) embedding matrix.
    #[serde(default)]
    pub tie_output: bool,
}

impl ModelConfig {
    /// 2 layers, d_model 64, 4 heads, d_ffn 128.
    pub fn desk(vocab_size: usize, language_pairs: Vec<PairId>) -> Self {
        Self {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ffn: 128,
            vocab_size,
            max_seq_len: 64,
            dropout_rate: 0.0,
            language_pairs,
            tie_output: false,
        }
    }

    /// Smallest useful shape for unit tests.
    pub fn tiny(language_pairs: Vec<PairId>) -> Self {
        Self {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            d_ffn: 16,
            vocab_size: 32,
            max_seq_len: 16,
            dropout_rate: 0.0,
            language_pairs,
            tie_output: false,
        }
    }

    pub fn target_languages(&self) -> BTreeSet<&str> {
        self.language_pairs.iter().map(|p| p.target()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("num_layers", "must be positive"));
        }
        if self.d_model == 0 {
            return Err(Error::config("d_model", "must be positive"));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "num_heads",
                format!("{} heads do not divide d_model {}", self.num_heads, self.d_model),
            ));
        }
        if self.d_ffn == 0 {
            return Err(Error::config("d_ffn", "must be positive"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        if self.language_pairs.is_empty() {
            return Err(Error::config("language_pairs", "at least one pair required"));
        }
        let unique: BTreeSet<&PairId> = self.language_pairs.iter().collect();
        if unique.len() != self.language_pairs.len() {
            return Err(Error::config("language_pairs", "pairs must be unique"));
        }
        let reserved = 3 + self.target_languages().len();
        if self.vocab_size <= reserved {
            return Err(Error::config(
                "vocab_size",
                format!("must exceed the {reserved} reserved special and language tokens"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm_attn: NormIds,
    attn: AttnIds,
    norm_ffn: NormIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm_self: NormIds,
    self_attn: AttnIds,
    norm_cross: NormIds,
    cross_attn: AttnIds,
    norm_ffn: NormIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: NormIds,
    decoder: Vec<DecoderLayer>,
    dec_norm: NormIds,
    out_w: Option<ParamId>,
    out_b: ParamId,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f32) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Ok(self.store.add(name, Tensor::new(shape, data)?)?)
    }

    fn filled(&mut self, name: String, len: usize, value: f32) -> Result<ParamId> {
        Ok(self.store.add(name, Tensor::filled(vec![len], value)?)?)
    }

    /// Glorot-uniform weight `[fan_in × fan_out]`.
    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        self.uniform(name, vec![fan_in, fan_out], bound)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            gain: self.filled(format!("{prefix}.gain"), d, 1.0)?,
            bias: self.filled(format!("{prefix}.bias"), d, 0.0)?,
        })
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<AttnIds> {
        let lin = |init: &mut Self, n: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                init.weight(format!("{prefix}.w{n}"), d, d)?,
                init.filled(format!("{prefix}.b{n}"), d, 0.0)?,
            ))
        };
        let (wq, bq) = lin(self, "q")?;
        let (wk, bk) = lin(self, "k")?;
        let (wv, bv) = lin(self, "v")?;
        let (wo, bo) = lin(self, "o")?;
        Ok(AttnIds { wq, bq, wk, bk, wv, bv, wo, bo })
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> Result<FfnIds> {
        Ok(FfnIds {
            w1: self.weight(format!("{prefix}.w1"), d, f)?,
            b1: self.filled(format!("{prefix}.b1"), f, 0.0)?,
            w2: self.weight(format!("{prefix}.w2"), f, d)?,
            b2: self.filled(format!("{prefix}.b2"), d, 0.0)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    pub params: ParamStore,
    registry: NeuronRegistry,
    layout: Layout,
}

/// Builds and deterministically initialises a model from `seed`.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<TransformerModel> {
    TransformerModel::new(config, seed)
}

/// A pair-homogeneous batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub pair: usize,
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn target_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.tgt.len() + 1).sum()
    }
}

/// Per-pass switches. Dropout is active only when an RNG is supplied.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub mask: Option<&'a Mask>,
    pub record: bool,
    pub dropout: Option<&'a mut ChaCha8Rng>,
}

#[derive(Debug, Clone, Copy)]
pub struct RecordedSite {
    pub key: SiteKey,
    pub var: Var,
}

/// Result of a teacher-forced pass. Row `r` of an encoder site is valid iff
/// `src_valid[r]`; decoder sites use `tgt_valid`.
pub struct TrainForward {
    pub tape: Tape,
    pub loss: Var,
    pub sites: Vec<RecordedSite>,
    pub src_valid: Vec<bool>,
    pub tgt_valid: Vec<bool>,
    pub target_tokens: usize,
}

impl TrainForward {
    pub fn loss_value(&self) -> f32 {
        self.tape.value(self.loss).data()[0]
    }

    pub fn valid_rows(&self, side: Side) -> &[bool] {
        match side {
            Side::Encoder => &self.src_valid,
            Side::Decoder => &self.tgt_valid,
        }
    }
}

/// Encoder output held outside any tape, for step-wise decoding.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    memory: Tensor,
    batch: usize,
    src_len: usize,
    src_valid: Vec<bool>,
}

impl EncodedBatch {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Rows `indices` of this batch, in order (used to expand beams).
    pub fn select(&self, indices: &[usize]) -> Result<EncodedBatch> {
        let d = self.memory.last_dim();
        let rows = self.src_len * d;
        let mut data = Vec::with_capacity(indices.len() * rows);
        let mut valid = Vec::with_capacity(indices.len() * self.src_len);
        for &i in indices {
            data.extend_from_slice(&self.memory.data()[i * rows..(i + 1) * rows]);
            valid.extend_from_slice(&self.src_valid[i * self.src_len..(i + 1) * self.src_len]);
        }
        Ok(EncodedBatch {
            memory: Tensor::new(vec![indices.len() * self.src_len, d], data)?,
            batch: indices.len(),
            src_len: self.src_len,
            src_valid: valid,
        })
    }
}

struct Ctx<'a, 'b> {
    tape: &'a mut Tape,
    mask: Option<&'b Mask>,
    record: bool,
    dropout: Option<(&'b mut ChaCha8Rng, f32)>,
    recorded: Vec<RecordedSite>,
}

fn pad_rows(seqs: &[Vec<u32>]) -> (Vec<usize>, Vec<bool>, usize) {
    let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(seqs.len() * len);
    let mut valid = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        for t in 0..len {
            ids.push(s.get(t).copied().unwrap_or(PAD_ID) as usize);
            valid.push(t < s.len());
        }
    }
    (ids, valid, len)
}

impl TransformerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (d, f, v) = (config.d_model, config.d_ffn, config.vocab_size);
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let embed = init.uniform("embed".into(), vec![v, d], (3.0 / d as f32).sqrt())?;
        let mut encoder = Vec::new();
        for l in 1..=config.num_layers {
            let p = format!("enc.{l}");
            encoder.push(EncoderLayer {
                norm_attn: init.norm(&format!("{p}.norm_attn"), d)?,
                attn: init.attn(&format!("{p}.self_attn"), d)?,
                norm_ffn: init.norm(&format!("{p}.norm_ffn"), d)?,
                ffn: init.ffn(&format!("{p}.ffn"), d, f)?,
            });
        }
        let enc_norm = init.norm("enc.norm", d)?;
        let mut decoder = Vec::new();
        for l in 1..=config.num_layers {
            let p = format!("dec.{l}");
            decoder.push(DecoderLayer {
                norm_self: init.norm(&format!("{p}.norm_self"), d)?,
                self_attn: init.attn(&format!("{p}.self_attn"), d)?,
                norm_cross: init.norm(&format!("{p}.norm_cross"), d)?,
                cross_attn: init.attn(&format!("{p}.cross_attn"), d)?,
                norm_ffn: init.norm(&format!("{p}.norm_ffn"), d)?,
                ffn: init.ffn(&format!("{p}.ffn"), d, f)?,
            });
        }
        let dec_norm = init.norm("dec.norm", d)?;
        let out_w = if config.tie_output {
            None
        } else {
            Some(init.weight("out.w".into(), d, v)?)
        };
        let out_b = init.filled("out.b".into(), v, 0.0)?;
        let registry = NeuronRegistry::from_config(&config);
        Ok(Self {
            config,
            params,
            registry,
            layout: Layout {
                embed,
                encoder,
                enc_norm,
                decoder,
                dec_norm,
                out_w,
                out_b,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &NeuronRegistry {
        &self.registry
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Replace all parameter values; names and shapes must match.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Mismatch(format!(
                "expected {} parameter blocks, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for ((_, src), dst) in other.iter().zip(self.params.iter_mut()) {
            if src.name() != dst.name() || src.value.shape() != dst.value.shape() {
                return Err(Error::Mismatch(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    src.name(),
                    src.value.shape(),
                    dst.name(),
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    fn check_mask(&self, mask: Option<&Mask>) -> Result<()> {
        match mask {
            Some(m) if m.registry() != &self.registry => Err(Error::Mismatch(
                "mask was built for a different model shape".into(),
            )),
            _ => Ok(()),
        }
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len > self.config.max_seq_len {
            Err(Error::data(format!(
                "{what} length {len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )))
        } else {
            Ok(())
        }
    }

    // ---- building blocks ----------------------------------------------

    fn p(&self, ctx: &mut Ctx, id: ParamId) -> Var {
        ctx.tape.param(&self.params, id)
    }

    fn linear(&self, ctx: &mut Ctx, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (wv, bv) = (self.p(ctx, w), self.p(ctx, b));
        let y = ctx.tape.matmul(x, wv)?;
        Ok(ctx.tape.add_row(y, bv)?)
    }

    fn norm(&self, ctx: &mut Ctx, x: Var, n: NormIds) -> Result<Var> {
        let (g, b) = (self.p(ctx, n.gain), self.p(ctx, n.bias));
        Ok(ctx.tape.layer_norm(x, g, b)?)
    }

    fn dropout(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let Some((rng, p)) = ctx.dropout.as_mut() else {
            return Ok(x);
        };
        if *p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - *p);
        let n = ctx.tape.value(x).numel();
        let factors: Vec<f32> = (0..n).map(|_| if rng.gen::<f32>() < *p { 0.0 } else { keep }).collect();
        Ok(ctx.tape.mask_mul(x, &factors)?)
    }

    /// Applies the site mask and records the activation.
    fn site(&self, ctx: &mut Ctx, key: SiteKey, x: Var) -> Result<Var> {
        let x = match ctx.mask {
            Some(mask) => {
                let bits = mask
                    .site_bits(key)
                    .ok_or_else(|| Error::Mismatch(format!("mask has no site {key}")))?;
                apply_mask(ctx.tape, x, bits)?
            }
            None => x,
        };
        if ctx.record {
            ctx.recorded.push(RecordedSite { key, var: x });
        }
        Ok(x)
    }

    fn positional(&self, batch: usize, len: usize) -> Result<Tensor> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            for pos in 0..len {
                for i in 0..d {
                    let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    let angle = pos as f64 / rate;
                    data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32);
                }
            }
        }
        Ok(Tensor::new(vec![batch * len, d], data)?)
    }

    fn embed(&self, ctx: &mut Ctx, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::data(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let table = self.p(ctx, self.layout.embed);
        let x = ctx.tape.embedding(table, ids)?;
        let x = ctx.tape.scale(x, (self.config.d_model as f32).sqrt())?;
        let pe = self.positional(batch, len)?;
        let x = ctx.tape.add_const(x, &pe)?;
        self.dropout(ctx, x)
    }

    /// Additive attention bias `[B·H × Tq × Tk]`.
    fn attn_bias(&self, batch: usize, q_len: usize, k_len: usize, key_valid: &[bool], causal: bool) -> Result<Tensor> {
        let h = self.config.num_heads;
        let mut data = Vec::with_capacity(batch * h * q_len * k_len);
        for b in 0..batch {
            for _ in 0..h {
                for q in 0..q_len {
                    for k in 0..k_len {
                        let blocked = !key_valid[b * k_len + k] || (causal && k > q);
                        data.push(if blocked { NEG_INF } else { 0.0 });
                    }
                }
            }
        }
        Ok(Tensor::new(vec![batch * h, q_len, k_len], data)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        ctx: &mut Ctx,
        ids: &AttnIds,
        q_in: Var,
        kv_in: Var,
        batch: usize,
        q_len: usize,
        k_len: usize,
        bias: &Tensor,
    ) -> Result<Var> {
        let h = self.config.num_heads;
        let dh = self.config.d_model / h;
        let q = self.linear(ctx, q_in, ids.wq, ids.bq)?;
        let k = self.linear(ctx, kv_in, ids.wk, ids.bk)?;
        let v = self.linear(ctx, kv_in, ids.wv, ids.bv)?;
        let q = ctx.tape.split_heads(q, batch, q_len, h)?;
        let k = ctx.tape.split_heads(k, batch, k_len, h)?;
        let v = ctx.tape.split_heads(v, batch, k_len, h)?;
        let scores = ctx.tape.batch_matmul(q, k, true)?;
        let scores = ctx.tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let scores = ctx.tape.add_const(scores, bias)?;
        let probs = ctx.tape.softmax(scores)?;
        let out = ctx.tape.batch_matmul(probs, v, false)?;
        let out = ctx.tape.merge_heads(out, batch, q_len, h)?;
        self.linear(ctx, out, ids.wo, ids.bo)
    }

    fn ffn(&self, ctx: &mut Ctx, ids: &FfnIds, x: Var, key: SiteKey) -> Result<Var> {
        let hidden = self.linear(ctx, x, ids.w1, ids.b1)?;
        let hidden = ctx.tape.relu(hidden)?;
        let hidden = self.site(ctx, key, hidden)?;
        self.linear(ctx, hidden, ids.w2, ids.b2)
    }

    fn residual(&self, ctx: &mut Ctx, x: Var, sub: Var) -> Result<Var> {
        let sub = self.dropout(ctx, sub)?;
        Ok(ctx.tape.add(x, sub)?)
    }

    fn encode_vars(&self, ctx: &mut Ctx, srcs: &[Vec<u32>]) -> Result<(Var, Vec<bool>, usize)> {
        let seqs: Vec<Vec<u32>> = srcs
            .iter()
            .map(|s| {
                let mut v = s.clone();
                v.push(EOS_ID);
                v
            })
            .collect();
        let (ids, valid, len) = pad_rows(&seqs);
        self.check_len(len, "source")?;
        let batch = srcs.len();
        let bias = self.attn_bias(batch, len, len, &valid, false)?;
        let mut x = self.embed(ctx, &ids, batch, len)?;
        for (i, layer) in self.layout.encoder.iter().enumerate() {
            let l = i + 1;
            let n = self.norm(ctx, x, layer.norm_attn)?;
            let a = self.attention(ctx, &layer.attn, n, n, batch, len, len, &bias)?;
            let a = self.site(ctx, SiteKey { side: Side::Encoder, layer: l, site: Site::SelfAttnOut }, a)?;
            x = self.residual(ctx, x, a)?;
            let n = self.norm(ctx, x, layer.norm_ffn)?;
            let y = self.ffn(ctx, &layer.ffn, n, SiteKey { side: Side::Encoder, layer: l, site: Site::FfnInner })?;
            x = self.residual(ctx, x, y)?;
        }
        let memory = self.norm(ctx, x, self.layout.enc_norm)?;
        Ok((memory, valid, len))
    }

    fn decode_vars(
        &self,
        ctx: &mut Ctx,
        memory: Var,
        src_valid: &[bool],
        src_len: usize,
        tgt_in: &[Vec<u32>],
    ) -> Result<Var> {
        let (ids, valid, len) = pad_rows(tgt_in);
        self.check_len(len, "target")?;
        let batch = tgt_in.len();
        let self_bias = self.attn_bias(batch, len, len, &valid, true)?;
        let cross_bias = self.attn_bias(batch, len, src_len, src_valid, false)?;
        let mut x = self.embed(ctx, &ids, batch, len)?;
        for (i, layer) in self.layout.decoder.iter().enumerate() {
            let l = i + 1;
            let n = self.norm(ctx, x, layer.norm_self)?;
            let a = self.attention(ctx, &layer.self_attn, n, n, batch, len, len, &self_bias)?;
            let a = self.site(ctx, SiteKey { side: Side::Decoder, layer: l, site: Site::SelfAttnOut }, a)?;
            x = self.residual(ctx, x, a)?;
            let n = self.norm(ctx, x, layer.norm_cross)?;
            let c = self.attention(ctx, &layer.cross_attn, n, memory, batch, len, src_len, &cross_bias)?;
            let c = self.site(ctx, SiteKey { side: Side::Decoder, layer: l, site: Site::CrossAttnOut }, c)?;
            x = self.residual(ctx, x, c)?;
            let n = self.norm(ctx, x, layer.norm_ffn)?;
            let y = self.ffn(ctx, &layer.ffn, n, SiteKey { side: Side::Decoder, layer: l, site: Site::FfnInner })?;
            x = self.residual(ctx, x, y)?;
        }
        let x = self.norm(ctx, x, self.layout.dec_norm)?;
        let w = match self.layout.out_w {
            Some(w) => self.p(ctx, w),
            None => {
                let e = self.p(ctx, self.layout.embed);
                ctx.tape.transpose(e)?
            }
        };
        let logits = ctx.tape.matmul(x, w)?;
        let b = self.p(ctx, self.layout.out_b);
        Ok(ctx.tape.add_row(logits, b)?)
    }

    // ---- public passes --------------------------------------------------

    /// Teacher-forced mean token cross-entropy over a pair-homogeneous batch.
    pub fn forward_train(&self, batch: &Batch, opts: ForwardOptions) -> Result<TrainForward> {
        if batch.examples.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        if batch.pair >= self.config.language_pairs.len() {
            return Err(Error::usage(format!("pair index {} out of range", batch.pair)));
        }
        self.check_mask(opts.mask)?;
        let mut tape = Tape::new();
        let dropout = opts.dropout.map(|rng| (rng, self.config.dropout_rate));
        let mut ctx = Ctx {
            tape: &mut tape,
            mask: opts.mask,
            record: opts.record,
            dropout,
            recorded: Vec::new(),
        };
        let srcs: Vec<Vec<u32>> = batch.examples.iter().map(|e| e.src.clone()).collect();
        let (memory, src_valid, src_len) = self.encode_vars(&mut ctx, &srcs)?;
        let mut tgt_in = Vec::with_capacity(batch.examples.len());
        let mut tgt_out = Vec::with_capacity(batch.examples.len());
        for e in &batch.examples {
            let mut i = vec![EOS_ID];
            i.extend_from_slice(&e.tgt);
            let mut o = e.tgt.clone();
            o.push(EOS_ID);
            tgt_in.push(i);
            tgt_out.push(o);
        }
        let logits = self.decode_vars(&mut ctx, memory, &src_valid, src_len, &tgt_in)?;
        let (targets, tgt_valid, _) = pad_rows(&tgt_out);
        let loss = ctx.tape.cross_entropy(logits, &targets, PAD_ID as usize)?;
        let sites = std::mem::take(&mut ctx.recorded);
        Ok(TrainForward {
            tape,
            loss,
            sites,
            src_valid,
            tgt_valid,
            target_tokens: batch.target_tokens(),
        })
    }

    pub fn encode(&self, srcs: &[Vec<u32>], mask: Option<&Mask>) -> Result<EncodedBatch> {
        self.check_mask(mask)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx {
            tape: &mut tape,
            mask,
            record: false,
            dropout: None,
            recorded: Vec::new(),
        };
        let (memory, src_valid, src_len) = self.encode_vars(&mut ctx, srcs)?;
        Ok(EncodedBatch {
            memory: tape.value(memory).clone(),
            batch: srcs.len(),
            src_len,
            src_valid,
        })
    }

    /// Log-probabilities of the next token after each prefix (prefixes start
    /// with EOS and must share one length).
    pub fn next_log_probs(&self, enc: &EncodedBatch, prefixes: &[Vec<u32>], mask: Option<&Mask>) -> Result<Vec<Vec<f32>>> {
        self.check_mask(mask)?;
        if prefixes.len() != enc.batch {
            return Err(Error::usage("prefix count differs from encoded batch"));
        }
        let len = prefixes[0].len();
        if prefixes.iter().any(|p| p.len() != len) {
            return Err(Error::usage("prefixes must share one length"));
        }
        let mut tape = Tape::new();
        let mut ctx = Ctx {
            tape: &mut tape,
            mask,
            record: false,
            dropout: None,
            recorded: Vec::new(),
        };
        let memory = ctx.tape.constant(enc.memory.clone());
        let logits = self.decode_vars(&mut ctx, memory, &enc.src_valid, enc.src_len, prefixes)?;
        let v = self.config.vocab_size;
        let values = tape.value(logits).data();
        Ok((0..prefixes.len())
            .map(|b| {
                let row = &values[(b * len + len - 1) * v..(b * len + len) * v];
                let lse = neuralloc_tensor::kernels::log_sum_exp(row);
                row.iter().map(|x| x - lse).collect()
            })
            .collect())
    }

    // ---- parameter ownership of neurons --------------------------------

    /// Parameter elements that exclusively produce or consume one neuron:
    /// for attention outputs the output-projection column and bias entry,
    /// for FFN units the first-layer column, bias entry and second-layer row.
    pub fn unit_parameters(&self, key: SiteKey, unit: usize) -> Vec<(ParamId, Vec<usize>)> {
        let d = self.config.d_model;
        let f = self.config.d_ffn;
        let layer = key.layer - 1;
        let column = |id: ParamId, rows: usize, cols: usize| (id, (0..rows).map(|r| r * cols + unit).collect());
        match (key.side, key.site) {
            (Side::Encoder, Site::SelfAttnOut) => {
                let a = &self.layout.encoder[layer].attn;
                vec![column(a.wo, d, d), (a.bo, vec![unit])]
            }
            (Side::Decoder, Site::SelfAttnOut) => {
                let a = &self.layout.decoder[layer].self_attn;
                vec![column(a.wo, d, d), (a.bo, vec![unit])]
            }
            (Side::Decoder, Site::CrossAttnOut) => {
                let a = &self.layout.decoder[layer].cross_attn;
                vec![column(a.wo, d, d), (a.bo, vec![unit])]
            }
            (side, Site::FfnInner) => {
                let ffn = match side {
                    Side::Encoder => &self.layout.encoder[layer].ffn,
                    Side::Decoder => &self.layout.decoder[layer].ffn,
                };
                vec![
                    column(ffn.w1, d, f),
                    (ffn.b1, vec![unit]),
                    (ffn.w2, (unit * d..(unit + 1) * d).collect()),
                ]
            }
            (Side::Encoder, Site::CrossAttnOut) => Vec::new(),
        }
    }

    /// Per-parameter update masks (`false` = frozen) that freeze every
    /// element owned by a neuron inactive in `mask`.
    pub fn update_masks(&self, mask: &Mask) -> Result<Vec<Option<Vec<bool>>>> {
        self.check_mask(Some(mask))?;
        let mut out: Vec<Option<Vec<bool>>> = vec![None; self.params.len()];
        for (flat, id) in self.registry.ids().enumerate() {
            if mask.is_active(flat) {
                continue;
            }
            for (pid, elems) in self.unit_parameters(id.key(), id.unit) {
                let n = self.params.get(pid).value.numel();
                let slot = out[pid.0].get_or_insert_with(|| vec![true; n]);
                for e in elems {
                    slot[e] = false;
                }
            }
        }
        Ok(out)
    }
}
