//! Joint pretraining, importance evaluation with allocation, and masked
//! fine-tuning.

use std::path::{Path, PathBuf};

use neuralloc_tensor::{Adam, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::allocation::{allocate, AllocationConfig, AllocationPlan};
use crate::analysis::{bleu, exact_match, AnalysisReport};
use crate::data::{Corpus, CorpusSet, Example, Split};
use crate::decode::greedy_decode;
use crate::error::{Error, Result};
use crate::importance::{accumulate_batch, Criterion, ImportanceTable};
use crate::mask::{build_mask_set, Mask, MaskSet};
use crate::model::{build_model, Batch, ForwardOptions, ModelConfig, TransformerModel};
use crate::persist::{self, CheckpointMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    fn salt(self) -> u64 {
        match self {
            Stage::Pretrain => 0x5052_4554,
            Stage::Finetune => 0x4649_4e45,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f32,
    /// Target-token budget per batch.
    pub batch_tokens: usize,
    pub seed: u64,
    /// Dev-loss evaluation period; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Stop after this many evaluations without dev improvement.
    pub patience: Option<usize>,
    /// Verify that frozen parameter elements receive exactly zero gradient.
    pub check_isolation: bool,
}

impl TrainSchedule {
    pub fn new(total_steps: u64, seed: u64) -> Self {
        Self {
            total_steps,
            warmup_steps: 200,
            peak_lr: 2e-3,
            batch_tokens: 400,
            seed,
            eval_every: 250,
            patience: None,
            check_isolation: cfg!(debug_assertions),
        }
    }

    /// Linear warmup then inverse-square-root decay.
    pub fn lr(&self, step: u64) -> f32 {
        let warm = self.warmup_steps.max(1) as f32;
        let s = step.max(1) as f32;
        self.peak_lr * (s / warm).min((warm / s).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 {
            return Err(Error::config("batch_tokens", "must be positive"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("lr", "must be a positive finite number"));
        }
        Ok(())
    }
}

/// Reshuffling sampler over one pair's training examples.
#[derive(Debug, Clone)]
pub struct PairBatcher {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    batch_tokens: usize,
}

impl PairBatcher {
    pub fn new(len: usize, batch_tokens: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            rng,
            batch_tokens,
        }
    }

    /// Next examples whose target tokens fit the budget (at least one).
    pub fn next_batch(&mut self, corpus: &Corpus) -> Vec<Example> {
        let mut out = Vec::new();
        let mut tokens = 0;
        loop {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let ex = &corpus.examples[self.order[self.cursor]];
            let t = ex.tgt.len() + 1;
            if !out.is_empty() && tokens + t > self.batch_tokens {
                break;
            }
            out.push(ex.clone());
            tokens += t;
            self.cursor += 1;
        }
        out
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ a.wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ b.wrapping_add(0x94d0_49bb_1331_11eb)
}

/// Corpus index of each model pair.
fn corpus_indices(model: &TransformerModel, corpora: &CorpusSet) -> Result<Vec<usize>> {
    let pairs = &model.config().language_pairs;
    corpora.check_covers(pairs)?;
    pairs
        .iter()
        .map(|p| {
            corpora
                .pairs
                .iter()
                .position(|q| q == p)
                .ok_or_else(|| Error::data(format!("no corpus for configured pair {p}")))
        })
        .collect()
}

fn check_masks(model: &TransformerModel, masks: &MaskSet) -> Result<()> {
    if masks.pairs != model.config().language_pairs {
        return Err(Error::Mismatch("mask set pairs differ from the model's".into()));
    }
    if masks.masks.iter().any(|m| m.registry() != model.registry()) {
        return Err(Error::Mismatch("mask set was built for a different model shape".into()));
    }
    Ok(())
}

/// Token-weighted dev loss per pair, averaged over pairs.
pub fn dev_loss(model: &TransformerModel, corpora: &CorpusSet, masks: Option<&MaskSet>) -> Result<f64> {
    let idx = corpus_indices(model, corpora)?;
    let mut total = 0.0;
    for (m, &c) in idx.iter().enumerate() {
        let corpus = &corpora.dev[c];
        let mask = masks.map(|s| s.mask(m));
        let (mut loss, mut tokens) = (0.0f64, 0usize);
        for chunk in corpus.examples.chunks(64) {
            let batch = Batch { pair: m, examples: chunk.to_vec() };
            let out = model.forward_train(&batch, ForwardOptions { mask, record: false, dropout: None })?;
            loss += out.loss_value() as f64 * out.target_tokens as f64;
            tokens += out.target_tokens;
        }
        if tokens == 0 {
            return Err(Error::data(format!("empty dev corpus for pair {}", corpus.pair)));
        }
        total += loss / tokens as f64;
    }
    Ok(total / idx.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub steps_run: u64,
    /// `(step, mean train loss since previous entry, dev loss)`.
    pub log: Vec<(u64, f64, f64)>,
    pub best_dev_loss: Option<f64>,
    pub best_step: u64,
}

fn snapshot(model: &TransformerModel) -> Vec<Tensor> {
    model.params.iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore(model: &mut TransformerModel, values: Vec<Tensor>) {
    for (p, v) in model.params.iter_mut().zip(values) {
        p.value = v;
    }
}

/// One optimiser step on `batch`; returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut TransformerModel,
    adam: &Adam,
    step: u64,
    batch: &Batch,
    mask: Option<&Mask>,
    update_masks: Option<&[Option<Vec<bool>>]>,
    dropout: Option<&mut ChaCha8Rng>,
    check_isolation: bool,
) -> Result<f32> {
    model.params.zero_grad();
    let mut out = model.forward_train(batch, ForwardOptions { mask, record: false, dropout })?;
    out.tape.backward(out.loss)?;
    out.tape.accumulate_param_grads(&mut model.params);
    if let (true, Some(frozen)) = (check_isolation, update_masks) {
        for ((_, p), active) in model.params.iter().zip(frozen) {
            if let Some(active) = active {
                if let Some(i) = (0..active.len()).find(|&i| !active[i] && p.grad[i] != 0.0) {
                    return Err(Error::Mismatch(format!(
                        "masked neuron leaked gradient into `{}` element {i}",
                        p.name()
                    )));
                }
            }
        }
    }
    match update_masks {
        Some(frozen) => adam.step_masked(&mut model.params, step, |i| frozen[i].as_deref())?,
        None => adam.step(&mut model.params, step)?,
    }
    Ok(out.loss_value())
}

fn train_loop(
    model: &mut TransformerModel,
    corpora: &CorpusSet,
    schedule: &TrainSchedule,
    masks: Option<&MaskSet>,
    stage: Stage,
) -> Result<TrainReport> {
    schedule.validate()?;
    let idx = corpus_indices(model, corpora)?;
    if let Some(set) = masks {
        check_masks(model, set)?;
    }
    let mut report = TrainReport::default();
    if schedule.total_steps == 0 {
        return Ok(report);
    }
    model.params.reset_optimizer_state();
    let update: Option<Vec<Vec<Option<Vec<bool>>>>> = masks
        .map(|set| set.masks.iter().map(|m| model.update_masks(m)).collect::<Result<_>>())
        .transpose()?;
    let mut batchers: Vec<PairBatcher> = idx
        .iter()
        .enumerate()
        .map(|(m, &c)| {
            PairBatcher::new(
                corpora.train[c].examples.len(),
                schedule.batch_tokens,
                mix(schedule.seed, stage.salt(), m as u64),
            )
        })
        .collect();
    if let Some((m, _)) = idx.iter().enumerate().find(|(_, &c)| corpora.train[c].examples.is_empty()) {
        return Err(Error::data(format!("empty training corpus for pair {}", model.config().language_pairs[m])));
    }
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix(schedule.seed, stage.salt(), u64::MAX));
    let use_dropout = model.config().dropout_rate > 0.0;
    let mut best = (dev_loss(model, corpora, masks)?, 0u64, snapshot(model));
    let mut stale = 0usize;
    let (mut loss_sum, mut loss_n) = (0.0f64, 0usize);
    let pairs = idx.len() as u64;
    for step in 1..=schedule.total_steps {
        let m = ((step - 1) % pairs) as usize;
        let batch = Batch {
            pair: m,
            examples: batchers[m].next_batch(&corpora.train[idx[m]]),
        };
        let adam = Adam::default().with_lr(schedule.lr(step));
        let loss = train_step(
            model,
            &adam,
            step,
            &batch,
            masks.map(|s| s.mask(m)),
            update.as_ref().map(|u| u[m].as_slice()),
            use_dropout.then_some(&mut dropout_rng),
            schedule.check_isolation,
        )?;
        loss_sum += loss as f64;
        loss_n += 1;
        report.steps_run = step;
        let eval_now = step == schedule.total_steps || (schedule.eval_every > 0 && step % schedule.eval_every == 0);
        if eval_now {
            let dev = dev_loss(model, corpora, masks)?;
            report.log.push((step, loss_sum / loss_n as f64, dev));
            (loss_sum, loss_n) = (0.0, 0);
            if dev < best.0 {
                best = (dev, step, snapshot(model));
                stale = 0;
            } else {
                stale += 1;
                if schedule.patience.is_some_and(|p| stale >= p) {
                    break;
                }
            }
        }
    }
    report.best_dev_loss = Some(best.0);
    report.best_step = best.1;
    restore(model, best.2);
    Ok(report)
}

/// Joint unmasked training over all pairs; keeps the best dev-loss weights.
pub fn pretrain(model: &mut TransformerModel, corpora: &CorpusSet, schedule: &TrainSchedule) -> Result<TrainReport> {
    train_loop(model, corpora, schedule, None, Stage::Pretrain)
}

/// Continued training where each pair's batches run under its mask; frozen
/// neurons' parameter elements are never updated. Optimiser state starts
/// fresh.
pub fn finetune(
    model: &mut TransformerModel,
    masks: &MaskSet,
    corpora: &CorpusSet,
    schedule: &TrainSchedule,
) -> Result<TrainReport> {
    train_loop(model, corpora, schedule, Some(masks), Stage::Finetune)
}

/// Importance over at most `cap_tokens` target tokens of each pair's training
/// data, taken in corpus order.
pub fn evaluate_importance(
    model: &TransformerModel,
    corpora: &CorpusSet,
    criterion: Criterion,
    cap_tokens: usize,
    batch_tokens: usize,
) -> Result<ImportanceTable> {
    let idx = corpus_indices(model, corpora)?;
    let mut table = ImportanceTable::new(criterion, model.config().language_pairs.clone(), model.registry().clone());
    for (m, &c) in idx.iter().enumerate() {
        let mut used = 0usize;
        let mut pending: Vec<Example> = Vec::new();
        let mut pending_tokens = 0usize;
        for ex in &corpora.train[c].examples {
            let t = ex.tgt.len() + 1;
            if used + t > cap_tokens && used > 0 {
                break;
            }
            if !pending.is_empty() && pending_tokens + t > batch_tokens {
                accumulate_batch(model, &Batch { pair: m, examples: std::mem::take(&mut pending) }, &mut table)?;
                pending_tokens = 0;
            }
            pending.push(ex.clone());
            pending_tokens += t;
            used += t;
        }
        if !pending.is_empty() {
            accumulate_batch(model, &Batch { pair: m, examples: pending }, &mut table)?;
        }
    }
    table.finalize()?;
    Ok(table)
}

/// Importance evaluation followed by allocation.
pub fn evaluate_and_allocate(
    model: &TransformerModel,
    checkpoint_fingerprint: &str,
    corpora: &CorpusSet,
    criterion: Criterion,
    cap_tokens: usize,
    alloc: &AllocationConfig,
) -> Result<(ImportanceTable, AllocationPlan, Vec<String>)> {
    let mut table = evaluate_importance(model, corpora, criterion, cap_tokens, 400)?;
    table.source_fingerprint = checkpoint_fingerprint.to_string();
    let (plan, warnings) = allocate(&table, alloc)?;
    Ok((table, plan, warnings))
}

/// Greedy exact-match accuracy per model pair on `split`.
pub fn evaluate_accuracy(
    model: &TransformerModel,
    corpora: &CorpusSet,
    split: Split,
    masks: Option<&MaskSet>,
) -> Result<Vec<f64>> {
    let idx = corpus_indices(model, corpora)?;
    idx.iter()
        .enumerate()
        .map(|(m, &c)| {
            let corpus = &corpora.split(split)[c];
            let mask = masks.map(|s| s.mask(m));
            let mut hyps = Vec::with_capacity(corpus.examples.len());
            for chunk in corpus.examples.chunks(64) {
                let srcs: Vec<Vec<u32>> = chunk.iter().map(|e| e.src.clone()).collect();
                hyps.extend(greedy_decode(model, &srcs, mask)?);
            }
            let refs: Vec<Vec<u32>> = corpus.examples.iter().map(|e| e.tgt.clone()).collect();
            exact_match(&hyps, &refs)
        })
        .collect()
}

/// Greedy corpus BLEU per model pair on `split`.
pub fn evaluate_bleu(
    model: &TransformerModel,
    corpora: &CorpusSet,
    split: Split,
    masks: Option<&MaskSet>,
) -> Result<Vec<f64>> {
    let idx = corpus_indices(model, corpora)?;
    idx.iter()
        .enumerate()
        .map(|(m, &c)| {
            let corpus = &corpora.split(split)[c];
            let mask = masks.map(|s| s.mask(m));
            let mut hyps = Vec::with_capacity(corpus.examples.len());
            for chunk in corpus.examples.chunks(64) {
                let srcs: Vec<Vec<u32>> = chunk.iter().map(|e| e.src.clone()).collect();
                hyps.extend(greedy_decode(model, &srcs, mask)?.iter().map(|h| corpora.vocab.decode(h)));
            }
            let refs: Vec<Vec<String>> = corpus.examples.iter().map(|e| corpora.vocab.decode(&e.tgt)).collect();
            bleu(&hyps, &refs)
        })
        .collect()
}

/// Model shape and both training stages of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f32,
    pub pretrain: TrainSchedule,
    pub finetune: TrainSchedule,
    pub criterion: Criterion,
    pub cap_tokens: usize,
    pub alloc: AllocationConfig,
    pub seed: u64,
}

impl PipelineOptions {
    pub fn model_config(&self, corpora: &CorpusSet) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            d_model: self.d_model,
            num_heads: self.num_heads,
            d_ffn: self.d_ffn,
            vocab_size: corpora.vocab.len(),
            max_seq_len: self.max_seq_len,
            dropout_rate: self.dropout_rate,
            language_pairs: corpora.pairs.clone(),
            tie_output: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineArtifacts {
    pub pretrained: PathBuf,
    pub table: PathBuf,
    pub plan: PathBuf,
    pub finetuned: PathBuf,
    pub report: PathBuf,
}

/// Pretrain → importance → allocate → masked fine-tune → report, writing
/// every artifact into `out_dir`.
pub fn run_pipeline(corpora: &CorpusSet, opts: &PipelineOptions, out_dir: &Path) -> Result<PipelineArtifacts> {
    let art = PipelineArtifacts {
        pretrained: out_dir.join("pretrained.ckpt"),
        table: out_dir.join("importance.table"),
        plan: out_dir.join("allocation.plan"),
        finetuned: out_dir.join("finetuned.ckpt"),
        report: out_dir.join("report.txt"),
    };
    let mut model = build_model(opts.model_config(corpora), opts.seed)?;
    let mut meta = CheckpointMeta {
        seed: opts.seed,
        step: 0,
        vocab: corpora.vocab.tokens().to_vec(),
        data_dir: None,
        plan_fingerprint: None,
    };
    let pre = pretrain(&mut model, corpora, &opts.pretrain)?;
    meta.step = pre.steps_run;
    let ckpt_fp = persist::save_checkpoint(&art.pretrained, &model, &meta)?;
    let (table, plan, _) = evaluate_and_allocate(&model, &ckpt_fp, corpora, opts.criterion, opts.cap_tokens, &opts.alloc)?;
    persist::save_table(&art.table, &table)?;
    persist::save_plan(&art.plan, &plan)?;
    let masks = build_mask_set(&plan, model.config())?;
    let fine = finetune(&mut model, &masks, corpora, &opts.finetune)?;
    meta.step += fine.steps_run;
    meta.plan_fingerprint = Some(plan.fingerprint());
    persist::save_checkpoint(&art.finetuned, &model, &meta)?;
    let mut report = AnalysisReport::from_plan(&plan)?;
    let acc = evaluate_accuracy(&model, corpora, Split::Test, Some(&masks))?;
    let bleus = evaluate_bleu(&model, corpora, Split::Test, Some(&masks))?;
    report.accuracy = plan.pairs().iter().cloned().zip(acc).collect();
    report.bleu = plan.pairs().iter().cloned().zip(bleus).collect();
    persist::write_atomic(&art.report, report.render().as_bytes())?;
    Ok(art)
}
