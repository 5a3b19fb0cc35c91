//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::allocation::{allocate, AllocationConfig, AllocationPlan, Variant};
use crate::analysis::{erase_random, export_importance_distribution, parse_site_key, render_distribution, AnalysisReport, EraseTarget};
use crate::config::{RunConfig, SEED_ENV};
use crate::data::{generate_synthetic, read_raw_dir, write_raw_corpora, CorpusSet, PairId, Scenario, Split, SyntheticTaskSpec, Vocab};
use crate::decode::translate;
use crate::error::{Error, Result};
use crate::importance::Criterion;
use crate::mask::{build_mask_set, MaskSet};
use crate::model::{build_model, ModelConfig, TransformerModel};
use crate::persist::{self, CheckpointMeta, LoadedCheckpoint};
use crate::pipeline::{self, evaluate_accuracy, evaluate_bleu, evaluate_importance};

#[derive(Debug, Parser)]
#[command(name = "neuralloc", version, about = "General and language-specific neuron allocation for multilingual translation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multilingual corpus.
    Synth(SynthArgs),
    /// Joint unmasked training on every pair.
    Pretrain(PretrainArgs),
    /// Score neurons per language pair.
    Importance(ImportanceArgs),
    /// Split neurons into general and language-specific sets.
    Allocate(AllocateArgs),
    /// Continue training under per-pair masks.
    Finetune(FinetuneArgs),
    /// Translate a file of source sentences.
    Translate(TranslateArgs),
    /// Exact-match accuracy and BLEU per pair.
    Evaluate(EvaluateArgs),
    /// LScore/MScore report and importance distributions.
    Analyze(AnalyzeArgs),
    /// Zero a random subset of neurons and measure the change in accuracy.
    Erase(EraseArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "one_to_many")]
    scenario: String,
    #[arg(long, default_value_t = 5000)]
    train_size: usize,
    #[arg(long, default_value_t = 200)]
    dev_size: usize,
    #[arg(long, default_value_t = 200)]
    test_size: usize,
    #[arg(long)]
    base_vocab: Option<u32>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
struct TrainFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    batch_tokens: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
}

impl TrainFlags {
    /// File values, then the seed environment override, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env()?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.warmup {
            cfg.warmup = v;
        }
        if let Some(v) = self.batch_tokens {
            cfg.batch_tokens = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if self.patience.is_some() {
            cfg.patience = self.patience;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct ImportanceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "te")]
    criterion: String,
    #[arg(long, default_value_t = 10_000)]
    cap: usize,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the corpus the checkpoint was trained on.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AllocateArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 0.7)]
    k: f64,
    #[arg(long, default_value = "pair")]
    variant: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct TranslateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    pair: String,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long, default_value_t = 0.6)]
    alpha: f32,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Write per-pair importance series of `--site` as TSV.
    #[arg(long)]
    distribution: Option<PathBuf>,
    /// Site for `--distribution`, e.g. `enc:1:ffn_inner`.
    #[arg(long, default_value = "enc:1:ffn_inner")]
    site: String,
}

#[derive(Debug, Args)]
struct EraseArgs {
    #[arg(long)]
    plan: PathBuf,
    /// `general` or `specific:<pair>`.
    #[arg(long)]
    target: String,
    #[arg(long)]
    fraction: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Model to re-evaluate under the erased masks.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| Error::usage(format!("unknown split `{s}` (expected train, dev or test)")))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config("seed", format!("{SEED_ENV}=`{v}` is not an integer"))),
        Err(_) => Ok(None),
    }
}

fn data_dir(flag: Option<&Path>, ckpt: &LoadedCheckpoint) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| ckpt.meta.data_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::usage("no --data given and the checkpoint does not record its corpus"))
}

fn load_corpora(dir: &Path, ckpt: &LoadedCheckpoint) -> Result<CorpusSet> {
    let vocab = Vocab::from_tokens(ckpt.meta.vocab.clone())?;
    CorpusSet::from_raw_with_vocab(&read_raw_dir(dir)?, vocab)
}

/// Plan masks for a checkpoint, checking that the plan belongs to it.
fn plan_masks(plan: &AllocationPlan, plan_path: &Path, ckpt: &LoadedCheckpoint) -> Result<MaskSet> {
    let fp = plan.fingerprint();
    let bound = match &ckpt.meta.plan_fingerprint {
        Some(p) => *p == fp,
        None => plan.provenance.checkpoint_fingerprint.is_empty() || plan.provenance.checkpoint_fingerprint == ckpt.fingerprint,
    };
    if !bound {
        return Err(Error::Mismatch(format!(
            "{} was not derived from this checkpoint (fingerprint mismatch)",
            plan_path.display()
        )));
    }
    build_mask_set(plan, ckpt.model.config())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Importance(a) => importance(a),
        Command::Allocate(a) => allocate_cmd(a),
        Command::Finetune(a) => finetune(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Analyze(a) => analyze(a),
        Command::Erase(a) => erase(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let seed = a.seed.or(env_seed()?).unwrap_or(1);
    let mut spec = SyntheticTaskSpec::one_to_many(a.train_size, seed);
    spec.scenario = match a.scenario.as_str() {
        "one_to_many" => Scenario::OneToMany,
        "many_to_many" => Scenario::ManyToMany,
        other => return Err(Error::usage(format!("unknown scenario `{other}`"))),
    };
    spec.dev_size = a.dev_size;
    spec.test_size = a.test_size;
    if let Some(v) = a.base_vocab {
        spec.base_vocab = v;
    }
    if let Some(v) = a.min_len {
        spec.min_len = v;
    }
    if let Some(v) = a.max_len {
        spec.max_len = v;
    }
    let corpora = generate_synthetic(&spec)?;
    write_raw_corpora(&a.out, &corpora)?;
    println!("synth out={} corpora={}", a.out.display(), corpora.len());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = a.train.resolve()?;
    let raw = read_raw_dir(&a.data)?;
    let corpora = CorpusSet::from_raw(&raw, cfg.max_vocab)?;
    let model_cfg = ModelConfig {
        num_layers: cfg.num_layers,
        d_model: cfg.d_model,
        num_heads: cfg.num_heads,
        d_ffn: cfg.d_ffn,
        vocab_size: corpora.vocab.len(),
        max_seq_len: cfg.max_seq_len,
        dropout_rate: cfg.dropout,
        language_pairs: corpora.pairs.clone(),
        tie_output: cfg.tie_output,
    };
    let mut model = build_model(model_cfg, cfg.seed)?;
    let report = pipeline::pretrain(&mut model, &corpora, &cfg.schedule())?;
    for (step, train, dev) in &report.log {
        eprintln!("step={step} train_loss={train:.5} dev_loss={dev:.5}");
    }
    let data_dir = std::fs::canonicalize(&a.data).unwrap_or(a.data.clone());
    let meta = CheckpointMeta {
        seed: cfg.seed,
        step: report.steps_run,
        vocab: corpora.vocab.tokens().to_vec(),
        data_dir: Some(data_dir.display().to_string()),
        plan_fingerprint: None,
    };
    let fp = persist::save_checkpoint(&a.out, &model, &meta)?;
    println!(
        "pretrain steps={} best_dev_loss={:.6} params={} fingerprint={fp}",
        report.steps_run,
        report.best_dev_loss.unwrap_or(f64::NAN),
        model.num_parameters()
    );
    Ok(())
}

fn importance(a: ImportanceArgs) -> Result<()> {
    let criterion: Criterion = a.criterion.parse()?;
    let ckpt = persist::load_checkpoint(&a.ckpt)?;
    let corpora = load_corpora(&data_dir(a.data.as_deref(), &ckpt)?, &ckpt)?;
    let mut table = evaluate_importance(&ckpt.model, &corpora, criterion, a.cap, 400)?;
    table.source_fingerprint = ckpt.fingerprint.clone();
    let fp = persist::save_table(&a.out, &table)?;
    let counts: Vec<String> = table.counts().iter().map(u64::to_string).collect();
    println!("importance criterion={criterion} tokens={} fingerprint={fp}", counts.join(","));
    Ok(())
}

fn allocate_cmd(a: AllocateArgs) -> Result<()> {
    let variant: Variant = a.variant.parse()?;
    let table = persist::load_table(&a.table)?;
    let cfg = AllocationConfig { rho: a.rho, k: a.k, variant };
    let (plan, warnings) = allocate(&table, &cfg)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let fp = persist::save_plan(&a.out, &plan)?;
    println!(
        "allocate general={} specific={} fingerprint={fp}",
        plan.count_general(),
        plan.count_specific()
    );
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let ckpt = persist::load_checkpoint(&a.ckpt)?;
    let plan = persist::load_plan(&a.plan)?;
    if !plan.provenance.checkpoint_fingerprint.is_empty() && plan.provenance.checkpoint_fingerprint != ckpt.fingerprint {
        return Err(Error::Mismatch(format!(
            "{} was derived from a different checkpoint than {}",
            a.plan.display(),
            a.ckpt.display()
        )));
    }
    let masks = build_mask_set(&plan, ckpt.model.config())?;
    let corpora = load_corpora(&data_dir(a.data.as_deref(), &ckpt)?, &ckpt)?;
    let mut cfg = a.train.resolve()?;
    if a.train.seed.is_none() && env_seed()?.is_none() && a.train.config.is_none() {
        cfg.seed = ckpt.meta.seed;
    }
    let mut model = ckpt.model.clone();
    let report = pipeline::finetune(&mut model, &masks, &corpora, &cfg.schedule())?;
    for (step, train, dev) in &report.log {
        eprintln!("step={step} train_loss={train:.5} dev_loss={dev:.5}");
    }
    let meta = CheckpointMeta {
        step: ckpt.meta.step + report.steps_run,
        plan_fingerprint: Some(plan.fingerprint()),
        ..ckpt.meta.clone()
    };
    let fp = persist::save_checkpoint(&a.out, &model, &meta)?;
    println!(
        "finetune steps={} best_dev_loss={:.6} fingerprint={fp}",
        report.steps_run,
        report.best_dev_loss.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn translate_cmd(a: TranslateArgs) -> Result<()> {
    let ckpt = persist::load_checkpoint(&a.ckpt)?;
    let pair: PairId = a.pair.parse()?;
    let model: &TransformerModel = &ckpt.model;
    let m = model
        .config()
        .language_pairs
        .iter()
        .position(|p| *p == pair)
        .ok_or_else(|| Error::usage(format!("the checkpoint does not serve pair {pair}")))?;
    let masks = match &a.plan {
        Some(path) => Some(plan_masks(&persist::load_plan(path)?, path, &ckpt)?),
        None => None,
    };
    let vocab = Vocab::from_tokens(ckpt.meta.vocab.clone())?;
    let lang = vocab.language_id(pair.target())?;
    let text = persist::read_text(&a.input)?;
    let srcs: Vec<Vec<u32>> = text
        .lines()
        .map(|l| {
            let toks: Vec<String> = l.split_whitespace().map(str::to_string).collect();
            let mut ids = vec![lang];
            ids.extend(vocab.encode(&toks));
            ids
        })
        .collect();
    let outputs = translate(model, &srcs, masks.as_ref().map(|s| s.mask(m)), a.beam, a.alpha)?;
    let mut out = String::new();
    for o in outputs {
        out.push_str(&vocab.decode(&o).join(" "));
        out.push('\n');
    }
    persist::write_atomic(&a.out, out.as_bytes())?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ckpt = persist::load_checkpoint(&a.ckpt)?;
    let split = parse_split(&a.split)?;
    let masks = match &a.plan {
        Some(path) => Some(plan_masks(&persist::load_plan(path)?, path, &ckpt)?),
        None => None,
    };
    let corpora = load_corpora(&data_dir(a.data.as_deref(), &ckpt)?, &ckpt)?;
    let acc = evaluate_accuracy(&ckpt.model, &corpora, split, masks.as_ref())?;
    let bleus = evaluate_bleu(&ckpt.model, &corpora, split, masks.as_ref())?;
    for ((p, a), b) in ckpt.model.config().language_pairs.iter().zip(acc).zip(bleus) {
        println!("evaluate pair={p} accuracy={a:.4} bleu={b:.4}");
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let plan = persist::load_plan(&a.plan)?;
    let table = persist::load_table(&a.table)?;
    let table_fp = persist::table_fingerprint(&table);
    if !plan.provenance.table_fingerprint.is_empty() && plan.provenance.table_fingerprint != table_fp {
        return Err(Error::Mismatch(format!(
            "{} was not allocated from {}",
            a.plan.display(),
            a.table.display()
        )));
    }
    let report = AnalysisReport::from_plan(&plan)?;
    persist::write_atomic(&a.report, report.render().as_bytes())?;
    if let Some(path) = &a.distribution {
        let key = parse_site_key(&a.site)?;
        let series = export_importance_distribution(&table, key, table.pairs())?;
        persist::write_atomic(path, render_distribution(&series).as_bytes())?;
    }
    println!("analyze report={}", a.report.display());
    Ok(())
}

fn erase(a: EraseArgs) -> Result<()> {
    let target: EraseTarget = a.target.parse()?;
    let seed = a.seed.or(env_seed()?).unwrap_or(1);
    let split = parse_split(&a.split)?;
    let plan = persist::load_plan(&a.plan)?;
    let ckpt = persist::load_checkpoint(&a.ckpt)?;
    let masks = plan_masks(&plan, &a.plan, &ckpt)?;
    let erased = erase_random(&masks, &plan, &target, a.fraction, seed)?;
    let corpora = load_corpora(&data_dir(a.data.as_deref(), &ckpt)?, &ckpt)?;
    let before = evaluate_accuracy(&ckpt.model, &corpora, split, Some(&masks))?;
    let after = evaluate_accuracy(&ckpt.model, &corpora, split, Some(&erased))?;
    let mut out = String::new();
    for ((p, b), f) in plan.pairs().iter().zip(&before).zip(&after) {
        out.push_str(&format!(
            "erasure target={} fraction={} seed={seed} pair={p} before={b:.4} after={f:.4} delta={:.4}\n",
            a.target,
            a.fraction,
            f - b
        ));
    }
    print!("{out}");
    if let Some(path) = &a.report {
        persist::write_atomic(path, out.as_bytes())?;
    }
    Ok(())
}
