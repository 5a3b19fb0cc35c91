//! Corpora, the shared vocabulary and the synthetic multilingual tasks.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<eos>", "<unk>"];

/// Translation direction written `src2tgt`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PairId {
    id: String,
    split_at: usize,
}

impl PairId {
    pub fn new(source: &str, target: &str) -> Result<Self> {
        format!("{source}2{target}").parse()
    }

    pub fn as_str(&self) -> &str {
        &self.id
    }

    pub fn source(&self) -> &str {
        &self.id[..self.split_at]
    }

    pub fn target(&self) -> &str {
        &self.id[self.split_at + 1..]
    }
}

impl FromStr for PairId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let valid_lang = |l: &str| !l.is_empty() && l.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        let twos: Vec<usize> = s.match_indices('2').map(|(i, _)| i).collect();
        match twos.as_slice() {
            [i] if valid_lang(&s[..*i]) && valid_lang(&s[i + 1..]) => Ok(PairId {
                id: s.to_string(),
                split_at: *i,
            }),
            _ => Err(Error::data(format!(
                "cannot parse language pair `{s}` (expected `src2tgt` with exactly one `2`)"
            ))),
        }
    }
}

impl TryFrom<String> for PairId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PairId> for String {
    fn from(p: PairId) -> String {
        p.id
    }
}

impl fmt::Display for PairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Source and target tokens of one sentence pair.
pub type SentencePair = (Vec<String>, Vec<String>);

/// Token strings before vocabulary mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCorpus {
    pub pair: PairId,
    pub split: Split,
    pub sentences: Vec<SentencePair>,
}

/// Shared source/target vocabulary: specials, one token per target
/// language, then corpus tokens in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

pub fn language_token(target_language: &str) -> String {
    format!("<2{target_language}>")
}

impl Vocab {
    /// Rebuild from an ordered token list (as stored in checkpoints).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::data("vocabulary must start with <pad> <eos> <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn language_id(&self, target_language: &str) -> Result<u32> {
        self.get(&language_token(target_language))
            .ok_or_else(|| Error::data(format!("no language token for `{target_language}`")))
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

/// Builds the shared vocabulary over every corpus. `max_size` bounds the
/// total including specials and language tokens.
pub fn build_vocab(corpora: &[RawCorpus], max_size: Option<usize>) -> Result<Vocab> {
    let languages: BTreeSet<&str> = corpora.iter().map(|c| c.pair.target()).collect();
    let mut words = BTreeSet::new();
    for c in corpora {
        for (s, t) in &c.sentences {
            words.extend(s.iter().chain(t).map(String::as_str));
        }
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(languages.iter().map(|l| language_token(l)));
    let reserved: BTreeSet<&str> = tokens.iter().map(String::as_str).collect();
    if let Some(w) = words.iter().find(|w| reserved.contains(*w)) {
        return Err(Error::data(format!("corpus token `{w}` collides with a reserved token")));
    }
    let reserved_len = tokens.len();
    tokens.extend(words.iter().map(|w| w.to_string()));
    if let Some(limit) = max_size {
        if tokens.len() > limit {
            let overflow: Vec<&str> = tokens[limit.max(reserved_len)..].iter().map(String::as_str).collect();
            return Err(Error::data(format!(
                "vocabulary limit {limit} exceeded by {} tokens: {}",
                overflow.len(),
                overflow.join(" ")
            )));
        }
    }
    Vocab::from_tokens(tokens)
}

/// Source ids start with the target-language token; neither side carries EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pair: PairId,
    pub split: Split,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn encode(raw: &RawCorpus, vocab: &Vocab) -> Result<Self> {
        let lang = vocab.language_id(raw.pair.target())?;
        let mut examples = Vec::with_capacity(raw.sentences.len());
        for (i, (s, t)) in raw.sentences.iter().enumerate() {
            if s.is_empty() || t.is_empty() {
                return Err(Error::data(format!("{} {}: empty sentence at line {}", raw.pair, raw.split.name(), i + 1)));
            }
            let mut src = Vec::with_capacity(s.len() + 1);
            src.push(lang);
            src.extend(vocab.encode(s));
            examples.push(Example { src, tgt: vocab.encode(t) });
        }
        Ok(Self {
            pair: raw.pair.clone(),
            split: raw.split,
            examples,
        })
    }

    pub fn target_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.tgt.len() + 1).sum()
    }
}

/// All splits of every configured pair, indexed like `pairs`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSet {
    pub vocab: Vocab,
    pub pairs: Vec<PairId>,
    pub train: Vec<Corpus>,
    pub dev: Vec<Corpus>,
    pub test: Vec<Corpus>,
}

impl CorpusSet {
    /// Builds the vocabulary over every split and encodes all corpora.
    pub fn from_raw(raw: &[RawCorpus], max_vocab: Option<usize>) -> Result<Self> {
        let vocab = build_vocab(raw, max_vocab)?;
        Self::from_raw_with_vocab(raw, vocab)
    }

    pub fn from_raw_with_vocab(raw: &[RawCorpus], vocab: Vocab) -> Result<Self> {
        let pairs: Vec<PairId> = raw
            .iter()
            .map(|c| c.pair.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let pick = |split: Split| -> Result<Vec<Corpus>> {
            pairs
                .iter()
                .map(|p| {
                    let r = raw
                        .iter()
                        .find(|c| &c.pair == p && c.split == split)
                        .ok_or_else(|| Error::data(format!("missing {} corpus for pair {p}", split.name())))?;
                    Corpus::encode(r, &vocab)
                })
                .collect()
        };
        Ok(Self {
            train: pick(Split::Train)?,
            dev: pick(Split::Dev)?,
            test: pick(Split::Test)?,
            vocab,
            pairs,
        })
    }

    pub fn split(&self, split: Split) -> &[Corpus] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Fails unless every pair in `pairs` has a training corpus.
    pub fn check_covers(&self, pairs: &[PairId]) -> Result<()> {
        for p in pairs {
            if !self.pairs.contains(p) {
                return Err(Error::data(format!("no corpus for configured pair {p}")));
            }
        }
        if self.pairs.len() != pairs.len() {
            return Err(Error::data("corpus pairs differ from configured pairs"));
        }
        Ok(())
    }
}

// ---- files --------------------------------------------------------------

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

/// Reads `<dir>/<pair>/<split>.src` and `.tgt`, one sentence per line.
pub fn read_raw_corpus(dir: &Path, pair: &PairId, split: Split) -> Result<RawCorpus> {
    let base = dir.join(pair.as_str());
    let src_path = base.join(format!("{}.src", split.name()));
    let tgt_path = base.join(format!("{}.tgt", split.name()));
    let src = read_lines(&src_path)?;
    let tgt = read_lines(&tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::data(format!(
            "{pair} {}: line count mismatch: {} source lines vs {} target lines",
            split.name(),
            src.len(),
            tgt.len()
        )));
    }
    Ok(RawCorpus {
        pair: pair.clone(),
        split,
        sentences: src.into_iter().zip(tgt).collect(),
    })
}

/// Loads one encoded corpus using an existing vocabulary.
pub fn load_corpus(dir: &Path, pair: &PairId, split: Split, vocab: &Vocab) -> Result<Corpus> {
    Corpus::encode(&read_raw_corpus(dir, pair, split)?, vocab)
}

/// Pair directories under `dir`, sorted.
pub fn discover_pairs(dir: &Path) -> Result<Vec<PairId>> {
    let mut pairs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            pairs.push(entry.file_name().to_string_lossy().parse::<PairId>()?);
        }
    }
    pairs.sort();
    if pairs.is_empty() {
        return Err(Error::data(format!("no pair directories under {}", dir.display())));
    }
    Ok(pairs)
}

pub fn read_raw_dir(dir: &Path) -> Result<Vec<RawCorpus>> {
    let mut out = Vec::new();
    for pair in discover_pairs(dir)? {
        for split in Split::ALL {
            out.push(read_raw_corpus(dir, &pair, split)?);
        }
    }
    Ok(out)
}

pub fn write_raw_corpora(dir: &Path, corpora: &[RawCorpus]) -> Result<()> {
    for c in corpora {
        let base = dir.join(c.pair.as_str());
        std::fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
        let join = |side: usize| {
            let mut s = String::new();
            for pair in &c.sentences {
                let toks = if side == 0 { &pair.0 } else { &pair.1 };
                s.push_str(&toks.join(" "));
                s.push('\n');
            }
            s
        };
        for (side, ext) in [(0, "src"), (1, "tgt")] {
            let path = base.join(format!("{}.{ext}", c.split.name()));
            crate::persist::write_atomic(&path, join(side).as_bytes())?;
        }
    }
    Ok(())
}

// ---- synthetic tasks ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    OneToMany,
    ManyToMany,
}

/// Deterministic bijection on base-vocabulary sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transform {
    IdentityCopy,
    Reversal,
    VocabShift(u32),
}

impl Transform {
    pub fn apply(&self, ids: &[u32], base_vocab: u32) -> Vec<u32> {
        match *self {
            Transform::IdentityCopy => ids.to_vec(),
            Transform::Reversal => ids.iter().rev().copied().collect(),
            Transform::VocabShift(k) => ids.iter().map(|&i| (i + k) % base_vocab).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub scenario: Scenario,
    pub base_vocab: u32,
    pub min_len: usize,
    pub max_len: usize,
    /// Source language of the one-to-many scenario; written untransformed.
    pub source_language: String,
    pub languages: Vec<(String, Transform)>,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// One source, three targets: copy, reversal and a vocabulary shift.
    pub fn one_to_many(train_size: usize, seed: u64) -> Self {
        Self {
            scenario: Scenario::OneToMany,
            base_vocab: 24,
            min_len: 4,
            max_len: 10,
            source_language: "src".into(),
            languages: vec![
                ("cp".into(), Transform::IdentityCopy),
                ("rv".into(), Transform::Reversal),
                ("sh".into(), Transform::VocabShift(7)),
            ],
            train_size,
            dev_size: 200,
            test_size: 200,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.base_vocab < 2 {
            return Err(Error::config("base_vocab", "must be at least 2"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("sentence length", "need 1 <= min_len <= max_len"));
        }
        if self.languages.is_empty() {
            return Err(Error::config("languages", "at least one language required"));
        }
        let mut seen = BTreeSet::new();
        for (name, t) in &self.languages {
            if let Transform::VocabShift(k) = t {
                if *k == 0 || *k >= self.base_vocab {
                    return Err(Error::config(
                        "vocab_shift",
                        format!("offset {k} needs a base vocabulary larger than {k} (have {})", self.base_vocab),
                    ));
                }
            }
            if !seen.insert(*t) {
                return Err(Error::config("languages", format!("`{name}` repeats another language's transform")));
            }
        }
        Ok(())
    }

    /// Pairs in generation order with their source/target transforms.
    fn pairs(&self) -> Result<Vec<(PairId, Transform, Transform)>> {
        match self.scenario {
            Scenario::OneToMany => self
                .languages
                .iter()
                .map(|(l, t)| Ok((PairId::new(&self.source_language, l)?, Transform::IdentityCopy, *t)))
                .collect(),
            Scenario::ManyToMany => {
                let mut out = Vec::new();
                for (a, ta) in &self.languages {
                    for (b, tb) in &self.languages {
                        if a != b {
                            out.push((PairId::new(a, b)?, *ta, *tb));
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

fn word(id: u32) -> String {
    format!("w{id}")
}

/// FNV-1a; decides the split of a base sentence independently of the pair.
fn split_bucket(ids: &[u32]) -> Split {
    let mut h: u64 = 0xcbf29ce484222325;
    for &i in ids {
        for b in i.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    match h % 20 {
        0 => Split::Test,
        1 => Split::Dev,
        _ => Split::Train,
    }
}

/// Generates train/dev/test corpora for every pair of the scenario.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<Vec<RawCorpus>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (pair_idx, (pair, src_t, tgt_t)) in spec.pairs()?.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(pair_idx as u64));
        let quota = |s: Split| match s {
            Split::Train => spec.train_size,
            Split::Dev => spec.dev_size,
            Split::Test => spec.test_size,
        };
        let mut buckets: HashMap<usize, Vec<SentencePair>> = HashMap::new();
        let mut seen = std::collections::HashSet::new();
        let wanted = spec.train_size + spec.dev_size + spec.test_size;
        let mut filled = 0;
        let mut attempts = 0usize;
        while filled < wanted {
            attempts += 1;
            if attempts > 200 * wanted.max(1) {
                return Err(Error::data(format!(
                    "{pair}: cannot draw {wanted} distinct sentences from the configured length/vocabulary range"
                )));
            }
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let base: Vec<u32> = (0..len).map(|_| rng.gen_range(0..spec.base_vocab)).collect();
            let split = split_bucket(&base);
            let slot = buckets.entry(split as usize).or_default();
            if slot.len() >= quota(split) || !seen.insert(base.clone()) {
                continue;
            }
            let src = src_t.apply(&base, spec.base_vocab).into_iter().map(word).collect();
            let tgt = tgt_t.apply(&base, spec.base_vocab).into_iter().map(word).collect();
            slot.push((src, tgt));
            filled += 1;
        }
        for split in Split::ALL {
            out.push(RawCorpus {
                pair: pair.clone(),
                split,
                sentences: buckets.remove(&(split as usize)).unwrap_or_default(),
            });
        }
    }
    Ok(out)
}
