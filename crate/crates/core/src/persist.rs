//! On-disk formats for checkpoints, importance tables, plans and masks.
//!
//! Every format starts with a magic/version marker; a mismatch fails
//! instead of reinterpreting bytes.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use neuralloc_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocation::{AllocationPlan, Provenance, Role, Variant};
use crate::data::PairId;
use crate::error::{Error, Result};
use crate::importance::{Criterion, ImportanceTable};
use crate::mask::{Mask, MaskSet, NeuronRegistry, SiteKey};
use crate::model::{build_model, ModelConfig, TransformerModel};

const CHECKPOINT_MAGIC: &[u8; 8] = b"NALLOCK\0";
const CHECKPOINT_VERSION: u32 = 1;
const TABLE_HEADER: &str = "neuralloc-importance";
const PLAN_HEADER: &str = "neuralloc-plan";
const MASK_HEADER: &str = "neuralloc-masks";
const TEXT_VERSION: &str = "v1";

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::usage(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn fp_or_dash(fp: &str) -> &str {
    if fp.is_empty() {
        "-"
    } else {
        fp
    }
}

fn dash_to_empty(s: &str) -> String {
    if s == "-" {
        String::new()
    } else {
        s.to_string()
    }
}

// ---- checkpoints ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
    pub vocab: Vec<String>,
    /// Corpus directory the model was trained on, if known.
    pub data_dir: Option<String>,
    /// Plan the model was fine-tuned under, if any.
    #[serde(default)]
    pub plan_fingerprint: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

pub fn checkpoint_bytes(model: &TransformerModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config().clone(),
        meta: meta.clone(),
        params: model
            .params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name().to_string(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::data(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Saves and returns the checkpoint fingerprint.
pub fn save_checkpoint(path: &Path, model: &TransformerModel, meta: &CheckpointMeta) -> Result<String> {
    let bytes = checkpoint_bytes(model, meta)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: TransformerModel,
    pub meta: CheckpointMeta,
    pub fingerprint: String,
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<LoadedCheckpoint> {
    let bad = |what: &str| Error::data(format!("corrupt checkpoint: {what}"));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            kind: "checkpoint",
            found: version.to_string(),
            expected: "1",
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
    let json = body.get(..header_len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::data(format!("corrupt checkpoint header: {e}")))?;
    let mut model = build_model(header.config, header.meta.seed)?;
    if header.params.len() != model.params.len() {
        return Err(bad("parameter list does not match the config"));
    }
    let mut cursor = &body[header_len..];
    for (entry, p) in header.params.iter().zip(model.params.iter_mut()) {
        if entry.name != p.name() || entry.shape != p.value.shape() {
            return Err(bad(&format!("unexpected parameter `{}`", entry.name)));
        }
        let n = p.value.numel();
        let raw = cursor.get(..4 * n).ok_or_else(|| bad("truncated parameter data"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        p.value = Tensor::new(entry.shape.clone(), data)?;
        cursor = &cursor[4 * n..];
    }
    if !cursor.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(LoadedCheckpoint {
        model,
        meta: header.meta,
        fingerprint: sha256_hex(bytes),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    parse_checkpoint(&read_bytes(path)?)
}

// ---- shared text helpers ----------------------------------------------

struct Lines<'a> {
    kind: &'static str,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(kind: &'static str, text: &'a str, header: &str) -> Result<Self> {
        let mut iter = text.lines().enumerate();
        let first = iter.next().map(|(_, l)| l).unwrap_or("");
        let mut parts = first.split_whitespace();
        if parts.next() != Some(header) {
            return Err(Error::data(format!("not a {kind} file (missing `{header}` header)")));
        }
        let version = parts.next().unwrap_or("");
        if version != TEXT_VERSION {
            return Err(Error::Version {
                kind,
                found: version.to_string(),
                expected: TEXT_VERSION,
            });
        }
        Ok(Self { kind, iter })
    }

    fn field(&mut self, name: &str) -> Result<Vec<&'a str>> {
        let (n, line) = self
            .iter
            .next()
            .ok_or_else(|| Error::data(format!("{} file ends before `{name}`", self.kind)))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(name) {
            return Err(Error::data(format!("{} line {}: expected `{name}`", self.kind, n + 1)));
        }
        Ok(parts.collect())
    }

    fn single(&mut self, name: &str) -> Result<&'a str> {
        let v = self.field(name)?;
        match v.as_slice() {
            [one] => Ok(one),
            _ => Err(Error::data(format!("{} field `{name}` expects one value", self.kind))),
        }
    }

    fn err(&self, line: usize, msg: impl std::fmt::Display) -> Error {
        Error::data(format!("{} line {}: {msg}", self.kind, line + 1))
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::data(format!("invalid {what} `{s}`")))
}

fn parse_pairs(values: &[&str]) -> Result<Vec<PairId>> {
    values.iter().map(|p| p.parse()).collect()
}

fn join_pairs(pairs: &[PairId]) -> String {
    pairs.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(" ")
}

/// Rebuilds a registry from records listed in canonical order.
struct RegistryBuilder {
    groups: Vec<(SiteKey, usize)>,
}

impl RegistryBuilder {
    fn push(&mut self, key: SiteKey, unit: usize) -> std::result::Result<(), String> {
        match self.groups.last_mut() {
            Some((k, w)) if *k == key => {
                if unit != *w {
                    return Err(format!("unit {unit} out of order (expected {w})"));
                }
                *w += 1;
            }
            _ => {
                if unit != 0 {
                    return Err(format!("site {key} must start at unit 0"));
                }
                self.groups.push((key, 1));
            }
        }
        Ok(())
    }
}

fn parse_neuron(parts: &[&str]) -> Result<(SiteKey, usize)> {
    let [side, layer, site, unit, ..] = parts else {
        return Err(Error::data("record needs side, layer, site and unit"));
    };
    Ok((
        SiteKey {
            side: side.parse()?,
            layer: parse_num(layer, "layer")?,
            site: site.parse()?,
        },
        parse_num(unit, "unit")?,
    ))
}

// ---- importance tables -------------------------------------------------

pub fn render_table(table: &ImportanceTable) -> String {
    let mut out = String::new();
    out.push_str(&format!("{TABLE_HEADER} {TEXT_VERSION}\n"));
    out.push_str(&format!("criterion {}\n", table.criterion()));
    out.push_str(&format!("finalized {}\n", table.is_finalized()));
    out.push_str(&format!("pairs {}\n", join_pairs(table.pairs())));
    let counts: Vec<String> = table.counts().iter().map(u64::to_string).collect();
    out.push_str(&format!("counts {}\n", counts.join(" ")));
    out.push_str(&format!("registry {}\n", table.registry().len()));
    out.push_str(&format!("checkpoint {}\n", fp_or_dash(&table.source_fingerprint)));
    for (i, id) in table.registry().ids().enumerate() {
        out.push_str(&format!("{} {} {} {}", id.side.name(), id.layer, id.site.name(), id.unit));
        for row in table.rows() {
            out.push_str(&format!(" {}", row[i]));
        }
        out.push('\n');
    }
    out
}

pub fn table_fingerprint(table: &ImportanceTable) -> String {
    sha256_hex(render_table(table).as_bytes())
}

pub fn parse_table(text: &str) -> Result<ImportanceTable> {
    let mut lines = Lines::new("importance table", text, TABLE_HEADER)?;
    let criterion: Criterion = lines.single("criterion")?.parse()?;
    if lines.single("finalized")? != "true" {
        return Err(Error::data("importance table was saved before finalization"));
    }
    let pairs = parse_pairs(&lines.field("pairs")?)?;
    let counts: Vec<u64> = lines.field("counts")?.iter().map(|c| parse_num(c, "count")).collect::<Result<_>>()?;
    let declared: usize = parse_num(lines.single("registry")?, "registry size")?;
    let checkpoint = dash_to_empty(lines.single("checkpoint")?);
    let mut builder = RegistryBuilder { groups: Vec::new() };
    let mut rows: Vec<Vec<f64>> = vec![Vec::with_capacity(declared); pairs.len()];
    while let Some((n, line)) = lines.iter.next() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        let (key, unit) = parse_neuron(&parts).map_err(|e| lines.err(n, e))?;
        builder.push(key, unit).map_err(|e| lines.err(n, e))?;
        if parts.len() != 4 + pairs.len() {
            return Err(lines.err(n, format!("expected {} scores", pairs.len())));
        }
        for (row, s) in rows.iter_mut().zip(&parts[4..]) {
            row.push(parse_num(s, "score").map_err(|e| lines.err(n, e))?);
        }
    }
    let registry = NeuronRegistry::from_groups(builder.groups)?;
    if registry.len() != declared {
        return Err(Error::data(format!(
            "importance table declares {declared} neurons but lists {}",
            registry.len()
        )));
    }
    let mut table = ImportanceTable::from_scores(criterion, pairs, registry, rows, counts)?;
    table.source_fingerprint = checkpoint;
    Ok(table)
}

pub fn save_table(path: &Path, table: &ImportanceTable) -> Result<String> {
    if !table.is_finalized() {
        return Err(Error::usage("only finalized importance tables can be saved"));
    }
    let text = render_table(table);
    write_atomic(path, text.as_bytes())?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn load_table(path: &Path) -> Result<ImportanceTable> {
    parse_table(&read_text(path)?)
}

// ---- allocation plans --------------------------------------------------

pub fn render_plan(plan: &AllocationPlan) -> String {
    let p = &plan.provenance;
    let mut out = String::new();
    out.push_str(&format!("{PLAN_HEADER} {TEXT_VERSION}\n"));
    out.push_str(&format!("pairs {}\n", join_pairs(plan.pairs())));
    out.push_str(&format!("registry {}\n", plan.registry().len()));
    out.push_str(&format!("criterion {}\n", p.criterion));
    out.push_str(&format!("rho {}\n", p.rho));
    out.push_str(&format!("k {}\n", p.k));
    out.push_str(&format!("variant {}\n", p.variant));
    out.push_str(&format!("table {}\n", fp_or_dash(&p.table_fingerprint)));
    out.push_str(&format!("checkpoint {}\n", fp_or_dash(&p.checkpoint_fingerprint)));
    for (id, role) in plan.registry().ids().zip(plan.roles()) {
        out.push_str(&format!("{} {} {} {} ", id.side.name(), id.layer, id.site.name(), id.unit));
        match role {
            Role::General => out.push_str("GENERAL"),
            Role::Specific(set) => {
                let names: Vec<&str> = set.iter().map(|&m| plan.pairs()[m].as_str()).collect();
                out.push_str("SPECIFIC:");
                out.push_str(&names.join(","));
            }
        }
        out.push('\n');
    }
    out
}

pub fn parse_plan(text: &str) -> Result<AllocationPlan> {
    let mut lines = Lines::new("plan", text, PLAN_HEADER)?;
    let pairs = parse_pairs(&lines.field("pairs")?)?;
    let declared: usize = parse_num(lines.single("registry")?, "registry size")?;
    let criterion: Criterion = lines.single("criterion")?.parse()?;
    let rho: f64 = parse_num(lines.single("rho")?, "rho")?;
    let k: f64 = parse_num(lines.single("k")?, "k")?;
    let variant: Variant = lines.single("variant")?.parse()?;
    let table_fingerprint = dash_to_empty(lines.single("table")?);
    let checkpoint_fingerprint = dash_to_empty(lines.single("checkpoint")?);
    let mut builder = RegistryBuilder { groups: Vec::new() };
    let mut roles = Vec::with_capacity(declared);
    while let Some((n, line)) = lines.iter.next() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        if parts.len() != 5 {
            return Err(lines.err(n, "expected `side layer site unit ROLE`"));
        }
        let (key, unit) = parse_neuron(&parts).map_err(|e| lines.err(n, e))?;
        builder.push(key, unit).map_err(|e| lines.err(n, e))?;
        let role = match parts[4] {
            "GENERAL" => Role::General,
            other => {
                let list = other
                    .strip_prefix("SPECIFIC:")
                    .ok_or_else(|| lines.err(n, format!("unknown role `{other}`")))?;
                let mut set = BTreeSet::new();
                for name in list.split(',').filter(|s| !s.is_empty()) {
                    let id: PairId = name.parse()?;
                    let m = pairs
                        .iter()
                        .position(|p| *p == id)
                        .ok_or_else(|| lines.err(n, format!("unknown pair `{name}`")))?;
                    set.insert(m);
                }
                Role::Specific(set)
            }
        };
        roles.push(role);
    }
    let registry = NeuronRegistry::from_groups(builder.groups)?;
    if registry.len() != declared {
        return Err(Error::data(format!(
            "plan declares {declared} neurons but lists {}",
            registry.len()
        )));
    }
    AllocationPlan::new(
        registry,
        pairs,
        roles,
        Provenance {
            criterion,
            rho,
            k,
            variant,
            table_fingerprint,
            checkpoint_fingerprint,
        },
    )
}

pub fn save_plan(path: &Path, plan: &AllocationPlan) -> Result<String> {
    let text = render_plan(plan);
    write_atomic(path, text.as_bytes())?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn load_plan(path: &Path) -> Result<AllocationPlan> {
    parse_plan(&read_text(path)?)
}

// ---- mask sets ---------------------------------------------------------

pub fn render_masks(set: &MaskSet) -> String {
    let mut out = format!("{MASK_HEADER} {TEXT_VERSION}\n");
    out.push_str(&format!("plan {}\n", fp_or_dash(&set.plan_fingerprint)));
    out.push_str(&format!("pairs {}\n", join_pairs(&set.pairs)));
    let registry = set.masks.first().map(|m| m.registry().clone());
    if let Some(reg) = &registry {
        for g in reg.groups() {
            out.push_str(&format!("site {} {}\n", g.key, g.width));
        }
    }
    for (pair, mask) in set.pairs.iter().zip(&set.masks) {
        let bits: String = mask.bits().iter().map(|&b| if b { '1' } else { '0' }).collect();
        out.push_str(&format!("mask {pair} {bits}\n"));
    }
    out
}

pub fn parse_masks(text: &str) -> Result<MaskSet> {
    let mut lines = Lines::new("mask set", text, MASK_HEADER)?;
    let plan_fingerprint = dash_to_empty(lines.single("plan")?);
    let pairs = parse_pairs(&lines.field("pairs")?)?;
    let mut groups = Vec::new();
    let mut masks = Vec::new();
    let mut registry: Option<NeuronRegistry> = None;
    for (n, line) in lines.iter.by_ref() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [] => continue,
            ["site", side, layer, site, width] => {
                let key = SiteKey {
                    side: side.parse()?,
                    layer: parse_num(layer, "layer")?,
                    site: site.parse()?,
                };
                groups.push((key, parse_num(width, "width")?));
            }
            ["mask", pair, bits] => {
                let reg = match &registry {
                    Some(r) => r,
                    None => registry.insert(NeuronRegistry::from_groups(std::mem::take(&mut groups))?),
                };
                let expected = pairs.get(masks.len()).map(|p| p.as_str());
                if expected != Some(*pair) {
                    return Err(Error::data(format!("mask set line {}: unexpected pair `{pair}`", n + 1)));
                }
                let bits: Vec<bool> = bits
                    .chars()
                    .map(|c| match c {
                        '1' => Ok(true),
                        '0' => Ok(false),
                        _ => Err(Error::data(format!("mask set line {}: invalid bit `{c}`", n + 1))),
                    })
                    .collect::<Result<_>>()?;
                masks.push(Mask::from_bits(reg, bits)?);
            }
            _ => return Err(Error::data(format!("mask set line {}: unrecognised record", n + 1))),
        }
    }
    if masks.len() != pairs.len() {
        return Err(Error::data(format!("mask set lists {} masks for {} pairs", masks.len(), pairs.len())));
    }
    Ok(MaskSet {
        pairs,
        masks,
        plan_fingerprint,
    })
}
