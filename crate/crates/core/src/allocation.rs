//! Splitting neurons into general and language-specific sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::data::PairId;
use crate::error::{Error, Result};
use crate::importance::{Criterion, ImportanceTable};
use crate::mask::{NeuronRegistry, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Pair,
    SourceSpecific,
    TargetSpecific,
    SeparateEncDec,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Pair => "pair",
            Variant::SourceSpecific => "source",
            Variant::TargetSpecific => "target",
            Variant::SeparateEncDec => "encdec",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair" => Ok(Variant::Pair),
            "source" | "source_specific" => Ok(Variant::SourceSpecific),
            "target" | "target_specific" => Ok(Variant::TargetSpecific),
            "encdec" | "separate_enc_dec" => Ok(Variant::SeparateEncDec),
            _ => Err(Error::usage(format!(
                "unknown variant `{s}` (expected pair, source, target or encdec)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocationConfig {
    pub rho: f64,
    pub k: f64,
    pub variant: Variant,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        Self {
            rho: 0.9,
            k: 0.7,
            variant: Variant::Pair,
        }
    }
}

impl AllocationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config("rho", format!("{} is outside (0, 1]", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.k) {
            return Err(Error::config("k", format!("{} is outside [0, 1]", self.k)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Role {
    General,
    /// Indices into the plan's pair list; never empty.
    Specific(BTreeSet<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub criterion: Criterion,
    pub rho: f64,
    pub k: f64,
    pub variant: Variant,
    pub table_fingerprint: String,
    pub checkpoint_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPlan {
    registry: NeuronRegistry,
    pairs: Vec<PairId>,
    roles: Vec<Role>,
    pub provenance: Provenance,
}

impl AllocationPlan {
    pub fn new(registry: NeuronRegistry, pairs: Vec<PairId>, roles: Vec<Role>, provenance: Provenance) -> Result<Self> {
        if roles.len() != registry.len() {
            return Err(Error::Mismatch(format!(
                "{} roles for {} neurons",
                roles.len(),
                registry.len()
            )));
        }
        for role in &roles {
            if let Role::Specific(set) = role {
                if set.is_empty() {
                    return Err(Error::data("specific neuron with no language pair"));
                }
                if let Some(bad) = set.iter().find(|&&m| m >= pairs.len()) {
                    return Err(Error::data(format!("pair index {bad} out of range")));
                }
            }
        }
        Ok(Self {
            registry,
            pairs,
            roles,
            provenance,
        })
    }

    pub fn registry(&self) -> &NeuronRegistry {
        &self.registry
    }

    pub fn pairs(&self) -> &[PairId] {
        &self.pairs
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn pair_index(&self, pair: &PairId) -> Option<usize> {
        self.pairs.iter().position(|p| p == pair)
    }

    pub fn count_general(&self) -> usize {
        self.roles.iter().filter(|r| **r == Role::General).count()
    }

    pub fn count_specific(&self) -> usize {
        self.roles.len() - self.count_general()
    }

    /// Content hash of the serialised plan.
    pub fn fingerprint(&self) -> String {
        crate::persist::sha256_hex(crate::persist::render_plan(self).as_bytes())
    }
}

/// Scores over a regrouped pair axis. Group `g` covers the pairs in
/// `members[g]`; `rows[g]` is the unweighted mean of their Θ rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub labels: Vec<String>,
    pub members: Vec<Vec<usize>>,
    pub rows: Vec<Vec<f64>>,
}

impl Grouping {
    fn by_key(table: &ImportanceTable, key: impl Fn(&PairId) -> String) -> Grouping {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (m, p) in table.pairs().iter().enumerate() {
            groups.entry(key(p)).or_default().push(m);
        }
        let n = table.registry().len();
        let mut out = Grouping {
            labels: Vec::new(),
            members: Vec::new(),
            rows: Vec::new(),
        };
        for (label, members) in groups {
            let mut row = vec![0.0; n];
            for &m in &members {
                for (r, s) in row.iter_mut().zip(table.row(m)) {
                    *r += s;
                }
            }
            for r in row.iter_mut() {
                *r /= members.len() as f64;
            }
            out.labels.push(label);
            out.members.push(members);
            out.rows.push(row);
        }
        out
    }

    fn identity(table: &ImportanceTable) -> Grouping {
        Grouping {
            labels: table.pairs().iter().map(|p| p.to_string()).collect(),
            members: (0..table.pairs().len()).map(|m| vec![m]).collect(),
            rows: table.rows().to_vec(),
        }
    }

    fn mean(&self, i: usize) -> f64 {
        self.rows.iter().map(|r| r[i]).sum::<f64>() / self.rows.len() as f64
    }
}

/// The pair axis as seen by encoder and decoder neurons under a variant.
#[derive(Debug, Clone, PartialEq)]
pub struct RegroupedScores {
    pub encoder: Grouping,
    pub decoder: Grouping,
}

impl RegroupedScores {
    pub fn for_side(&self, side: Side) -> &Grouping {
        match side {
            Side::Encoder => &self.encoder,
            Side::Decoder => &self.decoder,
        }
    }
}

fn require_finalized(table: &ImportanceTable) -> Result<()> {
    if table.is_finalized() {
        Ok(())
    } else {
        Err(Error::usage("allocation requires a finalized importance table"))
    }
}

pub fn apply_variant(table: &ImportanceTable, variant: Variant) -> Result<RegroupedScores> {
    require_finalized(table)?;
    let source = || Grouping::by_key(table, |p| p.source().to_string());
    let target = || Grouping::by_key(table, |p| p.target().to_string());
    Ok(match variant {
        Variant::Pair => {
            let g = Grouping::identity(table);
            RegroupedScores { encoder: g.clone(), decoder: g }
        }
        Variant::SourceSpecific => {
            let g = source();
            RegroupedScores { encoder: g.clone(), decoder: g }
        }
        Variant::TargetSpecific => {
            let g = target();
            RegroupedScores { encoder: g.clone(), decoder: g }
        }
        Variant::SeparateEncDec => RegroupedScores {
            encoder: source(),
            decoder: target(),
        },
    })
}

/// Round-half-up of `rho · n`.
pub fn general_count(rho: f64, n: usize) -> usize {
    ((rho * n as f64 + 0.5 + 1e-9).floor() as usize).min(n)
}

fn select_by_scores(registry: &NeuronRegistry, rho: f64, score: impl Fn(usize) -> f64) -> Vec<bool> {
    let mut general = vec![false; registry.len()];
    for g in registry.groups() {
        let mut units: Vec<usize> = (0..g.width).collect();
        // Descending importance, ascending unit index on ties.
        units.sort_by(|&a, &b| score(g.offset + b).total_cmp(&score(g.offset + a)).then(a.cmp(&b)));
        for &u in units.iter().take(general_count(rho, g.width)) {
            general[g.offset + u] = true;
        }
    }
    general
}

/// Top-ρ neurons by mean importance within each `(side, layer, site)` group.
pub fn select_general(table: &ImportanceTable, rho: f64) -> Result<Vec<bool>> {
    require_finalized(table)?;
    AllocationConfig { rho, k: 0.0, variant: Variant::Pair }.validate()?;
    let mean = table.mean_importance()?;
    Ok(select_by_scores(table.registry(), rho, |i| mean[i]))
}

/// Indices `g` with `scores[g] ≥ k · max(scores)`; all of them when the
/// maximum is zero.
pub fn threshold_assign(scores: &[f64], k: f64) -> BTreeSet<usize> {
    let max = scores.iter().copied().fold(0.0f64, f64::max);
    let lambda = k * max;
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= lambda)
        .map(|(g, _)| g)
        .collect()
}

/// Full allocation. Returns the plan and any warnings about degenerate
/// all-zero neurons.
pub fn allocate(table: &ImportanceTable, config: &AllocationConfig) -> Result<(AllocationPlan, Vec<String>)> {
    config.validate()?;
    let regrouped = apply_variant(table, config.variant)?;
    let registry = table.registry();
    let side_of: Vec<Side> = registry.ids().map(|id| id.side).collect();
    let general = select_by_scores(registry, config.rho, |i| regrouped.for_side(side_of[i]).mean(i));
    let mut roles = Vec::with_capacity(registry.len());
    let mut warnings = Vec::new();
    for (i, id) in registry.ids().enumerate() {
        if general[i] {
            roles.push(Role::General);
            continue;
        }
        let grouping = regrouped.for_side(id.side);
        let scores: Vec<f64> = grouping.rows.iter().map(|r| r[i]).collect();
        if scores.iter().all(|&s| s == 0.0) {
            warnings.push(format!("neuron {id} has zero importance for every pair; assigned to all pairs"));
        }
        let pairs: BTreeSet<usize> = threshold_assign(&scores, config.k)
            .into_iter()
            .flat_map(|g| grouping.members[g].iter().copied())
            .collect();
        roles.push(Role::Specific(pairs));
    }
    let plan = AllocationPlan::new(
        registry.clone(),
        table.pairs().to_vec(),
        roles,
        Provenance {
            criterion: table.criterion(),
            rho: config.rho,
            k: config.k,
            variant: config.variant,
            table_fingerprint: crate::persist::table_fingerprint(table),
            checkpoint_fingerprint: table.source_fingerprint.clone(),
        },
    )?;
    Ok((plan, warnings))
}

/// Pair-variant assignment of the non-general neurons.
pub fn assign_specific(table: &ImportanceTable, k: f64, general: &[bool]) -> Result<(AllocationPlan, Vec<String>)> {
    require_finalized(table)?;
    if general.len() != table.registry().len() {
        return Err(Error::Mismatch("general set does not match the registry".into()));
    }
    AllocationConfig { rho: 1.0, k, variant: Variant::Pair }.validate()?;
    let mut roles = Vec::with_capacity(general.len());
    let mut warnings = Vec::new();
    for (i, id) in table.registry().ids().enumerate() {
        if general[i] {
            roles.push(Role::General);
            continue;
        }
        let scores: Vec<f64> = table.rows().iter().map(|r| r[i]).collect();
        if scores.iter().all(|&s| s == 0.0) {
            warnings.push(format!("neuron {id} has zero importance for every pair; assigned to all pairs"));
        }
        roles.push(Role::Specific(threshold_assign(&scores, k)));
    }
    let rho = general.iter().filter(|g| **g).count() as f64 / general.len().max(1) as f64;
    let plan = AllocationPlan::new(
        table.registry().clone(),
        table.pairs().to_vec(),
        roles,
        Provenance {
            criterion: table.criterion(),
            rho,
            k,
            variant: Variant::Pair,
            table_fingerprint: crate::persist::table_fingerprint(table),
            checkpoint_fingerprint: table.source_fingerprint.clone(),
        },
    )?;
    Ok((plan, warnings))
}
