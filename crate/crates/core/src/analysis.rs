//! BLEU, allocation structure metrics, importance export and neuron erasure.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::allocation::{general_count, AllocationPlan, Role};
use crate::data::PairId;
use crate::error::{Error, Result};
use crate::importance::ImportanceTable;
use crate::mask::{MaskSet, Side, Site, SiteKey};

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU (4-gram, single reference, exponential smoothing), in
/// `[0, 100]`.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::usage("BLEU of an empty corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::usage(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            matches[n - 1] += h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    if matches[0] == 0 {
        return Ok(0.0);
    }
    let mut smooth = 1.0f64;
    let mut log_sum = 0.0f64;
    for n in 0..MAX_ORDER {
        if totals[n] == 0 {
            return Ok(0.0);
        }
        let p = if matches[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / MAX_ORDER as f64).exp())
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

/// Fraction of sequences reproduced exactly.
pub fn exact_match(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::usage("exact match needs equal, non-empty lists"));
    }
    let hits = hypotheses.iter().zip(references).filter(|(h, r)| h == r).count();
    Ok(hits as f64 / hypotheses.len() as f64)
}

fn specific_sets<'a>(
    plan: &'a AllocationPlan,
    keep: impl Fn(SiteKey) -> bool + 'a,
) -> impl Iterator<Item = &'a std::collections::BTreeSet<usize>> + 'a {
    plan.registry()
        .ids()
        .zip(plan.roles())
        .filter(move |(id, _)| keep(id.key()))
        .filter_map(|(_, role)| match role {
            Role::Specific(set) => Some(set),
            Role::General => None,
        })
}

/// Fraction of the specific neurons in one side/layer assigned to `pair`.
pub fn lscore(plan: &AllocationPlan, side: Side, layer: usize, pair: usize) -> Result<f64> {
    let sets: Vec<_> = specific_sets(plan, |k| k.side == side && k.layer == layer).collect();
    if sets.is_empty() {
        return Err(Error::data(format!("no specific neurons in layer {} {layer}", side.name())));
    }
    Ok(sets.iter().filter(|s| s.contains(&pair)).count() as f64 / sets.len() as f64)
}

/// Mean over pairs of the fraction of a module's specific neurons assigned
/// to each pair.
pub fn mscore(plan: &AllocationPlan, key: SiteKey) -> Result<f64> {
    let sets: Vec<_> = specific_sets(plan, |k| k == key).collect();
    if sets.is_empty() {
        return Err(Error::data(format!("no specific neurons in layer {key}")));
    }
    let m = plan.pairs().len();
    let total: f64 = (0..m)
        .map(|p| sets.iter().filter(|s| s.contains(&p)).count() as f64 / sets.len() as f64)
        .sum();
    Ok(total / m as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EraseTarget {
    General,
    Specific(PairId),
}

impl FromStr for EraseTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(EraseTarget::General),
            other => match other.strip_prefix("specific:") {
                Some(pair) => Ok(EraseTarget::Specific(pair.parse()?)),
                None => Err(Error::usage(format!(
                    "unknown erase target `{s}` (expected general or specific:<pair>)"
                ))),
            },
        }
    }
}

/// Clears the bits of a seeded uniform sample of `round(fraction · population)`
/// neurons of the targeted role in every pair's mask.
pub fn erase_random(
    mask_set: &MaskSet,
    plan: &AllocationPlan,
    target: &EraseTarget,
    fraction: f64,
    seed: u64,
) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config("fraction", format!("{fraction} is outside [0, 1]")));
    }
    let pair = match target {
        EraseTarget::General => None,
        EraseTarget::Specific(p) => Some(
            plan.pair_index(p)
                .ok_or_else(|| Error::usage(format!("pair {p} is not in the plan")))?,
        ),
    };
    let population: Vec<usize> = plan
        .roles()
        .iter()
        .enumerate()
        .filter(|(_, role)| match (role, pair) {
            (Role::General, None) => true,
            (Role::Specific(set), Some(m)) => set.contains(&m),
            _ => false,
        })
        .map(|(i, _)| i)
        .collect();
    if population.is_empty() {
        return Err(Error::data("erasure target has no neurons"));
    }
    let count = general_count(fraction, population.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = mask_set.clone();
    for pick in sample(&mut rng, population.len(), count).into_iter() {
        for mask in &mut out.masks {
            mask.set(population[pick], false);
        }
    }
    Ok(out)
}

/// Per-pair `(unit, Θ^m)` points of one site.
pub type Distribution = Vec<(PairId, Vec<(usize, f64)>)>;

/// `(unit, Θ^m)` series for one site, per requested pair.
pub fn export_importance_distribution(
    table: &ImportanceTable,
    key: SiteKey,
    pairs: &[PairId],
) -> Result<Distribution> {
    if !table.is_finalized() {
        return Err(Error::usage("distribution export requires a finalized table"));
    }
    let group = *table
        .registry()
        .group(key)
        .ok_or_else(|| Error::usage(format!("unknown site {key}")))?;
    pairs
        .iter()
        .map(|p| {
            let m = table
                .pairs()
                .iter()
                .position(|q| q == p)
                .ok_or_else(|| Error::usage(format!("pair {p} is not in the table")))?;
            let series = (0..group.width).map(|u| (u, table.row(m)[group.offset + u])).collect();
            Ok((p.clone(), series))
        })
        .collect()
}

/// Tab-separated `pair unit score` rows with a header.
pub fn render_distribution(series: &[(PairId, Vec<(usize, f64)>)]) -> String {
    let mut out = String::from("pair\tunit\tscore\n");
    for (pair, points) in series {
        for (unit, score) in points {
            let _ = writeln!(out, "{pair}\t{unit}\t{score}");
        }
    }
    out
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::usage("spearman needs two equal-length series of at least 2 points"));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::data("spearman correlation undefined for a constant series"));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Structural and quality summary of one allocation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalysisReport {
    pub pairs: Vec<PairId>,
    pub bleu: Vec<(PairId, f64)>,
    pub accuracy: Vec<(PairId, f64)>,
    /// `(side, layer, per-pair LScore)`; layers without specific neurons are omitted.
    pub lscore: Vec<(Side, usize, Vec<f64>)>,
    pub mscore: Vec<(SiteKey, f64)>,
    /// `(configuration, pair, delta)`.
    pub erasure: Vec<(String, PairId, f64)>,
    pub general: usize,
    pub specific: usize,
}

impl AnalysisReport {
    pub fn from_plan(plan: &AllocationPlan) -> Result<Self> {
        let mut report = AnalysisReport {
            pairs: plan.pairs().to_vec(),
            general: plan.count_general(),
            specific: plan.count_specific(),
            ..Default::default()
        };
        for side in [Side::Encoder, Side::Decoder] {
            for layer in plan.registry().layers(side) {
                if let Ok(first) = lscore(plan, side, layer, 0) {
                    let mut row = vec![first];
                    for m in 1..plan.pairs().len() {
                        row.push(lscore(plan, side, layer, m)?);
                    }
                    report.lscore.push((side, layer, row));
                }
            }
        }
        for g in plan.registry().groups() {
            if let Ok(v) = mscore(plan, g.key) {
                report.mscore.push((g.key, v));
            }
        }
        Ok(report)
    }

    /// One `key=value` record per line.
    pub fn render(&self) -> String {
        let mut out = String::from("report version=1\n");
        let pairs: Vec<&str> = self.pairs.iter().map(|p| p.as_str()).collect();
        let _ = writeln!(out, "plan pairs={} general={} specific={}", pairs.join(","), self.general, self.specific);
        for (p, v) in &self.bleu {
            let _ = writeln!(out, "bleu pair={p} value={v:.4}");
        }
        for (p, v) in &self.accuracy {
            let _ = writeln!(out, "accuracy pair={p} value={v:.4}");
        }
        for (side, layer, row) in &self.lscore {
            for (p, v) in self.pairs.iter().zip(row) {
                let _ = writeln!(out, "lscore side={} layer={layer} pair={p} value={v:.6}", side.name());
            }
        }
        for (key, v) in &self.mscore {
            let _ = writeln!(
                out,
                "mscore side={} layer={} site={} value={v:.6}",
                key.side.name(),
                key.layer,
                key.site.name()
            );
        }
        for (config, p, v) in &self.erasure {
            let _ = writeln!(out, "erasure config={config} pair={p} delta={v:.6}");
        }
        out
    }
}

/// All sites of a plan's registry, for iteration in reports.
pub fn sites(plan: &AllocationPlan) -> Vec<SiteKey> {
    plan.registry().groups().iter().map(|g| g.key).collect()
}

/// `Site` parsed from a CLI-style `side:layer:site` string.
pub fn parse_site_key(s: &str) -> Result<SiteKey> {
    let parts: Vec<&str> = s.split(':').collect();
    let [side, layer, site] = parts.as_slice() else {
        return Err(Error::usage(format!("site `{s}` must look like enc:1:ffn_inner")));
    };
    Ok(SiteKey {
        side: side.parse()?,
        layer: layer
            .parse()
            .map_err(|_| Error::usage(format!("invalid layer `{layer}`")))?,
        site: site.parse::<Site>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{Provenance, Variant};
    use crate::importance::Criterion;
    use crate::mask::{build_mask_set_for, NeuronRegistry};

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let c = vec![toks("a b c d e"), toks("f g h i")];
        assert_eq!(bleu(&c, &c).unwrap(), 100.0);
        assert!(bleu(&[toks("x y z w")], &[toks("a b c d")]).unwrap() < 1.0);
    }

    #[test]
    fn bleu_order_invariant() {
        let h = vec![toks("a b c x"), toks("d e f g h")];
        let r = vec![toks("a b c d"), toks("d e f h h")];
        let a = bleu(&h, &r).unwrap();
        let b = bleu(&[h[1].clone(), h[0].clone()], &[r[1].clone(), r[0].clone()]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bleu_rejects_empty_and_ragged() {
        assert!(bleu(&[], &[]).is_err());
        assert!(bleu(&[toks("a")], &[]).is_err());
    }

    fn plan(groups: Vec<(SiteKey, usize)>, m: usize, roles: Vec<Role>) -> AllocationPlan {
        let pairs = (0..m).map(|i| format!("x2l{i}").parse().unwrap()).collect();
        AllocationPlan::new(
            NeuronRegistry::from_groups(groups).unwrap(),
            pairs,
            roles,
            Provenance {
                criterion: Criterion::Te,
                rho: 0.5,
                k: 0.7,
                variant: Variant::Pair,
                table_fingerprint: String::new(),
                checkpoint_fingerprint: String::new(),
            },
        )
        .unwrap()
    }

    fn key(site: Site) -> SiteKey {
        SiteKey { side: Side::Encoder, layer: 1, site }
    }

    #[test]
    fn lscore_and_mscore_counts() {
        let s = |v: &[usize]| Role::Specific(v.iter().copied().collect());
        let p = plan(
            vec![(key(Site::FfnInner), 5)],
            2,
            vec![Role::General, s(&[0, 1]), s(&[1]), s(&[0, 1]), s(&[1])],
        );
        assert_eq!(lscore(&p, Side::Encoder, 1, 0).unwrap(), 0.5);
        assert_eq!(lscore(&p, Side::Encoder, 1, 1).unwrap(), 1.0);
        assert_eq!(mscore(&p, key(Site::FfnInner)).unwrap(), 0.75);
        assert!(lscore(&p, Side::Decoder, 1, 0).is_err());
    }

    #[test]
    fn erase_counts_and_determinism() {
        let roles: Vec<Role> = (0..10).map(|_| Role::General).chain((0..4).map(|_| Role::Specific([0].into()))).collect();
        let p = plan(vec![(key(Site::FfnInner), 14)], 2, roles);
        let set = build_mask_set_for(&p).unwrap();
        let none = erase_random(&set, &p, &EraseTarget::General, 0.0, 1).unwrap();
        assert_eq!(none, set);
        let half = erase_random(&set, &p, &EraseTarget::General, 0.5, 1).unwrap();
        assert_eq!(set.masks[0].count_active() - half.masks[0].count_active(), 5);
        assert_eq!(half, erase_random(&set, &p, &EraseTarget::General, 0.5, 1).unwrap());
        let pair0: PairId = "x2l0".parse().unwrap();
        let all = erase_random(&set, &p, &EraseTarget::Specific(pair0), 1.0, 3).unwrap();
        assert!(all.masks.iter().all(|m| m.bits()[10..].iter().all(|b| !b)));
        let pair1: PairId = "x2l1".parse().unwrap();
        assert!(erase_random(&set, &p, &EraseTarget::Specific(pair1), 0.5, 3).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // Ranks a = [1, 2.5, 2.5, 4], b = [1, 2, 3, 4].
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12, "{r}");
    }

    #[test]
    fn erase_target_parsing() {
        assert_eq!("general".parse::<EraseTarget>().unwrap(), EraseTarget::General);
        assert_eq!(
            "specific:en2it".parse::<EraseTarget>().unwrap(),
            EraseTarget::Specific("en2it".parse().unwrap())
        );
        assert!("other".parse::<EraseTarget>().is_err());
    }

    #[test]
    fn report_lines_are_key_value() {
        let p = plan(vec![(key(Site::FfnInner), 2)], 1, vec![Role::General, Role::Specific([0].into())]);
        let text = AnalysisReport::from_plan(&p).unwrap().render();
        assert!(text.contains("lscore side=enc layer=1 pair=x2l0 value=1.000000"));
        assert!(text.contains("mscore side=enc layer=1 site=ffn_inner value=1.000000"));
    }
}
