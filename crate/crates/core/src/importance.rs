//! Per-pair neuron importance: Taylor-expansion and absolute-value criteria.

use std::fmt;
use std::str::FromStr;

use crate::data::PairId;
use crate::error::{Error, Result};
use crate::mask::{NeuronRegistry, SiteKey};
use crate::model::{Batch, ForwardOptions, TransformerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    /// `|∂L/∂h · h|`
    Te,
    /// `|h|`
    Av,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Te => "te",
            Criterion::Av => "av",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "te" => Ok(Criterion::Te),
            "av" => Ok(Criterion::Av),
            _ => Err(Error::usage(format!("unknown criterion `{s}` (expected te or av)"))),
        }
    }
}

/// Θ^m(i) for M pairs over a neuron registry. Before finalisation `scores`
/// hold running sums; afterwards they are divided by the token counters.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    criterion: Criterion,
    pairs: Vec<PairId>,
    registry: NeuronRegistry,
    scores: Vec<Vec<f64>>,
    counts: Vec<u64>,
    finalized: bool,
    /// Fingerprint of the checkpoint the scores were computed from.
    pub source_fingerprint: String,
}

impl ImportanceTable {
    pub fn new(criterion: Criterion, pairs: Vec<PairId>, registry: NeuronRegistry) -> Self {
        let n = registry.len();
        Self {
            criterion,
            scores: vec![vec![0.0; n]; pairs.len()],
            counts: vec![0; pairs.len()],
            pairs,
            registry,
            finalized: false,
            source_fingerprint: String::new(),
        }
    }

    /// A finalised table with the given scores (used by loaders and tests).
    pub fn from_scores(
        criterion: Criterion,
        pairs: Vec<PairId>,
        registry: NeuronRegistry,
        scores: Vec<Vec<f64>>,
        counts: Vec<u64>,
    ) -> Result<Self> {
        if scores.len() != pairs.len() || counts.len() != pairs.len() {
            return Err(Error::Mismatch(format!(
                "{} pairs but {} score rows and {} counters",
                pairs.len(),
                scores.len(),
                counts.len()
            )));
        }
        if let Some(row) = scores.iter().find(|r| r.len() != registry.len()) {
            return Err(Error::Mismatch(format!(
                "score row has {} entries, registry has {}",
                row.len(),
                registry.len()
            )));
        }
        if scores.iter().flatten().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::data("importance scores must be finite and non-negative"));
        }
        Ok(Self {
            criterion,
            pairs,
            registry,
            scores,
            counts,
            finalized: true,
            source_fingerprint: String::new(),
        })
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion
    }

    pub fn pairs(&self) -> &[PairId] {
        &self.pairs
    }

    pub fn registry(&self) -> &NeuronRegistry {
        &self.registry
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn row(&self, pair: usize) -> &[f64] {
        &self.scores[pair]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn score(&self, pair: usize, neuron: usize) -> f64 {
        self.scores[pair][neuron]
    }

    fn check_open(&self) -> Result<()> {
        if self.finalized {
            Err(Error::usage("importance table is already finalized"))
        } else {
            Ok(())
        }
    }

    /// Adds one site's per-position contributions. `values` and `grads` are
    /// row-major `[rows × width]`; rows with `valid_rows[r] == false` are
    /// skipped. `grads` is required for TE and ignored for AV.
    pub fn accumulate_site(
        &mut self,
        pair: usize,
        key: SiteKey,
        values: &[f32],
        grads: Option<&[f32]>,
        valid_rows: &[bool],
    ) -> Result<()> {
        self.check_open()?;
        let group = *self
            .registry
            .group(key)
            .ok_or_else(|| Error::Mismatch(format!("site {key} not in registry")))?;
        let width = group.width;
        if values.len() != valid_rows.len() * width {
            return Err(Error::Mismatch(format!(
                "site {key}: {} values for {} rows of width {width}",
                values.len(),
                valid_rows.len()
            )));
        }
        let grads = match (self.criterion, grads) {
            (Criterion::Te, Some(g)) if g.len() == values.len() => Some(g),
            (Criterion::Te, _) => return Err(Error::usage("TE accumulation needs gradients of matching length")),
            (Criterion::Av, _) => None,
        };
        let row = &mut self.scores[pair][group.offset..group.offset + width];
        for (r, _) in valid_rows.iter().enumerate().filter(|(_, v)| **v) {
            for (u, acc) in row.iter_mut().enumerate() {
                let idx = r * width + u;
                let h = values[idx] as f64;
                *acc += match grads {
                    Some(g) => (g[idx] as f64 * h).abs(),
                    None => h.abs(),
                };
            }
        }
        Ok(())
    }

    pub fn add_tokens(&mut self, pair: usize, tokens: u64) -> Result<()> {
        self.check_open()?;
        self.counts[pair] += tokens;
        Ok(())
    }

    /// Element-wise sum of a partial table built over disjoint data.
    pub fn merge(&mut self, other: &ImportanceTable) -> Result<()> {
        self.check_open()?;
        other.check_open()?;
        if other.criterion != self.criterion || other.pairs != self.pairs || other.registry != self.registry {
            return Err(Error::Mismatch("cannot merge tables of different shape or criterion".into()));
        }
        for (dst, src) in self.scores.iter_mut().zip(&other.scores) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        for (d, s) in self.counts.iter_mut().zip(&other.counts) {
            *d += s;
        }
        Ok(())
    }

    /// Divides each pair's sums by its token counter and freezes the table.
    pub fn finalize(&mut self) -> Result<()> {
        self.check_open()?;
        if let Some(m) = self.counts.iter().position(|&c| c == 0) {
            return Err(Error::data(format!("no tokens accumulated for pair {}", self.pairs[m])));
        }
        for (row, &count) in self.scores.iter_mut().zip(&self.counts) {
            for s in row.iter_mut() {
                *s /= count as f64;
            }
        }
        self.finalized = true;
        Ok(())
    }

    /// Unweighted mean of Θ across pairs.
    pub fn mean_importance(&self) -> Result<Vec<f64>> {
        if !self.finalized {
            return Err(Error::usage("mean importance requires a finalized table"));
        }
        let m = self.pairs.len() as f64;
        Ok((0..self.registry.len())
            .map(|i| self.scores.iter().map(|row| row[i]).sum::<f64>() / m)
            .collect())
    }
}

/// Runs one batch through the unmasked model without dropout and adds its
/// contributions to `table`. TE gradients come from the mean token loss,
/// rescaled by the batch token count so each position contributes its
/// first-order estimate for the summed loss.
pub fn accumulate_batch(model: &TransformerModel, batch: &Batch, table: &mut ImportanceTable) -> Result<()> {
    table.check_open()?;
    if table.registry() != model.registry() || table.pairs() != model.config().language_pairs.as_slice() {
        return Err(Error::Mismatch("importance table does not match the model".into()));
    }
    let mut out = model.forward_train(batch, ForwardOptions { mask: None, record: true, dropout: None })?;
    let tokens = out.target_tokens;
    if table.criterion() == Criterion::Te {
        out.tape.backward(out.loss)?;
    }
    for site in &out.sites {
        let values = out.tape.value(site.var).data();
        let scaled: Option<Vec<f32>> = match table.criterion() {
            Criterion::Te => {
                let g = out
                    .tape
                    .grad(site.var)
                    .ok_or_else(|| Error::usage(format!("no gradient recorded for site {}", site.key)))?;
                Some(g.iter().map(|x| x * tokens as f32).collect())
            }
            Criterion::Av => None,
        };
        table.accumulate_site(batch.pair, site.key, values, scaled.as_deref(), out.valid_rows(site.key.side))?;
    }
    table.add_tokens(batch.pair, tokens as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{Side, Site};
    use neuralloc_tensor::{Tape, Tensor};

    fn one_neuron() -> (NeuronRegistry, SiteKey) {
        let key = SiteKey { side: Side::Encoder, layer: 1, site: Site::FfnInner };
        (NeuronRegistry::from_groups(vec![(key, 1)]).unwrap(), key)
    }

    fn pair(s: &str) -> PairId {
        s.parse().unwrap()
    }

    /// h = relu(w·x), L = (2h − 1)², x = 1, w = 1.
    fn tiny_net() -> (f32, f32) {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(1.0), true);
        let x = tape.constant(Tensor::scalar(1.0));
        let h = tape.mul(w, x).unwrap();
        let h = tape.relu(h).unwrap();
        let two_h = tape.scale(h, 2.0).unwrap();
        let d = tape.add_const(two_h, &Tensor::scalar(-1.0)).unwrap();
        let l = tape.mul(d, d).unwrap();
        tape.backward(l).unwrap();
        (tape.value(h).data()[0], tape.grad(h).unwrap()[0])
    }

    #[test]
    fn te_and_av_contributions_on_hand_net() {
        let (h, g) = tiny_net();
        assert_eq!((h, g), (1.0, 4.0));
        let (reg, key) = one_neuron();
        let mut te = ImportanceTable::new(Criterion::Te, vec![pair("a2b")], reg.clone());
        te.accumulate_site(0, key, &[h], Some(&[g]), &[true]).unwrap();
        assert_eq!(te.row(0), &[4.0]);
        let mut av = ImportanceTable::new(Criterion::Av, vec![pair("a2b")], reg);
        av.accumulate_site(0, key, &[h], None, &[true]).unwrap();
        assert_eq!(av.row(0), &[1.0]);
    }

    #[test]
    fn zero_activations_contribute_nothing() {
        let (reg, key) = one_neuron();
        for c in [Criterion::Te, Criterion::Av] {
            let mut t = ImportanceTable::new(c, vec![pair("a2b")], reg.clone());
            t.accumulate_site(0, key, &[0.0, 0.0], Some(&[3.0, -2.0]), &[true, true]).unwrap();
            assert_eq!(t.row(0), &[0.0]);
        }
    }

    #[test]
    fn pad_rows_are_skipped() {
        let (reg, key) = one_neuron();
        let mut t = ImportanceTable::new(Criterion::Av, vec![pair("a2b")], reg);
        t.accumulate_site(0, key, &[1.0, -7.0], None, &[true, false]).unwrap();
        assert_eq!(t.row(0), &[1.0]);
    }

    #[test]
    fn finalize_divides_by_tokens_and_freezes() {
        let (reg, key) = one_neuron();
        let mut t = ImportanceTable::new(Criterion::Av, vec![pair("a2b")], reg);
        t.accumulate_site(0, key, &[0.5, 1.5], None, &[true, true]).unwrap();
        t.add_tokens(0, 2).unwrap();
        t.finalize().unwrap();
        assert_eq!(t.row(0), &[1.0]);
        assert!(matches!(t.finalize(), Err(Error::Usage(_))));
        assert!(t.accumulate_site(0, key, &[1.0], None, &[true]).is_err());
    }

    #[test]
    fn finalize_names_empty_pair() {
        let (reg, _) = one_neuron();
        let mut t = ImportanceTable::new(Criterion::Av, vec![pair("a2b"), pair("a2c")], reg);
        t.add_tokens(0, 3).unwrap();
        let err = t.finalize().unwrap_err().to_string();
        assert!(err.contains("a2c"), "{err}");
    }

    #[test]
    fn mean_importance_cases() {
        let (reg, _) = one_neuron();
        let two = ImportanceTable::from_scores(
            Criterion::Te,
            vec![pair("a2b"), pair("a2c")],
            reg.clone(),
            vec![vec![0.2], vec![0.6]],
            vec![1, 1],
        )
        .unwrap();
        assert!((two.mean_importance().unwrap()[0] - 0.4).abs() < 1e-15);
        let one = ImportanceTable::from_scores(Criterion::Te, vec![pair("a2b")], reg, vec![vec![0.3]], vec![1]).unwrap();
        assert_eq!(one.mean_importance().unwrap(), vec![0.3]);
    }

    #[test]
    fn av_scales_linearly() {
        let (reg, key) = one_neuron();
        let vals = [0.3f32, 1.7, 0.0, 2.5];
        let mut a = ImportanceTable::new(Criterion::Av, vec![pair("a2b")], reg.clone());
        a.accumulate_site(0, key, &vals, None, &[true; 4]).unwrap();
        let mut b = ImportanceTable::new(Criterion::Av, vec![pair("a2b")], reg);
        let scaled: Vec<f32> = vals.iter().map(|v| v * 4.0).collect();
        b.accumulate_site(0, key, &scaled, None, &[true; 4]).unwrap();
        assert_eq!(b.row(0)[0], 4.0 * a.row(0)[0]);
    }

    #[test]
    fn merge_sums_partials() {
        let (reg, key) = one_neuron();
        let mut a = ImportanceTable::new(Criterion::Av, vec![pair("a2b")], reg.clone());
        let mut b = a.clone();
        a.accumulate_site(0, key, &[1.0], None, &[true]).unwrap();
        a.add_tokens(0, 1).unwrap();
        b.accumulate_site(0, key, &[3.0], None, &[true]).unwrap();
        b.add_tokens(0, 1).unwrap();
        a.merge(&b).unwrap();
        a.finalize().unwrap();
        assert_eq!(a.row(0), &[2.0]);
    }
}
