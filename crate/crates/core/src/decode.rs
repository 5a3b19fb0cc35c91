//! Greedy and beam-search decoding.

use crate::data::{EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{EncodedBatch, TransformerModel};

/// Supplies next-token log-probabilities for equal-length prefixes that all
/// start with the EOS/start token.
pub trait StepScorer {
    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f32>>>;
}

/// Scores continuations of a single encoded source sentence.
pub struct ModelScorer<'a> {
    model: &'a TransformerModel,
    encoded: EncodedBatch,
    mask: Option<&'a Mask>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a TransformerModel, src: &[u32], mask: Option<&'a Mask>) -> Result<Self> {
        let encoded = model.encode(&[src.to_vec()], mask)?;
        Ok(Self { model, encoded, mask })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
        let enc = self.encoded.select(&vec![0; prefixes.len()])?;
        self.model.next_log_probs(&enc, prefixes, self.mask)
    }
}

/// Longest output (excluding EOS) the model can produce for a source.
pub fn max_output_len(model: &TransformerModel, src_len: usize) -> usize {
    (model.config().max_seq_len - 1).min(2 * src_len + 10)
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if i == PAD_ID as usize {
            continue;
        }
        if best == usize::MAX || v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// `((5 + len) / 6)^alpha`, with `len` counting the final EOS.
pub fn length_penalty(len: usize, alpha: f32) -> f32 {
    ((5.0 + len as f32) / 6.0).powf(alpha)
}

/// Greedy decoding of a batch; outputs exclude the final EOS.
pub fn greedy_decode(
    model: &TransformerModel,
    srcs: &[Vec<u32>],
    mask: Option<&Mask>,
) -> Result<Vec<Vec<u32>>> {
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let enc = model.encode(srcs, mask)?;
    let limits: Vec<usize> = srcs.iter().map(|s| max_output_len(model, s.len())).collect();
    let mut prefixes: Vec<Vec<u32>> = vec![vec![EOS_ID]; srcs.len()];
    let mut done = vec![false; srcs.len()];
    let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); srcs.len()];
    let longest = *limits.iter().max().expect("non-empty");
    for step in 0..longest {
        for (b, out) in outputs.iter().enumerate() {
            if !done[b] && out.len() >= limits[b] {
                done[b] = true;
            }
        }
        if done.iter().all(|d| *d) {
            break;
        }
        let lps = model.next_log_probs(&enc, &prefixes, mask)?;
        for b in 0..srcs.len() {
            let next = if done[b] { PAD_ID } else { argmax(&lps[b]) };
            if !done[b] {
                if next == EOS_ID {
                    done[b] = true;
                } else {
                    outputs[b].push(next);
                }
            }
            prefixes[b].push(next);
        }
        debug_assert_eq!(prefixes[0].len(), step + 2);
    }
    Ok(outputs)
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    logp: f32,
}

/// Beam search over one source. Returns the finished hypothesis with the
/// best length-normalised score, without the final EOS.
pub fn beam_search(scorer: &mut dyn StepScorer, beam: usize, alpha: f32, max_len: usize) -> Result<Vec<u32>> {
    if beam == 0 {
        return Err(Error::usage("beam size must be at least 1"));
    }
    let mut alive = vec![Hypothesis { tokens: Vec::new(), logp: 0.0 }];
    let mut finished: Vec<(f32, Vec<u32>)> = Vec::new();
    while !alive.is_empty() && finished.len() < beam {
        if alive[0].tokens.len() >= max_len {
            for h in alive.drain(..) {
                let score = h.logp / length_penalty(h.tokens.len() + 1, alpha);
                finished.push((score, h.tokens));
            }
            break;
        }
        let prefixes: Vec<Vec<u32>> = alive
            .iter()
            .map(|h| {
                let mut p = Vec::with_capacity(h.tokens.len() + 1);
                p.push(EOS_ID);
                p.extend_from_slice(&h.tokens);
                p
            })
            .collect();
        let lps = scorer.log_probs(&prefixes)?;
        let mut candidates: Vec<(f32, usize, u32)> = Vec::new();
        for (a, row) in lps.iter().enumerate() {
            for (t, &lp) in row.iter().enumerate() {
                if t != PAD_ID as usize {
                    candidates.push((alive[a].logp + lp, a, t as u32));
                }
            }
        }
        candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next = Vec::with_capacity(beam);
        for (rank, &(score, a, t)) in candidates.iter().enumerate() {
            if rank >= beam && next.len() >= beam {
                break;
            }
            if t == EOS_ID {
                if rank < beam {
                    let tokens = alive[a].tokens.clone();
                    finished.push((score / length_penalty(tokens.len() + 1, alpha), tokens));
                }
            } else if next.len() < beam {
                let mut tokens = alive[a].tokens.clone();
                tokens.push(t);
                next.push(Hypothesis { tokens, logp: score });
            }
        }
        alive = next;
    }
    let best = finished
        .into_iter()
        .enumerate()
        .max_by(|(i, x), (j, y)| x.0.total_cmp(&y.0).then(j.cmp(i)))
        .map(|(_, (_, tokens))| tokens)
        .unwrap_or_default();
    Ok(best)
}

/// Beam-search translation of each source sentence in turn.
pub fn translate(
    model: &TransformerModel,
    srcs: &[Vec<u32>],
    mask: Option<&Mask>,
    beam: usize,
    alpha: f32,
) -> Result<Vec<Vec<u32>>> {
    srcs.iter()
        .map(|src| {
            let mut scorer = ModelScorer::new(model, src, mask)?;
            beam_search(&mut scorer, beam, alpha, max_output_len(model, src.len()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed table scorer over a 5-token vocabulary: pad, eos, a, b, c.
    struct Table(fn(&[u32]) -> [f32; 5]);

    impl StepScorer for Table {
        fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
            Ok(prefixes
                .iter()
                .map(|p| (self.0)(p).iter().map(|x| x.ln()).collect())
                .collect())
        }
    }

    #[test]
    fn beam_finds_better_sequence_than_greedy() {
        // Greedy takes `a` (0.5) then is stuck with 0.4 · ...; `b` (0.4)
        // leads to EOS with 0.9.
        let mut s = Table(|p| match p {
            [_] => [0.0, 0.05, 0.5, 0.4, 0.05],
            [_, 2] => [0.0, 0.4, 0.3, 0.3, 0.0],
            [_, 3] => [0.0, 0.9, 0.05, 0.05, 0.0],
            _ => [0.0, 0.9, 0.05, 0.05, 0.0],
        });
        assert_eq!(beam_search(&mut s, 1, 0.0, 10).unwrap(), vec![2]);
        assert_eq!(beam_search(&mut s, 2, 0.0, 10).unwrap(), vec![3]);
    }

    #[test]
    fn max_len_forces_termination() {
        let mut s = Table(|_| [0.0, 1e-6, 0.98, 0.01, 0.009]);
        assert_eq!(beam_search(&mut s, 3, 0.6, 4).unwrap(), vec![2, 2, 2, 2]);
    }

    #[test]
    fn zero_beam_rejected() {
        let mut s = Table(|_| [0.0, 0.25, 0.25, 0.25, 0.25]);
        assert!(beam_search(&mut s, 0, 0.6, 4).is_err());
    }

    #[test]
    fn length_penalty_values() {
        assert_eq!(length_penalty(1, 0.6), 1.0);
        assert!((length_penalty(7, 1.0) - 2.0).abs() < 1e-6);
    }
}
