//! Greedy, beam and top-K decoding over any step model.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{BOS, EOS};

/// Attention of one emitted token: the argmax node and the full weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub node: usize,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundedCaption {
    /// Token ids without BOS/EOS.
    pub tokens: Vec<usize>,
    pub alignments: Vec<Option<Alignment>>,
    /// Sum of the model's log-probabilities of the emitted tokens (and EOS).
    pub score: f64,
}

pub struct ModelStep<S> {
    pub state: S,
    pub logits: Vec<f64>,
    pub alignment: Option<Alignment>,
}

/// One autoregressive step: previous token in, next-token logits out.
pub trait StepModel {
    type State: Clone;
    fn initial(&mut self) -> Self::State;
    fn step(&mut self, state: &Self::State, prev: usize) -> Result<ModelStep<Self::State>>;
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

struct Hyp<S> {
    tokens: Vec<usize>,
    alignments: Vec<Option<Alignment>>,
    score: f64,
    state: S,
    prev: usize,
}

fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_tokens.cmp(b_tokens))
}

/// Beam search without length normalization. A hypothesis ends at EOS or
/// after `max_len` tokens. Results are sorted by score, ties by token order.
pub fn beam_search<M: StepModel>(
    model: &mut M,
    beam: usize,
    max_len: usize,
) -> Result<Vec<GroundedCaption>> {
    let beam = beam.max(1);
    let mut live = vec![Hyp {
        tokens: vec![],
        alignments: vec![],
        score: 0.0,
        state: model.initial(),
        prev: BOS,
    }];
    let mut done: Vec<GroundedCaption> = Vec::new();
    for t in 0..max_len.max(1) {
        let mut steps = Vec::with_capacity(live.len());
        let mut cands: Vec<(f64, Vec<usize>, usize, usize)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let out = model.step(&h.state, h.prev)?;
            for (tok, lp) in log_softmax(&out.logits).into_iter().enumerate() {
                let mut seq = h.tokens.clone();
                seq.push(tok);
                cands.push((h.score + lp, seq, hi, tok));
            }
            steps.push(out);
        }
        cands.sort_by(|a, b| rank(a.0, &a.1, b.0, &b.1));
        cands.truncate(beam);
        let mut next = Vec::with_capacity(cands.len());
        for (score, _, hi, tok) in cands {
            let h = &live[hi];
            if tok == EOS {
                done.push(GroundedCaption {
                    tokens: h.tokens.clone(),
                    alignments: h.alignments.clone(),
                    score,
                });
                continue;
            }
            let mut tokens = h.tokens.clone();
            tokens.push(tok);
            let mut alignments = h.alignments.clone();
            alignments.push(steps[hi].alignment.clone());
            if t + 1 == max_len.max(1) {
                done.push(GroundedCaption {
                    tokens,
                    alignments,
                    score,
                });
            } else {
                next.push(Hyp {
                    tokens,
                    alignments,
                    score,
                    state: steps[hi].state.clone(),
                    prev: tok,
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    done.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
    done.truncate(beam);
    Ok(done)
}

/// Highest-probability token at each step (ties to the lower index).
pub fn greedy_search<M: StepModel>(model: &mut M, max_len: usize) -> Result<GroundedCaption> {
    Ok(beam_search(model, 1, max_len)?.remove(0))
}

/// The renormalized top-`k` support of `softmax(logits / temperature)`,
/// ordered by probability (ties to the lower index).
pub fn topk_distribution(logits: &[f64], k: usize, temperature: f64) -> Vec<(usize, f64)> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k.max(1));
    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    order.into_iter().map(|i| (i, probs[i] / total)).collect()
}

/// Draws from a distribution produced by [`topk_distribution`].
pub fn sample_from(dist: &[(usize, f64)], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(tok, p) in dist {
        acc += p;
        if u < acc {
            return tok;
        }
    }
    dist.last().map(|d| d.0).unwrap_or(EOS)
}

pub fn topk_search<M: StepModel>(
    model: &mut M,
    k: usize,
    temperature: f64,
    rng: &mut impl Rng,
    max_len: usize,
) -> Result<GroundedCaption> {
    let mut state = model.initial();
    let mut prev = BOS;
    let mut cap = GroundedCaption {
        tokens: vec![],
        alignments: vec![],
        score: 0.0,
    };
    for _ in 0..max_len.max(1) {
        let out = model.step(&state, prev)?;
        let dist = topk_distribution(&out.logits, k, temperature);
        let tok = sample_from(&dist, rng);
        cap.score += log_softmax(&out.logits)[tok];
        if tok == EOS {
            break;
        }
        cap.tokens.push(tok);
        cap.alignments.push(out.alignment);
        state = out.state;
        prev = tok;
    }
    Ok(cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Three tokens {0, 1, EOS=2}; logits are a fixed function of the prefix.
    struct Toy;

    fn toy_logits(prefix: &[usize]) -> Vec<f64> {
        let h = prefix
            .iter()
            .fold(7u64, |a, &t| a.wrapping_mul(31).wrapping_add(t as u64 + 1));
        (0..3)
            .map(|i| ((h.wrapping_mul(2654435761).wrapping_add(i * 977)) % 1000) as f64 / 250.0)
            .collect()
    }

    impl StepModel for Toy {
        type State = Vec<usize>;
        fn initial(&mut self) -> Vec<usize> {
            vec![]
        }
        fn step(&mut self, state: &Vec<usize>, prev: usize) -> Result<ModelStep<Vec<usize>>> {
            let mut s = state.clone();
            if prev != BOS {
                s.push(prev);
            }
            Ok(ModelStep {
                logits: toy_logits(&s),
                state: s,
                alignment: None,
            })
        }
    }

    fn brute_force(max_len: usize) -> (Vec<usize>, f64) {
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut stack = vec![(vec![], 0.0)];
        while let Some((prefix, score)) = stack.pop() {
            let lp = log_softmax(&toy_logits(&prefix));
            for (tok, &l) in lp.iter().enumerate() {
                let s = score + l;
                let mut seq = prefix.clone();
                let finished = if tok == EOS {
                    true
                } else {
                    seq.push(tok);
                    seq.len() == max_len
                };
                if finished {
                    let better = match &best {
                        None => true,
                        Some((bs, bscore)) => s > *bscore || (s == *bscore && seq < *bs),
                    };
                    if better {
                        best = Some((seq, s));
                    }
                } else {
                    stack.push((seq, s));
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn wide_beam_is_exhaustive() {
        let (seq, score) = brute_force(3);
        let out = beam_search(&mut Toy, 27, 3).unwrap();
        assert_eq!(out[0].tokens, seq);
        assert!((out[0].score - score).abs() < 1e-12);
    }

    #[test]
    fn beam_one_is_greedy_and_scores_sorted() {
        let g = greedy_search(&mut Toy, 5).unwrap();
        assert_eq!(beam_search(&mut Toy, 1, 5).unwrap()[0], g);
        let b = beam_search(&mut Toy, 2, 5).unwrap();
        assert!(b.len() <= 2);
        assert!(b.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn topk_one_is_greedy() {
        let g = greedy_search(&mut Toy, 4).unwrap();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = topk_search(&mut Toy, 1, 3.0, &mut rng, 4).unwrap();
            assert_eq!(s.tokens, g.tokens);
        }
    }

    #[test]
    fn topk_support_ties_go_low() {
        let d = topk_distribution(&[1.0, 2.0, 2.0, 0.0], 2, 1.0);
        assert_eq!(d.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2]);
        assert!((d[0].1 - 0.5).abs() < 1e-12);
    }
}
