//! Caption metrics: sentence BLEU, diversity statistics, grounding F1 and
//! noun IoU.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BoundingBox, GroundingAnnotation};
use crate::matcher::Lexicon;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU with uniform weights up to `n`, clipped counts, the
/// closest-reference brevity penalty and no smoothing.
pub fn bleu(cand: &[String], refs: &[Vec<String>], n: usize) -> Result<f64> {
    if cand.is_empty() {
        return Err(Error::EmptyCandidate);
    }
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "BLEU order must be 1..=4, got {n}"
        )));
    }
    if refs.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for i in 1..=n {
        let counts = ngram_counts(cand, i);
        let total: usize = counts.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, i)).collect();
        let clipped: usize = counts
            .iter()
            .map(|(g, &c)| {
                let max_ref = ref_counts
                    .iter()
                    .map(|rc| rc.get(g).copied().unwrap_or(0))
                    .max();
                c.min(max_ref.unwrap_or(0))
            })
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0) as f64;
    let c = c as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

/// BLEU that scores an empty candidate as 0.
pub fn bleu_or_zero(cand: &[String], refs: &[Vec<String>], n: usize) -> Result<f64> {
    if cand.is_empty() {
        Ok(0.0)
    } else {
        bleu(cand, refs, n)
    }
}

/// Set IoU of noun types; 1 when neither caption has a noun.
pub fn noun_iou(pred: &[String], target: &[String], lex: &Lexicon) -> f64 {
    let a: BTreeSet<&String> = pred.iter().filter(|t| lex.is_noun(t)).collect();
    let b: BTreeSet<&String> = target.iter().filter(|t| lex.is_noun(t)).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Fraction of distinct captions in a set.
pub fn distinct_fraction(set: &[Vec<String>]) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    set.iter().collect::<BTreeSet<_>>().len() as f64 / set.len() as f64
}

/// Mean BLEU-4 of each caption against the rest of the set.
pub fn mbleu4(set: &[Vec<String>]) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::BadSetSize {
            expected: 2,
            got: set.len(),
        });
    }
    let mut total = 0.0;
    for (i, c) in set.iter().enumerate() {
        let others: Vec<Vec<String>> = set
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, r)| r.clone())
            .collect();
        total += bleu_or_zero(c, &others, 4)?;
    }
    Ok(total / set.len() as f64)
}

/// Distinct n-grams across the set over total words in the set.
pub fn div_n(set: &[Vec<String>], n: usize) -> f64 {
    let words: usize = set.iter().map(Vec::len).sum();
    if words == 0 {
        return 0.0;
    }
    let grams: BTreeSet<&[String]> = set
        .iter()
        .filter(|c| c.len() >= n)
        .flat_map(|c| c.windows(n))
        .collect();
    grams.len() as f64 / words as f64
}

/// Named metric values plus the counts they were computed over.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub values: BTreeMap<String, f64>,
    pub images: usize,
    pub captions: usize,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn merge(&mut self, other: MetricsReport) {
        self.values.extend(other.values);
        self.images = self.images.max(other.images);
        self.captions = self.captions.max(other.captions);
    }
}

/// `distinct` averages per-image distinct fractions of `samples`; `novel`
/// counts best-5 captions missing from `train`; `mbleu4`, `div1`, `div2`
/// average over the best-5 sets.
pub fn diversity_stats(
    samples: &[Vec<Vec<String>>],
    best5: &[Vec<Vec<String>>],
    train: &BTreeSet<Vec<String>>,
) -> Result<MetricsReport> {
    if let Some(bad) = best5.iter().find(|s| s.len() != 5) {
        return Err(Error::BadSetSize {
            expected: 5,
            got: bad.len(),
        });
    }
    let mean = |xs: Vec<f64>| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let distinct = mean(samples.iter().map(|s| distinct_fraction(s)).collect());
    let novel = best5
        .iter()
        .flatten()
        .filter(|c| !train.contains(*c))
        .count();
    let mb = mean(best5.iter().map(|s| mbleu4(s)).collect::<Result<_>>()?);
    let mut report = MetricsReport {
        images: samples.len().max(best5.len()),
        captions: samples
            .iter()
            .map(Vec::len)
            .sum::<usize>()
            .max(5 * best5.len()),
        ..Default::default()
    };
    report.values.insert("distinct".into(), distinct);
    report.values.insert("novel".into(), novel as f64);
    report.values.insert("mbleu4".into(), mb);
    report.values.insert(
        "div1".into(),
        mean(best5.iter().map(|s| div_n(s, 1)).collect()),
    );
    report.values.insert(
        "div2".into(),
        mean(best5.iter().map(|s| div_n(s, 2)).collect()),
    );
    Ok(report)
}

/// A generated object word with the box of the node it attended to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedWord {
    pub word: String,
    #[serde(rename = "box")]
    pub bbox: Option<BoundingBox>,
}

fn f1(correct_pred: usize, n_pred: usize, recalled: usize, n_gt: usize) -> f64 {
    if n_pred == 0 || n_gt == 0 {
        return 0.0;
    }
    let p = correct_pred as f64 / n_pred as f64;
    let r = recalled as f64 / n_gt as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn image_f1(preds: &[(&str, BoundingBox)], gts: &[&GroundingAnnotation], thr: f64) -> f64 {
    let hit =
        |word: &str, b: &BoundingBox| gts.iter().any(|g| g.word == word && g.bbox.iou(b) >= thr);
    let correct = preds.iter().filter(|(w, b)| hit(w, b)).count();
    let gt_words: BTreeSet<&str> = gts.iter().map(|g| g.word.as_str()).collect();
    let recalled = gt_words
        .iter()
        .filter(|w| preds.iter().any(|(pw, b)| pw == *w && hit(pw, b)))
        .count();
    f1(correct, preds.len(), recalled, gt_words.len())
}

/// Macro-averaged `(F1_all, F1_loc)` over images. A prediction is correct
/// when its word is annotated and its box overlaps an annotated box of that
/// word with IoU at least `iou_thr`. `F1_loc` keeps only words that appear in
/// both the prediction and the annotation.
pub fn grounding_f1(
    preds: &[Vec<GroundedWord>],
    gts: &[Vec<GroundingAnnotation>],
    iou_thr: f64,
) -> Result<(f64, f64)> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction sets for {} annotated images",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut all, mut loc) = (0.0, 0.0);
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        let p: Vec<(&str, BoundingBox)> = p
            .iter()
            .map(|w| {
                w.bbox
                    .map(|b| (w.word.as_str(), b))
                    .ok_or(Error::MissingBoxes(i))
            })
            .collect::<Result<_>>()?;
        let g: Vec<&GroundingAnnotation> = g.iter().collect();
        all += image_f1(&p, &g, iou_thr);
        let pw: BTreeSet<&str> = p.iter().map(|x| x.0).collect();
        let gw: BTreeSet<&str> = g.iter().map(|x| x.word.as_str()).collect();
        let p_loc: Vec<_> = p.iter().filter(|x| gw.contains(x.0)).copied().collect();
        let g_loc: Vec<_> = g
            .iter()
            .filter(|x| pw.contains(x.word.as_str()))
            .copied()
            .collect();
        loc += image_f1(&p_loc, &g_loc, iou_thr);
    }
    let n = preds.len() as f64;
    Ok((all / n, loc / n))
}
