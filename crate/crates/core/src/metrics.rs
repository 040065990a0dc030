//! Corpus-level caption metrics against multiple references: BLEU-1..4,
//! ROUGE-L and CIDEr.
//!
//! Floating-point reductions over pairs or references sum values in sorted
//! order, so every score is exactly invariant under reordering its inputs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub image_id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(image_id: impl Into<String>, candidate: &[&str], references: &[&[&str]]) -> Self {
        let own = |t: &[&str]| t.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        EvalPair {
            image_id: image_id.into(),
            candidate: own(candidate),
            references: references.iter().map(|r| own(r)).collect(),
        }
    }
}

fn check(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(p) = pairs.iter().find(|p| p.references.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "image {:?} has no references",
            p.image_id
        )));
    }
    Ok(())
}

/// Order-independent sum.
fn stable_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.into_iter().sum()
}

fn stable_mean(xs: Vec<f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        0.0
    } else {
        stable_sum(xs) / n as f64
    }
}

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Ngram<'_>, usize> {
    let mut m = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram total for one pair.
fn clipped_counts(pair: &EvalPair, n: usize) -> (usize, usize) {
    let cand = ngram_counts(&pair.candidate, n);
    let mut max_ref: BTreeMap<Ngram<'_>, usize> = BTreeMap::new();
    for r in &pair.references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let total = cand.values().sum();
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

/// Reference length closest to the candidate length, shorter on ties.
fn closest_ref_len(pair: &EvalPair) -> usize {
    let c = pair.candidate.len() as i64;
    pair.references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&r| ((r as i64 - c).abs(), r))
        .unwrap_or(0)
}

/// Corpus BLEU with uniform weights over 1..=`max_n`, closest-length
/// brevity penalty and no smoothing.
pub fn bleu(pairs: &[EvalPair], max_n: usize) -> Result<f64> {
    check(pairs)?;
    if !(1..=4).contains(&max_n) {
        return Err(Error::InvalidArgument(format!("BLEU order {max_n} not in 1..=4")));
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (mut matched, mut total) = (0usize, 0usize);
        for p in pairs {
            let (m, t) = clipped_counts(p, n);
            matched += m;
            total += t;
        }
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let c: usize = pairs.iter().map(|p| p.candidate.len()).sum();
    let r: usize = pairs.iter().map(closest_ref_len).sum();
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

fn rouge_f(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(cand, reference) as f64;
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    if p == 0.0 && r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

fn rouge_pair(p: &EvalPair) -> f64 {
    p.references
        .iter()
        .map(|r| rouge_f(&p.candidate, r))
        .fold(0.0, f64::max)
}

/// Mean over pairs of the best LCS F-measure against any reference.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    rouge_l_with(pairs, Exec::default())
}

pub fn rouge_l_with(pairs: &[EvalPair], exec: Exec) -> Result<f64> {
    check(pairs)?;
    Ok(stable_mean(exec.map(pairs, rouge_pair)))
}

const CIDER_MAX_N: usize = 4;
pub const CIDER_SCALE: f64 = 10.0;

/// Document frequencies of reference n-grams, counted once per distinct
/// image id.
struct CiderIdf<'a> {
    images: f64,
    df: [BTreeMap<Ngram<'a>, usize>; CIDER_MAX_N],
}

impl<'a> CiderIdf<'a> {
    fn new(pairs: &'a [EvalPair]) -> Self {
        let mut per_image: BTreeMap<&str, [BTreeSet<Ngram<'a>>; CIDER_MAX_N]> = BTreeMap::new();
        for p in pairs {
            let sets = per_image.entry(&p.image_id).or_default();
            for r in &p.references {
                for (n, set) in sets.iter_mut().enumerate() {
                    set.extend(ngram_counts(r, n + 1).into_keys());
                }
            }
        }
        let mut df: [BTreeMap<Ngram<'a>, usize>; CIDER_MAX_N] = Default::default();
        for sets in per_image.values() {
            for (n, set) in sets.iter().enumerate() {
                for g in set {
                    *df[n].entry(g).or_insert(0) += 1;
                }
            }
        }
        CiderIdf {
            images: per_image.len() as f64,
            df,
        }
    }

    /// `ln(images / df)`; n-grams absent from every reference count as df 1.
    fn idf(&self, n: usize, g: Ngram<'_>) -> f64 {
        let df = self.df[n].get(g).copied().unwrap_or(0).max(1);
        (self.images / df as f64).ln()
    }

    fn vector<'t>(&self, tokens: &'t [String], n: usize) -> (BTreeMap<Ngram<'t>, f64>, f64) {
        let v: BTreeMap<_, _> = ngram_counts(tokens, n + 1)
            .into_iter()
            .map(|(g, tf)| (g, tf as f64 * self.idf(n, g)))
            .collect();
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        (v, norm)
    }
}

fn cosine(a: &(BTreeMap<Ngram<'_>, f64>, f64), b: &(BTreeMap<Ngram<'_>, f64>, f64)) -> f64 {
    if a.1 == 0.0 || b.1 == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.0.iter().filter_map(|(g, x)| b.0.get(g).map(|y| x * y)).sum();
    dot / (a.1 * b.1)
}

/// Per-order mean cosine similarity over references, for one pair.
fn cider_pair(idf: &CiderIdf<'_>, p: &EvalPair) -> [f64; CIDER_MAX_N] {
    let mut out = [0.0; CIDER_MAX_N];
    for (n, slot) in out.iter_mut().enumerate() {
        let cand = idf.vector(&p.candidate, n);
        let sims = p
            .references
            .iter()
            .map(|r| cosine(&cand, &idf.vector(r, n)))
            .collect();
        *slot = stable_mean(sims);
    }
    out
}

/// Plain CIDEr (no clipping or length penalty), scaled to [0, 10].
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    cider_with(pairs, Exec::default())
}

pub fn cider_with(pairs: &[EvalPair], exec: Exec) -> Result<f64> {
    check(pairs)?;
    let idf = CiderIdf::new(pairs);
    let per_pair = exec.map(pairs, |p| cider_pair(&idf, p));
    let per_n: Vec<f64> = (0..CIDER_MAX_N)
        .map(|n| stable_mean(per_pair.iter().map(|s| s[n]).collect()))
        .collect();
    Ok(CIDER_SCALE * stable_mean(per_n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub pairs: usize,
    pub images: usize,
    pub references: usize,
}

/// Scores keyed like the columns of a captioning results table. METEOR and
/// SPICE are not computed and serialize as null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub meteor: Option<f64>,
    pub spice: Option<f64>,
    pub counts: CorpusCounts,
}

pub fn evaluate_corpus(pairs: &[EvalPair]) -> Result<MetricReport> {
    evaluate_corpus_with(pairs, Exec::default())
}

pub fn evaluate_corpus_with(pairs: &[EvalPair], exec: Exec) -> Result<MetricReport> {
    check(pairs)?;
    let images: BTreeSet<&str> = pairs.iter().map(|p| p.image_id.as_str()).collect();
    Ok(MetricReport {
        bleu1: bleu(pairs, 1)?,
        bleu2: bleu(pairs, 2)?,
        bleu3: bleu(pairs, 3)?,
        bleu4: bleu(pairs, 4)?,
        rouge_l: rouge_l_with(pairs, exec)?,
        cider: cider_with(pairs, exec)?,
        meteor: None,
        spice: None,
        counts: CorpusCounts {
            pairs: pairs.len(),
            images: images.len(),
            references: pairs.iter().map(|p| p.references.len()).sum(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn pair(id: &str, cand: &str, refs: &[&str]) -> EvalPair {
        let refs: Vec<Vec<&str>> = refs.iter().map(|r| words(r)).collect();
        let refs: Vec<&[&str]> = refs.iter().map(Vec::as_slice).collect();
        EvalPair::new(id, &words(cand), &refs)
    }

    #[test]
    fn bleu_hand_value() {
        let p = [pair("1", "the cat sat", &["the cat sat on the mat"])];
        let b1 = bleu(&p, 1).unwrap();
        assert!((b1 - (-1.0f64).exp()).abs() < 1e-12);
        assert!((b1 - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn bleu_perfect_and_disjoint() {
        let p = [
            pair("1", "a b c d e", &["a b c d e"]),
            pair("2", "f g h i", &["f g h i"]),
        ];
        for n in 1..=4 {
            assert_eq!(bleu(&p, n).unwrap(), 1.0);
        }
        let d = [pair("1", "x y z", &["a b c"])];
        assert_eq!(bleu(&d, 1).unwrap(), 0.0);
        // too short for any 4-gram
        let s = [pair("1", "a b", &["a b"])];
        assert_eq!(bleu(&s, 2).unwrap(), 1.0);
        assert_eq!(bleu(&s, 3).unwrap(), 0.0);
    }

    #[test]
    fn bleu_clips_repeated_words() {
        // "the the the" against "the cat": one clipped match of three.
        let p = [pair("1", "the the the", &["the cat"])];
        assert!((bleu(&p, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_closest_reference_length_prefers_shorter_on_tie() {
        let p = pair("1", "a b c", &["a b", "a b c d"]);
        assert_eq!(closest_ref_len(&p), 2);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&[pair("1", "a b c", &["a b c"])]).unwrap(), 1.0);
        let r = rouge_l(&[pair("1", "a b c d", &["a c b d"])]).unwrap();
        assert!((r - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l(&[pair("1", "a b", &["c d"])]).unwrap(), 0.0);
    }

    #[test]
    fn cider_examples() {
        let single = [pair("1", "a b c d e", &["a b c d e"])];
        assert_eq!(cider(&single).unwrap(), 0.0);

        let three = [
            pair("1", "a b c d", &["a b c d"]),
            pair("2", "e f g h", &["e f g h"]),
            pair("3", "i j k l", &["i j k l"]),
        ];
        assert!((cider(&three).unwrap() - 10.0).abs() < 1e-9);

        let miss = [
            pair("1", "z y x w", &["a b c d"]),
            pair("2", "e f g h", &["e f g h"]),
        ];
        assert!((cider(&miss).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        assert!(matches!(bleu(&[], 1), Err(Error::EmptyCorpus)));
        assert!(matches!(rouge_l(&[]), Err(Error::EmptyCorpus)));
        assert!(matches!(cider(&[]), Err(Error::EmptyCorpus)));
        assert!(matches!(evaluate_corpus(&[]), Err(Error::EmptyCorpus)));
        let p = [pair("1", "a", &["a"])];
        assert!(bleu(&p, 5).is_err());
        let no_refs = [EvalPair::new("1", &["a"], &[])];
        assert!(rouge_l(&no_refs).is_err());
    }

    #[test]
    fn report_serializes_with_null_columns() {
        let p = [pair("1", "a b c d", &["a b c d", "a b"])];
        let r = evaluate_corpus(&p).unwrap();
        assert_eq!(r.bleu1, 1.0);
        assert_eq!(r.rouge_l, 1.0);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"] {
            assert!(v[k].is_number(), "{k}");
        }
        assert!(v["meteor"].is_null() && v["spice"].is_null());
    }

    fn token() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]).prop_map(str::to_owned)
    }

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(token(), 1..7)
    }

    fn corpus() -> impl Strategy<Value = Vec<EvalPair>> {
        prop::collection::vec((sentence(), prop::collection::vec(sentence(), 1..4)), 1..6).prop_map(
            |items| {
                items
                    .into_iter()
                    .enumerate()
                    .map(|(i, (candidate, references))| EvalPair {
                        image_id: format!("img{i}"),
                        candidate,
                        references,
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn ranges_hold(pairs in corpus()) {
            let r = evaluate_corpus(&pairs).unwrap();
            for v in [r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!((0.0..=10.0 + 1e-9).contains(&r.cider));
        }

        #[test]
        fn permutation_invariance(pairs in corpus(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rng);
            for p in &mut shuffled {
                p.references.shuffle(&mut rng);
            }
            prop_assert_eq!(evaluate_corpus(&pairs).unwrap(), evaluate_corpus(&shuffled).unwrap());
        }

        #[test]
        fn duplication_invariance(pairs in corpus()) {
            let doubled: Vec<_> = pairs.iter().chain(pairs.iter()).cloned().collect();
            let a = evaluate_corpus(&pairs).unwrap();
            let b = evaluate_corpus(&doubled).unwrap();
            for n in 1..=4 {
                prop_assert_eq!(bleu(&pairs, n).unwrap(), bleu(&doubled, n).unwrap());
            }
            prop_assert!((a.rouge_l - b.rouge_l).abs() < 1e-12);
            prop_assert!((a.cider - b.cider).abs() < 1e-9);
        }

        #[test]
        fn extra_reference_never_hurts(pairs in corpus(), extra in sentence(), which in any::<prop::sample::Index>()) {
            let mut more = pairs.clone();
            let i = which.index(more.len());
            more[i].references.push(extra);
            prop_assert!(rouge_l(&more).unwrap() >= rouge_l(&pairs).unwrap());
            for n in 1..=4 {
                let (m0, _) = clipped_counts(&pairs[i], n);
                let (m1, _) = clipped_counts(&more[i], n);
                prop_assert!(m1 >= m0);
            }
        }
    }
}
