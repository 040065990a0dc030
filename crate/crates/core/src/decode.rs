//! Caption generation: greedy search, beam search over summed log
//! probabilities, and an exhaustive search used as a test oracle.
//!
//! Start and pad are never proposed: their log probability is treated as
//! negative infinity at every step. Ties resolve to the smaller id (greedy)
//! or the lexicographically smaller sequence (beam and exhaustive).

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::nn::Real;
use crate::par::Exec;
use crate::text::{END_ID, PAD_ID, START_ID};

/// Anything that scores the next token given a prefix starting with start.
pub trait NextToken {
    fn vocab_size(&self) -> usize;
    /// Natural-log probabilities over the whole vocabulary.
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// A trained model bound to one image.
pub struct Captioner<'a, T> {
    pub params: &'a ModelParams<T>,
    pub feature: &'a [T],
}

impl<T: Real> NextToken for Captioner<'_, T> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        Ok(model::log_probs(self.params, self.feature, prefix)?
            .into_iter()
            .map(Real::as_f64)
            .collect())
    }
}

fn masked_log_probs(model: &impl NextToken, prefix: &[u32]) -> Result<Vec<f64>> {
    let mut lp = model.log_probs(prefix)?;
    for id in [PAD_ID, START_ID] {
        if let Some(v) = lp.get_mut(id as usize) {
            *v = f64::NEG_INFINITY;
        }
    }
    Ok(lp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn root() -> Self {
        Hypothesis {
            ids: vec![START_ID],
            log_prob: 0.0,
            finished: false,
        }
    }

    /// Tokens after start.
    pub fn generated(&self) -> usize {
        self.ids.len() - 1
    }

    fn normalized(&self) -> f64 {
        self.log_prob / self.generated().max(1) as f64
    }
}

/// Higher score first, then the lexicographically smaller sequence.
fn rank(a_score: f64, a_ids: &[u32], b_score: f64, b_ids: &[u32]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_ids.cmp(b_ids))
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

/// Appends the most probable token until end or `max_len` ids.
pub fn greedy(model: &impl NextToken, max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis::root();
    while h.ids.len() < max_len {
        let lp = masked_log_probs(model, &h.ids)?;
        let best = argmax(&lp);
        h.ids.push(best as u32);
        h.log_prob += lp[best];
        if best as u32 == END_ID {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    /// Rank finished sequences by log probability per generated token.
    pub length_normalize: bool,
}

impl BeamConfig {
    pub const DEFAULT_WIDTH: usize = 5;

    pub fn new(width: usize, max_len: usize) -> Self {
        BeamConfig {
            width,
            max_len,
            length_normalize: false,
        }
    }
}

/// Beam search. Every live hypothesis is expanded over the full vocabulary;
/// the best candidates fill the free slots, where candidates ending in end
/// move to the finished pool and permanently take a slot. Hypotheses that
/// reach `max_len` without end are finished as they are. The search stops
/// once `width` sequences are finished or nothing is live.
pub fn beam_search(model: &impl NextToken, cfg: BeamConfig) -> Result<Hypothesis> {
    if cfg.width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut live = vec![Hypothesis::root()];
    if cfg.max_len <= 1 {
        finished.append(&mut live);
    }

    while !live.is_empty() && finished.len() < cfg.width {
        let mut candidates: Vec<(f64, Vec<u32>)> = Vec::new();
        for h in &live {
            let lp = masked_log_probs(model, &h.ids)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut ids = h.ids.clone();
                ids.push(tok as u32);
                candidates.push((h.log_prob + l, ids));
            }
        }
        candidates.sort_by(|a, b| rank(a.0, &a.1, b.0, &b.1));

        let slots = cfg.width - finished.len();
        live = Vec::with_capacity(slots);
        for (score, ids) in candidates.into_iter().take(slots) {
            let ended = ids.last() == Some(&END_ID);
            let h = Hypothesis {
                finished: ended,
                ids,
                log_prob: score,
            };
            if ended || h.ids.len() >= cfg.max_len {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
    }

    let key = |h: &Hypothesis| {
        if cfg.length_normalize {
            h.normalized()
        } else {
            h.log_prob
        }
    };
    finished
        .into_iter()
        .min_by(|a, b| rank(key(a), &a.ids, key(b), &b.ids))
        .ok_or(Error::EmptyInput)
}

/// Largest search space the exhaustive oracle will enumerate.
pub const EXHAUSTIVE_GUARD: f64 = 1e6;

/// Scores every sequence that ends in end within `max_len` ids, plus every
/// sequence cut off at `max_len`, and returns the best.
pub fn exhaustive(model: &impl NextToken, max_len: usize) -> Result<Hypothesis> {
    let size = (model.vocab_size() as f64).powi(max_len as i32);
    if size > EXHAUSTIVE_GUARD {
        return Err(Error::TooLarge { size });
    }
    let mut best: Option<Hypothesis> = None;
    let mut stack = vec![Hypothesis::root()];
    while let Some(h) = stack.pop() {
        if h.finished || h.ids.len() >= max_len {
            let better = match &best {
                None => true,
                Some(b) => rank(h.log_prob, &h.ids, b.log_prob, &b.ids) == Ordering::Less,
            };
            if better {
                best = Some(h);
            }
            continue;
        }
        let lp = masked_log_probs(model, &h.ids)?;
        for (tok, &l) in lp.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            let mut ids = h.ids.clone();
            ids.push(tok as u32);
            stack.push(Hypothesis {
                finished: tok as u32 == END_ID,
                ids,
                log_prob: h.log_prob + l,
            });
        }
    }
    best.ok_or(Error::EmptyInput)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Search {
    Greedy,
    Beam(BeamConfig),
}

impl Search {
    pub fn run(&self, model: &impl NextToken, max_len: usize) -> Result<Hypothesis> {
        match *self {
            Search::Greedy => greedy(model, max_len),
            Search::Beam(cfg) => beam_search(model, BeamConfig { max_len, ..cfg }),
        }
    }
}

/// Decodes one caption per feature vector, preserving input order.
pub fn decode_all<T: Real>(
    params: &ModelParams<T>,
    features: &[&[T]],
    search: Search,
    max_len: usize,
    exec: Exec,
) -> Result<Vec<Hypothesis>> {
    exec.map(features, |f| {
        search.run(
            &Captioner {
                params,
                feature: f,
            },
            max_len,
        )
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    /// Next-token distributions drawn at random per prefix, fixed at
    /// construction for every prefix up to `max_len`.
    pub struct TableModel {
        pub vocab: usize,
        table: HashMap<Vec<u32>, Vec<f64>>,
    }

    impl TableModel {
        pub fn random(vocab: usize, max_len: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut table = HashMap::new();
            let mut frontier = vec![vec![START_ID]];
            while let Some(prefix) = frontier.pop() {
                let w: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.01..1.0f64).powi(3)).collect();
                let z: f64 = w.iter().sum();
                table.insert(prefix.clone(), w.iter().map(|x| (x / z).ln()).collect());
                if prefix.len() < max_len {
                    for t in 0..vocab as u32 {
                        let mut p = prefix.clone();
                        p.push(t);
                        frontier.push(p);
                    }
                }
            }
            TableModel { vocab, table }
        }

        pub fn from_fn(vocab: usize, f: impl Fn(&[u32]) -> Vec<f64>) -> impl NextToken {
            struct F<G>(usize, G);
            impl<G: Fn(&[u32]) -> Vec<f64>> NextToken for F<G> {
                fn vocab_size(&self) -> usize {
                    self.0
                }
                fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
                    Ok((self.1)(prefix))
                }
            }
            F(vocab, f)
        }
    }

    impl NextToken for TableModel {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
            self.table
                .get(prefix)
                .cloned()
                .ok_or(Error::EmptyInput)
        }
    }
}
