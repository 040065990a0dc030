//! Synthetic datasets shared by the integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mergecap::data_io::{self, CaptionRecord, Features};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "a", "dog", "cat", "runs", "sits", "on", "the", "grass", "red", "ball", "man", "rides",
    "bike", "near", "water", "child", "plays", "with", "blue", "kite",
];

pub fn image_id(i: usize) -> String {
    format!("img{i:03}")
}

/// `n` distinct captions of 3 to 6 words, one per image.
pub fn records(n: usize, seed: u64) -> Vec<CaptionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.gen_range(3..=6);
        let words: Vec<&str> = (0..len).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
        let caption = words.join(" ");
        if seen.insert(caption.clone()) {
            out.push(CaptionRecord {
                image_id: image_id(out.len()),
                caption,
            });
        }
    }
    out
}

/// Standard-normal-ish features, one vector per distinct id in `records`.
pub fn features(records: &[CaptionRecord], dim: usize, seed: u64) -> Features {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = Features::new(dim);
    let mut ids: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    ids.sort();
    ids.dedup();
    for id in ids {
        let v = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        f.vectors.insert(id.to_owned(), v);
    }
    f
}

pub struct Fixture {
    pub captions: PathBuf,
    pub features: PathBuf,
    pub vocab: PathBuf,
}

/// Writes captions and features for `n` images into `dir`. The vocabulary
/// path is reserved but not created.
pub fn write_fixture(dir: &Path, n: usize, dim: usize, seed: u64) -> Fixture {
    let recs = records(n, seed);
    let feats = features(&recs, dim, seed ^ 0x5eed);
    let fx = Fixture {
        captions: dir.join("captions.jsonl"),
        features: dir.join("features.feat"),
        vocab: dir.join("vocab.tsv"),
    };
    data_io::save_captions(&fx.captions, &recs).unwrap();
    data_io::save_features(&fx.features, &feats).unwrap();
    fx
}

pub fn mergecap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mergecap"))
        .args(args)
        .env_remove("MERGECAP_OUT_DIR")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}
