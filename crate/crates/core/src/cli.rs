//! Command-line workflow: vocabulary, training, captioning, evaluation and
//! gradient checking. Every command writes a JSON run manifest next to its
//! outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data_io::{self, CaptionRecord, Features, SplitName, SplitSpec};
use crate::decode::{self, BeamConfig, Search};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckOptions};
use crate::metrics::{self, EvalPair};
use crate::model::{self, ModelConfig, ModelParams, Sample};
use crate::par::Exec;
use crate::text::{self, EncodedCaption, Vocabulary, END_ID, PAD_ID, START_ID};
use crate::train::{self, EpochRecord, Optimizer, TrainConfig, TrainObserver};

pub const OUT_DIR_ENV: &str = "MERGECAP_OUT_DIR";
pub const CHECKPOINT_FILE: &str = "best.mcap";
pub const HISTORY_FILE: &str = "history.tsv";

#[derive(Debug, Parser)]
#[command(name = "mergecap", version, about = "Merge-architecture image captioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary from training-split captions.
    BuildVocab(BuildVocabArgs),
    /// Train a model and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Caption one image or all images in a feature file.
    Caption(CaptionArgs),
    /// Decode a split and score it against its reference captions.
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against finite differences on a toy model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Image counts (`7154,1000,1000`) or ratios (`0.8,0.1,0.1`).
    #[arg(long, default_value = "7154,1000,1000")]
    pub split: SplitSpec,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct OutDirArgs {
    /// Output directory (defaults to $MERGECAP_OUT_DIR, then `runs`).
    #[arg(long, env = OUT_DIR_ENV, default_value = "runs")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub min_count: u64,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub out: OutDirArgs,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_EMBEDDING_DIM)]
    pub embedding_dim: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_CONV_FILTERS)]
    pub conv_filters: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_KERNEL)]
    pub kernel: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_HIDDEN_DIM)]
    pub hidden_dim: usize,
    /// Sequence length including start and end; defaults to the longest
    /// training caption plus two, capped at 40.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub image_projection: bool,
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Shuffle seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Global gradient norm limit; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    /// Continue from the checkpoint already in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchArg {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[arg(long, value_enum, default_value_t = SearchArg::Beam)]
    pub search: SearchArg,
    #[arg(long, default_value_t = BeamConfig::DEFAULT_WIDTH, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    pub beam_width: usize,
    /// Rank beam results by mean log probability per token.
    #[arg(long)]
    pub length_normalize: bool,
    /// Longest sequence to generate, counting start; defaults to the
    /// model's max_len.
    #[arg(long)]
    pub max_len: Option<usize>,
}

impl SearchArgs {
    fn search(&self) -> Search {
        match self.search {
            SearchArg::Greedy => Search::Greedy,
            SearchArg::Beam => Search::Beam(BeamConfig {
                width: self.beam_width,
                max_len: 0,
                length_normalize: self.length_normalize,
            }),
        }
    }

    fn max_len(&self, config: &ModelConfig) -> Result<usize> {
        match self.max_len {
            None => Ok(config.max_len),
            Some(n) if (2..=config.max_len).contains(&n) => Ok(n),
            Some(n) => Err(Error::InvalidArgument(format!(
                "--max-len {n} must lie in 2..={}",
                config.max_len
            ))),
        }
    }
}

#[derive(Debug, Clone, Args)]
#[group(id = "target", required = true, multiple = false, args = ["image_id", "all"])]
pub struct CaptionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub image_id: Option<String>,
    #[arg(long)]
    pub all: bool,
    #[command(flatten)]
    pub search: SearchArgs,
    #[command(flatten)]
    pub out: OutDirArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub captions: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long = "split-name", value_enum, default_value_t = SplitName::Test)]
    pub split_name: SplitName,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Use each image's first reference as its candidate.
    #[arg(long)]
    pub self_test: bool,
    /// Report path; defaults to `report.json` in the output directory.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutDirArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// `V,D,F,K,I,H,max_len`.
    #[arg(long, default_value = "11,4,5,3,3,6,6")]
    pub dims: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub batch_size: usize,
    #[arg(long)]
    pub image_projection: bool,
    /// Negate one analytic gradient group to confirm the check fails.
    #[arg(long, hide = true)]
    pub fault_sign_flip: bool,
    #[command(flatten)]
    pub out: OutDirArgs,
}

/// Written alongside every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub tool_version: String,
    pub wall_seconds: f64,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_owned(),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seeds: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            wall_seconds: 0.0,
        }
    }

    fn write(mut self, path: &Path, started: Instant) -> Result<()> {
        self.wall_seconds = started.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_file(path, json.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::BuildVocab(a) => cmd_build_vocab(&a, stdout),
        Command::Train(a) => cmd_train(&a, stdout),
        Command::Caption(a) => cmd_caption(&a, stdout),
        Command::Evaluate(a) => cmd_evaluate(&a, stdout),
        Command::Gradcheck(a) => cmd_gradcheck(&a, stdout),
    }
}

fn out(stdout: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(stdout, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// Captions split by image according to `split`.
struct SplitCaptions {
    split: data_io::DatasetSplit,
    by_image: BTreeMap<String, Vec<String>>,
}

impl SplitCaptions {
    fn new(records: &[CaptionRecord], split: &SplitArgs) -> Result<Self> {
        let by_image = data_io::group_by_image(records);
        let ids: Vec<String> = by_image.keys().cloned().collect();
        let counts = split.split.counts(ids.len());
        let split = data_io::split_dataset(&ids, counts, split.split_seed)?;
        Ok(SplitCaptions { split, by_image })
    }

    /// `(image_id, caption)` pairs of one partition, ordered by image id.
    fn records(&self, name: SplitName) -> Vec<(&str, &str)> {
        let mut ids: Vec<&String> = self.split.part(name).iter().collect();
        ids.sort();
        ids.into_iter()
            .flat_map(|id| self.by_image[id].iter().map(move |c| (id.as_str(), c.as_str())))
            .collect()
    }
}

pub fn cmd_build_vocab(args: &BuildVocabArgs, stdout: &mut dyn Write) -> Result<()> {
    let started = Instant::now();
    let records = data_io::load_captions(&args.captions)?;
    let split = SplitCaptions::new(&records, &args.split)?;
    let corpus = split
        .records(SplitName::Train)
        .into_iter()
        .map(|(_, c)| text::tokenize(c))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::build(&corpus, args.min_count)?;
    write_file(&args.out, vocab.to_file_string().as_bytes())?;
    out(stdout, &format!("vocabulary size {}", vocab.len()))?;

    let mut m = RunManifest::new("build-vocab");
    m.config = serde_json::json!({
        "min_count": args.min_count,
        "split": args.split.split,
        "vocab_size": vocab.len(),
        "vocab_hash": vocab.hash(),
    });
    m.inputs.insert("captions".into(), args.captions.clone());
    m.outputs.insert("vocab".into(), args.out.clone());
    m.seeds.insert("split".into(), args.split.split_seed);
    m.write(&manifest_beside(&args.out), started)
}

fn manifest_beside(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn check_features(records: &[CaptionRecord], features: &Features) -> Result<()> {
    let missing: BTreeSet<&str> = records
        .iter()
        .map(|r| r.image_id.as_str())
        .filter(|id| features.get(id).is_none())
        .collect();
    if !missing.is_empty() {
        let list: Vec<&str> = missing.into_iter().collect();
        return Err(Error::InvalidArgument(format!(
            "features missing for {} image(s): {}",
            list.len(),
            list.join(", ")
        )));
    }
    Ok(())
}

fn encode_part(
    part: &[(&str, &str)],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<(String, EncodedCaption)>> {
    part.iter()
        .map(|&(id, c)| Ok((id.to_owned(), text::encode(&text::tokenize(c)?, vocab, max_len)?)))
        .collect()
}

fn samples<'a>(
    encoded: &'a [(String, EncodedCaption)],
    features: &'a Features,
) -> Vec<Sample<'a, f32>> {
    encoded
        .iter()
        .map(|(id, c)| Sample {
            feature: features.get(id).expect("features checked"),
            caption: c,
        })
        .collect()
}

struct CheckpointWriter<'a> {
    path: PathBuf,
    vocab_hash: String,
    log: Vec<String>,
    stdout: &'a mut dyn Write,
}

impl TrainObserver for CheckpointWriter<'_> {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        let line = record.log_line();
        out(self.stdout, &line)?;
        self.log.push(line);
        Ok(())
    }

    fn on_improvement(&mut self, _epoch: usize, params: &ModelParams<f32>) -> Result<()> {
        data_io::save_checkpoint(&self.path, params, &self.vocab_hash)
    }
}

pub fn cmd_train(args: &TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    let started = Instant::now();
    let records = data_io::load_captions(&args.captions)?;
    let features = data_io::load_features(&args.features)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    check_features(&records, &features)?;
    let split = SplitCaptions::new(&records, &args.split)?;
    let train_part = split.records(SplitName::Train);
    let val_part = split.records(SplitName::Val);
    if train_part.is_empty() || val_part.is_empty() {
        return Err(Error::EmptySplit);
    }

    ensure_dir(&args.out.out_dir)?;
    let ckpt_path = args.out.out_dir.join(CHECKPOINT_FILE);
    let vocab_hash = vocab.hash();

    let initial = if args.resume {
        let ck = data_io::load_checkpoint(&ckpt_path, Some(&vocab_hash))?;
        if ck.params.config.feature_dim != features.dim {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint expects {}-dim features, file has {}",
                ck.params.config.feature_dim, features.dim
            )));
        }
        ck.params
    } else {
        let tokenized = train_part
            .iter()
            .map(|(_, c)| text::tokenize(c))
            .collect::<Result<Vec<_>>>()?;
        let config = ModelConfig {
            vocab_size: vocab.len(),
            embedding_dim: args.embedding_dim,
            conv_filters: args.conv_filters,
            kernel: args.kernel,
            feature_dim: features.dim,
            hidden_dim: args.hidden_dim,
            max_len: args.max_len.unwrap_or_else(|| text::default_max_len(&tokenized)),
            image_projection: args.image_projection,
            seed: args.model_seed,
        };
        model::init_params(&config)?
    };
    let model_config = initial.config.clone();

    let train_enc = encode_part(&train_part, &vocab, model_config.max_len)?;
    let val_enc = encode_part(&val_part, &vocab, model_config.max_len)?;
    let train_set = samples(&train_enc, &features);
    let val_set = samples(&val_enc, &features);

    let train_config = TrainConfig {
        optimizer: match args.optimizer {
            OptimizerArg::Adam => Optimizer::adam(),
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        lr: args.lr,
        batch_size: args.batch_size,
        max_epochs: args.max_epochs,
        patience: args.patience,
        seed: args.seed,
        clip_norm: (args.clip_norm > 0.0).then_some(args.clip_norm),
    };

    let mut writer = CheckpointWriter {
        path: ckpt_path.clone(),
        vocab_hash,
        log: vec!["epoch\ttrain_loss\tval_loss\tseconds".to_owned()],
        stdout,
    };
    let (best, history) =
        train::train_from(initial, &train_set, &val_set, &train_config, &mut writer)?;
    let history_path = args.out.out_dir.join(HISTORY_FILE);
    let mut log = writer.log.join("\n");
    log.push('\n');
    write_file(&history_path, log.as_bytes())?;
    // The observer already wrote the best epoch to disk.
    drop(best);
    out(
        writer.stdout,
        &format!(
            "best epoch {} val_loss {:.6}",
            history.best_epoch,
            history.epochs[history.best_epoch - 1].val_loss
        ),
    )?;

    let mut m = RunManifest::new("train");
    m.config = serde_json::json!({
        "model": model_config,
        "train": train_config,
        "split": args.split.split,
        "resume": args.resume,
        "train_captions": train_set.len(),
        "val_captions": val_set.len(),
        "best_epoch": history.best_epoch,
        "epochs_run": history.epochs.len(),
    });
    m.inputs.insert("captions".into(), args.captions.clone());
    m.inputs.insert("features".into(), args.features.clone());
    m.inputs.insert("vocab".into(), args.vocab.clone());
    m.outputs.insert("checkpoint".into(), ckpt_path);
    m.outputs.insert("history".into(), history_path);
    m.seeds.insert("split".into(), args.split.split_seed);
    m.seeds.insert("model".into(), model_config.seed);
    m.seeds.insert("shuffle".into(), args.seed);
    m.write(&args.out.out_dir.join("train-manifest.json"), started)
}

fn load_model(checkpoint: &Path, vocab: &Vocabulary, features: &Features) -> Result<ModelParams<f32>> {
    let ck = data_io::load_checkpoint(checkpoint, Some(&vocab.hash()))?;
    if ck.params.config.feature_dim != features.dim {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint expects {}-dim features, file has {}",
            ck.params.config.feature_dim, features.dim
        )));
    }
    Ok(ck.params)
}

fn caption_tokens(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<String>> {
    ids.iter()
        .filter(|&&id| !matches!(id, PAD_ID | START_ID | END_ID))
        .map(|&id| {
            vocab
                .token(id)
                .map(str::to_owned)
                .ok_or(Error::UnknownId { id, size: vocab.len() })
        })
        .collect()
}

fn search_config_json(s: &SearchArgs, max_len: usize) -> serde_json::Value {
    serde_json::json!({
        "search": s.search,
        "beam_width": match s.search { SearchArg::Beam => Some(s.beam_width), SearchArg::Greedy => None },
        "length_normalize": s.length_normalize,
        "max_len": max_len,
    })
}

pub fn cmd_caption(args: &CaptionArgs, stdout: &mut dyn Write) -> Result<()> {
    let started = Instant::now();
    let features = data_io::load_features(&args.features)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let params = load_model(&args.checkpoint, &vocab, &features)?;
    let max_len = args.search.max_len(&params.config)?;

    let ids: Vec<String> = match &args.image_id {
        Some(id) => {
            if features.get(id).is_none() {
                return Err(Error::InvalidArgument(format!("unknown image id {id:?}")));
            }
            vec![id.clone()]
        }
        None => {
            let mut all: Vec<String> = features.vectors.keys().cloned().collect();
            all.sort();
            all
        }
    };
    let feats: Vec<&[f32]> = ids.iter().map(|id| features.get(id).unwrap()).collect();
    let hyps = decode::decode_all(&params, &feats, args.search.search(), max_len, Exec::default())?;
    for (id, h) in ids.iter().zip(&hyps) {
        out(stdout, &format!("{id}\t{}", text::decode_ids(&h.ids, &vocab)?))?;
    }

    let mut m = RunManifest::new("caption");
    m.config = search_config_json(&args.search, max_len);
    m.config["images"] = ids.len().into();
    m.inputs.insert("checkpoint".into(), args.checkpoint.clone());
    m.inputs.insert("features".into(), args.features.clone());
    m.inputs.insert("vocab".into(), args.vocab.clone());
    ensure_dir(&args.out.out_dir)?;
    m.write(&args.out.out_dir.join("caption-manifest.json"), started)
}

pub fn cmd_evaluate(args: &EvaluateArgs, stdout: &mut dyn Write) -> Result<()> {
    let started = Instant::now();
    let records = data_io::load_captions(&args.captions)?;
    let features = data_io::load_features(&args.features)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let params = load_model(&args.checkpoint, &vocab, &features)?;
    let max_len = args.search.max_len(&params.config)?;
    let split = SplitCaptions::new(&records, &args.split)?;

    let mut ids: Vec<String> = split.split.part(args.split_name).to_vec();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let subset: Vec<CaptionRecord> = records
        .iter()
        .filter(|r| ids.binary_search(&r.image_id).is_ok())
        .cloned()
        .collect();
    check_features(&subset, &features)?;

    let references: Vec<Vec<Vec<String>>> = ids
        .iter()
        .map(|id| split.by_image[id].iter().map(|c| text::tokenize(c)).collect())
        .collect::<Result<_>>()?;
    let candidates: Vec<Vec<String>> = if args.self_test {
        references.iter().map(|r| r[0].clone()).collect()
    } else {
        let feats: Vec<&[f32]> = ids.iter().map(|id| features.get(id).unwrap()).collect();
        decode::decode_all(&params, &feats, args.search.search(), max_len, Exec::default())?
            .iter()
            .map(|h| caption_tokens(&h.ids, &vocab))
            .collect::<Result<_>>()?
    };
    let pairs: Vec<EvalPair> = ids
        .iter()
        .zip(candidates)
        .zip(references)
        .map(|((id, candidate), references)| EvalPair {
            image_id: id.clone(),
            candidate,
            references,
        })
        .collect();
    let report = metrics::evaluate_corpus(&pairs)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    out(stdout, &json)?;

    ensure_dir(&args.out.out_dir)?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.out_dir.join("report.json"));
    write_file(&report_path, json.as_bytes())?;

    let mut m = RunManifest::new("evaluate");
    m.config = search_config_json(&args.search, max_len);
    m.config["split"] = serde_json::to_value(args.split.split).unwrap();
    m.config["split_name"] = serde_json::to_value(args.split_name).unwrap();
    m.config["self_test"] = args.self_test.into();
    m.inputs.insert("checkpoint".into(), args.checkpoint.clone());
    m.inputs.insert("features".into(), args.features.clone());
    m.inputs.insert("vocab".into(), args.vocab.clone());
    m.inputs.insert("captions".into(), args.captions.clone());
    m.outputs.insert("report".into(), report_path);
    m.seeds.insert("split".into(), args.split.split_seed);
    m.write(&args.out.out_dir.join("evaluate-manifest.json"), started)
}

fn parse_dims(s: &str) -> Result<[usize; 7]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("--dims {s:?}: {e}")))?;
    v.try_into()
        .map_err(|_| Error::InvalidArgument(format!("--dims {s:?}: expected V,D,F,K,I,H,max_len")))
}

/// Prints one line per parameter group. Fails when any group's relative
/// error reaches the threshold.
pub fn cmd_gradcheck(args: &GradcheckArgs, stdout: &mut dyn Write) -> Result<()> {
    let started = Instant::now();
    let [v, d, f, k, i, h, l] = parse_dims(&args.dims)?;
    let opts = GradCheckOptions {
        config: ModelConfig {
            vocab_size: v,
            embedding_dim: d,
            conv_filters: f,
            kernel: k,
            feature_dim: i,
            hidden_dim: h,
            max_len: l,
            image_projection: args.image_projection,
            seed: args.seed,
        },
        batch_size: args.batch_size,
        seed: args.seed,
        flip_sign: args.fault_sign_flip,
    };
    let report = gradcheck::run(&opts)?;
    for g in &report.groups {
        let verdict = if g.max_rel_error < gradcheck::THRESHOLD { "ok" } else { "FAIL" };
        out(
            stdout,
            &format!("{}\t{}\t{:.3e}\t{verdict}", g.name, g.entries, g.max_rel_error),
        )?;
    }

    let mut m = RunManifest::new("gradcheck");
    m.config = serde_json::json!({
        "dims": args.dims,
        "batch_size": args.batch_size,
        "image_projection": args.image_projection,
        "fault_sign_flip": args.fault_sign_flip,
        "eps": gradcheck::EPS,
        "threshold": gradcheck::THRESHOLD,
        "max_rel_error": report.worst(),
        "param_seed": report.param_seed,
    });
    m.seeds.insert("seed".into(), args.seed);
    ensure_dir(&args.out.out_dir)?;
    m.write(&args.out.out_dir.join("gradcheck-manifest.json"), started)?;

    if report.passed() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "gradient check failed: max relative error {:.3e} >= {:.0e}",
            report.worst(),
            gradcheck::THRESHOLD
        )))
    }
}
