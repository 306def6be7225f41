//! End-to-end stages over a run directory:
//!
//! ```text
//! <run>/           config.json, run.json
//! <run>/data/        manifest.json, signals.f32, rules.json, vocab_truth.json
//! <run>/knowledge/   vocab.json, labels.jsonl, entities.jsonl, cache/
//! <run>/pretrain/    metrics.jsonl, validation.jsonl, best.ckpt, final.ckpt
//! <run>/eval/        one JSON (and CSV) per evaluation
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{expand_grid, ClientKind, EmbedderKind, GridAxis, RunConfig};
use crate::data::{generate_synthetic, load_manifest, normalize_record, DatasetManifest, Lead, Split, SyntheticConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{
    lead_sweep, linear_probe, manifest_classes, seen_unseen_split, write_sweep_csv, zero_shot, DownstreamSet,
    EvalReport, ProbeOutcome, ProbeSets, SeenUnseen, SweepMode,
};
use crate::knowledge::{
    mine_reports, read_labels, write_labels, CachedClient, ChatClient, EntityVocabulary, LabelVector, LlmClient,
    MiningOptions, MiningOutput, RuleBasedClient, RuleTables,
};
use crate::model::{KmerlModel, ModelConfig, ModelState};
use crate::numerics::{check_gradients, GradCheckConfig, GradCheckReport};
use crate::query::QueryConfig;
use crate::text::{embed_batch_external, TextConfig, TextEmbedding, TextVocab};
use crate::training::{
    prepare_records, pretrain, sample_grid, total_loss, BatchItem, LossConfig, PretrainConfig, PretrainOutcome,
};

/// Paths of one run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn knowledge(&self) -> PathBuf {
        self.root.join("knowledge")
    }

    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn vocab(&self) -> PathBuf {
        self.knowledge().join("vocab.json")
    }

    pub fn labels(&self) -> PathBuf {
        self.knowledge().join("labels.jsonl")
    }

    pub fn entities(&self) -> PathBuf {
        self.knowledge().join("entities.jsonl")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.pretrain().join("best.ckpt")
    }

    fn manifest(&self, cfg: &RunConfig) -> PathBuf {
        cfg.manifest.clone().unwrap_or_else(|| self.data().join("manifest.json"))
    }
}

pub fn load_run_manifest(cfg: &RunConfig, layout: &RunLayout) -> Result<DatasetManifest> {
    Ok(load_manifest(&layout.manifest(cfg))?)
}

pub fn synth(cfg: &RunConfig, layout: &RunLayout) -> Result<DatasetManifest> {
    let corpus = generate_synthetic(&cfg.synthetic)?;
    Ok(corpus.write(&layout.data())?)
}

fn mining_client(cfg: &RunConfig, layout: &RunLayout) -> Result<(Box<dyn ChatClient>, MiningOptions)> {
    match cfg.mining.client {
        ClientKind::Rule => {
            let path = cfg.mining.rules.clone().unwrap_or_else(|| layout.data().join("rules.json"));
            let tables = RuleTables::load(&path)?;
            Ok((Box::new(RuleBasedClient::new(tables)), cfg.mining.options))
        }
        ClientKind::Llm => {
            let llm = &cfg.mining.llm;
            let cache = llm.cache_dir.clone().unwrap_or_else(|| layout.knowledge().join("cache"));
            let client = CachedClient::new(LlmClient::new(llm.clone())?, cache, llm.temperature)?;
            let opts = MiningOptions {
                concurrency: llm.max_in_flight.max(1),
                parse_retries: llm.max_retries,
            };
            Ok((Box::new(client), opts))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EntityLine {
    record_id: String,
    entities: Vec<String>,
}

/// Mine the train and valid reports; writes vocabulary, labels and the
/// per-report entity lists.
pub fn mine(cfg: &RunConfig, layout: &RunLayout) -> Result<MiningOutput> {
    let manifest = load_run_manifest(cfg, layout)?;
    let entries: Vec<_> = manifest.entries(Split::Train).chain(manifest.entries(Split::Valid)).collect();
    let reports: Vec<String> = entries.iter().map(|e| e.report.clone()).collect();
    let (client, opts) = mining_client(cfg, layout)?;
    let out = mine_reports(&reports, client.as_ref(), &opts)?;

    fs::create_dir_all(layout.knowledge())?;
    out.vocabulary.save(&layout.vocab())?;
    let labels: Vec<(String, LabelVector)> =
        entries.iter().zip(&out.labels).map(|(e, l)| (e.id.clone(), l.clone())).collect();
    write_labels(&layout.labels(), &labels)?;
    let mut f = fs::File::create(layout.entities())?;
    for (e, ents) in entries.iter().zip(&out.extracted) {
        serde_json::to_writer(&mut f, &EntityLine { record_id: e.id.clone(), entities: ents.clone() })?;
        f.write_all(b"\n")?;
    }
    Ok(out)
}

pub fn load_knowledge(layout: &RunLayout) -> Result<(EntityVocabulary, HashMap<String, LabelVector>)> {
    let vocab = EntityVocabulary::load(&layout.vocab())?;
    let labels = read_labels(&layout.labels(), vocab.len())?.into_iter().collect();
    Ok((vocab, labels))
}

/// Pretrain into `out` (the layout's pretrain directory by default).
pub fn run_pretrain(cfg: &RunConfig, layout: &RunLayout, out: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let manifest = load_run_manifest(cfg, layout)?;
    let (vocab, labels) = load_knowledge(layout)?;
    let train = prepare_records(&manifest, Split::Train, &labels)?;
    let valid = prepare_records(&manifest, Split::Valid, &labels)?;
    let dir = out.map_or_else(|| layout.pretrain(), Path::to_path_buf);
    pretrain(&train, &valid, &vocab.entities, &cfg.model, &cfg.pretrain, &dir, &cfg.hash())
}

pub fn load_state(path: &Path) -> Result<ModelState> {
    Ok(ModelState::load(path)?.0)
}

fn class_names(cfg: &RunConfig, manifest: &DatasetManifest) -> Vec<String> {
    if cfg.eval.class_names.is_empty() {
        manifest_classes(manifest)
    } else {
        cfg.eval.class_names.clone()
    }
}

pub fn downstream_split(cfg: &RunConfig, layout: &RunLayout, split: Split) -> Result<DownstreamSet> {
    let manifest = load_run_manifest(cfg, layout)?;
    DownstreamSet::from_manifest(&manifest, split, &class_names(cfg, &manifest))
}

fn write_report(layout: &RunLayout, name: &str, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(layout.eval())?;
    report.write_json(&layout.eval().join(format!("{name}.json")))?;
    report.write_class_csv(&layout.eval().join(format!("{name}.csv")))
}

/// A split restricted to `eval.leads` when that is set.
fn eval_split(cfg: &RunConfig, layout: &RunLayout, split: Split) -> Result<DownstreamSet> {
    let set = downstream_split(cfg, layout, split)?;
    match cfg.eval.leads {
        Some(k) => set.restrict(&Lead::first(k), cfg.eval.zero_pad),
        None => Ok(set),
    }
}

/// Record the evaluated lead subset on a report.
fn tag_leads(cfg: &RunConfig, report: &mut EvalReport) {
    if let Some(k) = cfg.eval.leads {
        report.leads = Lead::first(k).iter().map(|l| l.name().to_string()).collect();
        report.zero_padded = cfg.eval.zero_pad;
    }
}

fn leads_suffix(cfg: &RunConfig) -> String {
    match cfg.eval.leads {
        Some(k) => format!("_leads{k}{}", if cfg.eval.zero_pad { "_zeropad" } else { "" }),
        None => String::new(),
    }
}

pub fn run_zero_shot(cfg: &RunConfig, layout: &RunLayout, checkpoint: &Path) -> Result<EvalReport> {
    let state = load_state(checkpoint)?;
    let test = eval_split(cfg, layout, Split::Test)?;
    let mut report = zero_shot(&state, &test)?.with_config_hash(&cfg.hash());
    tag_leads(cfg, &mut report);
    write_report(layout, &format!("zeroshot{}", leads_suffix(cfg)), &report)?;
    Ok(report)
}

pub fn run_linear_probe(cfg: &RunConfig, layout: &RunLayout, checkpoint: &Path) -> Result<ProbeOutcome> {
    let state = load_state(checkpoint)?;
    let train = eval_split(cfg, layout, Split::Train)?;
    let valid = eval_split(cfg, layout, Split::Valid)?;
    let test = eval_split(cfg, layout, Split::Test)?;
    let mut out = linear_probe(&state, &train, &valid, &test, &cfg.eval.probe)?;
    if out.encoder_hash_before != out.encoder_hash_after {
        return Err(Error::Invalid("encoder parameters changed during probing".into()));
    }
    out.report.config_hash = cfg.hash();
    tag_leads(cfg, &mut out.report);
    write_report(layout, &format!("linprobe_{}{}", cfg.eval.probe.fraction, leads_suffix(cfg)), &out.report)?;
    Ok(out)
}

pub fn run_lead_sweep(
    cfg: &RunConfig,
    layout: &RunLayout,
    checkpoint: &Path,
    mode: SweepMode,
    zero_pad: bool,
) -> Result<Vec<EvalReport>> {
    let state = load_state(checkpoint)?;
    let test = downstream_split(cfg, layout, Split::Test)?;
    let (train, valid);
    let probe = if mode == SweepMode::Probe {
        train = downstream_split(cfg, layout, Split::Train)?;
        valid = downstream_split(cfg, layout, Split::Valid)?;
        Some(ProbeSets { train: &train, valid: &valid, config: &cfg.eval.probe })
    } else {
        None
    };
    let hash = cfg.hash();
    let reports: Vec<EvalReport> = lead_sweep(&state, &test, mode, probe, zero_pad)?
        .into_iter()
        .map(|r| r.with_config_hash(&hash))
        .collect();
    fs::create_dir_all(layout.eval())?;
    let name = format!(
        "leadsweep_{}{}",
        if mode == SweepMode::ZeroShot { "zeroshot" } else { "probe" },
        if zero_pad { "_zeropad" } else { "" }
    );
    fs::write(layout.eval().join(format!("{name}.json")), serde_json::to_string_pretty(&reports)? + "\n")?;
    write_sweep_csv(&layout.eval().join(format!("{name}.csv")), &reports)?;
    Ok(reports)
}

/// Embed with the configured embedder: the checkpoint's text encoder or the
/// external service.
pub fn embed_with(cfg: &RunConfig, state: &ModelState, texts: &[String]) -> Result<Vec<TextEmbedding>> {
    match cfg.eval.embedder {
        EmbedderKind::Reference => {
            let t = state.embed_texts(texts)?;
            Ok(texts
                .iter()
                .enumerate()
                .map(|(i, s)| TextEmbedding::new(s, t.row(i).iter().map(|&v| v as f64).collect()))
                .collect())
        }
        EmbedderKind::External => embed_batch_external(texts, &cfg.eval.external, state.model.cfg.shared_dim),
    }
}

pub fn run_seen_unseen(cfg: &RunConfig, layout: &RunLayout, checkpoint: &Path) -> Result<SeenUnseen> {
    let state = load_state(checkpoint)?;
    let manifest = load_run_manifest(cfg, layout)?;
    let (vocab, _) = load_knowledge(layout)?;
    let split = seen_unseen_split(&vocab.entities, &class_names(cfg, &manifest), cfg.eval.overlap_threshold, |t| {
        embed_with(cfg, &state, t)
    })?;
    fs::create_dir_all(layout.eval())?;
    fs::write(layout.eval().join("seen_unseen.json"), serde_json::to_string_pretty(&split)? + "\n")?;
    Ok(split)
}

/// Configuration used by [`gradcheck_total_loss`]: width 8, one layer per
/// transformer, short signals.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        shared_dim: 8,
        init_seed: 0,
        encoder: EncoderConfig {
            token_length: 25,
            signal_length: 200,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2,
        },
        text: TextConfig { width: 8, num_layers: 1, num_heads: 2, mlp_ratio: 2 },
        query: QueryConfig { num_layers: 1, num_heads: 2, mlp_ratio: 2 },
    }
}

/// Finite-difference check of the full pretraining loss (contrastive plus
/// cardiac-query terms) on a two-record batch in `f64`, masks fixed by `seed`.
pub fn gradcheck_total_loss(seed: u64, check: GradCheckConfig) -> Result<GradCheckReport> {
    let mut model_cfg = gradcheck_model_config();
    model_cfg.init_seed = seed;
    let synth = SyntheticConfig {
        num_records: 2,
        num_valid: 0,
        num_test: 0,
        num_classes: 2,
        seed,
        length: model_cfg.encoder.signal_length,
        ..SyntheticConfig::default()
    };
    let corpus = generate_synthetic(&synth)?;
    let reports: Vec<String> = corpus.records.iter().map(|r| r.report().to_string()).collect();
    let mined = mine_reports(&reports, &RuleBasedClient::new(corpus.rules.clone()), &MiningOptions::default())?;

    let vocab = TextVocab::build(reports.iter().map(String::as_str).chain(mined.vocabulary.entities.iter().map(String::as_str)));
    let (model, params) = KmerlModel::build(&model_cfg, vocab)?;
    let pcfg = PretrainConfig { batch_size: 2, seed, ..PretrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<_> = corpus.records.iter().cloned().map(normalize_record).collect();
    let labels: Vec<Vec<f64>> = mined.labels.iter().map(LabelVector::as_f64).collect();
    let grids = records
        .iter()
        .map(|r| sample_grid(r, &model_cfg.encoder, &pcfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<BatchItem<'_>> = grids
        .iter()
        .zip(&records)
        .zip(&labels)
        .map(|((g, r), l)| BatchItem { grid: g.clone(), report: r.report(), labels: l })
        .collect();
    let loss_cfg = LossConfig::from(&pcfg);
    let entities = &mined.vocabulary.entities;
    check_gradients(
        |g, p| Ok::<_, Error>(total_loss(g, p, &model, &batch, entities, &loss_cfg)?.total),
        &params,
        check,
    )
}

/// One point of an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub name: String,
    pub overrides: Vec<String>,
    pub root: PathBuf,
    pub final_loss: f64,
    pub zero_shot: EvalReport,
}

fn point_name(overrides: &[String]) -> String {
    if overrides.is_empty() {
        return "base".into();
    }
    overrides.join("__").replace(['/', ' '], "_")
}

/// Every grid point is a full run (synth unless a manifest is configured,
/// mine, pretrain, zero-shot on the final state) in `<run>/ablate/<point>`,
/// one after another. Writes `<run>/eval/ablation.csv`.
pub fn run_grid(cfg: &RunConfig, layout: &RunLayout, axes: &[GridAxis]) -> Result<Vec<GridRun>> {
    let mut results = Vec::new();
    for overrides in expand_grid(axes) {
        let pcfg = cfg.with_overrides(&overrides)?;
        pcfg.validate()?;
        let name = point_name(&overrides);
        let point = RunLayout::new(layout.root.join("ablate").join(&name));
        record_run(&pcfg, &point, "ablate")?;
        if pcfg.manifest.is_none() {
            synth(&pcfg, &point)?;
        }
        mine(&pcfg, &point)?;
        let out = run_pretrain(&pcfg, &point, None)?;
        let test = downstream_split(&pcfg, &point, Split::Test)?;
        let report = zero_shot(&out.state, &test)?.with_config_hash(&pcfg.hash());
        write_report(&point, "zeroshot", &report)?;
        let final_loss = out.history.last().map_or(f64::NAN, |m| m.loss_total);
        log::info!("{name}: final loss {final_loss:.4}, zero-shot macro AUC {:?}", report.macro_auc);
        results.push(GridRun { name, overrides, root: point.root.clone(), final_loss, zero_shot: report });
    }
    fs::create_dir_all(layout.eval())?;
    let mut csv = String::from("point,final_loss,macro_auc,macro_f1\n");
    for r in &results {
        let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        csv += &format!("{},{},{},{}\n", r.name, r.final_loss, f(r.zero_shot.macro_auc), f(r.zero_shot.macro_f1));
    }
    fs::write(layout.eval().join("ablation.csv"), csv)?;
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

/// Persist the resolved config and its seeds and hash in the run directory.
pub fn record_run(cfg: &RunConfig, layout: &RunLayout, command: &str) -> Result<()> {
    fs::create_dir_all(&layout.root)?;
    cfg.save(&layout.root.join("config.json"))?;
    let record = RunRecord {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        seeds: BTreeMap::from([
            ("synthetic".to_string(), cfg.synthetic.seed),
            ("model_init".to_string(), cfg.model.init_seed),
            ("pretrain".to_string(), cfg.pretrain.seed),
            ("probe".to_string(), cfg.eval.probe.seed),
        ]),
    };
    fs::write(layout.root.join("run.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(())
}
