//! Approximator pretraining, the budgeted alternating epoch loop, validation
//! and the end-to-end experiment.

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use config::{BackendSection, BudgetSection, DataSection, ModelSection, TrainConfig, TrainSection};

use crate::engines::{OcrService, Phase, QueryContext, ResponseCache};
use crate::imaging::Image;
use crate::metrics::{cer, word_accuracy};
use crate::neural::{
    bypass_loss, ctc_loss_indices, greedy_decode, min_timesteps, AdamConfig, Alphabet, ApproximatorModel, Checkpoint,
    OptimizerState, PreprocessorModel,
};
use crate::pruning::{prune, rank_documents, DocumentRank, PruneOutcome};
use crate::selection::{
    compute_k, epoch_query_ceiling, initialize_history, plan_queries, record_epoch_cers, CerHistory,
};
use crate::synthdoc::{Dataset, Split, TextStrip};
use crate::{Error, Result};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_JITTER: u64 = 2;
const STREAM_SELECT: u64 = 3;
const STREAM_PRETRAIN: u64 = 4;
const STREAM_VALIDATION: u64 = 5;

fn stream_rng(seed: u64, purpose: u64, epoch: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | u64::from(epoch));
    rng
}

pub fn build_service(backend: &BackendSection) -> Result<OcrService> {
    let engine = backend.spec.build_with_timeout(
        backend.cost_per_query,
        &backend.simulated(),
        Duration::from_secs_f64(backend.timeout_seconds),
    );
    let cache = match &backend.cache {
        Some(path) => ResponseCache::open(path)?,
        None => ResponseCache::in_memory(),
    };
    Ok(OcrService::new(engine).with_cache(cache).with_max_in_flight(backend.max_in_flight))
}

/// Fresh models for a configuration. Seeds derive from `train.seed`.
pub fn initial_models(cfg: &TrainConfig, strip_height: usize, alphabet: &Alphabet) -> Result<(PreprocessorModel, ApproximatorModel)> {
    let seed = cfg.train.seed;
    let g = PreprocessorModel::new(cfg.model.preprocessor(), seed.wrapping_mul(2).wrapping_add(1))?;
    let f = ApproximatorModel::new(cfg.model.approximator(strip_height, alphabet.classes()), seed.wrapping_mul(2))?;
    Ok((g, f))
}

/// Encodes an OCR output as a training target, dropping characters the
/// approximator cannot emit.
pub fn ocr_target(alphabet: &Alphabet, text: &str) -> Vec<usize> {
    text.chars().filter_map(|c| alphabet.index_of(c)).collect()
}

/// One cached OCR query per strip, stamped epoch 0.
pub fn run_prepass(service: &OcrService, strips: &[&TextStrip]) -> Result<BTreeMap<String, String>> {
    let requests: Vec<(&Image, QueryContext)> = strips
        .iter()
        .map(|s| (&s.image, QueryContext::new(Phase::PretrainPrepass, s.sample_id.clone(), 0)))
        .collect();
    let mut outputs = BTreeMap::new();
    for (strip, result) in strips.iter().zip(service.query_batch(&requests, true)) {
        outputs.insert(strip.sample_id.clone(), result?);
    }
    Ok(outputs)
}

fn check_finite(value: f64, block: &str, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            block: block.to_string(),
            detail: format!("{what} is {value}"),
        })
    }
}

/// Fits `f` to the pre-pass outputs with CTC. Returns the mean loss per epoch.
pub fn pretrain_approximator(
    f: &mut ApproximatorModel,
    strips: &[&TextStrip],
    outputs: &BTreeMap<String, String>,
    alphabet: &Alphabet,
    train: &TrainSection,
    epochs: u32,
) -> Result<Vec<f64>> {
    let mut targets = Vec::with_capacity(strips.len());
    for s in strips {
        let out = outputs
            .get(&s.sample_id)
            .ok_or_else(|| Error::InvalidState(format!("missing pre-pass output for sample {}", s.sample_id)))?;
        let t = ocr_target(alphabet, out);
        if min_timesteps(&t) <= f.arch().timesteps(s.image.width()) {
            targets.push((*s, t));
        }
    }
    let mut opt = OptimizerState::new(AdamConfig::new(train.lr_pretrain, train.weight_decay), f.parameter_count());
    let mut losses = Vec::with_capacity(epochs as usize);
    let mut grads = vec![0.0; f.parameter_count()];
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.shuffle(&mut stream_rng(train.seed, STREAM_PRETRAIN, epoch));
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let (strip, target) = &targets[i];
                let tape = f.forward(&strip.image)?;
                let (loss, g_lp) = ctc_loss_indices(tape.logits(), target)?;
                check_finite(loss, "approximator", "pretraining loss")?;
                total += loss;
                f.backward(&tape, &g_lp, Some(&mut grads));
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            let layout = f.layout().clone();
            opt.step(&layout, f.params_mut(), &grads)?;
        }
        losses.push(total / targets.len().max(1) as f64);
        log::debug!("pretrain epoch {epoch}: loss {:.4}", losses.last().unwrap());
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u32,
    pub train_loss_f: f64,
    pub train_loss_g: f64,
    pub validation_word_accuracy: f64,
    pub approximation_accuracy: f64,
    pub validation_mean_intensity: f64,
    pub queries_this_epoch: usize,
    pub query_ceiling: usize,
    /// Jittered queries per entry of `jitter_sigmas`.
    pub sigma_counts: Vec<usize>,
    pub skipped_targets: usize,
    pub wall_time_seconds: f64,
}

/// Mutable state carried across epochs.
pub struct TrainingState {
    pub g: PreprocessorModel,
    pub f: ApproximatorModel,
    pub opt_g: OptimizerState,
    pub opt_f: OptimizerState,
    pub history: CerHistory,
}

impl TrainingState {
    pub fn new(cfg: &TrainConfig, g: PreprocessorModel, f: ApproximatorModel, history: CerHistory) -> Self {
        let t = &cfg.train;
        TrainingState {
            opt_g: OptimizerState::new(AdamConfig::new(t.lr_preprocessor, t.weight_decay), g.parameter_count()),
            opt_f: OptimizerState::new(AdamConfig::new(t.lr_approximator, t.weight_decay), f.parameter_count()),
            g,
            f,
            history,
        }
    }
}

fn jitter(image: &Image, sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    let mut out = image.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
        for v in out.data_mut() {
            *v += normal.sample(rng);
        }
    }
    out.clamp_unit();
    out
}

/// One pass of the budgeted alternating loop. Validation fields of the
/// returned report are left at zero.
pub fn train_epoch(
    state: &mut TrainingState,
    strips: &[&TextStrip],
    service: &OcrService,
    cfg: &TrainConfig,
    alphabet: &Alphabet,
    epoch: u32,
) -> Result<EpochReport> {
    let started = Instant::now();
    let policy = cfg.budget_policy();
    let strategy = cfg.strategy();
    let t = &cfg.train;
    let train_before = service.ledger().count(Phase::Train);

    let mut order: Vec<usize> = (0..strips.len()).collect();
    order.shuffle(&mut stream_rng(t.seed, STREAM_SHUFFLE, epoch));
    let mut select_rng = stream_rng(t.seed, STREAM_SELECT, epoch);
    let mut jitter_rng = stream_rng(t.seed, STREAM_JITTER, epoch);

    let mut ceiling = 0;
    let mut sigma_counts = vec![0usize; t.jitter_sigmas.len()];
    let (mut loss_f, mut f_terms, mut loss_g, mut skipped) = (0.0, 0usize, 0.0, 0usize);
    let mut grad_f = vec![0.0; state.f.parameter_count()];
    let mut grad_g = vec![0.0; state.g.parameter_count()];

    for batch_idx in order.chunks(t.batch_size) {
        let batch: Vec<&TextStrip> = batch_idx.iter().map(|&i| strips[i]).collect();
        let ids: Vec<&str> = batch.iter().map(|s| s.sample_id.as_str()).collect();

        // (1) preprocess the whole batch
        let mut tapes = Vec::with_capacity(batch.len());
        let mut cleaned = Vec::with_capacity(batch.len());
        for s in &batch {
            let tape = state.g.forward(&s.image)?;
            cleaned.push(Image::from_vec(s.image.height(), s.image.width(), tape.output().to_vec())?);
            tapes.push(tape);
        }

        // (2) budget and selection on previous-epoch CERs
        let plan = compute_k(&policy, batch.len())?;
        ceiling += plan.total_queries;
        let cers = state.history.cers_before(&ids, epoch)?;
        let picks = plan_queries(&plan, &strategy, &cers, &mut select_rng)?;

        // (3) jitter, query, (4) update the approximator on the summed loss
        if !picks.is_empty() {
            let mut jittered = Vec::with_capacity(picks.len());
            for &p in &picks {
                let which = jitter_rng.gen_range(0..t.jitter_sigmas.len());
                sigma_counts[which] += 1;
                jittered.push(jitter(&cleaned[p], t.jitter_sigmas[which], &mut jitter_rng));
            }
            let requests: Vec<(&Image, QueryContext)> = picks
                .iter()
                .zip(&jittered)
                .map(|(&p, img)| (img, QueryContext::new(Phase::Train, ids[p], epoch)))
                .collect();
            let answers = service.query_batch(&requests, false);
            grad_f.iter_mut().for_each(|g| *g = 0.0);
            let mut used = 0;
            for (img, answer) in jittered.iter().zip(answers) {
                let target = ocr_target(alphabet, &answer?);
                if min_timesteps(&target) > state.f.arch().timesteps(img.width()) {
                    skipped += 1;
                    continue;
                }
                let tape = state.f.forward(img)?;
                let (loss, g_lp) = ctc_loss_indices(tape.logits(), &target)?;
                check_finite(loss, "approximator", "query loss")?;
                loss_f += loss;
                f_terms += 1;
                used += 1;
                state.f.backward(&tape, &g_lp, Some(&mut grad_f));
            }
            if used > 0 {
                let layout = state.f.layout().clone();
                state.opt_f.step(&layout, state.f.params_mut(), &grad_f)?;
            }
        }

        // (5) preprocessor step on the full batch with the approximator frozen
        let frozen = state.f.params().to_vec();
        grad_g.iter_mut().for_each(|g| *g = 0.0);
        let mut predictions = Vec::with_capacity(batch.len());
        for (s, tape) in batch.iter().zip(&tapes) {
            let target = alphabet.encode(&s.text)?;
            let (loss, logits) = bypass_loss(
                &state.g,
                tape,
                &state.f,
                s.image.height(),
                s.image.width(),
                &target,
                t.beta,
                Some(&mut grad_g),
            )?;
            check_finite(loss, "preprocessor", "bypass loss")?;
            loss_g += loss;
            predictions.push(greedy_decode(&logits, alphabet));
        }
        let scale = 1.0 / batch.len() as f64;
        grad_g.iter_mut().for_each(|g| *g *= scale);
        let layout = state.g.layout().clone();
        state.opt_g.step(&layout, state.g.params_mut(), &grad_g)?;
        if state.f.params() != frozen.as_slice() {
            return Err(Error::InvalidState("approximator parameters changed during the preprocessor step".into()));
        }

        // (6) record this epoch's CERs from the approximator's decodes
        let truths: Vec<&str> = batch.iter().map(|s| s.text.as_str()).collect();
        record_epoch_cers(&mut state.history, &ids, &predictions, &truths, epoch)?;
    }

    let queries = service.ledger().count(Phase::Train) - train_before;
    Ok(EpochReport {
        epoch,
        train_loss_f: if f_terms > 0 { loss_f / f_terms as f64 } else { 0.0 },
        train_loss_g: loss_g / strips.len().max(1) as f64,
        validation_word_accuracy: 0.0,
        approximation_accuracy: 0.0,
        validation_mean_intensity: 0.0,
        queries_this_epoch: queries,
        query_ceiling: ceiling,
        sigma_counts,
        skipped_targets: skipped,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub word_accuracy: f64,
    pub approximation_accuracy: f64,
    pub mean_intensity: f64,
    pub queries: usize,
}

/// Deterministic subset of `n` positions; `size` 0 keeps everything.
pub fn subsample_positions(n: usize, size: usize, seed: u64) -> Vec<usize> {
    if size == 0 || size >= n {
        return (0..n).collect();
    }
    let mut picked = sample(&mut stream_rng(seed, STREAM_VALIDATION, 0), n, size).into_vec();
    picked.sort_unstable();
    picked
}

/// OCR word accuracy on `g(x)` and agreement of `f` with the OCR on the
/// same images. Queries are eval-phase and bypass the cache.
pub fn evaluate(
    g: &PreprocessorModel,
    f: Option<&ApproximatorModel>,
    strips: &[&TextStrip],
    service: &OcrService,
    alphabet: &Alphabet,
    epoch: u32,
) -> Result<Evaluation> {
    if strips.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let cleaned: Vec<Image> = strips.iter().map(|s| g.preprocess(&s.image)).collect::<Result<_>>()?;
    let requests: Vec<(&Image, QueryContext)> = cleaned
        .iter()
        .zip(strips)
        .map(|(img, s)| (img, QueryContext::new(Phase::Eval, s.sample_id.clone(), epoch)))
        .collect();
    let answers: Vec<String> = service.query_batch(&requests, false).into_iter().collect::<Result<_>>()?;
    let truths: Vec<&str> = strips.iter().map(|s| s.text.as_str()).collect();
    let word = word_accuracy(&answers, &truths)?;
    let approx = match f {
        Some(f) => {
            let decoded: Vec<String> =
                cleaned.iter().map(|img| Ok(greedy_decode(&f.approximate(img)?, alphabet))).collect::<Result<_>>()?;
            word_accuracy(&decoded, &answers)?
        }
        None => 0.0,
    };
    let mean_intensity = cleaned.iter().map(Image::mean).sum::<f64>() / cleaned.len() as f64;
    Ok(Evaluation {
        word_accuracy: word,
        approximation_accuracy: approx,
        mean_intensity,
        queries: requests.len(),
    })
}

pub fn validate(
    g: &PreprocessorModel,
    f: &ApproximatorModel,
    strips: &[&TextStrip],
    service: &OcrService,
    alphabet: &Alphabet,
    subsample: usize,
    seed: u64,
    epoch: u32,
) -> Result<Evaluation> {
    let subset: Vec<&TextStrip> = subsample_positions(strips.len(), subsample, seed).into_iter().map(|i| strips[i]).collect();
    evaluate(g, Some(f), &subset, service, alphabet, epoch)
}

/// Output of the pre-pass, ranking, pruning and pretraining stage.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub approximator: ApproximatorModel,
    pub prepass: BTreeMap<String, String>,
    pub ranking: Vec<DocumentRank>,
    pub pruning: PruneOutcome,
    pub pretrain_losses: Vec<f64>,
    pub prepass_queries: usize,
}

impl Pretrained {
    pub fn kept_documents(&self) -> BTreeSet<String> {
        self.pruning.kept_ids()
    }

    /// Pre-pass CER of every strip that has an output.
    pub fn prepass_cers(&self, dataset: &Dataset) -> BTreeMap<String, f64> {
        dataset
            .split(Split::Train)
            .into_iter()
            .filter_map(|s| self.prepass.get(&s.sample_id).map(|o| (s.sample_id.clone(), cer(o, &s.text).value)))
            .collect()
    }
}

pub fn kept_strips<'a>(dataset: &'a Dataset, kept_documents: &BTreeSet<String>) -> Vec<&'a TextStrip> {
    dataset
        .split(Split::Train)
        .into_iter()
        .filter(|s| kept_documents.contains(&s.document_id))
        .collect()
}

pub fn strip_height(dataset: &Dataset) -> Result<usize> {
    dataset
        .strips
        .first()
        .map(|s| s.image.height())
        .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))
}

/// Pre-pass over every training strip, document ranking, pruning, then
/// pretraining of a fresh approximator on the kept strips.
pub fn pretrain_stage(cfg: &TrainConfig, dataset: &Dataset, service: &OcrService, alphabet: &Alphabet) -> Result<Pretrained> {
    let before = service.ledger().count(Phase::PretrainPrepass);
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let prepass = run_prepass(service, &train)?;
    let mut pretrained = Pretrained {
        approximator: initial_models(cfg, strip_height(dataset)?, alphabet)?.1,
        prepass,
        ranking: Vec::new(),
        pruning: PruneOutcome {
            kept: Vec::new(),
            removed: Vec::new(),
        },
        pretrain_losses: Vec::new(),
        prepass_queries: service.ledger().count(Phase::PretrainPrepass) - before,
    };
    let cers = pretrained.prepass_cers(dataset);
    pretrained.ranking = rank_documents(dataset.documents_in(Split::Train), &cers)?;
    pretrained.pruning = prune(&pretrained.ranking, cfg.data.prune_fraction)?;
    let kept = kept_strips(dataset, &pretrained.kept_documents());
    pretrained.pretrain_losses = pretrain_approximator(
        &mut pretrained.approximator,
        &kept,
        &pretrained.prepass,
        alphabet,
        &cfg.train,
        cfg.train.pretrain_epochs,
    )?;
    Ok(pretrained)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: TrainConfig,
    pub epochs_run: u32,
    pub best_epoch: u32,
    pub best_validation_word_accuracy: f64,
    pub test_word_accuracy: f64,
    pub test_raw_word_accuracy: f64,
    pub test_approximation_accuracy: f64,
    pub test_mean_intensity: f64,
    pub train_queries: usize,
    pub budget_ceiling: usize,
    pub eval_queries: usize,
    pub total_train_strips: usize,
    pub kept_train_strips: usize,
    pub pruned_documents: usize,
    pub epochs: Vec<EpochReport>,
    pub wall_time_seconds: f64,
}

impl ExperimentSummary {
    /// JSON with every wall-time field removed, for reproducibility checks.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::parse("summary", e.to_string()))?;
        strip_key(&mut v, "wall_time_seconds");
        serde_json::to_string_pretty(&v).map_err(|e| Error::parse("summary", e.to_string()))
    }
}

fn strip_key(v: &mut serde_json::Value, key: &str) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove(key);
            map.values_mut().for_each(|x| strip_key(x, key));
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(|x| strip_key(x, key)),
        _ => {}
    }
}

pub struct ExperimentOutcome {
    pub summary: ExperimentSummary,
    pub best_preprocessor: PreprocessorModel,
    pub last_preprocessor: PreprocessorModel,
    pub approximator: ApproximatorModel,
    pub history: CerHistory,
}

/// Where the training stage writes its artifacts.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutputLayout { root: root.into() }
    }
    pub fn epochs(&self) -> PathBuf {
        self.root.join("epochs.jsonl")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn ledger(&self) -> PathBuf {
        self.root.join("ledger.csv")
    }
    pub fn history(&self) -> PathBuf {
        self.root.join("cer_history.csv")
    }
    pub fn best_preprocessor(&self) -> PathBuf {
        self.root.join("checkpoints").join("preprocessor_best.json")
    }
    pub fn last_preprocessor(&self) -> PathBuf {
        self.root.join("checkpoints").join("preprocessor_last.json")
    }
    pub fn last_approximator(&self) -> PathBuf {
        self.root.join("checkpoints").join("approximator_last.json")
    }
}

fn write_json_line<T: Serialize>(out: &mut impl Write, value: &T, path: &Path) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::parse("report", e.to_string()))?;
    writeln!(out, "{line}").and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

/// The epoch loop, checkpoint selection and test evaluation.
pub fn train_stage(
    cfg: &TrainConfig,
    dataset: &Dataset,
    service: &OcrService,
    alphabet: &Alphabet,
    pretrained: &Pretrained,
    out: Option<&OutputLayout>,
) -> Result<ExperimentOutcome> {
    let result = train_stage_inner(cfg, dataset, service, alphabet, pretrained, out);
    if let Some(out) = out {
        // the ledger is flushed even when the run aborts
        service.ledger().export_csv(&out.ledger())?;
    }
    result
}

fn train_stage_inner(
    cfg: &TrainConfig,
    dataset: &Dataset,
    service: &OcrService,
    alphabet: &Alphabet,
    pretrained: &Pretrained,
    out: Option<&OutputLayout>,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let train_before = service.ledger().count(Phase::Train);
    let eval_before = service.ledger().count(Phase::Eval);
    let strips = kept_strips(dataset, &pretrained.kept_documents());
    if strips.is_empty() {
        return Err(Error::InvalidState("no training strips left after pruning".into()));
    }
    let validation = dataset.split(Split::Validation);
    let test = dataset.split(Split::Test);
    let samples = strips.iter().map(|s| (s.sample_id.as_str(), s.text.as_str()));
    let history = initialize_history(samples, &pretrained.prepass)?;
    let (g, _) = initial_models(cfg, strip_height(dataset)?, alphabet)?;
    let mut state = TrainingState::new(cfg, g, pretrained.approximator.clone(), history);

    let mut epoch_log = match out {
        Some(o) => {
            let dir = o.root.join("checkpoints");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = o.epochs();
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };

    let mut reports = Vec::new();
    let mut best: Option<(f64, u32, PreprocessorModel)> = None;
    for epoch in 1..=cfg.train.epochs {
        let mut report = train_epoch(&mut state, &strips, service, cfg, alphabet, epoch)?;
        let val = validate(
            &state.g,
            &state.f,
            &validation,
            service,
            alphabet,
            cfg.data.validation_subsample,
            cfg.train.seed,
            epoch,
        )?;
        report.validation_word_accuracy = val.word_accuracy;
        report.approximation_accuracy = val.approximation_accuracy;
        report.validation_mean_intensity = val.mean_intensity;
        report.wall_time_seconds = started.elapsed().as_secs_f64() - reports.iter().map(|r: &EpochReport| r.wall_time_seconds).sum::<f64>();
        log::info!(
            "epoch {epoch}: val acc {:.4} approx acc {:.4} queries {} loss_g {:.4} loss_f {:.4}",
            report.validation_word_accuracy,
            report.approximation_accuracy,
            report.queries_this_epoch,
            report.train_loss_g,
            report.train_loss_f
        );
        if let Some((w, path)) = epoch_log.as_mut() {
            write_json_line(w, &report, path)?;
        }
        if best.as_ref().map_or(true, |(acc, _, _)| val.word_accuracy > *acc) {
            best = Some((val.word_accuracy, epoch, state.g.clone()));
            if let Some(o) = out {
                Checkpoint::preprocessor(&state.g, Some(&state.opt_g), epoch, None).save(&o.best_preprocessor())?;
            }
        }
        if let Some(o) = out {
            Checkpoint::preprocessor(&state.g, Some(&state.opt_g), epoch, None).save(&o.last_preprocessor())?;
            Checkpoint::approximator(&state.f, Some(&state.opt_f), epoch, None).save(&o.last_approximator())?;
        }
        reports.push(report);
    }

    let (best_acc, best_epoch, best_g) = match best {
        Some(b) => b,
        None => {
            if let Some(o) = out {
                Checkpoint::preprocessor(&state.g, None, 0, None).save(&o.best_preprocessor())?;
            }
            (0.0, 0, state.g.clone())
        }
    };

    let batch_sizes = (0..strips.len()).step_by(cfg.train.batch_size).map(|i| (strips.len() - i).min(cfg.train.batch_size));
    let ceiling = epoch_query_ceiling(&cfg.budget_policy(), batch_sizes)? * cfg.train.epochs as usize;
    let train_queries = service.ledger().count(Phase::Train) - train_before;
    let reported: usize = reports.iter().map(|r| r.queries_this_epoch).sum();
    if train_queries != ceiling || reported != ceiling {
        return Err(Error::InvalidState(format!(
            "budget accounting mismatch: ledger {train_queries}, epoch reports {reported}, ceiling {ceiling}"
        )));
    }

    let final_epoch = cfg.train.epochs + 1;
    let tested = evaluate(&best_g, Some(&state.f), &test, service, alphabet, final_epoch)?;
    let raw = evaluate_raw(&test, service, final_epoch)?;

    let summary = ExperimentSummary {
        config: cfg.clone(),
        epochs_run: cfg.train.epochs,
        best_epoch,
        best_validation_word_accuracy: best_acc,
        test_word_accuracy: tested.word_accuracy,
        test_raw_word_accuracy: raw,
        test_approximation_accuracy: tested.approximation_accuracy,
        test_mean_intensity: tested.mean_intensity,
        train_queries,
        budget_ceiling: ceiling,
        eval_queries: service.ledger().count(Phase::Eval) - eval_before,
        total_train_strips: dataset.split(Split::Train).len(),
        kept_train_strips: strips.len(),
        pruned_documents: pretrained.pruning.removed.len(),
        epochs: reports,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(o) = out {
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::parse("summary", e.to_string()))?;
        let path = o.summary();
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        state.history.export_csv(&o.history())?;
    }
    Ok(ExperimentOutcome {
        summary,
        best_preprocessor: best_g,
        last_preprocessor: state.g,
        approximator: state.f,
        history: state.history,
    })
}

/// OCR word accuracy on unprocessed strips.
pub fn evaluate_raw(strips: &[&TextStrip], service: &OcrService, epoch: u32) -> Result<f64> {
    let requests: Vec<(&Image, QueryContext)> = strips
        .iter()
        .map(|s| (&s.image, QueryContext::new(Phase::Eval, s.sample_id.clone(), epoch)))
        .collect();
    let answers: Vec<String> = service.query_batch(&requests, false).into_iter().collect::<Result<_>>()?;
    let truths: Vec<&str> = strips.iter().map(|s| s.text.as_str()).collect();
    word_accuracy(&answers, &truths)
}

/// Pretraining followed by the training stage, in memory.
pub fn run_experiment(cfg: &TrainConfig, dataset: &Dataset, out: Option<&OutputLayout>) -> Result<ExperimentOutcome> {
    let service = build_service(&cfg.backend)?;
    let alphabet = Alphabet::builtin();
    let pretrained = pretrain_stage(cfg, dataset, &service, &alphabet)?;
    train_stage(cfg, dataset, &service, &alphabet, &pretrained, out)
}
