//! The distillation pipeline, stage by stage.
//!
//! `gen_data` → `train_teacher` → `train_matcher` → `build_galleries_stage`
//! (static matching) → `train_student` (re-matching and alignment losses) →
//! `evaluate_*` / `diagnose_ot`. Each stage writes its artifacts under the
//! configured output directory and can also be driven directly from Rust.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::{self, pseudo_rgb_batch, Dataset, Labels, Split};
use crate::error::{Error, Result};
use crate::losses::{self, KdInputs, VanillaKd, DistillationLoss};
use crate::matching::{
    build_galleries, dynm_match, random_match, refresh_epochs, ssm_match, GalleryPair, MatchOrigin, MatchStore,
};
use crate::metrics::{
    classification_scores, fmt_f64, line_chart_png, multilabel_scores, predictions, write_csv, CsvRow, Evaluation,
};
use crate::nets::{Bridge, Classifier, Inference, Matcher, Modality};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transport::{self, wasserstein_uniform};

pub const TEACHER_DIR: &str = "teacher";
pub const MATCHER_DIR: &str = "matcher";
pub const GALLERIES_DIR: &str = "galleries";
pub const INITIAL_MATCH_DIR: &str = "match_init";
pub const STUDENT_DIR: &str = "student";
pub const BRIDGE_DIR: &str = "bridge";
pub const MATCH_DIR: &str = "match";
pub const LAST_GOOD_DIR: &str = "last_good";

pub const TEACHER_CSV: &str = "teacher_metrics.csv";
pub const MATCHER_CSV: &str = "matcher_metrics.csv";
pub const STUDENT_CSV: &str = "metrics.csv";
pub const OT_CSV: &str = "ot.csv";
pub const MI_CSV: &str = "mi.csv";
pub const DIAGNOSE_CSV: &str = "diagnose_ot.csv";
pub const STUDENT_CONFIG_FILE: &str = "student_config.json";

const SEED_TEACHER: u64 = 1;
const SEED_MATCHER: u64 = 2;
const SEED_STUDENT: u64 = 3;
const SEED_BRIDGE: u64 = 4;
const SHUFFLE_TEACHER: u64 = 10;
const SHUFFLE_MATCHER: u64 = 11;
const SHUFFLE_STUDENT: u64 = 12;
const RANDOM_PAIRING: u64 = 13;
const DIAGNOSTICS: u64 = 14;
const MI_SAMPLING: u64 = 15;

fn sub_seed(seed: u64, stream: u64) -> u64 {
    Rng::derive(seed, stream).next_u64()
}

fn epoch_order(ids: &[usize], seed: u64, stream: u64, epoch: usize) -> Vec<usize> {
    let mut order = ids.to_vec();
    Rng::derive(sub_seed(seed, stream), epoch as u64).shuffle(&mut order);
    order
}

/// Consecutive chunks of `size`; a trailing chunk of one sample is dropped
/// because the batch statistics need at least two.
fn minibatches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size).filter(|c| c.len() >= 2)
}

fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.optimizer.lr,
        ..AdamConfig::default()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Generate the dataset described by `cfg.data`, store it at `cfg.dataset`,
/// and write the class MI table next to it.
pub fn gen_data(cfg: &RunConfig) -> Result<Dataset> {
    let ds = data::generate(&cfg.data, cfg.seed)?;
    data::store(&ds, &cfg.dataset)?;
    let d = &cfg.diagnostics;
    let seed = sub_seed(cfg.seed, MI_SAMPLING);
    let report = data::class_mi_report(&ds, d.mi_pairs, seed, d.mi_channels)?;
    let base = data::shuffled_label_mi(&ds, d.mi_pairs, seed, d.mi_channels)?;
    let rows: Vec<MiRow> = report
        .iter()
        .zip(&base)
        .map(|(r, b)| MiRow {
            class: r.class,
            mean_mi: r.mean_mi,
            shuffled_mi: b.mean_mi,
            pairs: r.pairs,
        })
        .collect();
    write_csv(&cfg.dataset.join(MI_CSV), &rows)?;
    info!(
        "dataset: {} MS, {} RGB images in {}",
        ds.manifest.ms.count,
        ds.manifest.rgb.count,
        cfg.dataset.display()
    );
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiRow {
    pub class: usize,
    pub mean_mi: f64,
    pub shuffled_mi: f64,
    pub pairs: usize,
}

impl CsvRow for MiRow {
    fn header() -> &'static [&'static str] {
        &["class", "mean_mi", "shuffled_mi", "pairs"]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.class.to_string(),
            fmt_f64(self.mean_mi),
            fmt_f64(self.shuffled_mi),
            self.pairs.to_string(),
        ]
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.require_dataset()?;
    data::load(&cfg.dataset)
}

/// Scores of a classifier on MS samples, single- or multi-label.
pub fn score_ms(model: &Classifier, ds: &Dataset, ids: &[usize]) -> Result<Evaluation> {
    if ids.is_empty() {
        return Err(Error::Parameter("cannot score an empty split".into()));
    }
    let logits = model.infer(&ds.ms.select_rows(ids))?.logits;
    match ds.ms_labels.select(ids) {
        Labels::Single(t) => classification_scores(&predictions(&logits)?, &t, ds.classes()),
        Labels::Multi(t) => multilabel_scores(&logits, &t),
    }
}

/// Scores of a classifier on RGB samples.
pub fn score_rgb(model: &Classifier, ds: &Dataset, ids: &[usize]) -> Result<Evaluation> {
    if ids.is_empty() {
        return Err(Error::Parameter("cannot score an empty split".into()));
    }
    let logits = model.infer(&ds.rgb.select_rows(ids))?.logits;
    let truth: Vec<usize> = ids.iter().map(|&i| ds.rgb_labels[i]).collect();
    classification_scores(&predictions(&logits)?, &truth, ds.classes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_oa: f64,
    pub val_oa: f64,
    pub val_f1: f64,
}

impl CsvRow for TeacherRow {
    fn header() -> &'static [&'static str] {
        &["epoch", "loss", "train_oa", "val_oa", "val_f1"]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            fmt_f64(self.loss),
            fmt_f64(self.train_oa),
            fmt_f64(self.val_oa),
            fmt_f64(self.val_f1),
        ]
    }
}

pub struct TeacherRun {
    pub model: Classifier,
    pub rows: Vec<TeacherRow>,
}

fn numeric_abort(what: &str, epoch: usize, msg: String, save: impl FnOnce() -> Result<()>) -> Error {
    match save() {
        Ok(()) => warn!("{what}: non-finite values at epoch {epoch}; last good weights saved"),
        Err(e) => warn!("{what}: saving last good weights failed: {e}"),
    }
    Error::Numeric(format!("{what}, epoch {epoch}: {msg}"))
}

/// Cross-entropy (single-label) or BCE (multi-label) training on the MS
/// train split. Writes `teacher/` and `teacher_metrics.csv`.
pub fn train_teacher(cfg: &RunConfig, ds: &Dataset) -> Result<TeacherRun> {
    let seed = cfg.seed;
    let mut model = Classifier::new(&cfg.teacher_config(ds.spec()), sub_seed(seed, SEED_TEACHER))?;
    let splits = &ds.manifest.ms.splits;
    let adam = adam_config(cfg);
    let mut state = AdamState::new(model.params.tensors());
    let mut rows = Vec::new();
    create_dir(&cfg.out_dir)?;
    for epoch in 1..=cfg.optimizer.teacher_epochs {
        let start = Instant::now();
        let order = epoch_order(&splits.train, seed, SHUFFLE_TEACHER, epoch);
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in minibatches(&order, cfg.optimizer.batch_size) {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let x = g.constant(ds.ms.select_rows(batch));
            let (_, logits) = model.forward(&mut g, &p, x)?;
            let loss = match ds.ms_labels.select(batch) {
                Labels::Single(t) => losses::cross_entropy(&mut g, logits, &t)?,
                Labels::Multi(t) => losses::binary_cross_entropy(&mut g, logits, &t)?,
            };
            let lv = g.value(loss).item();
            let abort_dir = cfg.out_dir.join(LAST_GOOD_DIR).join(TEACHER_DIR);
            if !lv.is_finite() {
                return Err(numeric_abort("teacher", epoch, format!("loss {lv}"), || {
                    model.save(&abort_dir, seed, epoch - 1)
                }));
            }
            g.backward(loss)?;
            let grads = p.grads(&g);
            if let Err(e) = adam_step(model.params.tensors_mut(), &grads, &mut state, &adam) {
                return Err(numeric_abort("teacher", epoch, e.to_string(), || {
                    model.save(&abort_dir, seed, epoch - 1)
                }));
            }
            total += lv * batch.len() as f64;
            seen += batch.len();
        }
        let train = score_ms(&model, ds, &splits.train)?;
        let val = if splits.val.is_empty() { None } else { Some(score_ms(&model, ds, &splits.val)?) };
        let row = TeacherRow {
            epoch,
            loss: total / seen.max(1) as f64,
            train_oa: train.oa,
            val_oa: val.as_ref().map_or(f64::NAN, |v| v.oa),
            val_f1: val.as_ref().map_or(f64::NAN, |v| v.macro_f1),
        };
        info!(
            "teacher epoch {epoch}: loss {:.4} train OA {:.3} val OA {:.3} ({:.2?})",
            row.loss,
            row.train_oa,
            row.val_oa,
            start.elapsed()
        );
        rows.push(row);
    }
    model.save(&cfg.out_dir.join(TEACHER_DIR), seed, cfg.optimizer.teacher_epochs)?;
    write_csv(&cfg.out_dir.join(TEACHER_CSV), &rows)?;
    if cfg.plots {
        plot_columns(&cfg.out_dir.join("teacher_metrics.png"), &rows, &["loss", "train_oa", "val_oa"])?;
    }
    Ok(TeacherRun { model, rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherRow {
    pub epoch: usize,
    pub loss: f64,
    pub logit_scale: f64,
    /// Mean cosine of positive (image, own pseudo-RGB) pairs on the
    /// validation split.
    pub pos_cos: f64,
    /// Mean cosine of all other pairs on the validation split.
    pub neg_cos: f64,
}

impl CsvRow for MatcherRow {
    fn header() -> &'static [&'static str] {
        &["epoch", "loss", "logit_scale", "pos_cos", "neg_cos"]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            fmt_f64(self.loss),
            fmt_f64(self.logit_scale),
            fmt_f64(self.pos_cos),
            fmt_f64(self.neg_cos),
        ]
    }
}

pub struct MatcherRun {
    pub model: Matcher,
    pub rows: Vec<MatcherRow>,
}

/// Symmetric InfoNCE of one batch of MS images against their own
/// pseudo-RGB slices, without recording gradients.
pub fn matcher_loss(m: &Matcher, ms: &Tensor, band_indices: [usize; 3]) -> Result<f64> {
    let pseudo = pseudo_rgb_batch(ms, band_indices)?;
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, false);
    let v = g.constant(ms.clone());
    let gt = g.constant(pseudo);
    let ev = m.embed(&mut g, &p, Modality::Ms, v)?;
    let eg = m.embed(&mut g, &p, Modality::Rgb, gt)?;
    let scale = m.logit_scale(&mut g, &p);
    let loss = losses::infonce_symmetric(&mut g, ev, eg, scale)?;
    Ok(g.value(loss).item())
}

/// Mean positive and negative cosine between MS embeddings and pseudo-RGB
/// embeddings of the same images.
pub fn matcher_alignment(m: &Matcher, ms: &Tensor, band_indices: [usize; 3]) -> Result<(f64, f64)> {
    let ev = m.infer(Modality::Ms, ms)?;
    let eg = m.infer(Modality::Rgb, &pseudo_rgb_batch(ms, band_indices)?)?;
    let sim = ev.matmul(&eg.transpose()?)?;
    let n = sim.shape()[0];
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                pos += sim.row(i)[j];
            } else {
                neg += sim.row(i)[j];
            }
        }
    }
    let negs = (n * n - n).max(1) as f64;
    Ok((pos / n as f64, neg / negs))
}

/// Self-supervised matcher training on MS images only: each image and its
/// own R, G, B band slice form the positive pair.
pub fn train_matcher(cfg: &RunConfig, ds: &Dataset) -> Result<MatcherRun> {
    let seed = cfg.seed;
    let bands = ds.spec().rgb_band_indices;
    let mut model = Matcher::new(&cfg.matcher_config(ds.spec()), sub_seed(seed, SEED_MATCHER))?;
    let splits = &ds.manifest.ms.splits;
    if splits.train.len() < 2 || cfg.optimizer.batch_size < 2 {
        return Err(Error::Parameter("matcher training needs batches of at least two images".into()));
    }
    let probe = if splits.val.len() >= 2 { &splits.val } else { &splits.train };
    let probe_images = ds.ms.select_rows(probe);
    let adam = adam_config(cfg);
    let mut state = AdamState::new(model.params.tensors());
    let mut rows = Vec::new();
    create_dir(&cfg.out_dir)?;
    for epoch in 1..=cfg.optimizer.matcher_epochs {
        let start = Instant::now();
        let order = epoch_order(&splits.train, seed, SHUFFLE_MATCHER, epoch);
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in minibatches(&order, cfg.optimizer.batch_size) {
            let v_img = ds.ms.select_rows(batch);
            let g_img = pseudo_rgb_batch(&v_img, bands)?;
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let v = g.constant(v_img);
            let gt = g.constant(g_img);
            let ev = model.embed(&mut g, &p, Modality::Ms, v)?;
            let eg = model.embed(&mut g, &p, Modality::Rgb, gt)?;
            let scale = model.logit_scale(&mut g, &p);
            let loss = losses::infonce_symmetric(&mut g, ev, eg, scale)?;
            let lv = g.value(loss).item();
            let abort_dir = cfg.out_dir.join(LAST_GOOD_DIR).join(MATCHER_DIR);
            if !lv.is_finite() {
                return Err(numeric_abort("matcher", epoch, format!("loss {lv}"), || {
                    model.save(&abort_dir, seed, epoch - 1)
                }));
            }
            g.backward(loss)?;
            let grads = p.grads(&g);
            if let Err(e) = adam_step(model.params.tensors_mut(), &grads, &mut state, &adam) {
                return Err(numeric_abort("matcher", epoch, e.to_string(), || {
                    model.save(&abort_dir, seed, epoch - 1)
                }));
            }
            model.clamp_logit_scale(cfg.matcher.max_logit_scale);
            total += lv * batch.len() as f64;
            seen += batch.len();
        }
        let (pos_cos, neg_cos) = matcher_alignment(&model, &probe_images, bands)?;
        let row = MatcherRow {
            epoch,
            loss: total / seen as f64,
            logit_scale: model.logit_scale_value(),
            pos_cos,
            neg_cos,
        };
        info!(
            "matcher epoch {epoch}: loss {:.4} cos+ {:.3} cos- {:.3} ({:.2?})",
            row.loss,
            row.pos_cos,
            row.neg_cos,
            start.elapsed()
        );
        rows.push(row);
    }
    model.save(&cfg.out_dir.join(MATCHER_DIR), seed, cfg.optimizer.matcher_epochs)?;
    write_csv(&cfg.out_dir.join(MATCHER_CSV), &rows)?;
    Ok(MatcherRun { model, rows })
}

/// Build both galleries from the MS train split and the static (embedding
/// similarity) match of every RGB train sample. Writes `galleries/` and
/// `match_init/`.
pub fn build_galleries_stage(
    cfg: &RunConfig,
    ds: &Dataset,
    teacher: &Classifier,
    matcher: &Matcher,
) -> Result<(GalleryPair, MatchStore)> {
    let ids = &ds.manifest.ms.splits.train;
    let membership = ds.ms_labels.select(ids).membership();
    let galleries = build_galleries(teacher, matcher, &ds.ms.select_rows(ids), &membership, ids)?;
    let students = &ds.manifest.rgb.splits.train;
    let labels: Vec<usize> = students.iter().map(|&i| ds.rgb_labels[i]).collect();
    let emb = matcher.infer(Modality::Rgb, &ds.rgb.select_rows(students))?;
    let store = ssm_match(&galleries, &emb, &labels, 0)?;
    galleries.save(&cfg.out_dir.join(GALLERIES_DIR))?;
    store.save(&cfg.out_dir.join(INITIAL_MATCH_DIR))?;
    info!("galleries: class sizes {:?}", galleries.sizes());
    Ok((galleries, store))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentRow {
    pub epoch: usize,
    pub l_task: f64,
    pub l_kd: Option<f64>,
    pub l_ot1: Option<f64>,
    pub l_ot2: Option<f64>,
    pub l_all: f64,
    pub val_oa: f64,
    pub val_f1: f64,
    /// Logit-space transport cost under the current pairing.
    pub w_matched: Option<f64>,
    /// Logit-space transport cost under a random within-class pairing.
    pub w_random: Option<f64>,
    pub match_origin: MatchOrigin,
    pub match_epoch: usize,
}

fn origin_name(o: MatchOrigin) -> &'static str {
    match o {
        MatchOrigin::Ssm => "ssm",
        MatchOrigin::Dynm => "dynm",
        MatchOrigin::Random => "random",
    }
}

impl CsvRow for StudentRow {
    fn header() -> &'static [&'static str] {
        &[
            "epoch",
            "l_task",
            "l_kd",
            "l_ot1",
            "l_ot2",
            "l_all",
            "val_oa",
            "val_f1",
            "w_matched",
            "w_random",
            "match_origin",
            "match_epoch",
        ]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            fmt_f64(self.l_task),
            opt_cell(self.l_kd),
            opt_cell(self.l_ot1),
            opt_cell(self.l_ot2),
            fmt_f64(self.l_all),
            fmt_f64(self.val_oa),
            fmt_f64(self.val_f1),
            opt_cell(self.w_matched),
            opt_cell(self.w_random),
            origin_name(self.match_origin).to_string(),
            self.match_epoch.to_string(),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Logits,
    Features,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    Matched,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtRow {
    pub epoch: usize,
    pub space: Space,
    pub pairing: Pairing,
    pub w_eps: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Mean entropy of the plan's normalized rows.
    pub row_entropy: f64,
}

impl CsvRow for OtRow {
    fn header() -> &'static [&'static str] {
        &["epoch", "space", "pairing", "w_eps", "epsilon", "iterations", "converged", "row_entropy"]
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            match self.space {
                Space::Logits => "logits",
                Space::Features => "features",
            }
            .to_string(),
            match self.pairing {
                Pairing::Matched => "matched",
                Pairing::Random => "random",
            }
            .to_string(),
            fmt_f64(self.w_eps),
            fmt_f64(self.epsilon),
            self.iterations.to_string(),
            self.converged.to_string(),
            fmt_f64(self.row_entropy),
        ]
    }
}

/// Teacher outputs for every MS image, computed once; the teacher is frozen
/// for the whole student run.
pub struct TeacherCache {
    pub out: Inference,
}

impl TeacherCache {
    pub fn new(teacher: &Classifier, ds: &Dataset) -> Result<Self> {
        Ok(TeacherCache {
            out: teacher.infer(&ds.ms)?,
        })
    }

    fn logits(&self, ids: &[usize]) -> Tensor {
        self.out.logits.select_rows(ids)
    }

    fn pooled(&self, ids: &[usize]) -> Tensor {
        self.out.pooled.select_rows(ids)
    }

    fn patches(&self, ids: &[usize]) -> Tensor {
        self.out.z.select_rows(ids)
    }
}

/// Student pooled features mapped into teacher channels.
fn projected_pooled(bridge: &Bridge, pooled: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = bridge.params.bind(&mut g, false);
    let x = g.constant(pooled.clone());
    let y = bridge.projector.project_pooled(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

/// Fixed subset of student positions used for per-epoch transport costs.
fn diagnostic_subset(n: usize, batch: usize, seed: u64) -> Vec<usize> {
    let mut idx = Rng::derive(sub_seed(seed, DIAGNOSTICS), 0).permutation(n);
    idx.truncate(batch.min(n));
    idx.sort_unstable();
    idx
}

struct TransportProbe<'a> {
    cfg: &'a RunConfig,
    ds: &'a Dataset,
    cache: &'a TeacherCache,
    galleries: &'a GalleryPair,
    /// Dataset indices of the RGB train samples, in match-store order.
    students: &'a [usize],
    subset: Vec<usize>,
}

impl TransportProbe<'_> {
    /// Entropic transport cost between the student outputs on the subset and
    /// the outputs of (a) their paired teachers and (b) random same-class
    /// teachers, in logit and pooled-feature space.
    fn run(&self, epoch: usize, student: &Classifier, bridge: &Bridge, store: &MatchStore) -> Result<Vec<OtRow>> {
        let rgb_ids: Vec<usize> = self.subset.iter().map(|&k| self.students[k]).collect();
        let out = student.infer(&self.ds.rgb.select_rows(&rgb_ids))?;
        let s_feat = projected_pooled(bridge, &out.pooled)?;
        let matched: Vec<usize> = self.subset.iter().map(|&k| store.teacher_sample(self.galleries, k)).collect();
        let labels: Vec<usize> = self.subset.iter().map(|&k| store.classes[k]).collect();
        let mut rng = Rng::derive(sub_seed(self.cfg.seed, DIAGNOSTICS), 1 + epoch as u64);
        let random = random_match(self.galleries, &labels, &mut rng, epoch)?;
        let random: Vec<usize> = random.teacher_samples(self.galleries);
        let mut rows = Vec::with_capacity(4);
        for (space, student_side) in [(Space::Logits, &out.logits), (Space::Features, &s_feat)] {
            for (pairing, ids) in [(Pairing::Matched, &matched), (Pairing::Random, &random)] {
                let teacher_side = match space {
                    Space::Logits => self.cache.logits(ids),
                    Space::Features => self.cache.pooled(ids),
                };
                let r = wasserstein_uniform(student_side, &teacher_side, &self.cfg.diagnostics.sinkhorn)?;
                let ent = r.plan.row_entropies();
                rows.push(OtRow {
                    epoch,
                    space,
                    pairing,
                    w_eps: r.cost,
                    epsilon: r.plan.epsilon,
                    iterations: r.iterations,
                    converged: r.converged,
                    row_entropy: ent.iter().sum::<f64>() / ent.len() as f64,
                });
            }
        }
        Ok(rows)
    }
}

fn logit_costs(rows: &[OtRow]) -> (Option<f64>, Option<f64>) {
    let find = |p: Pairing| {
        rows.iter()
            .find(|r| r.space == Space::Logits && r.pairing == p)
            .map(|r| r.w_eps)
    };
    (find(Pairing::Matched), find(Pairing::Random))
}

pub struct StudentRun {
    pub student: Classifier,
    pub bridge: Bridge,
    pub matches: MatchStore,
    pub rows: Vec<StudentRow>,
    pub ot_rows: Vec<OtRow>,
    /// Epochs at which the pairing was rebuilt from predictions.
    pub refreshes: Vec<usize>,
}

#[derive(Default)]
struct EpochSums {
    n: f64,
    task: f64,
    kd: f64,
    ot1: f64,
    ot2: f64,
    all: f64,
}

/// Student training on the matched pairs. `ssm` is the static match from
/// [`build_galleries_stage`]; it is required unless the ablation replaces it
/// with a random pairing. Writes `student/`, `bridge/`, `match/`,
/// `metrics.csv` and `ot.csv`.
pub fn train_student(
    cfg: &RunConfig,
    ds: &Dataset,
    teacher: &Classifier,
    galleries: &GalleryPair,
    ssm: Option<&MatchStore>,
) -> Result<StudentRun> {
    let seed = cfg.seed;
    let ab = &cfg.ablation;
    let weights = cfg.loss;
    let students = ds.manifest.rgb.splits.train.clone();
    let val = ds.manifest.rgb.splits.val.clone();
    let labels: Vec<usize> = students.iter().map(|&i| ds.rgb_labels[i]).collect();
    if galleries.num_classes() != ds.classes() {
        return Err(Error::Contract(format!(
            "galleries hold {} classes, dataset has {}",
            galleries.num_classes(),
            ds.classes()
        )));
    }
    for c in labels.iter().copied().collect::<BTreeSet<_>>() {
        galleries.class(c)?;
    }

    let mut store = if ab.ssm {
        let s = ssm.ok_or_else(|| Error::Missing {
            what: "static match store",
            path: cfg.out_dir.join(INITIAL_MATCH_DIR),
        })?;
        if s.classes != labels {
            return Err(Error::Contract("static match store does not cover the RGB train split".into()));
        }
        s.clone()
    } else {
        random_match(galleries, &labels, &mut Rng::derive(sub_seed(seed, RANDOM_PAIRING), 0), 0)?
    };
    store.validate(galleries)?;

    let teacher_hash = teacher.params.fingerprint();
    let cache = TeacherCache::new(teacher, ds)?;
    let mut student = Classifier::new(&cfg.student_config(ds.spec()), sub_seed(seed, SEED_STUDENT))?;
    let mut bridge = Bridge::new(&cfg.bridge_config(), sub_seed(seed, SEED_BRIDGE))?;
    let adam = adam_config(cfg);
    let mut s_state = AdamState::new(student.params.tensors());
    let mut b_state = AdamState::new(bridge.params.tensors());
    let kd_loss = VanillaKd {
        temperature: weights.kd_temperature,
    };
    let use_ot = weights.lambda2() > 0.0 && (ab.ot1 || ab.ot2);
    let schedule: BTreeSet<usize> = if ab.dynm { refresh_epochs(&cfg.schedule).into_iter().collect() } else { BTreeSet::new() };
    let probe = cfg.diagnostics.enabled.then(|| TransportProbe {
        cfg,
        ds,
        cache: &cache,
        galleries,
        students: &students,
        subset: diagnostic_subset(students.len(), cfg.diagnostics.batch, seed),
    });
    let out = &cfg.out_dir;
    create_dir(out)?;
    let config_path = out.join(STUDENT_CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_json()).map_err(|e| Error::Io {
        path: config_path,
        source: e,
    })?;
    let save_last_good = |student: &Classifier, bridge: &Bridge, epoch: usize| -> Result<()> {
        let dir = out.join(LAST_GOOD_DIR);
        student.save(&dir.join(STUDENT_DIR), seed, epoch)?;
        bridge.save(&dir.join(BRIDGE_DIR), seed, epoch)
    };

    let mut rows = Vec::new();
    let mut ot_rows = Vec::new();
    let mut refreshes = Vec::new();
    info!("student run: {}", ab.label());
    for epoch in 1..=cfg.optimizer.epochs {
        let start = Instant::now();
        if schedule.contains(&epoch) {
            let logits = student.infer(&ds.rgb.select_rows(&students))?.logits;
            store = dynm_match(galleries, &logits, &labels, weights.match_temperature, ab.dynm_rule, epoch)?;
            refreshes.push(epoch);
            info!("epoch {epoch}: pairing rebuilt from predictions");
        }
        let order = epoch_order(&(0..students.len()).collect::<Vec<_>>(), seed, SHUFFLE_STUDENT, epoch);
        let mut sums = EpochSums::default();
        for batch in minibatches(&order, cfg.optimizer.batch_size) {
            let rgb_ids: Vec<usize> = batch.iter().map(|&k| students[k]).collect();
            let t_ids: Vec<usize> = batch.iter().map(|&k| store.teacher_sample(galleries, k)).collect();
            let y: Vec<usize> = batch.iter().map(|&k| labels[k]).collect();

            let mut g = Graph::new();
            let sp = student.params.bind(&mut g, true);
            let bp = bridge.params.bind(&mut g, true);
            let x = g.constant(ds.rgb.select_rows(&rgb_ids));
            let (f_s, logits_s) = student.forward(&mut g, &sp, x)?;
            let task = losses::cross_entropy(&mut g, logits_s, &y)?;

            let (kd, ot1, ot2) = if ab.kd || use_ot {
                let t_logits = g.constant(cache.logits(&t_ids));
                let z_t_val = cache.patches(&t_ids);
                let z_t = g.constant(z_t_val.clone());
                let kd = if ab.kd {
                    let inputs = KdInputs {
                        teacher_logits: t_logits,
                        student_logits: logits_s,
                        teacher_features: z_t,
                        student_features: f_s.z,
                    };
                    Some(kd_loss.loss(&mut g, &inputs)?)
                } else {
                    None
                };
                let (ot1, ot2) = if use_ot {
                    let a_t = bridge.planner.attention(&mut g, &bp, z_t, Modality::Ms)?;
                    let a_s = bridge.planner.attention(&mut g, &bp, f_s.z, Modality::Rgb)?;
                    let eps_t: Vec<f64> = (0..batch.len())
                        .map(|i| transport::scale_factor(&z_t_val.select_rows(&[i])))
                        .collect();
                    let z_s_val = g.value(f_s.z).clone();
                    let eps_s: Vec<f64> = (0..batch.len())
                        .map(|i| transport::scale_factor(&z_s_val.select_rows(&[i])))
                        .collect();
                    let (w_t, w_s) = transport::cross_modal_plans_graph(&mut g, a_t, a_s, &eps_t, &eps_s)?;
                    let d_t = transport::apply_plan_graph(&mut g, z_t, w_t)?;
                    let z_s_proj = bridge.projector.project(&mut g, &bp, f_s.z)?;
                    let d_s = transport::apply_plan_graph(&mut g, z_s_proj, w_s)?;
                    let zbar_t = g.constant(cache.pooled(&t_ids));
                    let zbar_s = bridge.projector.project_pooled(&mut g, &bp, f_s.pooled)?;
                    let (l1, l2) = losses::ot_alignment_losses(&mut g, d_t, d_s, zbar_t, zbar_s, cfg.coral_norm)?;
                    (ab.ot1.then_some(l1), ab.ot2.then_some(l2))
                } else {
                    (None, None)
                };
                (kd, ot1, ot2)
            } else {
                (None, None, None)
            };
            let total = losses::total_loss(&mut g, task, kd, ot1, ot2, &weights)?;
            let value = |v: Option<crate::autodiff::Var>| v.map(|v| g.value(v).item());
            let (lt, lk, l1, l2, la) = (g.value(task).item(), value(kd), value(ot1), value(ot2), g.value(total).item());
            if !la.is_finite() {
                write_student_csvs(cfg, &rows, &ot_rows)?;
                return Err(numeric_abort("student", epoch, format!("total loss {la}"), || {
                    save_last_good(&student, &bridge, epoch - 1)
                }));
            }
            g.backward(total)?;
            let s_grads = sp.grads(&g);
            let b_grads = bp.grads(&g);
            let stepped = adam_step(student.params.tensors_mut(), &s_grads, &mut s_state, &adam)
                .and_then(|_| adam_step(bridge.params.tensors_mut(), &b_grads, &mut b_state, &adam));
            if let Err(e) = stepped {
                write_student_csvs(cfg, &rows, &ot_rows)?;
                return Err(numeric_abort("student", epoch, e.to_string(), || {
                    save_last_good(&student, &bridge, epoch - 1)
                }));
            }
            let n = batch.len() as f64;
            sums.n += n;
            sums.task += n * lt;
            sums.kd += n * lk.unwrap_or(0.0);
            sums.ot1 += n * l1.unwrap_or(0.0);
            sums.ot2 += n * l2.unwrap_or(0.0);
            sums.all += n * la;
        }

        let eval = if val.is_empty() { None } else { Some(score_rgb(&student, ds, &val)?) };
        let diag = match &probe {
            Some(p) => p.run(epoch, &student, &bridge, &store)?,
            None => Vec::new(),
        };
        let (w_matched, w_random) = logit_costs(&diag);
        ot_rows.extend(diag);
        let mean = |s: f64| s / sums.n.max(1.0);
        let row = StudentRow {
            epoch,
            l_task: mean(sums.task),
            l_kd: ab.kd.then(|| mean(sums.kd)),
            l_ot1: (use_ot && ab.ot1).then(|| mean(sums.ot1)),
            l_ot2: (use_ot && ab.ot2).then(|| mean(sums.ot2)),
            l_all: mean(sums.all),
            val_oa: eval.as_ref().map_or(f64::NAN, |e| e.oa),
            val_f1: eval.as_ref().map_or(f64::NAN, |e| e.macro_f1),
            w_matched,
            w_random,
            match_origin: store.origin,
            match_epoch: store.epoch_created,
        };
        info!(
            "student epoch {epoch}: L_all {:.4} val OA {:.3} ({:.2?})",
            row.l_all,
            row.val_oa,
            start.elapsed()
        );
        rows.push(row);
    }

    if teacher.params.fingerprint() != teacher_hash {
        return Err(Error::Contract("teacher parameters changed during student training".into()));
    }
    let epochs = cfg.optimizer.epochs;
    student.save(&out.join(STUDENT_DIR), seed, epochs)?;
    bridge.save(&out.join(BRIDGE_DIR), seed, epochs)?;
    store.save(&out.join(MATCH_DIR))?;
    write_student_csvs(cfg, &rows, &ot_rows)?;
    if cfg.plots {
        plot_columns(
            &out.join("metrics.png"),
            &rows,
            &["l_task", "l_kd", "l_ot1", "l_ot2", "l_all", "val_oa", "val_f1", "w_matched", "w_random"],
        )?;
    }
    Ok(StudentRun {
        student,
        bridge,
        matches: store,
        rows,
        ot_rows,
        refreshes,
    })
}

fn write_student_csvs(cfg: &RunConfig, rows: &[StudentRow], ot_rows: &[OtRow]) -> Result<()> {
    write_csv(&cfg.out_dir.join(STUDENT_CSV), rows)?;
    write_csv(&cfg.out_dir.join(OT_CSV), ot_rows)
}

fn plot_columns<R: CsvRow>(path: &Path, rows: &[R], columns: &[&str]) -> Result<()> {
    let table = crate::metrics::Table::from_rows(rows);
    let series: Vec<(&str, Vec<f64>)> = columns
        .iter()
        .filter_map(|&c| table.column(c).map(|v| (c, v)))
        .collect();
    line_chart_png(path, &series)
}

/// OA, macro-F1 and the per-class table of a student checkpoint on one RGB
/// split.
pub fn evaluate_student(student: &Classifier, ds: &Dataset, split: Split) -> Result<Evaluation> {
    let ids = ds.manifest.rgb.splits.get(split);
    if ids.is_empty() {
        return Err(Error::Parameter(format!("{split:?} split is empty")));
    }
    score_rgb(student, ds, ids)
}

/// The same for a teacher checkpoint on an MS split.
pub fn evaluate_teacher(teacher: &Classifier, ds: &Dataset, split: Split) -> Result<Evaluation> {
    let ids = ds.manifest.ms.splits.get(split);
    if ids.is_empty() {
        return Err(Error::Parameter(format!("{split:?} split is empty")));
    }
    score_ms(teacher, ds, ids)
}

/// Transport costs of the current checkpoints on demand, for the pairing in
/// `store` and for a random within-class pairing.
#[allow(clippy::too_many_arguments)]
pub fn diagnose_ot(
    cfg: &RunConfig,
    ds: &Dataset,
    teacher: &Classifier,
    student: &Classifier,
    bridge: &Bridge,
    galleries: &GalleryPair,
    store: &MatchStore,
    epoch: usize,
) -> Result<Vec<OtRow>> {
    let students = &ds.manifest.rgb.splits.train;
    if store.len() != students.len() {
        return Err(Error::Contract("match store does not cover the RGB train split".into()));
    }
    store.validate(galleries)?;
    let cache = TeacherCache::new(teacher, ds)?;
    let probe = TransportProbe {
        cfg,
        ds,
        cache: &cache,
        galleries,
        students,
        subset: diagnostic_subset(students.len(), cfg.diagnostics.batch, cfg.seed),
    };
    let rows = probe.run(epoch, student, bridge, store)?;
    write_csv(&cfg.out_dir.join(DIAGNOSE_CSV), &rows)?;
    Ok(rows)
}

pub fn stage_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

pub fn load_teacher(cfg: &RunConfig) -> Result<Classifier> {
    Classifier::load(&stage_dir(cfg, TEACHER_DIR))
}

pub fn load_student(cfg: &RunConfig) -> Result<Classifier> {
    Classifier::load(&stage_dir(cfg, STUDENT_DIR))
}

pub fn load_matcher(cfg: &RunConfig) -> Result<Matcher> {
    Matcher::load(&stage_dir(cfg, MATCHER_DIR))
}

pub fn load_galleries(cfg: &RunConfig) -> Result<GalleryPair> {
    GalleryPair::load(&stage_dir(cfg, GALLERIES_DIR))
}

pub fn load_initial_match(cfg: &RunConfig) -> Result<MatchStore> {
    MatchStore::load(&stage_dir(cfg, INITIAL_MATCH_DIR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;
    use crate::data::SyntheticSpec;

    fn tiny_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig {
            dataset: dir.join("data"),
            out_dir: dir.join("out"),
            data: SyntheticSpec {
                classes: 3,
                ms_per_class: 12,
                rgb_per_class: 12,
                image_size: 16,
                ..SyntheticSpec::default()
            },
            ..RunConfig::default()
        };
        cfg.optimizer.batch_size = 8;
        cfg.optimizer.epochs = 4;
        cfg.optimizer.teacher_epochs = 2;
        cfg.optimizer.matcher_epochs = 2;
        cfg.teacher = crate::config::Widths::Custom(vec![4, 6, 8]);
        cfg.student = crate::config::Widths::Custom(vec![4, 4, 6]);
        cfg.matcher.widths = crate::config::Widths::Custom(vec![4, 4, 4]);
        cfg.matcher.embed_dim = 8;
        cfg.planner.d_model = 8;
        cfg.planner.heads = 2;
        cfg.schedule.e0 = 0;
        cfg.schedule.delta_e = 2;
        cfg.schedule.e_mu = 1;
        cfg.diagnostics.batch = 8;
        cfg.diagnostics.mi_pairs = 10;
        cfg
    }

    #[test]
    fn stages_run_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let ds = gen_data(&cfg).unwrap();
        let t = train_teacher(&cfg, &ds).unwrap();
        let m = train_matcher(&cfg, &ds).unwrap();
        let (gal, init) = build_galleries_stage(&cfg, &ds, &t.model, &m.model).unwrap();
        assert_eq!(init.origin, MatchOrigin::Ssm);
        let run = train_student(&cfg, &ds, &t.model, &gal, Some(&init)).unwrap();
        assert_eq!(run.refreshes, vec![2]);
        assert_eq!(run.rows.len(), 4);
        assert_eq!(run.ot_rows.len(), 16);
        for r in &run.rows {
            assert!((0.0..=1.0).contains(&r.val_oa) && (0.0..=1.0).contains(&r.val_f1));
            let expected = if r.epoch >= 2 { (MatchOrigin::Dynm, 2) } else { (MatchOrigin::Ssm, 0) };
            assert_eq!((r.match_origin, r.match_epoch), expected);
            assert!(r.l_ot1.is_some() && r.l_ot2.is_some() && r.l_kd.is_some());
        }
        for f in [STUDENT_CSV, OT_CSV, TEACHER_CSV, MATCHER_CSV] {
            assert!(cfg.out_dir.join(f).is_file(), "{f}");
        }
        let e = evaluate_student(&run.student, &ds, Split::Test).unwrap();
        assert!((0.0..=1.0).contains(&e.oa));
        let rows = diagnose_ot(&cfg, &ds, &t.model, &run.student, &run.bridge, &gal, &run.matches, 4).unwrap();
        assert_eq!(rows.len(), 4);
    }

    #[test]
    fn lambda1_one_skips_alignment_terms() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.loss.lambda1 = 1.0;
        cfg.optimizer.epochs = 1;
        cfg.diagnostics.enabled = false;
        let ds = data::generate(&cfg.data, 0).unwrap();
        let t = train_teacher(&cfg, &ds).unwrap();
        let m = train_matcher(&cfg, &ds).unwrap();
        let (gal, init) = build_galleries_stage(&cfg, &ds, &t.model, &m.model).unwrap();
        let before = Bridge::new(&cfg.bridge_config(), sub_seed(cfg.seed, SEED_BRIDGE)).unwrap();
        let run = train_student(&cfg, &ds, &t.model, &gal, Some(&init)).unwrap();
        assert!(run.rows[0].l_ot1.is_none() && run.rows[0].l_ot2.is_none());
        assert_eq!(run.bridge.params.fingerprint(), before.params.fingerprint());
    }

    #[test]
    fn zero_lr_leaves_teacher_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.optimizer.lr = 0.0;
        cfg.optimizer.teacher_epochs = 1;
        let ds = data::generate(&cfg.data, 0).unwrap();
        let fresh = Classifier::new(&cfg.teacher_config(ds.spec()), sub_seed(cfg.seed, SEED_TEACHER)).unwrap();
        let t = train_teacher(&cfg, &ds).unwrap();
        assert_eq!(t.model.params.fingerprint(), fresh.params.fingerprint());
    }

    #[test]
    fn random_pairing_needs_no_static_match() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.ablation = Ablation::vanilla_random();
        cfg.optimizer.epochs = 3;
        let ds = data::generate(&cfg.data, 0).unwrap();
        let t = train_teacher(&cfg, &ds).unwrap();
        let m = train_matcher(&cfg, &ds).unwrap();
        let (gal, _) = build_galleries_stage(&cfg, &ds, &t.model, &m.model).unwrap();
        let run = train_student(&cfg, &ds, &t.model, &gal, None).unwrap();
        assert!(run.refreshes.is_empty());
        assert!(run.rows.iter().all(|r| r.match_origin == MatchOrigin::Random));
        assert!(run.rows.iter().all(|r| r.l_ot1.is_none() && r.l_kd.is_some()));
    }

    #[test]
    fn missing_gallery_class_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let ds = data::generate(&cfg.data, 0).unwrap();
        let t = train_teacher(&cfg, &ds).unwrap();
        let m = train_matcher(&cfg, &ds).unwrap();
        let (mut gal, init) = build_galleries_stage(&cfg, &ds, &t.model, &m.model).unwrap();
        gal.classes.pop();
        assert!(train_student(&cfg, &ds, &t.model, &gal, Some(&init)).is_err());
    }
}
