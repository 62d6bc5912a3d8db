//! End-to-end stages shared by the command line: dataset synthesis, label
//! generation, training, evaluation, the pilot study and the ablation lattice.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{augment, object_record, synth_scene, DatasetDir, Frame, GtDatabase, KittiRecord, SynthScene};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_text, Difficulty, EvalConfig, EvalFrame, EvalReport};
use crate::geometry::ScoredBox;
use crate::grid::BevGrid;
use crate::labels::{make_shape_label, BankEntry, LabelOptions, LabelReport, ShapeBank, ShapeHeatmap};
use crate::model::{module_rng, Fusion, HeatmapSource, Model, Sample};
use crate::nn::Forward;
use crate::pillars::pillarize;
use crate::tensor::{cosine_lr, save_checkpoint, Adam, Graph, ParamStore};

const STREAM_BATCHES: u64 = 7;
const STREAM_AUGMENT: u64 = 8;

/// Objects with fewer points are not added to a bank built from observed data.
pub const MIN_BANK_POINTS: usize = 5;

pub const LOSS_HEADER: &str = "step,lr,total,rpn_cls,rpn_reg,shape,rcnn,grad_norm";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

/// Writes the resolved configuration next to a run's outputs.
pub fn write_resolved_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub frames: usize,
    pub objects: usize,
    pub points: usize,
    pub bank_entries: usize,
}

/// Generates `cfg.data.frames` scenes into the KITTI layout under `dir`, plus the
/// shape bank of full-surface samplings from the training frames.
pub fn synthesize(cfg: &RunConfig, dir: &Path) -> Result<SynthSummary> {
    let grid = cfg.grid.build()?;
    let ds = DatasetDir::new(dir);
    ds.create()?;
    let scenes: Vec<SynthScene> = (0..cfg.data.frames as u64)
        .into_par_iter()
        .map(|id| synth_scene(&cfg.data.synth, &grid, id))
        .collect::<Result<_>>()?;
    let mut bank = ShapeBank::new();
    let mut summary = SynthSummary {
        frames: scenes.len(),
        objects: 0,
        points: 0,
        bank_entries: 0,
    };
    for s in &scenes {
        ds.save_frame(&s.frame)?;
        summary.objects += s.frame.objects.len();
        summary.points += s.frame.points.len();
        if (s.frame.id as usize) < cfg.data.train_frames {
            for e in &s.bank {
                bank.push(e.clone())?;
            }
        }
    }
    summary.bank_entries = bank.len();
    bank.save(&ds.bank())?;
    write_resolved_config(cfg, dir)?;
    Ok(summary)
}

/// Bank from the observed points of labeled training objects, for data without
/// a synthetic bank.
pub fn bank_from_frames(frames: &[Frame]) -> Result<ShapeBank> {
    let mut bank = ShapeBank::new();
    for f in frames {
        let xyz = f.xyz();
        for o in f.objects.iter().filter(|o| !o.ignore) {
            let inside: Vec<[f64; 3]> = xyz.iter().copied().filter(|&p| o.bbox.contains_point(p)).collect();
            if inside.len() >= MIN_BANK_POINTS {
                bank.push(BankEntry::from_world(&inside, &o.bbox, o.class_id, f.id))?;
            }
        }
    }
    Ok(bank)
}

/// Frames of one dataset split with their shape labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: BevGrid,
    pub frames: Vec<Frame>,
    pub labels: Vec<ShapeHeatmap>,
    /// Options `labels` were rendered with.
    pub options: LabelOptions,
    pub bank: ShapeBank,
    pub report: LabelReport,
}

pub fn label_options(cfg: &RunConfig) -> LabelOptions {
    LabelOptions {
        k: cfg.model.classes(),
        top_k: cfg.labels.top_k,
        gaussian: cfg.model.gaussian,
    }
}

fn shape_label(frame: &Frame, bank: &ShapeBank, grid: &BevGrid, opts: &LabelOptions) -> (ShapeHeatmap, LabelReport) {
    make_shape_label(&frame.xyz(), &frame.labeled(), bank, grid, Some(frame.id), opts)
}

/// Loads every frame under `dir` and splits at `train_frames`. Labels are
/// rendered with the configured options; the bank file is used when present.
pub fn load_split(cfg: &RunConfig, dir: &Path) -> Result<(Dataset, Dataset)> {
    let grid = cfg.grid.build()?;
    let ds = DatasetDir::new(dir);
    let ids = ds.frame_ids()?;
    let frames: Vec<Frame> = ids.par_iter().map(|&id| ds.load_frame(id)).collect::<Result<_>>()?;
    let n_train = cfg.data.train_frames.min(frames.len());
    let (train, val) = frames.split_at(n_train);
    let bank = if ds.bank().exists() {
        ShapeBank::load(&ds.bank())?
    } else {
        bank_from_frames(train)?
    };
    Ok((
        labeled_dataset(cfg, &grid, train, &bank),
        labeled_dataset(cfg, &grid, val, &bank),
    ))
}

/// The synthetic split without touching the disk; matches what `synthesize`
/// followed by `load_split` produces up to scan quantization.
pub fn synth_split(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let grid = cfg.grid.build()?;
    let scenes: Vec<SynthScene> = (0..cfg.data.frames as u64)
        .into_par_iter()
        .map(|id| synth_scene(&cfg.data.synth, &grid, id))
        .collect::<Result<_>>()?;
    let mut bank = ShapeBank::new();
    for s in scenes.iter().take(cfg.data.train_frames) {
        for e in &s.bank {
            bank.push(e.clone())?;
        }
    }
    let frames: Vec<Frame> = scenes.into_iter().map(|s| s.frame).collect();
    let (train, val) = frames.split_at(cfg.data.train_frames.min(frames.len()));
    Ok((
        labeled_dataset(cfg, &grid, train, &bank),
        labeled_dataset(cfg, &grid, val, &bank),
    ))
}

fn labeled_dataset(cfg: &RunConfig, grid: &BevGrid, frames: &[Frame], bank: &ShapeBank) -> Dataset {
    let opts = label_options(cfg);
    let out: Vec<(ShapeHeatmap, LabelReport)> = frames.par_iter().map(|f| shape_label(f, bank, grid, &opts)).collect();
    let mut report = LabelReport::default();
    for (_, r) in &out {
        report.short_retrievals += r.short_retrievals;
        report.empty_objects += r.empty_objects;
    }
    Dataset {
        grid: *grid,
        frames: frames.to_vec(),
        labels: out.into_iter().map(|(l, _)| l).collect(),
        options: opts,
        bank: bank.clone(),
        report,
    }
}

/// Writes `shape/NNNNNN.bsh` for every frame and a per-frame report CSV.
pub fn labelgen(cfg: &RunConfig, dir: &Path) -> Result<LabelReport> {
    let (train, val) = load_split(cfg, dir)?;
    let ds = DatasetDir::new(dir);
    create_dir(&dir.join("shape"))?;
    let mut csv = String::from("frame,objects,nonzero_cells\n");
    for d in [&train, &val] {
        for (f, l) in d.frames.iter().zip(&d.labels) {
            l.save(&ds.shape(f.id))?;
            let _ = writeln!(csv, "{},{},{}", f.id, f.labeled().len(), l.count_nonzero());
        }
    }
    write_text(&dir.join("shape").join("labels.csv"), &csv)?;
    Ok(LabelReport {
        short_retrievals: train.report.short_retrievals + val.report.short_retrievals,
        empty_objects: train.report.empty_objects + val.report.empty_objects,
    })
}

fn to_sample(cfg: &RunConfig, grid: &BevGrid, frame: &Frame, label: Option<ShapeHeatmap>) -> Sample {
    Sample {
        pillars: pillarize(&frame.points, grid, cfg.model.max_points_per_pillar),
        objects: frame.labeled(),
        label,
    }
}

fn needs_label(cfg: &RunConfig) -> bool {
    cfg.model.heatmap != HeatmapSource::None
}

/// Model-ready samples of a dataset, labels attached when the model uses them.
/// Labels are re-rendered when the run's label options differ from the dataset's.
pub fn samples(cfg: &RunConfig, data: &Dataset) -> Vec<Sample> {
    let opts = label_options(cfg);
    data.frames
        .par_iter()
        .zip(&data.labels)
        .map(|(f, l)| {
            let label = needs_label(cfg).then(|| {
                if opts == data.options {
                    l.clone()
                } else {
                    shape_label(f, &data.bank, &data.grid, &opts).0
                }
            });
            to_sample(cfg, &data.grid, f, label)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub shape: Option<f64>,
    pub rcnn: Option<f64>,
    pub grad_norm: f64,
}

impl LossRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        format!(
            "{},{:e},{:e},{:e},{:e},{},{},{:e}",
            self.step,
            self.lr,
            self.total,
            self.rpn_cls,
            self.rpn_reg,
            opt(self.shape),
            opt(self.rcnn),
            self.grad_norm
        )
    }
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from(LOSS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
    pub losses: Vec<LossRow>,
}

/// Builds the model with the run seed and initial weights.
pub fn build_model(cfg: &RunConfig) -> Result<(Model, ParamStore)> {
    let grid = cfg.grid.build()?;
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &cfg.model, &grid, cfg.seed)?;
    Ok((model, store))
}

/// Adam on shuffled mini-batches with a cosine schedule. Each epoch reshuffles
/// the training frames from the batch stream of the run seed.
pub fn train(cfg: &RunConfig, data: &Dataset, mut on_step: impl FnMut(&LossRow)) -> Result<Trained> {
    let (model, mut store) = build_model(cfg)?;
    if data.frames.is_empty() {
        return Err(Error::InvalidInput("no training frames".into()));
    }
    let base = samples(cfg, data);
    let db = (cfg.data.augment && cfg.data.augmentation.gt_samples > 0).then(|| GtDatabase::from_frames(&data.frames));
    let opts = label_options(cfg);
    let mut batch_rng = module_rng(cfg.seed, STREAM_BATCHES);
    let mut aug_rng: ChaCha8Rng = module_rng(cfg.seed, STREAM_AUGMENT);
    let adam = Adam::default();
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let mut batch_idx = Vec::with_capacity(cfg.train.batch_size);
        while batch_idx.len() < cfg.train.batch_size.min(data.frames.len()) {
            if order.is_empty() {
                order = (0..data.frames.len()).collect();
                order.shuffle(&mut batch_rng);
                order.reverse();
            }
            batch_idx.push(order.pop().expect("refilled above"));
        }
        let augmented: Vec<Sample> = if cfg.data.augment {
            batch_idx
                .iter()
                .map(|&i| {
                    let f = augment(&data.frames[i], db.as_ref(), &cfg.data.augmentation, &mut aug_rng);
                    let label = needs_label(cfg).then(|| shape_label(&f, &data.bank, &data.grid, &opts).0);
                    to_sample(cfg, &data.grid, &f, label)
                })
                .collect()
        } else {
            Vec::new()
        };
        let batch: Vec<&Sample> = if cfg.data.augment {
            augmented.iter().collect()
        } else {
            batch_idx.iter().map(|&i| &base[i]).collect()
        };
        let lr = cosine_lr(cfg.train.lr, cfg.train.lr_floor, step, cfg.train.steps);
        let (row, bn) = {
            let mut g = Graph::new();
            let mut f = Forward::new(&store, true);
            let out = model.forward(&mut g, &mut f, &batch)?;
            let terms = model.loss(&mut g, &f, &out, &batch)?;
            let bn = f.take_bn_update();
            let total = g.value(terms.total).data()[0];
            if !total.is_finite() {
                return Err(Error::Numeric(format!("loss is {total} at step {step}")));
            }
            let scalar = |v| g.value(v).data()[0];
            let row = LossRow {
                step,
                lr,
                total,
                rpn_cls: scalar(terms.rpn.cls),
                rpn_reg: scalar(terms.rpn.reg),
                shape: terms.shape.map(scalar),
                rcnn: terms.rcnn.map(|r| scalar(r.total)),
                grad_norm: 0.0,
            };
            let grads = g.backward(terms.total)?;
            store.zero_grad();
            grads.accumulate_into(&mut store);
            (row, bn)
        };
        bn.apply(&mut store);
        let norm = if cfg.train.grad_clip > 0.0 {
            store.clip_grad_norm(cfg.train.grad_clip)
        } else {
            store.grad_norm()
        };
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {norm} at step {step}")));
        }
        adam.step(&mut store, lr);
        let row = LossRow { grad_norm: norm, ..row };
        on_step(&row);
        losses.push(row);
    }
    Ok(Trained { model, store, losses })
}

/// Final detections for every frame, one frame per graph, in inference mode.
pub fn predict(model: &Model, store: &ParamStore, samples: &[Sample]) -> Result<Vec<Vec<ScoredBox>>> {
    samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let mut f = Forward::new(store, false);
            let out = model.forward(&mut g, &mut f, &[s])?;
            Ok(model.predict(&mut g, &f, &out)?.remove(0))
        })
        .collect()
}

pub fn eval_frames(cfg: &RunConfig, frames: &[Frame], dets: &[Vec<ScoredBox>]) -> Vec<EvalFrame> {
    frames
        .iter()
        .zip(dets)
        .map(|(f, d)| EvalFrame {
            dets: d.clone(),
            gts: f.objects.iter().map(|o| o.to_eval(cfg.data.difficulty)).collect(),
        })
        .collect()
}

/// Car AP at every difficulty.
pub fn evaluate_car(cfg: &RunConfig, frames: &[EvalFrame]) -> Result<Vec<EvalReport>> {
    Difficulty::ALL
        .iter()
        .map(|&d| {
            let e = EvalConfig {
                class_id: 0,
                iou_threshold: cfg.eval.iou_threshold,
                metric: cfg.eval.metric,
                difficulty: d,
            };
            evaluate(frames, &e)
        })
        .collect()
}

pub fn moderate(reports: &[EvalReport]) -> f64 {
    reports
        .iter()
        .find(|r| r.cfg.difficulty == Difficulty::Moderate)
        .map_or(f64::NAN, |r| r.ap.ap)
}

/// `ap.csv`, `ap.txt`, PR curves, recall-interval tables and KITTI result files.
pub fn write_eval_outputs(dir: &Path, reports: &[EvalReport], frames: &[Frame], dets: &[Vec<ScoredBox>]) -> Result<()> {
    create_dir(dir)?;
    let mut csv = String::from(crate::eval::TABLE_HEADER);
    csv.push('\n');
    let mut txt = String::new();
    for r in reports {
        csv.push_str(&crate::eval::table_row("Car", r));
        csv.push('\n');
        let _ = writeln!(
            txt,
            "Car {:<9} AP_R40 {:7.3}  (gt {}, det {})",
            r.cfg.difficulty.name(),
            r.ap.ap,
            r.ap.num_gt,
            r.ap.num_det
        );
        let name = r.cfg.difficulty.name();
        write_text(
            &dir.join(format!("pr_car_{name}.dat")),
            &crate::eval::pr_curve_data(&r.ap),
        )?;
        write_text(
            &dir.join(format!("intervals_car_{name}.csv")),
            &crate::eval::intervals_csv(r),
        )?;
    }
    write_text(&dir.join("ap.csv"), &csv)?;
    write_text(&dir.join("ap.txt"), &txt)?;
    let results = dir.join("results");
    create_dir(&results)?;
    for (f, d) in frames.iter().zip(dets) {
        let lines: Vec<KittiRecord> = d
            .iter()
            .map(|b| KittiRecord::from_box(crate::data::class_name(b.class_id), &b.bbox, &f.calib, Some(b.score)))
            .collect();
        crate::data::kitti::write_records(&results.join(format!("{:06}.txt", f.id)), &lines)?;
    }
    Ok(())
}

/// Detections that copy the ground truth, scored 1.
pub fn oracle_detections(frames: &[Frame]) -> Vec<Vec<ScoredBox>> {
    frames
        .iter()
        .map(|f| {
            f.labeled()
                .into_iter()
                .map(|(c, b)| ScoredBox {
                    bbox: b,
                    score: 1.0,
                    class_id: c,
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trained: Trained,
    pub reports: Vec<EvalReport>,
}

/// Trains on `train`, evaluates on `val`, and writes everything under `out`.
pub fn train_and_eval(cfg: &RunConfig, train_set: &Dataset, val: &Dataset, out: Option<&Path>) -> Result<RunOutcome> {
    let trained = train(cfg, train_set, |_| {})?;
    let val_samples = samples(cfg, val);
    let dets = predict(&trained.model, &trained.store, &val_samples)?;
    let frames = eval_frames(cfg, &val.frames, &dets);
    let reports = evaluate_car(cfg, &frames)?;
    if let Some(dir) = out {
        write_resolved_config(cfg, dir)?;
        write_text(&dir.join("loss.csv"), &loss_csv(&trained.losses))?;
        save_checkpoint(&dir.join("model.bshc"), &trained.store)?;
        write_eval_outputs(&dir.join("eval"), &reports, &val.frames, &dets)?;
    }
    Ok(RunOutcome { trained, reports })
}

/// The pilot pair: detector with the ground-truth heatmap as a side input versus
/// the same detector without it.
pub fn pilot_configs(base: &RunConfig) -> (RunConfig, RunConfig) {
    let mut with = base.clone();
    with.model.heatmap = HeatmapSource::Gt;
    with.model.fusion = Fusion::Concat;
    with.model.two_stage = false;
    let mut without = with.clone();
    without.model.heatmap = HeatmapSource::None;
    without.model.fusion = Fusion::None;
    (with, without)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PilotRow {
    pub seed: u64,
    pub ap_with: f64,
    pub ap_without: f64,
}

impl PilotRow {
    pub fn delta(&self) -> f64 {
        self.ap_with - self.ap_without
    }
}

pub fn pilot(
    base: &RunConfig,
    seeds: &[u64],
    train_set: &Dataset,
    val: &Dataset,
    out: Option<&Path>,
) -> Result<Vec<PilotRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let (with, without) = pilot_configs(&base.clone().with_seed(seed));
        let sub = |name: &str| out.map(|d| d.join(format!("seed{seed}")).join(name));
        let a = train_and_eval(&with, train_set, val, sub("gt_concat").as_deref())?;
        let b = train_and_eval(&without, train_set, val, sub("none").as_deref())?;
        rows.push(PilotRow {
            seed,
            ap_with: moderate(&a.reports),
            ap_without: moderate(&b.reports),
        });
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let mut csv = String::from("seed,ap_moderate_gt_concat,ap_moderate_none,delta\n");
        let mut txt = String::new();
        for r in &rows {
            let _ = writeln!(csv, "{},{:.4},{:.4},{:.4}", r.seed, r.ap_with, r.ap_without, r.delta());
            let _ = writeln!(
                txt,
                "seed {:>3}: with GT heatmap {:7.3}  without {:7.3}  delta {:+7.3}",
                r.seed,
                r.ap_with,
                r.ap_without,
                r.delta()
            );
        }
        write_text(&dir.join("pilot.csv"), &csv)?;
        write_text(&dir.join("pilot.txt"), &txt)?;
    }
    Ok(rows)
}

/// Rows (a)–(e): detector only; + shape completion with side-input fusion;
/// attention fusion instead; Gaussian labels; two-stage refinement.
pub fn ablation_configs(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let mut a = base.clone();
    a.model.heatmap = HeatmapSource::None;
    a.model.fusion = Fusion::None;
    a.model.gaussian = false;
    a.model.two_stage = false;
    let mut b = a.clone();
    b.model.heatmap = HeatmapSource::Psc;
    b.model.fusion = Fusion::Concat;
    let mut c = b.clone();
    c.model.fusion = Fusion::Adf;
    let mut d = c.clone();
    d.model.gaussian = true;
    let mut e = d.clone();
    e.model.two_stage = true;
    vec![("a", a), ("b", b), ("c", c), ("d", d), ("e", e)]
}

/// Output directory of a named sub-run.
pub fn run_dir(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}

pub fn object_records(frame: &Frame) -> Vec<KittiRecord> {
    frame.objects.iter().map(|o| object_record(o, &frame.calib)).collect()
}
