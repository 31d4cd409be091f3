//! The optimization loop, the ablation runner and the finite-difference
//! gradient check.
//!
//! One run is a pure function of `(config, dataset)`: seeded parameter
//! initialization, seeded epoch shuffles, and every batch doing forward,
//! weighted total loss, backward, SGD step. Metrics stream to
//! `metrics.jsonl` (one epoch per line, no timestamps, bit-stable), the
//! final report to `report.json`, checkpoints to `ckpt_last.bin` and
//! `ckpt_best.bin`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::caption::HashEncoder;
use crate::config::RunConfig;
use crate::data::{make_batches, rng_for, Batch, Dataset};
use crate::error::{Error, Result};
use crate::eval::{diagnostics, evaluate, EvalConfig, EvalReport};
use crate::losses::{
    alignment_loss, alignment_loss_symmetric, assign_targets, detection_loss, disentangle_mean,
    similarity_matrix, total_loss, LossBundle, LossValues, COSINE_EPS,
};
use crate::model::{HeadSource, Level, Model, ModelConfig, TrainForward};
use crate::tensor::{ParamKind, Tape};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            seed: 42,
            eval_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be >= 2".to_string()));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1".to_string()));
        }
        if self.lr <= 0.0 {
            return Err(Error::config(format!("lr {} must be positive", self.lr)));
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_det: f64,
    pub l_al: f64,
    pub l_ds: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
    pub final_report: EvalReport,
    /// Disentanglement / retrieval diagnostics before the first step.
    pub init_obj_nobj_cosine: f64,
    pub init_retrieval_top1: f64,
    pub best_ap50: f64,
    /// Canonical config snapshot; replaying it reproduces the run.
    pub config: String,
    pub wall_time_s: f64,
}

/// Build the loss bundle for one batch's forward output.
pub fn batch_losses(
    tape: &mut Tape,
    model_cfg: &ModelConfig,
    fwd: &TrainForward,
    batch: &Batch,
) -> Result<LossBundle> {
    let targets = assign_targets(&batch.boxes, model_cfg.image_size, model_cfg.num_classes);
    let l_det = detection_loss(tape, &fwd.pred, &targets)?;
    let s = similarity_matrix(tape, &fwd.obj_embed, &fwd.text_embed, COSINE_EPS)?;
    let l_al = if model_cfg.symmetric_al {
        alignment_loss_symmetric(tape, &s, model_cfg.tau)?
    } else {
        alignment_loss(tape, &s, model_cfg.tau)?
    };
    let l_ds = disentangle_mean(tape, &fwd.decomposed, COSINE_EPS, model_cfg.abs_ds);
    Ok(total_loss(tape, l_det, l_al, l_ds, model_cfg.alpha, model_cfg.beta))
}

/// Train a model on `train_ds`, evaluating on `eval_ds`. `run_dir`, when
/// given, receives metrics.jsonl, report.json and checkpoints.
pub fn train(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    run_dir: Option<&Path>,
    config_snapshot: &str,
) -> Result<(RunRecord, Model)> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::config("training dataset is empty".to_string()));
    }
    let started = std::time::Instant::now();
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let encoder = HashEncoder::new(cfg.model.l)?;
    let eval_cfg = EvalConfig { batch_size: cfg.batch_size, ..EvalConfig::default() };

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        std::fs::write(dir.join("config.toml"), config_snapshot)
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
    }

    let (init_cos, init_top1) = diagnostics(&model, eval_ds, &eval_cfg, &encoder)?;

    let mut rows: Vec<EpochRow> = Vec::with_capacity(cfg.epochs);
    let mut metrics_file = match run_dir {
        Some(dir) => Some(
            std::fs::File::create(dir.join("metrics.jsonl"))
                .map_err(|e| Error::io(dir.display().to_string(), e))?,
        ),
        None => None,
    };
    let mut best_ap50 = f64::NEG_INFINITY;

    for epoch in 0..cfg.epochs {
        let batches = make_batches(train_ds, cfg.batch_size, cfg.seed, epoch as u64, true, &encoder)?;
        if batches.is_empty() {
            return Err(Error::config(format!(
                "dataset of {} images yields no full batches of {}",
                train_ds.len(),
                cfg.batch_size
            )));
        }
        let mut sums = LossValues { l_det: 0.0, l_al: 0.0, l_ds: 0.0, total: 0.0 };
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let fwd = model.forward_train(&mut tape, &batch.images, batch.batch_size(), &batch.captions)?;
            let bundle = batch_losses(&mut tape, &cfg.model, &fwd, batch)?;
            let v = bundle.values(&tape);
            if !v.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            tape.backward(&bundle.total)?;
            tape.accumulate_param_grads(&mut model.params);
            model.params.sgd_step(cfg.lr, cfg.momentum);
            model.params.zero_grad();
            sums.l_det += v.l_det;
            sums.l_al += v.l_al;
            sums.l_ds += v.l_ds;
            sums.total += v.total;
        }
        let n = batches.len() as f64;
        let mut row = EpochRow {
            epoch,
            l_det: sums.l_det / n,
            l_al: sums.l_al / n,
            l_ds: sums.l_ds / n,
            total: sums.total / n,
            ap50: None,
            map: None,
        };
        let is_last = epoch + 1 == cfg.epochs;
        let periodic = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if periodic && !is_last {
            let report = evaluate(&model, eval_ds, &eval_cfg, &encoder)?;
            row.ap50 = Some(report.ap50);
            row.map = Some(report.map);
            if report.ap50 > best_ap50 {
                best_ap50 = report.ap50;
                if let Some(dir) = run_dir {
                    model.save(&dir.join("ckpt_best.bin"))?;
                }
            }
        }
        if let Some(f) = metrics_file.as_mut() {
            let line = serde_json::to_string(&row).expect("row serializes");
            writeln!(f, "{}", line).map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        rows.push(row);
    }

    let final_report = evaluate(&model, eval_ds, &eval_cfg, &encoder)?;
    if let Some(last) = rows.last_mut() {
        last.ap50 = Some(final_report.ap50);
        last.map = Some(final_report.map);
    }
    if final_report.ap50 > best_ap50 {
        best_ap50 = final_report.ap50;
        if let Some(dir) = run_dir {
            model.save(&dir.join("ckpt_best.bin"))?;
        }
    }
    if let Some(dir) = run_dir {
        model.save(&dir.join("ckpt_last.bin"))?;
    }

    let record = RunRecord {
        rows,
        final_report,
        init_obj_nobj_cosine: init_cos,
        init_retrieval_top1: init_top1,
        best_ap50,
        config: config_snapshot.to_string(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = run_dir {
        let json = serde_json::to_string_pretty(&record).expect("record serializes");
        std::fs::write(dir.join("report.json"), json)
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    Ok((record, model))
}

// ── ablations ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seeds: Vec<u64>,
    pub ap50: Vec<f64>,
    pub map: Vec<f64>,
    pub ap50_mean: f64,
    pub ap50_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
    pub final_obj_nobj_cosine: Vec<f64>,
    pub init_obj_nobj_cosine: Vec<f64>,
    pub retrieval_top1: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub set: String,
    pub arms: Vec<ArmResult>,
}

impl AblationTable {
    /// Aligned plain-text rendering.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>6} {:>18} {:>18} {:>10} {:>10}\n",
            "arm", "seeds", "ap50 (mean±std)", "map (mean±std)", "cos", "top1"
        ));
        for a in &self.arms {
            let cos = mean(&a.final_obj_nobj_cosine);
            let top1 = mean(&a.retrieval_top1);
            out.push_str(&format!(
                "{:<16} {:>6} {:>8.4} ± {:>6.4} {:>9.4} ± {:>6.4} {:>10.4} {:>10.4}\n",
                a.arm,
                a.seeds.len(),
                a.ap50_mean,
                a.ap50_std,
                a.map_mean,
                a.map_std,
                cos,
                top1
            ));
        }
        out
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Arm names for one ablation set, or an error listing the valid sets.
pub fn arm_configs(base: &RunConfig, set: &str) -> Result<Vec<(String, RunConfig)>> {
    let mut arms = Vec::new();
    let mut push = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        arms.push((name.to_string(), cfg));
    };
    match set {
        "table3" => {
            push("base", &|c| {
                c.loss.alpha = 0.0;
                c.loss.beta = 0.0;
            });
            push("sfa", &|c| c.loss.beta = 0.0);
            push("ofd", &|c| c.loss.alpha = 0.0);
            push("full", &|_| {});
        }
        "table4" => {
            push("obj", &|c| c.model.head_source = HeadSource::Obj);
            push("nobj", &|c| c.model.head_source = HeadSource::Nobj);
            push("concat", &|c| c.model.head_source = HeadSource::Concat);
        }
        "table5" => {
            let subsets: [(&str, &[Level]); 8] = [
                ("none", &[]),
                ("p3", &[Level::P3]),
                ("p4", &[Level::P4]),
                ("p5", &[Level::P5]),
                ("p3p4", &[Level::P3, Level::P4]),
                ("p3p5", &[Level::P3, Level::P5]),
                ("p4p5", &[Level::P4, Level::P5]),
                ("p3p4p5", &[Level::P3, Level::P4, Level::P5]),
            ];
            for (name, levels) in subsets {
                push(name, &|c| c.model.decompose_levels = levels.to_vec());
            }
        }
        "alphabeta" => {
            for &a in &[0.5, 1.0, 1.5] {
                for &b in &[0.5, 1.0, 1.5] {
                    let name = format!("a{}_b{}", a, b);
                    let mut cfg = base.clone();
                    cfg.loss.alpha = a;
                    cfg.loss.beta = b;
                    arms.push((name, cfg));
                }
            }
        }
        "ratio" => {
            for &r in &[0.25, 0.5, 0.75] {
                let name = format!("r{}", r);
                let mut cfg = base.clone();
                cfg.model.ratio = r;
                arms.push((name, cfg));
            }
        }
        other => {
            return Err(Error::config(format!(
                "unknown ablation set '{}'; valid sets: table3, table4, table5, alphabeta, ratio",
                other
            )));
        }
    }
    Ok(arms)
}

/// Run every arm of a set over `seeds` seeds and aggregate. Arms and seeds
/// are isolated runs; with `jobs > 1` they execute in parallel.
pub fn ablate(base: &RunConfig, set: &str, seeds: usize, jobs: usize) -> Result<AblationTable> {
    if seeds == 0 {
        return Err(Error::config("seeds must be >= 1".to_string()));
    }
    let arms = arm_configs(base, set)?;
    let spec = base.scene_spec();
    let train_ds = crate::data::generate_dataset(&spec, 0, base.data.count_train);
    let eval_ds = crate::data::generate_dataset(&spec, base.data.count_train, base.data.count_eval);

    let mut jobs_list: Vec<(usize, u64)> = Vec::new();
    for (ai, _) in arms.iter().enumerate() {
        for k in 0..seeds {
            jobs_list.push((ai, base.train.seed + k as u64));
        }
    }
    let run_one = |&(ai, seed): &(usize, u64)| -> Result<(usize, u64, RunRecord)> {
        let (_, cfg) = &arms[ai];
        let mut tc = cfg.train_config();
        tc.seed = seed;
        let snapshot = cfg.to_canonical_toml();
        let (record, _) = train(&tc, &train_ds, &eval_ds, None, &snapshot)?;
        Ok((ai, seed, record))
    };

    let results: Vec<Result<(usize, u64, RunRecord)>> = run_jobs(&jobs_list, jobs, run_one);

    let mut per_arm: Vec<Vec<(u64, RunRecord)>> = (0..arms.len()).map(|_| Vec::new()).collect();
    for r in results {
        let (ai, seed, record) = r?;
        per_arm[ai].push((seed, record));
    }
    let mut out = Vec::new();
    for (ai, (name, _)) in arms.iter().enumerate() {
        let mut runs = std::mem::take(&mut per_arm[ai]);
        runs.sort_by_key(|(s, _)| *s);
        let ap50: Vec<f64> = runs.iter().map(|(_, r)| r.final_report.ap50).collect();
        let map: Vec<f64> = runs.iter().map(|(_, r)| r.final_report.map).collect();
        out.push(ArmResult {
            arm: name.clone(),
            seeds: runs.iter().map(|(s, _)| *s).collect(),
            ap50_mean: mean(&ap50),
            ap50_std: std_dev(&ap50),
            map_mean: mean(&map),
            map_std: std_dev(&map),
            ap50,
            map,
            final_obj_nobj_cosine: runs.iter().map(|(_, r)| r.final_report.mean_obj_nobj_cosine).collect(),
            init_obj_nobj_cosine: runs.iter().map(|(_, r)| r.init_obj_nobj_cosine).collect(),
            retrieval_top1: runs.iter().map(|(_, r)| r.final_report.text_retrieval_top1).collect(),
        });
    }
    Ok(AblationTable { set: set.to_string(), arms: out })
}

#[cfg(feature = "parallel")]
fn run_jobs<T: Send + Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 {
        items.iter().map(&f).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            items.par_iter().map(&f).collect()
        })
    }
}

#[cfg(not(feature = "parallel"))]
fn run_jobs<T: Send + Sync, R: Send>(items: &[T], _jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    items.iter().map(&f).collect()
}

// ── gradient check ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossComponent {
    Detection,
    Alignment,
    Disentangle,
    Total,
}

impl LossComponent {
    pub const ALL: [LossComponent; 4] = [
        LossComponent::Detection,
        LossComponent::Alignment,
        LossComponent::Disentangle,
        LossComponent::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossComponent::Detection => "l_det",
            LossComponent::Alignment => "l_al",
            LossComponent::Disentangle => "l_ds",
            LossComponent::Total => "total",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub components: Vec<ComponentCheck>,
    pub tolerance: f64,
    pub pass: bool,
}

fn component_loss(
    model: &Model,
    tape: &mut Tape,
    batch: &Batch,
    which: LossComponent,
) -> Result<crate::tensor::Tensor> {
    let fwd = model.forward_train_frozen(tape, &batch.images, batch.batch_size(), &batch.captions)?;
    let cfg = &model.cfg;
    match which {
        LossComponent::Detection => {
            let targets = assign_targets(&batch.boxes, cfg.image_size, cfg.num_classes);
            detection_loss(tape, &fwd.pred, &targets)
        }
        LossComponent::Alignment => {
            let s = similarity_matrix(tape, &fwd.obj_embed, &fwd.text_embed, COSINE_EPS)?;
            if cfg.symmetric_al {
                alignment_loss_symmetric(tape, &s, cfg.tau)
            } else {
                alignment_loss(tape, &s, cfg.tau)
            }
        }
        LossComponent::Disentangle => Ok(disentangle_mean(tape, &fwd.decomposed, COSINE_EPS, cfg.abs_ds)),
        LossComponent::Total => {
            let bundle = batch_losses(tape, cfg, &fwd, batch)?;
            Ok(bundle.total)
        }
    }
}

/// Central finite differences (h = 1e-4) on sampled weight entries against
/// the analytic gradient, per loss component. Near-zero gradient pairs
/// (both below 1e-8 absolute) pass trivially.
pub fn grad_check(cfg: &TrainConfig, samples_per_component: usize) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let encoder = HashEncoder::new(cfg.model.l)?;
    let spec = crate::data::SceneSpec::default_for_size(cfg.model.image_size, cfg.seed ^ 0x5eed);
    let ds = crate::data::generate_dataset(&spec, 0, cfg.batch_size.max(4));
    let batch = make_batches(&ds, cfg.batch_size.max(4), cfg.seed, 0, true, &encoder)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::config("no batch for gradient check".to_string()))?;

    let h = 1e-4;
    let tolerance = 1e-4;
    let mut components = Vec::new();
    let mut all_pass = true;

    // weight entries only (buffers get no gradients)
    let weight_ids: Vec<usize> = (0..model.params.len())
        .filter(|&i| model.params.get(i).kind == ParamKind::Weight)
        .collect();

    for comp in LossComponent::ALL {
        // analytic gradients
        let mut tape = Tape::new();
        let loss = component_loss(&model, &mut tape, &batch, comp)?;
        tape.backward(&loss)?;
        tape.accumulate_param_grads(&mut model.params);
        let analytic: Vec<Vec<f64>> =
            weight_ids.iter().map(|&i| model.params.get(i).grad.clone()).collect();
        model.params.zero_grad();

        let mut rng = rng_for(cfg.seed, 0x67726164 ^ comp as u64);
        let mut max_rel: f64 = 0.0;
        let mut checked = 0usize;
        while checked < samples_per_component {
            let wi = rng.gen_range(0..weight_ids.len());
            let pid = weight_ids[wi];
            let n = model.params.get(pid).numel();
            let ei = rng.gen_range(0..n);
            let orig = model.params.get(pid).data[ei];

            model.params.get_mut(pid).data[ei] = orig + h;
            let mut tp = Tape::new();
            let lp = component_loss(&model, &mut tp, &batch, comp)?;
            let fp = tp.data(&lp)[0];

            model.params.get_mut(pid).data[ei] = orig - h;
            let mut tm = Tape::new();
            let lm = component_loss(&model, &mut tm, &batch, comp)?;
            let fm = tm.data(&lm)[0];

            model.params.get_mut(pid).data[ei] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[wi][ei];
            checked += 1;
            if a.abs() < 1e-8 && numeric.abs() < 1e-8 {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
        let pass = max_rel <= tolerance;
        all_pass &= pass;
        components.push(ComponentCheck {
            component: comp.name().to_string(),
            max_rel_err: max_rel,
            checked,
        });
    }
    Ok(GradCheckReport { components, tolerance, pass: all_pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SceneSpec};

    fn tiny_run_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.image_size = 64;
        cfg.data.count_train = 8;
        cfg.data.count_eval = 4;
        cfg.model.l = 16;
        cfg.train.epochs = 1;
        cfg.train.batch_size = 4;
        cfg.resolve();
        cfg
    }

    fn tiny_datasets(cfg: &RunConfig) -> (Dataset, Dataset) {
        let spec = cfg.scene_spec();
        let train = generate_dataset(&spec, 0, cfg.data.count_train);
        let eval = generate_dataset(&spec, cfg.data.count_train, cfg.data.count_eval);
        (train, eval)
    }

    #[test]
    fn one_epoch_run_produces_record_and_checkpoints() {
        let cfg = tiny_run_config();
        let (train_ds, eval_ds) = tiny_datasets(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let (record, model) =
            train(&cfg.train_config(), &train_ds, &eval_ds, Some(dir.path()), &cfg.to_canonical_toml())
                .unwrap();
        assert_eq!(record.rows.len(), 1);
        assert!(dir.path().join("metrics.jsonl").exists());
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("ckpt_last.bin").exists());
        assert!(dir.path().join("ckpt_best.bin").exists());

        let loaded = Model::load(&dir.path().join("ckpt_last.bin")).unwrap();
        for (p, q) in model.params.iter().zip(loaded.params.iter()) {
            for (a, b) in p.data.iter().zip(q.data.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{}", p.name);
            }
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let cfg = tiny_run_config();
        let (train_ds, eval_ds) = tiny_datasets(&cfg);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let snap = cfg.to_canonical_toml();
        let (r1, _) = train(&cfg.train_config(), &train_ds, &eval_ds, Some(d1.path()), &snap).unwrap();
        let (r2, _) = train(&cfg.train_config(), &train_ds, &eval_ds, Some(d2.path()), &snap).unwrap();
        for (a, b) in r1.rows.iter().zip(r2.rows.iter()) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
        let m1 = std::fs::read(d1.path().join("metrics.jsonl")).unwrap();
        let m2 = std::fs::read(d2.path().join("metrics.jsonl")).unwrap();
        assert_eq!(m1, m2);
        let c1 = std::fs::read(d1.path().join("ckpt_last.bin")).unwrap();
        let c2 = std::fs::read(d2.path().join("ckpt_last.bin")).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn aux_losses_change_the_first_step() {
        let cfg = tiny_run_config();
        let (train_ds, eval_ds) = tiny_datasets(&cfg);
        let mut base = cfg.clone();
        base.loss.alpha = 0.0;
        base.loss.beta = 0.0;
        let (_, m_full) =
            train(&cfg.train_config(), &train_ds, &eval_ds, None, "snap").unwrap();
        let (_, m_base) =
            train(&base.train_config(), &train_ds, &eval_ds, None, "snap").unwrap();
        let diff = m_full
            .params
            .iter()
            .zip(m_base.params.iter())
            .any(|(p, q)| p.data.iter().zip(q.data.iter()).any(|(a, b)| a != b));
        assert!(diff, "aux gradients should move parameters");
    }

    #[test]
    fn beta_zero_leaves_nobj_grad_zero() {
        let cfg = tiny_run_config();
        let (train_ds, _) = tiny_datasets(&cfg);
        let mut mc = cfg.model_config();
        mc.beta = 0.0;
        let mut model = Model::new(mc.clone(), 1).unwrap();
        let encoder = HashEncoder::new(mc.l).unwrap();
        let batch = make_batches(&train_ds, 4, 1, 0, true, &encoder).unwrap().remove(0);
        let mut tape = Tape::new();
        let fwd = model.forward_train(&mut tape, &batch.images, 4, &batch.captions).unwrap();
        let bundle = batch_losses(&mut tape, &mc, &fwd, &batch).unwrap();
        tape.backward(&bundle.total).unwrap();
        for d in &fwd.decomposed {
            if let Some(g) = tape.grad(&d.f_nobj) {
                assert!(g.iter().all(|v| *v == 0.0), "beta=0 must not push gradient into f_nobj");
            }
        }
    }

    #[test]
    fn total_gradient_is_sum_of_component_gradients() {
        let cfg = tiny_run_config();
        let (train_ds, _) = tiny_datasets(&cfg);
        let mc = cfg.model_config();
        let model = Model::new(mc.clone(), 5).unwrap();
        let encoder = HashEncoder::new(mc.l).unwrap();
        let batch = make_batches(&train_ds, 4, 5, 0, true, &encoder).unwrap().remove(0);

        let grads_for = |comp: LossComponent| -> Vec<Vec<f64>> {
            let mut m = Model::new(mc.clone(), 5).unwrap();
            let mut tape = Tape::new();
            let loss = component_loss(&model, &mut tape, &batch, comp).unwrap();
            tape.backward(&loss).unwrap();
            tape.accumulate_param_grads(&mut m.params);
            m.params.iter().map(|p| p.grad.clone()).collect()
        };
        let g_det = grads_for(LossComponent::Detection);
        let g_al = grads_for(LossComponent::Alignment);
        let g_ds = grads_for(LossComponent::Disentangle);
        let g_tot = grads_for(LossComponent::Total);
        for (((d, a), s), t) in g_det.iter().zip(&g_al).zip(&g_ds).zip(&g_tot) {
            for i in 0..d.len() {
                let sum = d[i] + mc.alpha * a[i] + mc.beta * s[i];
                assert!(
                    (sum - t[i]).abs() < 1e-10,
                    "component sum {} vs total {}",
                    sum,
                    t[i]
                );
            }
        }
    }

    #[test]
    fn ablate_table3_smoke_emits_four_rows() {
        let mut cfg = tiny_run_config();
        cfg.data.count_train = 4;
        cfg.data.count_eval = 4;
        cfg.train.batch_size = 2;
        let table = ablate(&cfg, "table3", 1, 1).unwrap();
        assert_eq!(table.arms.len(), 4);
        let names: Vec<&str> = table.arms.iter().map(|a| a.arm.as_str()).collect();
        assert_eq!(names, vec!["base", "sfa", "ofd", "full"]);
        let text = table.text_table();
        assert!(text.lines().count() >= 5);
    }

    #[test]
    fn ablate_rejects_unknown_set() {
        let cfg = tiny_run_config();
        let err = ablate(&cfg, "nope", 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("table3") && msg.contains("ratio"), "{}", msg);
    }

    #[test]
    fn arm_sets_have_documented_shapes() {
        let cfg = tiny_run_config();
        assert_eq!(arm_configs(&cfg, "table4").unwrap().len(), 3);
        assert_eq!(arm_configs(&cfg, "table5").unwrap().len(), 8);
        assert_eq!(arm_configs(&cfg, "alphabeta").unwrap().len(), 9);
        assert_eq!(arm_configs(&cfg, "ratio").unwrap().len(), 3);
        // table4 nobj arm really rewires the head
        let arms = arm_configs(&cfg, "table4").unwrap();
        assert_eq!(arms[1].1.model.head_source, HeadSource::Nobj);
    }

    #[test]
    fn nan_guard_aborts_with_location() {
        let mut cfg = tiny_run_config();
        cfg.train.lr = 1e12; // deliberately explosive
        cfg.train.epochs = 3;
        let (train_ds, eval_ds) = tiny_datasets(&cfg);
        match train(&cfg.train_config(), &train_ds, &eval_ds, None, "snap") {
            Err(Error::NonFiniteLoss { .. }) => {}
            other => panic!("expected NonFiniteLoss, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn grad_check_alignment_only_skips_head_params() {
        // no gradient path from the head to the alignment loss
        let mut cfg = tiny_run_config();
        cfg.data.image_size = 32;
        cfg.model.l = 8;
        cfg.model.pool_s = 2;
        cfg.resolve();
        let mc = cfg.model_config();
        let model = Model::new(mc.clone(), 3).unwrap();
        let encoder = HashEncoder::new(mc.l).unwrap();
        let spec = SceneSpec::default_for_size(32, 3);
        let ds = generate_dataset(&spec, 0, 4);
        let batch = make_batches(&ds, 4, 3, 0, true, &encoder).unwrap().remove(0);
        let mut tape = Tape::new();
        let loss = component_loss(&model, &mut tape, &batch, LossComponent::Alignment).unwrap();
        tape.backward(&loss).unwrap();
        let mut m = Model::new(mc, 3).unwrap();
        tape.accumulate_param_grads(&mut m.params);
        for p in m.params.iter() {
            if p.name.starts_with("head.") {
                assert!(p.grad.iter().all(|g| *g == 0.0), "head param {} got gradient", p.name);
            }
        }
    }
}
