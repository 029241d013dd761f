//! Run driver behind the command-line tool. Each command reads its inputs
//! from the run directory, checks their config hashes and writes
//! byte-deterministic outputs.
//!
//! ```text
//! <out>/data/{source,target_train,target_eval,target_backgrounds}/
//! <out>/warmup/fsod-<k>.json, stages.csv, stage_map.svg
//! <out>/wsod/<variant>[-fe][-op].json
//! <out>/eval/<checkpoint>/ap.csv, tide.csv, tide.svg
//! <out>/ablate/order.csv, order.svg
//! <out>/report/summary.csv, eval_map.svg
//! ```

pub mod config;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{verify, EvalConfig, RunConfig};

use crate::adapt::{run_warmup, StageKind, WarmupOutput, WarmupPlan};
use crate::datamodel::{load_dataset, save_dataset, Dataset, Detection, FullAnnotation, Provenance};
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::eval::report::{bar_chart_svg, csv_string, line_chart_svg};
use crate::eval::{evaluate_ap, tide_dataset, ApResult, ErrorBreakdown};
use crate::image::write_file;
use crate::toyworld::{generate_world, World};
use crate::wsod::{train_wsod, WsodConfig, WsodModel};

const SPLITS: [&str; 4] = ["source", "target_train", "target_eval", "target_backgrounds"];

fn desc(p: &Provenance) -> String {
    format!("config {} seed {}", p.config_hash, p.seed)
}

fn checkpoint_path(out: &Path, stage: usize) -> PathBuf {
    out.join("warmup").join(format!("fsod-{stage}.json"))
}

/// File stem of the WSOD checkpoint for a configuration.
pub fn wsod_name(cfg: &WsodConfig) -> String {
    let mut s = cfg.variant.to_string();
    if cfg.use_fe {
        s.push_str("-fe");
    }
    if cfg.use_op {
        s.push_str("-op");
    }
    s
}

pub fn wsod_path(out: &Path, cfg: &WsodConfig) -> PathBuf {
    out.join("wsod").join(format!("{}.json", wsod_name(cfg)))
}

/// Ground truth of a weakly labeled evaluation split.
pub fn hidden_truth(ds: &Dataset) -> Result<Vec<FullAnnotation>> {
    ds.items
        .iter()
        .map(|i| {
            i.hidden
                .clone()
                .or_else(|| i.full.clone())
                .ok_or_else(|| Error::invalid(format!("item {} has no evaluation boxes", i.name)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub ap: ApResult,
    pub tide: ErrorBreakdown,
}

pub fn score(dets: &[Vec<Detection>], ds: &Dataset, eval: &EvalConfig) -> Result<Scores> {
    let gts = hidden_truth(ds)?;
    let kept: Vec<Vec<Detection>> = dets
        .iter()
        .map(|d| d.iter().filter(|x| x.score >= eval.score_threshold).copied().collect())
        .collect();
    Ok(Scores {
        ap: evaluate_ap(&kept, &gts, ds.num_classes(), eval.iou_threshold, eval.ap_mode)?,
        tide: tide_dataset(&kept, &gts, eval.tide_score_threshold, eval.tide_fg_iou, eval.tide_bg_iou)?,
    })
}

pub fn detector_detections(model: &DetectorModel, ds: &Dataset, eval: &EvalConfig) -> Result<Vec<Vec<Detection>>> {
    ds.items
        .iter()
        .map(|i| Ok(model.predict(&i.image, eval.score_threshold, eval.nms_threshold)?.flatten()))
        .collect()
}

pub fn wsod_detections(model: &WsodModel, fsod: &DetectorModel, ds: &Dataset) -> Result<Vec<Vec<Detection>>> {
    ds.items.iter().map(|i| model.infer(fsod, &i.image)).collect()
}

pub fn generate(cfg: &RunConfig) -> Result<World> {
    let mut world = generate_world(&cfg.world, cfg.seed)?;
    let p = cfg.provenance(cfg.data_hash());
    for ds in [
        &mut world.source,
        &mut world.target_train,
        &mut world.target_eval,
        &mut world.target_backgrounds,
    ] {
        ds.provenance = Some(p.clone());
    }
    Ok(world)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<World> {
    let world = generate(cfg)?;
    let dir = cfg.out.join("data");
    for (name, ds) in SPLITS.iter().zip([
        &world.source,
        &world.target_train,
        &world.target_eval,
        &world.target_backgrounds,
    ]) {
        save_dataset(ds, &dir.join(name))?;
    }
    log::info!("datasets written to {}", dir.display());
    Ok(world)
}

/// Load the generated datasets, refusing ones made under another config.
pub fn load_world(cfg: &RunConfig) -> Result<World> {
    let dir = cfg.out.join("data");
    let expected = cfg.data_hash();
    let mut sets = Vec::with_capacity(4);
    for name in SPLITS {
        let path = dir.join(name);
        let ds = load_dataset(&path)?;
        verify(&path, ds.provenance.as_ref(), &expected)?;
        sets.push(ds);
    }
    let mut it = sets.into_iter();
    Ok(World {
        source: it.next().expect("four splits"),
        target_train: it.next().expect("four splits"),
        target_eval: it.next().expect("four splits"),
        target_backgrounds: it.next().expect("four splits"),
    })
}

/// Warm-up under `plan`, with checkpoints stamped for `cfg`.
pub fn warmup_with(cfg: &RunConfig, plan: &WarmupPlan, world: &World) -> Result<WarmupOutput> {
    let bgs: Vec<_> = world.target_backgrounds.items.iter().map(|i| i.image.clone()).collect();
    let spec = cfg.detector.clone();
    let seed = cfg.seed;
    let factory = || DetectorModel::fresh(spec.clone(), seed);
    let mut out = run_warmup(plan, &world.source, &world.target_train, &bgs, &factory, seed)?;
    let p = cfg.provenance(cfg.warmup_hash());
    for (_, m) in &mut out.checkpoints {
        m.meta.provenance = Some(p.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRow {
    pub tag: String,
    pub kind: String,
    pub train_items: usize,
    pub dropped: usize,
    pub instances: usize,
    pub target_map: f64,
    pub config_hash: String,
    pub seed: u64,
}

pub fn cmd_warmup(cfg: &RunConfig) -> Result<Vec<StageRow>> {
    let world = load_world(cfg)?;
    let out = warmup_with(cfg, &cfg.warmup, &world)?;
    let p = cfg.provenance(cfg.warmup_hash());
    let mut rows = Vec::new();
    for (k, ((tag, model), log)) in out.checkpoints.iter().zip(&out.logs).enumerate() {
        model.save(&checkpoint_path(&cfg.out, k + 1))?;
        let dets = detector_detections(model, &world.target_eval, &cfg.eval)?;
        let s = score(&dets, &world.target_eval, &cfg.eval)?;
        log::info!("{tag} ({}): target mAP {:.4}", log.kind, s.ap.map);
        rows.push(StageRow {
            tag: tag.clone(),
            kind: log.kind.to_string(),
            train_items: log.train_items,
            dropped: log.dropped,
            instances: log.instances,
            target_map: s.ap.map,
            config_hash: p.config_hash.clone(),
            seed: p.seed,
        });
    }
    let dir = cfg.out.join("warmup");
    write_file(&dir.join("stages.csv"), csv_string(&rows)?.as_bytes())?;
    let labels: Vec<String> = rows.iter().map(|r| r.tag.clone()).collect();
    let svg = line_chart_svg(
        "Target mAP per warm-up stage",
        &labels,
        &[("mAP".into(), rows.iter().map(|r| r.target_map).collect())],
        "mAP",
        &desc(&p),
    );
    write_file(&dir.join("stage_map.svg"), svg.as_bytes())?;
    Ok(rows)
}

/// Warm-up checkpoint feeding the WSOD stage, hash-checked.
pub fn load_source_detector(cfg: &RunConfig) -> Result<DetectorModel> {
    let path = checkpoint_path(&cfg.out, cfg.source_stage());
    let m = DetectorModel::load(&path)?;
    verify(&path, m.meta.provenance.as_ref(), &cfg.warmup_hash())?;
    Ok(m)
}

/// Detector used for proposals and initialisation; an untrained one when the
/// WSOD configuration uses neither.
pub fn wsod_source(cfg: &RunConfig) -> Result<DetectorModel> {
    if cfg.wsod.use_fe || cfg.wsod.use_op {
        load_source_detector(cfg)
    } else {
        DetectorModel::fresh(cfg.detector.clone(), cfg.seed)
    }
}

pub fn train_wsod_with(cfg: &RunConfig, world: &World, fsod: &DetectorModel) -> Result<WsodModel> {
    let mut m = train_wsod(&cfg.wsod, &world.target_train, fsod, &cfg.wsod_train, cfg.seed)?;
    m.meta.provenance = Some(cfg.provenance(cfg.wsod_hash()));
    Ok(m)
}

pub fn cmd_train_wsod(cfg: &RunConfig) -> Result<PathBuf> {
    let world = load_world(cfg)?;
    let fsod = wsod_source(cfg)?;
    let m = train_wsod_with(cfg, &world, &fsod).map_err(|e| e.in_stage(format!("WSOD {}", wsod_name(&cfg.wsod))))?;
    let path = wsod_path(&cfg.out, &cfg.wsod);
    m.save(&path)?;
    log::info!("WSOD checkpoint written to {}", path.display());
    Ok(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApRow {
    pub class: String,
    pub ap: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TideRow {
    pub outcome: String,
    pub count: usize,
    pub fraction: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// What `eval` should score.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalTarget {
    /// Warm-up checkpoint `k`.
    Stage(usize),
    /// The WSOD checkpoint of the current config.
    Wsod,
    /// A checkpoint file of either kind.
    File(PathBuf),
}

fn is_wsod_checkpoint(path: &Path) -> Result<bool> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    #[derive(Deserialize)]
    struct Head {
        format: String,
    }
    let head: Head = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(head.format == "dualweak-wsod")
}

pub fn cmd_eval(cfg: &RunConfig, target: &EvalTarget) -> Result<Scores> {
    let world = load_world(cfg)?;
    let path = match target {
        EvalTarget::Stage(k) => checkpoint_path(&cfg.out, *k),
        EvalTarget::Wsod => wsod_path(&cfg.out, &cfg.wsod),
        EvalTarget::File(p) => p.clone(),
    };
    let (dets, prov) = if is_wsod_checkpoint(&path)? {
        let m = WsodModel::load(&path)?;
        let mut c = cfg.clone();
        c.wsod = m.config.clone();
        verify(&path, m.meta.provenance.as_ref(), &c.wsod_hash())?;
        let fsod = wsod_source(&c)?;
        (wsod_detections(&m, &fsod, &world.target_eval)?, m.meta.provenance.clone())
    } else {
        let m = DetectorModel::load(&path)?;
        verify(&path, m.meta.provenance.as_ref(), &cfg.warmup_hash())?;
        (detector_detections(&m, &world.target_eval, &cfg.eval)?, m.meta.provenance.clone())
    };
    let s = score(&dets, &world.target_eval, &cfg.eval)?;
    let p = prov.expect("verified");
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    let dir = cfg.out.join("eval").join(&stem);
    let mut ap_rows: Vec<ApRow> = world
        .target_eval
        .class_names
        .iter()
        .zip(&s.ap.per_class)
        .map(|(c, ap)| ApRow {
            class: c.clone(),
            ap: *ap,
            config_hash: p.config_hash.clone(),
            seed: p.seed,
        })
        .collect();
    ap_rows.push(ApRow {
        class: "mAP".into(),
        ap: Some(s.ap.map),
        config_hash: p.config_hash.clone(),
        seed: p.seed,
    });
    write_file(&dir.join("ap.csv"), csv_string(&ap_rows)?.as_bytes())?;
    let mut outcomes = vec![("correct", s.tide.correct)];
    outcomes.extend(s.tide.errors());
    let total = outcomes.iter().map(|(_, n)| n).sum::<usize>().max(1) as f64;
    let tide_rows: Vec<TideRow> = outcomes
        .iter()
        .map(|(name, n)| TideRow {
            outcome: name.to_string(),
            count: *n,
            fraction: *n as f64 / total,
            config_hash: p.config_hash.clone(),
            seed: p.seed,
        })
        .collect();
    write_file(&dir.join("tide.csv"), csv_string(&tide_rows)?.as_bytes())?;
    let labels: Vec<String> = tide_rows.iter().map(|r| r.outcome.clone()).collect();
    let counts: Vec<f64> = tide_rows.iter().map(|r| r.count as f64).collect();
    let svg = bar_chart_svg(&format!("Detection outcomes: {stem}"), &labels, &counts, "count", &desc(&p));
    write_file(&dir.join("tide.svg"), svg.as_bytes())?;
    log::info!("{stem}: mAP {:.4}", s.ap.map);
    Ok(s)
}

/// Stage orders compared by the ablation; the configured plan comes first.
pub fn order_variants(plan: &WarmupPlan) -> Vec<(String, WarmupPlan)> {
    let name = |p: &WarmupPlan| p.stages.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(">");
    let swap = |a: StageKind, b: StageKind| {
        let mut p = plan.clone();
        for s in &mut p.stages {
            *s = if *s == a {
                b
            } else if *s == b {
                a
            } else {
                *s
            };
        }
        p.allow_reorder = true;
        p
    };
    let mut out = vec![(name(plan), plan.clone())];
    for p in [
        swap(StageKind::FtG1, StageKind::FtG2),
        swap(StageKind::FtPlt, StageKind::FtPltAug),
    ] {
        if p.stages != plan.stages {
            out.push((name(&p), p));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderRow {
    pub order: String,
    pub final_map: f64,
    pub config_hash: String,
    pub seed: u64,
}

pub fn ablate_orders(cfg: &RunConfig, world: &World) -> Result<Vec<OrderRow>> {
    let p = cfg.provenance(cfg.warmup_hash());
    order_variants(&cfg.warmup)
        .into_iter()
        .map(|(name, plan)| {
            let out = warmup_with(cfg, &plan, world).map_err(|e| e.in_stage(format!("order {name}")))?;
            let last = &out.checkpoints.last().expect("non-empty plan").1;
            let dets = detector_detections(last, &world.target_eval, &cfg.eval)?;
            let s = score(&dets, &world.target_eval, &cfg.eval)?;
            log::info!("order {name}: final mAP {:.4}", s.ap.map);
            Ok(OrderRow {
                order: name,
                final_map: s.ap.map,
                config_hash: p.config_hash.clone(),
                seed: p.seed,
            })
        })
        .collect()
}

pub fn cmd_ablate_order(cfg: &RunConfig) -> Result<Vec<OrderRow>> {
    let world = load_world(cfg)?;
    let rows = ablate_orders(cfg, &world)?;
    if let Some(base) = rows.first() {
        for r in &rows[1..] {
            if r.final_map > base.final_map {
                log::warn!("order {} beats {} ({:.4} > {:.4})", r.order, base.order, r.final_map, base.final_map);
            }
        }
    }
    let dir = cfg.out.join("ablate");
    write_file(&dir.join("order.csv"), csv_string(&rows)?.as_bytes())?;
    let labels: Vec<String> = rows.iter().map(|r| r.order.clone()).collect();
    let values: Vec<f64> = rows.iter().map(|r| r.final_map).collect();
    let p = cfg.provenance(cfg.warmup_hash());
    let svg = bar_chart_svg("Final target mAP by stage order", &labels, &values, "mAP", &desc(&p));
    write_file(&dir.join("order.svg"), svg.as_bytes())?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub checkpoint: String,
    pub map: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// Collect every evaluated checkpoint's mAP into one table and chart.
pub fn cmd_report(cfg: &RunConfig) -> Result<Vec<SummaryRow>> {
    let eval_dir = cfg.out.join("eval");
    if !eval_dir.exists() {
        return Err(Error::MissingArtifact(eval_dir));
    }
    let mut names: Vec<String> = std::fs::read_dir(&eval_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("ap.csv").exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut rows = Vec::new();
    for name in names {
        let path = eval_dir.join(&name).join("ap.csv");
        let mut rdr = csv::Reader::from_path(&path)?;
        for rec in rdr.deserialize::<ApRow>() {
            let rec = rec?;
            if rec.class == "mAP" {
                rows.push(SummaryRow {
                    checkpoint: name.clone(),
                    map: rec.ap.unwrap_or(f64::NAN),
                    config_hash: rec.config_hash,
                    seed: rec.seed,
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::MissingArtifact(eval_dir.join("*/ap.csv")));
    }
    let dir = cfg.out.join("report");
    write_file(&dir.join("summary.csv"), csv_string(&rows)?.as_bytes())?;
    let labels: Vec<String> = rows.iter().map(|r| r.checkpoint.clone()).collect();
    let values: Vec<f64> = rows.iter().map(|r| r.map).collect();
    let svg = bar_chart_svg(
        "Target mAP by checkpoint",
        &labels,
        &values,
        "mAP",
        &desc(&cfg.provenance(cfg.full_hash())),
    );
    write_file(&dir.join("eval_map.svg"), svg.as_bytes())?;
    Ok(rows)
}
