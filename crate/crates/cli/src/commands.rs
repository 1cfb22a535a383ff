//! The four experiment commands: train, eval, ablate, scale-sweep.
//!
//! Commands are deterministic: identical configs and seeds produce
//! byte-identical checkpoints and reports. Independent jobs (seeds, ablation
//! rows, sweep points) run on a rayon pool sized by `--threads`; all file
//! writes happen on the main thread after the jobs complete.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use cosood::checkpoint::{self, Checkpoint};
use cosood::data::Dataset;
use cosood::detect::{self, MetricsReport};
use cosood::error::{Error, Result};
use cosood::heads::{HeadConfig, HeadKind, ScaleSpec};
use cosood::model::Model;
use cosood::train::{self, EpochStats};

use crate::config::ExperimentConfig;
use crate::report::{self, mean_std, MeanStd};

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))
}

/// Everything a training/evaluation job needs, shared read-only.
struct SharedData {
    id_train: Dataset,
    id_test: Dataset,
    oods: Vec<Dataset>,
    provenance: String,
}

impl SharedData {
    fn load(exp: &ExperimentConfig, seeds: &[u64], with_ood: bool) -> Result<Self> {
        let id_train = exp.id_train()?;
        let id_test = exp.id_test()?;
        let oods = if with_ood {
            exp.ood_sets(&id_train)?
        } else {
            Vec::new()
        };
        Ok(Self {
            id_train,
            id_test,
            oods,
            provenance: exp.provenance(seeds),
        })
    }
}

struct RunOutcome {
    seed: u64,
    checkpoint: Checkpoint,
    log: Vec<EpochStats>,
    reports: Vec<MetricsReport>,
}

/// Train one model and (optionally) evaluate it against every OOD set.
fn run_one(
    exp: &ExperimentConfig,
    head: HeadConfig,
    exempt_last_layer: bool,
    seed: u64,
    shared: &SharedData,
    evaluate: bool,
) -> Result<RunOutcome> {
    let mut train_cfg = exp.train.clone();
    train_cfg.seed = seed;
    train_cfg.exempt_last_layer = exempt_last_layer;
    let model_cfg = exp.model_config(&shared.id_train, head);
    let mut model = Model::new(model_cfg, seed)?;
    let log = train::train_model(&mut model, &shared.id_train, &train_cfg)?;
    let checkpoint = Checkpoint::of(&model, train_cfg, seed, log.len());
    let reports = if evaluate {
        evaluate_model(&mut model, shared, &seed.to_string())?
    } else {
        Vec::new()
    };
    Ok(RunOutcome {
        seed,
        checkpoint,
        log,
        reports,
    })
}

/// Score the ID test set once, then evaluate against each OOD set.
fn evaluate_model(model: &mut Model, shared: &SharedData, seed: &str) -> Result<Vec<MetricsReport>> {
    let id_records = detect::score_batch(model, &shared.id_test)?;
    shared
        .oods
        .iter()
        .map(|ood| {
            let ood_records = detect::score_batch(model, ood)?;
            detect::evaluate(
                &id_records,
                &ood_records,
                ood.name(),
                &shared.provenance,
                seed,
            )
        })
        .collect()
}

fn render_train_log(log: &[EpochStats]) -> String {
    let mut out = String::from("# epoch\tmean_loss\taccuracy\n");
    for e in log {
        out.push_str(&format!("{}\t{:.6}\t{:.6}\n", e.epoch, e.mean_loss, e.accuracy));
    }
    out
}

fn checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}.ckpt"))
}

/// `train`: one checkpoint and training log per seed.
pub fn cmd_train(
    config_path: &Path,
    cli_seeds: &[u64],
    cli_out: Option<&Path>,
    threads: Option<usize>,
) -> Result<()> {
    let exp = ExperimentConfig::load(config_path)?;
    let seeds = exp.resolve_seeds(cli_seeds)?;
    let out = exp.resolve_out_dir(cli_out)?;
    let shared = SharedData::load(&exp, &seeds, false)?;

    let outcomes: Vec<RunOutcome> = pool(threads)?.install(|| {
        seeds
            .par_iter()
            .map(|&seed| run_one(&exp, exp.head.clone(), exp.train.exempt_last_layer, seed, &shared, false))
            .collect::<Result<Vec<_>>>()
    })?;

    report::write_file(
        &out.join("config.json"),
        &(serde_json::to_string_pretty(&exp).expect("config serializes") + "\n"),
    )?;
    for outcome in &outcomes {
        let ckpt_path = checkpoint_path(&out, outcome.seed);
        checkpoint::save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
        report::write_file(
            &out.join(format!("train_seed_{}.log", outcome.seed)),
            &render_train_log(&outcome.log),
        )?;
        let last = outcome.log.last().expect("at least one epoch");
        println!(
            "seed {}: loss {:.6}, train accuracy {:.4} -> {}",
            outcome.seed,
            last.mean_loss,
            last.accuracy,
            ckpt_path.display()
        );
    }
    Ok(())
}

/// `eval`: per-checkpoint reports plus a mean/std aggregate per OOD set;
/// `--ensemble` additionally scores the averaged class scores.
pub fn cmd_eval(
    config_path: &Path,
    checkpoint_paths: &[PathBuf],
    cli_out: Option<&Path>,
    ensemble: bool,
    threads: Option<usize>,
) -> Result<()> {
    let exp = ExperimentConfig::load(config_path)?;
    let out = exp.resolve_out_dir(cli_out)?;
    if checkpoint_paths.is_empty() {
        return Err(Error::Config {
            path: "checkpoints".into(),
            message: "need at least one checkpoint".into(),
        });
    }
    let checkpoints: Vec<Checkpoint> = checkpoint_paths
        .iter()
        .map(|p| checkpoint::load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let kinds: Vec<HeadKind> = checkpoints.iter().map(|c| c.head_kind).collect();
    if kinds.iter().any(|&k| k != kinds[0]) {
        return Err(Error::MixedHeadKinds(format!("{kinds:?}")));
    }
    let seeds: Vec<u64> = checkpoints.iter().map(|c| c.meta.seed).collect();
    let shared = SharedData::load(&exp, &seeds, true)?;

    let per_ckpt: Vec<Vec<MetricsReport>> = pool(threads)?.install(|| {
        checkpoints
            .par_iter()
            .map(|ckpt| {
                let mut model = ckpt.build_model()?;
                evaluate_model(&mut model, &shared, &ckpt.meta.seed.to_string())
            })
            .collect::<Result<Vec<_>>>()
    })?;

    for (i, reports) in per_ckpt.iter().enumerate() {
        for r in reports {
            let base = out.join(format!("report_{}_ckpt{}", report::file_tag(&r.ood_name), i));
            report::write_report(r, &base)?;
        }
    }
    for (o, ood) in shared.oods.iter().enumerate() {
        let group: Vec<MetricsReport> = per_ckpt.iter().map(|r| r[o].clone()).collect();
        let agg = report::aggregate_reports(&group);
        report::write_aggregate(&agg, &out.join(format!("aggregate_{}", report::file_tag(ood.name()))))?;
        println!(
            "{}: auroc {:.4} +/- {:.4} over {} checkpoints",
            ood.name(),
            agg.metrics["auroc"].mean,
            agg.metrics["auroc"].std,
            agg.n_runs
        );
    }

    if ensemble {
        let mut models: Vec<Model> = checkpoints
            .iter()
            .map(Checkpoint::build_model)
            .collect::<Result<Vec<_>>>()?;
        let seed_str = format!(
            "ensemble({})",
            seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
        );
        let id_records = detect::score_batch_ensemble(&mut models, &shared.id_test)?;
        for ood in &shared.oods {
            let ood_records = detect::score_batch_ensemble(&mut models, ood)?;
            let r = detect::evaluate(&id_records, &ood_records, ood.name(), &shared.provenance, &seed_str)?;
            report::write_report(&r, &out.join(format!("ensemble_{}", report::file_tag(&r.ood_name))))?;
            println!("{}: ensemble auroc {:.4}", ood.name(), r.auroc);
        }
    }
    Ok(())
}

/// How the scale column reads in the ablation table.
#[derive(Debug, Clone, Copy, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
enum ScaleCell {
    None,
    Fixed(f64),
    Pred,
}

impl std::fmt::Display for ScaleCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScaleCell::None => write!(f, "-"),
            ScaleCell::Fixed(s) => write!(f, "{s}"),
            ScaleCell::Pred => write!(f, "pred"),
        }
    }
}

struct AblationRowSpec {
    row: usize,
    label: &'static str,
    cosine: bool,
    single_fc: Option<bool>,
    scale: ScaleCell,
    wo_wd: bool,
    head: HeadConfig,
}

/// The ten ablation configurations: baseline max-softmax, scaled logits,
/// fixed scales 16/32/64/128, predicted scale with and without the
/// weight-decay exemption, and the two-FC variants.
fn ablation_rows(embed_dim: usize) -> Vec<AblationRowSpec> {
    let cosine = |scale| HeadConfig::new(HeadKind::Cosine).with_scale(scale);
    let two_fc = HeadConfig::new(HeadKind::TwoFcCosine)
        .with_scale(ScaleSpec::Predicted)
        .with_embed_dim(embed_dim);
    let mut rows = vec![AblationRowSpec {
        row: 1,
        label: "baseline",
        cosine: false,
        single_fc: None,
        scale: ScaleCell::None,
        wo_wd: false,
        head: HeadConfig::new(HeadKind::Standard),
    }];
    rows.push(AblationRowSpec {
        row: 2,
        label: "scaled-logit",
        cosine: false,
        single_fc: Some(true),
        scale: ScaleCell::Pred,
        wo_wd: false,
        head: HeadConfig::new(HeadKind::ScaledLogit).with_scale(ScaleSpec::Predicted),
    });
    for (i, s) in [16.0, 32.0, 64.0, 128.0].into_iter().enumerate() {
        rows.push(AblationRowSpec {
            row: 3 + i,
            label: "cosine-fixed",
            cosine: true,
            single_fc: Some(true),
            scale: ScaleCell::Fixed(s),
            wo_wd: false,
            head: cosine(ScaleSpec::Fixed(s)),
        });
    }
    rows.push(AblationRowSpec {
        row: 7,
        label: "cosine-pred",
        cosine: true,
        single_fc: Some(true),
        scale: ScaleCell::Pred,
        wo_wd: false,
        head: cosine(ScaleSpec::Predicted),
    });
    rows.push(AblationRowSpec {
        row: 8,
        label: "cosine-pred-nowd",
        cosine: true,
        single_fc: Some(true),
        scale: ScaleCell::Pred,
        wo_wd: true,
        head: cosine(ScaleSpec::Predicted),
    });
    rows.push(AblationRowSpec {
        row: 9,
        label: "two-fc-pred",
        cosine: true,
        single_fc: Some(false),
        scale: ScaleCell::Pred,
        wo_wd: false,
        head: two_fc.clone(),
    });
    rows.push(AblationRowSpec {
        row: 10,
        label: "two-fc-pred-nowd",
        cosine: true,
        single_fc: Some(false),
        scale: ScaleCell::Pred,
        wo_wd: true,
        head: two_fc,
    });
    rows
}

#[derive(serde::Serialize)]
struct AblationCell {
    auroc: MeanStd,
    aupr_in: MeanStd,
}

#[derive(serde::Serialize)]
struct AblationRowOut {
    row: usize,
    label: String,
    cosine: bool,
    single_fc: Option<bool>,
    scale: String,
    wo_wd: bool,
    id_accuracy: MeanStd,
    per_ood: Vec<(String, AblationCell)>,
}

/// `ablate`: train and evaluate all ten configurations, mean/std per seed.
pub fn cmd_ablate(
    config_path: &Path,
    cli_seeds: &[u64],
    cli_out: Option<&Path>,
    threads: Option<usize>,
) -> Result<()> {
    let exp = ExperimentConfig::load(config_path)?;
    let seeds = exp.resolve_seeds(cli_seeds)?;
    let out = exp.resolve_out_dir(cli_out)?;
    let shared = SharedData::load(&exp, &seeds, true)?;
    let rows = ablation_rows(exp.head.embed_dim);

    let jobs: Vec<(usize, u64)> = rows
        .iter()
        .enumerate()
        .flat_map(|(i, _)| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<Vec<MetricsReport>> = pool(threads)?.install(|| {
        jobs.par_iter()
            .map(|&(row_idx, seed)| {
                let row = &rows[row_idx];
                run_one(&exp, row.head.clone(), row.wo_wd, seed, &shared, true)
                    .map(|o| o.reports)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut table = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let row_reports: Vec<&Vec<MetricsReport>> = jobs
            .iter()
            .zip(&results)
            .filter(|((r, _), _)| *r == i)
            .map(|(_, reports)| reports)
            .collect();
        let per_ood: Vec<(String, AblationCell)> = shared
            .oods
            .iter()
            .enumerate()
            .map(|(o, ood)| {
                let aurocs: Vec<f64> = row_reports.iter().map(|r| r[o].auroc).collect();
                let auprs: Vec<f64> = row_reports.iter().map(|r| r[o].aupr_in).collect();
                (
                    ood.name().to_string(),
                    AblationCell {
                        auroc: mean_std(&aurocs),
                        aupr_in: mean_std(&auprs),
                    },
                )
            })
            .collect();
        let accs: Vec<f64> = row_reports.iter().map(|r| r[0].id_accuracy).collect();
        table.push(AblationRowOut {
            row: row.row,
            label: row.label.to_string(),
            cosine: row.cosine,
            single_fc: row.single_fc,
            scale: row.scale.to_string(),
            wo_wd: row.wo_wd,
            id_accuracy: mean_std(&accs),
            per_ood,
        });
    }

    let mut text = format!(
        "# ablation matrix: mean +/- std over {} seed(s)\n\
         # columns: row, cosine, single_fc, scale, wo_wd, id_accuracy, then auroc / aupr_in per OOD set\n",
        seeds.len()
    );
    for row in &table {
        let flags = format!(
            "({:>2})  cosine={} single_fc={} scale={:>5} wo_wd={}",
            row.row,
            if row.cosine { "yes" } else { "no " },
            row.single_fc.map_or("-  ".into(), |b| if b { "yes".to_string() } else { "no ".to_string() }),
            row.scale,
            if row.wo_wd { "yes" } else { "no " },
        );
        let mut line = format!("{flags}  acc={:.4}+/-{:.4}", row.id_accuracy.mean, row.id_accuracy.std);
        for (name, cell) in &row.per_ood {
            line.push_str(&format!(
                "  | {}: auroc={:.4}+/-{:.4} aupr_in={:.4}+/-{:.4}",
                name, cell.auroc.mean, cell.auroc.std, cell.aupr_in.mean, cell.aupr_in.std
            ));
        }
        text.push_str(&line);
        text.push('\n');
    }
    report::write_file(&out.join("ablation.txt"), &text)?;
    let json = serde_json::to_string_pretty(&table).expect("table serializes");
    report::write_file(&out.join("ablation.json"), &(json + "\n"))?;
    print!("{text}");
    Ok(())
}

#[derive(serde::Serialize)]
struct SweepPoint {
    scale: f64,
    auroc: MeanStd,
}

#[derive(serde::Serialize)]
struct SweepSeries {
    ood_name: String,
    points: Vec<SweepPoint>,
    predicted: MeanStd,
}

/// `scale-sweep`: AUROC for each fixed scale plus the predicted-scale
/// reference, per OOD set.
pub fn cmd_scale_sweep(
    config_path: &Path,
    scales: &[f64],
    cli_seeds: &[u64],
    cli_out: Option<&Path>,
    threads: Option<usize>,
) -> Result<()> {
    let exp = ExperimentConfig::load(config_path)?;
    let seeds = exp.resolve_seeds(cli_seeds)?;
    let out = exp.resolve_out_dir(cli_out)?;
    let scales: Vec<f64> = if scales.is_empty() {
        vec![16.0, 32.0, 64.0, 128.0]
    } else {
        scales.to_vec()
    };
    if scales.len() < 2 {
        return Err(Error::Config {
            path: "scales".into(),
            message: "need at least two scales to sweep".into(),
        });
    }
    if scales.iter().any(|&s| s.is_nan() || s <= 0.0) {
        return Err(Error::Config {
            path: "scales".into(),
            message: "scales must be > 0".into(),
        });
    }
    let shared = SharedData::load(&exp, &seeds, true)?;

    // one job per (scale or predicted-reference) x seed, same WD treatment
    let mut heads: Vec<(Option<f64>, HeadConfig)> = scales
        .iter()
        .map(|&s| (Some(s), HeadConfig::new(HeadKind::Cosine).with_scale(ScaleSpec::Fixed(s))))
        .collect();
    heads.push((None, HeadConfig::new(HeadKind::Cosine).with_scale(ScaleSpec::Predicted)));

    let jobs: Vec<(usize, u64)> = heads
        .iter()
        .enumerate()
        .flat_map(|(i, _)| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<Vec<MetricsReport>> = pool(threads)?.install(|| {
        jobs.par_iter()
            .map(|&(head_idx, seed)| {
                run_one(
                    &exp,
                    heads[head_idx].1.clone(),
                    exp.train.exempt_last_layer,
                    seed,
                    &shared,
                    true,
                )
                .map(|o| o.reports)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let collect_aurocs = |head_idx: usize, ood_idx: usize| -> Vec<f64> {
        jobs.iter()
            .zip(&results)
            .filter(|((h, _), _)| *h == head_idx)
            .map(|(_, reports)| reports[ood_idx].auroc)
            .collect()
    };

    let mut series = Vec::new();
    for (o, ood) in shared.oods.iter().enumerate() {
        let points: Vec<SweepPoint> = scales
            .iter()
            .enumerate()
            .map(|(i, &scale)| SweepPoint {
                scale,
                auroc: mean_std(&collect_aurocs(i, o)),
            })
            .collect();
        let predicted = mean_std(&collect_aurocs(scales.len(), o));
        series.push(SweepSeries {
            ood_name: ood.name().to_string(),
            points,
            predicted,
        });
    }

    let mut text = format!("# AUROC vs fixed scale (mean +/- std over {} seed(s))\n", seeds.len());
    for s in &series {
        text.push_str(&format!("ood_set = {}\n", s.ood_name));
        for p in &s.points {
            text.push_str(&format!(
                "scale {:>6} auroc = {:.6} +/- {:.6}\n",
                p.scale, p.auroc.mean, p.auroc.std
            ));
        }
        text.push_str(&format!(
            "predicted    auroc = {:.6} +/- {:.6}\n",
            s.predicted.mean, s.predicted.std
        ));
    }
    report::write_file(&out.join("scale_sweep.txt"), &text)?;
    let json = serde_json::to_string_pretty(&series).expect("series serializes");
    report::write_file(&out.join("scale_sweep.json"), &(json + "\n"))?;
    print!("{text}");
    Ok(())
}
