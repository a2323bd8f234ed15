//! Dataset generation, training, evaluation, prediction and the ablation sweep.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use reto_core::data::{load_sample, save_sample, SampleRecord, Split, ZScoreStats};
use reto_core::encoding::CoordinateNormalizer;
use reto_core::model::checkpoint::Checkpoint;
use reto_core::model::{Model, ModelConfig, Variant};
use reto_core::pipeline::{evaluate_split, fit_statistics, prepare, write_dataset, Dataset, SplitEvaluation};
use reto_core::rng::sub_seed;
use reto_core::train::{fit, FitOutcome, PreparedSample, LOG_HEADER};

use crate::config::RunConfig;
use crate::{exit_with, EXIT_INPUT, EXIT_MISMATCH};

pub const LOG_FILE: &str = "train.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const ABLATION_TABLE: &str = "ablation.tsv";

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let manifest = write_dataset(&cfg.data_dir, &cfg.dataset_spec()?, cfg.split_ratios(), cfg.seed)
        .with_context(|| format!("writing dataset to {}", cfg.data_dir.display()))
        .map_err(|e| exit_with(EXIT_INPUT, format!("{e:#}")))?;
    cfg.echo(&cfg.data_dir)?;
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        manifest.entries.len(),
        cfg.data_dir.display(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test)
    );
    Ok(())
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::open(&cfg.data_dir).map_err(|e| exit_with(EXIT_INPUT, format!("cannot open dataset {}: {e}", cfg.data_dir.display())))
}

fn load_split(ds: &Dataset, split: Split) -> Result<Vec<SampleRecord>> {
    ds.load_split(split).with_context(|| format!("loading {split} split of {}", ds.dir.display()))
}

/// Loads a checkpoint and insists it matches the configured architecture and channels.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path).map_err(|e| exit_with(EXIT_INPUT, format!("cannot read checkpoint {}: {e}", path.display())))?;
    let expected = cfg.model_config()?;
    if ck.model.config() != &expected {
        return Err(exit_with(
            EXIT_MISMATCH,
            format!(
                "checkpoint {} does not match the configuration\n  checkpoint: {:?}\n  configured: {:?}",
                path.display(),
                ck.model.config(),
                expected
            ),
        ));
    }
    if ck.zscore.channels != cfg.channels {
        return Err(exit_with(
            EXIT_MISMATCH,
            format!("checkpoint channels {:?} differ from configured {:?}", ck.zscore.channels, cfg.channels),
        ));
    }
    Ok(ck)
}

struct Stats<'a> {
    normalizer: &'a CoordinateNormalizer,
    zscore: &'a ZScoreStats,
}

/// Runs `fit`, streaming the log and the best checkpoint into `dir`.
#[allow(clippy::too_many_arguments)]
fn train_into(
    dir: &Path,
    model: Model,
    start_epoch: u64,
    cfg: &RunConfig,
    train: &[PreparedSample],
    val: &[PreparedSample],
    stats: Stats<'_>,
    label: &str,
) -> Result<FitOutcome> {
    std::fs::create_dir_all(dir)?;
    let log_path = dir.join(LOG_FILE);
    let mut log = if start_epoch > 0 && log_path.exists() {
        BufWriter::new(OpenOptions::new().append(true).open(&log_path)?)
    } else {
        let mut w = BufWriter::new(File::create(&log_path)?);
        writeln!(w, "{LOG_HEADER}")?;
        w
    };
    let mut tc = cfg.train_config();
    tc.epochs = cfg.epochs - start_epoch;
    let best_path = dir.join(BEST_CHECKPOINT);
    let outcome = fit(model, train, val, stats.zscore, &tc, start_epoch, |rec, improved| {
        writeln!(log, "{}", rec.to_line())?;
        log.flush()?;
        println!(
            "{label} epoch {}/{} lr {:.3e} train_mse {:.4e} val_rel_l2 {:.4e}",
            rec.epoch, cfg.epochs, rec.lr, rec.train_mse, rec.val_score
        );
        if let Some(model) = improved {
            Checkpoint {
                model: model.clone(),
                normalizer: *stats.normalizer,
                zscore: stats.zscore.clone(),
                epoch: rec.epoch,
            }
            .save(&best_path)?;
        }
        Ok(())
    })?;
    if outcome.aborted.is_none() {
        Checkpoint {
            model: outcome.last.clone(),
            normalizer: *stats.normalizer,
            zscore: stats.zscore.clone(),
            epoch: start_epoch + outcome.log.len() as u64,
        }
        .save(&dir.join(LAST_CHECKPOINT))?;
    }
    Ok(outcome)
}

fn init_model(cfg: &RunConfig, config: ModelConfig) -> Result<Model> {
    Ok(Model::init(config, sub_seed(cfg.seed, "init"))?)
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let ds = open_dataset(cfg)?;
    let train_recs = load_split(&ds, Split::Train)?;
    let val_recs = load_split(&ds, Split::Val)?;
    let (model, normalizer, zscore, start) = match resume {
        Some(path) => {
            let ck = load_checkpoint(cfg, path)?;
            (ck.model, ck.normalizer, ck.zscore, ck.epoch)
        }
        None => {
            let (n, z) = fit_statistics(&train_recs, &cfg.channels)?;
            (init_model(cfg, cfg.model_config()?)?, n, z, 0)
        }
    };
    cfg.echo(&cfg.out_dir)?;
    if start >= cfg.epochs {
        println!("checkpoint already has {start} of {} epochs; nothing to do", cfg.epochs);
        return Ok(());
    }
    let train = prepare(&train_recs, &cfg.channels, &normalizer, &zscore)?;
    let val = prepare(&val_recs, &cfg.channels, &normalizer, &zscore)?;
    let stats = Stats {
        normalizer: &normalizer,
        zscore: &zscore,
    };
    let outcome = train_into(&cfg.out_dir, model, start, cfg, &train, &val, stats, &cfg.variant)?;
    if let Some(e) = outcome.aborted {
        return Err(anyhow!(e).context(format!(
            "training aborted; best checkpoint (epoch {}) kept in {}",
            outcome.best_epoch,
            cfg.out_dir.display()
        )));
    }
    println!(
        "best epoch {} val_rel_l2 {:.4e}; checkpoints in {}",
        outcome.best_epoch,
        outcome.best_score,
        cfg.out_dir.display()
    );
    Ok(())
}

fn evaluate(cfg: &RunConfig, ck: &Checkpoint, records: &[SampleRecord]) -> Result<SplitEvaluation> {
    Ok(evaluate_split(
        &ck.model,
        records,
        &ck.normalizer,
        &ck.zscore,
        cfg.eval_points,
        cfg.seed,
        cfg.bins,
        cfg.top_k,
    )?)
}

/// File names of the tables `eval` writes for a split.
pub fn eval_files(split: Split) -> [String; 3] {
    [
        format!("metrics_{split}.txt"),
        format!("per_sample_{split}.csv"),
        format!("error_pdf_{split}.csv"),
    ]
}

pub fn eval(cfg: &RunConfig, per_channel: bool) -> Result<()> {
    let ck = load_checkpoint(cfg, &cfg.checkpoint)?;
    let ds = open_dataset(cfg)?;
    let split = cfg.eval_split();
    let records = load_split(&ds, split)?;
    let ev = evaluate(cfg, &ck, &records)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.echo(&cfg.out_dir)?;
    let [metrics, per_sample, pdf] = eval_files(split);
    std::fs::write(cfg.out_dir.join(metrics), format!("{}\n{}", ev.groups_text(), ev.report.to_text()))?;
    std::fs::write(cfg.out_dir.join(per_sample), ev.report.per_sample_csv())?;
    std::fs::write(cfg.out_dir.join(pdf), ev.report.error_pdf.to_csv())?;

    println!("{split} split, {} samples, checkpoint epoch {}", records.len(), ck.epoch);
    for (g, v) in &ev.groups {
        println!("  {g:<10} rel_l2 {v:.4e}");
    }
    if per_channel {
        for (c, v) in ev.report.channels.iter().zip(&ev.report.mean_per_channel) {
            println!("  channel {c:<4} rel_l2 {v:.4e}");
        }
    }
    let d = &ev.report.distribution;
    println!(
        "  per-sample quartiles {:.4e} / {:.4e} / {:.4e}; worst {}",
        d.q1,
        d.median,
        d.q3,
        d.worst.first().map(|(id, _)| id.as_str()).unwrap_or("-")
    );
    Ok(())
}

pub fn predict(cfg: &RunConfig, input: &Path, output: &Path) -> Result<()> {
    let ck = load_checkpoint(cfg, &cfg.checkpoint)?;
    let rec = load_sample(input).map_err(|e| exit_with(EXIT_INPUT, format!("cannot read sample {}: {e}", input.display())))?;
    let out = ck.model.forward(rec.coords.view(), &ck.normalizer, false)?;
    let fields = ck.zscore.invert(out.prediction.view())?;
    let mut metadata = rec.metadata.clone();
    metadata.insert("prediction_epoch".into(), ck.epoch.to_string());
    let pred = SampleRecord::new(rec.sample_id.clone(), rec.coords.clone(), fields, ck.zscore.channels.clone(), metadata)?;
    save_sample(output, &pred)?;
    println!("wrote {} predicted points x {} channels to {}", pred.num_points(), pred.channels.len(), output.display());
    Ok(())
}

/// Directory holding one variant's outputs inside an ablation run.
pub fn variant_dir(out_dir: &Path, v: Variant) -> PathBuf {
    out_dir.join(v.as_str())
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let ds = open_dataset(cfg)?;
    let train_recs = load_split(&ds, Split::Train)?;
    let val_recs = load_split(&ds, Split::Val)?;
    let test_recs = load_split(&ds, Split::Test)?;
    let (normalizer, zscore) = fit_statistics(&train_recs, &cfg.channels)?;
    let train = prepare(&train_recs, &cfg.channels, &normalizer, &zscore)?;
    let val = prepare(&val_recs, &cfg.channels, &normalizer, &zscore)?;
    cfg.echo(&cfg.out_dir)?;

    let mut table = String::from("variant\tlabel\tstatus\tbest_epoch\tfield_rel_l2\tpressure_rel_l2\tvelocity_rel_l2\n");
    let mut failures = 0;
    for v in Variant::ALL {
        let dir = variant_dir(&cfg.out_dir, v);
        let row = (|| -> Result<(u64, SplitEvaluation)> {
            let mut vcfg = cfg.clone();
            vcfg.variant = v.as_str().into();
            let model = init_model(&vcfg, vcfg.model_config()?)?;
            let stats = Stats {
                normalizer: &normalizer,
                zscore: &zscore,
            };
            let outcome = train_into(&dir, model, 0, &vcfg, &train, &val, stats, v.as_str())?;
            if let Some(e) = outcome.aborted {
                return Err(anyhow!(e));
            }
            let ck = Checkpoint {
                model: outcome.best,
                normalizer,
                zscore: zscore.clone(),
                epoch: outcome.best_epoch,
            };
            Ok((outcome.best_epoch, evaluate(&vcfg, &ck, &test_recs)?))
        })();
        match row {
            Ok((best_epoch, ev)) => {
                let g = |name: &str| ev.group(name).map_or("-".to_string(), |x| format!("{x:e}"));
                let _ = writeln!(
                    table,
                    "{}\t{}\tok\t{best_epoch}\t{}\t{}\t{}",
                    v.as_str(),
                    v.table_label(),
                    g("field"),
                    g("pressure"),
                    g("velocity")
                );
            }
            Err(e) => {
                failures += 1;
                log::error!("variant {v} failed: {e:#}");
                let _ = writeln!(table, "{}\t{}\tfailed: {}\t-\t-\t-\t-", v.as_str(), v.table_label(), format!("{e:#}").replace(['\t', '\n'], " "));
            }
        }
    }
    std::fs::write(cfg.out_dir.join(ABLATION_TABLE), &table)?;
    print!("{table}");
    if failures == Variant::ALL.len() {
        return Err(anyhow!("every variant failed"));
    }
    Ok(())
}
