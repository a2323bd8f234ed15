//! Attention-entropy profiles and per-query attention rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{Context, Result};
use ndarray::Axis;
use rand::seq::index;
use reto_core::data::SampleRecord;
use reto_core::metrics::{entropy_profile, EntropyTable};
use reto_core::model::AttentionObserver;
use reto_core::rng::stream_rng;

use crate::commands::load_checkpoint;
use crate::config::RunConfig;
use crate::{exit_with, EXIT_INPUT, EXIT_RESOURCE};

pub const ENTROPY_DIR: &str = "entropy";
pub const ENTROPY_SUMMARY: &str = "entropy_summary.tsv";
pub const ATTENTION_ROW_DIR: &str = "attention_rows";

/// Rough working-set sizes in bytes: the streamed analysis, and a fully retained weight tensor.
pub fn memory_estimate(n: usize, latent: usize, ffn: usize, heads: usize, blocks: usize) -> (u64, u64) {
    let n = n as u64;
    let streamed = 8 * n * (4 * latent as u64 + ffn as u64 + 3 * (latent / heads.max(1)) as u64 + 2) + 8 * n;
    let retained = 8 * n * n * heads as u64 * blocks as u64;
    (streamed, retained)
}

fn human(bytes: u64) -> String {
    const UNITS: [&str; 5] = ["B", "KiB", "MiB", "GiB", "TiB"];
    let mut v = bytes as f64;
    let mut u = 0;
    while v >= 1024.0 && u + 1 < UNITS.len() {
        v /= 1024.0;
        u += 1;
    }
    format!("{v:.1} {}", UNITS[u])
}

/// Captures the weight row of one query point for the selected blocks and heads.
struct RowCapture {
    query: usize,
    blocks: Vec<usize>,
    heads: Option<Vec<usize>>,
    rows: Vec<((usize, usize), Vec<f64>)>,
}

impl AttentionObserver for RowCapture {
    fn wants(&self, block: usize, head: usize) -> bool {
        self.blocks.contains(&block) && self.heads.as_ref().is_none_or(|h| h.contains(&head))
    }

    fn observe(&mut self, block: usize, head: usize, row: usize, weights: &[f64]) {
        if row == self.query {
            self.rows.push(((block, head), weights.to_vec()));
        }
    }
}

fn subsample(rec: &SampleRecord, n: usize, seed: u64) -> Result<SampleRecord> {
    if rec.num_points() < n {
        return Err(exit_with(
            EXIT_INPUT,
            format!("sample `{}` has {} points, fewer than resolution {n}", rec.sample_id, rec.num_points()),
        ));
    }
    let mut rows = index::sample(&mut stream_rng(seed, &format!("analysis/{n}/{}", rec.sample_id)), rec.num_points(), n).into_vec();
    rows.sort_unstable();
    Ok(rec.select_rows(&rows))
}

pub fn analyze_attention(cfg: &RunConfig, force: bool) -> Result<()> {
    let ck = load_checkpoint(cfg, &cfg.checkpoint)?;
    let mc = ck.model.config().clone();
    for &n in &cfg.resolutions {
        if n > cfg.resolution_cap && !force {
            let (streamed, retained) = memory_estimate(n, mc.latent_dim, mc.ffn_hidden(), mc.num_heads, mc.num_blocks);
            return Err(exit_with(
                EXIT_RESOURCE,
                format!(
                    "resolution {n} exceeds the cap of {}: streamed analysis needs about {} (retaining every weight matrix would need {}); pass --force to run anyway",
                    cfg.resolution_cap,
                    human(streamed),
                    human(retained)
                ),
            ));
        }
    }
    let ds = reto_core::pipeline::Dataset::open(&cfg.data_dir)
        .map_err(|e| exit_with(EXIT_INPUT, format!("cannot open dataset {}: {e}", cfg.data_dir.display())))?;
    let split = cfg.eval_split();
    let mut records = ds.load_split(split).with_context(|| format!("loading {split} split"))?;
    if cfg.analysis_samples > 0 {
        records.truncate(cfg.analysis_samples);
    }
    if records.is_empty() {
        return Err(exit_with(EXIT_INPUT, format!("the {split} split is empty")));
    }
    let selector = cfg.entropy_selector();
    let entropy_dir = cfg.out_dir.join(ENTROPY_DIR);
    std::fs::create_dir_all(&entropy_dir)?;
    cfg.echo(&cfg.out_dir)?;

    let mut summary = String::from("table\tblock\thead\tresolution\tqueries\tmedian\tpeak\n");
    for &n in &cfg.resolutions {
        let mut pooled: BTreeMap<(usize, Option<usize>), EntropyTable> = BTreeMap::new();
        for rec in &records {
            let sub = subsample(rec, n, cfg.seed)?;
            for t in entropy_profile(&ck.model, sub.coords.view(), &ck.normalizer, &selector)? {
                match pooled.get_mut(&(t.block, t.head)) {
                    Some(acc) => acc.values.extend(t.values),
                    None => {
                        pooled.insert((t.block, t.head), t);
                    }
                }
            }
        }
        for t in pooled.values() {
            let hist = t.histogram(cfg.bins)?;
            std::fs::write(entropy_dir.join(format!("{}.csv", t.label())), hist.to_csv())?;
            let head = t.head.map_or("mean".to_string(), |h| h.to_string());
            let _ = writeln!(
                summary,
                "{}\t{}\t{head}\t{n}\t{}\t{:e}\t{:e}",
                t.label(),
                t.block,
                t.values.len(),
                t.median(),
                hist.peak()
            );
            println!("{}: median normalized entropy {:.4}, peak {:.4}", t.label(), t.median(), hist.peak());
        }

        if let Some(q) = cfg.query_point() {
            export_rows(cfg, &ck, &records[0], n, q)?;
        }
    }
    std::fs::write(cfg.out_dir.join(ENTROPY_SUMMARY), summary)?;
    Ok(())
}

fn export_rows(cfg: &RunConfig, ck: &reto_core::model::checkpoint::Checkpoint, rec: &SampleRecord, n: usize, q: usize) -> Result<()> {
    if q >= n {
        return Err(exit_with(EXIT_INPUT, format!("query point {q} is outside resolution {n}")));
    }
    let sub = subsample(rec, n, cfg.seed)?;
    let num_blocks = ck.model.config().num_blocks;
    let mut capture = RowCapture {
        query: q,
        blocks: if cfg.blocks.is_empty() { vec![num_blocks - 1] } else { cfg.blocks.clone() },
        heads: (!cfg.heads.is_empty()).then(|| cfg.heads.clone()),
        rows: Vec::new(),
    };
    let normalized = ck.normalizer.apply_rows(sub.coords.view());
    ck.model.forward_normalized(normalized.view(), Some(&mut capture))?;
    let dir = cfg.out_dir.join(ATTENTION_ROW_DIR);
    std::fs::create_dir_all(&dir)?;
    let qc = sub.coords.index_axis(Axis(0), q);
    for ((b, h), weights) in capture.rows {
        let mut csv = format!("# sample {} query {q} at ({}, {}, {})\nx,y,z,weight\n", sub.sample_id, qc[0], qc[1], qc[2]);
        for (p, w) in sub.coords.rows().into_iter().zip(&weights) {
            let _ = writeln!(csv, "{},{},{},{w:e}", p[0], p[1], p[2]);
        }
        std::fs::write(dir.join(format!("{}_q{q}_block{b}_head{h}_n{n}.csv", sub.sample_id)), csv)?;
    }
    Ok(())
}
