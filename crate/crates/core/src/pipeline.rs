//! Dataset directories and split-level evaluation shared by the command-line tools.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::index;
use rayon::prelude::*;

use crate::data::{load_sample, make_splits, save_sample, DatasetManifest, DatasetSpec, ManifestEntry, SampleRecord, Split, ZScoreStats};
use crate::encoding::CoordinateNormalizer;
use crate::error::{Result, RetoError};
use crate::metrics::{relative_l2, relative_l2_per_channel, MetricsReport};
use crate::model::Model;
use crate::rng::stream_rng;
use crate::train::PreparedSample;

pub const DEFAULT_EVAL_POINTS: usize = 10_000;

/// Channels grouped the way results are usually quoted: pressure on its own, velocity as one vector field.
pub const CHANNEL_GROUPS: [(&str, &[&str]); 2] = [("pressure", &["p"]), ("velocity", &["u", "v", "w"])];

/// Writes every sample of `spec` plus a split manifest into `dir`.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, ratios: [f64; 3], split_seed: u64) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let records = spec.generate()?;
    let ids: Vec<&str> = records.iter().map(|r| r.sample_id.as_str()).collect();
    let splits = make_splits(&ids, ratios, split_seed)?;
    let mut entries = Vec::with_capacity(records.len());
    for (id, split) in splits {
        let rec = records.iter().find(|r| r.sample_id == id).expect("split ids come from the records");
        let path = PathBuf::from(format!("{id}.rsmp"));
        save_sample(&dir.join(&path), rec)?;
        entries.push(ManifestEntry {
            sample_id: id,
            path,
            split,
        });
    }
    let manifest = DatasetManifest { entries };
    manifest.save(dir)?;
    Ok(manifest)
}

/// A dataset directory opened through its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: DatasetManifest::load(dir)?,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SampleRecord>> {
        self.manifest
            .ids(split)
            .map(|e| {
                let path = if e.path.is_absolute() { e.path.clone() } else { self.dir.join(&e.path) };
                load_sample(&path)
            })
            .collect()
    }
}

/// Coordinate normalizer and target statistics, both fitted on training samples only.
pub fn fit_statistics(train: &[SampleRecord], channels: &[String]) -> Result<(CoordinateNormalizer, ZScoreStats)> {
    if train.is_empty() {
        return Err(RetoError::EmptyDataset);
    }
    let normalizer = CoordinateNormalizer::fit_rows(train.iter().map(|r| r.coords.view()))?;
    let targets = train.iter().map(|r| r.select_channels(channels)).collect::<Result<Vec<_>>>()?;
    let zscore = ZScoreStats::fit(channels, targets.iter().map(|t| t.view()))?;
    Ok((normalizer, zscore))
}

pub fn prepare(records: &[SampleRecord], channels: &[String], normalizer: &CoordinateNormalizer, zscore: &ZScoreStats) -> Result<Vec<PreparedSample>> {
    records.iter().map(|r| PreparedSample::new(r, channels, normalizer, zscore)).collect()
}

/// Evaluation of one split: the metrics report plus grouped relative L2 scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEvaluation {
    pub report: MetricsReport,
    /// `("field", ..)` over all channels, then any complete group from [`CHANNEL_GROUPS`];
    /// each is the mean over samples of a flattened relative L2.
    pub groups: Vec<(String, f64)>,
}

impl SplitEvaluation {
    pub fn group(&self, name: &str) -> Option<f64> {
        self.groups.iter().find(|(g, _)| g == name).map(|(_, v)| *v)
    }

    pub fn groups_text(&self) -> String {
        let mut s = String::from("[relative_l2_groups]\ngroup\trel_l2\n");
        for (g, v) in &self.groups {
            s.push_str(&format!("{g}\t{v:e}\n"));
        }
        s
    }
}

struct SampleOutcome {
    id: String,
    per_channel: Vec<f64>,
    groups: Vec<f64>,
    abs_errors: Vec<f64>,
}

/// Evaluates `model` on every record, each on `min(eval_points, N)` seeded random points.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    model: &Model,
    records: &[SampleRecord],
    normalizer: &CoordinateNormalizer,
    zscore: &ZScoreStats,
    eval_points: usize,
    seed: u64,
    bins: usize,
    k: usize,
) -> Result<SplitEvaluation> {
    if records.is_empty() {
        return Err(RetoError::EmptyDataset);
    }
    if eval_points == 0 {
        return Err(RetoError::Config("evaluation needs at least one point per sample".into()));
    }
    let channels = zscore.channels.clone();
    let mut group_cols: Vec<(String, Vec<usize>)> = vec![("field".into(), (0..channels.len()).collect())];
    for (name, members) in CHANNEL_GROUPS {
        let cols: Option<Vec<usize>> = members.iter().map(|m| channels.iter().position(|c| c == m)).collect();
        if let Some(cols) = cols {
            group_cols.push((name.into(), cols));
        }
    }

    let outcomes = records
        .par_iter()
        .map(|rec| -> Result<SampleOutcome> {
            let n = rec.num_points();
            let rows = index::sample(&mut stream_rng(seed, &format!("eval/{}", rec.sample_id)), n, eval_points.min(n)).into_vec();
            let coords = normalizer.apply_rows(rec.coords.select(Axis(0), &rows).view());
            let truth = rec.select_channels(&channels)?.select(Axis(0), &rows);
            let pred_z = model.forward_normalized(coords.view(), None)?;
            let truth_z = zscore.apply(truth.view())?;
            let pred = zscore.invert(pred_z.view())?;
            let groups = group_cols
                .iter()
                .map(|(_, cols)| {
                    let p: Array2<f64> = pred.select(Axis(1), cols);
                    let t: Array2<f64> = truth.select(Axis(1), cols);
                    relative_l2(p.view(), t.view())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SampleOutcome {
                id: rec.sample_id.clone(),
                per_channel: relative_l2_per_channel(pred.view(), truth.view())?,
                groups,
                abs_errors: pred_z.iter().zip(truth_z.iter()).map(|(a, b)| (a - b).abs()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let inv = 1.0 / outcomes.len() as f64;
    let groups = group_cols
        .iter()
        .enumerate()
        .map(|(g, (name, _))| (name.clone(), outcomes.iter().map(|o| o.groups[g]).sum::<f64>() * inv))
        .collect();
    let abs: Vec<f64> = outcomes.iter().flat_map(|o| o.abs_errors.iter().copied()).collect();
    let per_sample = outcomes.into_iter().map(|o| (o.id, o.per_channel)).collect();
    Ok(SplitEvaluation {
        report: MetricsReport::new(channels, per_sample, &abs, bins, k)?,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    fn spec() -> DatasetSpec {
        DatasetSpec {
            samples: 10,
            points: 40,
            ..Default::default()
        }
    }

    #[test]
    fn written_dataset_reopens_with_its_splits() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &spec(), [0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!((m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)), (8, 1, 1));
        let ds = Dataset::open(dir.path()).unwrap();
        let train = ds.load_split(Split::Train).unwrap();
        assert_eq!(train.len(), 8);
        let original = spec().generate().unwrap();
        let same = original.iter().find(|r| r.sample_id == train[0].sample_id).unwrap();
        assert_eq!(train[0], same.quantized());
    }

    #[test]
    fn evaluation_groups_and_subsampling() {
        let recs = spec().generate().unwrap();
        let channels: Vec<String> = ["p", "u", "v", "w"].iter().map(|s| s.to_string()).collect();
        let (norm, z) = fit_statistics(&recs, &channels).unwrap();
        let cfg = ModelConfig {
            num_blocks: 1,
            num_heads: 2,
            latent_dim: 8,
            per_axis_dim: 4,
            encoder_hidden: 8,
            out_channels: 4,
            variant: Variant::Full,
            ..Default::default()
        };
        let model = Model::init(cfg, 0).unwrap();
        let a = evaluate_split(&model, &recs[..3], &norm, &z, 16, 5, 8, 1).unwrap();
        let b = evaluate_split(&model, &recs[..3], &norm, &z, 16, 5, 8, 1).unwrap();
        assert_eq!(a, b);
        let names: Vec<&str> = a.groups.iter().map(|(g, _)| g.as_str()).collect();
        assert_eq!(names, ["field", "pressure", "velocity"]);
        assert_eq!(a.report.per_sample.len(), 3);
        assert!((a.report.error_pdf.integral() - 1.0).abs() < 1e-9);
        // pressure alone is the single-channel score
        assert!((a.group("pressure").unwrap() - a.report.mean_per_channel[0]).abs() < 1e-12);
    }
}
