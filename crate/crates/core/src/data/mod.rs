//! Samples, synthetic flow fields, target normalization, files and splits.

mod flow;
mod manifest;
mod rsmp;
mod zscore;

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::index;

pub use flow::{gen_potential_flow_sphere, DatasetSpec, SamplingRegion, SphereFlow, FLOW_CHANNELS};
pub use manifest::{make_splits, DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};
pub use rsmp::{decode_sample, encode_sample, load_sample, save_sample, RSMP_VERSION};
pub use zscore::ZScoreStats;

use crate::error::{Result, RetoError};
use crate::rng::stream_rng;

/// One geometry/field pair: `N x 3` coordinates and `N x C` named channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub coords: Array2<f64>,
    pub fields: Array2<f64>,
    pub channels: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

impl SampleRecord {
    pub fn new(
        sample_id: impl Into<String>,
        coords: Array2<f64>,
        fields: Array2<f64>,
        channels: Vec<String>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let rec = Self {
            sample_id: sample_id.into(),
            coords,
            fields,
            channels,
            metadata,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.nrows();
        if n == 0 {
            return Err(RetoError::EmptyInput(format!("sample `{}` has no points", self.sample_id)));
        }
        if self.coords.ncols() != 3 {
            return Err(RetoError::Shape(format!("coordinates are N x {}", self.coords.ncols())));
        }
        if self.fields.dim() != (n, self.channels.len()) {
            return Err(RetoError::Shape(format!(
                "fields {:?} do not match {n} points x {} channels",
                self.fields.dim(),
                self.channels.len()
            )));
        }
        for (i, c) in self.channels.iter().enumerate() {
            if self.channels[..i].contains(c) {
                return Err(RetoError::Parameter(format!("duplicate channel `{c}`")));
            }
        }
        if self.coords.iter().chain(self.fields.iter()).any(|v| !v.is_finite()) {
            return Err(RetoError::NonFiniteInput(format!("sample `{}`", self.sample_id)));
        }
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.coords.nrows()
    }

    /// Columns for the named channels, in the requested order.
    pub fn select_channels<S: AsRef<str>>(&self, names: &[S]) -> Result<Array2<f64>> {
        let idx = names
            .iter()
            .map(|name| {
                self.channels
                    .iter()
                    .position(|c| c == name.as_ref())
                    .ok_or_else(|| RetoError::Config(format!("sample `{}` has no channel `{}`", self.sample_id, name.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.fields.select(Axis(1), &idx))
    }

    /// The listed rows, coordinates and fields kept aligned.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            sample_id: self.sample_id.clone(),
            coords: self.coords.select(Axis(0), rows),
            fields: self.fields.select(Axis(0), rows),
            channels: self.channels.clone(),
            metadata: self.metadata.clone(),
        }
    }

    /// Rounds every value to the nearest 32-bit float, as stored on disk.
    pub fn quantized(&self) -> Self {
        let q = |a: &Array2<f64>| a.mapv(|v| v as f32 as f64);
        Self {
            coords: q(&self.coords),
            fields: q(&self.fields),
            ..self.clone()
        }
    }
}

/// `n` distinct rows drawn without replacement.
pub fn random_subsample(sample: &SampleRecord, n: usize, seed: u64) -> Result<SampleRecord> {
    let total = sample.num_points();
    if n == 0 || n > total {
        return Err(RetoError::Bounds(format!(
            "cannot draw {n} of {total} points from `{}`",
            sample.sample_id
        )));
    }
    let mut rng = stream_rng(seed, "subsample");
    let rows = index::sample(&mut rng, total, n).into_vec();
    Ok(sample.select_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rec(n: usize) -> SampleRecord {
        let coords = Array2::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64);
        let fields = Array2::from_shape_fn((n, 2), |(i, j)| (i * 10 + j) as f64);
        SampleRecord::new("s", coords, fields, vec!["p".into(), "u".into()], BTreeMap::new()).unwrap()
    }

    #[test]
    fn validation() {
        let bad = SampleRecord::new(
            "x",
            array![[0.0, 0.0, 0.0]],
            array![[1.0, 2.0]],
            vec!["p".into(), "p".into()],
            BTreeMap::new(),
        );
        assert!(bad.is_err());
        let bad = SampleRecord::new("x", Array2::zeros((0, 3)), Array2::zeros((0, 0)), vec![], BTreeMap::new());
        assert!(matches!(bad, Err(RetoError::EmptyInput(_))));
        let bad = SampleRecord::new("x", array![[f64::NAN, 0.0, 0.0]], Array2::zeros((1, 0)), vec![], BTreeMap::new());
        assert!(matches!(bad, Err(RetoError::NonFiniteInput(_))));
    }

    #[test]
    fn subsample_full_is_permutation() {
        let r = rec(10);
        let s = random_subsample(&r, 10, 1).unwrap();
        let mut ids: Vec<i64> = s.coords.column(0).iter().map(|v| (*v / 3.0) as i64).collect();
        ids.sort();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        // rows stay aligned
        for i in 0..10 {
            let row = (s.coords[[i, 0]] / 3.0) as usize;
            assert_eq!(s.fields[[i, 0]], (row * 10) as f64);
        }
    }

    #[test]
    fn subsample_is_seeded_and_bounded() {
        let r = rec(50);
        assert_eq!(random_subsample(&r, 7, 3).unwrap(), random_subsample(&r, 7, 3).unwrap());
        assert_ne!(random_subsample(&r, 7, 3).unwrap(), random_subsample(&r, 7, 4).unwrap());
        assert!(matches!(random_subsample(&r, 51, 0), Err(RetoError::Bounds(_))));
    }

    #[test]
    fn single_draw_frequencies_are_uniform() {
        // 10^4 draws of one index from 10: each count ~ Binomial(10^4, 0.1), sd = 30.
        let r = rec(10);
        let mut counts = [0usize; 10];
        for seed in 0..10_000u64 {
            let s = random_subsample(&r, 1, seed).unwrap();
            counts[(s.coords[[0, 0]] / 3.0) as usize] += 1;
        }
        let sd = (10_000.0f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - 1000.0).abs() < 4.0 * sd, "{counts:?}");
        }
    }
}
