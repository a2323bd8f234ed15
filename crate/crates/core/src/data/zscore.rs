use ndarray::{Array2, ArrayView2};

use crate::error::{Result, RetoError};

/// Per-channel mean and population standard deviation of the training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScoreStats {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScoreStats {
    /// Fits over every row of the given field matrices (columns ordered as `channels`).
    pub fn fit<'a, I>(channels: &[String], fields: I) -> Result<Self>
    where
        I: IntoIterator<Item = ArrayView2<'a, f64>> + Clone,
    {
        let c = channels.len();
        let mut count = 0usize;
        let mut sum = vec![0.0; c];
        for f in fields.clone() {
            if f.ncols() != c {
                return Err(RetoError::Shape(format!("fields have {} columns, expected {c}", f.ncols())));
            }
            for row in f.rows() {
                for (s, v) in sum.iter_mut().zip(row.iter()) {
                    *s += v;
                }
            }
            count += f.nrows();
        }
        if count == 0 {
            return Err(RetoError::EmptyDataset);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; c];
        for f in fields {
            for row in f.rows() {
                for ((s, v), m) in sq.iter_mut().zip(row.iter()).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        for (name, s) in channels.iter().zip(&std) {
            if !(*s >= 1e-12) {
                return Err(RetoError::DegenerateChannel(name.clone()));
            }
        }
        Ok(Self {
            channels: channels.to_vec(),
            mean,
            std,
        })
    }

    fn check(&self, fields: &ArrayView2<f64>) -> Result<()> {
        if fields.ncols() != self.channels.len() {
            return Err(RetoError::Shape(format!(
                "fields have {} columns, statistics cover {}",
                fields.ncols(),
                self.channels.len()
            )));
        }
        Ok(())
    }

    /// `(u - μ) / σ` per channel.
    pub fn apply(&self, fields: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&fields)?;
        let mut out = fields.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }

    /// `û σ + μ` per channel.
    pub fn invert(&self, fields: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&fields)?;
        let mut out = fields.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        Ok(out)
    }
}
