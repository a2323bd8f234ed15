//! Spectral sin/cos encoding of 3D coordinates and the dataset-level coordinate normalizer.
//!
//! Each coordinate axis is expanded over a geometric frequency ladder
//! `ω_n = λ^(-2n/m)`, `n = 0..m/2`, into `[sin(x ω_0) .. sin(x ω_{m/2-1}), cos(x ω_0) ..]`.
//! The three per-axis blocks are concatenated into a `3m` feature vector.

use ndarray::{Array2, ArrayView2};

use crate::error::{Result, RetoError};

/// Geometric-progression frequencies of the spectral encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    wavelength_base: f64,
    per_axis_dim: usize,
    freqs: Vec<f64>,
}

impl FrequencyTable {
    /// Builds `m/2` frequencies `λ^(-2n/m)` for an even per-axis dimension `m`.
    pub fn new(per_axis_dim: usize, wavelength_base: f64) -> Result<Self> {
        if per_axis_dim < 2 || !per_axis_dim.is_multiple_of(2) {
            return Err(RetoError::InvalidDimension(format!(
                "per-axis dimension must be even and at least 2, got {per_axis_dim}"
            )));
        }
        if !(wavelength_base > 1.0) || !wavelength_base.is_finite() {
            return Err(RetoError::InvalidBase(wavelength_base));
        }
        let m = per_axis_dim as f64;
        let freqs = (0..per_axis_dim / 2)
            .map(|n| wavelength_base.powf(-2.0 * n as f64 / m))
            .collect();
        Ok(Self {
            wavelength_base,
            per_axis_dim,
            freqs,
        })
    }

    pub fn wavelength_base(&self) -> f64 {
        self.wavelength_base
    }

    pub fn per_axis_dim(&self) -> usize {
        self.per_axis_dim
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// Length of a full point encoding, `3m`.
    pub fn encoding_dim(&self) -> usize {
        3 * self.per_axis_dim
    }

    /// Encodes one coordinate as `[sin half | cos half]`.
    pub fn encode_axis(&self, x: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.per_axis_dim];
        self.encode_axis_into(x, &mut out)?;
        Ok(out)
    }

    fn encode_axis_into(&self, x: f64, out: &mut [f64]) -> Result<()> {
        if !x.is_finite() {
            return Err(RetoError::NonFiniteInput(format!("coordinate {x}")));
        }
        let half = self.freqs.len();
        for (n, w) in self.freqs.iter().enumerate() {
            let (s, c) = (x * w).sin_cos();
            out[n] = s;
            out[half + n] = c;
        }
        Ok(())
    }

    /// Encodes a point as `[γ(x), γ(y), γ(z)]`.
    pub fn encode_point(&self, p: [f64; 3]) -> Result<SpectralEncoding> {
        let m = self.per_axis_dim;
        let mut values = vec![0.0; 3 * m];
        for (axis, chunk) in values.chunks_mut(m).enumerate() {
            self.encode_axis_into(p[axis], chunk)?;
        }
        Ok(SpectralEncoding { values })
    }

    /// Encodes every row of an `N x 3` coordinate matrix into an `N x 3m` feature matrix.
    pub fn encode_points(&self, coords: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_coords(coords)?;
        let m = self.per_axis_dim;
        let mut out = Array2::zeros((coords.nrows(), 3 * m));
        for (row, mut enc) in coords.rows().into_iter().zip(out.rows_mut()) {
            let enc = enc.as_slice_mut().expect("standard layout");
            for (axis, chunk) in enc.chunks_mut(m).enumerate() {
                self.encode_axis_into(row[axis], chunk)?;
            }
        }
        Ok(out)
    }
}

/// The `3m` spectral features of one point.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEncoding {
    pub values: Vec<f64>,
}

/// Isotropic bounding-cube normalizer mapping training coordinates into `[-1, 1]^3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateNormalizer {
    pub center: [f64; 3],
    pub scale: f64,
}

impl CoordinateNormalizer {
    /// Fits center = bounding-box midpoint and scale = 2 / largest box edge.
    pub fn fit<I>(points: I) -> Result<Self>
    where
        I: IntoIterator<Item = [f64; 3]>,
    {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut count = 0usize;
        for p in points {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(RetoError::NonFiniteInput(format!("point {p:?}")));
            }
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
            count += 1;
        }
        if count == 0 {
            return Err(RetoError::EmptyDataset);
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        if !(extent > 0.0) {
            return Err(RetoError::DegenerateGeometry(
                "bounding box has zero extent".into(),
            ));
        }
        let center = [
            0.5 * (lo[0] + hi[0]),
            0.5 * (lo[1] + hi[1]),
            0.5 * (lo[2] + hi[2]),
        ];
        Ok(Self {
            center,
            scale: 2.0 / extent,
        })
    }

    /// Fits over every row of one or more `N x 3` matrices.
    pub fn fit_rows<'a, I>(clouds: I) -> Result<Self>
    where
        I: IntoIterator<Item = ArrayView2<'a, f64>>,
    {
        Self::fit(
            clouds
                .into_iter()
                .flat_map(|c| c.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect::<Vec<_>>()),
        )
    }

    pub fn apply(&self, c: [f64; 3]) -> [f64; 3] {
        [
            (c[0] - self.center[0]) * self.scale,
            (c[1] - self.center[1]) * self.scale,
            (c[2] - self.center[2]) * self.scale,
        ]
    }

    pub fn invert(&self, c: [f64; 3]) -> [f64; 3] {
        [
            c[0] / self.scale + self.center[0],
            c[1] / self.scale + self.center[1],
            c[2] / self.scale + self.center[2],
        ]
    }

    pub fn apply_rows(&self, coords: ArrayView2<f64>) -> Array2<f64> {
        let mut out = coords.to_owned();
        for mut row in out.rows_mut() {
            for a in 0..3 {
                row[a] = (row[a] - self.center[a]) * self.scale;
            }
        }
        out
    }
}

pub(crate) fn check_coords(coords: ArrayView2<f64>) -> Result<()> {
    if coords.ncols() != 3 {
        return Err(RetoError::Shape(format!(
            "coordinates must be N x 3, got N x {}",
            coords.ncols()
        )));
    }
    if let Some(bad) = coords.iter().find(|v| !v.is_finite()) {
        return Err(RetoError::NonFiniteInput(format!("coordinate {bad}")));
    }
    Ok(())
}
