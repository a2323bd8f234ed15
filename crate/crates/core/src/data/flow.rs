//! Inviscid potential flow past a sphere, used as a closed-form synthetic data source.
//!
//! With the free stream `U` along +x and a sphere of radius `a` at the origin, the
//! velocity potential is `φ = U x (1 + a³ / (2 r³))`, so
//! `u = U e_x + (U a³ / 2) (e_x / r³ - 3 x r / r⁵)` and `Cp = 1 - |u|² / U²`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;

use super::SampleRecord;
use crate::error::{Result, RetoError};
use crate::rng::{stream_rng, sub_seed};

pub const FLOW_CHANNELS: [&str; 4] = ["p", "u", "v", "w"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingRegion {
    /// Points on the sphere surface `r = a`.
    Surface,
    /// Points uniform in volume over the shell `a < r <= outer_radius`.
    Shell { outer_radius: f64 },
}

/// Uniform stream of speed `free_stream` past a sphere of radius `radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereFlow {
    pub radius: f64,
    pub free_stream: f64,
}

impl SphereFlow {
    pub fn new(radius: f64, free_stream: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(RetoError::Parameter(format!("sphere radius must be positive, got {radius}")));
        }
        if !(free_stream > 0.0) || !free_stream.is_finite() {
            return Err(RetoError::Parameter(format!("free-stream speed must be positive, got {free_stream}")));
        }
        Ok(Self { radius, free_stream })
    }

    pub fn velocity(&self, p: [f64; 3]) -> [f64; 3] {
        let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        let r = r2.sqrt();
        let r3 = r2 * r;
        let r5 = r3 * r2;
        let k = 0.5 * self.free_stream * self.radius.powi(3);
        let base = [self.free_stream + k / r3, 0.0, 0.0];
        let c = 3.0 * k * p[0] / r5;
        [base[0] - c * p[0], base[1] - c * p[1], base[2] - c * p[2]]
    }

    /// Bernoulli pressure coefficient for a local velocity.
    pub fn pressure_coefficient(&self, u: [f64; 3]) -> f64 {
        1.0 - (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]) / (self.free_stream * self.free_stream)
    }
}

fn unit_direction<R: Rng>(rng: &mut R) -> [f64; 3] {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).max(0.0).sqrt();
    [s * phi.cos(), s * phi.sin(), z]
}

/// Samples `points` locations in `region` and evaluates `(Cp, u, v, w)` at each.
pub fn gen_potential_flow_sphere(
    sample_id: &str,
    radius: f64,
    free_stream: f64,
    points: usize,
    region: SamplingRegion,
    seed: u64,
) -> Result<SampleRecord> {
    let flow = SphereFlow::new(radius, free_stream)?;
    if points == 0 {
        return Err(RetoError::Parameter("point count must be at least 1".into()));
    }
    if let SamplingRegion::Shell { outer_radius } = region {
        if !(outer_radius > radius) || !outer_radius.is_finite() {
            return Err(RetoError::Parameter(format!(
                "outer radius {outer_radius} must exceed sphere radius {radius}"
            )));
        }
    }
    let mut rng = stream_rng(seed, "points");
    let mut coords = Array2::zeros((points, 3));
    let mut fields = Array2::zeros((points, 4));
    for i in 0..points {
        let dir = unit_direction(&mut rng);
        let r = match region {
            SamplingRegion::Surface => radius,
            SamplingRegion::Shell { outer_radius } => {
                let (a3, b3) = (radius.powi(3), outer_radius.powi(3));
                // open at r = a: the draw is in (0, 1]
                let t: f64 = 1.0 - rng.random::<f64>();
                (a3 + t * (b3 - a3)).cbrt()
            }
        };
        let p = [r * dir[0], r * dir[1], r * dir[2]];
        let u = flow.velocity(p);
        coords.row_mut(i).assign(&ndarray::arr1(&p));
        fields[[i, 0]] = flow.pressure_coefficient(u);
        fields[[i, 1]] = u[0];
        fields[[i, 2]] = u[1];
        fields[[i, 3]] = u[2];
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".into(), "potential_flow_sphere".into());
    metadata.insert("radius".into(), format!("{radius:?}"));
    metadata.insert("free_stream".into(), format!("{free_stream:?}"));
    metadata.insert(
        "region".into(),
        match region {
            SamplingRegion::Surface => "surface".into(),
            SamplingRegion::Shell { outer_radius } => format!("shell:{outer_radius:?}"),
        },
    );
    SampleRecord::new(
        sample_id,
        coords,
        fields,
        FLOW_CHANNELS.iter().map(|s| s.to_string()).collect(),
        metadata,
    )
}

/// A family of sphere-flow samples with seeded radii.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub samples: usize,
    pub points: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub free_stream: f64,
    pub region: SamplingRegion,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            samples: 100,
            points: 512,
            radius_min: 0.5,
            radius_max: 1.0,
            free_stream: 1.0,
            region: SamplingRegion::Shell { outer_radius: 2.0 },
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn sample_id(i: usize) -> String {
        format!("sample_{i:04}")
    }

    pub fn generate(&self) -> Result<Vec<SampleRecord>> {
        if self.samples == 0 {
            return Err(RetoError::EmptyDataset);
        }
        if !(self.radius_min > 0.0) || self.radius_max < self.radius_min {
            return Err(RetoError::Parameter(format!(
                "invalid radius range [{}, {}]",
                self.radius_min, self.radius_max
            )));
        }
        let mut radii = stream_rng(self.seed, "radii");
        (0..self.samples)
            .map(|i| {
                let a = if self.radius_max > self.radius_min {
                    radii.random_range(self.radius_min..=self.radius_max)
                } else {
                    self.radius_min
                };
                let seed = sub_seed(self.seed, &format!("sample/{i}"));
                gen_potential_flow_sphere(&Self::sample_id(i), a, self.free_stream, self.points, self.region, seed)
            })
            .collect()
    }
}
