//! 3D rotary positional embedding.
//!
//! A head vector of width `d_h` is read as `d_h/2` complex pairs `(v[2n], v[2n+1])`.
//! Pair `n` is rotated by `θ_n(x) = Σ_p x_p ω_{n,p}`. Pairs are partitioned into
//! contiguous per-axis groups (x first, then y, then z); within a group of `p_a` pairs
//! the frequencies are `base^(-k/p_a)`, so every phase is a single-axis linear function
//! of the coordinate and `θ_n(x_i) - θ_n(x_j)` depends only on `x_i - x_j`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use num_complex::Complex64;

use crate::encoding::check_coords;
use crate::error::{Result, RetoError};

/// Axis allocation and frequencies of the rotary transform.
#[derive(Debug, Clone, PartialEq)]
pub struct RotaryConfig {
    head_dim: usize,
    pairs_per_axis: [usize; 3],
    rope_base: f64,
    axis_freqs: [Vec<f64>; 3],
}

impl RotaryConfig {
    /// Splits `d_h/2` pairs as evenly as possible over x, y, z (remainders go to x then y).
    pub fn new(head_dim: usize, rope_base: f64) -> Result<Self> {
        if head_dim < 2 || !head_dim.is_multiple_of(2) {
            return Err(RetoError::InvalidDimension(format!(
                "head dimension must be even and at least 2, got {head_dim}"
            )));
        }
        let pairs = head_dim / 2;
        let mut alloc = [pairs / 3; 3];
        for slot in alloc.iter_mut().take(pairs % 3) {
            *slot += 1;
        }
        Self::with_allocation(head_dim, alloc, rope_base)
    }

    /// Explicit allocation; pairs beyond `Σ p_a` stay unrotated.
    pub fn with_allocation(head_dim: usize, pairs_per_axis: [usize; 3], rope_base: f64) -> Result<Self> {
        if head_dim < 2 || !head_dim.is_multiple_of(2) {
            return Err(RetoError::InvalidDimension(format!(
                "head dimension must be even and at least 2, got {head_dim}"
            )));
        }
        if pairs_per_axis.iter().sum::<usize>() > head_dim / 2 {
            return Err(RetoError::InvalidDimension(format!(
                "{pairs_per_axis:?} pairs exceed the {} available",
                head_dim / 2
            )));
        }
        if !(rope_base > 1.0) || !rope_base.is_finite() {
            return Err(RetoError::InvalidBase(rope_base));
        }
        let axis_freqs = pairs_per_axis.map(|p| {
            (0..p)
                .map(|k| rope_base.powf(-2.0 * k as f64 / (2 * p) as f64))
                .collect::<Vec<_>>()
        });
        Ok(Self {
            head_dim,
            pairs_per_axis,
            rope_base,
            axis_freqs,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn pairs_per_axis(&self) -> [usize; 3] {
        self.pairs_per_axis
    }

    pub fn rope_base(&self) -> f64 {
        self.rope_base
    }

    pub fn axis_freqs(&self) -> &[Vec<f64>; 3] {
        &self.axis_freqs
    }

    /// Axes that received no rotary pairs (their coordinate does not affect any phase).
    pub fn unencoded_axes(&self) -> Vec<usize> {
        (0..3).filter(|&a| self.pairs_per_axis[a] == 0).collect()
    }

    /// Human-readable construction report.
    pub fn report(&self) -> String {
        let mut s = format!(
            "rotary: head_dim={} pairs(x,y,z)={:?} base={}",
            self.head_dim, self.pairs_per_axis, self.rope_base
        );
        let unused = self.head_dim / 2 - self.pairs_per_axis.iter().sum::<usize>();
        if unused > 0 {
            s.push_str(&format!(" unrotated_pairs={unused}"));
        }
        for a in self.unencoded_axes() {
            s.push_str(&format!(" [axis {} unencoded]", ["x", "y", "z"][a]));
        }
        s
    }

    /// Per-pair `(axis, frequency)`; `None` for unallocated pairs.
    fn pair_layout(&self) -> Vec<Option<(usize, f64)>> {
        let mut layout = Vec::with_capacity(self.head_dim / 2);
        for a in 0..3 {
            layout.extend(self.axis_freqs[a].iter().map(|&w| Some((a, w))));
        }
        layout.resize(self.head_dim / 2, None);
        layout
    }

    /// Dense `d_h/2 x 3` frequency matrix `ω_{n,p}` (zero off the owning axis).
    pub fn frequency_matrix(&self) -> Array2<f64> {
        let mut w = Array2::zeros((self.head_dim / 2, 3));
        for (n, slot) in self.pair_layout().into_iter().enumerate() {
            if let Some((a, f)) = slot {
                w[[n, a]] = f;
            }
        }
        w
    }
}

/// Per-point rotation angles with their cosines and sines.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTable {
    phases: Array2<f64>,
    cos: Array2<f64>,
    sin: Array2<f64>,
}

impl PhaseTable {
    pub fn from_phases(phases: Array2<f64>) -> Self {
        let cos = phases.mapv(f64::cos);
        let sin = phases.mapv(f64::sin);
        Self { phases, cos, sin }
    }

    pub fn phases(&self) -> &Array2<f64> {
        &self.phases
    }

    pub fn num_points(&self) -> usize {
        self.phases.nrows()
    }

    pub fn num_pairs(&self) -> usize {
        self.phases.ncols()
    }

    /// Row-subset of the table, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            phases: self.phases.select(ndarray::Axis(0), rows),
            cos: self.cos.select(ndarray::Axis(0), rows),
            sin: self.sin.select(ndarray::Axis(0), rows),
        }
    }
}

/// `θ_n(x_i) = Σ_p x_{i,p} ω_{n,p}` for every point.
pub fn compute_phases(coords: ArrayView2<f64>, config: &RotaryConfig) -> Result<PhaseTable> {
    check_coords(coords)?;
    let phases = coords.dot(&config.frequency_matrix().t());
    Ok(PhaseTable::from_phases(phases))
}

fn check_rotary_shape(vectors: &ArrayView2<f64>, phases: &PhaseTable) -> Result<()> {
    if vectors.nrows() != phases.num_points() || vectors.ncols() != 2 * phases.num_pairs() {
        return Err(RetoError::Shape(format!(
            "vectors {:?} incompatible with phase table {:?}",
            vectors.shape(),
            phases.phases.shape()
        )));
    }
    Ok(())
}

fn rotate(vectors: ArrayView2<f64>, phases: &PhaseTable, direction: f64) -> Result<Array2<f64>> {
    check_rotary_shape(&vectors, phases)?;
    let mut out = vectors.to_owned();
    for ((mut row, c), s) in out
        .rows_mut()
        .into_iter()
        .zip(phases.cos.rows())
        .zip(phases.sin.rows())
    {
        for n in 0..c.len() {
            let (v, w) = (row[2 * n], row[2 * n + 1]);
            let (cn, sn) = (c[n], direction * s[n]);
            row[2 * n] = v * cn - w * sn;
            row[2 * n + 1] = v * sn + w * cn;
        }
    }
    Ok(out)
}

/// Rotates each pair `(v_{2n}, v_{2n+1})` of row `i` by `phases[i][n]`.
pub fn apply_rotary(vectors: ArrayView2<f64>, phases: &PhaseTable) -> Result<Array2<f64>> {
    rotate(vectors, phases, 1.0)
}

/// Inverse (and adjoint) of [`apply_rotary`]: rotation by `-θ`.
pub fn apply_rotary_inverse(vectors: ArrayView2<f64>, phases: &PhaseTable) -> Result<Array2<f64>> {
    rotate(vectors, phases, -1.0)
}

/// `θ_n(x)` for every pair of a single point.
pub fn point_phases(x: [f64; 3], config: &RotaryConfig) -> Vec<f64> {
    config
        .pair_layout()
        .into_iter()
        .map(|slot| slot.map_or(0.0, |(a, w)| x[a] * w))
        .collect()
}

/// `Re[Σ_n q^(n) conj(k^(n)) e^{i(θ_n(x_i) - θ_n(x_j))}]`, computed in complex arithmetic.
///
/// Equals `⟨R(x_i) q, R(x_j) k⟩`; kept as an independent route for checking the real rotation.
pub fn rotary_inner_product_oracle(
    q: ArrayView1<f64>,
    k: ArrayView1<f64>,
    x_i: [f64; 3],
    x_j: [f64; 3],
    config: &RotaryConfig,
) -> f64 {
    let ti = point_phases(x_i, config);
    let tj = point_phases(x_j, config);
    let mut acc = Complex64::new(0.0, 0.0);
    for n in 0..config.head_dim / 2 {
        let qn = Complex64::new(q[2 * n], q[2 * n + 1]);
        let kn = Complex64::new(k[2 * n], k[2 * n + 1]);
        let phi = ti[n] - tj[n];
        acc += qn * kn.conj() * Complex64::from_polar(1.0, phi);
    }
    acc.re
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, amp: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-amp..amp))
    }

    /// Explicit block-diagonal rotation matrix for one point.
    fn dense_rotation(theta: &[f64]) -> Array2<f64> {
        let d = 2 * theta.len();
        let mut r = Array2::zeros((d, d));
        for (n, &t) in theta.iter().enumerate() {
            r[[2 * n, 2 * n]] = t.cos();
            r[[2 * n, 2 * n + 1]] = -t.sin();
            r[[2 * n + 1, 2 * n]] = t.sin();
            r[[2 * n + 1, 2 * n + 1]] = t.cos();
        }
        r
    }

    #[test]
    fn allocation_examples() {
        let c = RotaryConfig::new(6, 100.0).unwrap();
        assert_eq!(c.pairs_per_axis(), [1, 1, 1]);
        assert!(c.axis_freqs().iter().all(|f| f == &vec![1.0]));
        assert_eq!(RotaryConfig::new(32, 100.0).unwrap().pairs_per_axis(), [6, 5, 5]);
        let c = RotaryConfig::new(4, 100.0).unwrap();
        assert_eq!(c.pairs_per_axis(), [1, 1, 0]);
        assert_eq!(c.unencoded_axes(), vec![2]);
        assert!(c.report().contains("axis z unencoded"));
        assert!(matches!(RotaryConfig::new(5, 100.0), Err(RetoError::InvalidDimension(_))));
    }

    #[test]
    fn axis_frequencies_decrease_within_unit_interval() {
        let c = RotaryConfig::new(32, 100.0).unwrap();
        for f in c.axis_freqs() {
            assert_eq!(f[0], 1.0);
            assert!(f.windows(2).all(|w| w[1] < w[0]));
            assert!(f.iter().all(|&w| w > 0.0 && w <= 1.0));
        }
        // group of 6: base^(-k/6)
        assert!((c.axis_freqs()[0][3] - 100f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn unallocated_pairs_have_zero_phase() {
        let c = RotaryConfig::with_allocation(8, [1, 1, 0], 100.0).unwrap();
        let p = compute_phases(array![[0.3, -0.7, 0.9]].view(), &c).unwrap();
        assert_eq!(p.phases().row(0).to_vec(), vec![0.3, -0.7, 0.0, 0.0]);
    }

    #[test]
    fn phase_examples() {
        let c = RotaryConfig::new(6, 100.0).unwrap();
        let p = compute_phases(array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]].view(), &c).unwrap();
        assert_eq!(p.phases().row(0).to_vec(), vec![0.0; 3]);
        assert_eq!(p.phases().row(1).to_vec(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            compute_phases(array![[f64::NAN, 0.0, 0.0]].view(), &c),
            Err(RetoError::NonFiniteInput(_))
        ));
    }

    #[test]
    fn phase_difference_is_phase_of_displacement() {
        let c = RotaryConfig::new(32, 100.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let xi = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let xj = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let d = [xi[0] - xj[0], xi[1] - xj[1], xi[2] - xj[2]];
            let (ti, tj, td) = (point_phases(xi, &c), point_phases(xj, &c), point_phases(d, &c));
            for n in 0..16 {
                assert!((ti[n] - tj[n] - td[n]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rotation_examples() {
        let c = RotaryConfig::new(2, 100.0).unwrap();
        let zero = compute_phases(array![[0.0, 0.0, 0.0]].view(), &c).unwrap();
        let v = array![[0.3, -1.2]];
        assert_eq!(apply_rotary(v.view(), &zero).unwrap(), v);
        let quarter = PhaseTable::from_phases(array![[FRAC_PI_2]]);
        let r = apply_rotary(array![[1.0, 0.0]].view(), &quarter).unwrap();
        assert!(r[[0, 0]].abs() < 1e-15 && (r[[0, 1]] - 1.0).abs() < 1e-15);
        assert!(matches!(
            apply_rotary(array![[1.0, 0.0, 2.0, 1.0]].view(), &quarter),
            Err(RetoError::Shape(_))
        ));
    }

    #[test]
    fn rotation_matches_dense_block_diagonal_and_its_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = RotaryConfig::new(12, 100.0).unwrap();
        let coords = random_matrix(&mut rng, 7, 3, 1.0);
        let v = random_matrix(&mut rng, 7, 12, 2.0);
        let p = compute_phases(coords.view(), &c).unwrap();
        let fwd = apply_rotary(v.view(), &p).unwrap();
        let inv = apply_rotary_inverse(v.view(), &p).unwrap();
        for i in 0..7 {
            let r = dense_rotation(p.phases().row(i).as_slice().unwrap());
            let want: Array1<f64> = r.dot(&v.row(i));
            let want_t: Array1<f64> = r.t().dot(&v.row(i));
            for d in 0..12 {
                assert!((fwd[[i, d]] - want[d]).abs() < 1e-10);
                assert!((inv[[i, d]] - want_t[d]).abs() < 1e-10);
            }
            let (n0, n1) = (v.row(i).dot(&v.row(i)).sqrt(), fwd.row(i).dot(&fwd.row(i)).sqrt());
            assert!((n0 - n1).abs() / n0 < 1e-6);
        }
        let round = apply_rotary_inverse(fwd.view(), &p).unwrap();
        assert!((&round - &v).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn oracle_examples() {
        let c = RotaryConfig::new(6, 100.0).unwrap();
        let q = array![0.5, -1.0, 2.0, 0.1, 0.0, 3.0];
        let k = array![1.5, 0.5, -0.2, 1.0, 2.0, 0.3];
        let x = [0.2, 0.4, -0.6];
        assert!((rotary_inner_product_oracle(q.view(), k.view(), x, x, &c) - q.dot(&k)).abs() < 1e-14);

        let c2 = RotaryConfig::new(2, 100.0).unwrap();
        let unit = array![1.0, 0.0];
        let v = rotary_inner_product_oracle(unit.view(), unit.view(), [PI, 0.0, 0.0], [0.0; 3], &c2);
        assert!((v + 1.0).abs() < 1e-15);
    }

    #[test]
    fn real_rotation_agrees_with_complex_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &dh in &[2usize, 6, 32] {
            let c = RotaryConfig::new(dh, 100.0).unwrap();
            for _ in 0..200 {
                let coords = random_matrix(&mut rng, 2, 3, 1.0);
                let qk = random_matrix(&mut rng, 2, dh, 1.0);
                let p = compute_phases(coords.view(), &c).unwrap();
                let rot = apply_rotary(qk.view(), &p).unwrap();
                let real = rot.row(0).dot(&rot.row(1));
                let xi = [coords[[0, 0]], coords[[0, 1]], coords[[0, 2]]];
                let xj = [coords[[1, 0]], coords[[1, 1]], coords[[1, 2]]];
                let oracle = rotary_inner_product_oracle(qk.row(0), qk.row(1), xi, xj, &c);
                assert!((real - oracle).abs() < 1e-10);
            }
        }
    }
}
