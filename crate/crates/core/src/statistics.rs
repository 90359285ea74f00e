//! Second-order input statistics for one layer.
//!
//! `H = E[x x^T]` over the inputs the layer actually sees (the quantized-prefix
//! run), and `R = E[dx x^T]` with `dx = x - x_fp`. Expectations are sample
//! means over calibration rows.

use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::tensor_io::{load_tensor, save_tensor, Tensor};

pub const DEFAULT_DAMP_FRAC: f64 = 0.01;

/// Contiguous partition of a length-`d` channel into groups of `g`; the last
/// group may be shorter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    d: usize,
    g: usize,
}

impl GroupPartition {
    pub fn new(d: usize, g: usize) -> Result<Self> {
        if d == 0 || g == 0 {
            return Err(Error::Config(format!(
                "channel length and group size must be >= 1 (d={d}, g={g})"
            )));
        }
        Ok(Self { d, g })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn group_size(&self) -> usize {
        self.g
    }

    pub fn n_groups(&self) -> usize {
        self.d.div_ceil(self.g)
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        let start = i * self.g;
        start..(start + self.g).min(self.d)
    }

    pub fn group_of(&self, col: usize) -> usize {
        col / self.g
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.n_groups()).map(|i| self.range(i))
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.n_groups() {
            return Err(Error::IndexOutOfRange(format!(
                "group {i} with only {} groups",
                self.n_groups()
            )));
        }
        Ok(())
    }
}

/// Statistics for one layer. `h` is stored undamped; `damp_lambda` is the
/// absolute amount added to its diagonal for the GPTQ factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub h: DMatrix<f64>,
    pub r: Option<DMatrix<f64>>,
    pub n_samples: usize,
    pub damp_lambda: f64,
}

impl LayerStats {
    /// Builds `H` from `inputs` and, when `fp_inputs` is given, `R` from the pair.
    pub fn from_samples(
        inputs: &DMatrix<f64>,
        fp_inputs: Option<&DMatrix<f64>>,
        damp_frac: f64,
    ) -> Result<Self> {
        let h = estimate_hessian(inputs)?;
        let (_, damp_lambda) = dampen(&h, damp_frac)?;
        let r = fp_inputs
            .map(|fp| estimate_deviation_correlation(inputs, fp))
            .transpose()?;
        Ok(Self {
            h,
            r,
            n_samples: inputs.nrows(),
            damp_lambda,
        })
    }

    pub fn d(&self) -> usize {
        self.h.nrows()
    }

    pub fn damped_hessian(&self) -> DMatrix<f64> {
        let mut h = self.h.clone();
        for a in 0..h.nrows() {
            h[(a, a)] += self.damp_lambda;
        }
        h
    }

    /// Writes `<stem>.h.qt`, `<stem>.r.qt` (when present) and `<stem>.stats.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        save_tensor(&Tensor::from_matrix(&self.h)?, dir.join(format!("{stem}.h.qt")))?;
        if let Some(r) = &self.r {
            save_tensor(&Tensor::from_matrix(r)?, dir.join(format!("{stem}.r.qt")))?;
        }
        let sidecar = StatsSidecar {
            n_samples: self.n_samples,
            damp_lambda: self.damp_lambda,
            has_r: self.r.is_some(),
        };
        let path = dir.join(format!("{stem}.stats.json"));
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(format!("{stem}.stats.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: StatsSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let h = load_tensor(dir.join(format!("{stem}.h.qt")))?.to_matrix()?;
        let r = if sidecar.has_r {
            Some(load_tensor(dir.join(format!("{stem}.r.qt")))?.to_matrix()?)
        } else {
            None
        };
        Ok(Self {
            h,
            r,
            n_samples: sidecar.n_samples,
            damp_lambda: sidecar.damp_lambda,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsSidecar {
    n_samples: usize,
    damp_lambda: f64,
    has_r: bool,
}

/// `H = (1/N) X^T X` for samples stored as rows of `x` (N x d).
pub fn estimate_hessian(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() == 0 {
        return Err(Error::EmptyCalibration);
    }
    let mut h = x.tr_mul(x) / x.nrows() as f64;
    symmetrize(&mut h);
    Ok(h)
}

/// `H + frac * mean(diag H) * I`, returned with the absolute damping amount.
/// Fails if the diagonal is all zero or the result does not factor.
pub fn dampen(h: &DMatrix<f64>, frac: f64) -> Result<(DMatrix<f64>, f64)> {
    if !(frac > 0.0) || !frac.is_finite() {
        return Err(Error::Config(format!("damping fraction must be > 0, got {frac}")));
    }
    let d = h.nrows();
    let mean_diag = h.diagonal().sum() / d as f64;
    if !(mean_diag > 0.0) || !mean_diag.is_finite() {
        return Err(Error::DegenerateStats(format!(
            "mean Hessian diagonal is {mean_diag}; calibration inputs are all zero"
        )));
    }
    let lambda = frac * mean_diag;
    let mut damped = h.clone();
    for a in 0..d {
        damped[(a, a)] += lambda;
    }
    if damped.clone().cholesky().is_none() {
        return Err(Error::Factorization(format!(
            "damped Hessian (lambda={lambda:e}) is not positive definite"
        )));
    }
    Ok((damped, lambda))
}

/// `R = (1/N) (X - X_fp)^T X`, i.e. `R[a, b] = mean_n dx[n, a] * x[n, b]`.
pub fn estimate_deviation_correlation(
    quantized_inputs: &DMatrix<f64>,
    fp_inputs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if quantized_inputs.shape() != fp_inputs.shape() {
        return Err(Error::ShapeMismatch(format!(
            "quantized inputs {:?} vs fp inputs {:?}",
            quantized_inputs.shape(),
            fp_inputs.shape()
        )));
    }
    if quantized_inputs.nrows() == 0 {
        return Err(Error::EmptyCalibration);
    }
    let dx = quantized_inputs - fp_inputs;
    Ok(dx.tr_mul(quantized_inputs) / quantized_inputs.nrows() as f64)
}

/// `H_{i,j}`: the (i, j) group sub-block.
pub fn block(h: &DMatrix<f64>, partition: &GroupPartition, i: usize, j: usize) -> Result<DMatrix<f64>> {
    partition.check(i)?;
    partition.check(j)?;
    let (ri, rj) = (partition.range(i), partition.range(j));
    Ok(h.view((ri.start, rj.start), (ri.len(), rj.len())).into_owned())
}

/// `H_{i,:}`: all columns of the rows belonging to group `i`.
pub fn row_block(h: &DMatrix<f64>, partition: &GroupPartition, i: usize) -> Result<DMatrix<f64>> {
    partition.check(i)?;
    let ri = partition.range(i);
    Ok(h.view((ri.start, 0), (ri.len(), h.ncols())).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_samples(seed: u64, n: usize, d: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.gen_range(-2.0..2.0))
    }

    fn naive_hessian(x: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, d) = x.shape();
        let mut h = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                let mut s = 0.0;
                for k in 0..n {
                    s += x[(k, a)] * x[(k, b)];
                }
                h[(a, b)] = s / n as f64;
            }
        }
        h
    }

    #[test]
    fn single_sample_outer_product() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let h = estimate_hessian(&x).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
        let copies = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(estimate_hessian(&copies).unwrap(), h);
    }

    #[test]
    fn hessian_matches_naive_loop() {
        let x = random_samples(3, 64, 8);
        let h = estimate_hessian(&x).unwrap();
        let naive = naive_hessian(&x);
        assert!((h - naive).abs().max() <= 1e-12);
    }

    #[test]
    fn empty_calibration_rejected() {
        assert!(matches!(
            estimate_hessian(&DMatrix::zeros(0, 3)),
            Err(Error::EmptyCalibration)
        ));
    }

    #[test]
    fn damping_examples() {
        let (d, lambda) = dampen(&DMatrix::identity(3, 3), 0.01).unwrap();
        assert_eq!(d, DMatrix::identity(3, 3) * 1.01);
        assert_eq!(lambda, 0.01);

        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let (d, _) = dampen(&h, 0.5).unwrap();
        assert_eq!(d, DMatrix::from_row_slice(2, 2, &[3.5, 0.0, 0.0, 5.5]));

        assert!(matches!(
            dampen(&DMatrix::zeros(2, 2), 0.01),
            Err(Error::DegenerateStats(_))
        ));
    }

    #[test]
    fn damping_fixes_rank_deficiency() {
        let x = random_samples(11, 2, 4);
        let h = estimate_hessian(&x).unwrap();
        assert!(h.clone().cholesky().map_or(true, |c| c.l().diagonal().min() < 1e-6));
        let (d, _) = dampen(&h, 0.01).unwrap();
        let chol = d.clone().cholesky().expect("damped Hessian factors");
        let back = chol.l() * chol.l().transpose();
        assert!((back - d).abs().max() < 1e-12);
    }

    #[test]
    fn deviation_examples() {
        let x = random_samples(5, 10, 3);
        let r = estimate_deviation_correlation(&x, &x).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));

        let xq = DMatrix::from_row_slice(1, 2, &[2.0, 0.0]);
        let xf = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let r = estimate_deviation_correlation(&xq, &xf).unwrap();
        assert_eq!(r, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));

        assert!(estimate_deviation_correlation(&xq, &DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn deviation_matches_naive_loop() {
        let xq = random_samples(7, 32, 8);
        let xf = random_samples(8, 32, 8);
        let r = estimate_deviation_correlation(&xq, &xf).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                let mut s = 0.0;
                for n in 0..32 {
                    s += (xq[(n, a)] - xf[(n, a)]) * xq[(n, b)];
                }
                assert!((r[(a, b)] - s / 32.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn hessian_form_equals_sample_form() {
        let x = random_samples(9, 50, 6);
        let h = estimate_hessian(&x).unwrap();
        let delta: Vec<f64> = (0..6).map(|k| 0.3 * k as f64 - 0.7).collect();
        let hess_form = crate::linalg::quad_form(&h, &delta);
        let sample_form: f64 = (0..50)
            .map(|n| {
                let p: f64 = (0..6).map(|a| delta[a] * x[(n, a)]).sum();
                p * p
            })
            .sum::<f64>()
            / 50.0;
        assert!((hess_form - sample_form).abs() <= 1e-8 * sample_form.abs());
    }

    #[test]
    fn blocks_tile_the_matrix() {
        let h = DMatrix::from_fn(5, 5, |a, b| (a * 5 + b) as f64);
        let p = GroupPartition::new(5, 2).unwrap();
        assert_eq!(p.n_groups(), 3);
        assert_eq!(p.range(2), 4..5);
        assert_eq!(block(&h, &p, 0, 1).unwrap(), h.view((0, 2), (2, 2)).into_owned());
        for i in 0..p.n_groups() {
            let row = row_block(&h, &p, i).unwrap();
            let mut cat = DMatrix::zeros(row.nrows(), 0);
            for j in 0..p.n_groups() {
                let b = block(&h, &p, i, j).unwrap();
                let c0 = cat.ncols();
                cat = cat.insert_columns(c0, b.ncols(), 0.0);
                cat.view_mut((0, c0), (b.nrows(), b.ncols())).copy_from(&b);
            }
            assert_eq!(cat, row);
        }
        assert!(block(&h, &p, 3, 0).is_err());
        assert!(row_block(&h, &p, 3).is_err());
    }

    #[test]
    fn identity_diagonal_blocks() {
        let h = DMatrix::<f64>::identity(4, 4);
        let p = GroupPartition::new(4, 2).unwrap();
        assert_eq!(block(&h, &p, 1, 1).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn stats_persist_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let xq = random_samples(1, 12, 4);
        let xf = random_samples(2, 12, 4);
        let stats = LayerStats::from_samples(&xq, Some(&xf), 0.01).unwrap();
        stats.save(dir.path(), "layer_1").unwrap();
        assert_eq!(LayerStats::load(dir.path(), "layer_1").unwrap(), stats);

        let first = LayerStats::from_samples(&xq, None, 0.01).unwrap();
        first.save(dir.path(), "layer_0").unwrap();
        assert!(LayerStats::load(dir.path(), "layer_0").unwrap().r.is_none());
    }
}
