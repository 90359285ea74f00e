//! Input-aware group-scale initialization.
//!
//! For every (row, group) the clipping factor `beta` is searched over a fixed
//! grid, and the candidate minimizing `(s v - w)^T H_ii (s v - w)` is kept,
//! where `v` are the effective integer codes obtained by rounding at that
//! candidate. Passing the identity for `H_ii` gives the plain weight-space
//! search used by default GPTQ.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{block_bilinear, row_vec};
use crate::quantizer::{check_bits, effective_int, quantize_group, scale_from_beta, GroupGrid};
use crate::statistics::GroupPartition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSearchSpec {
    /// Number of shrink steps `M`; `M + 1` candidates are evaluated.
    pub n_candidates: usize,
    pub max_shrink: f64,
}

impl Default for GridSearchSpec {
    fn default() -> Self {
        Self {
            n_candidates: 100,
            max_shrink: 0.8,
        }
    }
}

impl GridSearchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 {
            return Err(Error::Config("grid search needs at least one shrink step".into()));
        }
        if !(self.max_shrink > 0.0 && self.max_shrink < 1.0) {
            return Err(Error::Config(format!(
                "max_shrink must lie in (0, 1), got {}",
                self.max_shrink
            )));
        }
        Ok(())
    }

    /// `beta_k = 1 - k * max_shrink / M` for `k = 0..=M`, largest first.
    pub fn betas(&self) -> impl Iterator<Item = f64> + '_ {
        let m = self.n_candidates as f64;
        (0..=self.n_candidates).map(move |k| 1.0 - k as f64 * self.max_shrink / m)
    }
}

/// Outcome of one group search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupInit {
    pub scale: f64,
    pub zero: i32,
    pub beta: f64,
    pub loss: f64,
}

fn search(
    w_i: &[f64],
    bits: u32,
    symmetric: bool,
    spec: &GridSearchSpec,
    loss: impl Fn(&[f64]) -> f64,
) -> GroupInit {
    let mut best: Option<GroupInit> = None;
    let mut resid = vec![0.0; w_i.len()];
    for beta in spec.betas() {
        let (s, z) = scale_from_beta(w_i, beta, bits);
        let z = if symmetric { 0 } else { z };
        let v = effective_int(&quantize_group(w_i, s, z, bits), z);
        for ((r, &vi), &wi) in resid.iter_mut().zip(&v).zip(w_i) {
            *r = s * vi - wi;
        }
        let l = loss(&resid);
        // strict improvement only: ties keep the larger beta seen first
        if best.map_or(true, |b| l < b.loss) {
            best = Some(GroupInit {
                scale: s,
                zero: z,
                beta,
                loss: l,
            });
        }
    }
    best.expect("grid search has at least one candidate")
}

/// Grid search for one group under the metric `h_ii` (g x g).
pub fn init_group_scale(
    w_i: &[f64],
    h_ii: &DMatrix<f64>,
    bits: u32,
    symmetric: bool,
    spec: &GridSearchSpec,
) -> GroupInit {
    debug_assert_eq!(h_ii.shape(), (w_i.len(), w_i.len()));
    search(w_i, bits, symmetric, spec, |r| block_bilinear(h_ii, 0, r, r))
}

/// Grid search for one group under the identity metric (`||s v - w||^2`).
pub fn init_group_scale_identity(w_i: &[f64], bits: u32, symmetric: bool, spec: &GridSearchSpec) -> GroupInit {
    search(w_i, bits, symmetric, spec, |r| r.iter().map(|x| x * x).sum())
}

fn init_layer(
    w: &DMatrix<f64>,
    h: Option<&DMatrix<f64>>,
    partition: &GroupPartition,
    bits: u32,
    symmetric: bool,
    spec: &GridSearchSpec,
) -> Result<GroupGrid> {
    check_bits(bits)?;
    spec.validate()?;
    if w.ncols() != partition.d() || h.is_some_and(|h| h.shape() != (w.ncols(), w.ncols())) {
        return Err(Error::ShapeMismatch(format!(
            "weights {:?}, partition d={}, Hessian {:?}",
            w.shape(),
            partition.d(),
            h.map(|h| h.shape())
        )));
    }
    let n_g = partition.n_groups();
    let found: Vec<GroupInit> = (0..w.nrows() * n_g)
        .into_par_iter()
        .map(|idx| {
            let (r, i) = (idx / n_g, idx % n_g);
            let range = partition.range(i);
            let row = row_vec(w, r);
            let w_i = &row[range.clone()];
            match h {
                Some(h) => search(w_i, bits, symmetric, spec, |res| block_bilinear(h, range.start, res, res)),
                None => init_group_scale_identity(w_i, bits, symmetric, spec),
            }
        })
        .collect();
    GroupGrid::new(
        bits,
        *partition,
        symmetric,
        w.nrows(),
        found.iter().map(|g| g.scale).collect(),
        found.iter().map(|g| g.zero).collect(),
    )
}

/// Input-aware grid: each group searched under its diagonal Hessian block `H_ii`.
pub fn init_layer_scales(
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
    partition: &GroupPartition,
    bits: u32,
    symmetric: bool,
    spec: &GridSearchSpec,
) -> Result<GroupGrid> {
    init_layer(w, Some(h), partition, bits, symmetric, spec)
}

/// Baseline grid: each group searched in weight space (`H = I`).
pub fn init_layer_scales_identity(
    w: &DMatrix<f64>,
    partition: &GroupPartition,
    bits: u32,
    symmetric: bool,
    spec: &GridSearchSpec,
) -> Result<GroupGrid> {
    init_layer(w, None, partition, bits, symmetric, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.05
    }

    fn group_loss(w: &[f64], h: &DMatrix<f64>, s: f64, z: i32, bits: u32) -> f64 {
        let v = effective_int(&quantize_group(w, s, z, bits), z);
        let r: Vec<f64> = v.iter().zip(w).map(|(vi, wi)| s * vi - wi).collect();
        block_bilinear(h, 0, &r, &r)
    }

    #[test]
    fn betas_cover_envelope() {
        let b: Vec<f64> = GridSearchSpec::default().betas().collect();
        assert_eq!(b.len(), 101);
        assert_eq!(b[0], 1.0);
        assert!((b[100] - 0.2).abs() < 1e-12);
        assert!(b.iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn identity_metric_matches_weight_space_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = GridSearchSpec::default();
        for _ in 0..20 {
            let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = init_group_scale(&w, &DMatrix::identity(8, 8), 2, false, &spec);
            let b = init_group_scale_identity(&w, 2, false, &spec);
            assert_eq!((a.scale, a.zero, a.beta), (b.scale, b.zero, b.beta));
        }
    }

    #[test]
    fn representable_group_selects_beta_one() {
        let w = [0.0, 1.0, 2.0, 3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_spd(&mut rng, 4);
        let init = init_group_scale(&w, &h, 2, false, &GridSearchSpec::default());
        assert_eq!(init.beta, 1.0);
        assert_eq!(init.loss, 0.0);
        assert_eq!((init.scale, init.zero), (1.0, 0));
    }

    #[test]
    fn search_matches_dense_scan_and_beats_default() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = GridSearchSpec::default();
        for _ in 0..10 {
            let w: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = random_spd(&mut rng, 4);
            let init = init_group_scale(&w, &h, 2, false, &spec);
            let (s1, z1) = scale_from_beta(&w, 1.0, 2);
            assert!(init.loss <= group_loss(&w, &h, s1, z1, 2));
            let scan_min = spec
                .betas()
                .map(|beta| {
                    let (s, z) = scale_from_beta(&w, beta, 2);
                    group_loss(&w, &h, s, z, 2)
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(init.loss, scan_min);
        }
    }

    #[test]
    fn scaled_identity_selects_same_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = GridSearchSpec::default();
        for _ in 0..20 {
            let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = init_group_scale_identity(&w, 3, false, &spec);
            // power-of-two factor keeps every loss comparison exact
            let b = init_group_scale(&w, &(DMatrix::identity(6, 6) * 4.0), 3, false, &spec);
            assert_eq!(a.beta, b.beta);
        }
    }

    #[test]
    fn single_group_identity_is_channelwise_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = DMatrix::from_fn(3, 10, |_, _| rng.gen_range(-1.0..1.0));
        let p = GroupPartition::new(10, 10).unwrap();
        let grid = init_layer_scales(&w, &DMatrix::identity(10, 10), &p, 2, false, &GridSearchSpec::default()).unwrap();
        for r in 0..3 {
            let init = init_group_scale_identity(&row_vec(&w, r), 2, false, &GridSearchSpec::default());
            assert_eq!(grid.scales_row(r), &[init.scale]);
            assert_eq!(grid.zeros_row(r), &[init.zero]);
        }
    }

    #[test]
    fn row_permutation_permutes_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w = DMatrix::from_fn(4, 8, |_, _| rng.gen_range(-1.0..1.0));
        let h = random_spd(&mut rng, 8);
        let p = GroupPartition::new(8, 3).unwrap();
        let spec = GridSearchSpec::default();
        let grid = init_layer_scales(&w, &h, &p, 2, false, &spec).unwrap();
        let perm = [2, 0, 3, 1];
        let wp = DMatrix::from_fn(4, 8, |r, c| w[(perm[r], c)]);
        let gp = init_layer_scales(&wp, &h, &p, 2, false, &spec).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            assert_eq!(gp.scales_row(r), grid.scales_row(src));
            assert_eq!(gp.zeros_row(r), grid.zeros_row(src));
        }
    }

    #[test]
    fn parallel_and_serial_grids_are_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let w = DMatrix::from_fn(8, 16, |_, _| rng.gen_range(-1.0..1.0));
        let h = random_spd(&mut rng, 16);
        let p = GroupPartition::new(16, 4).unwrap();
        let spec = GridSearchSpec::default();
        let serial_pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let wide_pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = serial_pool.install(|| init_layer_scales(&w, &h, &p, 2, false, &spec).unwrap());
        let b = wide_pool.install(|| init_layer_scales(&w, &h, &p, 2, false, &spec).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn symmetric_mode_forces_zero_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = DMatrix::from_fn(2, 8, |_, _| rng.gen_range(-1.0..1.0));
        let p = GroupPartition::new(8, 4).unwrap();
        let grid = init_layer_scales_identity(&w, &p, 3, true, &GridSearchSpec::default()).unwrap();
        assert!(grid.zeros().iter().all(|&z| z == 0));
        assert!(grid.symmetric);
    }

    #[test]
    fn invalid_spec_rejected() {
        let w = DMatrix::from_element(1, 4, 1.0);
        let p = GroupPartition::new(4, 2).unwrap();
        let bad = GridSearchSpec {
            n_candidates: 10,
            max_shrink: 1.0,
        };
        assert!(init_layer_scales_identity(&w, &p, 2, false, &bad).is_err());
        assert!(init_layer_scales_identity(&w, &p, 1, false, &GridSearchSpec::default()).is_err());
    }
}
