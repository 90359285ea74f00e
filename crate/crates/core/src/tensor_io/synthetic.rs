//! Seeded toy models and calibration sets.
//!
//! Weights are i.i.d. N(0, 1/d_in). Calibration inputs are drawn with
//! per-channel log-normal magnitudes and a few shared latent factors, so the
//! input covariance is anisotropic and has cross-group correlation, as
//! activations in real networks do.

use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{Activation, LayerEntry, Model, ModelManifest};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const STREAM_WEIGHTS: u64 = 0;
const STREAM_OUTLIERS: u64 = 1;
const STREAM_INPUT_SHAPE: u64 = 2;
const STREAM_CALIBRATION: u64 = 3;
const STREAM_HELD_OUT: u64 = 4;

const N_LATENT: usize = 4;
const OUTLIER_FRACTION: f64 = 0.01;
const OUTLIER_GAIN: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDist {
    Gauss,
    GaussOutliers,
}

impl FromStr for WeightDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss" => Ok(WeightDist::Gauss),
            "gauss+outliers" | "gauss_outliers" => Ok(WeightDist::GaussOutliers),
            other => Err(Error::Config(format!(
                "unknown weight distribution '{other}' (expected gauss or gauss+outliers)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub n_layers: usize,
    pub n_samples: usize,
    pub weight_dist: WeightDist,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.n_layers == 0 || self.n_samples == 0 {
            return Err(Error::Config(format!(
                "all synthetic dimensions must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Number of weights inflated per layer in outlier mode.
pub fn outlier_count(in_dim: usize, out_dim: usize) -> usize {
    (OUTLIER_FRACTION * (in_dim * out_dim) as f64).ceil() as usize
}

/// Layer 0 maps d_in -> d_out, later layers d_out -> d_out. Every layer but
/// the last is followed by relu.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Model, Tensor)> {
    spec.validate()?;
    let mut weight_rng = spec.rng(STREAM_WEIGHTS);
    let mut outlier_rng = spec.rng(STREAM_OUTLIERS);

    let mut layers = Vec::with_capacity(spec.n_layers);
    let mut weights = Vec::with_capacity(spec.n_layers);
    for k in 0..spec.n_layers {
        let in_dim = if k == 0 { spec.d_in } else { spec.d_out };
        let out_dim = spec.d_out;
        let std = (in_dim as f64).sqrt().recip();
        // Row-major draw order so the stream maps onto (row, col) independently of storage.
        let mut w = DMatrix::<f64>::zeros(out_dim, in_dim);
        for r in 0..out_dim {
            for c in 0..in_dim {
                let z: f64 = StandardNormal.sample(&mut weight_rng);
                w[(r, c)] = std * z;
            }
        }
        if spec.weight_dist == WeightDist::GaussOutliers {
            let n = outlier_count(in_dim, out_dim);
            for flat in index::sample(&mut outlier_rng, in_dim * out_dim, n).into_iter() {
                w[(flat / in_dim, flat % in_dim)] *= OUTLIER_GAIN;
            }
        }
        layers.push(LayerEntry {
            weight_path: format!("layer_{k}.qt"),
            in_dim,
            out_dim,
            activation: if k + 1 == spec.n_layers {
                Activation::None
            } else {
                Activation::Relu
            },
            quantized: None,
        });
        weights.push(w);
    }

    let manifest = ModelManifest {
        layers,
        metadata: BTreeMap::from([
            ("generator".to_string(), "synthetic".to_string()),
            ("seed".to_string(), spec.seed.to_string()),
            (
                "weight_dist".to_string(),
                match spec.weight_dist {
                    WeightDist::Gauss => "gauss",
                    WeightDist::GaussOutliers => "gauss+outliers",
                }
                .to_string(),
            ),
        ]),
    };
    let model = Model::new(manifest, weights)?;
    let calib = sample_inputs(spec, STREAM_CALIBRATION, spec.n_samples)?;
    Ok((model, calib))
}

/// Inputs from the same distribution as the calibration set but an independent stream.
pub fn gen_held_out(spec: &SyntheticSpec, n_samples: usize) -> Result<Tensor> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(Error::Config("held-out sample count must be >= 1".into()));
    }
    sample_inputs(spec, STREAM_HELD_OUT, n_samples)
}

fn sample_inputs(spec: &SyntheticSpec, stream: u64, n: usize) -> Result<Tensor> {
    let d = spec.d_in;
    // Channel magnitudes and latent loadings are shared by calibration and held-out sets.
    let mut shape_rng = spec.rng(STREAM_INPUT_SHAPE);
    let channel_scale: Vec<f64> = (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut shape_rng);
            (0.75 * z).exp()
        })
        .collect();
    let loadings: Vec<f64> = (0..d * N_LATENT)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut shape_rng);
            0.7 * z
        })
        .collect();

    let mut rng = spec.rng(stream);
    let mut data = Vec::with_capacity(n * d);
    let mut latent = [0.0f64; N_LATENT];
    for _ in 0..n {
        latent
            .iter_mut()
            .for_each(|c| *c = StandardNormal.sample(&mut rng));
        for j in 0..d {
            let own: f64 = StandardNormal.sample(&mut rng);
            let shared: f64 = (0..N_LATENT)
                .map(|k| loadings[j * N_LATENT + k] * latent[k])
                .sum();
            data.push(channel_scale[j] * (own + shared));
        }
    }
    Tensor::from_f64(vec![n, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dist: WeightDist) -> SyntheticSpec {
        SyntheticSpec {
            d_in: 4,
            d_out: 4,
            n_layers: 1,
            n_samples: 8,
            weight_dist: dist,
            seed: 7,
        }
    }

    #[test]
    fn shapes_follow_spec() {
        let (model, calib) = gen_synthetic(&spec(WeightDist::Gauss)).unwrap();
        assert_eq!(model.weights[0].shape(), (4, 4));
        assert_eq!(calib.shape(), &[8, 4]);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = gen_synthetic(&spec(WeightDist::GaussOutliers)).unwrap();
        let b = gen_synthetic(&spec(WeightDist::GaussOutliers)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_bytes(), b.1.to_bytes());
    }

    #[test]
    fn outlier_mode_inflates_exact_count() {
        let s = SyntheticSpec {
            d_in: 30,
            d_out: 20,
            n_layers: 2,
            ..spec(WeightDist::Gauss)
        };
        let (plain, _) = gen_synthetic(&s).unwrap();
        let (outl, _) = gen_synthetic(&SyntheticSpec {
            weight_dist: WeightDist::GaussOutliers,
            ..s
        })
        .unwrap();
        for (wp, wo) in plain.weights.iter().zip(&outl.weights) {
            let mut inflated = 0;
            for (a, b) in wp.iter().zip(wo.iter()) {
                if a != b {
                    assert_eq!(*b, a * 10.0);
                    inflated += 1;
                }
            }
            assert_eq!(inflated, outlier_count(wp.ncols(), wp.nrows()));
        }
        assert_eq!(outlier_count(30, 20), 6);
        assert_eq!(outlier_count(20, 20), 4);
    }

    #[test]
    fn multi_layer_chain_is_valid() {
        let s = SyntheticSpec {
            d_in: 5,
            d_out: 3,
            n_layers: 3,
            ..spec(WeightDist::Gauss)
        };
        let (model, _) = gen_synthetic(&s).unwrap();
        model.manifest.validate().unwrap();
        assert_eq!(model.weights[0].shape(), (3, 5));
        assert_eq!(model.weights[2].shape(), (3, 3));
        assert_eq!(model.manifest.layers[2].activation, Activation::None);
    }

    #[test]
    fn held_out_differs_from_calibration() {
        let s = spec(WeightDist::Gauss);
        let (_, calib) = gen_synthetic(&s).unwrap();
        let held = gen_held_out(&s, 8).unwrap();
        assert_ne!(calib.to_bytes(), held.to_bytes());
    }

    #[test]
    fn zero_dims_rejected() {
        let s = SyntheticSpec {
            n_samples: 0,
            ..spec(WeightDist::Gauss)
        };
        assert!(gen_synthetic(&s).is_err());
    }
}
