//! Tensor container, binary format, model manifests and synthetic generators.

mod manifest;
mod synthetic;
mod tensor;

pub use manifest::{
    manifest_path, Activation, LayerEntry, Model, ModelManifest, QuantizedFiles, MANIFEST_FILE,
};
pub use synthetic::{gen_held_out, gen_synthetic, outlier_count, SyntheticSpec, WeightDist};
pub use tensor::{load_tensor, save_tensor, DType, Tensor, TensorData, MAGIC};
