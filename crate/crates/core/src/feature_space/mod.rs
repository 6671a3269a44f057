//! The learned feature space: ICA projection of raw pair features and a
//! diagonal Gaussian mixture over the projected features.

mod gmm;
mod ica;
mod model_io;

pub use gmm::{fit_gmm, mean_ll, GmmConfig, GmmFit, GmmModel, PosteriorMode};
pub use ica::{fit_ica, IcaConfig, IcaModel, ProjectedFeature, PROJ_DIM};
pub use model_io::{load_gmm, load_ica, model_fingerprint, Model, MODEL_MAGIC, MODEL_VERSION};
