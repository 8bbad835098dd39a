//! Learned scene-structure guidance.
//!
//! A small encoder-decoder maps an image to a handful of soft segmentation
//! maps. It is trained without labels by minimizing the quadratic form of a
//! KNN-matting graph Laplacian built from the same image, plus a sparsity
//! term that pushes each pixel towards a single map. An exact spectral
//! solver computes the eigenvectors the network approximates.
//!
//! ```no_run
//! use ssgnet::{graph, spectral, synthetic};
//!
//! let image = synthetic::scene::<f64>(0, 32, 32, 7);
//! let l = graph::image_laplacian(&image, graph::GraphConfig::default()).unwrap();
//! let pairs = spectral::smallest_eigs(&l, 4).unwrap();
//! let maps = spectral::reference_softseg::<f32>(&pairs, 3, 32, 32).unwrap();
//! assert_eq!(maps.n(), 3);
//! ```

pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod loss;
pub mod model;
pub mod optim;
pub mod spectral;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{image_laplacian, GraphConfig, SparseGraph};
pub use loss::{LossBreakdown, LossConfig};
pub use model::{fuse_guidance, EigenMaps, FusionLayer, SsgConfig, SsgNet};
pub use optim::AdamState;
pub use tensor::{Real, Tape, Tensor, Var};
pub use train::{predict, train, Dataset, LaplacianCache, TrainConfig};
