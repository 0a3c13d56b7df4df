//! Edge-convolution scan classifier.
//!
//! Two edge-convolution layers (the first over the scan graph's own edges,
//! the second over nearest neighbors in the first layer's output space),
//! their outputs concatenated per node, a shared fully connected layer with
//! ReLU, a global max pool over nodes, and an MLP head ending in a sigmoid.

mod edgeconv;
mod knn;
mod layers;
mod model;
mod persist;
mod train;

pub use edgeconv::{edge_conv, edge_conv_backward, EdgeConvCache};
pub use knn::knn_neighbors;
pub use layers::{sigmoid, Dense, NodeMatrix};
pub use model::{ClassifierModel, ForwardTrace, Hyperparams, NeighborSource, Parameters};
pub use persist::{load_model, model_from_json, model_to_json, save_model, ModelDims, MODEL_VERSION};
pub use train::{predict_all, train, EpochStats, TrainOutcome};
