pub mod backbone;
pub mod cesd;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod keypoints;
pub mod model;
pub mod nn;
pub mod seeds;
pub mod shape_embed;
pub mod tensor;
pub mod train;

pub use backbone::BackboneConfig;
pub use dataio::{AnnotationRecord, DatasetIndex, KeypointTable, Split, Vocabularies};
pub use error::{ReidError, Result};
pub use eval::{compute_cmc_map, filter_gallery, Protocol, RankingResult};
pub use keypoints::KeypointSet;
pub use model::{build_model, Ablations, IdentityDescriptor, Model, ModelConfig};
pub use tensor::{FeatureMap, Real};
pub use train::{lr_at, total_loss, LossWeights, TrainConfig};
