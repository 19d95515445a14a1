//! Pose-space cloth prediction from virtual bones: PCA subspaces, small
//! perceptrons trained with a collision penalty, and mesh inference.

pub mod loss;
pub mod mlp;
pub mod model;
pub mod pca;
pub mod train;

pub use model::{ClothModel, ModelMeta};
pub use pca::{fit_pca, PcaModel, RigidFrame};
pub use train::{fit_skinning_pca, train_shape, train_skinning, Stage, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Format(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Pca(#[from] pca::PcaError),
    #[error("training diverged in epoch {epoch}, batch {batch} (data loss {data_loss}, collision loss {pinn_loss})")]
    Diverged { epoch: usize, batch: usize, data_loss: f64, pinn_loss: f64 },
}
