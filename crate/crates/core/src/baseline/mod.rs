//! Classical comparison encoders and descriptor preprocessing: k-means + VLAD,
//! diagonal GMM + Fisher vector, average pooling and PCA.

pub mod encoders;
pub mod gmm;
pub mod kmeans;
pub mod pca;

pub use encoders::{
    avgpool_encode, avgpool_encode_raw, fv_encode, fv_encode_raw, fv_encode_with_posteriors,
    vlad_encode, vlad_encode_raw,
};
pub use gmm::{gmm_fit, DiagonalGmm, GmmAggregation, GmmOptions};
pub use kmeans::{kmeans_fit, KMeansCodebook, KMeansOptions};
pub use pca::{pca_fit, pca_transform, PcaModel, PcaOptions};
