//! Decomposition of transformer hidden states into mean, positional, context
//! and residual parts, plus spectral, Fourier, incoherence, QK and weight
//! diagnostics built on top of it.
//!
//! Tensors are read from and written to a small self-describing container
//! format (see [`tensor_io`]). All arithmetic is done in `f64`.

pub mod attention;
pub mod decompose;
pub mod error;
pub mod fourier;
pub mod geometry;
pub mod kernel;
pub mod linalg;
pub mod report;
pub mod spectral;
pub mod synthetic;
pub mod tensor;
pub mod tensor_io;

pub use attention::{
    argmax_locality_ratio, attention_matrix, dissect_weights, kernel_smoothing_weights, pos_pos_constituent,
    qk_decompose, MuMode, QkConstituents, WeightDissection,
};
pub use decompose::{
    apply_artifacts, cross_layer_stats, decompose, decompose_owned, drop_artifacts, ArtifactOptions, CrossLayerStats, Decomposition,
    PositionalBasisMatrix,
};
pub use error::{Error, Result};
pub use fourier::{dct2, finite_difference, gram, thm1_verify, FrequencySummary, GramBundle, Thm1Certificate};
pub use geometry::{cluster_similarity, incoherence, joint_gram, pca_projection, PcaProjection, SimilarityReport};
pub use kernel::{run_thm2_trials, thm2_verify, KernelTestInstance, Thm2Config, Thm2Result, Thm2Summary};
pub use report::{run_ood_report, run_report, LayerRow, Report, RunConfig};
pub use spectral::{rank_estimate, relative_norm, singular_spectrum, stable_rank, RankMethod, SpectralSummary};
pub use synthetic::{generate, smooth_curve_basis, Planted, PlantedSpec};
pub use tensor::{AttentionWeights, EmbeddingTensor, Tensor3};
pub use tensor_io::{read_container, read_header, write_container, DType, Header, Kind, Payload, TensorContainer};
