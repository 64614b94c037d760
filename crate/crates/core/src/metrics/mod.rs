//! Objective evaluation: Fréchet distance and KL divergence over internal
//! embeddings, windowed mel similarity, and embedding cosine matrices.

mod evaluate;
mod stats;

pub use evaluate::{
    evaluate_run, EncoderEmbedder, Embedder, EvalConfig, FileError, FileMetrics, GenerationRecord, MetricsReport,
    PrecomputedEmbeddings, GENERATION_FILE,
};
pub use stats::{
    embedding_cosine, embedding_cosine_matrix, frechet_distance, frechet_from_moments, kl_pairs, matrix_sqrt_psd,
    mean_and_covariance, mel_sim_max, softmax, KL_FLOOR,
};
