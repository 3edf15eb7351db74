//! Domain similarity, significance testing, hidden-state export with a 2-D
//! projection, and result aggregation.

mod hidden;
mod pca;
mod results;
mod similarity;
mod stats;

pub use hidden::{extract_hidden, hidden_to_csv, read_hidden_matrix, write_hidden_matrix, Pooling};
pub use pca::{pca_project_2d, Projection, PCA_MAX_ITER, PCA_TOL};
pub use results::{aggregate_results, CellStats, ResultTable, RunRecord, AVG_SCHEME};
pub use similarity::{domain_similarity, similarity_matrix, SimilarityMatrix, DEFAULT_TOP_K};
pub use stats::{ln_gamma, regularized_incomplete_beta, student_t_cdf, welch_t_test, WelchTest};
