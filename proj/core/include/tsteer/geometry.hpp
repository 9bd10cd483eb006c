#pragma once

#include <string>
#include <vector>

#include "tsteer/model.hpp"

namespace tsteer {

struct PcaModel {
    Mat components;                        // k x D, orthonormal rows
    RowVec mean;                           // D
    std::vector<double> explained_ratio;   // k, descending
    std::vector<double> eigenvalues;       // k, covariance eigenvalues (1/M normalization)

    int k() const { return static_cast<int>(components.rows()); }
};

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Eigenvalues come back
/// descending with matching eigenvector columns.
struct SymmetricEigen {
    std::vector<double> values;
    Mat vectors;  // columns
};
SymmetricEigen jacobi_eigen(const Mat& symmetric, double tol = 1e-14, int max_sweeps = 100);

/// Top-k principal directions of `data` (M x D). Each component's largest-magnitude
/// coordinate is made positive.
PcaModel pca_fit(const Mat& data, int k);

/// (data - mean) * components^T.
Mat project(const PcaModel& model, const Mat& data);
Mat reconstruct(const PcaModel& model, const Mat& projected);

/// Mean over rows of the per-row cosine similarity.
double cosine_rows(const Mat& a, const Mat& b);

struct SimilarityMatrix {
    std::vector<std::string> row_labels;
    std::vector<std::string> col_labels;
    Mat values;

    std::string to_csv() const;
};

/// Unit of analysis for similarity.
///  - tokens: one row per (context, token position), paired by position.
///  - time_averaged: one row per context, the token-axis mean.
enum class VectorMode { tokens, time_averaged };

/// Rows of `contexts` activations at `layer`, stacked per the mode.
Mat gather_vectors(const std::vector<ActivationTensor>& acts, VectorMode mode);

/// Pooled-PCA cosine similarity between two equally-shaped vector sets.
double pooled_similarity(const Mat& a, const Mat& b, int k);

/// Per-layer similarity of two context sets: a 1 x L matrix.
SimilarityMatrix layer_similarity_table(const Parameters& params, const std::vector<std::vector<double>>& set_a,
                                        const std::vector<std::vector<double>>& set_b, int k,
                                        VectorMode mode = VectorMode::tokens);

/// L x L matrix: entry (i, j) compares set A at layer i with set B at layer j.
SimilarityMatrix layer_cross_matrix(const Parameters& params, const std::vector<std::vector<double>>& set_a,
                                    const std::vector<std::vector<double>>& set_b, int k,
                                    VectorMode mode = VectorMode::tokens);

/// Similarity of two activation dumps taken at matching shapes.
double dump_similarity(const std::vector<ActivationTensor>& a, const std::vector<ActivationTensor>& b, int k,
                       VectorMode mode = VectorMode::tokens);

}  // namespace tsteer
