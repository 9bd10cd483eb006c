#include "tsteer/geometry.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "tsteer/format.hpp"

namespace tsteer {

SymmetricEigen jacobi_eigen(const Mat& s, double tol, int max_sweeps) {
    const Eigen::Index n = s.rows();
    if (s.cols() != n) throw std::invalid_argument("jacobi_eigen: matrix is not square");
    Mat a = 0.5 * (s + s.transpose());
    Mat v = Mat::Identity(n, n);
    const double scale = std::max(a.cwiseAbs().maxCoeff(), 1e-300);
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (Eigen::Index p = 0; p < n; ++p)
            for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (std::sqrt(off) <= tol * scale) break;
        for (Eigen::Index p = 0; p < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), sn = t * c;
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - sn * akq;
                    a(k, q) = sn * akp + c * akq;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - sn * aqk;
                    a(q, k) = sn * apk + c * aqk;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - sn * vkq;
                    v(k, q) = sn * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return a(i, i) > a(j, j); });
    SymmetricEigen out;
    out.vectors.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        out.values.push_back(a(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(i)]));
        out.vectors.col(i) = v.col(order[static_cast<std::size_t>(i)]);
    }
    return out;
}

PcaModel pca_fit(const Mat& data, int k) {
    const Eigen::Index m = data.rows(), d = data.cols();
    if (m < 2) throw std::invalid_argument("pca_fit needs at least 2 rows");
    if (k < 1 || k > std::min(m, d))
        throw std::invalid_argument("pca_fit: k=" + std::to_string(k) + " outside [1, min(M=" + std::to_string(m) +
                                    ", D=" + std::to_string(d) + ")]");
    if (!data.allFinite()) throw std::invalid_argument("pca_fit: non-finite data");
    PcaModel model;
    model.mean = data.colwise().mean();
    const Mat centered = data.rowwise() - model.mean;
    const Mat cov = (centered.transpose() * centered) / static_cast<double>(m);
    const double total = cov.trace();
    if (!(total > 0.0)) throw std::invalid_argument("pca_fit: data has zero variance");
    const SymmetricEigen eig = jacobi_eigen(cov);
    model.components.resize(k, d);
    for (int i = 0; i < k; ++i) {
        RowVec c = eig.vectors.col(i).transpose();
        Eigen::Index arg = 0;
        c.cwiseAbs().maxCoeff(&arg);
        if (c(arg) < 0) c = -c;
        model.components.row(i) = c;
        const double lambda = std::max(eig.values[static_cast<std::size_t>(i)], 0.0);
        model.eigenvalues.push_back(lambda);
        model.explained_ratio.push_back(lambda / total);
    }
    return model;
}

Mat project(const PcaModel& model, const Mat& data) {
    if (data.cols() != model.mean.size())
        throw std::invalid_argument("project: data has " + std::to_string(data.cols()) + " columns, model expects " +
                                    std::to_string(model.mean.size()));
    return (data.rowwise() - model.mean) * model.components.transpose();
}

Mat reconstruct(const PcaModel& model, const Mat& projected) {
    if (projected.cols() != model.components.rows()) throw std::invalid_argument("reconstruct: wrong column count");
    return (projected * model.components).rowwise() + model.mean;
}

double cosine_rows(const Mat& a, const Mat& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("cosine_rows: shape mismatch");
    if (a.rows() == 0) throw std::invalid_argument("cosine_rows: no rows");
    double sum = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const double na = a.row(i).norm(), nb = b.row(i).norm();
        if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_rows: zero-norm row " + std::to_string(i));
        sum += a.row(i).dot(b.row(i)) / (na * nb);
    }
    return sum / static_cast<double>(a.rows());
}

std::string SimilarityMatrix::to_csv() const {
    std::string out = "label";
    for (const auto& c : col_labels) out += "," + c;
    out += "\n";
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
        out += row_labels[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < values.cols(); ++j) out += "," + format_double(values(i, j));
        out += "\n";
    }
    return out;
}

Mat gather_vectors(const std::vector<ActivationTensor>& acts, VectorMode mode) {
    if (acts.empty()) throw std::invalid_argument("gather_vectors: empty set");
    const ActivationTensor& first = acts.front();
    const std::size_t per = mode == VectorMode::tokens ? first.variates * first.tokens : first.variates;
    Mat out(static_cast<Eigen::Index>(per * acts.size()), static_cast<Eigen::Index>(first.width));
    Eigen::Index row = 0;
    for (const auto& a : acts) {
        if (!a.same_shape(first)) throw std::invalid_argument("gather_vectors: activation shapes differ");
        for (std::size_t v = 0; v < a.variates; ++v) {
            const ConstMatMap x = a.variate(v);
            if (mode == VectorMode::tokens) {
                out.middleRows(row, x.rows()) = x;
                row += x.rows();
            } else {
                out.row(row++) = x.colwise().mean();
            }
        }
    }
    return out;
}

double pooled_similarity(const Mat& a, const Mat& b, int k) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("pooled_similarity: sets must have matching shapes for row alignment");
    Mat pooled(a.rows() + b.rows(), a.cols());
    pooled << a, b;
    const PcaModel pca = pca_fit(pooled, k);
    return cosine_rows(project(pca, a), project(pca, b));
}

namespace {

std::vector<std::vector<ActivationTensor>> activations_by_layer(const Parameters& params,
                                                                const std::vector<std::vector<double>>& set) {
    if (set.empty()) throw std::invalid_argument("context set is empty");
    std::vector<std::vector<ActivationTensor>> by_layer(static_cast<std::size_t>(params.config().n_layers));
    for (const auto& ctx : set) {
        ForwardResult fr = forward(params, ctx);
        for (std::size_t l = 0; l < by_layer.size(); ++l) by_layer[l].push_back(std::move(fr.activations[l]));
    }
    return by_layer;
}

std::vector<std::string> layer_labels(int n) {
    std::vector<std::string> out;
    for (int l = 1; l <= n; ++l) out.push_back("layer_" + std::to_string(l));
    return out;
}

}  // namespace

SimilarityMatrix layer_similarity_table(const Parameters& params, const std::vector<std::vector<double>>& set_a,
                                        const std::vector<std::vector<double>>& set_b, int k, VectorMode mode) {
    if (set_a.size() != set_b.size()) throw std::invalid_argument("context sets must have equal size");
    const auto acts_a = activations_by_layer(params, set_a);
    const auto acts_b = activations_by_layer(params, set_b);
    const int L = params.config().n_layers;
    SimilarityMatrix m{{"similarity"}, layer_labels(L), Mat(1, L)};
    for (int l = 0; l < L; ++l)
        m.values(0, l) = pooled_similarity(gather_vectors(acts_a[static_cast<std::size_t>(l)], mode),
                                           gather_vectors(acts_b[static_cast<std::size_t>(l)], mode), k);
    return m;
}

SimilarityMatrix layer_cross_matrix(const Parameters& params, const std::vector<std::vector<double>>& set_a,
                                    const std::vector<std::vector<double>>& set_b, int k, VectorMode mode) {
    if (set_a.size() != set_b.size()) throw std::invalid_argument("context sets must have equal size");
    const auto acts_a = activations_by_layer(params, set_a);
    const auto acts_b = activations_by_layer(params, set_b);
    const int L = params.config().n_layers;
    SimilarityMatrix m{layer_labels(L), layer_labels(L), Mat(L, L)};
    std::vector<Mat> va, vb;
    for (int l = 0; l < L; ++l) {
        va.push_back(gather_vectors(acts_a[static_cast<std::size_t>(l)], mode));
        vb.push_back(gather_vectors(acts_b[static_cast<std::size_t>(l)], mode));
    }
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j)
            m.values(i, j) = pooled_similarity(va[static_cast<std::size_t>(i)], vb[static_cast<std::size_t>(j)], k);
    return m;
}

double dump_similarity(const std::vector<ActivationTensor>& a, const std::vector<ActivationTensor>& b, int k,
                       VectorMode mode) {
    return pooled_similarity(gather_vectors(a, mode), gather_vectors(b, mode), k);
}

}  // namespace tsteer
