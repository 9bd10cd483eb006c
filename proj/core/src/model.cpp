#include "tsteer/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "tsteer/rng.hpp"

namespace tsteer {

using nlohmann::json;

namespace {

constexpr double kLnEps = 1e-5;
constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kForecastStream = 0xf0ca57;
constexpr std::uint64_t kTrainStream = 0x7a1;
constexpr std::size_t kSlotsPerBlock = 16;

struct BlockSlots {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct Layout {
    std::size_t embed_w = 0, embed_b = 1, pos = 2;
    std::vector<BlockSlots> blocks;
    std::size_t lnf_g = 0, lnf_b = 0, head_w = 0, head_b = 0;
};

Layout layout_of(const ModelConfig& c) {
    Layout out;
    std::size_t s = 3;
    for (int l = 0; l < c.n_layers; ++l) {
        BlockSlots b{};
        b.ln1_g = s++; b.ln1_b = s++;
        b.wq = s++; b.bq = s++;
        b.wk = s++; b.bk = s++;
        b.wv = s++; b.bv = s++;
        b.wo = s++; b.bo = s++;
        b.ln2_g = s++; b.ln2_b = s++;
        b.w1 = s++; b.b1 = s++;
        b.w2 = s++; b.b2 = s++;
        out.blocks.push_back(b);
    }
    out.lnf_g = s++;
    out.lnf_b = s++;
    out.head_w = s++;
    out.head_b = s++;
    return out;
}

std::vector<TensorSlot> slots_for(const ModelConfig& c) {
    const auto D = static_cast<std::size_t>(c.d_model);
    const auto P = static_cast<std::size_t>(c.patch_size);
    const auto T = static_cast<std::size_t>(c.tokens());
    const auto F = static_cast<std::size_t>(c.ffn_width());
    const auto H = static_cast<std::size_t>(c.horizon);

    std::vector<TensorSlot> slots;
    std::size_t offset = 0;
    auto add = [&](std::string name, std::size_t r, std::size_t cols) {
        slots.push_back({std::move(name), r, cols, offset});
        offset += r * cols;
    };
    add("embed.weight", P, D);
    add("embed.bias", 1, D);
    add("pos", T, D);
    for (int l = 1; l <= c.n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        add(p + "ln1.gain", 1, D);
        add(p + "ln1.bias", 1, D);
        add(p + "attn.wq", D, D);
        add(p + "attn.bq", 1, D);
        add(p + "attn.wk", D, D);
        add(p + "attn.bk", 1, D);
        add(p + "attn.wv", D, D);
        add(p + "attn.bv", 1, D);
        add(p + "attn.wo", D, D);
        add(p + "attn.bo", 1, D);
        add(p + "ln2.gain", 1, D);
        add(p + "ln2.bias", 1, D);
        add(p + "ffn.w1", D, F);
        add(p + "ffn.b1", 1, F);
        add(p + "ffn.w2", F, D);
        add(p + "ffn.b2", 1, D);
    }
    add("final_ln.gain", 1, D);
    add("final_ln.bias", 1, D);
    add("head.weight", D, 2 * H);
    add("head.bias", 1, 2 * H);
    return slots;
}

// ---------------------------------------------------------------------------
// Kernels

struct LnCache {
    Mat xhat;
    Eigen::VectorXd rstd;
};

Mat layer_norm(const Mat& x, ConstMatMap gain, ConstMatMap bias, LnCache* cache) {
    const Eigen::Index rows = x.rows();
    const auto d = static_cast<double>(x.cols());
    Mat xhat(rows, x.cols());
    Eigen::VectorXd rstd(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const double mean = x.row(i).sum() / d;
        const double var = (x.row(i).array() - mean).square().sum() / d;
        rstd(i) = 1.0 / std::sqrt(var + kLnEps);
        xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
    }
    Mat y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

Mat layer_norm_backward(const Mat& dy, const LnCache& c, ConstMatMap gain, MatMap dgain, MatMap dbias) {
    const auto d = static_cast<double>(dy.cols());
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        dgain.row(0).array() += dy.row(i).array() * c.xhat.row(i).array();
        dbias.row(0) += dy.row(i);
        const RowVec dxhat = (dy.row(i).array() * gain.row(0).array()).matrix();
        const double mean_dxhat = dxhat.sum() / d;
        const double mean_dxhat_xhat = (dxhat.array() * c.xhat.row(i).array()).sum() / d;
        dx.row(i) = c.rstd(i) * (dxhat.array() - mean_dxhat - c.xhat.row(i).array() * mean_dxhat_xhat);
    }
    return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

Mat affine(const Mat& x, ConstMatMap w, ConstMatMap b) {
    Mat y = x * w;
    y.rowwise() += b.row(0);
    return y;
}

struct BlockCache {
    LnCache ln1, ln2;
    Mat u, q, k, v, attn, h1, u2, a, g;
    std::vector<Mat> probs;  // per head, tokens x tokens
};

Mat block_forward(const Parameters& p, const BlockSlots& s, const Mat& h, BlockCache* cache) {
    const ModelConfig& c = p.config();
    const Eigen::Index T = h.rows();
    const Eigen::Index dh = c.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    LnCache ln1;
    Mat u = layer_norm(h, p.tensor(s.ln1_g), p.tensor(s.ln1_b), cache ? &ln1 : nullptr);
    Mat q = affine(u, p.tensor(s.wq), p.tensor(s.bq));
    Mat k = affine(u, p.tensor(s.wk), p.tensor(s.bk));
    Mat v = affine(u, p.tensor(s.wv), p.tensor(s.bv));

    Mat attn(T, h.cols());
    std::vector<Mat> probs;
    for (int head = 0; head < c.n_heads; ++head) {
        const Eigen::Index off = head * dh;
        Mat scores = q.middleCols(off, dh) * k.middleCols(off, dh).transpose() * inv_sqrt;
        Mat prob = Mat::Zero(T, T);
        for (Eigen::Index i = 0; i < T; ++i) {
            const double mx = scores.row(i).head(i + 1).maxCoeff();
            double sum = 0.0;
            for (Eigen::Index j = 0; j <= i; ++j) {
                prob(i, j) = std::exp(scores(i, j) - mx);
                sum += prob(i, j);
            }
            prob.row(i).head(i + 1) /= sum;
        }
        attn.middleCols(off, dh) = prob * v.middleCols(off, dh);
        if (cache) probs.push_back(std::move(prob));
    }

    Mat h1 = h + affine(attn, p.tensor(s.wo), p.tensor(s.bo));
    LnCache ln2;
    Mat u2 = layer_norm(h1, p.tensor(s.ln2_g), p.tensor(s.ln2_b), cache ? &ln2 : nullptr);
    Mat a = affine(u2, p.tensor(s.w1), p.tensor(s.b1));
    Mat g = a.unaryExpr([](double x) { return gelu(x); });
    Mat out = h1 + affine(g, p.tensor(s.w2), p.tensor(s.b2));

    if (cache) {
        cache->ln1 = std::move(ln1);
        cache->ln2 = std::move(ln2);
        cache->u = std::move(u);
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attn = std::move(attn);
        cache->h1 = std::move(h1);
        cache->u2 = std::move(u2);
        cache->a = std::move(a);
        cache->g = std::move(g);
        cache->probs = std::move(probs);
    }
    return out;
}

/// Returns d(loss)/d(h) for the block input; accumulates parameter gradients.
Mat block_backward(const Parameters& p, const BlockSlots& s, const BlockCache& c, const Mat& dout, Parameters& gr) {
    const ModelConfig& cfg = p.config();
    const Eigen::Index T = dout.rows();
    const Eigen::Index hd = cfg.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    // Feed-forward residual branch.
    Mat dh1 = dout;
    gr.tensor(s.w2).noalias() += c.g.transpose() * dout;
    gr.tensor(s.b2).row(0) += dout.colwise().sum();
    Mat dg = dout * p.tensor(s.w2).transpose();
    Mat da = dg.array() * c.a.unaryExpr([](double x) { return gelu_grad(x); }).array();
    gr.tensor(s.w1).noalias() += c.u2.transpose() * da;
    gr.tensor(s.b1).row(0) += da.colwise().sum();
    Mat du2 = da * p.tensor(s.w1).transpose();
    dh1 += layer_norm_backward(du2, c.ln2, p.tensor(s.ln2_g), gr.tensor(s.ln2_g), gr.tensor(s.ln2_b));

    // Attention residual branch.
    Mat dh = dh1;
    gr.tensor(s.wo).noalias() += c.attn.transpose() * dh1;
    gr.tensor(s.bo).row(0) += dh1.colwise().sum();
    Mat dattn = dh1 * p.tensor(s.wo).transpose();

    Mat dq(T, dout.cols()), dk(T, dout.cols()), dv(T, dout.cols());
    for (int head = 0; head < cfg.n_heads; ++head) {
        const Eigen::Index off = head * hd;
        const Mat& prob = c.probs[static_cast<std::size_t>(head)];
        const Mat dO = dattn.middleCols(off, hd);
        Mat dprob = dO * c.v.middleCols(off, hd).transpose();
        dv.middleCols(off, hd) = prob.transpose() * dO;
        Mat dscores = Mat::Zero(T, T);
        for (Eigen::Index i = 0; i < T; ++i) {
            const double dot = (dprob.row(i).head(i + 1).array() * prob.row(i).head(i + 1).array()).sum();
            for (Eigen::Index j = 0; j <= i; ++j) dscores(i, j) = prob(i, j) * (dprob(i, j) - dot);
        }
        dscores *= inv_sqrt;
        dq.middleCols(off, hd) = dscores * c.k.middleCols(off, hd);
        dk.middleCols(off, hd) = dscores.transpose() * c.q.middleCols(off, hd);
    }
    gr.tensor(s.wq).noalias() += c.u.transpose() * dq;
    gr.tensor(s.bq).row(0) += dq.colwise().sum();
    gr.tensor(s.wk).noalias() += c.u.transpose() * dk;
    gr.tensor(s.bk).row(0) += dk.colwise().sum();
    gr.tensor(s.wv).noalias() += c.u.transpose() * dv;
    gr.tensor(s.bv).row(0) += dv.colwise().sum();
    Mat du = dq * p.tensor(s.wq).transpose();
    du.noalias() += dk * p.tensor(s.wk).transpose();
    du.noalias() += dv * p.tensor(s.wv).transpose();
    dh += layer_norm_backward(du, c.ln1, p.tensor(s.ln1_g), gr.tensor(s.ln1_g), gr.tensor(s.ln1_b));
    return dh;
}

Mat patches_of(std::span<const double> normalized, const ModelConfig& c) {
    Mat patches(c.tokens(), c.patch_size);
    for (int t = 0; t < c.tokens(); ++t)
        for (int j = 0; j < c.patch_size; ++j)
            patches(t, j) = normalized[static_cast<std::size_t>(t * c.patch_size + j)];
    return patches;
}

Mat embed(const Parameters& p, const Layout& lay, const Mat& patches) {
    Mat x = affine(patches, p.tensor(lay.embed_w), p.tensor(lay.embed_b));
    x += p.tensor(lay.pos);
    return x;
}

/// Final norm and Gaussian head on the readout token. Returns a 1 x 2H row.
RowVec head_forward(const Parameters& p, const Layout& lay, const Mat& h_last, LnCache* cache, Mat* y_out) {
    Mat last = p.config().readout == Readout::mean_pool ? Mat(h_last.colwise().mean()) : Mat(h_last.bottomRows(1));
    Mat y = layer_norm(last, p.tensor(lay.lnf_g), p.tensor(lay.lnf_b), cache);
    RowVec out = affine(y, p.tensor(lay.head_w), p.tensor(lay.head_b)).row(0);
    if (y_out) *y_out = std::move(y);
    return out;
}

void check_finite(const Mat& m, int layer, const char* where) {
    if (!m.allFinite())
        throw NonFiniteError(layer, std::string("non-finite value in ") + where + " at layer " + std::to_string(layer));
}

std::vector<double> normalize_context(std::span<const double> ctx, const NormStats& st, const ModelConfig& c) {
    std::vector<double> z(ctx.size());
    if (c.input == InputMode::levels) {
        for (std::size_t i = 0; i < ctx.size(); ++i) z[i] = st.normalize(ctx[i]);
    } else {
        for (std::size_t i = 1; i < ctx.size(); ++i) z[i] = (ctx[i] - ctx[i - 1]) / st.scale;
    }
    return z;
}

}  // namespace

// ---------------------------------------------------------------------------

bool ActivationTensor::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (n_layers < 1) fail("n_layers must be >= 1");
    if (d_model < 2 || d_model % 2 != 0) fail("d_model must be even and >= 2");
    if (n_heads < 1 || d_model % n_heads != 0)
        fail("n_heads=" + std::to_string(n_heads) + " does not divide d_model=" + std::to_string(d_model));
    if (patch_size < 1) fail("patch_size must be >= 1");
    if (context_len < patch_size || context_len % patch_size != 0)
        fail("context_len=" + std::to_string(context_len) + " is not a multiple of patch_size=" +
             std::to_string(patch_size));
    if (horizon < 1) fail("horizon must be >= 1");
    if (ffn_mult < 1) fail("ffn_mult must be >= 1");
    if (!(scale_unit > 0.0)) fail("scale_unit must be > 0");
}

json ModelConfig::to_json() const {
    return json{{"n_layers", n_layers},
                {"d_model", d_model},
                {"n_heads", n_heads},
                {"patch_size", patch_size},
                {"context_len", context_len},
                {"horizon", horizon},
                {"ffn_mult", ffn_mult},
                {"seed", seed},
                {"normalization", normalization == Normalization::standard ? "standard" : "mean_scale"},
                {"scale_unit", scale_unit},
                {"anchor", anchor == Anchor::last_value ? "last_value" : "context_mean"},
                {"input", input == InputMode::levels ? "levels" : "returns"},
                {"readout", readout == Readout::last_token ? "last_token" : "mean_pool"}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig c;
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.context_len = j.value("context_len", c.context_len);
    c.horizon = j.value("horizon", c.horizon);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.seed = j.value("seed", c.seed);
    const std::string norm = j.value("normalization", std::string("mean_scale"));
    if (norm == "standard") c.normalization = Normalization::standard;
    else if (norm == "mean_scale") c.normalization = Normalization::mean_scale;
    else throw std::invalid_argument("model config: unknown normalization '" + norm + "'");
    c.scale_unit = j.value("scale_unit", c.scale_unit);
    const std::string anchor = j.value("anchor", std::string("last_value"));
    if (anchor == "last_value") c.anchor = Anchor::last_value;
    else if (anchor == "context_mean") c.anchor = Anchor::context_mean;
    else throw std::invalid_argument("model config: unknown anchor '" + anchor + "'");
    const std::string input = j.value("input", std::string("returns"));
    if (input == "levels") c.input = InputMode::levels;
    else if (input == "returns") c.input = InputMode::returns;
    else throw std::invalid_argument("model config: unknown input '" + input + "'");
    const std::string readout = j.value("readout", std::string("mean_pool"));
    if (readout == "last_token") c.readout = Readout::last_token;
    else if (readout == "mean_pool") c.readout = Readout::mean_pool;
    else throw std::invalid_argument("model config: unknown readout '" + readout + "'");
    c.validate();
    return c;
}

Parameters::Parameters(const ModelConfig& config) : config_(config) {
    config_.validate();
    slots_ = slots_for(config_);
    values_.assign(slots_.back().offset + slots_.back().size(), 0.0);
}

std::size_t Parameters::slot_index(const std::string& name) const {
    for (std::size_t i = 0; i < slots_.size(); ++i)
        if (slots_[i].name == name) return i;
    throw std::out_of_range("no parameter tensor named '" + name + "'");
}

MatMap Parameters::tensor(std::size_t slot) {
    const auto& s = slots_[slot];
    return MatMap(values_.data() + s.offset, static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
}

ConstMatMap Parameters::tensor(std::size_t slot) const {
    const auto& s = slots_[slot];
    return ConstMatMap(values_.data() + s.offset, static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
}

Parameters Parameters::zeros_like() const {
    Parameters out = *this;
    std::fill(out.values_.begin(), out.values_.end(), 0.0);
    return out;
}

void Parameters::round_to_float() {
    for (double& v : values_) v = static_cast<double>(static_cast<float>(v));
}

NormStats context_stats(std::span<const double> context, const ModelConfig& config) {
    const auto n = static_cast<double>(context.size());
    double mean = 0.0;
    for (double x : context) mean += x;
    mean /= n;
    double scale = 0.0;
    if (config.normalization == Normalization::standard) {
        for (double x : context) scale += (x - mean) * (x - mean);
        scale = std::sqrt(scale / n);
    } else {
        for (double x : context) scale += std::abs(x);
        scale = config.scale_unit * scale / n;
    }
    const double anchor = config.anchor == Anchor::last_value ? context.back() : mean;
    return NormStats{mean, std::max(scale, kScaleFloor), anchor};
}

Parameters build(const ModelConfig& config, std::uint64_t seed) {
    Parameters p(config);
    const Layout lay = layout_of(config);
    Rng rng(seed, kInitStream);

    auto init_weight = [&](std::size_t slot, double fan_in) {
        const double scale = 1.0 / std::sqrt(fan_in);
        for (double& v : p.tensor(slot).reshaped()) v = scale * rng.normal();
    };
    auto init_ones = [&](std::size_t slot) { p.tensor(slot).setOnes(); };

    init_weight(lay.embed_w, config.patch_size);
    init_weight(lay.pos, config.d_model);
    for (const auto& b : lay.blocks) {
        init_ones(b.ln1_g);
        init_weight(b.wq, config.d_model);
        init_weight(b.wk, config.d_model);
        init_weight(b.wv, config.d_model);
        init_weight(b.wo, config.d_model);
        init_ones(b.ln2_g);
        init_weight(b.w1, config.d_model);
        init_weight(b.w2, config.ffn_width());
    }
    init_ones(lay.lnf_g);
    init_weight(lay.head_w, config.d_model);
    return p;
}

ForwardResult forward(const Parameters& params, const Mat& contexts) {
    const ModelConfig& c = params.config();
    if (contexts.cols() != c.context_len)
        throw std::invalid_argument("context length " + std::to_string(contexts.cols()) + " != context_len " +
                                    std::to_string(c.context_len));
    if (!contexts.allFinite()) throw std::invalid_argument("context contains non-finite values");

    const Layout lay = layout_of(c);
    const auto N = static_cast<std::size_t>(contexts.rows());
    const auto T = static_cast<std::size_t>(c.tokens());
    const auto D = static_cast<std::size_t>(c.d_model);

    ForwardResult out;
    out.head.mean.resize(contexts.rows(), c.horizon);
    out.head.log_std.resize(contexts.rows(), c.horizon);
    for (int l = 1; l <= c.n_layers; ++l) out.activations.emplace_back(l, N, T, D);

    for (std::size_t n = 0; n < N; ++n) {
        std::vector<double> row(contexts.row(static_cast<Eigen::Index>(n)).begin(),
                                contexts.row(static_cast<Eigen::Index>(n)).end());
        const NormStats st = context_stats(row, c);
        out.stats.push_back(st);
        Mat h = embed(params, lay, patches_of(normalize_context(row, st, c), c));
        check_finite(h, 0, "embedding");
        for (int l = 1; l <= c.n_layers; ++l) {
            h = block_forward(params, lay.blocks[static_cast<std::size_t>(l - 1)], h, nullptr);
            check_finite(h, l, "block output");
            out.activations[static_cast<std::size_t>(l - 1)].variate(n) = h;
        }
        const RowVec o = head_forward(params, lay, h, nullptr, nullptr);
        out.head.mean.row(static_cast<Eigen::Index>(n)) = o.head(c.horizon);
        out.head.log_std.row(static_cast<Eigen::Index>(n)) = o.tail(c.horizon);
    }
    check_finite(out.head.mean, c.n_layers + 1, "head");
    check_finite(out.head.log_std, c.n_layers + 1, "head");
    return out;
}

ForwardResult forward(const Parameters& params, std::span<const double> context) {
    Mat m(1, static_cast<Eigen::Index>(context.size()));
    for (std::size_t i = 0; i < context.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = context[i];
    return forward(params, m);
}

HeadOutput forward_resume(const Parameters& params, const ActivationTensor& activation, int layer) {
    const ModelConfig& c = params.config();
    if (layer < 1 || layer > c.n_layers)
        throw std::out_of_range("resume layer " + std::to_string(layer) + " outside [1, " +
                                std::to_string(c.n_layers) + "]");
    if (activation.tokens != static_cast<std::size_t>(c.tokens()) ||
        activation.width != static_cast<std::size_t>(c.d_model) || activation.variates < 1)
        throw std::invalid_argument("activation shape does not match the model configuration");

    const Layout lay = layout_of(c);
    HeadOutput out;
    out.mean.resize(static_cast<Eigen::Index>(activation.variates), c.horizon);
    out.log_std.resize(static_cast<Eigen::Index>(activation.variates), c.horizon);
    for (std::size_t n = 0; n < activation.variates; ++n) {
        Mat h = activation.variate(n);
        for (int l = layer + 1; l <= c.n_layers; ++l) {
            h = block_forward(params, lay.blocks[static_cast<std::size_t>(l - 1)], h, nullptr);
            check_finite(h, l, "block output");
        }
        const RowVec o = head_forward(params, lay, h, nullptr, nullptr);
        out.mean.row(static_cast<Eigen::Index>(n)) = o.head(c.horizon);
        out.log_std.row(static_cast<Eigen::Index>(n)) = o.tail(c.horizon);
    }
    check_finite(out.mean, c.n_layers + 1, "head");
    check_finite(out.log_std, c.n_layers + 1, "head");
    return out;
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("quantile of an empty sample");
    std::sort(values.begin(), values.end());
    const double h = (static_cast<double>(values.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= values.size()) return values.back();
    const double frac = h - static_cast<double>(lo);
    const double v = values[lo] + frac * (values[lo + 1] - values[lo]);
    return std::clamp(v, values[lo], values[lo + 1]);
}

ForecastDistribution ForecastDistribution::from_samples(Mat samples) {
    ForecastDistribution d;
    const auto H = static_cast<std::size_t>(samples.cols());
    for (auto* v : {&d.median, &d.q5, &d.q25, &d.q75, &d.q95}) v->resize(H);
    std::vector<double> column(static_cast<std::size_t>(samples.rows()));
    for (std::size_t j = 0; j < H; ++j) {
        for (Eigen::Index i = 0; i < samples.rows(); ++i)
            column[static_cast<std::size_t>(i)] = samples(i, static_cast<Eigen::Index>(j));
        d.q5[j] = quantile(column, 0.05);
        d.q25[j] = quantile(column, 0.25);
        d.median[j] = quantile(column, 0.5);
        d.q75[j] = quantile(column, 0.75);
        d.q95[j] = quantile(column, 0.95);
    }
    d.samples = std::move(samples);
    return d;
}

ForecastDistribution sample_forecast(const HeadOutput& head, std::size_t n_samples, std::uint64_t seed,
                                     const NormStats& stats, std::size_t variate) {
    if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
    const auto row = static_cast<Eigen::Index>(variate);
    if (row >= head.mean.rows()) throw std::out_of_range("variate index out of range");
    const Eigen::Index H = head.mean.cols();

    std::vector<double> sd(static_cast<std::size_t>(H));
    for (Eigen::Index j = 0; j < H; ++j)
        sd[static_cast<std::size_t>(j)] = std::max(std::exp(head.log_std(row, j)), kScaleFloor);

    Rng rng(seed, kForecastStream);
    Mat samples(static_cast<Eigen::Index>(n_samples), H);
    for (Eigen::Index i = 0; i < samples.rows(); ++i)
        for (Eigen::Index j = 0; j < H; ++j)
            samples(i, j) = stats.forecast_value(head.mean(row, j) + sd[static_cast<std::size_t>(j)] * rng.normal());
    return ForecastDistribution::from_samples(std::move(samples));
}

double nll(const HeadOutput& head, const Mat& y) {
    const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    double total = 0.0;
    for (Eigen::Index n = 0; n < y.rows(); ++n)
        for (Eigen::Index j = 0; j < y.cols(); ++j) {
            const double s = head.log_std(n, j);
            const double r = (y(n, j) - head.mean(n, j)) * std::exp(-s);
            total += half_log_2pi + s + 0.5 * r * r;
        }
    return total / static_cast<double>(y.size());
}

namespace {

Mat normalized_target(std::span<const double> target, const NormStats& st, const ModelConfig& c) {
    if (target.size() != static_cast<std::size_t>(c.horizon))
        throw std::invalid_argument("target length " + std::to_string(target.size()) + " != horizon " +
                                    std::to_string(c.horizon));
    Mat y(1, c.horizon);
    for (int j = 0; j < c.horizon; ++j) y(0, j) = st.normalize_target(target[static_cast<std::size_t>(j)]);
    return y;
}

/// Adds the gradient of one sample's loss, scaled by `weight`, into `acc`. Returns the loss.
double accumulate_grad(const Parameters& p, std::span<const double> context, std::span<const double> target,
                       Parameters& acc, double weight) {
    const ModelConfig& c = p.config();
    if (context.size() != static_cast<std::size_t>(c.context_len))
        throw std::invalid_argument("context length does not match context_len");
    const Layout lay = layout_of(c);
    const NormStats st = context_stats(context, c);
    const Mat y = normalized_target(target, st, c);

    // Forward with caches.
    const Mat patches = patches_of(normalize_context(context, st, c), c);
    Mat h = embed(p, lay, patches);
    std::vector<BlockCache> caches(static_cast<std::size_t>(c.n_layers));
    for (int l = 0; l < c.n_layers; ++l)
        h = block_forward(p, lay.blocks[static_cast<std::size_t>(l)], h, &caches[static_cast<std::size_t>(l)]);
    LnCache lnf;
    Mat y_final;
    const RowVec o = head_forward(p, lay, h, &lnf, &y_final);

    // Loss and head gradient.
    const int H = c.horizon;
    const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    double total = 0.0;
    RowVec dout(2 * H);
    for (int j = 0; j < H; ++j) {
        const double mean = o(j);
        const double s = o(H + j);
        const double inv_var = std::exp(-2.0 * s);
        const double r = y(0, j) - mean;
        total += half_log_2pi + s + 0.5 * r * r * inv_var;
        dout(j) = -r * inv_var / H;
        dout(H + j) = (1.0 - r * r * inv_var) / H;
    }
    const double loss_value = total / H;
    dout *= weight;

    acc.tensor(lay.head_w).noalias() += y_final.transpose() * dout;
    acc.tensor(lay.head_b).row(0) += dout;
    Mat dy = dout * p.tensor(lay.head_w).transpose();
    Mat dlast = layer_norm_backward(dy, lnf, p.tensor(lay.lnf_g), acc.tensor(lay.lnf_g), acc.tensor(lay.lnf_b));

    Mat dh = Mat::Zero(h.rows(), h.cols());
    if (c.readout == Readout::mean_pool)
        dh.rowwise() = dlast.row(0) / static_cast<double>(h.rows());
    else
        dh.bottomRows(1) = dlast;
    for (int l = c.n_layers - 1; l >= 0; --l)
        dh = block_backward(p, lay.blocks[static_cast<std::size_t>(l)], caches[static_cast<std::size_t>(l)], dh, acc);

    acc.tensor(lay.pos) += dh;
    acc.tensor(lay.embed_w).noalias() += patches.transpose() * dh;
    acc.tensor(lay.embed_b).row(0) += dh.colwise().sum();
    return loss_value;
}

}  // namespace

double loss(const Parameters& params, std::span<const double> context, std::span<const double> target) {
    const ForwardResult fr = forward(params, context);
    return nll(fr.head, normalized_target(target, fr.stats.front(), params.config()));
}

Parameters grad(const Parameters& params, std::span<const double> context, std::span<const double> target,
                double* loss_out) {
    Parameters g = params.zeros_like();
    const double l = accumulate_grad(params, context, target, g, 1.0);
    if (loss_out) *loss_out = l;
    return g;
}

json TrainConfig::to_json() const {
    return json{{"steps", steps},         {"batch_size", batch_size}, {"learning_rate", learning_rate},
                {"beta1", beta1},         {"beta2", beta2},           {"adam_eps", adam_eps},
                {"clip_norm", clip_norm}, {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig t;
    t.steps = j.value("steps", t.steps);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.learning_rate = j.value("learning_rate", t.learning_rate);
    t.beta1 = j.value("beta1", t.beta1);
    t.beta2 = j.value("beta2", t.beta2);
    t.adam_eps = j.value("adam_eps", t.adam_eps);
    t.clip_norm = j.value("clip_norm", t.clip_norm);
    t.seed = j.value("seed", t.seed);
    return t;
}

TrainResult train(const ModelConfig& config, std::span<const TrainingSample> dataset, const TrainConfig& tc,
                  const TrainObserver& observer) {
    if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
    if (tc.batch_size < 1 || tc.steps < 0) throw std::invalid_argument("invalid batch size or step count");

    TrainResult result;
    result.params = build(config, config.seed);
    Parameters& p = result.params;
    Parameters g = p.zeros_like();
    std::vector<double> m(p.size(), 0.0), v(p.size(), 0.0);
    Rng rng(tc.seed, kTrainStream);
    const double w = 1.0 / tc.batch_size;

    for (int step = 1; step <= tc.steps; ++step) {
        std::fill(g.values().begin(), g.values().end(), 0.0);
        double batch_loss = 0.0;
        for (int b = 0; b < tc.batch_size; ++b) {
            const auto& s = dataset[rng.below(dataset.size())];
            batch_loss += w * accumulate_grad(p, s.context, s.target, g, w);
        }
        if (!std::isfinite(batch_loss))
            throw DivergenceError(step, "training diverged: non-finite loss at step " + std::to_string(step));

        double norm2 = 0.0;
        for (double x : g.values()) norm2 += x * x;
        const double norm = std::sqrt(norm2);
        const double clip = (tc.clip_norm > 0.0 && norm > tc.clip_norm) ? tc.clip_norm / norm : 1.0;

        const double bc1 = 1.0 - std::pow(tc.beta1, step);
        const double bc2 = 1.0 - std::pow(tc.beta2, step);
        auto& pv = p.values();
        const auto& gv = g.values();
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const double gi = gv[i] * clip;
            m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * gi;
            v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * gi * gi;
            pv[i] -= tc.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + tc.adam_eps);
        }
        result.loss_curve.push_back(batch_loss);
        if (observer) observer(step, batch_loss);
    }
    p.round_to_float();
    return result;
}

}  // namespace tsteer
