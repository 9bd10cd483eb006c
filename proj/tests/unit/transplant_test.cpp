#include "tsteer/transplant.hpp"

#include <cmath>
#include <filesystem>
#include <future>
#include <thread>

#include <gtest/gtest.h>

#include "tsteer/dataset.hpp"
#include "tsteer/rng.hpp"

namespace tsteer {
namespace {

ActivationTensor random_activation(std::uint64_t seed, std::size_t n, std::size_t t, std::size_t d, int layer = 1) {
    Rng rng(seed);
    ActivationTensor a(layer, n, t, d);
    for (double& v : a.data) v = 3.0 * rng.normal() + 0.5;
    return a;
}

// Straight-line per-unit statistics.
void unit_stats(const ActivationTensor& a, std::size_t n, std::size_t d, double& mean, double& sd) {
    double s = 0.0;
    for (std::size_t t = 0; t < a.tokens; ++t) s += a.at(n, t, d);
    mean = s / static_cast<double>(a.tokens);
    double q = 0.0;
    for (std::size_t t = 0; t < a.tokens; ++t) q += (a.at(n, t, d) - mean) * (a.at(n, t, d) - mean);
    sd = std::sqrt(q / static_cast<double>(a.tokens));
}

TEST(ExtractSignatureTest, TwoPointPopulationStd) {
    ActivationTensor a(1, 1, 2, 1);
    a.data = {1.0, 3.0};
    const SemanticSignature s = extract_signature(a);
    EXPECT_DOUBLE_EQ(s.mu(0, 0), 2.0);
    EXPECT_DOUBLE_EQ(s.sigma(0, 0), 1.0);
}

TEST(ExtractSignatureTest, ConstantOverTimeHasZeroSigma) {
    ActivationTensor a(2, 1, 5, 3);
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t d = 0; d < 3; ++d) a.at(0, t, d) = 0.1 * static_cast<double>(d) + 7.3;
    const SemanticSignature s = extract_signature(a);
    EXPECT_EQ(s.sigma, Mat::Zero(1, 3));
    EXPECT_EQ(s.layer, 2);
}

TEST(ExtractSignatureTest, MatchesScalarLoop) {
    const ActivationTensor a = random_activation(5, 1, 4, 8);
    const SemanticSignature s = extract_signature(a, "rand");
    EXPECT_EQ(s.label, "rand");
    for (std::size_t d = 0; d < 8; ++d) {
        double m, sd;
        unit_stats(a, 0, d, m, sd);
        EXPECT_NEAR(s.mu(0, static_cast<Eigen::Index>(d)), m, 1e-12);
        EXPECT_NEAR(s.sigma(0, static_cast<Eigen::Index>(d)), sd, 1e-12);
    }
}

TEST(ExtractSignatureTest, NoTokensRejected) { EXPECT_THROW(extract_signature(ActivationTensor(1, 1, 0, 2)), std::invalid_argument); }

TEST(TransplantTest, HandComputedTwoTokens) {
    ActivationTensor a(1, 1, 2, 1);
    a.data = {1.0, 3.0};
    SemanticSignature style{1, Mat::Constant(1, 1, 10.0), Mat::Constant(1, 1, 2.0), "s"};
    const ActivationTensor out = transplant(a, style, 0.0);
    EXPECT_DOUBLE_EQ(out.data[0], 8.0);
    EXPECT_DOUBLE_EQ(out.data[1], 12.0);
}

TEST(TransplantTest, SelfSignatureIsNearIdentity) {
    const ActivationTensor a = random_activation(6, 1, 8, 16);
    const SemanticSignature own = extract_signature(a);
    const double eps = 1e-5;
    const ActivationTensor out = transplant(a, own, eps);
    for (std::size_t d = 0; d < 16; ++d) {
        const double sd = own.sigma(0, static_cast<Eigen::Index>(d));
        for (std::size_t t = 0; t < 8; ++t) {
            const double x = a.at(0, t, d), y = out.at(0, t, d);
            // |y - x| = |x - mu| * eps / (sd + eps)
            EXPECT_LE(std::abs(y - x), std::abs(x - own.mu(0, static_cast<Eigen::Index>(d))) * eps / sd + 1e-12);
        }
    }
}

TEST(TransplantTest, ConstantTargetBecomesStyleMean) {
    ActivationTensor a(1, 1, 4, 2);
    for (double& v : a.data) v = 4.0;
    SemanticSignature style{1, Mat::Constant(1, 2, -1.5), Mat::Constant(1, 2, 3.0), ""};
    const ActivationTensor out = transplant(a, style, 1e-5);
    for (double v : out.data) EXPECT_EQ(v, -1.5);
}

TEST(TransplantTest, ShapeAndLayerMismatchRejected) {
    const ActivationTensor a = random_activation(7, 1, 4, 8, 2);
    const SemanticSignature wrong_width = extract_signature(random_activation(8, 1, 4, 6, 2));
    const SemanticSignature wrong_layer = extract_signature(random_activation(9, 1, 4, 8, 3));
    EXPECT_THROW(transplant(a, wrong_width), std::invalid_argument);
    EXPECT_THROW(transplant(a, wrong_layer), std::invalid_argument);
    EXPECT_THROW(transplant(a, extract_signature(a), -1.0), std::invalid_argument);
}

TEST(TransplantProperties, MomentsStructureAndComposition) {
    const double eps = 1e-5;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const std::size_t n = 1 + seed % 2, t = 2 + seed % 7, d = 1 + seed % 9;
        const ActivationTensor target = random_activation(1000 + seed, n, t, d);
        const ActivationTensor style_act = random_activation(2000 + seed, n, t + 1, d);
        const SemanticSignature style = extract_signature(style_act);
        const SemanticSignature own = extract_signature(target);
        const ActivationTensor out = transplant(target, style, eps);
        const SemanticSignature got = extract_signature(out);
        for (Eigen::Index v = 0; v < static_cast<Eigen::Index>(n); ++v)
            for (Eigen::Index u = 0; u < static_cast<Eigen::Index>(d); ++u) {
                ASSERT_NEAR(got.mu(v, u), style.mu(v, u), 1e-6);
                const double expected_sd = style.sigma(v, u) * own.sigma(v, u) / (own.sigma(v, u) + eps);
                ASSERT_NEAR(got.sigma(v, u), expected_sd, 1e-6);

                // Pearson correlation of each unit's token profile before and after.
                double mx = own.mu(v, u), my = got.mu(v, u), sxy = 0.0;
                for (std::size_t k = 0; k < t; ++k)
                    sxy += (target.at(static_cast<std::size_t>(v), k, static_cast<std::size_t>(u)) - mx) *
                           (out.at(static_cast<std::size_t>(v), k, static_cast<std::size_t>(u)) - my);
                if (own.sigma(v, u) > 1e-3 && got.sigma(v, u) > 1e-12)
                    ASSERT_NEAR(sxy / static_cast<double>(t) / (own.sigma(v, u) * got.sigma(v, u)), 1.0, 1e-6);
            }

        // Re-extraction returns the style mean; composing with a second style
        // lands on the same moments as applying it directly.
        const SemanticSignature other = extract_signature(random_activation(3000 + seed, n, t, d));
        const SemanticSignature twice = extract_signature(transplant(out, other, eps));
        const SemanticSignature direct = extract_signature(transplant(target, other, eps));
        ASSERT_LT((twice.mu - direct.mu).cwiseAbs().maxCoeff(), 1e-6);
        // The eps factor applies twice on the composed path; where both stds are
        // >= 0.1 it contributes under 1e-4 relative.
        for (Eigen::Index i = 0; i < direct.sigma.size(); ++i)
            if (own.sigma.data()[i] >= 0.1 && got.sigma.data()[i] >= 0.1)
                ASSERT_NEAR(twice.sigma.data()[i], direct.sigma.data()[i], 1e-4 * direct.sigma.data()[i]);
    }
}

TEST(SignatureNormTest, ZeroAndHomogeneity) {
    SemanticSignature z{1, Mat::Zero(1, 4), Mat::Zero(1, 4), ""};
    EXPECT_EQ(signature_norm(z), 0.0);
    const SemanticSignature s = extract_signature(random_activation(11, 1, 5, 4));
    SemanticSignature scaled = s;
    scaled.mu *= 2.5;
    scaled.sigma *= 2.5;
    EXPECT_NEAR(signature_norm(scaled), 2.5 * signature_norm(s), 1e-12);
    EXPECT_NEAR(signature_norm(s), std::sqrt(s.mu.squaredNorm() + s.sigma.squaredNorm()), 1e-12);
    EXPECT_NEAR(signature_norm(s, NormMode::mean_only), s.mu.norm(), 1e-12);
    EXPECT_NEAR(signature_norm(s, NormMode::std_only), s.sigma.norm(), 1e-12);
    for (NormMode m : {NormMode::mean_and_std, NormMode::mean_only, NormMode::std_only})
        EXPECT_EQ(norm_mode_from_string(to_string(m)), m);
    EXPECT_THROW(norm_mode_from_string("l1"), std::invalid_argument);
}

TEST(AverageSignaturesTest, EntrywiseMean) {
    const SemanticSignature a = extract_signature(random_activation(12, 1, 5, 4), "a");
    const SemanticSignature b = extract_signature(random_activation(13, 1, 5, 4), "b");
    const SemanticSignature m = average_signatures({a, b}, "avg");
    for (Eigen::Index j = 0; j < 4; ++j) {
        EXPECT_NEAR(m.mu(0, j), (a.mu(0, j) + b.mu(0, j)) / 2, 1e-15);
        EXPECT_NEAR(m.sigma(0, j), (a.sigma(0, j) + b.sigma(0, j)) / 2, 1e-15);
    }
    EXPECT_EQ(m.label, "avg");
    EXPECT_EQ(average_signatures({a}).mu, a.mu);
    EXPECT_THROW(average_signatures({}), std::invalid_argument);
    SemanticSignature other = b;
    other.layer = a.layer + 1;
    EXPECT_THROW(average_signatures({a, other}), std::invalid_argument);
}

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 3;
    c.d_model = 16;
    c.n_heads = 2;
    c.patch_size = 8;
    c.context_len = 64;
    c.horizon = 8;
    return c;
}

TEST(InterveneTest, IdentityStyleLeavesForecastUnchanged) {
    const Parameters p = build(small_config(), 2);
    const auto target = synthetic_context(1.0, true, 64, 4);
    for (int layer = 1; layer <= 3; ++layer) {
        const ForecastDistribution base = sample_forecast(forward(p, target).head, 256, 9, context_stats(target, p.config()));
        const ForecastDistribution same =
            intervened_forecast(p, target, std::span<const double>(target), layer, 1e-5, 256, 9);
        for (std::size_t h = 0; h < base.horizon(); ++h)
            EXPECT_NEAR(same.median[h], base.median[h], 1e-4 * std::abs(base.median[h])) << "layer " << layer;
    }
}

TEST(InterveneTest, StoredSignatureMatchesContextStyle) {
    const Parameters p = build(small_config(), 3);
    const auto target = synthetic_context(1.0, true, 64, 5);
    const auto style = synthetic_context(2.0, false, 64, 6);
    const SemanticSignature sig = context_signature(p, style, 2, "crash");
    const InterventionResult a = intervene(p, target, std::span<const double>(style), 2);
    const InterventionResult b = intervene(p, target, sig, 2);
    EXPECT_EQ(a.intervened_head, b.intervened_head);
    EXPECT_NE(a.intervened_head, a.baseline_head);
}

TEST(InterveneTest, LayerOutOfRangeRejected) {
    const Parameters p = build(small_config(), 3);
    const auto target = synthetic_context(1.0, true, 64, 5);
    EXPECT_THROW(intervene(p, target, std::span<const double>(target), 0), std::out_of_range);
    EXPECT_THROW(intervene(p, target, std::span<const double>(target), 4), std::out_of_range);
    const SemanticSignature at2 = context_signature(p, target, 2);
    EXPECT_THROW(intervene(p, target, at2, 1), std::invalid_argument);
}

TEST(SignatureFileTest, RoundTripAndCorruption) {
    SemanticSignature s = extract_signature(random_activation(12, 1, 4, 6, 3), "2008 Crash");
    s.mu = s.mu.cast<float>().cast<double>();
    s.sigma = s.sigma.cast<float>().cast<double>();
    const std::string bytes = encode_signature(s);
    EXPECT_EQ(bytes.substr(0, 4), "SSIG");
    EXPECT_EQ(bytes.size(), 4 + 4 + 4 + 16 + 2 * 6 * 4 + 8 + s.label.size());
    EXPECT_EQ(decode_signature(bytes), s);
    EXPECT_THROW(decode_signature(bytes.substr(0, bytes.size() - 1)), FormatError);
    EXPECT_THROW(decode_signature("XSIG" + bytes.substr(4)), FormatError);

    const auto path = std::filesystem::temp_directory_path() / "tsteer_sig_test.ssig";
    save_signature(s, path);
    EXPECT_EQ(load_signature(path), s);
    std::filesystem::remove(path);
}

TEST(SignatureCacheTest, ComputesOncePerKeyUnderContention) {
    SignatureCache cache;
    std::atomic<int> computed{0};
    const SemanticSignature s = extract_signature(random_activation(13, 1, 4, 4));
    std::vector<std::thread> threads;
    for (int i = 0; i < 8; ++i)
        threads.emplace_back([&] {
            for (int k = 0; k < 50; ++k) {
                const auto got = cache.get_or_compute({"hash", 1 + k % 2, "x"}, [&] {
                    ++computed;
                    return s;
                });
                ASSERT_EQ(got, s);
            }
        });
    for (auto& t : threads) t.join();
    EXPECT_EQ(computed.load(), 2);
    EXPECT_EQ(cache.size(), 2u);
    EXPECT_TRUE(cache.find({"hash", 1, "x"}));
    EXPECT_FALSE(cache.find({"other", 1, "x"}));
}

TEST(SignatureCacheTest, SlowFillDoesNotBlockOtherKeys) {
    SignatureCache cache;
    const SemanticSignature s = extract_signature(random_activation(14, 1, 4, 4));
    std::promise<void> release;
    std::shared_future<void> gate = release.get_future().share();
    std::atomic<bool> started{false};
    std::thread slow([&] {
        cache.get_or_compute({"hash", 1, "slow"}, [&] {
            started = true;
            gate.wait();
            return s;
        });
    });
    while (!started) std::this_thread::yield();
    EXPECT_FALSE(cache.find({"hash", 1, "slow"}));
    EXPECT_EQ(cache.get_or_compute({"hash", 1, "fast"}, [&] { return s; }), s);
    EXPECT_EQ(cache.size(), 1u);
    release.set_value();
    slow.join();
    EXPECT_EQ(cache.size(), 2u);
}

TEST(SignatureCacheTest, FailedFillLeavesNoEntry) {
    SignatureCache cache;
    const SemanticSignature s = extract_signature(random_activation(15, 1, 4, 4));
    EXPECT_THROW(cache.get_or_compute({"h", 1, "x"}, []() -> SemanticSignature { throw std::runtime_error("boom"); }),
                 std::runtime_error);
    EXPECT_EQ(cache.size(), 0u);
    EXPECT_EQ(cache.get_or_compute({"h", 1, "x"}, [&] { return s; }), s);
}

}  // namespace
}  // namespace tsteer
