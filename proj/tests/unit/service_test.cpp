#include "tsteer/service.hpp"

#include <cmath>
#include <thread>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "tsteer/checkpoint.hpp"
#include "tsteer/dataset.hpp"
#include "tsteer/rng.hpp"

namespace tsteer {
namespace {

using nlohmann::json;

ModelConfig tiny_model() {
    ModelConfig c;
    c.n_layers = 3;
    c.d_model = 16;
    c.n_heads = 2;
    c.patch_size = 4;
    c.context_len = 32;
    c.horizon = 8;
    return c;
}

Parameters tiny_params() {
    Parameters p = build(tiny_model(), 21);
    p.round_to_float();
    return p;
}

// Daily synthetic prices from 2000-01-01 to 2000-07-18.
PriceSeries dated_prices() {
    PriceSeries p = simulate(calm_params(), SeriesSpec{200, 2000.0, 7});
    attach_daily_dates(p);
    return p;
}

RegimeCatalog test_catalog() {
    return RegimeCatalog({{"quiet", SemanticType::calm, {2000, 2, 1}, {2000, 3, 15}},
                          {"slide", SemanticType::crash, {2000, 4, 1}, {2000, 5, 20}},
                          {"future", SemanticType::crash, {2001, 1, 1}, {2001, 3, 1}}});
}

std::vector<double> calm_ctx(std::uint64_t seed) { return synthetic_context(0.0, true, 32, seed); }

class ServiceTest : public ::testing::Test {
protected:
    void SetUp() override {
        Parameters p = tiny_params();
        hash_ = checkpoint_hash(p);
        svc_.load(std::move(p), test_catalog(), dated_prices());
    }

    json post(const std::string& path, const json& body, int expect = 200) {
        const HttpResponse r = svc_.handle("POST", path, body.dump());
        EXPECT_EQ(r.status, expect) << r.body;
        return json::parse(r.body);
    }

    SteerService svc_;
    std::string hash_;
};

void expect_nested_bands(const json& b, std::size_t horizon) {
    for (const char* k : {"median", "q5", "q25", "q75", "q95"}) ASSERT_EQ(b[k].size(), horizon) << k;
    for (std::size_t j = 0; j < horizon; ++j) {
        EXPECT_LE(b["q5"][j].get<double>(), b["q25"][j].get<double>());
        EXPECT_LE(b["q25"][j].get<double>(), b["median"][j].get<double>());
        EXPECT_LE(b["median"][j].get<double>(), b["q75"][j].get<double>());
        EXPECT_LE(b["q75"][j].get<double>(), b["q95"][j].get<double>());
    }
}

TEST(ServiceLoadTest, UnavailableBeforeLoad) {
    SteerService svc;
    EXPECT_FALSE(svc.ready());
    for (const auto& [method, path] : std::vector<std::pair<std::string, std::string>>{
             {"GET", "/api/info"}, {"POST", "/api/forecast"}, {"POST", "/api/intervene"}, {"POST", "/api/similarity"}}) {
        const HttpResponse r = svc.handle(method, path, "{}");
        EXPECT_EQ(r.status, 503) << path;
        const json body = json::parse(r.body);
        EXPECT_EQ(body["code"], 503);
        EXPECT_TRUE(body["message"].is_string());
    }
    svc.load(build(tiny_model(), 1));
    EXPECT_TRUE(svc.ready());
    EXPECT_EQ(svc.handle("GET", "/api/info", "").status, 200);
}

TEST_F(ServiceTest, RoutingErrors) {
    EXPECT_EQ(svc_.handle("GET", "/api/nope", "").status, 404);
    EXPECT_EQ(svc_.handle("POST", "/api/info", "").status, 405);
    EXPECT_EQ(svc_.handle("GET", "/api/forecast", "").status, 405);
    EXPECT_EQ(svc_.handle("POST", "/api/forecast", "{not json").status, 400);
    EXPECT_EQ(svc_.handle("POST", "/api/forecast", "[1, 2]").status, 400);
}

TEST_F(ServiceTest, InfoDescribesCheckpoint) {
    const HttpResponse a = svc_.handle("GET", "/api/info", "");
    ASSERT_EQ(a.status, 200);
    json ja = json::parse(a.body);
    EXPECT_EQ(ja["api_version"], kApiVersion);
    EXPECT_EQ(ja["n_layers"], 3);
    EXPECT_EQ(ja["mid_layer"], 2);
    EXPECT_EQ(ja["checkpoint_hash"], hash_);
    EXPECT_EQ(ja["config"], tiny_model().to_json());
    ASSERT_EQ(ja["catalog"].size(), 3u);
    EXPECT_EQ(ja["catalog"][0]["name"], "quiet");
    EXPECT_EQ(ja["catalog"][0]["type"], "calm");

    post("/api/forecast", json{{"context", calm_ctx(1)}});
    json jb = json::parse(svc_.handle("GET", "/api/info", "").body);
    EXPECT_NE(ja["counters"], jb["counters"]);
    EXPECT_EQ(jb["counters"]["forecast"], 1);
    ja.erase("counters");
    jb.erase("counters");
    EXPECT_EQ(ja, jb);
}

TEST_F(ServiceTest, ForecastReturnsNestedBands) {
    const json r = post("/api/forecast", json{{"context", calm_ctx(2)}, {"n_samples", 64}, {"seed", 9}});
    expect_nested_bands(r, 8);
    EXPECT_EQ(r["n_samples"], 64);
    EXPECT_EQ(r["seed"], 9);
}

TEST_F(ServiceTest, ForecastIsDeterministicGivenSeed) {
    const std::string body = json{{"context", calm_ctx(3)}, {"seed", 4}}.dump();
    const HttpResponse a = svc_.handle("POST", "/api/forecast", body);
    const HttpResponse b = svc_.handle("POST", "/api/forecast", body);
    EXPECT_EQ(a.body, b.body);
    const HttpResponse c = svc_.handle("POST", "/api/forecast", json{{"context", calm_ctx(3)}, {"seed", 5}}.dump());
    EXPECT_NE(a.body, c.body);
}

TEST_F(ServiceTest, ForecastValidation) {
    auto ctx = calm_ctx(1);
    ctx.pop_back();
    post("/api/forecast", json{{"context", ctx}}, 400);
    post("/api/forecast", json{{"context", "abc"}}, 400);
    auto bad = calm_ctx(1);
    json j{{"context", bad}};
    j["context"][5] = "x";
    post("/api/forecast", j, 400);
    post("/api/forecast", json{{"context", calm_ctx(1)}, {"n_samples", 0}}, 400);
    post("/api/forecast", json{{"context", calm_ctx(1)}, {"n_samples", 5000}}, 400);
    post("/api/forecast", json{{"context", calm_ctx(1)}, {"seed", -1}}, 400);
    post("/api/forecast", json::object(), 400);
}

TEST_F(ServiceTest, ForecastByWindowName) {
    const json r = post("/api/forecast", json{{"window_name", "quiet"}, {"seed", 1}});
    expect_nested_bands(r, 8);
    // Same as posting the slice inline.
    const auto slice = slice_window(fill_gaps(dated_prices()), *test_catalog().find("quiet"), 32).values;
    EXPECT_EQ(r, post("/api/forecast", json{{"context", slice}, {"seed", 1}}));
    post("/api/forecast", json{{"window_name", "missing"}}, 404);
    post("/api/forecast", json{{"window_name", "future"}}, 404);
}

TEST_F(ServiceTest, WindowsWithoutPriceDataAre404) {
    SteerService svc;
    svc.load(build(tiny_model(), 2), test_catalog());
    const json info = json::parse(svc.handle("GET", "/api/info", "").body);
    EXPECT_FALSE(info["catalog"][0]["available"].get<bool>());
    EXPECT_EQ(svc.handle("POST", "/api/forecast", json{{"window_name", "quiet"}}.dump()).status, 404);
}

TEST_F(ServiceTest, InterveneIdentityStyleMatchesBaseline) {
    const auto target = calm_ctx(5);
    const json r = post("/api/intervene",
                        json{{"target", target}, {"style", {{"context", target}}}, {"layer", 2}, {"seed", 3}});
    expect_nested_bands(r["baseline"], 8);
    expect_nested_bands(r["intervened"], 8);
    double sd = 0, mean = 0;
    for (double v : target) mean += v / target.size();
    for (double v : target) sd += (v - mean) * (v - mean) / target.size();
    sd = std::sqrt(sd);
    for (std::size_t j = 0; j < 8; ++j)
        EXPECT_NEAR(r["intervened"]["median"][j].get<double>(), r["baseline"]["median"][j].get<double>(), 0.01 * sd);
    EXPECT_GT(r["signature_norm"].get<double>(), 0.0);
}

TEST_F(ServiceTest, InterveneTargetForms) {
    const json a = post("/api/intervene", json{{"target", {{"window_name", "quiet"}}},
                                               {"style", {{"window_name", "slide"}}},
                                               {"layer", 1}});
    EXPECT_EQ(a["style"]["label"], "window:slide");
    const json b = post("/api/intervene", json{{"target", {{"context", calm_ctx(1)}}},
                                               {"style", {{"severity", 1.5}}},
                                               {"layer", 3}, {"seed", 8}});
    EXPECT_EQ(b["style"]["style_seed"], derive_seed(8, "style"));
    EXPECT_EQ(b["layer"], 3);
}

TEST_F(ServiceTest, InterveneValidation) {
    const json t = calm_ctx(1);
    post("/api/intervene", json{{"target", t}, {"style", {{"severity", 1.0}}}, {"layer", 0}}, 400);
    post("/api/intervene", json{{"target", t}, {"style", {{"severity", 1.0}}}, {"layer", 4}}, 400);
    post("/api/intervene", json{{"target", t}, {"style", {{"severity", 1.0}}}}, 400);
    post("/api/intervene", json{{"target", t}, {"style", {{"severity", -1.0}}}, {"layer", 1}}, 400);
    post("/api/intervene", json{{"target", t}, {"style", {{"severity", "high"}}}, {"layer", 1}}, 400);
    post("/api/intervene", json{{"target", t}, {"style", {{"severity", 1.0}}}, {"layer", 1}, {"epsilon", 0}}, 400);
    post("/api/intervene", json{{"target", t}, {"style", json::object()}, {"layer", 1}}, 400);
    post("/api/intervene", json{{"style", {{"severity", 1.0}}}, {"layer", 1}}, 400);
    post("/api/intervene", json{{"target", t}, {"style", {{"window_name", "missing"}}}, {"layer", 1}}, 404);
}

TEST_F(ServiceTest, CachedAndUncachedResponsesAreIdentical) {
    const std::string body =
        json{{"target", calm_ctx(6)}, {"style", {{"severity", 2.0}}}, {"layer", 2}, {"seed", 11}}.dump();
    EXPECT_EQ(svc_.cached_signatures(), 0u);
    const HttpResponse first = svc_.handle("POST", "/api/intervene", body);
    EXPECT_EQ(svc_.cached_signatures(), 1u);
    const HttpResponse second = svc_.handle("POST", "/api/intervene", body);
    EXPECT_EQ(svc_.cached_signatures(), 1u);
    EXPECT_EQ(first.body, second.body);

    // A fresh service computes the same signature from scratch.
    SteerService fresh;
    fresh.load(tiny_params(), test_catalog(), dated_prices());
    EXPECT_EQ(fresh.handle("POST", "/api/intervene", body).body, first.body);
}

TEST_F(ServiceTest, ConcurrentIdenticalRequestsAgree) {
    const std::string body =
        json{{"target", calm_ctx(7)}, {"style", {{"severity", 1.0}}}, {"layer", 1}, {"seed", 2}}.dump();
    std::vector<std::string> bodies(6);
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < bodies.size(); ++i)
        threads.emplace_back([&, i] { bodies[i] = svc_.handle("POST", "/api/intervene", body).body; });
    for (auto& t : threads) t.join();
    for (const auto& b : bodies) EXPECT_EQ(b, bodies.front());
    EXPECT_EQ(svc_.cached_signatures(), 1u);
}

json synthetic_set(const std::string& regime, double severity, int count, std::uint64_t seed) {
    return json{{"synthetic", {{"regime", regime}, {"severity", severity}, {"count", count}, {"seed", seed}}}};
}

TEST_F(ServiceTest, SimilaritySelfPairIsOne) {
    std::vector<std::vector<double>> set{calm_ctx(1), calm_ctx(2)};
    const json r = post("/api/similarity", json{{"set_a", {{"contexts", set}}}, {"set_b", {{"contexts", set}}}, {"k", 4}});
    ASSERT_EQ(r["values"].size(), 3u);
    for (std::size_t l = 0; l < 3; ++l) {
        EXPECT_EQ(r["values"][l]["layer"], l + 1);
        EXPECT_NEAR(r["values"][l]["value"].get<double>(), 1.0, 1e-9);
    }
}

TEST_F(ServiceTest, SimilarityCrashVsCalmInRange) {
    const json r = post("/api/similarity", json{{"set_a", synthetic_set("crash", 2.0, 4, 1)},
                                                {"set_b", synthetic_set("calm", 0.0, 4, 1)},
                                                {"k", 8}});
    for (const auto& v : r["values"]) {
        EXPECT_GE(v["value"].get<double>(), -1.0);
        EXPECT_LE(v["value"].get<double>(), 1.0);
    }
    const json w = post("/api/similarity", json{{"set_a", {{"window_names", {"quiet"}}}},
                                                {"set_b", {{"window_names", {"slide"}}}},
                                                {"k", 2}});
    EXPECT_EQ(w["values"].size(), 3u);
}

TEST_F(ServiceTest, SimilarityValidation) {
    const json a = synthetic_set("crash", 1.0, 1, 0), b = synthetic_set("calm", 0.0, 1, 0);
    // One context each: 2 x 8 pooled token vectors.
    post("/api/similarity", json{{"set_a", a}, {"set_b", b}, {"k", 17}}, 400);
    post("/api/similarity", json{{"set_a", a}, {"set_b", b}, {"k", 0}}, 400);
    post("/api/similarity", json{{"set_a", a}, {"set_b", b}, {"k", "4"}}, 400);
    post("/api/similarity", json{{"set_a", a}, {"set_b", synthetic_set("calm", 0.0, 2, 0)}, {"k", 4}}, 400);
    post("/api/similarity", json{{"set_a", a}, {"set_b", synthetic_set("sideways", 0.0, 1, 0)}, {"k", 4}}, 400);
    post("/api/similarity", json{{"set_a", a}, {"k", 4}}, 400);
    post("/api/similarity", json{{"set_a", {{"contexts", json::array()}}}, {"set_b", b}, {"k", 4}}, 400);
    post("/api/similarity", json{{"set_a", {{"window_names", {"missing"}}}}, {"set_b", b}, {"k", 4}}, 404);
    post("/api/similarity", json{{"set_a", a}, {"set_b", b}, {"k", 16}});
}

TEST_F(ServiceTest, ErrorsAreCounted) {
    post("/api/forecast", json::object(), 400);
    svc_.handle("GET", "/api/nope", "");
    const json info = json::parse(svc_.handle("GET", "/api/info", "").body);
    EXPECT_EQ(info["counters"]["errors"], 2);
}

}  // namespace
}  // namespace tsteer
