#include "tsteer/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tsteer/rng.hpp"

namespace tsteer {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string encode_checkpoint(const Parameters& params) {
    binio::Writer w;
    w.magic("TTFM");
    w.u32(kCheckpointVersion);
    const std::string cfg = params.config().to_json().dump();
    w.u64(cfg.size());
    w.bytes(cfg);
    for (const auto& slot : params.slots()) {
        w.u64(2);
        w.u64(slot.rows);
        w.u64(slot.cols);
        for (std::size_t i = 0; i < slot.size(); ++i) w.f32(params.values()[slot.offset + i]);
    }
    return w.take();
}

Parameters decode_checkpoint(const std::string& bytes) {
    binio::Reader r(bytes);
    r.expect_magic("TTFM");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) throw FormatError("truncated checkpoint config");
    ModelConfig config;
    try {
        config = ModelConfig::from_json(nlohmann::json::parse(r.bytes(len)));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad checkpoint config: ") + e.what());
    }

    Parameters p(config);
    for (const auto& slot : p.slots()) {
        const std::uint64_t rank = r.u64();
        if (rank < 1 || rank > 8) throw FormatError("tensor '" + slot.name + "' has invalid rank");
        std::uint64_t count = 1;
        std::vector<std::uint64_t> dims(rank);
        for (auto& d : dims) {
            d = r.u64();
            count *= d;
        }
        if (count != slot.size())
            throw FormatError("tensor '" + slot.name + "' has " + std::to_string(count) + " elements, expected " +
                              std::to_string(slot.size()));
        for (std::size_t i = 0; i < slot.size(); ++i) p.values()[slot.offset + i] = r.f32();
    }
    if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
    return p;
}

void save_checkpoint(const Parameters& params, const std::filesystem::path& path) {
    write_file(path, encode_checkpoint(params));
}

Parameters load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

std::string checkpoint_hash(const Parameters& params) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(encode_checkpoint(params))));
    return buf;
}

std::string encode_activation(const ActivationTensor& act) {
    binio::Writer w;
    w.magic("ACTD");
    w.u32(kActivationDumpVersion);
    w.u32(static_cast<std::uint32_t>(act.layer));
    w.u64(act.variates);
    w.u64(act.tokens);
    w.u64(act.width);
    for (double v : act.data) w.f32(v);
    return w.take();
}

ActivationTensor decode_activation(const std::string& bytes) {
    binio::Reader r(bytes);
    r.expect_magic("ACTD");
    const std::uint32_t version = r.u32();
    if (version != kActivationDumpVersion)
        throw FormatError("unsupported activation dump version " + std::to_string(version));
    const auto layer = static_cast<int>(r.u32());
    const std::uint64_t n = r.u64(), t = r.u64(), d = r.u64();
    if (n == 0 || t == 0 || d == 0 || n * t * d * 4 != r.remaining())
        throw FormatError("activation dump payload does not match its dimensions");
    ActivationTensor act(layer, n, t, d);
    for (double& v : act.data) v = r.f32();
    return act;
}

void save_activation(const ActivationTensor& act, const std::filesystem::path& path) {
    write_file(path, encode_activation(act));
}

ActivationTensor load_activation(const std::filesystem::path& path) { return decode_activation(read_file(path)); }

}  // namespace tsteer
