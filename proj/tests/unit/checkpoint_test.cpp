#include "tsteer/checkpoint.hpp"

#include <filesystem>

#include <gtest/gtest.h>

namespace tsteer {
namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.patch_size = 2;
    c.context_len = 8;
    c.horizon = 3;
    return c;
}

TEST(CheckpointTest, HeaderLayout) {
    Parameters p = build(tiny(), 1);
    const std::string bytes = encode_checkpoint(p);
    ASSERT_GE(bytes.size(), 16u);
    EXPECT_EQ(bytes.substr(0, 4), "TTFM");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);  // version, little-endian
    EXPECT_EQ(bytes[5], 0);
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    EXPECT_EQ(bytes[16], '{');
    EXPECT_EQ(bytes[16 + len - 1], '}');
    // Every tensor is rank 2: 3 u64 headers plus 4 bytes per value.
    const std::size_t expected = 16 + len + p.slots().size() * 24 + p.size() * 4;
    EXPECT_EQ(bytes.size(), expected);
}

TEST(CheckpointTest, BitExactRoundTrip) {
    Parameters p = build(tiny(), 3);
    p.round_to_float();
    const std::string bytes = encode_checkpoint(p);
    const Parameters back = decode_checkpoint(bytes);
    EXPECT_EQ(back, p);
    EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(CheckpointTest, UnroundedValuesLandOnFloatGrid) {
    const Parameters p = build(tiny(), 3);
    Parameters rounded = p;
    rounded.round_to_float();
    EXPECT_EQ(decode_checkpoint(encode_checkpoint(p)), rounded);
}

TEST(CheckpointTest, FileRoundTripAndHash) {
    Parameters p = build(tiny(), 4);
    p.round_to_float();
    const auto path = std::filesystem::temp_directory_path() / "tsteer_ckpt_test.ttfm";
    save_checkpoint(p, path);
    EXPECT_EQ(load_checkpoint(path), p);
    EXPECT_EQ(checkpoint_hash(p).size(), 16u);
    EXPECT_EQ(checkpoint_hash(p), checkpoint_hash(load_checkpoint(path)));
    EXPECT_NE(checkpoint_hash(p), checkpoint_hash(build(tiny(), 5)));
    std::filesystem::remove(path);
}

TEST(CheckpointTest, CorruptInputRejected) {
    const std::string bytes = encode_checkpoint(build(tiny(), 1));
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_checkpoint(bad_magic), FormatError);
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), FormatError);
    EXPECT_THROW(decode_checkpoint(bytes + "x"), FormatError);
    std::string bad_version = bytes;
    bad_version[4] = 9;
    EXPECT_THROW(decode_checkpoint(bad_version), FormatError);
}

TEST(ActivationDumpTest, LayoutAndRoundTrip) {
    ActivationTensor a(3, 1, 2, 4);
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] = 0.25 * static_cast<double>(i) - 1.0;
    const std::string bytes = encode_activation(a);
    EXPECT_EQ(bytes.substr(0, 4), "ACTD");
    EXPECT_EQ(bytes.size(), 4 + 4 + 4 + 24 + a.data.size() * 4);
    EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 3u);  // layer index
    const ActivationTensor back = decode_activation(bytes);
    EXPECT_EQ(back.layer, 3);
    EXPECT_TRUE(back.same_shape(a));
    EXPECT_EQ(back.data, a.data);  // quarter steps are exact in f32
    EXPECT_THROW(decode_activation(bytes.substr(0, bytes.size() - 2)), FormatError);
}

}  // namespace
}  // namespace tsteer
