#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>

namespace tsteer {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace tsteer

namespace tsteer::binio {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&v, b, sizeof(T));
    }
    return v;
}

class Writer {
public:
    void magic(std::string_view m) { out_.append(m); }
    void u32(std::uint32_t v) { raw(to_little(v)); }
    void u64(std::uint64_t v) { raw(to_little(v)); }
    void f32(double v) { raw(to_little(std::bit_cast<std::uint32_t>(static_cast<float>(v)))); }
    void bytes(std::string_view b) { out_.append(b); }
    std::string take() { return std::move(out_); }

private:
    template <typename T>
    void raw(T v) {
        char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        out_.append(b, sizeof(T));
    }
    std::string out_;
};

class Reader {
public:
    explicit Reader(std::string_view data) : data_(data) {}

    void expect_magic(std::string_view m) {
        if (data_.substr(pos_, m.size()) != m) throw FormatError("bad magic: expected " + std::string(m));
        pos_ += m.size();
    }
    std::uint32_t u32() { return to_little(raw<std::uint32_t>()); }
    std::uint64_t u64() { return to_little(raw<std::uint64_t>()); }
    double f32() { return static_cast<double>(std::bit_cast<float>(to_little(raw<std::uint32_t>()))); }
    std::string_view bytes(std::size_t n) {
        need(n);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == data_.size(); }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw FormatError("unexpected end of data");
    }
    template <typename T>
    T raw() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string_view data_;
    std::size_t pos_ = 0;
};

}  // namespace tsteer::binio
