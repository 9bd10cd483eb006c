#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace tsteer {

/// Calendar day without time zone.
struct Date {
    int year = 1970;
    int month = 1;
    int day = 1;

    /// Days since 1970-01-01 (proleptic Gregorian).
    std::int64_t to_days() const;
    static Date from_days(std::int64_t days);

    /// Strict YYYY-MM-DD parse; rejects out-of-range fields such as 2021-02-30.
    static std::optional<Date> parse(std::string_view text);
    std::string to_string() const;

    Date plus_days(std::int64_t n) const { return from_days(to_days() + n); }

    friend auto operator<=>(const Date&, const Date&) = default;
};

}  // namespace tsteer
