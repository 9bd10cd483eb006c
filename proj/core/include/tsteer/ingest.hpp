#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsteer/date.hpp"
#include "tsteer/regimegen.hpp"

namespace tsteer {

enum class SemanticType { calm, crash };

std::string to_string(SemanticType t);
SemanticType semantic_type_from_string(const std::string& s);

struct RegimeWindow {
    std::string name;
    SemanticType semantic_type = SemanticType::calm;
    Date start_date;
    Date end_date;

    std::int64_t span_days() const { return end_date.to_days() - start_date.to_days() + 1; }
};

/// Ordered, name-unique collection of windows. Immutable once constructed.
class RegimeCatalog {
public:
    RegimeCatalog() = default;
    explicit RegimeCatalog(std::vector<RegimeWindow> windows);

    const std::vector<RegimeWindow>& windows() const { return windows_; }
    const RegimeWindow* find(const std::string& name) const;

    /// Six NASDAQ-100 windows: three calm and three crash periods.
    static RegimeCatalog defaults();

    /// JSON document: {"windows": [{"name", "type", "start", "end"}, ...]}.
    static RegimeCatalog load_json(const std::filesystem::path& path);
    static RegimeCatalog from_json_text(const std::string& text);
    std::string to_json_text() const;

private:
    std::vector<RegimeWindow> windows_;
};

/// Fixed-length model input ending at a known date.
struct ContextWindow {
    std::vector<double> values;
    Date end_date;
    std::string source;
};

class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

class CoverageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Two-column CSV (date,value). An optional non-date header line is skipped.
/// Output is sorted by date; duplicate dates and non-positive values are errors.
PriceSeries load_csv(const std::filesystem::path& path);
PriceSeries parse_csv(const std::string& text);

/// Inserts every missing calendar day, carrying the previous day's value.
PriceSeries fill_gaps(const PriceSeries& series);

/// Last t_in values ending exactly at window.end_date. The series must be
/// gap-filled and must cover the whole window; leading gaps are never back-filled.
ContextWindow slice_window(const PriceSeries& series, const RegimeWindow& window, std::size_t t_in);

/// Writes `date,value` rows (or bare values when raw).
std::string series_to_csv(const PriceSeries& series, bool raw = false);
std::string context_to_csv(const ContextWindow& ctx);

}  // namespace tsteer
