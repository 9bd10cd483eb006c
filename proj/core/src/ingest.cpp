#include "tsteer/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tsteer/format.hpp"

namespace tsteer {

using nlohmann::json;

std::string to_string(SemanticType t) { return t == SemanticType::calm ? "calm" : "crash"; }

SemanticType semantic_type_from_string(const std::string& s) {
    std::string lower = s;
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "calm") return SemanticType::calm;
    if (lower == "crash") return SemanticType::crash;
    throw std::invalid_argument("unknown semantic type '" + s + "' (expected calm or crash)");
}

RegimeCatalog::RegimeCatalog(std::vector<RegimeWindow> windows) : windows_(std::move(windows)) {
    std::set<std::string> seen;
    for (const auto& w : windows_) {
        if (!seen.insert(w.name).second)
            throw std::invalid_argument("duplicate catalog window name '" + w.name + "'");
        if (!(w.start_date < w.end_date))
            throw std::invalid_argument("catalog window '" + w.name + "' must start before it ends");
    }
}

const RegimeWindow* RegimeCatalog::find(const std::string& name) const {
    auto it = std::find_if(windows_.begin(), windows_.end(), [&](const auto& w) { return w.name == name; });
    return it == windows_.end() ? nullptr : &*it;
}

RegimeCatalog RegimeCatalog::defaults() {
    using T = SemanticType;
    return RegimeCatalog({
        {"2017 Calm", T::calm, {2017, 1, 12}, {2017, 5, 20}},
        {"2007 Calm", T::calm, {2007, 3, 12}, {2007, 7, 18}},
        {"2019 Calm", T::calm, {2019, 6, 1}, {2019, 10, 7}},
        {"2008 Crash", T::crash, {2008, 7, 25}, {2008, 11, 30}},
        {"2000 Crash", T::crash, {2000, 8, 31}, {2001, 1, 6}},
        {"2020 Crash", T::crash, {2020, 1, 30}, {2020, 6, 6}},
    });
}

RegimeCatalog RegimeCatalog::from_json_text(const std::string& text) {
    const json doc = json::parse(text);
    std::vector<RegimeWindow> windows;
    for (const auto& item : doc.at("windows")) {
        RegimeWindow w;
        w.name = item.at("name").get<std::string>();
        w.semantic_type = semantic_type_from_string(item.at("type").get<std::string>());
        auto start = Date::parse(item.at("start").get<std::string>());
        auto end = Date::parse(item.at("end").get<std::string>());
        if (!start || !end) throw std::invalid_argument("catalog window '" + w.name + "' has a malformed date");
        w.start_date = *start;
        w.end_date = *end;
        windows.push_back(std::move(w));
    }
    return RegimeCatalog(std::move(windows));
}

RegimeCatalog RegimeCatalog::load_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open catalog " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

std::string RegimeCatalog::to_json_text() const {
    json arr = json::array();
    for (const auto& w : windows_)
        arr.push_back({{"name", w.name},
                       {"type", to_string(w.semantic_type)},
                       {"start", w.start_date.to_string()},
                       {"end", w.end_date.to_string()}});
    return json{{"windows", arr}}.dump(2);
}

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

}  // namespace

PriceSeries parse_csv(const std::string& text) {
    std::vector<std::pair<Date, double>> rows;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string_view view = trim(line);
        if (view.empty()) continue;
        const auto comma = view.find(',');
        if (comma == std::string_view::npos) throw ParseError(lineno, "expected two columns 'date,value'");
        const std::string_view date_field = trim(view.substr(0, comma));
        const std::string_view value_field = trim(view.substr(comma + 1));
        auto date = Date::parse(date_field);
        if (!date) {
            if (rows.empty() && lineno == 1) continue;  // header
            throw ParseError(lineno, "malformed date '" + std::string(date_field) + "'");
        }
        if (value_field.find(',') != std::string_view::npos)
            throw ParseError(lineno, "expected exactly two columns");
        double value = 0.0;
        auto [ptr, ec] = std::from_chars(value_field.data(), value_field.data() + value_field.size(), value);
        if (ec != std::errc{} || ptr != value_field.data() + value_field.size() || !std::isfinite(value))
            throw ParseError(lineno, "malformed value '" + std::string(value_field) + "'");
        if (!(value > 0.0)) throw ParseError(lineno, "non-positive value " + std::string(value_field));
        rows.emplace_back(*date, value);
    }

    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t i = 1; i < rows.size(); ++i)
        if (rows[i].first == rows[i - 1].first)
            throw std::invalid_argument("duplicate date " + rows[i].first.to_string());

    PriceSeries out;
    out.provenance = Provenance::ingested;
    for (const auto& [d, v] : rows) {
        out.dates.push_back(d);
        out.values.push_back(v);
    }
    return out;
}

PriceSeries load_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_csv(ss.str());
}

PriceSeries fill_gaps(const PriceSeries& series) {
    if (series.size() <= 1) return series;
    if (!series.has_dates()) throw std::invalid_argument("fill_gaps requires a dated series");

    PriceSeries out;
    out.provenance = series.provenance;
    out.params = series.params;
    const std::int64_t first = series.dates.front().to_days();
    const std::int64_t last = series.dates.back().to_days();
    out.values.reserve(static_cast<std::size_t>(last - first + 1));
    out.dates.reserve(out.values.capacity());

    std::size_t src = 0;
    double carry = series.values.front();
    for (std::int64_t day = first; day <= last; ++day) {
        if (src < series.size() && series.dates[src].to_days() == day) carry = series.values[src++];
        out.dates.push_back(Date::from_days(day));
        out.values.push_back(carry);
    }
    return out;
}

ContextWindow slice_window(const PriceSeries& series, const RegimeWindow& window, std::size_t t_in) {
    if (t_in < 1) throw std::invalid_argument("t_in must be >= 1");
    if (window.span_days() < static_cast<std::int64_t>(t_in))
        throw CoverageError("window '" + window.name + "' spans " + std::to_string(window.span_days()) +
                            " days, fewer than t_in=" + std::to_string(t_in));
    if (!series.has_dates() || series.size() == 0)
        throw CoverageError("series has no dated values; cannot cover window '" + window.name + "'");

    const Date first = series.dates.front();
    const Date last = series.dates.back();
    if (window.start_date < first) {
        const Date missing_end = std::min(first.plus_days(-1), window.end_date);
        throw CoverageError("window '" + window.name + "' missing " + window.start_date.to_string() + " to " +
                            missing_end.to_string() + " (series starts " + first.to_string() + ")");
    }
    if (last < window.end_date) {
        const Date missing_start = std::max(last.plus_days(1), window.start_date);
        throw CoverageError("window '" + window.name + "' missing " + missing_start.to_string() + " to " +
                            window.end_date.to_string() + " (series ends " + last.to_string() + ")");
    }

    const std::int64_t end_idx = window.end_date.to_days() - first.to_days();
    const std::int64_t begin_idx = end_idx - static_cast<std::int64_t>(t_in) + 1;
    if (series.dates[static_cast<std::size_t>(end_idx)] != window.end_date ||
        series.dates[static_cast<std::size_t>(begin_idx)] != window.end_date.plus_days(1 - static_cast<std::int64_t>(t_in)))
        throw CoverageError("series is not gap-filled over window '" + window.name + "'; run fill_gaps first");

    ContextWindow ctx;
    ctx.values.assign(series.values.begin() + begin_idx, series.values.begin() + end_idx + 1);
    ctx.end_date = window.end_date;
    ctx.source = window.name;
    return ctx;
}

std::string series_to_csv(const PriceSeries& series, bool raw) {
    std::string out;
    if (!raw) out += "date,value\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        if (!raw) {
            const Date d = series.has_dates() ? series.dates[i] : Date{2000, 1, 1}.plus_days(static_cast<std::int64_t>(i));
            out += d.to_string();
            out += ',';
        }
        out += format_double(series.values[i]);
        out += '\n';
    }
    return out;
}

std::string context_to_csv(const ContextWindow& ctx) {
    std::string out = "date,value\n";
    const auto n = static_cast<std::int64_t>(ctx.values.size());
    for (std::int64_t i = 0; i < n; ++i) {
        out += ctx.end_date.plus_days(i - n + 1).to_string();
        out += ',';
        out += format_double(ctx.values[static_cast<std::size_t>(i)]);
        out += '\n';
    }
    return out;
}

}  // namespace tsteer
