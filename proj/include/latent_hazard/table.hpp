#pragma once

// Plain string tables rendered as CSV or Markdown, plus the number
// formatting shared by every report.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "latent_hazard/error.hpp"

namespace lh {

struct Table {
    std::string title;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void add_row(std::vector<std::string> row) { rows.push_back(std::move(row)); }
};

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::string to_csv(const Table& t) {
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) os << ',';
            os << csv_escape(cells[i]);
        }
        os << '\n';
    };
    line(t.header);
    for (const auto& r : t.rows) line(r);
    return os.str();
}

inline std::string to_markdown(const Table& t) {
    std::ostringstream os;
    if (!t.title.empty()) os << "### " << t.title << "\n\n";
    auto line = [&](const std::vector<std::string>& cells) {
        os << '|';
        for (const auto& c : cells) {
            std::string escaped;
            for (char ch : c) {
                if (ch == '|') escaped += '\\';
                escaped += ch;
            }
            os << ' ' << escaped << " |";
        }
        os << '\n';
    };
    line(t.header);
    os << '|';
    for (std::size_t i = 0; i < t.header.size(); ++i) os << (i == 0 ? " :--- |" : " ---: |");
    os << '\n';
    for (const auto& r : t.rows) line(r);
    return os.str();
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << text;
    if (!out) throw IoError("failed writing '" + path + "'");
}

/// Fixed-point with `decimals` digits. Negative zero prints without its sign
/// unless the value is genuinely negative at that precision.
inline std::string format_fixed(double x, int decimals = 3) {
    if (std::isnan(x)) return "NA";
    if (std::isinf(x)) return x > 0 ? "Inf" : "-Inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, x);
    std::string s = buf;
    if (s[0] == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
    return s;
}

/// Fixed-point with comma thousands separators: -21990.4 -> "-21,990".
inline std::string format_grouped(double x, int decimals = 0) {
    std::string s = format_fixed(x, decimals);
    if (s == "NA" || s.find("Inf") != std::string::npos) return s;
    const bool neg = s[0] == '-';
    if (neg) s.erase(0, 1);
    const auto dot = s.find('.');
    std::string int_part = s.substr(0, dot);
    const std::string frac = dot == std::string::npos ? "" : s.substr(dot);
    std::string grouped;
    for (std::size_t i = 0; i < int_part.size(); ++i) {
        if (i && (int_part.size() - i) % 3 == 0) grouped += ',';
        grouped += int_part[i];
    }
    return (neg ? "-" : "") + grouped + frac;
}

/// *** p<0.01, ** p<0.05, * p<0.1.
inline std::string significance_stars(double p) {
    if (!(p >= 0.0)) return "";
    if (p < 0.01) return "***";
    if (p < 0.05) return "**";
    if (p < 0.1) return "*";
    return "";
}

/// "0.153*** (0.006)"
inline std::string format_estimate(double estimate, double std_error, double p_value, int decimals = 3) {
    return format_fixed(estimate, decimals) + significance_stars(p_value) + " (" + format_fixed(std_error, decimals) + ")";
}

}  // namespace lh
