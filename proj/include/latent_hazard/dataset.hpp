#pragma once

// Survey tables: variable schema, CSV ingestion with per-cell missingness,
// policy subsampling, dummy encoding and descriptive summaries.

#include <algorithm>
#include <charconv>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "latent_hazard/error.hpp"
#include "latent_hazard/table.hpp"

namespace lh {

enum class VariableKind { continuous, categorical, binary };

enum class VariableRole {
    firm_value,
    productivity_component,
    wfh_related,
    demographic,
    control,
    wage,
    policy_key,
};

inline std::string to_string(VariableKind k) {
    switch (k) {
        case VariableKind::continuous: return "continuous";
        case VariableKind::categorical: return "categorical";
        case VariableKind::binary: return "binary";
    }
    return "?";
}

inline std::string to_string(VariableRole r) {
    switch (r) {
        case VariableRole::firm_value: return "firm_value";
        case VariableRole::productivity_component: return "productivity_component";
        case VariableRole::wfh_related: return "wfh_related";
        case VariableRole::demographic: return "demographic";
        case VariableRole::control: return "control";
        case VariableRole::wage: return "wage";
        case VariableRole::policy_key: return "policy_key";
    }
    return "?";
}

inline VariableKind parse_kind(const std::string& s) {
    if (s == "continuous") return VariableKind::continuous;
    if (s == "categorical") return VariableKind::categorical;
    if (s == "binary") return VariableKind::binary;
    throw SchemaError("unknown variable kind '" + s + "'");
}

inline VariableRole parse_role(const std::string& s) {
    static const std::map<std::string, VariableRole> roles = {
        {"firm_value", VariableRole::firm_value},
        {"productivity_component", VariableRole::productivity_component},
        {"wfh_related", VariableRole::wfh_related},
        {"demographic", VariableRole::demographic},
        {"control", VariableRole::control},
        {"wage", VariableRole::wage},
        {"policy_key", VariableRole::policy_key},
    };
    auto it = roles.find(s);
    if (it == roles.end()) throw SchemaError("unknown variable role '" + s + "'");
    return it->second;
}

/// A category level: `value` is the raw token found in data files, `label`
/// is the human name used for dummy columns and reports.
struct Category {
    std::string value;
    std::string label;
};

struct VariableSpec {
    std::string code;
    VariableKind kind = VariableKind::continuous;
    VariableRole role = VariableRole::control;
    std::vector<Category> categories;  // categorical only, ordered
    std::size_t reference = 0;         // index into categories
    std::vector<double> binary_values{0.0, 1.0};
    std::string units;

    bool is_numeric() const { return kind != VariableKind::categorical; }

    /// Category index for a data token, matching either its value or label.
    std::optional<std::size_t> find_category(std::string_view token) const {
        for (std::size_t i = 0; i < categories.size(); ++i)
            if (categories[i].value == token) return i;
        for (std::size_t i = 0; i < categories.size(); ++i)
            if (categories[i].label == token) return i;
        return std::nullopt;
    }
};

inline VariableSpec continuous_spec(std::string code, VariableRole role, std::string units = "") {
    VariableSpec v;
    v.code = std::move(code);
    v.kind = VariableKind::continuous;
    v.role = role;
    v.units = std::move(units);
    return v;
}

inline VariableSpec categorical_spec(std::string code, VariableRole role, std::vector<Category> categories,
                                     std::size_t reference = 0) {
    VariableSpec v;
    v.code = std::move(code);
    v.kind = VariableKind::categorical;
    v.role = role;
    v.categories = std::move(categories);
    v.reference = reference;
    return v;
}

inline VariableSpec binary_spec(std::string code, VariableRole role, double off = 0.0, double on = 1.0) {
    VariableSpec v;
    v.code = std::move(code);
    v.kind = VariableKind::binary;
    v.role = role;
    v.binary_values = {off, on};
    return v;
}

class Schema {
public:
    Schema() = default;
    explicit Schema(std::vector<VariableSpec> vars) : vars_(std::move(vars)) { validate(); }

    const std::vector<VariableSpec>& variables() const { return vars_; }
    std::size_t size() const { return vars_.size(); }
    const VariableSpec& operator[](std::size_t j) const { return vars_[j]; }

    std::optional<std::size_t> find(std::string_view code) const {
        for (std::size_t j = 0; j < vars_.size(); ++j)
            if (vars_[j].code == code) return j;
        return std::nullopt;
    }

    std::size_t index_of(std::string_view code) const {
        if (auto j = find(code)) return *j;
        throw SchemaError("column '" + std::string(code) + "' is not in the schema");
    }

    std::vector<std::size_t> with_role(VariableRole role) const {
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < vars_.size(); ++j)
            if (vars_[j].role == role) out.push_back(j);
        return out;
    }

    void validate() const {
        std::set<std::string> seen;
        for (const auto& v : vars_) {
            if (v.code.empty()) throw SchemaError("variable with empty code");
            if (!seen.insert(v.code).second) throw SchemaError("duplicate variable code '" + v.code + "'");
            if (v.kind == VariableKind::categorical) {
                if (v.categories.size() < 2)
                    throw SchemaError("categorical variable '" + v.code + "' needs at least 2 categories");
                if (v.reference >= v.categories.size())
                    throw SchemaError("categorical variable '" + v.code + "' has no valid reference level");
                std::set<std::string> values;
                for (const auto& c : v.categories)
                    if (!values.insert(c.value).second)
                        throw SchemaError("categorical variable '" + v.code + "' repeats category '" + c.value + "'");
            }
            if (v.kind == VariableKind::binary && v.binary_values.size() != 2)
                throw SchemaError("binary variable '" + v.code + "' needs exactly two admissible values");
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json vars = nlohmann::json::array();
        for (const auto& v : vars_) {
            nlohmann::json j = {{"code", v.code}, {"kind", to_string(v.kind)}, {"role", to_string(v.role)}};
            if (v.kind == VariableKind::categorical) {
                nlohmann::json cats = nlohmann::json::array();
                for (const auto& c : v.categories) cats.push_back({{"value", c.value}, {"label", c.label}});
                j["categories"] = cats;
                j["reference"] = v.categories[v.reference].label;
            }
            if (v.kind == VariableKind::binary) j["values"] = v.binary_values;
            if (!v.units.empty()) j["units"] = v.units;
            vars.push_back(j);
        }
        return {{"variables", vars}};
    }

    static Schema from_json(const nlohmann::json& doc) {
        if (!doc.contains("variables") || !doc["variables"].is_array())
            throw SchemaError("schema document needs a 'variables' array");
        std::vector<VariableSpec> vars;
        for (const auto& j : doc["variables"]) {
            VariableSpec v;
            try {
                v.code = j.at("code").get<std::string>();
                v.kind = parse_kind(j.at("kind").get<std::string>());
                v.role = parse_role(j.at("role").get<std::string>());
                v.units = j.value("units", "");
                if (v.kind == VariableKind::categorical) {
                    for (const auto& c : j.at("categories")) {
                        if (c.is_string()) {
                            v.categories.push_back({c.get<std::string>(), c.get<std::string>()});
                        } else {
                            auto value = c.at("value").get<std::string>();
                            auto label = c.value("label", value);
                            v.categories.push_back({value, label});
                        }
                    }
                    if (j.contains("reference")) {
                        auto ref = v.find_category(j["reference"].get<std::string>());
                        if (!ref)
                            throw SchemaError("reference level of '" + v.code + "' is not one of its categories");
                        v.reference = *ref;
                    }
                }
                if (v.kind == VariableKind::binary && j.contains("values"))
                    v.binary_values = j["values"].get<std::vector<double>>();
            } catch (const nlohmann::json::exception& e) {
                throw SchemaError("malformed schema entry: " + std::string(e.what()));
            }
            vars.push_back(std::move(v));
        }
        return Schema(std::move(vars));
    }

private:
    std::vector<VariableSpec> vars_;
};

inline Schema load_schema(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open schema file '" + path + "'");
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("schema file '" + path + "' is not valid JSON: " + e.what());
    }
    return Schema::from_json(doc);
}

inline void save_schema(const Schema& schema, const std::string& path) {
    write_text(path, schema.to_json().dump(2) + "\n");
}

struct Provenance {
    std::string source;
    std::vector<std::string> filters;
};

/// Columnar survey table. Categorical cells hold the index of their category;
/// numeric cells hold the value. `missing(i, j)` marks absent cells, whose
/// stored value is meaningless.
class Dataset {
public:
    Dataset() = default;
    Dataset(Schema schema, std::size_t rows)
        : schema_(std::move(schema)),
          values_(schema_.size(), std::vector<double>(rows, 0.0)),
          mask_(schema_.size(), std::vector<std::uint8_t>(rows, 1)),
          rows_(rows) {}

    const Schema& schema() const { return schema_; }
    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return schema_.size(); }

    double value(std::size_t i, std::size_t j) const { return values_[j][i]; }
    bool missing(std::size_t i, std::size_t j) const { return mask_[j][i] != 0; }
    const std::vector<double>& column(std::size_t j) const { return values_[j]; }
    const std::vector<double>& column(std::string_view code) const { return values_[schema_.index_of(code)]; }
    const std::vector<std::uint8_t>& mask_column(std::size_t j) const { return mask_[j]; }

    void set(std::size_t i, std::size_t j, double v) {
        values_[j][i] = v;
        mask_[j][i] = 0;
    }
    void set_missing(std::size_t i, std::size_t j) { mask_[j][i] = 1; }

    std::size_t missing_count(std::size_t j) const {
        return static_cast<std::size_t>(std::count(mask_[j].begin(), mask_[j].end(), std::uint8_t{1}));
    }
    std::size_t missing_count() const {
        std::size_t total = 0;
        for (std::size_t j = 0; j < cols(); ++j) total += missing_count(j);
        return total;
    }
    bool complete() const { return missing_count() == 0; }

    /// Category label of a categorical cell.
    const std::string& label(std::size_t i, std::size_t j) const {
        return schema_[j].categories[static_cast<std::size_t>(values_[j][i])].label;
    }

    Provenance& provenance() { return provenance_; }
    const Provenance& provenance() const { return provenance_; }

    Dataset select_rows(const std::vector<std::size_t>& rows) const {
        Dataset out(schema_, rows.size());
        for (std::size_t j = 0; j < cols(); ++j)
            for (std::size_t r = 0; r < rows.size(); ++r) {
                out.values_[j][r] = values_[j][rows[r]];
                out.mask_[j][r] = mask_[j][rows[r]];
            }
        out.provenance_ = provenance_;
        return out;
    }

    /// Throws SchemaError on the first non-conforming observed cell.
    void validate() const {
        for (std::size_t j = 0; j < cols(); ++j) {
            const auto& spec = schema_[j];
            if (values_[j].size() != rows_ || mask_[j].size() != rows_)
                throw SchemaError("column '" + spec.code + "' has the wrong length");
            for (std::size_t i = 0; i < rows_; ++i) {
                if (mask_[j][i]) continue;
                const double v = values_[j][i];
                if (!std::isfinite(v))
                    throw SchemaError("row " + std::to_string(i + 1) + ": non-finite value in '" + spec.code + "'");
                if (spec.kind == VariableKind::categorical &&
                    (v != std::floor(v) || v < 0 || v >= static_cast<double>(spec.categories.size())))
                    throw SchemaError("row " + std::to_string(i + 1) + ": invalid category index in '" + spec.code + "'");
                if (spec.kind == VariableKind::binary && v != spec.binary_values[0] && v != spec.binary_values[1])
                    throw SchemaError("row " + std::to_string(i + 1) + ": '" + spec.code + "' is not one of its two binary values");
            }
        }
    }

    friend bool operator==(const Dataset& a, const Dataset& b) {
        if (a.rows_ != b.rows_ || a.cols() != b.cols()) return false;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            if (a.schema_[j].code != b.schema_[j].code || a.mask_[j] != b.mask_[j]) return false;
            for (std::size_t i = 0; i < a.rows_; ++i)
                if (!a.mask_[j][i] && a.values_[j][i] != b.values_[j][i]) return false;
        }
        return true;
    }

private:
    Schema schema_;
    std::vector<std::vector<double>> values_;
    std::vector<std::vector<std::uint8_t>> mask_;
    std::size_t rows_ = 0;
    Provenance provenance_;
};

// ---------------------------------------------------------------- CSV I/O

namespace detail {

/// Splits one CSV record; handles quoted fields with doubled quotes.
inline std::vector<std::string> split_csv_record(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::optional<double> parse_double(const std::string& s) {
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    if (first != last && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || !std::isfinite(v)) return std::nullopt;
    return v;
}

inline std::string format_roundtrip(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace detail

struct CsvOptions {
    std::vector<std::string> na_tokens{"", "NA"};
    bool ignore_extra_columns = false;
};

inline Dataset read_csv(std::istream& in, const Schema& schema, const CsvOptions& opts = {},
                        const std::string& source = "<stream>") {
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("'" + source + "' is empty: header row expected");
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    std::vector<std::string> header = detail::split_csv_record(line);
    for (auto& h : header) h = detail::trim(h);

    std::vector<std::optional<std::size_t>> file_to_schema(header.size());
    std::vector<bool> found(schema.size(), false);
    for (std::size_t f = 0; f < header.size(); ++f) {
        auto j = schema.find(header[f]);
        if (!j) {
            if (opts.ignore_extra_columns) continue;
            throw SchemaError("unknown column '" + header[f] + "' in '" + source + "'");
        }
        if (found[*j]) throw SchemaError("column '" + header[f] + "' appears twice in '" + source + "'");
        found[*j] = true;
        file_to_schema[f] = *j;
    }
    for (std::size_t j = 0; j < schema.size(); ++j)
        if (!found[j]) throw SchemaError("missing column '" + schema[j].code + "' in '" + source + "'");

    std::vector<std::vector<std::string>> records;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        records.push_back(detail::split_csv_record(line));
    }

    Dataset d(schema, records.size());
    const std::set<std::string> na(opts.na_tokens.begin(), opts.na_tokens.end());
    for (std::size_t r = 0; r < records.size(); ++r) {
        const auto& rec = records[r];
        if (rec.size() != header.size())
            throw SchemaError("row " + std::to_string(r + 1) + " of '" + source + "' has " + std::to_string(rec.size()) +
                              " fields, header has " + std::to_string(header.size()));
        for (std::size_t f = 0; f < rec.size(); ++f) {
            if (!file_to_schema[f]) continue;
            const std::size_t j = *file_to_schema[f];
            const auto& spec = schema[j];
            const std::string cell = detail::trim(rec[f]);
            if (na.count(cell)) continue;
            const std::string where = "row " + std::to_string(r + 1) + ", column '" + spec.code + "'";
            if (spec.kind == VariableKind::categorical) {
                auto idx = spec.find_category(cell);
                if (!idx) throw SchemaError(where + ": '" + cell + "' is not a listed category");
                d.set(r, j, static_cast<double>(*idx));
            } else {
                auto v = detail::parse_double(cell);
                if (!v) throw SchemaError(where + ": cannot parse '" + cell + "' as a number");
                if (spec.kind == VariableKind::binary && *v != spec.binary_values[0] && *v != spec.binary_values[1])
                    throw SchemaError(where + ": '" + cell + "' is not one of the two binary values");
                d.set(r, j, *v);
            }
        }
    }
    d.provenance().source = source;
    return d;
}

inline Dataset load_csv(const std::string& path, const Schema& schema, const CsvOptions& opts = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    return read_csv(in, schema, opts, path);
}

/// Numeric cells are written in shortest round-trip form, so reading the file
/// back reproduces every value bit for bit.
inline std::string to_csv_text(const Dataset& d, const std::string& na_token = "NA") {
    std::string out;
    for (std::size_t j = 0; j < d.cols(); ++j) {
        if (j) out += ',';
        out += csv_escape(d.schema()[j].code);
    }
    out += '\n';
    for (std::size_t i = 0; i < d.rows(); ++i) {
        for (std::size_t j = 0; j < d.cols(); ++j) {
            if (j) out += ',';
            if (d.missing(i, j)) {
                out += na_token;
            } else if (d.schema()[j].kind == VariableKind::categorical) {
                out += csv_escape(d.schema()[j].categories[static_cast<std::size_t>(d.value(i, j))].value);
            } else {
                out += detail::format_roundtrip(d.value(i, j));
            }
        }
        out += '\n';
    }
    return out;
}

inline void write_csv(const Dataset& d, const std::string& path, const std::string& na_token = "NA") {
    write_text(path, to_csv_text(d, na_token));
}

// ------------------------------------------------------------ subsampling

enum class Policy { all, on_site, hybrid, fully_remote };

inline std::string to_string(Policy p) {
    switch (p) {
        case Policy::all: return "all";
        case Policy::on_site: return "on_site";
        case Policy::hybrid: return "hybrid";
        case Policy::fully_remote: return "fully_remote";
    }
    return "?";
}

inline Policy parse_policy(const std::string& s) {
    if (s == "all") return Policy::all;
    if (s == "on_site") return Policy::on_site;
    if (s == "hybrid") return Policy::hybrid;
    if (s == "fully_remote") return Policy::fully_remote;
    throw ConfigError("unknown subsample '" + s + "' (expected all, on_site, hybrid or fully_remote)");
}

inline constexpr std::string_view policy_key_code = "employer_arr_qual";

/// Column holding the long-term working-arrangement policy.
inline std::size_t policy_key_index(const Schema& schema) {
    if (auto j = schema.find(policy_key_code)) return *j;
    auto keyed = schema.with_role(VariableRole::policy_key);
    if (keyed.size() == 1) return keyed.front();
    throw SchemaError("policy key column '" + std::string(policy_key_code) + "' is absent");
}

/// Rows whose policy key equals 1 (on_site), 2 (hybrid) or 3 (fully_remote).
inline std::vector<std::size_t> policy_rows(const Dataset& d, Policy policy) {
    std::vector<std::size_t> rows;
    if (policy == Policy::all) {
        rows.resize(d.rows());
        for (std::size_t i = 0; i < d.rows(); ++i) rows[i] = i;
        return rows;
    }
    const std::size_t key = policy_key_index(d.schema());
    const auto& spec = d.schema()[key];
    const double code = policy == Policy::on_site ? 1.0 : policy == Policy::hybrid ? 2.0 : 3.0;
    for (std::size_t i = 0; i < d.rows(); ++i) {
        if (d.missing(i, key)) continue;
        double v = d.value(i, key);
        if (spec.kind == VariableKind::categorical) {
            auto parsed = detail::parse_double(spec.categories[static_cast<std::size_t>(v)].value);
            if (!parsed) continue;
            v = *parsed;
        }
        if (v == code) rows.push_back(i);
    }
    return rows;
}

inline Dataset subsample(const Dataset& d, Policy policy) {
    if (policy != Policy::all) policy_key_index(d.schema());
    Dataset out = policy == Policy::all ? d : d.select_rows(policy_rows(d, policy));
    out.provenance().filters.push_back("subsample=" + to_string(policy));
    return out;
}

// --------------------------------------------------------------- encoding

struct DesignMatrix {
    std::vector<std::string> names;
    Eigen::MatrixXd x;
    bool has_intercept = false;
    std::vector<std::pair<std::string, std::string>> reference_levels;  // (code, dropped label)

    Eigen::Index rows() const { return x.rows(); }
    Eigen::Index cols() const { return x.cols(); }

    std::optional<Eigen::Index> find(std::string_view name) const {
        for (std::size_t k = 0; k < names.size(); ++k)
            if (names[k] == name) return static_cast<Eigen::Index>(k);
        return std::nullopt;
    }

    DesignMatrix with_column(std::string name, const Eigen::VectorXd& values) const {
        if (values.size() != x.rows())
            throw ConfigError("column '" + name + "' has " + std::to_string(values.size()) + " rows, design has " +
                              std::to_string(x.rows()));
        DesignMatrix out = *this;
        out.x.conservativeResize(Eigen::NoChange, x.cols() + 1);
        out.x.col(x.cols()) = values;
        out.names.push_back(std::move(name));
        return out;
    }

    DesignMatrix select_rows(const std::vector<std::size_t>& rows) const {
        DesignMatrix out = *this;
        out.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) out.x.row(static_cast<Eigen::Index>(r)) = x.row(static_cast<Eigen::Index>(rows[r]));
        return out;
    }
};

inline const std::string intercept_name = "(Intercept)";
inline constexpr std::string_view age_code = "age_quant";
inline const std::string age_squared_name = "Age2";

/// "Black or African American" -> "Black_or_African_American"
inline std::string sanitize_label(const std::string& label) {
    std::string out;
    bool pending = false;
    for (unsigned char c : label) {
        if (std::isalnum(c)) {
            if (pending && !out.empty()) out += '_';
            pending = false;
            out += static_cast<char>(c);
        } else {
            pending = true;
        }
    }
    return out;
}

struct EncodeOptions {
    /// Variables to include; empty means every variable in the schema.
    std::vector<VariableRole> roles;
};

inline std::vector<std::size_t> selected_variables(const Schema& schema, const EncodeOptions& opts) {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < schema.size(); ++j)
        if (opts.roles.empty() || std::find(opts.roles.begin(), opts.roles.end(), schema[j].role) != opts.roles.end())
            out.push_back(j);
    return out;
}

/// Intercept first, then variables in schema order: numeric columns pass
/// through, categoricals expand to one dummy per non-reference level, and
/// `Age2` follows `age_quant`.
inline DesignMatrix encode(const Dataset& d, const EncodeOptions& opts = {}) {
    const auto vars = selected_variables(d.schema(), opts);
    for (std::size_t j : vars)
        if (d.missing_count(j) > 0)
            throw ConfigError("variable '" + d.schema()[j].code + "' has " + std::to_string(d.missing_count(j)) +
                              " missing cells; impute before encoding");

    DesignMatrix dm;
    dm.has_intercept = true;
    std::vector<Eigen::VectorXd> cols;
    const auto n = static_cast<Eigen::Index>(d.rows());
    dm.names.push_back(intercept_name);
    cols.push_back(Eigen::VectorXd::Ones(n));
    for (std::size_t j : vars) {
        const auto& spec = d.schema()[j];
        const auto& col = d.column(j);
        if (spec.is_numeric()) {
            dm.names.push_back(spec.code);
            cols.push_back(Eigen::Map<const Eigen::VectorXd>(col.data(), n));
            if (spec.code == age_code) {
                dm.names.push_back(age_squared_name);
                cols.push_back(cols.back().array().square().matrix());
            }
            continue;
        }
        dm.reference_levels.emplace_back(spec.code, spec.categories[spec.reference].label);
        for (std::size_t c = 0; c < spec.categories.size(); ++c) {
            if (c == spec.reference) continue;
            Eigen::VectorXd dummy(n);
            for (Eigen::Index i = 0; i < n; ++i) dummy[i] = col[static_cast<std::size_t>(i)] == static_cast<double>(c) ? 1.0 : 0.0;
            dm.names.push_back(spec.code + "_" + sanitize_label(spec.categories[c].label));
            cols.push_back(std::move(dummy));
        }
    }
    dm.x.resize(n, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) dm.x.col(static_cast<Eigen::Index>(k)) = cols[k];
    return dm;
}

// ---------------------------------------------------------------- summary

struct ContinuousSummary {
    std::string code;
    std::size_t n = 0;
    double mean = 0, sd = 0, min = 0, max = 0;
};

struct CategoryCount {
    std::string label;
    std::size_t frequency = 0;
    double percent = 0;     // fraction of non-missing
    double cumulative = 0;
};

struct CategoricalSummary {
    std::string code;
    std::size_t n = 0;
    std::vector<CategoryCount> levels;
};

struct DatasetSummary {
    std::size_t rows = 0;
    std::vector<ContinuousSummary> continuous;
    std::vector<CategoricalSummary> categorical;

    const CategoricalSummary* find_categorical(std::string_view code) const {
        for (const auto& c : categorical)
            if (c.code == code) return &c;
        return nullptr;
    }
    const ContinuousSummary* find_continuous(std::string_view code) const {
        for (const auto& c : continuous)
            if (c.code == code) return &c;
        return nullptr;
    }
};

/// Statistics on observed cells only. Binary variables are tabulated like
/// categoricals with their two values as levels.
inline DatasetSummary summarize(const Dataset& d) {
    DatasetSummary s;
    s.rows = d.rows();
    for (std::size_t j = 0; j < d.cols(); ++j) {
        const auto& spec = d.schema()[j];
        if (spec.kind == VariableKind::continuous) {
            ContinuousSummary c{spec.code};
            double sum = 0;
            c.min = std::numeric_limits<double>::infinity();
            c.max = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < d.rows(); ++i) {
                if (d.missing(i, j)) continue;
                const double v = d.value(i, j);
                ++c.n;
                sum += v;
                c.min = std::min(c.min, v);
                c.max = std::max(c.max, v);
            }
            if (c.n == 0) {
                c.mean = c.sd = c.min = c.max = std::numeric_limits<double>::quiet_NaN();
            } else {
                c.mean = sum / static_cast<double>(c.n);
                double ss = 0;
                for (std::size_t i = 0; i < d.rows(); ++i)
                    if (!d.missing(i, j)) ss += (d.value(i, j) - c.mean) * (d.value(i, j) - c.mean);
                c.sd = c.n > 1 ? std::sqrt(ss / static_cast<double>(c.n - 1)) : 0.0;
            }
            s.continuous.push_back(c);
            continue;
        }
        CategoricalSummary c;
        c.code = spec.code;
        std::vector<std::string> labels;
        if (spec.kind == VariableKind::categorical) {
            for (const auto& cat : spec.categories) labels.push_back(cat.label);
        } else {
            for (double v : spec.binary_values) labels.push_back(detail::format_roundtrip(v));
        }
        std::vector<std::size_t> counts(labels.size(), 0);
        for (std::size_t i = 0; i < d.rows(); ++i) {
            if (d.missing(i, j)) continue;
            const double v = d.value(i, j);
            const std::size_t level = spec.kind == VariableKind::categorical ? static_cast<std::size_t>(v)
                                                                              : (v == spec.binary_values[0] ? 0u : 1u);
            ++counts[level];
            ++c.n;
        }
        double cum = 0;
        for (std::size_t k = 0; k < labels.size(); ++k) {
            const double pct = c.n ? static_cast<double>(counts[k]) / static_cast<double>(c.n) : 0.0;
            cum += pct;
            c.levels.push_back({labels[k], counts[k], pct, cum});
        }
        s.categorical.push_back(std::move(c));
    }
    return s;
}

inline Table continuous_summary_table(const DatasetSummary& s) {
    Table t{"Continuous variables", {"Variable", "N", "Mean", "St.dev", "Min", "Max"}, {}};
    for (const auto& c : s.continuous)
        t.add_row({c.code, std::to_string(c.n), format_fixed(c.mean, 2), format_fixed(c.sd, 2), format_fixed(c.min, 2),
                   format_fixed(c.max, 2)});
    return t;
}

inline Table categorical_summary_table(const DatasetSummary& s) {
    Table t{"Categorical variables", {"Variable", "Level", "Freq.", "Percent", "Cum."}, {}};
    for (const auto& c : s.categorical)
        for (const auto& l : c.levels)
            t.add_row({c.code, l.label, format_grouped(static_cast<double>(l.frequency)), format_fixed(l.percent, 3),
                       format_fixed(l.cumulative, 3)});
    return t;
}

}  // namespace lh
