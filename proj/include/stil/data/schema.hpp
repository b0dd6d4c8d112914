#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stil/errors.hpp"

namespace stil::data {

enum class ColumnKind { categorical, continuous };

inline std::string to_string(ColumnKind kind) {
    return kind == ColumnKind::categorical ? "categorical" : "continuous";
}

struct ColumnSpec {
    std::string name;
    ColumnKind kind = ColumnKind::continuous;
    int64_t cardinality = 0;              // categorical only
    std::vector<std::string> categories;  // optional vocabulary, index = ordinal
    double mean = 0.0;                    // continuous only, filled from the train split
    double std = 1.0;

    bool is_categorical() const { return kind == ColumnKind::categorical; }
};

/// Ordered column layout shared by every split. Continuous statistics are
/// populated by the loader from the training rows.
class TabularSchema {
public:
    TabularSchema() = default;
    explicit TabularSchema(std::vector<ColumnSpec> columns) : columns_(std::move(columns)) { validate(); }

    const std::vector<ColumnSpec>& columns() const { return columns_; }
    std::vector<ColumnSpec>& columns() { return columns_; }
    int64_t size() const { return static_cast<int64_t>(columns_.size()); }
    const ColumnSpec& operator[](int64_t i) const { return columns_.at(static_cast<size_t>(i)); }

    std::vector<int64_t> categorical_indices() const {
        std::vector<int64_t> out;
        for (int64_t i = 0; i < size(); ++i) {
            if (columns_[i].is_categorical()) out.push_back(i);
        }
        return out;
    }
    std::vector<int64_t> continuous_indices() const {
        std::vector<int64_t> out;
        for (int64_t i = 0; i < size(); ++i) {
            if (!columns_[i].is_categorical()) out.push_back(i);
        }
        return out;
    }
    std::vector<int64_t> cardinalities() const {
        std::vector<int64_t> out;
        for (const auto& c : columns_) {
            if (c.is_categorical()) out.push_back(c.cardinality);
        }
        return out;
    }

    void validate() const {
        std::set<std::string> seen;
        for (const auto& c : columns_) {
            if (c.name.empty()) throw ConfigError("schema: empty column name");
            if (!seen.insert(c.name).second) throw ConfigError("schema: duplicate column '" + c.name + "'");
            if (c.is_categorical()) {
                if (c.cardinality < 2) {
                    throw ConfigError("schema: column '" + c.name + "' needs cardinality >= 2");
                }
                if (!c.categories.empty() && static_cast<int64_t>(c.categories.size()) != c.cardinality) {
                    throw ConfigError("schema: column '" + c.name + "' category list does not match cardinality");
                }
            } else if (!(c.std > 0.0) || !std::isfinite(c.std) || !std::isfinite(c.mean)) {
                throw ConfigError("schema: column '" + c.name + "' needs finite mean and std > 0");
            }
        }
    }

    /// Ordinal index of a raw categorical token. Accepts either a vocabulary
    /// entry or an integer literal in [0, cardinality).
    std::optional<int64_t> category_index(int64_t column, const std::string& raw) const {
        const auto& c = (*this)[column];
        if (!c.categories.empty()) {
            for (size_t k = 0; k < c.categories.size(); ++k) {
                if (c.categories[k] == raw) return static_cast<int64_t>(k);
            }
            return std::nullopt;
        }
        try {
            size_t used = 0;
            const long long v = std::stoll(raw, &used);
            if (used != raw.size() || v < 0 || v >= c.cardinality) return std::nullopt;
            return static_cast<int64_t>(v);
        } catch (const std::exception&) {
            return std::nullopt;
        }
    }

    double standardize(int64_t column, double value) const {
        const auto& c = (*this)[column];
        return (value - c.mean) / c.std;
    }

    nlohmann::json to_json() const {
        nlohmann::json cols = nlohmann::json::array();
        for (const auto& c : columns_) {
            nlohmann::json j{{"name", c.name}, {"kind", to_string(c.kind)}};
            if (c.is_categorical()) {
                j["cardinality"] = c.cardinality;
                if (!c.categories.empty()) j["categories"] = c.categories;
            } else {
                j["mean"] = c.mean;
                j["std"] = c.std;
            }
            cols.push_back(std::move(j));
        }
        return nlohmann::json{{"columns", cols}};
    }

    static TabularSchema from_json(const nlohmann::json& j) {
        if (!j.contains("columns") || !j["columns"].is_array()) {
            throw ConfigError("schema: expected an object with a 'columns' array");
        }
        std::vector<ColumnSpec> cols;
        for (const auto& jc : j["columns"]) {
            ColumnSpec c;
            c.name = jc.at("name").get<std::string>();
            const auto kind = jc.at("kind").get<std::string>();
            if (kind == "categorical") {
                c.kind = ColumnKind::categorical;
                if (jc.contains("categories")) {
                    c.categories = jc["categories"].get<std::vector<std::string>>();
                }
                c.cardinality = jc.contains("cardinality") ? jc["cardinality"].get<int64_t>()
                                                           : static_cast<int64_t>(c.categories.size());
            } else if (kind == "continuous") {
                c.kind = ColumnKind::continuous;
                c.mean = jc.value("mean", 0.0);
                c.std = jc.value("std", 1.0);
            } else {
                throw ConfigError("schema: column '" + c.name + "' has unknown kind '" + kind + "'");
            }
            cols.push_back(std::move(c));
        }
        return TabularSchema(std::move(cols));
    }

private:
    std::vector<ColumnSpec> columns_;
};

}  // namespace stil::data
