#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stil/errors.hpp"

namespace stil::data {

struct LabelSplit {
    std::vector<std::string> labeled_ids;
    std::vector<std::string> unlabeled_ids;
    // Classes whose rounded quota was zero and got bumped to one sample.
    std::vector<int64_t> rounded_up_classes;
};

/// Stratified labeled/unlabeled split: each class keeps round(fraction * n_c)
/// labeled samples (at least one). Output order follows the input order.
inline LabelSplit make_label_split(const std::vector<std::string>& ids, const std::vector<int64_t>& classes,
                                   double label_fraction, uint64_t seed) {
    if (!(label_fraction > 0.0 && label_fraction <= 1.0)) {
        throw ConfigError("label_fraction must lie in (0, 1]");
    }
    require(ids.size() == classes.size(), "make_label_split: ids and classes differ in length");

    std::map<int64_t, std::vector<size_t>> by_class;
    for (size_t i = 0; i < classes.size(); ++i) by_class[classes[i]].push_back(i);

    std::mt19937_64 rng(seed);
    std::vector<char> labeled(ids.size(), 0);
    LabelSplit out;
    for (auto& [cls, members] : by_class) {
        const auto n = static_cast<double>(members.size());
        auto quota = static_cast<size_t>(std::llround(label_fraction * n));
        if (quota == 0) {
            quota = 1;
            out.rounded_up_classes.push_back(cls);
        }
        quota = std::min(quota, members.size());
        std::shuffle(members.begin(), members.end(), rng);
        for (size_t k = 0; k < quota; ++k) labeled[members[k]] = 1;
    }
    for (size_t i = 0; i < ids.size(); ++i) {
        (labeled[i] ? out.labeled_ids : out.unlabeled_ids).push_back(ids[i]);
    }
    return out;
}

// Reloadable record of which ids went where.
struct SplitManifest {
    uint64_t seed = 0;
    double label_fraction = 1.0;
    std::vector<std::string> labeled_ids;
    std::vector<std::string> unlabeled_ids;
    std::vector<std::string> val_ids;
    std::vector<std::string> test_ids;

    nlohmann::json to_json() const {
        return {{"seed", seed},
                {"label_fraction", label_fraction},
                {"labeled_ids", labeled_ids},
                {"unlabeled_ids", unlabeled_ids},
                {"val_ids", val_ids},
                {"test_ids", test_ids}};
    }

    static SplitManifest from_json(const nlohmann::json& j) {
        SplitManifest m;
        try {
            m.seed = j.at("seed").get<uint64_t>();
            m.label_fraction = j.at("label_fraction").get<double>();
            m.labeled_ids = j.at("labeled_ids").get<std::vector<std::string>>();
            m.unlabeled_ids = j.at("unlabeled_ids").get<std::vector<std::string>>();
            m.val_ids = j.value("val_ids", std::vector<std::string>{});
            m.test_ids = j.value("test_ids", std::vector<std::string>{});
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("split manifest: ") + e.what());
        }
        return m;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw DataError("cannot write split manifest " + path);
        out << to_json().dump(2) << '\n';
    }

    static SplitManifest load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open split manifest " + path);
        try {
            return from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError("split manifest " + path + ": " + e.what());
        }
    }
};

}  // namespace stil::data
