#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stil/errors.hpp"

namespace stil::cli {

namespace fs = std::filesystem;
using nlohmann::json;

/// One parsed metrics.jsonl line; missing optional values are NaN.
struct MetricsRow {
    int64_t epoch = 0;
    double val_metric = NAN;
    double total_loss = NAN;
    double pl_accuracy = NAN;
    double confident_ratio = NAN;
    double q_accuracy_confident = NAN;
    double q_accuracy_all = NAN;
    double unlabeled_accuracy = NAN;
    std::array<double, 4> case_ratios{NAN, NAN, NAN, NAN};
};

struct MetricsLog {
    std::vector<MetricsRow> rows;
    int64_t skipped = 0;  // malformed lines
    std::string metric_name = "accuracy";
};

namespace detail {

inline double number_or_nan(const json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) return NAN;
    if (!j[key].is_number()) throw json::type_error::create(302, std::string(key) + " is not a number", nullptr);
    return j[key].get<double>();
}

}  // namespace detail

inline MetricsLog read_metrics(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open metrics log " + path.string());
    MetricsLog log;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = json::parse(line);
            MetricsRow r;
            r.epoch = j.at("epoch").get<int64_t>();
            r.val_metric = detail::number_or_nan(j, "val_metric");
            r.total_loss = j.contains("losses") ? detail::number_or_nan(j["losses"], "total") : NAN;
            r.pl_accuracy = detail::number_or_nan(j, "pl_accuracy");
            r.confident_ratio = detail::number_or_nan(j, "confident_ratio");
            r.q_accuracy_confident = detail::number_or_nan(j, "q_accuracy_confident");
            r.q_accuracy_all = detail::number_or_nan(j, "q_accuracy_all");
            r.unlabeled_accuracy = detail::number_or_nan(j, "unlabeled_accuracy");
            if (j.contains("case_ratios")) {
                const auto& c = j["case_ratios"];
                if (!c.is_array() || c.size() != 4) throw std::runtime_error("case_ratios");
                for (size_t k = 0; k < 4; ++k) r.case_ratios[k] = c[k].get<double>();
            }
            if (j.contains("val_metric_name") && j["val_metric_name"].is_string()) {
                log.metric_name = j["val_metric_name"].get<std::string>();
            }
            log.rows.push_back(r);
        } catch (const std::exception&) {
            ++log.skipped;
        }
    }
    return log;
}

struct Series {
    std::string name;
    std::string color;
    std::vector<double> y;  // NaN breaks the line
};

/// Minimal line chart; x is the epoch.
inline std::string line_chart_svg(const std::string& title, const std::vector<double>& x, const std::vector<Series>& series,
                                  std::optional<std::pair<double, double>> y_range = std::nullopt) {
    constexpr double W = 640, H = 400, L = 60, R = 150, T = 40, B = 50;
    double x0 = x.empty() ? 0 : *std::min_element(x.begin(), x.end());
    double x1 = x.empty() ? 1 : *std::max_element(x.begin(), x.end());
    if (x1 <= x0) x1 = x0 + 1;
    double y0 = std::numeric_limits<double>::infinity(), y1 = -y0;
    if (y_range) {
        y0 = y_range->first;
        y1 = y_range->second;
    } else {
        for (const auto& s : series) {
            for (double v : s.y) {
                if (std::isfinite(v)) {
                    y0 = std::min(y0, v);
                    y1 = std::max(y1, v);
                }
            }
        }
        if (!std::isfinite(y0)) y0 = 0, y1 = 1;
        if (y1 <= y0) y1 = y0 + 1;
    }
    auto px = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double v) { return H - B - (v - y0) / (y1 - y0) * (H - T - B); };
    char buf[256];
    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" font-family=\"sans-serif\" font-size=\"12\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<text x=\"320\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" + title + "</text>\n";
    std::snprintf(buf, sizeof buf, "<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" stroke=\"#444\"/>\n", L, T,
                  W - L - R, H - T - B);
    out += buf;
    for (int k = 0; k <= 4; ++k) {
        const double v = y0 + (y1 - y0) * k / 4.0;
        std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"end\">%.3g</text>\n", L - 6, py(v) + 4, v);
        out += buf;
        const double u = x0 + (x1 - x0) * k / 4.0;
        std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"middle\">%.3g</text>\n", px(u), H - B + 18, u);
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"middle\">epoch</text>\n", (L + W - R) / 2, H - 12);
    out += buf;
    for (size_t s = 0; s < series.size(); ++s) {
        const auto& se = series[s];
        std::string pts;
        auto flush = [&] {
            if (!pts.empty()) out += "<polyline fill=\"none\" stroke=\"" + se.color + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
            pts.clear();
        };
        for (size_t i = 0; i < se.y.size() && i < x.size(); ++i) {
            if (!std::isfinite(se.y[i])) {
                flush();
                continue;
            }
            std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(x[i]), py(std::clamp(se.y[i], y0, y1)));
            pts += buf;
        }
        flush();
        const double ly = T + 14 + 18.0 * static_cast<double>(s);
        std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"%s\" stroke-width=\"2\"/>\n",
                      W - R + 10, ly - 4, W - R + 30, ly - 4, se.color.c_str());
        out += buf;
        std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\">", W - R + 36, ly);
        out += buf + se.name + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

struct DiagnoseReport {
    std::vector<fs::path> files;
    int64_t rows = 0;
    int64_t skipped = 0;
};

/// Writes diagnostics.csv plus one SVG per figure into `out_dir`.
inline DiagnoseReport write_diagnostics(const MetricsLog& log, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    DiagnoseReport rep;
    rep.rows = static_cast<int64_t>(log.rows.size());
    rep.skipped = log.skipped;
    std::vector<double> x;
    auto col = [&](auto get) {
        std::vector<double> v;
        for (const auto& r : log.rows) v.push_back(get(r));
        return v;
    };
    for (const auto& r : log.rows) x.push_back(static_cast<double>(r.epoch));

    const auto csv_path = out_dir / "diagnostics.csv";
    {
        std::ofstream csv(csv_path);
        if (!csv) throw DataError("cannot write " + csv_path.string());
        csv << "epoch,val_metric,total_loss,pl_accuracy,confident_ratio,q_accuracy_confident,q_accuracy_all,"
               "unlabeled_accuracy,case1,case2i,case2t,case3\n";
        auto f = [](double v) {
            if (!std::isfinite(v)) return std::string();
            char b[32];
            std::snprintf(b, sizeof b, "%.6g", v);
            return std::string(b);
        };
        for (const auto& r : log.rows) {
            csv << r.epoch << ',' << f(r.val_metric) << ',' << f(r.total_loss) << ',' << f(r.pl_accuracy) << ','
                << f(r.confident_ratio) << ',' << f(r.q_accuracy_confident) << ',' << f(r.q_accuracy_all) << ','
                << f(r.unlabeled_accuracy);
            for (double c : r.case_ratios) csv << ',' << f(c);
            csv << '\n';
        }
    }
    rep.files.push_back(csv_path);

    auto save = [&](const std::string& name, const std::string& svg) {
        const auto p = out_dir / name;
        std::ofstream o(p);
        if (!o) throw DataError("cannot write " + p.string());
        o << svg;
        rep.files.push_back(p);
    };
    const std::pair<double, double> unit{0.0, 1.0};
    save("val_metric.svg",
         line_chart_svg("validation " + log.metric_name, x, {{log.metric_name, "#1f77b4", col([](auto& r) { return r.val_metric; })}}));
    save("loss.svg", line_chart_svg("training loss", x, {{"total", "#d62728", col([](auto& r) { return r.total_loss; })}}));
    save("pseudo_labels.svg",
         line_chart_svg("pseudo-label quality", x,
                        {{"PL acc (conf.)", "#1f77b4", col([](auto& r) { return r.pl_accuracy; })},
                         {"confident ratio", "#ff7f0e", col([](auto& r) { return r.confident_ratio; })},
                         {"unlabeled acc", "#2ca02c", col([](auto& r) { return r.unlabeled_accuracy; })}},
                        unit));
    save("prototypes.svg",
         line_chart_svg("prototype predictions", x,
                        {{"q acc (conf.)", "#9467bd", col([](auto& r) { return r.q_accuracy_confident; })},
                         {"q acc (all)", "#8c564b", col([](auto& r) { return r.q_accuracy_all; })}},
                        unit));
    save("cases.svg", line_chart_svg("consensus cases", x,
                                     {{"case 1", "#1f77b4", col([](auto& r) { return r.case_ratios[0]; })},
                                      {"case 2 (image)", "#ff7f0e", col([](auto& r) { return r.case_ratios[1]; })},
                                      {"case 2 (tabular)", "#2ca02c", col([](auto& r) { return r.case_ratios[2]; })},
                                      {"case 3", "#d62728", col([](auto& r) { return r.case_ratios[3]; })}},
                                     unit));
    return rep;
}

}  // namespace stil::cli
