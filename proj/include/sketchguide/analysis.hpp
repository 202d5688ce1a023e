// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "guidance.hpp"
#include "tensor.hpp"

namespace sketchguide {

struct Histogram {
    std::vector<double> edges; // bins + 1
    std::vector<std::uint64_t> counts;
    bool operator==(const Histogram&) const = default;
};

struct LatentStats {
    std::string label;
    std::size_t count = 0;               // latents pooled
    std::size_t elements_per_latent = 0;
    double mean = 0.0;
    double variance = 0.0;               // population variance over all entries
    Histogram histogram;
};

struct HistogramSpec {
    int bins = 200;
    double lo = -5.0;
    double hi = 5.0;
};

// Pooled elementwise statistics (Welford) and a histogram whose edge bins
// absorb out-of-range values.
inline LatentStats latent_statistics(const std::vector<Latent>& latents, HistogramSpec spec = {},
                                     std::string label = {}) {
    if (latents.empty()) throw parameter_error("latent_statistics needs at least one latent");
    if (spec.bins <= 0 || !(spec.hi > spec.lo)) throw parameter_error("invalid histogram spec");
    const Shape shape = latents.front().shape();
    LatentStats s;
    s.label = std::move(label);
    s.count = latents.size();
    s.elements_per_latent = shape.size();
    s.histogram.counts.assign(static_cast<std::size_t>(spec.bins), 0);
    for (int i = 0; i <= spec.bins; ++i) {
        s.histogram.edges.push_back(spec.lo + (spec.hi - spec.lo) * i / spec.bins);
    }
    double mean = 0.0, m2 = 0.0;
    std::uint64_t n = 0;
    const double width = (spec.hi - spec.lo) / spec.bins;
    for (const auto& z : latents) {
        if (z.shape() != shape) throw shape_error("latent_statistics: latents differ in shape");
        for (double v : z.values()) {
            ++n;
            const double d = v - mean;
            mean += d / static_cast<double>(n);
            m2 += d * (v - mean);
            auto bin = static_cast<long>(std::floor((v - spec.lo) / width));
            bin = std::clamp(bin, 0L, static_cast<long>(spec.bins - 1));
            ++s.histogram.counts[static_cast<std::size_t>(bin)];
        }
    }
    s.mean = mean;
    s.variance = n > 0 ? std::max(m2 / static_cast<double>(n), 0.0) : 0.0;
    return s;
}

struct DistributionReport {
    std::string label_a, label_b;
    double mean_a = 0, mean_b = 0, variance_a = 0, variance_b = 0;
    double variance_ratio = 1.0;  // var(a) / var(b)
    double mean_difference = 0.0; // mean(a) - mean(b)
    // Largest gap between the two binned empirical CDFs.
    double ks_statistic = 0.0;
    Histogram histogram_a, histogram_b;

    [[nodiscard]] nlohmann::json to_json() const {
        auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
        return {{"label_a", label_a},       {"label_b", label_b},         {"mean_a", mean_a},
                {"mean_b", mean_b},         {"variance_a", variance_a},   {"variance_b", variance_b},
                {"variance_ratio", num(variance_ratio)}, {"mean_difference", mean_difference},
                {"ks_statistic", ks_statistic}};
    }

    // Columns: bin_lo, bin_hi, count_a, count_b
    [[nodiscard]] std::string histogram_csv() const {
        std::ostringstream out;
        out.precision(17);
        out << "bin_lo,bin_hi,count_a,count_b\n";
        for (std::size_t i = 0; i < histogram_a.counts.size(); ++i) {
            out << histogram_a.edges[i] << ',' << histogram_a.edges[i + 1] << ',' << histogram_a.counts[i] << ','
                << histogram_b.counts[i] << '\n';
        }
        return out.str();
    }
};

inline DistributionReport compare_distributions(const LatentStats& a, const LatentStats& b) {
    if (a.histogram.edges != b.histogram.edges) throw parameter_error("histograms use different binning");
    DistributionReport r;
    r.label_a = a.label;
    r.label_b = b.label;
    r.mean_a = a.mean;
    r.mean_b = b.mean;
    r.variance_a = a.variance;
    r.variance_b = b.variance;
    if (b.variance > 0.0) r.variance_ratio = a.variance / b.variance;
    else r.variance_ratio = a.variance == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    r.mean_difference = a.mean - b.mean;
    double total_a = 0, total_b = 0;
    for (auto c : a.histogram.counts) total_a += static_cast<double>(c);
    for (auto c : b.histogram.counts) total_b += static_cast<double>(c);
    double cdf_a = 0, cdf_b = 0;
    for (std::size_t i = 0; i < a.histogram.counts.size(); ++i) {
        cdf_a += static_cast<double>(a.histogram.counts[i]) / total_a;
        cdf_b += static_cast<double>(b.histogram.counts[i]) / total_b;
        r.ks_statistic = std::max(r.ks_statistic, std::abs(cdf_a - cdf_b));
    }
    r.histogram_a = a.histogram;
    r.histogram_b = b.histogram;
    return r;
}

inline std::vector<GuidanceTraceRow> parse_trace(const std::string& jsonl) {
    std::vector<GuidanceTraceRow> rows;
    std::istringstream in(jsonl);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            rows.push_back(trace_row_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw parameter_error("malformed trace line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return rows;
}

struct TraceReport {
    std::vector<GuidanceTraceRow> rows;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double total_loss_after = 0.0;
    double descent_fraction = 0.0; // rows with loss_after < loss_before

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json table = nlohmann::json::array();
        for (const auto& r : rows) table.push_back(sketchguide::to_json(r));
        return {{"rows", table},
                {"initial_loss", initial_loss},
                {"final_loss", final_loss},
                {"total_loss_after", total_loss_after},
                {"descent_fraction", descent_fraction}};
    }
};

inline TraceReport trace_report(std::vector<GuidanceTraceRow> rows) {
    TraceReport r;
    r.rows = std::move(rows);
    if (r.rows.empty()) return r;
    r.initial_loss = r.rows.front().loss_before;
    r.final_loss = r.rows.back().loss_after;
    int descents = 0;
    for (const auto& row : r.rows) {
        r.total_loss_after += row.loss_after;
        if (row.loss_after < row.loss_before) ++descents;
    }
    r.descent_fraction = static_cast<double>(descents) / static_cast<double>(r.rows.size());
    return r;
}

} // namespace sketchguide
