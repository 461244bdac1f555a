#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace mdf {

struct SummaryStats {
    std::size_t n = 0;
    double mean = 0, median = 0, mode = 0, range = 0, variance = 0, std_dev = 0;
    double p25 = 0, p50 = 0, p75 = 0, iqr = 0;
    /// Adjusted Fisher-Pearson; NaN when n < 3 or the data are constant.
    double skewness = 0;
    /// Unbiased excess kurtosis; NaN when n < 4 or the data are constant.
    double kurtosis = 0;
};

/// Requires n >= 2. Sample variance, linearly interpolated percentiles, and
/// the smallest of the most frequent values as mode.
SummaryStats describe(std::span<const double> samples);

/// Linear interpolation between closest ranks of sorted data, q in [0, 1].
double percentile_sorted(std::span<const double> sorted, double q);

struct WilcoxonResult {
    double w_plus = 0.0;
    double w_minus = 0.0;
    std::size_t n_effective = 0;
    double p_value = 1.0;
    bool exact = true;
};

/// Exact null distribution of W+ for the given (mid)ranks: entry s is
/// P(2 W+ = s). Doubling keeps midranks integral.
std::vector<double> signed_rank_distribution(std::span<const double> ranks);

/// Midranks (1-based) of the values.
std::vector<double> midranks(std::span<const double> values);

/// Two-sided signed-rank test on x - y. Zero differences are dropped; exact
/// for up to 25 nonzero pairs, normal approximation with continuity and tie
/// correction above.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y);

inline constexpr std::size_t kExactWilcoxonLimit = 25;

/// Holm step-down adjustment, results in input order.
std::vector<double> holm_adjust(std::span<const double> raw);

/// Per-run metric values keyed by metric name, aligned with `seeds`.
struct MetricTable {
    std::string name;
    std::vector<std::int64_t> seeds;
    std::map<std::string, std::vector<double>> metrics;
};

struct PairedComparison {
    std::string name;  // "<A> vs <B>"
    std::string metric;
    std::size_t n = 0;
    double w_plus = 0.0;
    double raw_p = 1.0;
    double holm_p = 1.0;
    bool reject = false;
    double median_diff = 0.0;
    std::string direction;
    /// Set when the comparison could not be computed (e.g. all differences zero).
    std::optional<std::string> error;
};

inline constexpr double kSignificanceLevel = 0.05;

/// For every metric and baseline: Wilcoxon on a - b, Holm across the
/// baselines of that metric, and the median paired difference.
/// Baselines may cover a subset of a's seeds; rows are aligned by seed.
std::vector<PairedComparison> paired_report(const MetricTable& a, const std::vector<MetricTable>& baselines,
                                            const std::vector<std::string>& metrics);

nlohmann::json to_json(const SummaryStats& s);
nlohmann::json to_json(const PairedComparison& c);

/// Aligned columns: one row per statistic, one column per metric.
std::string format_summary_table(const std::vector<std::pair<std::string, SummaryStats>>& columns);
/// Aligned columns: one row per comparison.
std::string format_paired_table(const std::vector<PairedComparison>& rows);

}  // namespace mdf
