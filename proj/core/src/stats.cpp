#include "mdf/stats.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "mdf/error.hpp"

namespace mdf {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return percentile_sorted(v, 0.5);
}

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

double percentile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw Error(Errc::insufficient_samples, "percentile of an empty sample");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

SummaryStats describe(std::span<const double> samples) {
    if (samples.size() < 2) {
        throw Error(Errc::insufficient_samples, "describe needs at least 2 samples, got " + std::to_string(samples.size()));
    }
    SummaryStats s;
    s.n = samples.size();
    const double n = static_cast<double>(s.n);
    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());

    s.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / n;
    double m2 = 0, m3 = 0, m4 = 0;
    for (double x : sorted) {
        const double d = x - s.mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    s.variance = m2 / (n - 1);
    s.std_dev = std::sqrt(s.variance);
    m2 /= n;
    m3 /= n;
    m4 /= n;

    s.p25 = percentile_sorted(sorted, 0.25);
    s.p50 = percentile_sorted(sorted, 0.5);
    s.p75 = percentile_sorted(sorted, 0.75);
    s.median = s.p50;
    s.iqr = s.p75 - s.p25;
    s.range = sorted.back() - sorted.front();

    std::size_t best_count = 0;
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
        if (j - i > best_count) {
            best_count = j - i;
            s.mode = sorted[i];
        }
        i = j;
    }

    if (s.n >= 3 && m2 > 0) {
        const double g1 = m3 / std::pow(m2, 1.5);
        s.skewness = std::sqrt(n * (n - 1)) / (n - 2) * g1;
    } else {
        s.skewness = kNaN;
    }
    if (s.n >= 4 && m2 > 0) {
        const double g2 = m4 / (m2 * m2) - 3.0;
        s.kurtosis = (n - 1) / ((n - 2) * (n - 3)) * ((n + 1) * g2 + 6.0);
    } else {
        s.kurtosis = kNaN;
    }
    return s;
}

std::vector<double> midranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
        const double r = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
        i = j;
    }
    return ranks;
}

namespace {

/// Counts of sign assignments per doubled W+ (entry s counts 2W+ = s).
std::vector<std::uint64_t> signed_rank_counts(std::span<const double> ranks) {
    std::vector<std::uint64_t> doubled;
    std::uint64_t total = 0;
    for (double r : ranks) {
        doubled.push_back(static_cast<std::uint64_t>(std::llround(2.0 * r)));
        total += doubled.back();
    }
    std::vector<std::uint64_t> counts(total + 1, 0);
    counts[0] = 1;
    std::uint64_t reach = 0;
    for (std::uint64_t r : doubled) {
        reach += r;
        for (std::uint64_t s = reach + 1; s-- > r;) counts[s] += counts[s - r];
    }
    return counts;
}

}  // namespace

std::vector<double> signed_rank_distribution(std::span<const double> ranks) {
    const auto counts = signed_rank_counts(ranks);
    const double total = std::ldexp(1.0, static_cast<int>(ranks.size()));
    std::vector<double> dist(counts.size());
    for (std::size_t s = 0; s < counts.size(); ++s) dist[s] = static_cast<double>(counts[s]) / total;
    return dist;
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) {
        throw Error(Errc::length_mismatch, "paired samples differ in length: " + std::to_string(x.size()) + " vs " +
                                               std::to_string(y.size()));
    }
    std::vector<double> d;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] - y[i] != 0.0) d.push_back(x[i] - y[i]);
    if (d.empty()) throw Error(Errc::all_zero_differences, "every paired difference is zero");

    std::vector<double> mags;
    for (double v : d) mags.push_back(std::abs(v));
    const auto ranks = midranks(mags);

    WilcoxonResult r;
    r.n_effective = d.size();
    for (std::size_t i = 0; i < d.size(); ++i) (d[i] > 0 ? r.w_plus : r.w_minus) += ranks[i];

    if (r.n_effective <= kExactWilcoxonLimit) {
        const auto counts = signed_rank_counts(ranks);
        const auto w2 = static_cast<std::size_t>(std::llround(2.0 * r.w_plus));
        std::uint64_t lower = 0, upper = 0;
        for (std::size_t s = 0; s < counts.size(); ++s) {
            if (s <= w2) lower += counts[s];
            if (s >= w2) upper += counts[s];
        }
        const double total = std::ldexp(1.0, static_cast<int>(r.n_effective));
        r.p_value = std::min(1.0, 2.0 * static_cast<double>(std::min(lower, upper)) / total);
        r.exact = true;
    } else {
        const double n = static_cast<double>(r.n_effective);
        const double mu = n * (n + 1) / 4.0;
        double var = n * (n + 1) * (2 * n + 1) / 24.0;
        std::vector<double> sorted = mags;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size();) {
            std::size_t j = i;
            while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
            const double t = static_cast<double>(j - i);
            var -= (t * t * t - t) / 48.0;
            i = j;
        }
        const double z = std::max(0.0, std::abs(r.w_plus - mu) - 0.5) / std::sqrt(var);
        r.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
        r.exact = false;
    }
    return r;
}

std::vector<double> holm_adjust(std::span<const double> raw) {
    for (double p : raw) {
        if (!(p >= 0.0 && p <= 1.0)) throw Error(Errc::out_of_range_p, "p-value " + std::to_string(p) + " outside [0, 1]");
    }
    const std::size_t m = raw.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return raw[a] < raw[b]; });
    std::vector<double> adjusted(m);
    double running = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        running = std::max(running, static_cast<double>(m - i) * raw[order[i]]);
        adjusted[order[i]] = std::min(1.0, running);
    }
    return adjusted;
}

std::vector<PairedComparison> paired_report(const MetricTable& a, const std::vector<MetricTable>& baselines,
                                            const std::vector<std::string>& metrics) {
    std::map<std::int64_t, std::size_t> a_row;
    for (std::size_t i = 0; i < a.seeds.size(); ++i) {
        if (!a_row.emplace(a.seeds[i], i).second) {
            throw Error(Errc::seed_mismatch, a.name + " repeats seed " + std::to_string(a.seeds[i]));
        }
    }
    std::vector<PairedComparison> out;
    for (const auto& metric : metrics) {
        auto a_it = a.metrics.find(metric);
        if (a_it == a.metrics.end()) throw Error(Errc::missing_tensor, a.name + " has no metric '" + metric + "'");
        std::vector<std::size_t> family;
        for (const auto& b : baselines) {
            auto b_it = b.metrics.find(metric);
            if (b_it == b.metrics.end()) throw Error(Errc::missing_tensor, b.name + " has no metric '" + metric + "'");
            if (b_it->second.size() != b.seeds.size() || a_it->second.size() != a.seeds.size()) {
                throw Error(Errc::length_mismatch, "metric '" + metric + "' does not cover every seed");
            }
            std::vector<double> xa, xb, diffs;
            std::set<std::int64_t> seen;
            for (std::size_t i = 0; i < b.seeds.size(); ++i) {
                auto row = a_row.find(b.seeds[i]);
                if (row == a_row.end() || !seen.insert(b.seeds[i]).second) {
                    throw Error(Errc::seed_mismatch, b.name + " seed " + std::to_string(b.seeds[i]) + " has no unique match in " + a.name);
                }
                xa.push_back(a_it->second[row->second]);
                xb.push_back(b_it->second[i]);
                diffs.push_back(xa.back() - xb.back());
            }

            PairedComparison c;
            c.name = a.name + " vs " + b.name;
            c.metric = metric;
            c.n = xa.size();
            if (c.n == 0) throw Error(Errc::seed_mismatch, b.name + " shares no seeds with " + a.name);
            c.median_diff = median_of(diffs);
            c.direction = c.median_diff > 0   ? a.name + " > " + b.name
                          : c.median_diff < 0 ? a.name + " < " + b.name
                                              : a.name + " = " + b.name;
            try {
                const auto w = wilcoxon_signed_rank(xa, xb);
                c.w_plus = w.w_plus;
                c.raw_p = w.p_value;
                family.push_back(out.size());
            } catch (const Error& e) {
                c.error = e.what();
            }
            out.push_back(std::move(c));
        }
        std::vector<double> raw;
        for (std::size_t idx : family) raw.push_back(out[idx].raw_p);
        const auto adj = holm_adjust(raw);
        for (std::size_t i = 0; i < family.size(); ++i) {
            auto& c = out[family[i]];
            c.holm_p = adj[i];
            c.reject = c.holm_p < kSignificanceLevel;
        }
    }
    return out;
}

nlohmann::json to_json(const SummaryStats& s) {
    return {{"n", s.n},
            {"mean", s.mean},
            {"median", s.median},
            {"mode", s.mode},
            {"range", s.range},
            {"variance", s.variance},
            {"std_dev", s.std_dev},
            {"p25", s.p25},
            {"p50", s.p50},
            {"p75", s.p75},
            {"iqr", s.iqr},
            {"skewness", number_or_null(s.skewness)},
            {"kurtosis", number_or_null(s.kurtosis)}};
}

nlohmann::json to_json(const PairedComparison& c) {
    nlohmann::json j{{"name", c.name},         {"metric", c.metric}, {"n", c.n},
                     {"w_plus", c.w_plus},     {"raw_p", c.raw_p},   {"holm_p", c.holm_p},
                     {"reject", c.reject},     {"median_diff", c.median_diff},
                     {"direction", c.direction}};
    if (c.error) j["error"] = *c.error;
    return j;
}

std::string format_summary_table(const std::vector<std::pair<std::string, SummaryStats>>& columns) {
    const std::vector<std::pair<std::string, double SummaryStats::*>> rows{
        {"Mean", &SummaryStats::mean},         {"Median", &SummaryStats::median},   {"Mode", &SummaryStats::mode},
        {"Range", &SummaryStats::range},       {"Variance", &SummaryStats::variance},
        {"Std. deviation", &SummaryStats::std_dev},
        {"P25", &SummaryStats::p25},           {"P50", &SummaryStats::p50},         {"P75", &SummaryStats::p75},
        {"IQR", &SummaryStats::iqr},           {"Skewness", &SummaryStats::skewness},
        {"Kurtosis", &SummaryStats::kurtosis}};
    std::ostringstream os;
    os << std::left << std::setw(16) << "Statistic";
    for (const auto& [name, _] : columns) os << std::right << std::setw(14) << name;
    os << '\n';
    for (const auto& [label, field] : rows) {
        os << std::left << std::setw(16) << label;
        for (const auto& [_, s] : columns) {
            const double v = s.*field;
            std::ostringstream cell;
            if (std::isfinite(v)) {
                cell << std::fixed << std::setprecision(6) << v;
            } else {
                cell << "n/a";
            }
            os << std::right << std::setw(14) << cell.str();
        }
        os << '\n';
    }
    return os.str();
}

std::string format_paired_table(const std::vector<PairedComparison>& rows) {
    std::size_t name_w = 10;
    for (const auto& r : rows) name_w = std::max(name_w, r.name.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "Comparison" << std::setw(14) << "Metric" << std::right
       << std::setw(10) << "Raw p" << std::setw(10) << "Holm p" << std::setw(8) << "Reject" << std::setw(12) << "Median diff"
       << "  Direction\n";
    os << std::fixed << std::setprecision(6);
    for (const auto& r : rows) {
        os << std::left << std::setw(static_cast<int>(name_w) + 2) << r.name << std::setw(14) << r.metric << std::right;
        if (r.error) {
            os << "  " << *r.error << '\n';
            continue;
        }
        std::ostringstream diff;
        diff << std::fixed << std::setprecision(6) << std::showpos << r.median_diff;
        os << std::setw(10) << r.raw_p << std::setw(10) << r.holm_p << std::setw(8) << (r.reject ? "Yes" : "No")
           << std::setw(12) << diff.str() << "  " << r.direction << '\n';
    }
    return os.str();
}

}  // namespace mdf
