#include "brainstrip/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace brainstrip {

const char* kCaseCsvHeader = "case_id,dice,sensitivity,specificity";
const char* kSummaryCsvHeader =
    "input,dice_mean,dice_std,sens_mean,sens_std,spec_mean,spec_std";

ConfusionCounts confusion_counts(const Volume3D& pred, const Volume3D& truth) {
    if (!same_grid(pred, truth))
        throw ValueError("confusion_counts: grid mismatch");
    if (!is_binary_mask(pred) || !is_binary_mask(truth))
        throw ValueError("confusion_counts: inputs must be binary masks");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] == 1.0;
        const bool g = truth[i] == 1.0;
        if (p && g)
            ++c.tp;
        else if (p && !g)
            ++c.fp;
        else if (!p && g)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

SegMetrics segmentation_metrics(const ConfusionCounts& c) {
    SegMetrics m;
    const double tp = static_cast<double>(c.tp);
    const double fp = static_cast<double>(c.fp);
    const double fn = static_cast<double>(c.fn);
    const double tn = static_cast<double>(c.tn);
    if (2 * c.tp + c.fp + c.fn > 0) m.dice = 2.0 * tp / (2.0 * tp + fp + fn);
    if (c.tp + c.fn > 0) m.sensitivity = tp / (tp + fn);
    if (c.tn + c.fp > 0) m.specificity = tn / (tn + fp);
    return m;
}

namespace {

double log_beta(double a, double b) {
    return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

// Continued fraction for the incomplete beta (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
    constexpr double kTiny = 1e-300;
    constexpr double kEps = 3e-16;
    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 500; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double bt =
        std::exp(a * std::log(x) + b * std::log1p(-x) - log_beta(a, b));
    if (x < (a + 1.0) / (a + b + 2.0))
        return bt * beta_continued_fraction(a, b, x) / a;
    return 1.0 - bt * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, std::size_t degrees_of_freedom) {
    const double df = static_cast<double>(degrees_of_freedom);
    const double x = df / (df + t * t);
    return regularized_incomplete_beta(df / 2.0, 0.5, x);
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw ValueError("paired_t_test: samples must have equal length");
    const std::size_t n = a.size();
    if (n < 2) throw ValueError("paired_t_test: need at least 2 pairs");

    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = (a[i] - b[i]) - mean;
        ss += d * d;
    }
    const double var = ss / static_cast<double>(n - 1);

    TTestResult r;
    r.degrees_of_freedom = n - 1;
    if (var == 0.0) {
        if (mean == 0.0) {
            r.t_statistic = 0.0;
            r.p_value = 1.0;
        } else {
            r.infinite_t = true;
            r.t_statistic = mean > 0.0 ? std::numeric_limits<double>::infinity()
                                       : -std::numeric_limits<double>::infinity();
            r.p_value = 0.0;
        }
        return r;
    }
    r.t_statistic = mean / std::sqrt(var / static_cast<double>(n));
    r.p_value = student_t_two_sided_p(r.t_statistic, r.degrees_of_freedom);
    return r;
}

namespace {

std::optional<SummaryStat> summarize_values(const std::vector<double>& v) {
    if (v.empty()) return std::nullopt;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = v.size() > 1
                          ? std::sqrt(ss / static_cast<double>(v.size() - 1))
                          : 0.0;
    return SummaryStat{mean, sd};
}

}  // namespace

CohortSummary summarize_runs(const std::vector<SegMetrics>& scores) {
    if (scores.empty()) throw ValueError("summarize_runs: empty input");
    CohortSummary s;
    s.n_cases = scores.size();
    std::vector<double> dice, sens, spec;
    for (const SegMetrics& m : scores) {
        if (m.dice) dice.push_back(*m.dice);
        if (m.sensitivity) sens.push_back(*m.sensitivity);
        if (m.specificity) spec.push_back(*m.specificity);
    }
    s.dice_defined = dice.size();
    s.sensitivity_defined = sens.size();
    s.specificity_defined = spec.size();
    s.dice = summarize_values(dice);
    s.sensitivity = summarize_values(sens);
    s.specificity = summarize_values(spec);
    return s;
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string fmt(const std::optional<double>& v) {
    return v ? fmt(*v) : std::string("nan");
}

std::string fmt_pair(const std::optional<SummaryStat>& s) {
    if (!s) return "nan,nan";
    return fmt(s->mean) + "," + fmt(s->std_dev);
}

}  // namespace

std::string format_case_csv_row(const std::string& case_id, const SegMetrics& m) {
    return case_id + "," + fmt(m.dice) + "," + fmt(m.sensitivity) + "," +
           fmt(m.specificity);
}

std::string format_summary_csv_row(const std::string& input_name,
                                   const CohortSummary& s) {
    return input_name + "," + fmt_pair(s.dice) + "," + fmt_pair(s.sensitivity) +
           "," + fmt_pair(s.specificity);
}

}  // namespace brainstrip
