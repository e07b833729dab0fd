#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "brainstrip/volume.hpp"

namespace brainstrip {

struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::uint64_t total() const { return tp + fp + fn + tn; }
};

/// Overlap scores; a metric with a zero denominator is absent (undefined),
/// which is distinct from 0.
struct SegMetrics {
    std::optional<double> dice;
    std::optional<double> sensitivity;
    std::optional<double> specificity;
};

struct TTestResult {
    double t_statistic = 0.0;
    std::size_t degrees_of_freedom = 0;
    double p_value = 1.0;
    /// Set when the paired differences have zero variance but nonzero mean;
    /// t_statistic is +-infinity and p_value is 0.
    bool infinite_t = false;
};

/// Mean and sample (n-1) standard deviation.
struct SummaryStat {
    double mean = 0.0;
    double std_dev = 0.0;
};

struct CohortSummary {
    std::size_t n_cases = 0;
    std::optional<SummaryStat> dice;
    std::optional<SummaryStat> sensitivity;
    std::optional<SummaryStat> specificity;
    std::size_t dice_defined = 0;
    std::size_t sensitivity_defined = 0;
    std::size_t specificity_defined = 0;
};

/// Exact voxelwise TP/FP/FN/TN tallies. Throws ValueError on grid mismatch
/// or non-binary input.
ConfusionCounts confusion_counts(const Volume3D& pred, const Volume3D& truth);

/// Dice = 2TP/(2TP+FP+FN), Sensitivity = TP/(TP+FN), Specificity = TN/(TN+FP).
SegMetrics segmentation_metrics(const ConfusionCounts& counts);

/// Two-sided paired t-test: t = mean(d) / (sd(d)/sqrt(n)) with d = a-b and
/// sample sd; p from the t distribution with n-1 degrees of freedom.
/// Throws ValueError on length mismatch or n < 2.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

/// Per-metric sample mean/std over a cohort; undefined metrics are excluded
/// and the per-metric included counts reported. Throws ValueError on an
/// empty input.
CohortSummary summarize_runs(const std::vector<SegMetrics>& scores);

/// Regularized incomplete beta function I_x(a, b), continued-fraction
/// evaluation; the p-value backbone.
double regularized_incomplete_beta(double a, double b, double x);

/// Two-sided tail probability of the t distribution.
double student_t_two_sided_p(double t, std::size_t degrees_of_freedom);

/// CSV row "case_id,dice,sensitivity,specificity"; undefined metrics are
/// written as "nan".
std::string format_case_csv_row(const std::string& case_id, const SegMetrics& m);

/// CSV row mirroring the cohort summary table layout:
/// "input,dice_mean,dice_std,sens_mean,sens_std,spec_mean,spec_std".
std::string format_summary_csv_row(const std::string& input_name,
                                   const CohortSummary& s);

extern const char* kCaseCsvHeader;
extern const char* kSummaryCsvHeader;

}  // namespace brainstrip
