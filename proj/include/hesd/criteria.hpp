#pragma once

// Spectrum-shape criteria for a trained network's Hessian: the type
// criterion C_t (ratio of the most negative to the largest positive
// eigenvalue), the generalization criteria r_e and K_H05, the train vs
// generalization deltas, and the assessment and checkpoint-selection rules
// built on them.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hesd/datasets.hpp"
#include "hesd/spectral.hpp"

namespace hesd {

enum class HesdType { mp, mn, qs };
std::string to_string(HesdType t);
HesdType parse_hesd_type(const std::string& text);

struct CriteriaThresholds {
  double ct_mp = -0.6;       // MP iff C_t > ct_mp
  double delta_re = 1.5;     // good needs delta r_e < delta_re
  double delta_kh05 = 1.2;   // and delta K_H05 < delta_kh05
  void validate() const;
};

/// Absolute QS bound: `relative` times the baseline scale (largest absolute
/// extreme at the first analyzed epoch of the run), or `absolute_fallback`
/// when no baseline is known.
struct QsTolerance {
  double relative = 1e-3;
  double absolute_fallback = 1e-6;
  std::optional<double> baseline;

  double epsilon() const;
};

/// Nodes within epsilon of zero (relative to the largest |node|) count as
/// neither sign.
struct SignedExtremes {
  double lambda_min_neg = 0.0;  // most negative node, 0 if none
  double lambda_max_pos = 0.0;  // largest positive node, 0 if none
  bool has_negative = false;
  bool has_positive = false;
  double epsilon = 0.0;

  double max_abs() const;
};

inline constexpr double kRitzRelativeEpsilon = 1e-4;

SignedExtremes signed_extremes(const RitzSet& ritz, double relative_epsilon = kRitzRelativeEpsilon);
/// Widens the extremes with power-iteration bounds, keeping whichever
/// estimate of each end has the larger magnitude.
SignedExtremes refine_extremes(const SignedExtremes& e, const SpectrumBounds& bounds);

struct CtValue {
  double value = 0.0;  // 0 when no_negative, -inf when no_positive
  bool no_negative = false;
  bool no_positive = false;
};

CtValue compute_ct(const SignedExtremes& e);
CtValue compute_ct(const RitzSet& ritz);

/// Total over its inputs: QS, then MP, then MN.
HesdType classify_hesd(double c_t, double lambda_min_neg, double lambda_max_pos, double epsilon_qs,
                       double ct_threshold = -0.6);

/// -C_t; empty unless both signs are present.
std::optional<double> compute_re(const SignedExtremes& e);
std::optional<double> compute_re(const RitzSet& ritz);

/// Any K_H05 definition: maps a normalized density to a nonnegative scalar,
/// throwing NumericalError when it is undefined.
using Kh05Function = std::function<double(const SpectralDensity&)>;

/// Mass of the density below zero over mass at or above zero, after zeroing
/// every grid value below half the peak. Trapezoid segments that straddle
/// zero are split at zero.
double kh05_half_max(const SpectralDensity& density);

struct CriteriaReport {
  std::string checkpoint_id;
  DatasetTag tag = DatasetTag::train;
  double c_t = 0.0;
  bool no_negative = false;
  bool no_positive = false;
  std::optional<double> r_e;
  std::optional<double> k_h05;
  double lambda_min_neg = 0.0;
  double lambda_max_pos = 0.0;
  double epsilon_qs = 0.0;
  HesdType hesd_type = HesdType::mp;
};

CriteriaReport build_report(std::string checkpoint_id, DatasetTag tag, const SignedExtremes& extremes,
                            const SpectralDensity& density, const QsTolerance& qs,
                            const CriteriaThresholds& thresholds = {},
                            const Kh05Function& kh05 = kh05_half_max);
CriteriaReport build_report(std::string checkpoint_id, DatasetTag tag, const SlqResult& slq,
                            const QsTolerance& qs, const CriteriaThresholds& thresholds = {},
                            const Kh05Function& kh05 = kh05_half_max);

struct DeltaCriteria {
  std::optional<double> delta_re;    // r_e(gen) / r_e(train)
  std::optional<double> delta_kh05;  // K_H05(gen) / K_H05(train)
};

/// Throws ConfigError("checkpoint_id") when the reports come from different
/// checkpoints.
DeltaCriteria delta_criteria(const CriteriaReport& train, const CriteriaReport& gen);

enum class VerdictReason { mp_ok, mn_gradient_manipulation, qs_spectrum };
enum class Generalization { good, poor, not_assessed };
std::string to_string(VerdictReason r);
std::string to_string(Generalization g);
VerdictReason parse_verdict_reason(const std::string& text);
Generalization parse_generalization(const std::string& text);

struct Verdict {
  bool applicable = false;
  VerdictReason reason = VerdictReason::mp_ok;
  std::optional<double> delta_re;
  std::optional<double> delta_kh05;
  Generalization generalization = Generalization::not_assessed;
  std::string checkpoint_id;
  std::string note;
};

/// MN train spectra are not assessable. MP and QS are, with generalization
/// good iff both deltas are strictly under their thresholds.
Verdict assess(const CriteriaReport& train, const CriteriaReport& gen,
               const CriteriaThresholds& thresholds = {});

/// One-line human-readable summary.
std::string describe(const Verdict& v);

struct EpochCandidate {
  std::int64_t epoch = 0;
  double c_t = 0.0;
  double lambda_max_pos = 0.0;
  double train_accuracy = 0.0;  // fraction in [0, 1]
  std::optional<double> generalization_accuracy;
};

enum class SelectionStrategy { max_ct, min_max_eigenvalue };
std::string to_string(SelectionStrategy s);
SelectionStrategy parse_selection_strategy(const std::string& text);

struct Selection {
  std::int64_t max_ct_epoch = 0;
  std::int64_t min_max_eigenvalue_epoch = 0;
  std::size_t eligible = 0;

  std::int64_t pick(SelectionStrategy s) const;
};

inline constexpr double kDefaultTieBand = 0.01;

/// Among epochs whose train accuracy is within `tie_band` of the best, the
/// highest C_t and the lowest lambda_max_pos. Ties go to the earliest epoch.
Selection select_checkpoint(std::span<const EpochCandidate> candidates,
                            double tie_band = kDefaultTieBand);

}  // namespace hesd
