#include "hesd/criteria.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "hesd/error.hpp"

namespace hesd {

std::string to_string(HesdType t) {
  switch (t) {
    case HesdType::mp: return "MP";
    case HesdType::mn: return "MN";
    case HesdType::qs: return "QS";
  }
  return "?";
}

HesdType parse_hesd_type(const std::string& text) {
  if (text == "MP") return HesdType::mp;
  if (text == "MN") return HesdType::mn;
  if (text == "QS") return HesdType::qs;
  throw ConfigError("hesd_type", "unknown HESD type '" + text + "'");
}

void CriteriaThresholds::validate() const {
  if (!std::isfinite(ct_mp) || ct_mp > 0.0)
    throw ConfigError("thresholds.ct_mp", "must be a finite value <= 0");
  if (!(delta_re > 0.0) || !std::isfinite(delta_re))
    throw ConfigError("thresholds.delta_re", "must be positive");
  if (!(delta_kh05 > 0.0) || !std::isfinite(delta_kh05))
    throw ConfigError("thresholds.delta_kh05", "must be positive");
}

double QsTolerance::epsilon() const {
  if (baseline && *baseline > 0.0) return relative * *baseline;
  return absolute_fallback;
}

double SignedExtremes::max_abs() const {
  return std::max(std::abs(lambda_min_neg), std::abs(lambda_max_pos));
}

SignedExtremes signed_extremes(const RitzSet& ritz, double relative_epsilon) {
  if (ritz.empty()) throw Error("signed_extremes: empty Ritz set");
  SignedExtremes e;
  const double lo = ritz.min(), hi = ritz.max();
  e.epsilon = relative_epsilon * std::max(std::abs(lo), std::abs(hi));
  if (lo < -e.epsilon) {
    e.has_negative = true;
    e.lambda_min_neg = lo;
  }
  if (hi > e.epsilon) {
    e.has_positive = true;
    e.lambda_max_pos = hi;
  }
  return e;
}

SignedExtremes refine_extremes(const SignedExtremes& e, const SpectrumBounds& bounds) {
  const double relative = e.max_abs() > 0.0 ? e.epsilon / e.max_abs() : kRitzRelativeEpsilon;
  const double lo = std::min(e.lambda_min_neg, bounds.min());
  const double hi = std::max(e.lambda_max_pos, bounds.max());
  SignedExtremes out;
  out.epsilon = relative * std::max(std::abs(lo), std::abs(hi));
  out.has_negative = lo < -out.epsilon;
  out.has_positive = hi > out.epsilon;
  out.lambda_min_neg = out.has_negative ? lo : 0.0;
  out.lambda_max_pos = out.has_positive ? hi : 0.0;
  return out;
}

CtValue compute_ct(const SignedExtremes& e) {
  CtValue ct;
  ct.no_negative = !e.has_negative;
  ct.no_positive = !e.has_positive;
  if (ct.no_positive)
    ct.value = -std::numeric_limits<double>::infinity();
  else if (ct.no_negative)
    ct.value = 0.0;
  else
    ct.value = e.lambda_min_neg / e.lambda_max_pos;
  return ct;
}

CtValue compute_ct(const RitzSet& ritz) { return compute_ct(signed_extremes(ritz)); }

HesdType classify_hesd(double c_t, double lambda_min_neg, double lambda_max_pos, double epsilon_qs,
                       double ct_threshold) {
  if (std::max(std::abs(lambda_min_neg), std::abs(lambda_max_pos)) < epsilon_qs) return HesdType::qs;
  return c_t > ct_threshold ? HesdType::mp : HesdType::mn;
}

std::optional<double> compute_re(const SignedExtremes& e) {
  if (!e.has_negative || !e.has_positive) return std::nullopt;
  return -compute_ct(e).value;
}

std::optional<double> compute_re(const RitzSet& ritz) { return compute_re(signed_extremes(ritz)); }

double kh05_half_max(const SpectralDensity& density) {
  const auto& x = density.grid;
  const auto& y = density.density;
  if (x.size() < 2 || x.size() != y.size()) throw ShapeError("K_H05: density grid is malformed");
  const double peak = *std::max_element(y.begin(), y.end());
  if (!(peak > 0.0)) throw NumericalError("K_H05: density has no positive values");

  std::vector<double> f(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) f[i] = y[i] >= 0.5 * peak ? y[i] : 0.0;

  double neg = 0.0, pos = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    const double x0 = x[i - 1], x1 = x[i], y0 = f[i - 1], y1 = f[i];
    if (x1 <= 0.0) {
      neg += 0.5 * (x1 - x0) * (y0 + y1);
    } else if (x0 >= 0.0) {
      pos += 0.5 * (x1 - x0) * (y0 + y1);
    } else {
      const double yz = y0 + (y1 - y0) * (-x0) / (x1 - x0);
      neg += 0.5 * (-x0) * (y0 + yz);
      pos += 0.5 * x1 * (yz + y1);
    }
  }
  if (!(pos > 0.0)) throw NumericalError("K_H05: no density mass at or above zero");
  return neg / pos;
}

CriteriaReport build_report(std::string checkpoint_id, DatasetTag tag, const SignedExtremes& extremes,
                            const SpectralDensity& density, const QsTolerance& qs,
                            const CriteriaThresholds& thresholds, const Kh05Function& kh05) {
  CriteriaReport r;
  r.checkpoint_id = std::move(checkpoint_id);
  r.tag = tag;
  const CtValue ct = compute_ct(extremes);
  r.c_t = ct.value;
  r.no_negative = ct.no_negative;
  r.no_positive = ct.no_positive;
  r.r_e = compute_re(extremes);
  r.lambda_min_neg = extremes.lambda_min_neg;
  r.lambda_max_pos = extremes.lambda_max_pos;
  r.epsilon_qs = qs.epsilon();
  r.hesd_type =
      classify_hesd(r.c_t, r.lambda_min_neg, r.lambda_max_pos, r.epsilon_qs, thresholds.ct_mp);
  try {
    r.k_h05 = kh05(density);
  } catch (const NumericalError&) {
    r.k_h05.reset();
  }
  return r;
}

CriteriaReport build_report(std::string checkpoint_id, DatasetTag tag, const SlqResult& slq,
                            const QsTolerance& qs, const CriteriaThresholds& thresholds,
                            const Kh05Function& kh05) {
  return build_report(std::move(checkpoint_id), tag, signed_extremes(slq.ritz), slq.density, qs,
                      thresholds, kh05);
}

namespace {

std::optional<double> ratio(const std::optional<double>& num, const std::optional<double>& den) {
  if (!num || !den || *den == 0.0) return std::nullopt;
  const double q = *num / *den;
  if (!std::isfinite(q)) return std::nullopt;
  return q;
}

}  // namespace

DeltaCriteria delta_criteria(const CriteriaReport& train, const CriteriaReport& gen) {
  if (train.checkpoint_id != gen.checkpoint_id)
    throw ConfigError("checkpoint_id", "reports come from different checkpoints ('" +
                                           train.checkpoint_id + "' vs '" + gen.checkpoint_id +
                                           "')");
  return {ratio(gen.r_e, train.r_e), ratio(gen.k_h05, train.k_h05)};
}

std::string to_string(VerdictReason r) {
  switch (r) {
    case VerdictReason::mp_ok: return "mp-ok";
    case VerdictReason::mn_gradient_manipulation: return "mn-gradient-manipulation";
    case VerdictReason::qs_spectrum: return "qs-spectrum";
  }
  return "?";
}

std::string to_string(Generalization g) {
  switch (g) {
    case Generalization::good: return "good";
    case Generalization::poor: return "poor";
    case Generalization::not_assessed: return "not-assessed";
  }
  return "?";
}

VerdictReason parse_verdict_reason(const std::string& text) {
  if (text == "mp-ok") return VerdictReason::mp_ok;
  if (text == "mn-gradient-manipulation") return VerdictReason::mn_gradient_manipulation;
  if (text == "qs-spectrum") return VerdictReason::qs_spectrum;
  throw ConfigError("reason", "unknown verdict reason '" + text + "'");
}

Generalization parse_generalization(const std::string& text) {
  if (text == "good") return Generalization::good;
  if (text == "poor") return Generalization::poor;
  if (text == "not-assessed") return Generalization::not_assessed;
  throw ConfigError("generalization", "unknown generalization value '" + text + "'");
}

Verdict assess(const CriteriaReport& train, const CriteriaReport& gen,
               const CriteriaThresholds& thresholds) {
  const DeltaCriteria d = delta_criteria(train, gen);
  Verdict v;
  v.checkpoint_id = train.checkpoint_id;
  v.delta_re = d.delta_re;
  v.delta_kh05 = d.delta_kh05;

  if (train.hesd_type == HesdType::mn) {
    v.applicable = false;
    v.reason = VerdictReason::mn_gradient_manipulation;
    v.generalization = Generalization::not_assessed;
    v.note = "train spectrum is MN; the gradients were manipulated, so the Hessian does not describe the optimizer's landscape";
    return v;
  }

  v.applicable = true;
  v.reason = train.hesd_type == HesdType::qs ? VerdictReason::qs_spectrum : VerdictReason::mp_ok;
  if (!d.delta_re || !d.delta_kh05) {
    v.generalization = Generalization::not_assessed;
    v.note = !d.delta_re ? "delta r_e undefined: r_e missing on one side or zero on train"
                         : "delta K_H05 undefined: K_H05 missing on one side or zero on train";
    return v;
  }
  const bool good = *d.delta_re < thresholds.delta_re && *d.delta_kh05 < thresholds.delta_kh05;
  v.generalization = good ? Generalization::good : Generalization::poor;
  if (v.reason == VerdictReason::qs_spectrum) v.note = "train spectrum is quasi-singular";
  return v;
}

std::string describe(const Verdict& v) {
  std::ostringstream out;
  out << "checkpoint " << v.checkpoint_id << ": ";
  if (!v.applicable) {
    out << "methodology not applicable (MN-HESD, gradient manipulation); generalization not assessed";
    return out.str();
  }
  auto show = [&](const char* name, const std::optional<double>& x) {
    out << name << '=';
    if (x)
      out << *x;
    else
      out << "undefined";
  };
  switch (v.generalization) {
    case Generalization::good: out << "good generalization expected"; break;
    case Generalization::poor: out << "poor generalization"; break;
    case Generalization::not_assessed: out << "generalization not assessed"; break;
  }
  out << " (";
  show("delta_re", v.delta_re);
  out << ", ";
  show("delta_kh05", v.delta_kh05);
  out << ')';
  if (v.reason == VerdictReason::qs_spectrum) out << " [QS spectrum]";
  if (v.generalization == Generalization::not_assessed && !v.note.empty()) out << ": " << v.note;
  return out.str();
}

std::string to_string(SelectionStrategy s) {
  return s == SelectionStrategy::max_ct ? "max-ct" : "min-max-eigenvalue";
}

SelectionStrategy parse_selection_strategy(const std::string& text) {
  if (text == "max-ct") return SelectionStrategy::max_ct;
  if (text == "min-max-eigenvalue") return SelectionStrategy::min_max_eigenvalue;
  throw ConfigError("strategy", "unknown selection strategy '" + text + "'");
}

std::int64_t Selection::pick(SelectionStrategy s) const {
  return s == SelectionStrategy::max_ct ? max_ct_epoch : min_max_eigenvalue_epoch;
}

Selection select_checkpoint(std::span<const EpochCandidate> candidates, double tie_band) {
  if (candidates.empty()) throw Error("select_checkpoint: no candidates");
  if (!(tie_band >= 0.0)) throw ConfigError("tie_band", "must be nonnegative");

  std::vector<EpochCandidate> sorted(candidates.begin(), candidates.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.epoch < b.epoch; });
  double best_acc = -std::numeric_limits<double>::infinity();
  for (const auto& c : sorted) best_acc = std::max(best_acc, c.train_accuracy);

  Selection s;
  const EpochCandidate* best_ct = nullptr;
  const EpochCandidate* best_eig = nullptr;
  for (const auto& c : sorted) {
    if (c.train_accuracy < best_acc - tie_band) continue;
    ++s.eligible;
    if (!best_ct || c.c_t > best_ct->c_t) best_ct = &c;
    if (!best_eig || c.lambda_max_pos < best_eig->lambda_max_pos) best_eig = &c;
  }
  if (s.eligible == 0) throw Error("select_checkpoint: empty candidate set");
  s.max_ct_epoch = best_ct->epoch;
  s.min_max_eigenvalue_epoch = best_eig->epoch;
  return s;
}

}  // namespace hesd
