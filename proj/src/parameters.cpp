#include "hesd/parameters.hpp"

#include <cmath>
#include <set>

#include "hesd/error.hpp"

namespace hesd {

SegmentTable::SegmentTable(std::vector<std::pair<std::string, Shape>> entries) {
  std::set<std::string> seen;
  for (auto& [name, shape] : entries) {
    if (!seen.insert(name).second) throw ShapeError("duplicate segment name", name);
    Segment seg{name, std::move(shape), total_};
    if (seg.shape.empty() || seg.size() == 0) throw ShapeError("empty segment shape", name);
    total_ += seg.size();
    segments_.push_back(std::move(seg));
  }
}

std::optional<std::size_t> SegmentTable::find(const std::string& name) const {
  for (std::size_t i = 0; i < segments_.size(); ++i)
    if (segments_[i].name == name) return i;
  return std::nullopt;
}

void require_same_layout(const SegmentTable& expected, const SegmentTable& actual) {
  const std::size_t n = std::min(expected.count(), actual.count());
  for (std::size_t i = 0; i < n; ++i) {
    const Segment& e = expected[i];
    const Segment& a = actual[i];
    if (e.name != a.name)
      throw ShapeError("segment " + std::to_string(i) + " is '" + a.name + "', expected '" +
                           e.name + "'",
                       e.name);
    if (e.shape != a.shape)
      throw ShapeError("segment '" + e.name + "' has shape " + shape_string(a.shape) +
                           ", expected " + shape_string(e.shape),
                       e.name);
  }
  if (expected.count() > n)
    throw ShapeError("missing segment '" + expected[n].name + "'", expected[n].name);
  if (actual.count() > n)
    throw ShapeError("unexpected segment '" + actual[n].name + "'", actual[n].name);
}

ParameterVector::ParameterVector(SegmentTable layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (values_.size() != layout_.total_size())
    throw ShapeError("parameter length " + std::to_string(values_.size()) +
                     " does not match layout size " + std::to_string(layout_.total_size()));
}

ParameterVector ParameterVector::zeros(SegmentTable layout) {
  std::vector<double> values(layout.total_size(), 0.0);
  return ParameterVector(std::move(layout), std::move(values));
}

std::span<double> ParameterVector::segment(std::size_t i) {
  const Segment& s = layout_[i];
  return std::span<double>(values_).subspan(s.offset, s.size());
}

std::span<const double> ParameterVector::segment(std::size_t i) const {
  const Segment& s = layout_[i];
  return std::span<const double>(values_).subspan(s.offset, s.size());
}

Tensor ParameterVector::tensor(std::size_t i) const {
  auto span = segment(i);
  return Tensor(layout_[i].shape, std::vector<double>(span.begin(), span.end()));
}

ParameterVector flatten(const SegmentTable& layout, std::span<const Tensor> weights) {
  if (weights.size() != layout.count())
    throw ShapeError("expected " + std::to_string(layout.count()) + " weight tensors, got " +
                     std::to_string(weights.size()));
  std::vector<double> values;
  values.reserve(layout.total_size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i].shape() != layout[i].shape)
      throw ShapeError("weight '" + layout[i].name + "' has shape " +
                           shape_string(weights[i].shape()) + ", expected " +
                           shape_string(layout[i].shape),
                       layout[i].name);
    values.insert(values.end(), weights[i].data().begin(), weights[i].data().end());
  }
  return ParameterVector(layout, std::move(values));
}

std::vector<Tensor> unflatten(const ParameterVector& params) {
  std::vector<Tensor> out;
  out.reserve(params.layout().count());
  for (std::size_t i = 0; i < params.layout().count(); ++i) out.push_back(params.tensor(i));
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ShapeError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void scale_in_place(double alpha, std::span<double> x) {
  for (double& v : x) v *= alpha;
}

}  // namespace hesd
