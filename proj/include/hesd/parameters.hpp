#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hesd/tensor.hpp"

namespace hesd {

struct Segment {
  std::string name;
  Shape shape;
  std::size_t offset = 0;

  std::size_t size() const { return shape_size(shape); }
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Ordered, contiguous layout of named weight tensors inside a flat vector.
class SegmentTable {
 public:
  SegmentTable() = default;
  /// Offsets are assigned in order; names must be unique.
  explicit SegmentTable(std::vector<std::pair<std::string, Shape>> entries);

  const std::vector<Segment>& segments() const { return segments_; }
  std::size_t total_size() const { return total_; }
  std::size_t count() const { return segments_.size(); }
  const Segment& operator[](std::size_t i) const { return segments_[i]; }
  std::optional<std::size_t> find(const std::string& name) const;

  friend bool operator==(const SegmentTable&, const SegmentTable&) = default;

 private:
  std::vector<Segment> segments_;
  std::size_t total_ = 0;
};

/// Throws ShapeError naming the first segment that differs between layouts.
void require_same_layout(const SegmentTable& expected, const SegmentTable& actual);

/// Flat view of every trainable weight, the space the Hessian acts on.
class ParameterVector {
 public:
  ParameterVector() = default;
  ParameterVector(SegmentTable layout, std::vector<double> values);
  static ParameterVector zeros(SegmentTable layout);

  const SegmentTable& layout() const { return layout_; }
  std::size_t size() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> segment(std::size_t i);
  std::span<const double> segment(std::size_t i) const;
  Tensor tensor(std::size_t i) const;

  friend bool operator==(const ParameterVector&, const ParameterVector&) = default;

 private:
  SegmentTable layout_;
  std::vector<double> values_;
};

ParameterVector flatten(const SegmentTable& layout, std::span<const Tensor> weights);
std::vector<Tensor> unflatten(const ParameterVector& params);

// Dense vector helpers over flat storage.
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
void scale_in_place(double alpha, std::span<double> x);

}  // namespace hesd
