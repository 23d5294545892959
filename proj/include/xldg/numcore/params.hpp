#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xldg/numcore/tensor.hpp"

namespace xldg::num {

/// Ordered collection of named parameter tensors.
class ParamSet {
 public:
  /// Appends a parameter; names must be unique.
  std::size_t add(std::string name, Tensor value);

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& operator[](std::size_t i) { return values_[i]; }
  const Tensor& operator[](std::size_t i) const { return values_[i]; }

  std::optional<std::size_t> find(std::string_view name) const;
  /// Index of a parameter; throws std::out_of_range when absent.
  std::size_t index(std::string_view name) const;
  Tensor& get(std::string_view name) { return values_[index(name)]; }
  const Tensor& get(std::string_view name) const { return values_[index(name)]; }

  std::vector<Tensor>& values() { return values_; }
  const std::vector<Tensor>& values() const { return values_; }
  const std::vector<std::string>& names() const { return names_; }

  std::size_t element_count() const;

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

// Checkpoint layout (all offsets in bytes):
//
//   <stem>.manifest  UTF-8 text, LF line endings
//       line 1: "xldg-params 1"
//       line 2: "<count>"
//       then one line per tensor, in order:
//           "<name> <rank> <dim_0> ... <dim_{rank-1}> <offset> <bytes>"
//   <stem>.bin       the tensors' values concatenated in manifest order as
//                    IEEE-754 binary64, little-endian, row-major, no padding.
//
// offset of tensor i is the sum of bytes of tensors 0..i-1; bytes is
// 8 * product(dims). Names contain no whitespace.

void save_params(const ParamSet& params, const std::filesystem::path& stem);
ParamSet load_params(const std::filesystem::path& stem);

/// FNV-1a 64-bit hash over the checkpoint byte image (names, shapes, data).
std::uint64_t params_hash(const ParamSet& params);

}  // namespace xldg::num
