#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "dpffn/error.hpp"

namespace dpffn {

/// Paired HH/VH magnitude profile sequences, row-major [steps x bins].
struct DualPolSample {
  std::size_t steps = 0;
  std::size_t bins = 0;
  std::vector<float> hh;
  std::vector<float> vh;
  int label = 0;
  int posture_id = 0;
  std::map<std::string, std::string> meta;

  bool has_vh() const { return !vh.empty(); }

  void validate() const {
    if (steps == 0 || bins == 0) throw DataError("sample has empty shape");
    if (hh.size() != steps * bins) throw DataError("HH channel size does not match [T x L]");
    if (has_vh() && vh.size() != hh.size()) throw DataError("HH and VH channels differ in shape");
    for (float v : hh)
      if (!(v >= 0.0f)) throw DataError("HH channel contains negative or non-finite values");
    for (float v : vh)
      if (!(v >= 0.0f)) throw DataError("VH channel contains negative or non-finite values");
  }
};

}  // namespace dpffn
