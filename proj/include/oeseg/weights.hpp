#pragma once

#include <string>
#include <vector>

#include "oeseg/rng.hpp"
#include "oeseg/tape.hpp"
#include "oeseg/tensor.hpp"

namespace oeseg {

// One trainable tensor bound to a tape: the live storage, its canonical
// name, and the parameter node recorded for this step.
struct ParamRef {
  std::string name;
  Tensor* tensor;
  ValueId id;
};

// Collects ParamRefs while a model registers itself on a tape. Frozen
// registrations put tensors on the tape as constants and record nothing.
class ParamRecorder {
 public:
  ValueId put(Tape& tape, bool trainable, std::string name, Tensor& tensor) {
    if (!trainable) return tape.constant(tensor);
    ValueId id = tape.parameter(tensor);
    refs_.push_back({std::move(name), &tensor, id});
    return id;
  }

  const std::vector<ParamRef>& refs() const { return refs_; }

 private:
  std::vector<ParamRef> refs_;
};

inline Tensor trunc_normal_tensor(Rng& rng, std::vector<std::size_t> shape,
                                  double stddev = 0.02) {
  std::size_t n = Tensor::shape_product(shape);
  std::vector<double> data(n);
  for (double& v : data) v = rng.next_trunc_normal(stddev);
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace oeseg
