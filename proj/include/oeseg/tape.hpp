#pragma once

#include <array>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "oeseg/tensor.hpp"

namespace oeseg {

using ValueId = std::uint32_t;

enum class Op : std::uint8_t {
  kConstant,
  kParameter,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,
  kAddBias,
  kMatmul,
  kTranspose,
  kLayerNorm,
  kSoftmax,
  kGelu,
  kRelu,
  kSigmoid,
  kLog,
  kClamp,
  kConv2d,
  kTransposedConv2d,
  kBatchNorm,
  kConcat,
  kSlice,
  kReshape,
  kMean,
  kSum,
  kGatherRows,
  kScatterRows,
  kRepeatRow,
};

struct OpAttrs {
  int i0 = 0, i1 = 0, i2 = 0;       // stride / padding / axis / start / len
  double f0 = 0.0, f1 = 0.0;        // eps / scale / clamp bounds
  bool training = false;            // batch-norm mode
  std::vector<std::size_t> dims;    // reshape target
  std::vector<std::uint32_t> rows;  // gather / scatter indices
};

// Reverse-mode tape over a closed operator set. Recording an operation
// stores the operator, its input ids and attributes, and the forward
// value; replay() recomputes every value from the same records. A Tape is
// confined to one logical thread; run parallel experiments on separate
// tapes.
class Tape {
 public:
  struct Node {
    Op op;
    std::array<ValueId, 5> in{};
    std::uint8_t nin = 0;
    OpAttrs attrs;
    Tensor value;
  };

  ValueId constant(Tensor t);
  ValueId parameter(Tensor t);

  ValueId add(ValueId a, ValueId b);
  ValueId sub(ValueId a, ValueId b);
  ValueId mul(ValueId a, ValueId b);
  ValueId div(ValueId a, ValueId b);
  ValueId scale(ValueId x, double factor);
  ValueId add_bias(ValueId x, ValueId bias);  // rows of x + bias vector
  ValueId matmul(ValueId a, ValueId b);
  ValueId transpose(ValueId x);
  ValueId layer_norm(ValueId x, ValueId gamma, ValueId beta, double eps);
  ValueId softmax(ValueId x, int axis);
  ValueId gelu(ValueId x);
  ValueId relu(ValueId x);
  ValueId sigmoid(ValueId x);
  ValueId log(ValueId x);
  ValueId clamp(ValueId x, double lo, double hi);
  ValueId conv2d(ValueId x, ValueId w, ValueId b, int stride, int padding);
  ValueId transposed_conv2d(ValueId x, ValueId w, ValueId b, int stride);
  ValueId batch_norm_train(ValueId x, ValueId gamma, ValueId beta, double eps);
  ValueId batch_norm_infer(ValueId x, ValueId gamma, ValueId beta, ValueId running_mean,
                           ValueId running_var, double eps);
  ValueId concat(ValueId a, ValueId b, int axis);
  ValueId slice(ValueId x, int axis, std::size_t start, std::size_t len);
  ValueId reshape(ValueId x, std::vector<std::size_t> dims);
  ValueId mean(ValueId x);
  ValueId sum(ValueId x);
  ValueId gather_rows(ValueId x, std::vector<std::uint32_t> rows);
  ValueId scatter_rows(ValueId src, std::vector<std::uint32_t> rows, std::size_t n_rows);
  ValueId repeat_row(ValueId v, std::size_t count);

  const Tensor& value(ValueId id) const { return nodes_[id].value; }
  const Node& node(ValueId id) const { return nodes_[id]; }
  std::size_t node_count() const { return nodes_.size(); }

  // Per-channel statistics a training-mode batch-norm node computed, for
  // updating running averages outside the tape.
  void batch_norm_stats(ValueId bn_node, Tensor& mean_out, Tensor& var_out) const;

  // Gradients of a scalar loss with respect to every parameter node.
  // Parameters the loss does not depend on map to zero tensors.
  std::unordered_map<ValueId, Tensor> backward(ValueId loss) const;

  // Recomputes every non-leaf value from the recorded operator and inputs.
  std::vector<Tensor> replay_forward() const;

 private:
  ValueId record(Op op, OpAttrs attrs, std::initializer_list<ValueId> inputs);
  static Tensor eval(Op op, const OpAttrs& attrs, const std::vector<const Tensor*>& in);

  std::vector<Node> nodes_;
};

}  // namespace oeseg
