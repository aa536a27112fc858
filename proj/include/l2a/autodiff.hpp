#pragma once

#include <algorithm>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "l2a/ops.hpp"
#include "l2a/tensor.hpp"

namespace l2a {

/// Reverse-mode gradient of a scalar `output` with respect to `params`.
///
/// Parameters that are not on the active tape, or from which `output` is
/// unreachable, receive a zero gradient. With `create_graph` the backward
/// pass is itself recorded, so the returned gradients can be differentiated
/// again; otherwise they are constants.
inline std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> params,
                                bool create_graph = false) {
  if (output.numel() != 1) {
    throw ContractError("grad: output must be a scalar, got shape " + to_string(output.shape()));
  }
  std::vector<Tensor> result(params.size());
  Tape* tape = Tape::active();
  if (!tape || !tape->owns(output)) {
    for (std::size_t i = 0; i < params.size(); ++i) result[i] = zeros_like(params[i]);
    return result;
  }

  const std::int64_t out_id = output.node_id();
  const auto n = static_cast<std::size_t>(out_id + 1);

  // needs[i]: node i lies on a path from some parameter to the output.
  std::vector<char> needs(n, 0);
  std::vector<char> is_param(n, 0);
  std::int64_t first = std::numeric_limits<std::int64_t>::max();
  for (const auto& p : params) {
    if (tape->owns(p) && p.node_id() <= out_id) {
      needs[static_cast<std::size_t>(p.node_id())] = 1;
      is_param[static_cast<std::size_t>(p.node_id())] = 1;
      first = std::min(first, p.node_id());
    }
  }
  if (first <= out_id) {
    for (std::int64_t i = first; i <= out_id; ++i) {
      auto& flag = needs[static_cast<std::size_t>(i)];
      if (flag) continue;
      for (auto in : tape->node(i).inputs) {
        if (in >= 0 && needs[static_cast<std::size_t>(in)]) {
          flag = 1;
          break;
        }
      }
    }
  }

  if (first <= out_id && needs[static_cast<std::size_t>(out_id)]) {
    tape->begin_pass();
    std::vector<Tensor> grads(n);
    grads[n - 1] = ones_like(output);
    {
      std::optional<NoGradGuard> no_grad;
      if (!create_graph) no_grad.emplace();
      for (std::int64_t i = out_id; i >= first; --i) {
        const auto ui = static_cast<std::size_t>(i);
        if (!needs[ui] || !grads[ui].defined()) continue;
        const Node& node = tape->node(i);
        if (!node.backward) continue;
        unsigned need = 0;
        for (std::size_t j = 0; j < node.inputs.size(); ++j) {
          auto in = node.inputs[j];
          if (in >= 0 && needs[static_cast<std::size_t>(in)]) need |= 1u << j;
        }
        if (!need) continue;
        // Copy: recording during backward appends to the tape.
        BackwardFn fn = node.backward;
        std::vector<std::int64_t> inputs = node.inputs;
        Tensor out = node.output;
        auto in_grads = fn(out, grads[ui], need);
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          if (!((need >> j) & 1u) || j >= in_grads.size() || !in_grads[j].defined()) continue;
          auto& slot = grads[static_cast<std::size_t>(inputs[j])];
          slot = slot.defined() ? add(slot, in_grads[j]) : in_grads[j];
        }
        if (!create_graph && !is_param[ui]) grads[ui] = Tensor();
      }
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto& p = params[k];
      if (tape->owns(p) && p.node_id() <= out_id &&
          grads[static_cast<std::size_t>(p.node_id())].defined()) {
        result[k] = grads[static_cast<std::size_t>(p.node_id())];
      }
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!result[k].defined()) result[k] = zeros_like(params[k]);
  }
  return result;
}

inline std::vector<Tensor> grad(const Tensor& output, std::initializer_list<Tensor> params,
                                bool create_graph = false) {
  std::vector<Tensor> p(params);
  return grad(output, std::span<const Tensor>(p), create_graph);
}

}  // namespace l2a
