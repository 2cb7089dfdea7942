// SPDX-License-Identifier: Apache-2.0

#include "pixelpost/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "pixelpost/rng.hpp"

namespace pixelpost {

namespace {

double eval_scalar(const GraphFnD& fn, const std::vector<TensorD>& inputs,
                   const std::vector<TensorD>& params) {
  EvalResultT<double> r = evaluate<double>(fn, inputs, params);
  if (r.output.numel() != 1) {
    throw ShapeError("finite_difference_gradient: output must be scalar, got " +
                     Tensor::shape_str(r.output.shape));
  }
  return r.output[0];
}

std::vector<int64_t> pick_elements(int64_t numel, int samples, uint64_t seed, size_t tensor_idx) {
  std::vector<int64_t> idx;
  if (samples <= 0 || numel <= samples) {
    idx.resize(static_cast<size_t>(numel));
    for (int64_t i = 0; i < numel; ++i) idx[static_cast<size_t>(i)] = i;
    return idx;
  }
  Rng rng = Rng::derive(seed, 0x6c, tensor_idx);
  std::set<int64_t> chosen;
  while (static_cast<int>(chosen.size()) < samples) {
    chosen.insert(static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(numel))));
  }
  idx.assign(chosen.begin(), chosen.end());
  return idx;
}

}  // namespace

std::vector<TensorD> finite_difference_gradient(const GraphFnD& fn, std::vector<TensorD> inputs,
                                                std::vector<TensorD> params, double step) {
  if (step <= 0.0) throw ValueError("finite_difference_gradient: step must be > 0");
  std::vector<TensorD> grads;
  grads.reserve(params.size());
  for (auto& p : params) grads.emplace_back(TensorD::zeros(p.shape));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    for (int64_t i = 0; i < params[pi].numel(); ++i) {
      const double orig = params[pi][i];
      params[pi][i] = orig + step;
      const double fp = eval_scalar(fn, inputs, params);
      params[pi][i] = orig - step;
      const double fm = eval_scalar(fn, inputs, params);
      params[pi][i] = orig;
      grads[pi][i] = (fp - fm) / (2.0 * step);
    }
  }
  return grads;
}

GradCheckReport check_gradients(const GraphFn& fn_f, const GraphFnD& fn_d,
                                const std::vector<Tensor>& inputs,
                                const std::vector<Tensor>& params, double step,
                                int samples_per_tensor, uint64_t seed) {
  // Reverse mode on the float path.
  EvalResultT<float> fwd = evaluate<float>(fn_f, inputs, params);
  if (fwd.output.numel() != 1) {
    throw ShapeError("check_gradients: output must be scalar, got " +
                     Tensor::shape_str(fwd.output.shape));
  }
  const std::vector<Tensor> ad = gradient(fwd.trace, Tensor::scalar(1.f));

  // Central differences on the double path, at the same leaf values.
  std::vector<TensorD> inputs_d, params_d;
  inputs_d.reserve(inputs.size());
  params_d.reserve(params.size());
  for (const auto& t : inputs) inputs_d.push_back(widen(t));
  for (const auto& t : params) params_d.push_back(widen(t));

  GradCheckReport report;
  for (size_t pi = 0; pi < params_d.size(); ++pi) {
    const std::vector<int64_t> elems =
        pick_elements(params_d[pi].numel(), samples_per_tensor, seed, pi);
    for (int64_t i : elems) {
      const double orig = params_d[pi][i];
      params_d[pi][i] = orig + step;
      const double fp = eval_scalar(fn_d, inputs_d, params_d);
      params_d[pi][i] = orig - step;
      const double fm = eval_scalar(fn_d, inputs_d, params_d);
      params_d[pi][i] = orig;
      const double fd = (fp - fm) / (2.0 * step);
      const double a = static_cast<double>(ad[pi][i]);
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-4});
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        std::ostringstream os;
        os << "param " << pi << " elem " << i << ": reverse=" << a << " fd=" << fd;
        report.worst = os.str();
      }
    }
  }
  return report;
}

}  // namespace pixelpost
