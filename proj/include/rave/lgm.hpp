#pragma once

// Local/global module: a standard local convolution paired with a strided
// global convolution whose features are average-pooled, replicated spatially
// and concatenated after the local maps. One pass gives every output
// position a dependence on the whole input frame.

#include <string>

#include "rave/ops.hpp"
#include "rave/tensor.hpp"

namespace rave {

struct LgmConfig {
  Index in_channels = 0;
  Index filters = 0;         // F, total output channels
  Index global_filters = 0;  // F', channels of the global branch
  Index local_kernel = 3;    // k_l, odd
  Index global_kernel = 1;   // k_g, also the global stride

  void validate() const {
    if (!(global_filters > 0 && global_filters < filters)) {
      throw ShapeError("LgmConfig: need 0 < F' < F, got F' = " + std::to_string(global_filters) +
                       ", F = " + std::to_string(filters));
    }
    if (global_kernel < 1) throw ShapeError("LgmConfig: k_g must be >= 1");
    if (local_kernel % 2 == 0) throw ShapeError("LgmConfig: k_l must be odd");
  }
};

template <typename S>
struct LgmParams {
  Tensor<S> local_weight;   // [k_l, k_l, Cin, F - F']
  Tensor<S> local_bias;     // [F - F']
  Tensor<S> global_weight;  // [k_g, k_g, Cin, F']
  Tensor<S> global_bias;    // [F']
};

// f: [H,W,Cin] -> [H,W,F]. The first F-F' channels are the local branch,
// the last F' the pooled-and-replicated global branch. k_g must divide H,W.
template <typename S>
Tensor<S> lgm_forward(const Tensor<S>& f, const LgmParams<S>& params, const LgmConfig& cfg) {
  cfg.validate();
  const Index h = f.shape.dim(0), w = f.shape.dim(1);
  if (h % cfg.global_kernel != 0 || w % cfg.global_kernel != 0) {
    throw ShapeError("lgm_forward: k_g = " + std::to_string(cfg.global_kernel) +
                     " does not divide input extents " + f.shape.str());
  }
  Tensor<S> local = conv2d(f, params.local_weight, params.local_bias, 1, Padding::Same);
  Tensor<S> global = conv2d(f, params.global_weight, params.global_bias, cfg.global_kernel, Padding::Valid);
  Tensor<S> pooled = global_avg_pool(global);
  return concat_channels<S>({local, replicate_spatial(pooled, h, w)});
}

}  // namespace rave
