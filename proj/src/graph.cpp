// SPDX-License-Identifier: Apache-2.0
#include "cst/graph.hpp"

namespace cst {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kData: return "data";
    case OpKind::kParameter: return "parameter";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kEMax: return "emax";
    case OpKind::kConcatChannels: return "concat_channels";
    case OpKind::kGlobalAvgPool: return "global_avg_pool";
    case OpKind::kLinear: return "linear";
    case OpKind::kChannelAffine: return "channel_affine";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kMse: return "mse_loss";
    case OpKind::kL1: return "l1_loss";
  }
  return "unknown";
}

}  // namespace cst
