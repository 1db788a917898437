#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rstn/common.hpp"
#include "rstn/tensor.hpp"

namespace rstn::model {

enum class Act { none, relu, sigmoid };

struct ConvLayer {
  int k = 3;
  int in = 0;
  int out = 0;
  Act act = Act::relu;
};

struct Layer {
  enum class Kind { conv, down, up } kind = Kind::conv;
  ConvLayer conv;
};

// Fully-convolutional backbone description. The final conv must emit one
// channel through a sigmoid so the output is a probability map.
struct ArchDescriptor {
  std::vector<Layer> layers;
  int min_input = 1;

  void validate() const;
  int input_channels() const;

  // 3 -> 16 -> 16 -> down -> 32 -> 32 -> up -> 16 -> 16 -> 1
  static ArchDescriptor default_backbone();
  // 3 convs, for gradient-check fixtures: 3 -> 4 -> 4 -> 1
  static ArchDescriptor tiny_backbone();
};

struct BackboneParams {
  ArchDescriptor arch;
  std::vector<tc::Tensor> kernels;  // one per conv layer
  std::vector<tc::Tensor> biases;
};

struct SaliencyConfig {
  int layers = 2;       // 1 or 2
  int kernel = 3;       // 1, 3 or 5
  int hidden = 8;       // hidden channels in the two-layer variant
  int out_channels = 3; // matches the 3-slice input stack

  void validate() const;
};

// g(.;eta): size-preserved convolution(s) over the probability map, final
// activation 2*sigmoid so weights lie in (0,2) and zero pre-activation
// yields weight exactly 1.
struct SaliencyParams {
  SaliencyConfig config;
  std::vector<tc::Tensor> kernels;
  std::vector<tc::Tensor> biases;
};

struct ModelBundle {
  Viewpoint viewpoint = Viewpoint::axial;
  BackboneParams coarse;
  BackboneParams fine;
  SaliencyParams saliency;
};

// He fan-in initialization, zero biases. The saliency transform zero-fills
// its final layer so training starts at the identity weighting (a fully
// zeroed two-layer stack would never receive gradient).
BackboneParams init_backbone(const ArchDescriptor& arch, std::uint64_t seed);
SaliencyParams init_saliency(const SaliencyConfig& cfg, std::uint64_t seed);
void zero_saliency(SaliencyParams& s);  // force identity weighting

ModelBundle init_bundle(Viewpoint v, const ArchDescriptor& arch,
                        const SaliencyConfig& scfg, std::uint64_t seed);

// Graph builders used by both training and inference.
tc::Graph::NodeId build_backbone(tc::Graph& g, tc::Graph::NodeId image,
                                 const std::vector<tc::Graph::NodeId>& kernels,
                                 const std::vector<tc::Graph::NodeId>& biases,
                                 const ArchDescriptor& arch);
tc::Graph::NodeId build_saliency(tc::Graph& g, tc::Graph::NodeId prob,
                                 const std::vector<tc::Graph::NodeId>& kernels,
                                 const std::vector<tc::Graph::NodeId>& biases,
                                 const SaliencyConfig& cfg);

// Leaf-bound convenience wrappers.
std::vector<tc::Graph::NodeId> bind_params(tc::Graph& g,
                                           const std::vector<tc::Tensor>& tensors,
                                           bool requires_grad);

// Forward evaluation without gradients. Image is [3,H,W]; returns [1,H,W].
tc::Tensor seg_forward(const BackboneParams& params, const tc::Tensor& image);
// Probability map [1,H,W] -> weight map [3,H,W] with values in (0,2).
tc::Tensor saliency_forward(const SaliencyParams& params, const tc::Tensor& prob);

// Named parameter access in a fixed order (serialization, SGD, gradcheck).
struct NamedTensor {
  std::string name;
  tc::Tensor* tensor;
};
std::vector<NamedTensor> named_params(BackboneParams& b, const std::string& prefix);
std::vector<NamedTensor> named_params(SaliencyParams& s, const std::string& prefix);
std::vector<NamedTensor> named_params(ModelBundle& m);

// --- RSTN-W v1 weight container --------------------------------------------
// JSON manifest (architecture, tensor names/shapes/offsets) + raw
// little-endian f64 payload. `path` is the basename; ".json" and ".bin" are
// appended. `kind` distinguishes joint bundles from stagewise ones (no
// saliency tensors).

void save_bundle(const ModelBundle& m, const std::filesystem::path& path_base,
                 const std::string& kind = "rstn");
ModelBundle load_bundle(const std::filesystem::path& path_base,
                        std::string* kind_out = nullptr);

}  // namespace rstn::model
