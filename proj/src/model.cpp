#include "rstn/model.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "rstn/rng.hpp"

namespace rstn::model {

using nlohmann::json;
using tc::Graph;
using tc::Tensor;

void ArchDescriptor::validate() const {
  require(!layers.empty(), "architecture has no layers");
  require(min_input >= 1, "architecture min_input must be >= 1");
  int channels = -1;
  int depth_delta = 0;
  const ConvLayer* last_conv = nullptr;
  for (const Layer& l : layers) {
    switch (l.kind) {
      case Layer::Kind::conv:
        require(l.conv.k % 2 == 1 && l.conv.k >= 1, "conv kernel size must be odd");
        require(l.conv.in >= 1 && l.conv.out >= 1, "conv channels must be >= 1");
        if (channels >= 0)
          require(l.conv.in == channels, "conv input channels do not chain");
        channels = l.conv.out;
        last_conv = &l.conv;
        break;
      case Layer::Kind::down:
        ++depth_delta;
        break;
      case Layer::Kind::up:
        --depth_delta;
        break;
    }
  }
  require(depth_delta == 0, "downsample/upsample layers must pair up");
  require(last_conv != nullptr && last_conv->out == 1 &&
              last_conv->act == Act::sigmoid,
          "final layer must emit 1 channel through a sigmoid");
}

int ArchDescriptor::input_channels() const {
  for (const Layer& l : layers)
    if (l.kind == Layer::Kind::conv) return l.conv.in;
  return 0;
}

ArchDescriptor ArchDescriptor::default_backbone() {
  ArchDescriptor a;
  auto conv = [](int in, int out, Act act) {
    Layer l;
    l.kind = Layer::Kind::conv;
    l.conv = ConvLayer{3, in, out, act};
    return l;
  };
  a.layers = {
      conv(3, 16, Act::relu),
      conv(16, 16, Act::relu),
      Layer{Layer::Kind::down, {}},
      conv(16, 32, Act::relu),
      conv(32, 32, Act::relu),
      Layer{Layer::Kind::up, {}},
      conv(32, 16, Act::relu),
      conv(16, 16, Act::relu),
      conv(16, 1, Act::sigmoid),
  };
  a.min_input = 1;
  return a;
}

ArchDescriptor ArchDescriptor::tiny_backbone() {
  ArchDescriptor a;
  auto conv = [](int in, int out, Act act) {
    Layer l;
    l.kind = Layer::Kind::conv;
    l.conv = ConvLayer{3, in, out, act};
    return l;
  };
  a.layers = {conv(3, 4, Act::relu), conv(4, 4, Act::relu), conv(4, 1, Act::sigmoid)};
  a.min_input = 1;
  return a;
}

void SaliencyConfig::validate() const {
  require(layers == 1 || layers == 2, "saliency layers must be 1 or 2");
  require(kernel == 1 || kernel == 3 || kernel == 5,
          "saliency kernel size must be 1, 3 or 5");
  require(hidden >= 1, "saliency hidden width must be >= 1");
  require(out_channels >= 1, "saliency output channels must be >= 1");
}

namespace {

Tensor he_kernel(int cout, int cin, int k, CounterRng& rng) {
  Tensor t = Tensor::zeros({cout, cin, k, k});
  const double sigma = std::sqrt(2.0 / (cin * k * k));
  for (double& v : t.data) v = sigma * rng.next_normal();
  return t;
}

constexpr std::uint64_t kTagInit = 0x696e697400ull;

}  // namespace

BackboneParams init_backbone(const ArchDescriptor& arch, std::uint64_t seed) {
  arch.validate();
  BackboneParams p;
  p.arch = arch;
  CounterRng rng(derive_seed(seed, kTagInit));
  for (const Layer& l : arch.layers) {
    if (l.kind != Layer::Kind::conv) continue;
    p.kernels.push_back(he_kernel(l.conv.out, l.conv.in, l.conv.k, rng));
    p.biases.push_back(Tensor::zeros({l.conv.out}));
  }
  return p;
}

SaliencyParams init_saliency(const SaliencyConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SaliencyParams s;
  s.config = cfg;
  CounterRng rng(derive_seed(seed, kTagInit ^ 0x73616cull));
  if (cfg.layers == 1) {
    s.kernels.push_back(Tensor::zeros({cfg.out_channels, 1, cfg.kernel, cfg.kernel}));
    s.biases.push_back(Tensor::zeros({cfg.out_channels}));
  } else {
    s.kernels.push_back(he_kernel(cfg.hidden, 1, cfg.kernel, rng));
    s.biases.push_back(Tensor::zeros({cfg.hidden}));
    s.kernels.push_back(
        Tensor::zeros({cfg.out_channels, cfg.hidden, cfg.kernel, cfg.kernel}));
    s.biases.push_back(Tensor::zeros({cfg.out_channels}));
  }
  return s;
}

void zero_saliency(SaliencyParams& s) {
  for (Tensor& t : s.kernels) std::fill(t.data.begin(), t.data.end(), 0.0);
  for (Tensor& t : s.biases) std::fill(t.data.begin(), t.data.end(), 0.0);
}

ModelBundle init_bundle(Viewpoint v, const ArchDescriptor& arch,
                        const SaliencyConfig& scfg, std::uint64_t seed) {
  ModelBundle m;
  m.viewpoint = v;
  const std::uint64_t vtag = static_cast<std::uint64_t>(v);
  m.coarse = init_backbone(arch, derive_seed(seed, 0x100 + vtag));
  m.fine = init_backbone(arch, derive_seed(seed, 0x200 + vtag));
  m.saliency = init_saliency(scfg, derive_seed(seed, 0x300 + vtag));
  return m;
}

std::vector<Graph::NodeId> bind_params(Graph& g, const std::vector<Tensor>& tensors,
                                       bool requires_grad) {
  std::vector<Graph::NodeId> ids;
  ids.reserve(tensors.size());
  for (const Tensor& t : tensors) ids.push_back(g.leaf(t, requires_grad));
  return ids;
}

Graph::NodeId build_backbone(Graph& g, Graph::NodeId image,
                             const std::vector<Graph::NodeId>& kernels,
                             const std::vector<Graph::NodeId>& biases,
                             const ArchDescriptor& arch) {
  const Tensor& img = g.value(image);
  require(img.rank() == 3 && img.dim(0) == arch.input_channels(),
          "backbone input must be [" + std::to_string(arch.input_channels()) +
              ",H,W], got " + tc::shape_str(img.shape));
  require(img.dim(1) >= arch.min_input && img.dim(2) >= arch.min_input,
          "backbone input " + tc::shape_str(img.shape) +
              " is below the architecture minimum extent " +
              std::to_string(arch.min_input));
  std::vector<std::pair<int, int>> size_stack;  // extents before each down
  Graph::NodeId x = image;
  std::size_t ci = 0;
  for (const Layer& l : arch.layers) {
    switch (l.kind) {
      case Layer::Kind::conv: {
        x = g.conv2d_same(x, kernels[ci], biases[ci]);
        ++ci;
        if (l.conv.act == Act::relu)
          x = g.relu(x);
        else if (l.conv.act == Act::sigmoid)
          x = g.sigmoid(x);
        break;
      }
      case Layer::Kind::down: {
        const Tensor& v = g.value(x);
        size_stack.emplace_back(v.dim(1), v.dim(2));
        x = g.downsample2x(x);
        break;
      }
      case Layer::Kind::up: {
        require(!size_stack.empty(), "upsample without matching downsample");
        const auto [oh, ow] = size_stack.back();
        size_stack.pop_back();
        x = g.upsample2x(x, oh, ow);
        break;
      }
    }
  }
  return x;
}

Graph::NodeId build_saliency(Graph& g, Graph::NodeId prob,
                             const std::vector<Graph::NodeId>& kernels,
                             const std::vector<Graph::NodeId>& biases,
                             const SaliencyConfig& cfg) {
  const Tensor& p = g.value(prob);
  require(p.rank() == 3 && p.dim(0) == 1,
          "saliency input must be [1,H,W], got " + tc::shape_str(p.shape));
  require(static_cast<int>(kernels.size()) == cfg.layers,
          "saliency parameter count does not match its configuration");
  Graph::NodeId x = prob;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    x = g.conv2d_same(x, kernels[i], biases[i]);
    if (i + 1 < kernels.size()) x = g.relu(x);
  }
  // weights in (0,2); zero pre-activation -> weight exactly 1
  return g.affine(g.sigmoid(x), 2.0, 0.0);
}

Tensor seg_forward(const BackboneParams& params, const Tensor& image) {
  Graph g;
  const auto kids = bind_params(g, params.kernels, false);
  const auto bids = bind_params(g, params.biases, false);
  const auto out = build_backbone(g, g.leaf(image), kids, bids, params.arch);
  return g.value(out);
}

Tensor saliency_forward(const SaliencyParams& params, const Tensor& prob) {
  Graph g;
  const auto kids = bind_params(g, params.kernels, false);
  const auto bids = bind_params(g, params.biases, false);
  const auto out = build_saliency(g, g.leaf(prob), kids, bids, params.config);
  return g.value(out);
}

std::vector<NamedTensor> named_params(BackboneParams& b, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < b.kernels.size(); ++i) {
    out.push_back({prefix + ".conv" + std::to_string(i) + ".kernel", &b.kernels[i]});
    out.push_back({prefix + ".conv" + std::to_string(i) + ".bias", &b.biases[i]});
  }
  return out;
}

std::vector<NamedTensor> named_params(SaliencyParams& s, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < s.kernels.size(); ++i) {
    out.push_back({prefix + ".conv" + std::to_string(i) + ".kernel", &s.kernels[i]});
    out.push_back({prefix + ".conv" + std::to_string(i) + ".bias", &s.biases[i]});
  }
  return out;
}

std::vector<NamedTensor> named_params(ModelBundle& m) {
  std::vector<NamedTensor> out = named_params(m.coarse, "coarse");
  for (auto& p : named_params(m.fine, "fine")) out.push_back(p);
  for (auto& p : named_params(m.saliency, "saliency")) out.push_back(p);
  return out;
}

// --- RSTN-W v1 --------------------------------------------------------------

namespace {

json arch_to_json(const ArchDescriptor& a) {
  json layers = json::array();
  for (const Layer& l : a.layers) {
    switch (l.kind) {
      case Layer::Kind::conv: {
        const char* act = l.conv.act == Act::relu
                              ? "relu"
                              : (l.conv.act == Act::sigmoid ? "sigmoid" : "none");
        layers.push_back({{"op", "conv"},
                          {"k", l.conv.k},
                          {"in", l.conv.in},
                          {"out", l.conv.out},
                          {"act", act}});
        break;
      }
      case Layer::Kind::down:
        layers.push_back({{"op", "down"}});
        break;
      case Layer::Kind::up:
        layers.push_back({{"op", "up"}});
        break;
    }
  }
  return json{{"min-input", a.min_input}, {"layers", layers}};
}

ArchDescriptor arch_from_json(const json& j) {
  ArchDescriptor a;
  a.min_input = j.at("min-input").get<int>();
  for (const auto& lj : j.at("layers")) {
    const std::string op = lj.at("op").get<std::string>();
    Layer l;
    if (op == "conv") {
      l.kind = Layer::Kind::conv;
      l.conv.k = lj.at("k").get<int>();
      l.conv.in = lj.at("in").get<int>();
      l.conv.out = lj.at("out").get<int>();
      const std::string act = lj.at("act").get<std::string>();
      l.conv.act = act == "relu" ? Act::relu
                                 : (act == "sigmoid" ? Act::sigmoid : Act::none);
    } else if (op == "down") {
      l.kind = Layer::Kind::down;
    } else if (op == "up") {
      l.kind = Layer::Kind::up;
    } else {
      throw Error("unknown layer op '" + op + "' in weight manifest");
    }
    a.layers.push_back(l);
  }
  a.validate();
  return a;
}

json saliency_cfg_to_json(const SaliencyConfig& c) {
  return json{{"layers", c.layers},
              {"kernel", c.kernel},
              {"hidden", c.hidden},
              {"out-channels", c.out_channels}};
}

SaliencyConfig saliency_cfg_from_json(const json& j) {
  SaliencyConfig c;
  c.layers = j.at("layers").get<int>();
  c.kernel = j.at("kernel").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.out_channels = j.at("out-channels").get<int>();
  c.validate();
  return c;
}

}  // namespace

void save_bundle(const ModelBundle& m, const std::filesystem::path& path_base,
                 const std::string& kind) {
  ModelBundle& mm = const_cast<ModelBundle&>(m);
  const auto params = named_params(mm);

  json manifest;
  manifest["format"] = "RSTN-W";
  manifest["version"] = 1;
  manifest["kind"] = kind;
  manifest["viewpoint"] = viewpoint_name(m.viewpoint);
  manifest["arch"] = arch_to_json(m.coarse.arch);
  manifest["saliency"] = saliency_cfg_to_json(m.saliency.config);
  const std::filesystem::path bin_path = path_base.string() + ".bin";
  manifest["data-file"] = bin_path.filename().string();

  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& p : params) {
    tensors.push_back(
        {{"name", p.name}, {"shape", p.tensor->shape}, {"offset", offset}});
    offset += p.tensor->data.size() * sizeof(double);
  }
  manifest["tensors"] = tensors;
  manifest["payload-bytes"] = offset;

  std::ofstream os(std::filesystem::path(path_base.string() + ".json"));
  require(os.good(), "cannot write weight manifest for " + path_base.string());
  os << manifest.dump(2) << "\n";

  std::ofstream ob(bin_path, std::ios::binary);
  require(ob.good(), "cannot write " + bin_path.string());
  for (const auto& p : params) {
    static_assert(sizeof(double) == 8);
    // payload is little-endian f64
    if constexpr (std::endian::native == std::endian::little) {
      ob.write(reinterpret_cast<const char*>(p.tensor->data.data()),
               static_cast<std::streamsize>(p.tensor->data.size() * sizeof(double)));
    } else {
      for (double v : p.tensor->data) {
        auto bytes = std::bit_cast<std::array<char, 8>>(v);
        std::reverse(bytes.begin(), bytes.end());
        ob.write(bytes.data(), 8);
      }
    }
  }
}

ModelBundle load_bundle(const std::filesystem::path& path_base,
                        std::string* kind_out) {
  const std::filesystem::path json_path(path_base.string() + ".json");
  std::ifstream is(json_path);
  require(is.good(), "cannot open weight manifest " + json_path.string());
  json manifest;
  try {
    is >> manifest;
  } catch (const json::exception& e) {
    throw Error("malformed weight manifest " + json_path.string() + ": " + e.what());
  }
  require(manifest.value("format", "") == "RSTN-W" &&
              manifest.value("version", 0) == 1,
          "not an RSTN-W v1 manifest: " + json_path.string());

  ModelBundle m;
  m.viewpoint = viewpoint_from_name(manifest.at("viewpoint").get<std::string>());
  const ArchDescriptor arch = arch_from_json(manifest.at("arch"));
  const SaliencyConfig scfg = saliency_cfg_from_json(manifest.at("saliency"));
  m.coarse = init_backbone(arch, 0);
  m.fine = init_backbone(arch, 0);
  m.saliency = init_saliency(scfg, 0);
  if (kind_out) *kind_out = manifest.value("kind", "rstn");

  const auto params = named_params(m);
  const auto& tensors = manifest.at("tensors");
  require(tensors.size() == params.size(),
          "weight manifest tensor count mismatch in " + json_path.string());

  const std::filesystem::path bin_path =
      json_path.parent_path() / manifest.at("data-file").get<std::string>();
  std::ifstream ib(bin_path, std::ios::binary);
  require(ib.good(), "cannot open weight payload " + bin_path.string());
  ib.seekg(0, std::ios::end);
  const std::size_t file_size = static_cast<std::size_t>(ib.tellg());
  require(file_size == manifest.at("payload-bytes").get<std::size_t>(),
          "weight payload size mismatch in " + bin_path.string());

  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& tj = tensors[i];
    require(tj.at("name").get<std::string>() == params[i].name,
            "weight manifest tensor order mismatch at " + params[i].name);
    const auto shape = tj.at("shape").get<std::vector<int>>();
    require(shape == params[i].tensor->shape,
            "weight tensor shape mismatch at " + params[i].name);
    const std::size_t offset = tj.at("offset").get<std::size_t>();
    const std::size_t bytes = params[i].tensor->data.size() * sizeof(double);
    require(offset + bytes <= file_size,
            "weight tensor extends past payload at " + params[i].name);
    ib.seekg(static_cast<std::streamoff>(offset));
    ib.read(reinterpret_cast<char*>(params[i].tensor->data.data()),
            static_cast<std::streamsize>(bytes));
    require(ib.good(), "weight payload read failed at " + params[i].name);
    if constexpr (std::endian::native != std::endian::little) {
      for (double& v : params[i].tensor->data) {
        auto b = std::bit_cast<std::array<char, 8>>(v);
        std::reverse(b.begin(), b.end());
        v = std::bit_cast<double>(b);
      }
    }
  }
  return m;
}

}  // namespace rstn::model
