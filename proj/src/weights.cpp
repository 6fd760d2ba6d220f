#include "peap/weights.hpp"

#include "peap/safetensors.hpp"

#include <fmt/format.h>

#include <random>
#include <regex>

namespace peap {

std::string data_dir() {
  if (const char* env = std::getenv("PEAP_DATA_DIR")) return env;
  return PEAP_DATA_DIR;
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(fmt::format("model config: {} must be positive (got {})", name, v));
  };
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_model, "d_model");
  positive(d_head, "d_head");
  positive(d_mlp, "d_mlp");
  positive(vocab_size, "vocab_size");
  positive(max_positions, "max_positions");
  if (d_head * n_heads != d_model)
    throw ConfigError(fmt::format("model config: d_head ({}) x n_heads ({}) != d_model ({})", d_head, n_heads, d_model));
  if (!(layernorm_epsilon > 0)) throw ConfigError("model config: layernorm_epsilon must be positive");
}

ModelConfig ModelConfig::gpt2_small() {
  return {.n_layers = 12, .n_heads = 12, .d_model = 768, .d_head = 64, .d_mlp = 3072,
          .vocab_size = 50257, .max_positions = 1024, .layernorm_epsilon = 1e-5};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layer").get<int>();
    c.n_heads = j.at("n_head").get<int>();
    c.d_model = j.at("n_embd").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_positions = j.value("n_positions", j.value("n_ctx", 1024));
    c.layernorm_epsilon = j.value("layer_norm_epsilon", 1e-5);
    c.d_mlp = j.contains("n_inner") && !j["n_inner"].is_null() ? j["n_inner"].get<int>() : 4 * c.d_model;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("model config.json: {}", e.what()));
  }
  c.d_head = c.n_heads > 0 ? c.d_model / c.n_heads : 0;
  c.validate();
  return c;
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layer", n_layers},         {"n_head", n_heads},        {"n_embd", d_model},
          {"n_inner", d_mlp},            {"vocab_size", vocab_size}, {"n_positions", max_positions},
          {"layer_norm_epsilon", layernorm_epsilon}};
}

template <typename Scalar>
bool ModelWeights<Scalar>::all_finite() const {
  bool ok = token_embedding.allFinite() && position_embedding.allFinite() && lnf_gain.allFinite() &&
            lnf_bias.allFinite();
  for (const auto& l : layers)
    ok = ok && l.ln1_gain.allFinite() && l.ln1_bias.allFinite() && l.qkv.allFinite() && l.qkv_bias.allFinite() &&
         l.out.allFinite() && l.out_bias.allFinite() && l.ln2_gain.allFinite() && l.ln2_bias.allFinite() &&
         l.fc.allFinite() && l.fc_bias.allFinite() && l.proj.allFinite() && l.proj_bias.allFinite();
  return ok;
}

template bool ModelWeights<float>::all_finite() const;
template bool ModelWeights<double>::all_finite() const;

namespace {

class Reader {
 public:
  explicit Reader(const safetensors::File& f) : file_(f) {
    for (const auto& [name, _] : f.tensors())
      if (name.rfind("transformer.", 0) == 0) prefix_ = "transformer.";
  }

  MatrixF matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) const {
    const auto full = prefix_ + name;
    const auto& info = file_.info(full);
    if (info.shape.size() != 2 || info.shape[0] != rows || info.shape[1] != cols)
      throw DataError(fmt::format("shape mismatch for tensor '{}': file has {}, config expects [{}, {}]", full,
                                  shape_string(info.shape), rows, cols));
    auto data = file_.as_float(full);
    return Eigen::Map<const MatrixF>(data.data(), rows, cols);
  }

  RowVectorF vector(const std::string& name, Eigen::Index n) const {
    const auto full = prefix_ + name;
    const auto& info = file_.info(full);
    if (info.shape.size() != 1 || info.shape[0] != n)
      throw DataError(fmt::format("shape mismatch for tensor '{}': file has {}, config expects [{}]", full,
                                  shape_string(info.shape), n));
    auto data = file_.as_float(full);
    return Eigen::Map<const RowVectorF>(data.data(), n);
  }

  const std::string& prefix() const { return prefix_; }

 private:
  static std::string shape_string(const std::vector<std::int64_t>& s) { return fmt::format("[{}]", fmt::join(s, ", ")); }

  const safetensors::File& file_;
  std::string prefix_;
};

}  // namespace

ModelWeights<float> load_weights(const std::filesystem::path& path, const ModelConfig& config) {
  config.validate();
  const auto file = safetensors::File::read(path);
  const Reader r(file);

  // Layers beyond the configured depth mean the checkpoint belongs to a different architecture.
  static const std::regex layer_re(R"((?:transformer\.)?h\.(\d+)\..*)");
  for (const auto& [name, _] : file.tensors()) {
    std::smatch m;
    if (std::regex_match(name, m, layer_re) && std::stoi(m[1]) >= config.n_layers)
      throw DataError(fmt::format("shape mismatch for tensor '{}': checkpoint has more layers than n_layers={}", name,
                                  config.n_layers));
  }

  const Eigen::Index d = config.d_model, m = config.d_mlp;
  ModelWeights<float> w;
  w.config = config;
  w.token_embedding = r.matrix("wte.weight", config.vocab_size, d);
  w.position_embedding = r.matrix("wpe.weight", config.max_positions, d);
  for (int l = 0; l < config.n_layers; ++l) {
    const auto p = fmt::format("h.{}.", l);
    LayerWeights<float> lw;
    lw.ln1_gain = r.vector(p + "ln_1.weight", d);
    lw.ln1_bias = r.vector(p + "ln_1.bias", d);
    lw.qkv = r.matrix(p + "attn.c_attn.weight", d, 3 * d);
    lw.qkv_bias = r.vector(p + "attn.c_attn.bias", 3 * d);
    lw.out = r.matrix(p + "attn.c_proj.weight", d, d);
    lw.out_bias = r.vector(p + "attn.c_proj.bias", d);
    lw.ln2_gain = r.vector(p + "ln_2.weight", d);
    lw.ln2_bias = r.vector(p + "ln_2.bias", d);
    lw.fc = r.matrix(p + "mlp.c_fc.weight", d, m);
    lw.fc_bias = r.vector(p + "mlp.c_fc.bias", m);
    lw.proj = r.matrix(p + "mlp.c_proj.weight", m, d);
    lw.proj_bias = r.vector(p + "mlp.c_proj.bias", d);
    w.layers.push_back(std::move(lw));
  }
  w.lnf_gain = r.vector("ln_f.weight", d);
  w.lnf_bias = r.vector("ln_f.bias", d);
  if (!w.all_finite()) throw DataError(fmt::format("{}: checkpoint contains non-finite values", path.string()));
  return w;
}

void save_weights(const std::filesystem::path& path, const ModelWeights<float>& w) {
  std::vector<safetensors::TensorView> views;
  auto add_m = [&](std::string name, const MatrixF& mat) {
    views.push_back({std::move(name), {mat.rows(), mat.cols()}, {mat.data(), static_cast<std::size_t>(mat.size())}});
  };
  auto add_v = [&](std::string name, const RowVectorF& v) {
    views.push_back({std::move(name), {v.size()}, {v.data(), static_cast<std::size_t>(v.size())}});
  };
  add_m("wte.weight", w.token_embedding);
  add_m("wpe.weight", w.position_embedding);
  for (int l = 0; l < w.config.n_layers; ++l) {
    const auto p = fmt::format("h.{}.", l);
    const auto& lw = w.layers[l];
    add_v(p + "ln_1.weight", lw.ln1_gain);
    add_v(p + "ln_1.bias", lw.ln1_bias);
    add_m(p + "attn.c_attn.weight", lw.qkv);
    add_v(p + "attn.c_attn.bias", lw.qkv_bias);
    add_m(p + "attn.c_proj.weight", lw.out);
    add_v(p + "attn.c_proj.bias", lw.out_bias);
    add_v(p + "ln_2.weight", lw.ln2_gain);
    add_v(p + "ln_2.bias", lw.ln2_bias);
    add_m(p + "mlp.c_fc.weight", lw.fc);
    add_v(p + "mlp.c_fc.bias", lw.fc_bias);
    add_m(p + "mlp.c_proj.weight", lw.proj);
    add_v(p + "mlp.c_proj.bias", lw.proj_bias);
  }
  add_v("ln_f.weight", w.lnf_gain);
  add_v("ln_f.bias", w.lnf_bias);
  safetensors::write(path, views, {{"format", "pt"}, {"config", w.config.to_json().dump()}});
}

ModelWeights<float> random_weights(const ModelConfig& config, std::uint64_t seed, float scale) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  auto mat = [&](Eigen::Index r, Eigen::Index c, float s) {
    MatrixF m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * normal(rng);
    return m;
  };
  auto vec = [&](Eigen::Index n, float mean, float s) {
    RowVectorF v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = mean + s * normal(rng);
    return v;
  };
  const Eigen::Index d = config.d_model, m = config.d_mlp;
  ModelWeights<float> w;
  w.config = config;
  w.token_embedding = mat(config.vocab_size, d, 1.0f);
  w.position_embedding = mat(config.max_positions, d, 0.5f);
  const float attn_scale = scale * 2.0f;
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights<float> lw;
    lw.ln1_gain = vec(d, 1.0f, 0.1f);
    lw.ln1_bias = vec(d, 0.0f, 0.1f);
    lw.qkv = mat(d, 3 * d, attn_scale);
    lw.qkv_bias = vec(3 * d, 0.0f, 0.1f);
    lw.out = mat(d, d, scale);
    lw.out_bias = vec(d, 0.0f, 0.1f);
    lw.ln2_gain = vec(d, 1.0f, 0.1f);
    lw.ln2_bias = vec(d, 0.0f, 0.1f);
    lw.fc = mat(d, m, scale);
    lw.fc_bias = vec(m, 0.0f, 0.1f);
    lw.proj = mat(m, d, scale);
    lw.proj_bias = vec(d, 0.0f, 0.1f);
    w.layers.push_back(std::move(lw));
  }
  w.lnf_gain = vec(d, 1.0f, 0.1f);
  w.lnf_bias = vec(d, 0.0f, 0.1f);
  return w;
}

}  // namespace peap
