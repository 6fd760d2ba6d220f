#ifndef PEAP_WEIGHTS_HPP
#define PEAP_WEIGHTS_HPP

#include "peap/common.hpp"
#include "peap/config.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace peap {

// Projection matrices use the GPT-2 Conv1D layout (in_features x out_features),
// so a layer applies as X * W + b with X holding one position per row.
template <typename Scalar>
struct LayerWeights {
  RowVector<Scalar> ln1_gain, ln1_bias;
  Matrix<Scalar> qkv;  // d_model x 3 d_model: [all-head Q | K | V]
  RowVector<Scalar> qkv_bias;
  Matrix<Scalar> out;  // d_model x d_model; rows [i d_head, (i+1) d_head) are W_O of head i
  RowVector<Scalar> out_bias;
  RowVector<Scalar> ln2_gain, ln2_bias;
  Matrix<Scalar> fc;  // d_model x d_mlp
  RowVector<Scalar> fc_bias;
  Matrix<Scalar> proj;  // d_mlp x d_model
  RowVector<Scalar> proj_bias;

  template <typename Other>
  LayerWeights<Other> cast() const {
    return {ln1_gain.template cast<Other>(), ln1_bias.template cast<Other>(),
            qkv.template cast<Other>(),      qkv_bias.template cast<Other>(),
            out.template cast<Other>(),      out_bias.template cast<Other>(),
            ln2_gain.template cast<Other>(), ln2_bias.template cast<Other>(),
            fc.template cast<Other>(),       fc_bias.template cast<Other>(),
            proj.template cast<Other>(),     proj_bias.template cast<Other>()};
  }
};

template <typename Scalar>
struct ModelWeights {
  ModelConfig config;
  Matrix<Scalar> token_embedding;     // vocab x d_model, also the tied unembedding
  Matrix<Scalar> position_embedding;  // max_positions x d_model
  std::vector<LayerWeights<Scalar>> layers;
  RowVector<Scalar> lnf_gain, lnf_bias;

  // Head i's slice of the attention output projection (d_head x d_model).
  auto head_out(int layer, int head) const {
    return layers[layer].out.middleRows(static_cast<Eigen::Index>(head) * config.d_head, config.d_head);
  }

  template <typename Other>
  ModelWeights<Other> cast() const {
    ModelWeights<Other> w;
    w.config = config;
    w.token_embedding = token_embedding.template cast<Other>();
    w.position_embedding = position_embedding.template cast<Other>();
    for (const auto& l : layers) w.layers.push_back(l.template cast<Other>());
    w.lnf_gain = lnf_gain.template cast<Other>();
    w.lnf_bias = lnf_bias.template cast<Other>();
    return w;
  }

  bool all_finite() const;
};

// Loads a GPT-2 checkpoint in the safetensors container. Tensor names follow the
// canonical GPT-2 layout (wte.weight, h.{l}.attn.c_attn.weight, ...); an optional
// "transformer." prefix is accepted. Errors name the offending tensor.
ModelWeights<float> load_weights(const std::filesystem::path& path, const ModelConfig& config);

// Writes weights back with canonical names; load_weights(save_weights(w)) is bit-exact.
void save_weights(const std::filesystem::path& path, const ModelWeights<float>& weights);

// Gaussian-initialised model for tests and demos; `scale` is the std of projections.
ModelWeights<float> random_weights(const ModelConfig& config, std::uint64_t seed, float scale = 0.2f);

extern template bool ModelWeights<float>::all_finite() const;
extern template bool ModelWeights<double>::all_finite() const;

}  // namespace peap

#endif  // PEAP_WEIGHTS_HPP
