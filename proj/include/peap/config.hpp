#ifndef PEAP_CONFIG_HPP
#define PEAP_CONFIG_HPP

#include <nlohmann/json.hpp>

#include <string>

namespace peap {

// Architecture of a pre-LN GPT-2-family decoder.
struct ModelConfig {
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  int d_head = 0;
  int d_mlp = 0;
  int vocab_size = 0;
  int max_positions = 0;
  double layernorm_epsilon = 1e-5;

  // Throws ConfigError when counts are non-positive or d_head * n_heads != d_model.
  void validate() const;

  static ModelConfig gpt2_small();
  // Reads a HuggingFace-style config.json (n_layer, n_head, n_embd, ...).
  static ModelConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace peap

#endif  // PEAP_CONFIG_HPP
