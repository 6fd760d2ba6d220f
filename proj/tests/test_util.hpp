#pragma once

#include "peap/config.hpp"
#include "peap/tokenizer.hpp"
#include "peap/weights.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace testutil {

inline std::filesystem::path fixtures() { return PEAP_TEST_FIXTURES; }

inline peap::ModelConfig toy_config(int layers = 2, int heads = 2, int d_model = 8, int vocab = 64) {
  peap::ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d_model;
  c.d_head = d_model / heads;
  c.d_mlp = 4 * d_model;
  c.vocab_size = vocab;
  c.max_positions = 32;
  return c;
}

inline std::vector<int> random_tokens(int n, int vocab, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_int_distribution<int> dist(0, vocab - 1);
  std::vector<int> out(n);
  for (auto& t : out) t = dist(rng);
  return out;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("peap_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

inline std::vector<std::string> token_strings(const peap::TokenSeq& seq) {
  std::vector<std::string> out;
  for (int id : seq.ids) out.push_back(peap::Tokenizer::gpt2().token_bytes(id));
  return out;
}

}  // namespace testutil
