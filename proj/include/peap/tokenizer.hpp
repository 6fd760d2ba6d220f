#ifndef PEAP_TOKENIZER_HPP
#define PEAP_TOKENIZER_HPP

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace peap {

struct TokenSeq {
  std::vector<int> ids;
  std::string text;
  // Byte range of each token inside `text`; byte-level BPE tokens tile the text exactly.
  std::vector<std::pair<std::size_t, std::size_t>> offsets;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
};

// GPT-2 byte-level BPE (vocab.json + merges.txt).
class Tokenizer {
 public:
  static Tokenizer load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt);
  // The GPT-2 tokenizer shipped under data/gpt2.
  static const Tokenizer& gpt2();

  TokenSeq encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;

  // Raw bytes of one token, e.g. " 17".
  const std::string& token_bytes(int id) const { return id_to_bytes_.at(static_cast<std::size_t>(id)); }
  // Id of a token given its raw bytes, if that exact token exists.
  std::optional<int> token_id(std::string_view bytes) const;
  // Id of `text` when it encodes to exactly one token.
  std::optional<int> single_token(std::string_view text) const;

  int vocab_size() const { return static_cast<int>(id_to_bytes_.size()); }

 private:
  std::vector<int> bpe(const std::string& piece) const;

  std::vector<std::string> id_to_bytes_;
  std::unordered_map<std::string, int> bytes_to_id_;
  std::unordered_map<std::string, int> merge_rank_;  // "left\x1fright" in raw bytes
  std::unique_ptr<std::mutex> cache_mutex_ = std::make_unique<std::mutex>();
  mutable std::unordered_map<std::string, std::vector<int>> cache_;
};

}  // namespace peap

#endif  // PEAP_TOKENIZER_HPP
