#include "peap/tokenizer.hpp"

#include "peap/common.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <unicode/regex.h>
#include <unicode/unistr.h>

#include <fstream>
#include <limits>
#include <memory>
#include <sstream>

namespace peap {

namespace {

// GPT-2's printable stand-ins for raw bytes.
std::vector<char32_t> byte_to_codepoint() {
  std::vector<char32_t> table(256, 0);
  std::vector<bool> used(256, false);
  auto keep = [&](int lo, int hi) {
    for (int b = lo; b <= hi; ++b) {
      table[b] = static_cast<char32_t>(b);
      used[b] = true;
    }
  };
  keep('!', '~');
  keep(0xA1, 0xAC);
  keep(0xAE, 0xFF);
  char32_t next = 256;
  for (int b = 0; b < 256; ++b)
    if (!used[b]) table[b] = next++;
  return table;
}

// Inverse of the byte table applied to a vocab entry (UTF-8 of stand-in code points).
std::string unmap(const std::string& shown, const std::unordered_map<char32_t, unsigned char>& back,
                  const std::string& where) {
  std::string out;
  std::size_t i = 0;
  while (i < shown.size()) {
    const auto c = static_cast<unsigned char>(shown[i]);
    char32_t cp;
    std::size_t len;
    if (c < 0x80) {
      cp = c;
      len = 1;
    } else if ((c >> 5) == 0x6) {
      cp = c & 0x1F;
      len = 2;
    } else if ((c >> 4) == 0xE) {
      cp = c & 0x0F;
      len = 3;
    } else {
      throw DataError(fmt::format("{}: invalid byte-level symbol '{}'", where, shown));
    }
    if (i + len > shown.size()) throw DataError(fmt::format("{}: truncated symbol '{}'", where, shown));
    for (std::size_t k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(shown[i + k]) & 0x3F);
    auto it = back.find(cp);
    if (it == back.end()) throw DataError(fmt::format("{}: symbol '{}' is not byte-level", where, shown));
    out.push_back(static_cast<char>(it->second));
    i += len;
  }
  return out;
}

const char* kPretokenPattern = R"('s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+)";

std::string merge_key(std::string_view a, std::string_view b) {
  std::string k;
  k.reserve(a.size() + b.size() + 1);
  k.append(a);
  k.push_back('\x1f');
  k.append(b);
  return k;
}

}  // namespace

Tokenizer Tokenizer::load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) {
  const auto table = byte_to_codepoint();
  std::unordered_map<char32_t, unsigned char> back;
  for (int b = 0; b < 256; ++b) back[table[b]] = static_cast<unsigned char>(b);

  std::ifstream vin(vocab_json);
  if (!vin) throw DataError(fmt::format("cannot open vocabulary '{}'", vocab_json.string()));
  nlohmann::json vocab;
  try {
    vin >> vocab;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("{}: {}", vocab_json.string(), e.what()));
  }
  Tokenizer t;
  t.id_to_bytes_.resize(vocab.size());
  for (const auto& [shown, idj] : vocab.items()) {
    const int id = idj.get<int>();
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size())
      throw DataError(fmt::format("{}: id {} out of range", vocab_json.string(), id));
    // Special tokens such as <|endoftext|> are kept verbatim.
    std::string bytes = shown.rfind("<|", 0) == 0 ? shown : unmap(shown, back, vocab_json.string());
    t.bytes_to_id_[bytes] = id;
    t.id_to_bytes_[static_cast<std::size_t>(id)] = std::move(bytes);
  }

  std::ifstream min(merges_txt);
  if (!min) throw DataError(fmt::format("cannot open merges '{}'", merges_txt.string()));
  std::string line;
  int line_no = 0;
  int rank = 0;
  while (std::getline(min, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.rfind("#version", 0) == 0) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size() || line.find(' ', sp + 1) != std::string::npos)
      throw DataError(fmt::format("{}:{}: malformed merge rule '{}' (expected two symbols)", merges_txt.string(),
                                  line_no, line));
    const auto where = fmt::format("{}:{}", merges_txt.string(), line_no);
    auto left = unmap(line.substr(0, sp), back, where);
    auto right = unmap(line.substr(sp + 1), back, where);
    if (!t.bytes_to_id_.count(left + right))
      throw DataError(fmt::format("{}: merge result '{}' missing from vocabulary", where, line.substr(0, sp) + line.substr(sp + 1)));
    t.merge_rank_.emplace(merge_key(left, right), rank++);
  }
  if (rank == 0) throw DataError(fmt::format("{}: no merge rules", merges_txt.string()));
  return t;
}

const Tokenizer& Tokenizer::gpt2() {
  static const Tokenizer tok = load(std::filesystem::path(data_dir()) / "gpt2" / "vocab.json",
                                    std::filesystem::path(data_dir()) / "gpt2" / "merges.txt");
  return tok;
}

std::optional<int> Tokenizer::token_id(std::string_view bytes) const {
  auto it = bytes_to_id_.find(std::string(bytes));
  if (it == bytes_to_id_.end()) return std::nullopt;
  return it->second;
}

std::optional<int> Tokenizer::single_token(std::string_view text) const {
  auto seq = encode(text);
  if (seq.size() != 1) return std::nullopt;
  return seq.ids[0];
}

std::vector<int> Tokenizer::bpe(const std::string& piece) const {
  {
    std::lock_guard lock(*cache_mutex_);
    if (auto it = cache_.find(piece); it != cache_.end()) return it->second;
  }
  std::vector<std::string> parts;
  parts.reserve(piece.size());
  for (char c : piece) parts.emplace_back(1, c);
  while (parts.size() > 1) {
    int best = std::numeric_limits<int>::max();
    std::size_t at = 0;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      auto it = merge_rank_.find(merge_key(parts[i], parts[i + 1]));
      if (it != merge_rank_.end() && it->second < best) {
        best = it->second;
        at = i;
      }
    }
    if (best == std::numeric_limits<int>::max()) break;
    parts[at] += parts[at + 1];
    parts.erase(parts.begin() + static_cast<std::ptrdiff_t>(at) + 1);
  }
  std::vector<int> ids;
  ids.reserve(parts.size());
  for (const auto& p : parts) {
    auto it = bytes_to_id_.find(p);
    if (it == bytes_to_id_.end()) throw DataError(fmt::format("tokenizer: no vocabulary entry for byte sequence of length {}", p.size()));
    ids.push_back(it->second);
  }
  std::lock_guard lock(*cache_mutex_);
  cache_.emplace(piece, ids);
  return ids;
}

TokenSeq Tokenizer::encode(std::string_view text) const {
  TokenSeq seq;
  seq.text = std::string(text);
  if (text.empty()) return seq;

  UErrorCode status = U_ZERO_ERROR;
  thread_local std::unique_ptr<icu::RegexPattern> pattern;
  if (!pattern) {
    pattern.reset(icu::RegexPattern::compile(icu::UnicodeString::fromUTF8(kPretokenPattern), 0, status));
    if (U_FAILURE(status)) throw DataError(fmt::format("tokenizer: regex compile failed ({})", u_errorName(status)));
  }
  const auto ustr = icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  std::string roundtrip;
  ustr.toUTF8String(roundtrip);
  if (roundtrip != text) throw DataError("tokenizer: input is not valid UTF-8");

  std::unique_ptr<icu::RegexMatcher> matcher(pattern->matcher(ustr, status));
  if (U_FAILURE(status)) throw DataError("tokenizer: regex matcher failed");
  std::size_t byte_pos = 0;
  while (matcher->find(status) && U_SUCCESS(status)) {
    const auto begin = matcher->start(status);
    const auto end = matcher->end(status);
    std::string piece;
    ustr.tempSubStringBetween(begin, end).toUTF8String(piece);
    for (int id : bpe(piece)) {
      const auto len = id_to_bytes_[static_cast<std::size_t>(id)].size();
      seq.ids.push_back(id);
      seq.offsets.emplace_back(byte_pos, byte_pos + len);
      byte_pos += len;
    }
  }
  if (byte_pos != text.size()) throw DataError("tokenizer: pre-tokenization did not cover the input");
  return seq;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab_size()) throw DataError(fmt::format("tokenizer: id {} out of vocabulary", id));
    out += id_to_bytes_[static_cast<std::size_t>(id)];
  }
  return out;
}

}  // namespace peap
