#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace arimg {

inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kBos = 1;
inline constexpr std::int32_t kEos = 2;
inline constexpr std::int32_t kUnk = 3;
inline constexpr std::int32_t kFirstByte = 4;
inline constexpr std::int32_t kFirstMerge = kFirstByte + 256;

// Byte-level BPE vocabulary. Ids: specials 0-3, raw bytes 4-259, then one id
// per merge in training order.
class SubwordVocab {
 public:
  SubwordVocab();

  int vocab_size() const noexcept { return static_cast<int>(tokens_.size()); }
  const std::vector<std::pair<std::int32_t, std::int32_t>>& merges() const noexcept { return merges_; }
  // Byte string of a non-special id.
  const std::string& token_bytes(std::int32_t id) const;
  std::int32_t id_of(const std::string& bytes) const;  // -1 when absent

  // Subword ids of `text` without specials.
  std::vector<std::int32_t> encode_raw(const std::string& text) const;

  void add_merge(std::int32_t left, std::int32_t right);

  void save(const std::filesystem::path& path) const;
  static SubwordVocab load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::int32_t, std::int32_t>> merges_;
  std::vector<std::string> tokens_;
};

// Splits text into pre-token chunks; every space starts a new chunk, and
// merges never cross chunk boundaries.
std::vector<std::string> pretokenize(const std::string& text);

// Greedy BPE: repeatedly merge the most frequent adjacent pair (ties go to the
// lexicographically smallest (left bytes, right bytes)) until vocab_size is
// reached or no pair occurs twice.
SubwordVocab train_subword(const std::vector<std::string>& corpus, int vocab_size);

// BOS + ids + EOS, truncated to max_len with EOS kept last.
std::vector<std::int32_t> encode_text(const SubwordVocab& vocab, const std::string& text, int max_len);
// encode_text right-padded with PAD to exactly max_len.
std::vector<std::int32_t> encode_padded(const SubwordVocab& vocab, const std::string& text, int max_len);
// Concatenated bytes of the non-special ids. Throws ContractError on ids outside the vocab.
std::string decode_text(const SubwordVocab& vocab, const std::vector<std::int32_t>& ids);

}  // namespace arimg
