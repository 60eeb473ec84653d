#include "arimg/textproc.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "arimg/errors.hpp"

namespace arimg {

namespace {

const char* const kSpecialNames[] = {"<pad>", "<bos>", "<eos>", "<unk>"};

void apply_merge(std::vector<std::int32_t>& seq, std::int32_t left, std::int32_t right, std::int32_t merged) {
  std::size_t out = 0;
  for (std::size_t i = 0; i < seq.size();) {
    if (i + 1 < seq.size() && seq[i] == left && seq[i + 1] == right) {
      seq[out++] = merged;
      i += 2;
    } else {
      seq[out++] = seq[i++];
    }
  }
  seq.resize(out);
}

std::vector<std::int32_t> bytes_of(const std::string& chunk) {
  std::vector<std::int32_t> seq;
  seq.reserve(chunk.size());
  for (unsigned char c : chunk) seq.push_back(kFirstByte + c);
  return seq;
}

std::string to_hex(const std::string& bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (unsigned char c : bytes) {
    out += digits[c >> 4];
    out += digits[c & 15];
  }
  return out;
}

}  // namespace

SubwordVocab::SubwordVocab() {
  for (const char* s : kSpecialNames) tokens_.emplace_back(s);
  for (int b = 0; b < 256; ++b) tokens_.emplace_back(1, static_cast<char>(b));
}

const std::string& SubwordVocab::token_bytes(std::int32_t id) const {
  if (id < kFirstByte || id >= vocab_size()) {
    throw ContractError("vocab: id " + std::to_string(id) + " has no byte string (vocab size " +
                        std::to_string(vocab_size()) + ")");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::int32_t SubwordVocab::id_of(const std::string& bytes) const {
  for (std::int32_t i = kFirstByte; i < vocab_size(); ++i) {
    if (tokens_[static_cast<std::size_t>(i)] == bytes) return i;
  }
  return -1;
}

void SubwordVocab::add_merge(std::int32_t left, std::int32_t right) {
  const std::string merged = token_bytes(left) + token_bytes(right);
  merges_.emplace_back(left, right);
  tokens_.push_back(merged);
}

std::vector<std::int32_t> SubwordVocab::encode_raw(const std::string& text) const {
  std::vector<std::int32_t> out;
  for (const auto& chunk : pretokenize(text)) {
    auto seq = bytes_of(chunk);
    for (std::size_t r = 0; r < merges_.size() && seq.size() > 1; ++r) {
      apply_merge(seq, merges_[r].first, merges_[r].second, kFirstMerge + static_cast<std::int32_t>(r));
    }
    out.insert(out.end(), seq.begin(), seq.end());
  }
  return out;
}

void SubwordVocab::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("vocab: cannot write " + path.string());
  os << "arimg-bpe 1\n";
  os << "merges " << merges_.size() << '\n';
  for (const auto& [l, r] : merges_) os << l << ' ' << r << '\n';
  os << "tokens " << tokens_.size() << '\n';
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    os << i << ' ' << (i < kFirstByte ? std::string(kSpecialNames[i]) : to_hex(tokens_[i])) << '\n';
  }
  if (!os) throw DataError("vocab: write failed for " + path.string());
}

SubwordVocab SubwordVocab::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("vocab: cannot open " + path.string());
  auto fail = [&](const std::string& why) -> void { throw DataError("vocab " + path.string() + ": " + why); };
  std::string magic;
  int version = 0;
  std::string key;
  std::size_t n_merges = 0, n_tokens = 0;
  if (!(is >> magic >> version) || magic != "arimg-bpe" || version != 1) fail("bad header");
  if (!(is >> key >> n_merges) || key != "merges") fail("missing merge count");
  SubwordVocab v;
  for (std::size_t i = 0; i < n_merges; ++i) {
    std::int32_t l = 0, r = 0;
    if (!(is >> l >> r)) fail("truncated merge list");
    const auto next = static_cast<std::int32_t>(v.vocab_size());
    if (l < kFirstByte || r < kFirstByte || l >= next || r >= next) fail("merge " + std::to_string(i) + " out of range");
    v.add_merge(l, r);
  }
  if (!(is >> key >> n_tokens) || key != "tokens" || n_tokens != static_cast<std::size_t>(v.vocab_size())) {
    fail("token table size does not match merges");
  }
  for (std::size_t i = 0; i < n_tokens; ++i) {
    std::size_t id = 0;
    std::string text;
    if (!(is >> id >> text) || id != i) fail("bad token table line " + std::to_string(i));
    const std::string expect = i < kFirstByte ? std::string(kSpecialNames[i]) : to_hex(v.tokens_[i]);
    if (text != expect) fail("token " + std::to_string(i) + " disagrees with merges");
  }
  return v;
}

std::vector<std::string> pretokenize(const std::string& text) {
  std::vector<std::string> chunks;
  std::string cur;
  for (char c : text) {
    if (c == ' ' && !cur.empty()) {
      chunks.push_back(std::move(cur));
      cur.clear();
    }
    cur += c;
  }
  if (!cur.empty()) chunks.push_back(std::move(cur));
  return chunks;
}

SubwordVocab train_subword(const std::vector<std::string>& corpus, int vocab_size) {
  if (vocab_size < kFirstMerge) {
    throw ContractError("train_subword: vocab_size " + std::to_string(vocab_size) + " < " +
                        std::to_string(kFirstMerge));
  }
  if (corpus.empty()) throw ContractError("train_subword: empty corpus");
  std::map<std::string, std::int64_t> freq;
  for (const auto& line : corpus) {
    for (auto& chunk : pretokenize(line)) ++freq[chunk];
  }
  std::vector<std::pair<std::vector<std::int32_t>, std::int64_t>> words;
  for (const auto& [chunk, n] : freq) words.emplace_back(bytes_of(chunk), n);

  SubwordVocab v;
  while (v.vocab_size() < vocab_size) {
    std::map<std::pair<std::int32_t, std::int32_t>, std::int64_t> counts;
    for (const auto& [seq, n] : words) {
      for (std::size_t i = 0; i + 1 < seq.size(); ++i) counts[{seq[i], seq[i + 1]}] += n;
    }
    const std::pair<std::int32_t, std::int32_t>* best = nullptr;
    std::int64_t best_n = 0;
    for (const auto& [pair, n] : counts) {
      if (n < best_n || n < 2) continue;
      if (n == best_n) {
        const auto key = [&](const auto& p) { return std::pair(v.token_bytes(p.first), v.token_bytes(p.second)); };
        if (!(key(pair) < key(*best))) continue;
      }
      best = &pair;
      best_n = n;
    }
    if (best == nullptr) break;
    const auto [l, r] = *best;
    const auto merged = static_cast<std::int32_t>(v.vocab_size());
    v.add_merge(l, r);
    for (auto& [seq, n] : words) apply_merge(seq, l, r, merged);
  }
  return v;
}

std::vector<std::int32_t> encode_text(const SubwordVocab& vocab, const std::string& text, int max_len) {
  if (max_len < 2) throw ContractError("encode_text: max_len " + std::to_string(max_len) + " < 2");
  auto body = vocab.encode_raw(text);
  if (body.size() > static_cast<std::size_t>(max_len - 2)) body.resize(static_cast<std::size_t>(max_len - 2));
  std::vector<std::int32_t> out;
  out.reserve(body.size() + 2);
  out.push_back(kBos);
  out.insert(out.end(), body.begin(), body.end());
  out.push_back(kEos);
  return out;
}

std::vector<std::int32_t> encode_padded(const SubwordVocab& vocab, const std::string& text, int max_len) {
  auto ids = encode_text(vocab, text, max_len);
  ids.resize(static_cast<std::size_t>(max_len), kPad);
  return ids;
}

std::string decode_text(const SubwordVocab& vocab, const std::vector<std::int32_t>& ids) {
  std::string out;
  for (auto id : ids) {
    if (id < 0 || id >= vocab.vocab_size()) {
      throw ContractError("decode_text: id " + std::to_string(id) + " outside vocab of size " +
                          std::to_string(vocab.vocab_size()));
    }
    if (id < kFirstByte) continue;
    out += vocab.token_bytes(id);
  }
  return out;
}

}  // namespace arimg
