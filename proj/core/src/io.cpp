#include "arimg/io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "config_fields.hpp"

namespace arimg {

namespace fs = std::filesystem;
using nlohmann::json;
using detail::Fields;

namespace {

static_assert(sizeof(float) == 4);

void put_f32(std::vector<char>& out, float v) {
  auto u = std::bit_cast<std::uint32_t>(v);
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
  char b[4];
  std::memcpy(b, &u, 4);
  out.insert(out.end(), b, b + 4);
}

float get_f32(const char* p) {
  std::uint32_t u = 0;
  std::memcpy(&u, p, 4);
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
  return std::bit_cast<float>(u);
}

void write_bytes(const fs::path& path, const std::vector<char>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("write failed for " + path.string());
}

std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::vector<char> out((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return out;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
}

// Contract violations in a loaded config are format errors of the file.
template <typename F>
auto as_data_error(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const ContractError& e) {
    throw DataError(where + ": " + e.what());
  }
}

}  // namespace

std::string read_text_file(const fs::path& path) {
  const auto b = read_bytes(path);
  return std::string(b.begin(), b.end());
}

void write_text_file(const fs::path& path, const std::string& text) {
  write_bytes(path, std::vector<char>(text.begin(), text.end()));
}

void save_checkpoint(const fs::path& dir, const ParamSet<float>& params, const std::string& kind,
                     const std::string& config_json) {
  const json cfg = detail::parse_json(config_json, "checkpoint config");
  if (!cfg.is_object()) throw ContractError("save_checkpoint: config must be a JSON object");
  ensure_dir(dir);
  std::vector<char> bytes;
  bytes.reserve(static_cast<std::size_t>(params.numel()) * 4);
  json entries = json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params[i];
    const std::size_t off = bytes.size();
    for (float v : t.data()) put_f32(bytes, v);
    entries.push_back({{"name", params.name(i)},
                       {"shape", t.shape()},
                       {"dtype", "f32"},
                       {"byte_offset", off},
                       {"byte_len", bytes.size() - off}});
  }
  write_bytes(dir / "weights.bin", bytes);
  json m{{"format_version", kCheckpointFormatVersion}, {"kind", kind}, {"config", cfg}, {"parameters", entries}};
  write_text_file(dir / "manifest.json", m.dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  const std::string where = "checkpoint " + dir.string();
  const json m = detail::parse_json(read_text_file(dir / "manifest.json"), where + "/manifest.json");
  Fields top(m, where + "/manifest.json");
  int version = 0;
  if (!top.has("format_version")) throw DataError(where + ": manifest has no format_version");
  top.get("format_version", version);
  if (version != kCheckpointFormatVersion) {
    throw DataError(where + ": unsupported format_version " + std::to_string(version));
  }
  LoadedCheckpoint out;
  top.get("kind", out.kind);
  if (!top.has("config") || !top.raw("config").is_object()) throw DataError(where + ": config must be an object");
  out.config_json = top.raw("config").dump();
  if (!top.has("parameters") || !top.raw("parameters").is_array()) {
    throw DataError(where + ": parameters must be an array");
  }
  top.finish();

  std::error_code ec;
  const auto file_size = fs::file_size(dir / "weights.bin", ec);
  if (ec) throw DataError(where + ": cannot stat weights.bin: " + ec.message());

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t off = 0, len = 0;
  };
  std::vector<Entry> entries;
  std::set<std::string> names;
  for (const auto& pj : m.at("parameters")) {
    Fields f(pj, where + " parameter " + std::to_string(entries.size()));
    Entry e;
    std::string dtype;
    for (const char* k : {"name", "shape", "dtype", "byte_offset", "byte_len"}) {
      if (!f.has(k)) throw DataError(f.where() + ": missing " + k);
    }
    f.get("name", e.name);
    f.get("dtype", dtype);
    f.get("byte_offset", e.off);
    f.get("byte_len", e.len);
    const auto& sj = f.raw("shape");
    f.finish();
    if (dtype != "f32") throw DataError(f.where() + ": unsupported dtype '" + dtype + "'");
    if (!names.insert(e.name).second) throw DataError(where + ": duplicate parameter '" + e.name + "'");
    if (!sj.is_array()) throw DataError(f.where() + ": shape must be an array");
    std::uint64_t numel = 1;
    for (const auto& d : sj) {
      if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0 || d.get<std::uint64_t>() > (std::uint64_t{1} << 31)) {
        throw DataError(f.where() + ": bad shape dimension");
      }
      e.shape.push_back(d.get<std::int64_t>());
      numel *= d.get<std::uint64_t>();
      if (numel > (std::uint64_t{1} << 40)) throw DataError(f.where() + ": shape too large");
    }
    if (e.len != numel * 4) throw DataError(f.where() + ": byte_len does not match shape");
    if (e.off > file_size || e.len > file_size - e.off) {
      throw DataError(where + ": parameter '" + e.name + "' is out of bounds of weights.bin (" +
                      std::to_string(file_size) + " bytes)");
    }
    entries.push_back(std::move(e));
  }
  std::vector<const Entry*> by_off;
  for (const auto& e : entries) by_off.push_back(&e);
  std::sort(by_off.begin(), by_off.end(), [](const Entry* a, const Entry* b) { return a->off < b->off; });
  for (std::size_t i = 1; i < by_off.size(); ++i) {
    if (by_off[i]->off < by_off[i - 1]->off + by_off[i - 1]->len) {
      throw DataError(where + ": parameters '" + by_off[i - 1]->name + "' and '" + by_off[i]->name + "' overlap");
    }
  }

  const auto bytes = read_bytes(dir / "weights.bin");
  if (bytes.size() != file_size) throw DataError(where + ": weights.bin changed while reading");
  for (const auto& e : entries) {
    std::vector<float> v(e.len / 4);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = get_f32(bytes.data() + e.off + 4 * i);
    out.params.add(e.name, Tensor<float>(e.shape, std::move(v)));
  }
  return out;
}

namespace {

// Copies every parameter of `src` into `dst` by name; both sets must hold
// exactly the same names and shapes.
void adopt(ParamSet<float>& dst, const ParamSet<float>& src, const std::string& where) {
  if (dst.size() != src.size()) {
    throw DataError(where + ": expected " + std::to_string(dst.size()) + " parameters, found " +
                    std::to_string(src.size()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    int j = -1;
    try {
      j = src.index_of(dst.name(i));
    } catch (const ContractError&) {
      throw DataError(where + ": missing parameter '" + dst.name(i) + "'");
    }
    const auto& t = src[static_cast<std::size_t>(j)];
    if (t.shape() != dst[i].shape()) throw DataError(where + ": shape mismatch for '" + dst.name(i) + "'");
    dst[i] = t.clone();
  }
}

LoadedCheckpoint load_kind(const fs::path& dir, const std::string& kind) {
  auto ck = load_checkpoint(dir);
  if (ck.kind != kind) {
    throw DataError("checkpoint " + dir.string() + ": holds a '" + ck.kind + "', expected '" + kind + "'");
  }
  return ck;
}

}  // namespace

namespace {

template <typename C>
std::string config_to_json(const C& c) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  detail::write_from(j, c);
  return j.dump();
}

template <typename C>
C config_from_json(const std::string& text, const std::string& where) {
  const json j = detail::parse_json(text, where);
  Fields f(j, where);
  C c;
  detail::read_into(f, c);
  f.finish();
  as_data_error(where, [&] { c.validate(); return 0; });
  return c;
}

}  // namespace

std::string to_json(const ModelConfig& c) { return config_to_json(c); }
std::string to_json(const TokenizerConfig& c) { return config_to_json(c); }
std::string to_json(const SuperResConfig& c) { return config_to_json(c); }
std::string to_json(const DualEncoderConfig& c) { return config_to_json(c); }

ModelConfig model_config_from_json(const std::string& text) {
  return config_from_json<ModelConfig>(text, "model config");
}
TokenizerConfig tokenizer_config_from_json(const std::string& text) {
  return config_from_json<TokenizerConfig>(text, "tokenizer config");
}
SuperResConfig superres_config_from_json(const std::string& text) {
  return config_from_json<SuperResConfig>(text, "superres config");
}
DualEncoderConfig dual_encoder_config_from_json(const std::string& text) {
  return config_from_json<DualEncoderConfig>(text, "dual encoder config");
}

void save_model(const fs::path& dir, const Seq2SeqModel& m, const SubwordVocab& vocab) {
  save_checkpoint(dir, m.params, "seq2seq", to_json(m.cfg));
  vocab.save(dir / "vocab.txt");
}

Seq2SeqModel load_model(const fs::path& dir, SubwordVocab* vocab) {
  const auto ck = load_kind(dir, "seq2seq");
  auto m = build_model(model_config_from_json(ck.config_json), 0);
  adopt(m.params, ck.params, "checkpoint " + dir.string());
  if (vocab != nullptr) {
    *vocab = SubwordVocab::load(dir / "vocab.txt");
    if (vocab->vocab_size() > m.cfg.text_vocab) {
      throw DataError("checkpoint " + dir.string() + ": vocab.txt is larger than the model's text_vocab");
    }
  }
  return m;
}

void save_tokenizer(const fs::path& dir, const ImageTokenizer& tok) {
  save_checkpoint(dir, tok.params, "image_tokenizer", to_json(tok.cfg));
}

ImageTokenizer load_tokenizer(const fs::path& dir) {
  const auto ck = load_kind(dir, "image_tokenizer");
  auto tok = build_tokenizer(tokenizer_config_from_json(ck.config_json), 0);
  adopt(tok.params, ck.params, "checkpoint " + dir.string());
  return tok;
}

void save_superres(const fs::path& dir, const SuperResNet& sr) {
  save_checkpoint(dir, sr.params, "superres", to_json(sr.cfg));
}

SuperResNet load_superres(const fs::path& dir) {
  const auto ck = load_kind(dir, "superres");
  auto sr = build_superres(superres_config_from_json(ck.config_json), 0);
  adopt(sr.params, ck.params, "checkpoint " + dir.string());
  return sr;
}

void save_dual_encoder(const fs::path& dir, const DualEncoder& enc) {
  save_checkpoint(dir, enc.params, "dual_encoder", to_json(enc.cfg));
  enc.vocab.save(dir / "vocab.txt");
}

DualEncoder load_dual_encoder(const fs::path& dir) {
  const auto ck = load_kind(dir, "dual_encoder");
  auto enc = build_dual_encoder(dual_encoder_config_from_json(ck.config_json), SubwordVocab::load(dir / "vocab.txt"), 0);
  adopt(enc.params, ck.params, "checkpoint " + dir.string());
  return enc;
}

void save_index(const fs::path& dir, const RetrievalIndex& index) {
  if (index.rows.size() != index.size() * static_cast<std::size_t>(index.dim)) {
    throw ContractError("save_index: rows do not match dim x count");
  }
  ensure_dir(dir);
  std::vector<char> bytes;
  bytes.reserve(index.rows.size() * 4);
  for (float v : index.rows) put_f32(bytes, v);
  write_bytes(dir / "rows.bin", bytes);
  json m{{"format_version", kCheckpointFormatVersion},
         {"dim", index.dim},
         {"count", index.size()},
         {"ids", index.ids}};
  write_text_file(dir / "index.json", m.dump() + "\n");
}

RetrievalIndex load_index(const fs::path& dir) {
  const std::string where = "index " + dir.string();
  const json m = detail::parse_json(read_text_file(dir / "index.json"), where + "/index.json");
  Fields f(m, where + "/index.json");
  int version = 0;
  std::int64_t count = -1;
  RetrievalIndex idx;
  f.get("format_version", version);
  f.get("dim", idx.dim);
  f.get("count", count);
  if (!f.has("ids") || !f.raw("ids").is_array()) throw DataError(where + ": ids must be an array");
  f.finish();
  if (version != kCheckpointFormatVersion) throw DataError(where + ": unsupported format_version");
  if (idx.dim < 1 || count < 0) throw DataError(where + ": bad dim or count");
  for (const auto& v : m.at("ids")) {
    if (!v.is_number_integer()) throw DataError(where + ": ids must be integers");
    idx.ids.push_back(v.get<std::int64_t>());
  }
  if (static_cast<std::int64_t>(idx.ids.size()) != count) throw DataError(where + ": ids do not match count");
  const auto bytes = read_bytes(dir / "rows.bin");
  const auto want = static_cast<std::uint64_t>(count) * static_cast<std::uint64_t>(idx.dim) * 4;
  if (bytes.size() != want) {
    throw DataError(where + ": rows.bin has " + std::to_string(bytes.size()) + " bytes, expected " +
                    std::to_string(want));
  }
  idx.rows.resize(bytes.size() / 4);
  for (std::size_t i = 0; i < idx.rows.size(); ++i) idx.rows[i] = get_f32(bytes.data() + 4 * i);
  return idx;
}

void write_png(const fs::path& path, const Image& image) {
  if (image.height < 1 || image.width < 1 || image.size() != static_cast<std::size_t>(image.height) * image.width * 3) {
    throw ContractError("write_png: malformed image");
  }
  const auto rgb = to_rgb8(image);
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (png_image_write_to_file(&img, path.string().c_str(), 0, rgb.data(), 0, nullptr) == 0) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw DataError("cannot write PNG " + path.string() + ": " + msg);
  }
}

Image read_png(const fs::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&img, path.string().c_str()) == 0) {
    throw DataError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(img));
  if (png_image_finish_read(&img, nullptr, rgb.data(), 0, nullptr) == 0) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw DataError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return from_rgb8(static_cast<int>(img.height), static_cast<int>(img.width), rgb);
}

}  // namespace arimg
