#pragma once

#include <filesystem>
#include <string>

#include "arimg/contrastive.hpp"
#include "arimg/image.hpp"
#include "arimg/image_tokenizer.hpp"
#include "arimg/params.hpp"
#include "arimg/seq2seq.hpp"

namespace arimg {

inline constexpr int kCheckpointFormatVersion = 1;

// Checkpoint directory: manifest.json + weights.bin (little-endian f32).
// `kind` names the model family; `config_json` is embedded verbatim as the
// manifest's "config" object and must be a JSON object.
void save_checkpoint(const std::filesystem::path& dir, const ParamSet<float>& params, const std::string& kind,
                     const std::string& config_json);

struct LoadedCheckpoint {
  std::string kind;
  std::string config_json;
  ParamSet<float> params;
};

// Validates format_version, entry fields, bounds and overlap before reading
// any weights. DataError on any problem.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

// Model wrappers. The configuration travels in the manifest; the model is
// rebuilt from it and every parameter must match by name and shape.
// Seq2seq and dual-encoder directories also carry vocab.txt.
void save_model(const std::filesystem::path& dir, const Seq2SeqModel& m, const SubwordVocab& vocab);
Seq2SeqModel load_model(const std::filesystem::path& dir, SubwordVocab* vocab = nullptr);
void save_tokenizer(const std::filesystem::path& dir, const ImageTokenizer& tok);
ImageTokenizer load_tokenizer(const std::filesystem::path& dir);
void save_superres(const std::filesystem::path& dir, const SuperResNet& sr);
SuperResNet load_superres(const std::filesystem::path& dir);
void save_dual_encoder(const std::filesystem::path& dir, const DualEncoder& enc);
DualEncoder load_dual_encoder(const std::filesystem::path& dir);

// Config <-> JSON text. Unknown keys and wrong types are DataErrors; missing
// keys keep their defaults.
std::string to_json(const ModelConfig& c);
std::string to_json(const TokenizerConfig& c);
std::string to_json(const SuperResConfig& c);
std::string to_json(const DualEncoderConfig& c);
ModelConfig model_config_from_json(const std::string& text);
TokenizerConfig tokenizer_config_from_json(const std::string& text);
SuperResConfig superres_config_from_json(const std::string& text);
DualEncoderConfig dual_encoder_config_from_json(const std::string& text);

// index.json {format_version, dim, count, ids} + rows.bin (count x dim f32 LE).
void save_index(const std::filesystem::path& dir, const RetrievalIndex& index);
RetrievalIndex load_index(const std::filesystem::path& dir);

// 8-bit RGB PNG. Reading accepts gray/palette/alpha inputs and converts.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// Whole-file helpers; DataError when the file cannot be read or written.
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace arimg
