#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prat/attacks.hpp"
#include "prat/targets.hpp"
#include "prat/tensor.hpp"

namespace prat::aidgen {

constexpr uint8_t kSplitTrain = 0;
constexpr uint8_t kSplitTest = 1;

// Benign 32x32 images stored quantized (u8); attacks consume u8/255 floats,
// which keeps l-inf bounds exact after re-quantization.
struct BenignStore {
  uint16_t height = 32;
  uint16_t width = 32;
  std::string provenance = "shapeset";
  std::vector<uint8_t> pixels;  // count * 3*h*w, channel-major
  std::vector<uint16_t> labels;
  std::vector<uint8_t> split;   // kSplitTrain / kSplitTest

  int count() const { return static_cast<int>(labels.size()); }
  int64_t image_bytes() const { return static_cast<int64_t>(3) * height * width; }
  Tensor image(int idx) const;  // float [3,H,W]
  std::vector<int> ids_of_split(uint8_t tag) const;

  void save(const std::filesystem::path& path) const;  // magic "BEN1"
  static BenignStore load(const std::filesystem::path& path);
  uint64_t checksum() const;
};

// Procedurally rendered 10-class shape corpus; deterministic by seed,
// class-balanced, label i%classes for image i.
BenignStore shapeset_generate(int n_per_class, int classes, int size, uint64_t seed);

// One record: label byte + 3*32*32 pixel bytes, channel-major.
BenignStore read_external_corpus(const std::filesystem::path& path);

// Stratified, seed-deterministic, disjoint split tags.
void split_benign(BenignStore& store, double train_fraction, uint64_t seed);

struct AidRecord {
  uint32_t clean_id = 0;
  uint8_t attack = 0;
  uint8_t family = 0;
  uint8_t model_id = 0;
  uint8_t norm = 0;  // 0 = l-inf, 1 = l2
  float eps = 0.f;
  uint8_t success = 0;
  uint16_t clean_label = 0;
  uint16_t adv_label = 0;
  std::vector<uint8_t> pixels;  // 3*H*W, channel-major

  Tensor image(int h, int w) const;
};

struct Corpus {
  uint16_t height = 32;
  uint16_t width = 32;
  std::vector<AidRecord> records;

  int count() const { return static_cast<int>(records.size()); }
  void save(const std::filesystem::path& path) const;  // magic "AID1"
  static Corpus load(const std::filesystem::path& path);
};

// key=value manifest; regeneration from it reproduces the corpus bit-exactly.
struct Manifest {
  std::map<std::string, std::string> entries;

  void save(const std::filesystem::path& path) const;
  static Manifest load(const std::filesystem::path& path);
  const std::string& at(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
};

struct GenerationConfig {
  int per_attack_train = 200;
  int per_attack_test = 50;
  uint64_t master_seed = 7;
  int retry_budget = 40;
  bool keep_failures = false;
  std::vector<int> attack_labels;  // empty = all 13

  // desk-scale attack budget overrides applied to default_config
  int pgd_steps = 40;
  int bim_steps = 10;
  int cw_inner_steps = 60;
  int c_search_steps = 3;
  int boundary_queries = 800;
  int newtonfool_steps = 50;
  // η palette (integer k) at which universal perturbations are prebuilt
  std::vector<int> uap_palette = {2, 4, 8, 12, 16};
};

struct ShortfallEntry {
  int attack = 0;
  int model_id = 0;
  uint8_t split = 0;
  int requested = 0;
  int produced = 0;
};

struct GenerationResult {
  Corpus train;
  Corpus test;
  Manifest manifest;
  std::vector<ShortfallEntry> shortfalls;
  int attempts = 0;
  int successes = 0;
};

// Full corpus generation: per (attack, model) quotas drawn from the right
// partition, per-record ε sampling, retries on failure, post-quantization
// fooling re-check. Deterministic given the manifest, independent of worker
// count.
GenerationResult generate_aid(std::vector<targets::ClassifierModel*> models,
                              const BenignStore& store, const GenerationConfig& cfg,
                              const std::vector<std::string>& model_paths = {});

// Writes aid_train.bin, aid_test.bin and manifest.txt into out_dir.
void write_generation(const GenerationResult& result, const std::filesystem::path& out_dir);

// Re-runs generation from a manifest (store and model checkpoints are
// resolved and hash-verified).
GenerationResult regenerate_from_manifest(const Manifest& manifest,
                                          const std::filesystem::path& manifest_dir);

GenerationConfig config_from_manifest(const Manifest& manifest);

}  // namespace prat::aidgen
