#pragma once

#include <array>
#include <string>

#include <json.hpp>

#include "sdl/rng.hpp"
#include "sdl/tensor.hpp"

namespace sdl {

// Six behaviors: two confusable pairs that differ only by a static background
// cue, one distinct motion class, and a background/no-action class.
enum SynthClass : int {
  kMoveLeftCue = 0,
  kMoveLeft = 1,
  kMoveRightCue = 2,
  kMoveRight = 3,
  kStraight = 4,
  kBackground = 5,
};
constexpr int kNumClasses = 6;
extern const std::array<const char*, kNumClasses> kClassNames;
constexpr std::array<std::array<int, 2>, 2> kConfusablePairs = {{{0, 1}, {2, 3}}};
inline bool is_cue_class(int c) { return c == kMoveLeftCue || c == kMoveRightCue; }

struct SynthConfig {
  int64_t frames = 8;    // T
  int64_t height = 32;   // H after cropping
  int64_t width = 32;    // W after cropping
  int64_t channels = 3;  // C_img
  int64_t margin = 4;    // generation adds this many pixels per axis
  int64_t train_count = 600;
  int64_t test_count = 200;
  double boundary_fraction = 0.3;
  double noise_sigma = 0.03;
  uint64_t seed = 42;

  int64_t gen_height() const { return height + margin; }
  int64_t gen_width() const { return width + margin; }
  void validate() const;

  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

// one synthetic video at generation resolution, plus per-frame annotations
struct SequenceSample {
  Tensor video;  // [T, gen_h, gen_w, C], values in [0,1]
  std::vector<int> frame_labels;
  std::vector<uint8_t> boundary_flags;  // true within +-1 frame of a switch
};

// deterministic per-sequence recipe derived from the dataset seed and index
struct SequencePlan {
  int class_a = 0;
  int class_b = -1;      // -1: single behavior
  int switch_frame = -1; // first frame of class_b
};
SequencePlan plan_sequence(const SynthConfig& cfg, int64_t split_index, int64_t global_index,
                           bool with_switch);

SequenceSample render_sequence(const SequencePlan& plan, const SynthConfig& cfg, uint64_t seq_seed);

// train/test blobs + JSON manifest; every sequence regenerable from
// (cfg.seed ^ global_index) alone
void generate_dataset(const SynthConfig& cfg, const std::string& out_dir);

// regenerate one sequence exactly as the blob stores it
SequenceSample regenerate_sequence(const SynthConfig& cfg, int64_t global_index);

class DatasetReader {
 public:
  static DatasetReader open(const std::string& dir, const std::string& split);

  int64_t count() const { return count_; }
  const SynthConfig& config() const { return cfg_; }
  const nlohmann::json& manifest() const { return manifest_; }

  struct Batch {
    Tensor videos;                   // [B, T, H, W, C] cropped to training size
    std::vector<int> labels;         // B*T, row-major (sequence, frame)
    std::vector<uint8_t> boundary;   // B*T
  };
  // augment: random crop + per-channel brightness jitter +-0.1 + temporal
  // jitter of +-1 frame, all derived from (seed, index); otherwise center
  // crop with no jitter
  Batch load_batch(const std::vector<int64_t>& indices, bool augment, uint64_t seed) const;

  // stored (uncropped) sequence, for probes and inspection
  SequenceSample sequence(int64_t index) const;

 private:
  SynthConfig cfg_;
  nlohmann::json manifest_;
  int64_t count_ = 0;
  int64_t frame_values_ = 0;  // gen_h * gen_w * channels
  std::vector<float> videos_;
  std::vector<uint16_t> labels_;
  std::vector<uint8_t> flags_;
};

}  // namespace sdl
