#pragma once

#include <optional>
#include <set>

#include "sdl/checkpoint.hpp"
#include "sdl/decoder.hpp"
#include "sdl/discovery.hpp"
#include "sdl/encoder.hpp"
#include "sdl/synthdata.hpp"

namespace sdl {

struct TrainConfig {
  int epochs = 40;
  double base_lr = 3e-4;
  double weight_decay = 0.01;
  int64_t batch_size = 8;
  double lambda_rec = 0.1;   // weight of the reconstruction loss
  double lambda_dict = 0.5;  // weight of the dictionary loss
  double gate_fraction = 0.10;
  uint64_t seed = 1;
  bool temporal_discovery = true;
  bool sample_discovery = true;
  EncoderConfig model;  // frames/height/width/channels/classes come from the dataset
  SdmConfig sdm;        // gate_epoch derived from gate_fraction * epochs

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// encoder + decoder share one parameter store; the dictionary lives beside
// them (EMA statistics plus gradient updates from the dictionary loss only)
struct SdlModel {
  EncoderConfig cfg;
  ParamStore store;
  SttEncoder encoder;
  TemporalDecoder decoder;
  Dictionary dict;

  SdlModel(const EncoderConfig& c, uint64_t seed);

  Checkpoint to_checkpoint() const;
  void load_params(const Checkpoint& ck);
  static EncoderConfig config_from_checkpoint(const Checkpoint& ck);
};

struct AdamSlot {
  Tensor m, v;
};
struct OptimState {
  std::vector<AdamSlot> params;  // aligned with the store entries
  AdamSlot atoms;
  int64_t step = 0;
};

// decoupled weight decay (applied to the parameter, not through the gradient),
// bias-corrected moments, beta1=0.9 beta2=0.999 eps=1e-8
void adamw_step(Tensor& param, const Tensor& grad, AdamSlot& slot, int64_t step, double lr,
                double weight_decay);

// base_lr * 0.5 * (1 + cos(pi * epoch / (total-1))), no warmup
double cosine_lr(int epoch, int total_epochs, double base_lr);

// Weighted-CE term is mean-normalized over the frames in the batch so the
// lambda weights stay batch-size independent. Disabled terms contribute
// exactly zero and leave their parameters off the tape.
struct JointLoss {
  Tensor total;
  double ce = 0.0, rec = 0.0, dict = 0.0;  // raw component values
};
JointLoss joint_loss(Tape& tape, const Tensor& logits, const std::vector<int>& frame_labels,
                     const std::vector<double>& frame_weights, const Tensor* reconstructed,
                     const Tensor* last_frames, const Tensor* atoms_leaf, const SdmConfig& sdm,
                     double lambda_rec, double lambda_dict);

struct EpochMetrics {
  int epoch;
  double lr, beta, ce, rec, dict, mean_w, train_acc;
};

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  std::string checkpoint_path;
  std::string metrics_path;
};

// Full training run: seeded shuffling and augmentation, epoch-gated sample
// discovery, cosine-decayed AdamW, per-epoch CSV metrics, final checkpoint
// with optimizer state for exact resume. Deterministic per seed.
TrainResult train(const TrainConfig& cfg, const DatasetReader& data, const std::string& out_dir,
                  const std::string& resume_checkpoint = "");

// test hook for the gate-equivalence check: when ema_only is set the
// feature/uncertainty path is compiled out of the step entirely
enum class SdVariant { full, ema_only };

struct StepOutcome {
  double ce, rec, dict, mean_w, acc;
};
StepOutcome train_step(SdlModel& model, OptimState& opt, const DatasetReader::Batch& batch,
                       const TrainConfig& cfg, const SdmConfig& sdm, int epoch, double lr,
                       SdVariant variant = SdVariant::full);

// Inference path: encoder + heads only, never recording, never touching the
// decoder or the dictionary (asserted through the parameter access trace).
class InferenceSession {
 public:
  explicit InferenceSession(const Checkpoint& ck);
  static InferenceSession from_file(const std::string& path);

  struct Output {
    Tensor logits;    // [B*T, classes]
    Tensor features;  // [B*n_t, d]
  };
  Output run(const Tensor& videos);

  const EncoderConfig& config() const { return model_.cfg; }
  const std::set<std::string>& accessed() const { return accessed_; }
  int64_t param_count() const;  // encoder + heads entries actually used

 private:
  SdlModel model_;
  std::set<std::string> accessed_;
};

}  // namespace sdl
