#pragma once

#include "sdl/params.hpp"
#include "sdl/rng.hpp"
#include "sdl/tape.hpp"

namespace sdl {

// Per-class reference atoms, EMA-tracked during training and repelled from
// each other by the angular-margin dictionary loss.
struct Dictionary {
  Tensor atoms;  // [C_cls, D]
  int last_update_epoch = -1;
};

struct SdmConfig {
  double alpha = 0.9;       // feature update rate
  double beta0 = 0.1;       // dictionary EMA rate at epoch 0
  double beta_min = 0.01;   // dictionary EMA rate at the final epoch
  int gate_epoch = 4;       // feature/uncertainty path opens at this epoch
  double scale = 30.0;      // s
  double margin_mult = 1.0; // m; inert because the target angle is the
                            // self-angle (cos(m*0) == 1 for every m)
  double delta = 0.35;      // additive margin
  double weight_floor = 0.5;
  double weight_ceil = 1.0;

  void validate() const {
    require(alpha >= 0.0 && alpha <= 1.0, Err::InvalidConfig, "alpha must lie in [0,1]");
    require(beta_min >= 0.0 && beta_min <= beta0 && beta0 <= 1.0, Err::InvalidConfig,
            "require 0 <= beta_min <= beta0 <= 1");
    require(gate_epoch >= 0, Err::InvalidConfig, "gate_epoch must be non-negative");
    require(weight_floor < weight_ceil, Err::InvalidConfig,
            "weight_floor must be below weight_ceil");
  }
};

// rows drawn from a unit Gaussian, then scaled to unit Euclidean norm
Dictionary init_dictionary(int64_t c_cls, int64_t d, uint64_t seed);

// F' = (1-alpha) F + alpha S_y; gate must be open
Tensor feature_update(const Tensor& f, const Dictionary& dict, int y, const SdmConfig& cfg,
                      int epoch);

// mu = 1 - cos(f, s_y), in [0, 2]
double uncertainty(const Tensor& f, const Tensor& atom);

// w = clamp(1 - mu, floor, ceil)
double sample_weight(double mu, const SdmConfig& cfg = SdmConfig{});

// S_y' = (1-beta) S_y + beta f; touches only row y, outside gradient tracking
void dictionary_update(Dictionary& dict, const Tensor& f, int y, double beta);

// linear decay from beta0 at epoch 0 to beta_min at the final epoch
double beta_schedule(int epoch, int total_epochs, const SdmConfig& cfg);

// Angular-margin repulsion over the atoms: mean over rows of
//   -log( e^{s(cos(m*0) - delta)} / (e^{s(cos(m*0) - delta)} + sum_{j!=i} e^{s cos(theta_ij)}) )
// with theta_ij the angle between unit-normalized atoms. Differentiable in `atoms`.
Tensor dict_loss(Tape& tape, const Tensor& atoms, const SdmConfig& cfg);
double dict_loss_value(const Dictionary& dict, const SdmConfig& cfg);

struct SdPassResult {
  Tensor features;             // [n, D]; bit-equal to the input before the gate opens
  std::vector<double> mu;      // 0 for skipped rows (background / gate closed)
  std::vector<double> weights; // 1 for skipped rows
};

// Alg. "sample discovery": per row, feature update -> uncertainty estimate ->
// dictionary update, sequential over rows. Before gate_epoch only the EMA
// dictionary update runs. Rows labeled `background_class` never interact with
// the dictionary and keep weight 1; pass a negative value to disable skipping.
SdPassResult sample_discovery_pass(const Tensor& features, const std::vector<int>& labels,
                                   Dictionary& dict, int epoch, int total_epochs,
                                   const SdmConfig& cfg, int background_class);

}  // namespace sdl
