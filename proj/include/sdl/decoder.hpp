#pragma once

#include <map>
#include <memory>

#include "sdl/encoder.hpp"

namespace sdl {

// Training-only reconstruction head: a linear per-token map from the final
// temporal slice back to image patches, tiled into the last input frame.
class TemporalDecoder {
 public:
  TemporalDecoder(const EncoderConfig& cfg, ParamStore& store, Rng& init_rng);

  // z: encoder output grid -> reconstructed last frame [B, H, W, C]
  Tensor decode_last_frame(ParamCtx& ctx, const TokenGrid& z) const;

  // mean squared error over all pixels and batch items
  static Tensor rec_loss(Tape& tape, const Tensor& reconstructed, const Tensor& target);

  static int64_t param_count(const EncoderConfig& cfg);

  int weight_id() const { return w_; }
  int bias_id() const { return b_; }

 private:
  EncoderConfig cfg_;
  int w_ = -1, b_ = -1;

  struct Maps {
    std::shared_ptr<std::vector<int64_t>> last_slice_rows;  // token rows of slice n_t-1
    std::shared_ptr<std::vector<int64_t>> tiling;           // patch entries -> image pixels
  };
  const Maps& maps(int64_t batch) const;
  mutable std::map<int64_t, Maps> map_cache_;
};

}  // namespace sdl
