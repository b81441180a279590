#pragma once

#include <map>
#include <memory>

#include "sdl/params.hpp"
#include "sdl/rng.hpp"
#include "sdl/tape.hpp"

namespace sdl {

struct TubeletConfig {
  int64_t patch = 8;        // P, spatial patch side
  int64_t patch_frames = 2; // P_t, temporal patch depth
  int64_t dim = 64;         // d, embedding width
};

struct EncoderConfig {
  int64_t frames = 8;   // T
  int64_t height = 32;  // H
  int64_t width = 32;   // W
  int64_t channels = 3; // C_img
  TubeletConfig tubelet;
  int64_t heads = 4;
  int64_t blocks = 2;
  int64_t classes = 6;  // C_cls

  int64_t t_slices() const { return frames / tubelet.patch_frames; }   // n_t
  int64_t grid_h() const { return height / tubelet.patch; }            // n_h
  int64_t grid_w() const { return width / tubelet.patch; }             // n_w
  int64_t spatial_sites() const { return grid_h() * grid_w(); }
  int64_t tokens() const { return t_slices() * spatial_sites(); }      // N
  int64_t tubelet_flat() const {
    return tubelet.patch * tubelet.patch * tubelet.patch_frames * channels;
  }

  void validate() const;
};

// tokens laid out as [batch * n_t * n_h * n_w, d], rows ordered (b, t, h, w)
struct TokenGrid {
  Tensor tokens;
  int64_t batch = 1, n_t = 0, n_h = 0, n_w = 0, d = 0;
};

struct EncoderParams {
  int tubelet_w = -1, tubelet_b = -1, pos = -1;
  struct Msa {
    int wq = -1, wk = -1, wv = -1, wo = -1;
  };
  struct Block {
    int ln1_g, ln1_b;
    Msa spatial;
    int ln2_g, ln2_b;
    Msa temporal;
    int ln3_g, ln3_b;
    int mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  };
  std::vector<Block> blocks;
  std::vector<int> head_w, head_b;  // one head per temporal slice
};

// Factorized spatial/temporal transformer: tubelet embedding with learned
// positional embeddings, per block spatial MSA -> temporal MSA -> MLP with
// pre-LN residuals, per-slice classification heads, mean-pooled per-slice
// features for the discovery stages.
class SttEncoder {
 public:
  SttEncoder(EncoderConfig cfg, ParamStore& store, Rng& init_rng);

  const EncoderConfig& config() const { return cfg_; }
  const EncoderParams& param_ids() const { return ids_; }

  // videos: [B, T, H, W, C] in [0,1]
  TokenGrid tubelet_embed(ParamCtx& ctx, const Tensor& videos) const;
  TokenGrid encoder_block(ParamCtx& ctx, const TokenGrid& z, int level) const;
  TokenGrid forward(ParamCtx& ctx, const Tensor& videos) const;
  // [B*T, classes], frames within a temporal slice share the slice logits
  Tensor frame_logits(ParamCtx& ctx, const TokenGrid& z) const;
  // [B*n_t, d]: mean over the spatial sites of each temporal slice
  Tensor frame_features(Tape& tape, const TokenGrid& z) const;

  // closed-form parameter count for the encoder + heads
  static int64_t param_count(const EncoderConfig& cfg);

  // index-map access shared with the decoder
  struct Maps {
    std::shared_ptr<std::vector<int64_t>> tubelet;
    std::shared_ptr<std::vector<int64_t>> to_temporal;
    std::shared_ptr<std::vector<int64_t>> from_temporal;
    std::vector<std::shared_ptr<std::vector<int64_t>>> slice_rows;
    std::shared_ptr<std::vector<int64_t>> slice_reorder;
    std::shared_ptr<std::vector<int64_t>> frame_replicate;
  };
  const Maps& maps(int64_t batch) const;

 private:
  EncoderConfig cfg_;
  EncoderParams ids_;
  mutable std::map<int64_t, Maps> map_cache_;
};

// majority label of each temporal slice; ties resolved toward the earlier frame
std::vector<int> slice_majority_labels(const std::vector<int>& frame_labels, int64_t frames,
                                       int64_t patch_frames);

}  // namespace sdl
