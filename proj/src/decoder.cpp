#include "sdl/decoder.hpp"

namespace sdl {

TemporalDecoder::TemporalDecoder(const EncoderConfig& cfg, ParamStore& store, Rng& rng)
    : cfg_(cfg) {
  const int64_t d = cfg_.tubelet.dim;
  const int64_t patch_flat = cfg_.tubelet.patch * cfg_.tubelet.patch * cfg_.channels;
  Tensor w({d, patch_flat});
  for (double& v : w.data) v = 0.02 * rng.normal();
  w_ = store.add("decoder.proj.weight", std::move(w));
  b_ = store.add("decoder.proj.bias", Tensor::zeros({patch_flat}));
}

int64_t TemporalDecoder::param_count(const EncoderConfig& cfg) {
  const int64_t patch_flat = cfg.tubelet.patch * cfg.tubelet.patch * cfg.channels;
  return cfg.tubelet.dim * patch_flat + patch_flat;
}

const TemporalDecoder::Maps& TemporalDecoder::maps(int64_t batch) const {
  auto it = map_cache_.find(batch);
  if (it != map_cache_.end()) return it->second;

  const int64_t nt = cfg_.t_slices(), nh = cfg_.grid_h(), nw = cfg_.grid_w();
  const int64_t P = cfg_.tubelet.patch, C = cfg_.channels;
  const int64_t sites = nh * nw;

  Maps m;
  auto rows = std::make_shared<std::vector<int64_t>>();
  rows->reserve(static_cast<size_t>(batch * sites));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t s = 0; s < sites; ++s) rows->push_back((b * nt + (nt - 1)) * sites + s);
  m.last_slice_rows = std::move(rows);

  // image pixel (b, y, x, c) <- patch row (b, gh, gw), entry (py, px, c)
  const int64_t patch_flat = P * P * C;
  auto tile = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(batch * cfg_.height * cfg_.width * C));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t y = 0; y < cfg_.height; ++y)
      for (int64_t x = 0; x < cfg_.width; ++x)
        for (int64_t c = 0; c < C; ++c) {
          int64_t gh = y / P, py = y % P, gw = x / P, px = x % P;
          int64_t src_row = b * sites + gh * nw + gw;
          int64_t src_col = (py * P + px) * C + c;
          (*tile)[static_cast<size_t>(((b * cfg_.height + y) * cfg_.width + x) * C + c)] =
              src_row * patch_flat + src_col;
        }
  m.tiling = std::move(tile);

  return map_cache_.emplace(batch, std::move(m)).first->second;
}

Tensor TemporalDecoder::decode_last_frame(ParamCtx& ctx, const TokenGrid& z) const {
  require(z.d == cfg_.tubelet.dim && z.n_h == cfg_.grid_h() && z.n_w == cfg_.grid_w() &&
              z.n_t == cfg_.t_slices(),
          Err::ShapeMismatch, "token grid does not match the decoder config");
  const Maps& m = maps(z.batch);
  Tape& t = ctx.tape();
  Tensor last = t.gather_rows(z.tokens, m.last_slice_rows);
  Tensor patches = t.add_bias(t.matmul(last, ctx(w_)), ctx(b_));
  return t.gather(patches, m.tiling, {z.batch, cfg_.height, cfg_.width, cfg_.channels});
}

Tensor TemporalDecoder::rec_loss(Tape& tape, const Tensor& reconstructed, const Tensor& target) {
  require(reconstructed.same_shape(target), Err::ShapeMismatch,
          "rec_loss: image shapes differ, " + reconstructed.shape_str() + " vs " +
              target.shape_str());
  return tape.mse_loss(reconstructed, target);
}

}  // namespace sdl
