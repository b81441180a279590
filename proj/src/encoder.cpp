#include "sdl/encoder.hpp"

namespace sdl {

void EncoderConfig::validate() const {
  require(frames > 0 && height > 0 && width > 0 && channels > 0, Err::InvalidDims,
          "video dimensions must be positive");
  require(tubelet.patch > 0 && tubelet.patch_frames > 0 && tubelet.dim > 0, Err::InvalidDims,
          "tubelet dimensions must be positive");
  require(height % tubelet.patch == 0 && width % tubelet.patch == 0,
          Err::IndivisibleDimensions, "height/width must be divisible by the patch size");
  require(frames % tubelet.patch_frames == 0, Err::IndivisibleDimensions,
          "frame count must be divisible by the temporal patch depth");
  require(heads > 0 && tubelet.dim % heads == 0, Err::InvalidDims,
          "embedding width must be divisible by the head count");
  require(blocks > 0, Err::InvalidDims, "at least one block required");
  require(classes >= 2, Err::InvalidDims, "at least two classes required");
}

namespace {

Tensor gaussian(Rng& rng, std::vector<int64_t> shape, double sigma) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = sigma * rng.normal();
  return t;
}

}  // namespace

SttEncoder::SttEncoder(EncoderConfig cfg, ParamStore& store, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int64_t d = cfg_.tubelet.dim;
  const double sigma = 0.02;

  ids_.tubelet_w = store.add("encoder.tubelet.weight", gaussian(rng, {cfg_.tubelet_flat(), d}, sigma));
  ids_.tubelet_b = store.add("encoder.tubelet.bias", Tensor::zeros({d}));
  ids_.pos = store.add("encoder.pos", gaussian(rng, {cfg_.tokens(), d}, sigma));

  for (int64_t b = 0; b < cfg_.blocks; ++b) {
    std::string base = "encoder.block" + std::to_string(b) + ".";
    EncoderParams::Block blk;
    blk.ln1_g = store.add(base + "ln1.gamma", Tensor::full({d}, 1.0));
    blk.ln1_b = store.add(base + "ln1.beta", Tensor::zeros({d}));
    blk.spatial.wq = store.add(base + "spatial.wq", gaussian(rng, {d, d}, sigma));
    blk.spatial.wk = store.add(base + "spatial.wk", gaussian(rng, {d, d}, sigma));
    blk.spatial.wv = store.add(base + "spatial.wv", gaussian(rng, {d, d}, sigma));
    // residual-branch output projections start at zero: fresh blocks are near-identity
    blk.spatial.wo = store.add(base + "spatial.wo", Tensor::zeros({d, d}));
    blk.ln2_g = store.add(base + "ln2.gamma", Tensor::full({d}, 1.0));
    blk.ln2_b = store.add(base + "ln2.beta", Tensor::zeros({d}));
    blk.temporal.wq = store.add(base + "temporal.wq", gaussian(rng, {d, d}, sigma));
    blk.temporal.wk = store.add(base + "temporal.wk", gaussian(rng, {d, d}, sigma));
    blk.temporal.wv = store.add(base + "temporal.wv", gaussian(rng, {d, d}, sigma));
    blk.temporal.wo = store.add(base + "temporal.wo", Tensor::zeros({d, d}));
    blk.ln3_g = store.add(base + "ln3.gamma", Tensor::full({d}, 1.0));
    blk.ln3_b = store.add(base + "ln3.beta", Tensor::zeros({d}));
    blk.mlp_w1 = store.add(base + "mlp.w1", gaussian(rng, {d, 4 * d}, sigma));
    blk.mlp_b1 = store.add(base + "mlp.b1", Tensor::zeros({4 * d}));
    blk.mlp_w2 = store.add(base + "mlp.w2", Tensor::zeros({4 * d, d}));
    blk.mlp_b2 = store.add(base + "mlp.b2", Tensor::zeros({d}));
    ids_.blocks.push_back(blk);
  }

  const int64_t slice_feat = cfg_.spatial_sites() * d;
  for (int64_t t = 0; t < cfg_.t_slices(); ++t) {
    std::string base = "heads.t" + std::to_string(t) + ".";
    ids_.head_w.push_back(store.add(base + "weight", gaussian(rng, {slice_feat, cfg_.classes}, sigma)));
    ids_.head_b.push_back(store.add(base + "bias", Tensor::zeros({cfg_.classes})));
  }
}

int64_t SttEncoder::param_count(const EncoderConfig& cfg) {
  const int64_t d = cfg.tubelet.dim;
  int64_t n = cfg.tubelet_flat() * d + d;  // tubelet projection + bias
  n += cfg.tokens() * d;                   // positional embedding
  int64_t per_block = 6 * d               // three LN gamma/beta pairs
                      + 2 * 4 * d * d     // spatial + temporal q/k/v/o
                      + d * 4 * d + 4 * d + 4 * d * d + d;  // MLP
  n += cfg.blocks * per_block;
  n += cfg.t_slices() * (cfg.spatial_sites() * d * cfg.classes + cfg.classes);
  return n;
}

const SttEncoder::Maps& SttEncoder::maps(int64_t batch) const {
  auto it = map_cache_.find(batch);
  if (it != map_cache_.end()) return it->second;

  const int64_t T = cfg_.frames, H = cfg_.height, W = cfg_.width, C = cfg_.channels;
  const int64_t P = cfg_.tubelet.patch, Pt = cfg_.tubelet.patch_frames;
  const int64_t nt = cfg_.t_slices(), nh = cfg_.grid_h(), nw = cfg_.grid_w();
  const int64_t flat = cfg_.tubelet_flat();

  Maps m;
  // video [B,T,H,W,C] -> tubelet rows [B*N, P_t*P*P*C], inner order (pt, py, px, c)
  auto tub = std::make_shared<std::vector<int64_t>>();
  tub->reserve(static_cast<size_t>(batch * cfg_.tokens() * flat));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t ts = 0; ts < nt; ++ts)
      for (int64_t gh = 0; gh < nh; ++gh)
        for (int64_t gw = 0; gw < nw; ++gw)
          for (int64_t pt = 0; pt < Pt; ++pt)
            for (int64_t py = 0; py < P; ++py)
              for (int64_t px = 0; px < P; ++px)
                for (int64_t c = 0; c < C; ++c)
                  tub->push_back(((((b * T + ts * Pt + pt) * H + gh * P + py) * W + gw * P + px) * C) + c);
  m.tubelet = std::move(tub);

  // (b,t,h,w) -> (b,h,w,t) and back
  auto fwd = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(batch * cfg_.tokens()));
  auto inv = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(batch * cfg_.tokens()));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < nh; ++h)
      for (int64_t w = 0; w < nw; ++w)
        for (int64_t t = 0; t < nt; ++t) {
          int64_t grouped = ((b * nh + h) * nw + w) * nt + t;
          int64_t canonical = ((b * nt + t) * nh + h) * nw + w;
          (*fwd)[static_cast<size_t>(grouped)] = canonical;
          (*inv)[static_cast<size_t>(canonical)] = grouped;
        }
  m.to_temporal = std::move(fwd);
  m.from_temporal = std::move(inv);

  for (int64_t t = 0; t < nt; ++t) {
    auto rows = std::make_shared<std::vector<int64_t>>();
    for (int64_t b = 0; b < batch; ++b) rows->push_back(b * nt + t);
    m.slice_rows.push_back(std::move(rows));
  }
  auto reorder = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(batch * nt));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t t = 0; t < nt; ++t)
      (*reorder)[static_cast<size_t>(b * nt + t)] = t * batch + b;
  m.slice_reorder = std::move(reorder);

  auto rep = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(batch * T));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t f = 0; f < T; ++f)
      (*rep)[static_cast<size_t>(b * T + f)] = b * nt + f / Pt;
  m.frame_replicate = std::move(rep);

  return map_cache_.emplace(batch, std::move(m)).first->second;
}

TokenGrid SttEncoder::tubelet_embed(ParamCtx& ctx, const Tensor& videos) const {
  require(videos.ndim() == 5, Err::ShapeMismatch, "videos must be [B,T,H,W,C]");
  require(videos.dim(1) == cfg_.frames && videos.dim(2) == cfg_.height &&
              videos.dim(3) == cfg_.width && videos.dim(4) == cfg_.channels,
          Err::ShapeMismatch, "video shape does not match the encoder config");
  int64_t batch = videos.dim(0);
  const Maps& m = maps(batch);
  Tape& t = ctx.tape();

  Tensor flat = t.gather(videos, m.tubelet, {batch * cfg_.tokens(), cfg_.tubelet_flat()});
  Tensor z = t.add_bias(t.matmul(flat, ctx(ids_.tubelet_w)), ctx(ids_.tubelet_b));
  z = t.tile_rows_add(z, ctx(ids_.pos));

  TokenGrid grid;
  grid.tokens = std::move(z);
  grid.batch = batch;
  grid.n_t = cfg_.t_slices();
  grid.n_h = cfg_.grid_h();
  grid.n_w = cfg_.grid_w();
  grid.d = cfg_.tubelet.dim;
  return grid;
}

TokenGrid SttEncoder::encoder_block(ParamCtx& ctx, const TokenGrid& z, int level) const {
  require(level >= 0 && level < static_cast<int>(ids_.blocks.size()), Err::IndexOutOfRange,
          "encoder block level out of range");
  const auto& blk = ids_.blocks[static_cast<size_t>(level)];
  const Maps& m = maps(z.batch);
  Tape& t = ctx.tape();

  // spatial attention among tokens of the same temporal slice
  Tensor x = t.layer_norm(z.tokens, ctx(blk.ln1_g), ctx(blk.ln1_b));
  Tensor attn = t.grouped_attention(t.matmul(x, ctx(blk.spatial.wq)),
                                    t.matmul(x, ctx(blk.spatial.wk)),
                                    t.matmul(x, ctx(blk.spatial.wv)), z.batch * z.n_t, cfg_.heads);
  Tensor y_s = t.add(z.tokens, t.matmul(attn, ctx(blk.spatial.wo)));

  // temporal attention among tokens at the same spatial site
  Tensor x2 = t.gather_rows(t.layer_norm(y_s, ctx(blk.ln2_g), ctx(blk.ln2_b)), m.to_temporal);
  Tensor attn_t = t.grouped_attention(t.matmul(x2, ctx(blk.temporal.wq)),
                                      t.matmul(x2, ctx(blk.temporal.wk)),
                                      t.matmul(x2, ctx(blk.temporal.wv)),
                                      z.batch * z.n_h * z.n_w, cfg_.heads);
  Tensor proj_t = t.gather_rows(t.matmul(attn_t, ctx(blk.temporal.wo)), m.from_temporal);
  Tensor y_t = t.add(y_s, proj_t);

  Tensor x3 = t.layer_norm(y_t, ctx(blk.ln3_g), ctx(blk.ln3_b));
  Tensor h = t.gelu(t.add_bias(t.matmul(x3, ctx(blk.mlp_w1)), ctx(blk.mlp_b1)));
  Tensor out = t.add(y_t, t.add_bias(t.matmul(h, ctx(blk.mlp_w2)), ctx(blk.mlp_b2)));

  TokenGrid next = z;
  next.tokens = std::move(out);
  return next;
}

TokenGrid SttEncoder::forward(ParamCtx& ctx, const Tensor& videos) const {
  TokenGrid z = tubelet_embed(ctx, videos);
  for (int l = 0; l < static_cast<int>(cfg_.blocks); ++l) z = encoder_block(ctx, z, l);
  return z;
}

Tensor SttEncoder::frame_logits(ParamCtx& ctx, const TokenGrid& z) const {
  const Maps& m = maps(z.batch);
  Tape& t = ctx.tape();
  int64_t slice_feat = cfg_.spatial_sites() * cfg_.tubelet.dim;

  Tensor slices = t.reshape(z.tokens, {z.batch * z.n_t, slice_feat});
  std::vector<Tensor> per_slice;
  for (int64_t ts = 0; ts < z.n_t; ++ts) {
    Tensor rows = t.gather_rows(slices, m.slice_rows[static_cast<size_t>(ts)]);
    per_slice.push_back(t.add_bias(t.matmul(rows, ctx(ids_.head_w[static_cast<size_t>(ts)])),
                                   ctx(ids_.head_b[static_cast<size_t>(ts)])));
  }
  Tensor stacked = t.concat_rows(per_slice);                 // rows ordered (slice, b)
  Tensor ordered = t.gather_rows(stacked, m.slice_reorder);  // rows ordered (b, slice)
  return t.gather_rows(ordered, m.frame_replicate);          // rows ordered (b, frame)
}

Tensor SttEncoder::frame_features(Tape& tape, const TokenGrid& z) const {
  Tensor grouped =
      tape.reshape(z.tokens, {z.batch * z.n_t, z.n_h * z.n_w, z.d});
  return tape.mean_axis(grouped, 1);
}

std::vector<int> slice_majority_labels(const std::vector<int>& frame_labels, int64_t frames,
                                       int64_t patch_frames) {
  require(static_cast<int64_t>(frame_labels.size()) % frames == 0, Err::ShapeMismatch,
          "frame label count must be a multiple of the frame count");
  int64_t nt = frames / patch_frames;
  int64_t batch = static_cast<int64_t>(frame_labels.size()) / frames;
  std::vector<int> out;
  out.reserve(static_cast<size_t>(batch * nt));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t ts = 0; ts < nt; ++ts) {
      // count occurrences within the slice; earlier frame wins ties
      int best = -1, best_count = 0;
      for (int64_t i = 0; i < patch_frames; ++i) {
        int cand = frame_labels[static_cast<size_t>(b * frames + ts * patch_frames + i)];
        int count = 0;
        for (int64_t j = 0; j < patch_frames; ++j)
          if (frame_labels[static_cast<size_t>(b * frames + ts * patch_frames + j)] == cand) ++count;
        if (count > best_count) {
          best = cand;
          best_count = count;
        }
      }
      out.push_back(best);
    }
  return out;
}

}  // namespace sdl
