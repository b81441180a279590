#include "sdl/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace sdl {

const std::array<const char*, kNumClasses> kClassNames = {
    "move_left_cue", "move_left", "move_right_cue", "move_right", "straight", "background"};

namespace {

// scene constants at generation resolution
constexpr double kBackgroundLevel = 0.35;
constexpr double kSquareLevel = 0.9;
constexpr double kStripeAmplitude = 0.25;
constexpr int64_t kSquareSide = 8;
constexpr int64_t kStripeBandStart = 6;  // always inside any crop window
constexpr int64_t kStripeBandLen = 8;
constexpr int64_t kPosMin = 4;   // square kept inside every crop window
constexpr int64_t kPosMax = 24;

struct Motion {
  int64_t dx, dy;
};

Motion class_motion(int c) {
  switch (c) {
    case kMoveLeftCue:
    case kMoveLeft: return {-2, 0};
    case kMoveRightCue:
    case kMoveRight: return {2, 0};
    case kStraight: return {0, 2};
    case kBackground: return {0, 0};
    default: fail(Err::InvalidClass, "unknown class id " + std::to_string(c));
  }
}

void class_start(int c, int64_t jx, int64_t jy, int64_t& x, int64_t& y) {
  switch (c) {
    case kMoveLeftCue:
    case kMoveLeft:
      x = 22 + jx;
      y = 16 + jy;
      return;
    case kMoveRightCue:
    case kMoveRight:
      x = 6 + jx;
      y = 16 + jy;
      return;
    case kStraight:
      x = 14 + jx;
      y = 6 + jy;
      return;
    case kBackground:
      x = 14 + jx;
      y = 16 + jy;
      return;
    default: fail(Err::InvalidClass, "unknown class id " + std::to_string(c));
  }
}

void put_u32_le(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32_le(const unsigned char* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
  return v;
}

// count of switch-carrying sequences among the first i via an even spread
bool has_switch(int64_t i, double fraction) {
  auto steps = [&](int64_t k) {
    return static_cast<int64_t>(std::floor(static_cast<double>(k) * fraction + 1e-12));
  };
  return steps(i + 1) > steps(i);
}

}  // namespace

void SynthConfig::validate() const {
  require(frames >= 2, Err::InvalidConfig, "frames must be at least 2");
  require(height > 0 && width > 0 && channels > 0, Err::InvalidConfig,
          "height/width/channels must be positive");
  require(margin >= 0, Err::InvalidConfig, "margin must be non-negative");
  require(train_count > 0 && test_count > 0, Err::InvalidConfig, "split counts must be positive");
  require(boundary_fraction >= 0.0 && boundary_fraction <= 1.0, Err::InvalidConfig,
          "boundary_fraction must lie in [0,1]");
  require(noise_sigma >= 0.0, Err::InvalidConfig, "noise_sigma must be non-negative");
  require(gen_height() >= kSquareSide + kPosMin && gen_width() >= kSquareSide + kPosMin,
          Err::InvalidConfig, "canvas too small for the moving square");
}

nlohmann::json SynthConfig::to_json() const {
  return {{"frames", frames},
          {"height", height},
          {"width", width},
          {"channels", channels},
          {"margin", margin},
          {"train_count", train_count},
          {"test_count", test_count},
          {"boundary_fraction", boundary_fraction},
          {"noise_sigma", noise_sigma},
          {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig cfg;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "frames") cfg.frames = it->get<int64_t>();
      else if (k == "height") cfg.height = it->get<int64_t>();
      else if (k == "width") cfg.width = it->get<int64_t>();
      else if (k == "channels") cfg.channels = it->get<int64_t>();
      else if (k == "margin") cfg.margin = it->get<int64_t>();
      else if (k == "train_count") cfg.train_count = it->get<int64_t>();
      else if (k == "test_count") cfg.test_count = it->get<int64_t>();
      else if (k == "boundary_fraction") cfg.boundary_fraction = it->get<double>();
      else if (k == "noise_sigma") cfg.noise_sigma = it->get<double>();
      else if (k == "seed") cfg.seed = it->get<uint64_t>();
      else fail(Err::InvalidConfig, "unknown dataset config field '" + k + "'");
    } catch (const nlohmann::json::exception&) {
      fail(Err::InvalidConfig, "bad value for dataset config field '" + k + "'");
    }
  }
  cfg.validate();
  return cfg;
}

SequencePlan plan_sequence(const SynthConfig& cfg, int64_t split_index, int64_t global_index,
                           bool with_switch) {
  SequencePlan plan;
  plan.class_a = static_cast<int>(split_index % kNumClasses);
  if (with_switch) {
    Rng meta(mix_seed({cfg.seed ^ static_cast<uint64_t>(global_index),
                       static_cast<uint64_t>(Stream::DatasetMeta)}));
    // both segments keep at least two frames
    plan.switch_frame = 2 + static_cast<int>(meta.uniform_int(cfg.frames - 3));
    int other = static_cast<int>(meta.uniform_int(kNumClasses - 1));
    plan.class_b = other >= plan.class_a ? other + 1 : other;
  }
  return plan;
}

SequenceSample render_sequence(const SequencePlan& plan, const SynthConfig& cfg,
                               uint64_t seq_seed) {
  cfg.validate();
  require(plan.class_a >= 0 && plan.class_a < kNumClasses, Err::InvalidClass,
          "class_a out of range");
  if (plan.switch_frame >= 0) {
    require(plan.class_b >= 0 && plan.class_b < kNumClasses && plan.class_b != plan.class_a,
            Err::InvalidClass, "class_b invalid for a switching sequence");
    require(plan.switch_frame >= 1 && plan.switch_frame < cfg.frames, Err::InvalidClass,
            "switch_frame outside the sequence");
  }

  const int64_t T = cfg.frames, GH = cfg.gen_height(), GW = cfg.gen_width(), C = cfg.channels;
  Rng rng(mix_seed({seq_seed, static_cast<uint64_t>(Stream::DatasetVisual)}));

  // identical draw order regardless of class so that same-seed renders of a
  // confusable pair differ only where the cue stripe lands
  int64_t jx = rng.uniform_int(3);
  int64_t jy = rng.uniform_int(3);
  int64_t stripe_idx = rng.uniform_int(kStripeBandLen);
  int64_t bright_row = kStripeBandStart + stripe_idx;
  int64_t dark_row = kStripeBandStart + (stripe_idx + 1) % kStripeBandLen;

  SequenceSample s;
  s.video = Tensor({T, GH, GW, C});
  s.frame_labels.assign(static_cast<size_t>(T), plan.class_a);
  s.boundary_flags.assign(static_cast<size_t>(T), 0);
  if (plan.switch_frame >= 0) {
    for (int64_t f = plan.switch_frame; f < T; ++f)
      s.frame_labels[static_cast<size_t>(f)] = plan.class_b;
    for (int64_t f = plan.switch_frame - 1; f <= plan.switch_frame + 1; ++f)
      if (f >= 0 && f < T) s.boundary_flags[static_cast<size_t>(f)] = 1;
  }

  int64_t x, y;
  class_start(plan.class_a, jx, jy, x, y);

  for (int64_t f = 0; f < T; ++f) {
    int active = s.frame_labels[static_cast<size_t>(f)];
    if (f > 0) {
      Motion mv = class_motion(active);
      x = std::clamp(x + mv.dx, kPosMin, kPosMax);
      y = std::clamp(y + mv.dy, kPosMin, kPosMax);
    }
    double* frame = s.video.data.data() + f * GH * GW * C;
    for (int64_t p = 0; p < GH * GW * C; ++p) frame[p] = kBackgroundLevel;
    if (is_cue_class(active)) {
      for (int64_t gx = 0; gx < GW; ++gx)
        for (int64_t c = 0; c < C; ++c) {
          frame[(bright_row * GW + gx) * C + c] = kBackgroundLevel + kStripeAmplitude;
          frame[(dark_row * GW + gx) * C + c] = kBackgroundLevel - kStripeAmplitude;
        }
    }
    if (active != kBackground) {
      for (int64_t sy = y; sy < y + kSquareSide; ++sy)
        for (int64_t sx = x; sx < x + kSquareSide; ++sx)
          for (int64_t c = 0; c < C; ++c) frame[(sy * GW + sx) * C + c] = kSquareLevel;
    }
    for (int64_t p = 0; p < GH * GW * C; ++p)
      frame[p] = std::clamp(frame[p] + cfg.noise_sigma * rng.normal(), 0.0, 1.0);
  }
  return s;
}

SequenceSample regenerate_sequence(const SynthConfig& cfg, int64_t global_index) {
  cfg.validate();
  require(global_index >= 0 && global_index < cfg.train_count + cfg.test_count,
          Err::IndexOutOfRange, "sequence index outside the dataset");
  int64_t split_index = global_index < cfg.train_count ? global_index
                                                       : global_index - cfg.train_count;
  SequencePlan plan =
      plan_sequence(cfg, split_index, global_index, has_switch(split_index, cfg.boundary_fraction));
  return render_sequence(plan, cfg, cfg.seed ^ static_cast<uint64_t>(global_index));
}

void generate_dataset(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec, Err::IoError, "cannot create output directory " + out_dir);

  nlohmann::json manifest;
  manifest["config"] = cfg.to_json();
  manifest["gen_height"] = cfg.gen_height();
  manifest["gen_width"] = cfg.gen_width();
  manifest["classes"] = kClassNames;

  const int64_t frame_values = cfg.gen_height() * cfg.gen_width() * cfg.channels;
  auto write_split = [&](const std::string& name, int64_t count, int64_t global_base) {
    std::string blob;
    blob.reserve(static_cast<size_t>(count * (cfg.frames * frame_values * 4 + cfg.frames * 3)) + 24);
    blob.append("SDL1", 4);
    put_u32_le(blob, static_cast<uint32_t>(cfg.frames));
    put_u32_le(blob, static_cast<uint32_t>(cfg.gen_height()));
    put_u32_le(blob, static_cast<uint32_t>(cfg.gen_width()));
    put_u32_le(blob, static_cast<uint32_t>(cfg.channels));
    put_u32_le(blob, static_cast<uint32_t>(count));

    std::vector<int64_t> class_counts(kNumClasses, 0);
    for (int64_t i = 0; i < count; ++i) {
      int64_t global = global_base + i;
      SequencePlan plan = plan_sequence(cfg, i, global, has_switch(i, cfg.boundary_fraction));
      ++class_counts[static_cast<size_t>(plan.class_a)];
      SequenceSample s = render_sequence(plan, cfg, cfg.seed ^ static_cast<uint64_t>(global));
      for (double v : s.video.data) {
        float f = static_cast<float>(v);
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32_le(blob, bits);
      }
      for (int lab : s.frame_labels) {
        blob.push_back(static_cast<char>(lab & 0xff));
        blob.push_back(static_cast<char>((lab >> 8) & 0xff));
      }
      for (uint8_t b : s.boundary_flags) blob.push_back(static_cast<char>(b));
    }

    std::string path = out_dir + "/" + name + ".bin";
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), Err::IoError, "cannot open " + path + " for writing");
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    require(f.good(), Err::IoError, "short write to " + path);

    manifest["splits"][name] = {{"file", name + ".bin"},
                                {"count", count},
                                {"global_base", global_base},
                                {"class_counts", class_counts}};
  };

  write_split("train", cfg.train_count, 0);
  write_split("test", cfg.test_count, cfg.train_count);

  std::ofstream mf(out_dir + "/manifest.json");
  require(mf.good(), Err::IoError, "cannot write manifest in " + out_dir);
  mf << manifest.dump(2) << "\n";
  require(mf.good(), Err::IoError, "short write to manifest");
}

DatasetReader DatasetReader::open(const std::string& dir, const std::string& split) {
  std::ifstream mf(dir + "/manifest.json");
  require(mf.good(), Err::IoError, "cannot open " + dir + "/manifest.json");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    fail(Err::IoError, std::string("manifest parse failure: ") + e.what());
  }

  DatasetReader r;
  r.manifest_ = manifest;
  r.cfg_ = SynthConfig::from_json(manifest.at("config"));
  require(manifest.contains("splits") && manifest["splits"].contains(split), Err::IoError,
          "manifest has no split named " + split);
  std::string file = manifest["splits"][split]["file"].get<std::string>();

  std::ifstream bf(dir + "/" + file, std::ios::binary);
  require(bf.good(), Err::IoError, "cannot open " + dir + "/" + file);
  std::string raw((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  require(raw.size() >= 24 && std::memcmp(raw.data(), "SDL1", 4) == 0, Err::IoError,
          "bad blob magic in " + file);
  int64_t t = get_u32_le(p + 4), gh = get_u32_le(p + 8), gw = get_u32_le(p + 12),
          c = get_u32_le(p + 16), count = get_u32_le(p + 20);
  require(t == r.cfg_.frames && gh == r.cfg_.gen_height() && gw == r.cfg_.gen_width() &&
              c == r.cfg_.channels,
          Err::IoError, "blob header disagrees with the manifest config");
  r.count_ = count;
  r.frame_values_ = gh * gw * c;

  int64_t video_bytes = t * r.frame_values_ * 4;
  int64_t record_bytes = video_bytes + t * 2 + t;
  require(static_cast<int64_t>(raw.size()) == 24 + count * record_bytes, Err::IoError,
          "blob size mismatch in " + file);

  r.videos_.resize(static_cast<size_t>(count * t * r.frame_values_));
  r.labels_.resize(static_cast<size_t>(count * t));
  r.flags_.resize(static_cast<size_t>(count * t));
  const unsigned char* cur = p + 24;
  for (int64_t i = 0; i < count; ++i) {
    float* vdst = r.videos_.data() + i * t * r.frame_values_;
    for (int64_t k = 0; k < t * r.frame_values_; ++k) {
      uint32_t bits = get_u32_le(cur);
      std::memcpy(vdst + k, &bits, 4);
      cur += 4;
    }
    for (int64_t f = 0; f < t; ++f) {
      r.labels_[static_cast<size_t>(i * t + f)] =
          static_cast<uint16_t>(cur[0] | (static_cast<uint16_t>(cur[1]) << 8));
      cur += 2;
    }
    for (int64_t f = 0; f < t; ++f) r.flags_[static_cast<size_t>(i * t + f)] = *cur++;
  }
  return r;
}

SequenceSample DatasetReader::sequence(int64_t index) const {
  require(index >= 0 && index < count_, Err::IndexOutOfRange,
          "sequence index " + std::to_string(index) + " outside split of " +
              std::to_string(count_));
  SequenceSample s;
  const int64_t T = cfg_.frames;
  s.video = Tensor({T, cfg_.gen_height(), cfg_.gen_width(), cfg_.channels});
  const float* src = videos_.data() + index * T * frame_values_;
  for (int64_t k = 0; k < T * frame_values_; ++k) s.video.data[static_cast<size_t>(k)] = src[k];
  s.frame_labels.resize(static_cast<size_t>(T));
  s.boundary_flags.resize(static_cast<size_t>(T));
  for (int64_t f = 0; f < T; ++f) {
    s.frame_labels[static_cast<size_t>(f)] = labels_[static_cast<size_t>(index * T + f)];
    s.boundary_flags[static_cast<size_t>(f)] = flags_[static_cast<size_t>(index * T + f)];
  }
  return s;
}

DatasetReader::Batch DatasetReader::load_batch(const std::vector<int64_t>& indices, bool augment,
                                               uint64_t seed) const {
  const int64_t B = static_cast<int64_t>(indices.size());
  const int64_t T = cfg_.frames, H = cfg_.height, W = cfg_.width, C = cfg_.channels;
  const int64_t GH = cfg_.gen_height(), GW = cfg_.gen_width();

  Batch batch;
  batch.videos = Tensor({B, T, H, W, C});
  batch.labels.resize(static_cast<size_t>(B * T));
  batch.boundary.resize(static_cast<size_t>(B * T));

  std::vector<double> bright(static_cast<size_t>(C), 0.0);
  for (int64_t b = 0; b < B; ++b) {
    int64_t idx = indices[static_cast<size_t>(b)];
    require(idx >= 0 && idx < count_, Err::IndexOutOfRange,
            "batch index " + std::to_string(idx) + " outside split of " + std::to_string(count_));

    int64_t dt = 0, ox = cfg_.margin / 2, oy = cfg_.margin / 2;
    std::fill(bright.begin(), bright.end(), 0.0);
    if (augment) {
      Rng rng(mix_seed({seed, static_cast<uint64_t>(Stream::Augment),
                        static_cast<uint64_t>(idx)}));
      dt = rng.uniform_int(3) - 1;
      ox = rng.uniform_int(cfg_.margin + 1);
      oy = rng.uniform_int(cfg_.margin + 1);
      for (int64_t c = 0; c < C; ++c) bright[static_cast<size_t>(c)] = (rng.uniform() * 2.0 - 1.0) * 0.1;
    }

    const float* vsrc = videos_.data() + idx * T * frame_values_;
    for (int64_t f = 0; f < T; ++f) {
      int64_t sf = std::clamp(f + dt, static_cast<int64_t>(0), T - 1);
      batch.labels[static_cast<size_t>(b * T + f)] = labels_[static_cast<size_t>(idx * T + sf)];
      batch.boundary[static_cast<size_t>(b * T + f)] = flags_[static_cast<size_t>(idx * T + sf)];
      const float* fsrc = vsrc + sf * frame_values_;
      double* fdst = batch.videos.data.data() + ((b * T + f) * H * W * C);
      for (int64_t yy = 0; yy < H; ++yy)
        for (int64_t xx = 0; xx < W; ++xx)
          for (int64_t c = 0; c < C; ++c) {
            double v = fsrc[((yy + oy) * GW + (xx + ox)) * C + c] + bright[static_cast<size_t>(c)];
            fdst[(yy * W + xx) * C + c] = std::clamp(v, 0.0, 1.0);
          }
    }
  }
  return batch;
}

}  // namespace sdl
