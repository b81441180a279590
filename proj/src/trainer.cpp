#include "sdl/trainer.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace sdl {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;

std::string fmt(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

Tensor last_frames_of(const Tensor& videos) {
  int64_t b = videos.dim(0), t = videos.dim(1);
  int64_t frame = videos.numel() / (b * t);
  Tensor out({b, videos.dim(2), videos.dim(3), videos.dim(4)});
  for (int64_t i = 0; i < b; ++i)
    std::copy_n(videos.data.begin() + ((i * t + (t - 1)) * frame), frame,
                out.data.begin() + i * frame);
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  require(epochs > 0, Err::InvalidConfig, "epochs must be positive");
  require(base_lr > 0.0, Err::InvalidConfig, "base_lr must be positive");
  require(weight_decay >= 0.0, Err::InvalidConfig, "weight_decay must be non-negative");
  require(batch_size > 0, Err::InvalidConfig, "batch_size must be positive");
  require(lambda_rec >= 0.0 && lambda_dict >= 0.0, Err::InvalidConfig,
          "loss weights must be non-negative");
  require(gate_fraction >= 0.0 && gate_fraction <= 1.0, Err::InvalidConfig,
          "gate_fraction must lie in [0,1]");
  sdm.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"base_lr", base_lr},
          {"weight_decay", weight_decay},
          {"batch_size", batch_size},
          {"lambda_rec", lambda_rec},
          {"lambda_dict", lambda_dict},
          {"gate_fraction", gate_fraction},
          {"seed", seed},
          {"temporal_discovery", temporal_discovery},
          {"sample_discovery", sample_discovery},
          {"model",
           {{"patch", model.tubelet.patch},
            {"patch_frames", model.tubelet.patch_frames},
            {"dim", model.tubelet.dim},
            {"heads", model.heads},
            {"blocks", model.blocks}}},
          {"sdm",
           {{"alpha", sdm.alpha},
            {"beta0", sdm.beta0},
            {"beta_min", sdm.beta_min},
            {"scale", sdm.scale},
            {"margin_mult", sdm.margin_mult},
            {"delta", sdm.delta},
            {"weight_floor", sdm.weight_floor},
            {"weight_ceil", sdm.weight_ceil}}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "epochs") cfg.epochs = it->get<int>();
      else if (k == "base_lr") cfg.base_lr = it->get<double>();
      else if (k == "weight_decay") cfg.weight_decay = it->get<double>();
      else if (k == "batch_size") cfg.batch_size = it->get<int64_t>();
      else if (k == "lambda_rec") cfg.lambda_rec = it->get<double>();
      else if (k == "lambda_dict") cfg.lambda_dict = it->get<double>();
      else if (k == "gate_fraction") cfg.gate_fraction = it->get<double>();
      else if (k == "seed") cfg.seed = it->get<uint64_t>();
      else if (k == "temporal_discovery") cfg.temporal_discovery = it->get<bool>();
      else if (k == "sample_discovery") cfg.sample_discovery = it->get<bool>();
      else if (k == "model") {
        for (auto m = it->begin(); m != it->end(); ++m) {
          const std::string& mk = m.key();
          if (mk == "patch") cfg.model.tubelet.patch = m->get<int64_t>();
          else if (mk == "patch_frames") cfg.model.tubelet.patch_frames = m->get<int64_t>();
          else if (mk == "dim") cfg.model.tubelet.dim = m->get<int64_t>();
          else if (mk == "heads") cfg.model.heads = m->get<int64_t>();
          else if (mk == "blocks") cfg.model.blocks = m->get<int64_t>();
          else fail(Err::InvalidConfig, "unknown model config field '" + mk + "'");
        }
      } else if (k == "sdm") {
        for (auto m = it->begin(); m != it->end(); ++m) {
          const std::string& mk = m.key();
          if (mk == "alpha") cfg.sdm.alpha = m->get<double>();
          else if (mk == "beta0") cfg.sdm.beta0 = m->get<double>();
          else if (mk == "beta_min") cfg.sdm.beta_min = m->get<double>();
          else if (mk == "scale") cfg.sdm.scale = m->get<double>();
          else if (mk == "margin_mult") cfg.sdm.margin_mult = m->get<double>();
          else if (mk == "delta") cfg.sdm.delta = m->get<double>();
          else if (mk == "weight_floor") cfg.sdm.weight_floor = m->get<double>();
          else if (mk == "weight_ceil") cfg.sdm.weight_ceil = m->get<double>();
          else fail(Err::InvalidConfig, "unknown sdm config field '" + mk + "'");
        }
      } else {
        fail(Err::InvalidConfig, "unknown training config field '" + k + "'");
      }
    } catch (const nlohmann::json::exception&) {
      fail(Err::InvalidConfig, "bad value for training config field '" + k + "'");
    }
  }
  return cfg;
}

SdlModel::SdlModel(const EncoderConfig& c, uint64_t seed)
    : cfg(c),
      store(),
      encoder([&] {
        Rng rng(mix_seed({seed, static_cast<uint64_t>(Stream::ParamInit)}));
        return SttEncoder(c, store, rng);
      }()),
      decoder([&] {
        Rng rng(mix_seed({seed, static_cast<uint64_t>(Stream::ParamInit), 1}));
        return TemporalDecoder(c, store, rng);
      }()),
      dict(init_dictionary(c.classes, c.tubelet.dim, seed)) {}

Checkpoint SdlModel::to_checkpoint() const {
  Checkpoint ck;
  for (size_t i = 0; i < store.size(); ++i) {
    const auto& e = store.entry(static_cast<int>(i));
    ck.put(e.name, e.value);
  }
  ck.put("dict.atoms", dict.atoms);
  ck.meta()["encoder_config"] = {{"frames", cfg.frames},
                                 {"height", cfg.height},
                                 {"width", cfg.width},
                                 {"channels", cfg.channels},
                                 {"patch", cfg.tubelet.patch},
                                 {"patch_frames", cfg.tubelet.patch_frames},
                                 {"dim", cfg.tubelet.dim},
                                 {"heads", cfg.heads},
                                 {"blocks", cfg.blocks},
                                 {"classes", cfg.classes}};
  ck.meta()["dict_last_update_epoch"] = dict.last_update_epoch;
  return ck;
}

EncoderConfig SdlModel::config_from_checkpoint(const Checkpoint& ck) {
  EncoderConfig cfg;
  try {
    const auto& j = ck.meta().at("encoder_config");
    cfg.frames = j.at("frames").get<int64_t>();
    cfg.height = j.at("height").get<int64_t>();
    cfg.width = j.at("width").get<int64_t>();
    cfg.channels = j.at("channels").get<int64_t>();
    cfg.tubelet.patch = j.at("patch").get<int64_t>();
    cfg.tubelet.patch_frames = j.at("patch_frames").get<int64_t>();
    cfg.tubelet.dim = j.at("dim").get<int64_t>();
    cfg.heads = j.at("heads").get<int64_t>();
    cfg.blocks = j.at("blocks").get<int64_t>();
    cfg.classes = j.at("classes").get<int64_t>();
    cfg.validate();
  } catch (const nlohmann::json::exception& e) {
    fail(Err::CheckpointCorrupt, std::string("missing encoder config: ") + e.what());
  }
  return cfg;
}

void SdlModel::load_params(const Checkpoint& ck) {
  for (size_t i = 0; i < store.size(); ++i) {
    auto& e = store.entry(static_cast<int>(i));
    const Tensor& t = ck.get(e.name);
    require(t.shape == e.value.shape, Err::CheckpointCorrupt,
            "checkpoint entry " + e.name + " has shape " + t.shape_str());
    e.value = t;
    e.value.node = -1;
  }
  const Tensor& atoms = ck.get("dict.atoms");
  require(atoms.shape == dict.atoms.shape, Err::CheckpointCorrupt,
          "checkpoint dictionary has shape " + atoms.shape_str());
  dict.atoms = atoms;
  dict.atoms.node = -1;
  if (ck.meta().contains("dict_last_update_epoch"))
    dict.last_update_epoch = ck.meta()["dict_last_update_epoch"].get<int>();
}

void adamw_step(Tensor& param, const Tensor& grad, AdamSlot& slot, int64_t step, double lr,
                double weight_decay) {
  require(param.same_shape(grad), Err::ShapeMismatch, "adamw_step: gradient shape mismatch");
  if (slot.m.data.empty()) {
    slot.m = Tensor::zeros(param.shape);
    slot.v = Tensor::zeros(param.shape);
  }
  require(slot.m.same_shape(param), Err::ShapeMismatch, "adamw_step: optimizer state mismatch");
  double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
  double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
  for (size_t i = 0; i < param.data.size(); ++i) {
    param.data[i] *= 1.0 - lr * weight_decay;
    double g = grad.data[i];
    slot.m.data[i] = kBeta1 * slot.m.data[i] + (1.0 - kBeta1) * g;
    slot.v.data[i] = kBeta2 * slot.v.data[i] + (1.0 - kBeta2) * g * g;
    double mhat = slot.m.data[i] / bc1;
    double vhat = slot.v.data[i] / bc2;
    param.data[i] -= lr * mhat / (std::sqrt(vhat) + kEps);
  }
}

double cosine_lr(int epoch, int total_epochs, double base_lr) {
  require(total_epochs > 0 && epoch >= 0 && epoch < total_epochs, Err::InvalidEpoch,
          "epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(total_epochs) + ")");
  if (total_epochs == 1) return base_lr;
  double x = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * x));
}

JointLoss joint_loss(Tape& tape, const Tensor& logits, const std::vector<int>& frame_labels,
                     const std::vector<double>& frame_weights, const Tensor* reconstructed,
                     const Tensor* last_frames, const Tensor* atoms_leaf, const SdmConfig& sdm,
                     double lambda_rec, double lambda_dict) {
  JointLoss out;
  Tensor total = tape.cross_entropy(logits, frame_labels, frame_weights);
  out.ce = total.data[0];
  if (reconstructed != nullptr) {
    require(last_frames != nullptr, Err::ShapeMismatch, "joint_loss: reconstruction target missing");
    Tensor rec = TemporalDecoder::rec_loss(tape, *reconstructed, *last_frames);
    out.rec = rec.data[0];
    total = tape.add(total, tape.scale(rec, lambda_rec));
  }
  if (atoms_leaf != nullptr) {
    Tensor dl = dict_loss(tape, *atoms_leaf, sdm);
    out.dict = dl.data[0];
    total = tape.add(total, tape.scale(dl, lambda_dict));
  }
  out.total = std::move(total);
  return out;
}

namespace {

StepOutcome train_step_impl(SdlModel& model, OptimState& opt, const DatasetReader::Batch& batch,
                            const TrainConfig& cfg, const SdmConfig& sdm, int epoch, double lr,
                            SdVariant variant) {
  const int64_t B = batch.videos.dim(0);
  const int64_t T = model.cfg.frames;
  const int64_t pt = model.cfg.tubelet.patch_frames;

  Tape tape(Tape::Mode::recording);
  ParamCtx ctx(tape, model.store);

  TokenGrid grid = model.encoder.forward(ctx, batch.videos);
  Tensor logits = model.encoder.frame_logits(ctx, grid);

  // per-frame loss weights from the discovery pass (slice weights repeated
  // over the frames of each slice)
  std::vector<double> frame_weights(static_cast<size_t>(B * T), 1.0);
  double mean_w = 1.0;
  if (cfg.sample_discovery) {
    Tensor features = model.encoder.frame_features(tape, grid);
    features.node = -1;  // Alg. inputs are detached statistics
    std::vector<int> slice_labels = slice_majority_labels(batch.labels, T, pt);
    if (variant == SdVariant::full) {
      SdPassResult pass = sample_discovery_pass(features, slice_labels, model.dict, epoch,
                                                cfg.epochs, sdm, kBackground);
      int64_t nt = T / pt;
      double acc = 0.0;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t f = 0; f < T; ++f)
          frame_weights[static_cast<size_t>(b * T + f)] =
              pass.weights[static_cast<size_t>(b * nt + f / pt)];
      for (double w : frame_weights) acc += w;
      mean_w = acc / static_cast<double>(frame_weights.size());
    } else {
      // feature/uncertainty path removed: EMA statistics still maintained
      double beta = beta_schedule(epoch, cfg.epochs, sdm);
      int64_t d = features.cols();
      Tensor row({d});
      for (int64_t i = 0; i < features.rows(); ++i) {
        int y = slice_labels[static_cast<size_t>(i)];
        if (y == kBackground) continue;
        for (int64_t j = 0; j < d; ++j) row.data[static_cast<size_t>(j)] = features.at2(i, j);
        dictionary_update(model.dict, row, y, beta);
      }
      model.dict.last_update_epoch = epoch;
    }
  }

  Tensor reconstructed, targets, atoms_leaf;
  const Tensor* rec_ptr = nullptr;
  const Tensor* tgt_ptr = nullptr;
  const Tensor* atoms_ptr = nullptr;
  if (cfg.temporal_discovery) {
    reconstructed = model.decoder.decode_last_frame(ctx, grid);
    targets = last_frames_of(batch.videos);
    rec_ptr = &reconstructed;
    tgt_ptr = &targets;
  }
  if (cfg.sample_discovery) {
    atoms_leaf = tape.leaf(model.dict.atoms, true);
    atoms_ptr = &atoms_leaf;
  }

  JointLoss loss = joint_loss(tape, logits, batch.labels, frame_weights, rec_ptr, tgt_ptr,
                              atoms_ptr, sdm, cfg.lambda_rec, cfg.lambda_dict);

  auto grads = tape.backward(loss.total);

  ++opt.step;
  if (opt.params.empty()) opt.params.resize(model.store.size());
  for (size_t i = 0; i < model.store.size(); ++i) {
    auto& entry = model.store.entry(static_cast<int>(i));
    int node = ctx.node_of(static_cast<int>(i));
    if (node >= 0) {
      adamw_step(entry.value, grads.at(node), opt.params[i], opt.step, lr, cfg.weight_decay);
    } else {
      adamw_step(entry.value, Tensor::zeros(entry.value.shape), opt.params[i], opt.step, lr,
                 cfg.weight_decay);
    }
  }
  if (atoms_ptr != nullptr)
    adamw_step(model.dict.atoms, grads.at(atoms_leaf.node), opt.atoms, opt.step, lr,
               cfg.weight_decay);

  // training accuracy over the frames of this batch
  int64_t correct = 0;
  int64_t c = logits.cols();
  for (int64_t r = 0; r < logits.rows(); ++r) {
    int64_t arg = 0;
    for (int64_t j = 1; j < c; ++j)
      if (logits.at2(r, j) > logits.at2(r, arg)) arg = j;
    if (static_cast<int>(arg) == batch.labels[static_cast<size_t>(r)]) ++correct;
  }

  StepOutcome outcome;
  outcome.ce = loss.ce;
  outcome.rec = loss.rec;
  outcome.dict = loss.dict;
  outcome.mean_w = mean_w;
  outcome.acc = static_cast<double>(correct) / static_cast<double>(logits.rows());
  return outcome;
}

}  // namespace

StepOutcome train_step(SdlModel& model, OptimState& opt, const DatasetReader::Batch& batch,
                       const TrainConfig& cfg, const SdmConfig& sdm, int epoch, double lr,
                       SdVariant variant) {
  try {
    return train_step_impl(model, opt, batch, cfg, sdm, epoch, lr, variant);
  } catch (const SdlError& e) {
    if (e.code() == Err::NonFiniteValue)
      fail(Err::NonFiniteLoss,
           "training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    throw;
  }
}

TrainResult train(const TrainConfig& cfg_in, const DatasetReader& data, const std::string& out_dir,
                  const std::string& resume_checkpoint) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  cfg.model.frames = data.config().frames;
  cfg.model.height = data.config().height;
  cfg.model.width = data.config().width;
  cfg.model.channels = data.config().channels;
  cfg.model.classes = kNumClasses;
  cfg.model.validate();

  SdmConfig sdm = cfg.sdm;
  sdm.gate_epoch = static_cast<int>(std::lround(cfg.gate_fraction * cfg.epochs));
  sdm.validate();

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec, Err::IoError, "cannot create output directory " + out_dir);

  SdlModel model(cfg.model, cfg.seed);
  OptimState opt;
  opt.params.resize(model.store.size());
  int start_epoch = 0;

  if (!resume_checkpoint.empty()) {
    Checkpoint ck = Checkpoint::load(resume_checkpoint);
    EncoderConfig stored = SdlModel::config_from_checkpoint(ck);
    require(stored.tokens() == cfg.model.tokens() && stored.tubelet.dim == cfg.model.tubelet.dim &&
                stored.blocks == cfg.model.blocks && stored.classes == cfg.model.classes,
            Err::InvalidConfig, "resume checkpoint was trained with a different model config");
    model.load_params(ck);
    for (size_t i = 0; i < model.store.size(); ++i) {
      const std::string& name = model.store.entry(static_cast<int>(i)).name;
      opt.params[i].m = ck.get("opt.m." + name);
      opt.params[i].v = ck.get("opt.v." + name);
    }
    opt.atoms.m = ck.get("opt.m.dict.atoms");
    opt.atoms.v = ck.get("opt.v.dict.atoms");
    opt.step = ck.get("opt.step").data[0] > 0 ? static_cast<int64_t>(ck.get("opt.step").data[0]) : 0;
    start_epoch = ck.meta().at("next_epoch").get<int>();
    require(start_epoch <= cfg.epochs, Err::InvalidConfig,
            "resume checkpoint already trained past the requested epoch count");
  }

  std::string metrics_path = out_dir + "/metrics.csv";
  std::ofstream mf(metrics_path, start_epoch == 0 ? std::ios::trunc : std::ios::app);
  require(mf.good(), Err::IoError, "cannot open " + metrics_path);
  if (start_epoch == 0) mf << "epoch,lr,beta,ce,rec,dict,mean_w,train_acc\n";

  TrainResult result;
  result.metrics_path = metrics_path;

  std::vector<int64_t> order(static_cast<size_t>(data.count()));
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    double lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr);
    double beta = beta_schedule(epoch, cfg.epochs, sdm);

    Rng shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle, static_cast<uint64_t>(epoch));
    std::vector<int64_t> shuffled = order;
    shuffle_rng.shuffle(shuffled);

    double ce = 0, rec = 0, dict = 0, mean_w = 0, acc = 0;
    int64_t batches = 0;
    uint64_t aug_seed = mix_seed({cfg.seed, 0xA46u, static_cast<uint64_t>(epoch)});
    for (int64_t off = 0; off < data.count(); off += cfg.batch_size) {
      int64_t n = std::min(cfg.batch_size, data.count() - off);
      std::vector<int64_t> idx(shuffled.begin() + off, shuffled.begin() + off + n);
      DatasetReader::Batch batch = data.load_batch(idx, /*augment=*/true, aug_seed);
      StepOutcome o = train_step(model, opt, batch, cfg, sdm, epoch, lr);
      ce += o.ce;
      rec += o.rec;
      dict += o.dict;
      mean_w += o.mean_w;
      acc += o.acc;
      ++batches;
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    em.beta = beta;
    em.ce = ce / static_cast<double>(batches);
    em.rec = rec / static_cast<double>(batches);
    em.dict = dict / static_cast<double>(batches);
    em.mean_w = mean_w / static_cast<double>(batches);
    em.train_acc = acc / static_cast<double>(batches);
    result.metrics.push_back(em);
    mf << em.epoch << "," << fmt(em.lr) << "," << fmt(em.beta) << "," << fmt(em.ce) << ","
       << fmt(em.rec) << "," << fmt(em.dict) << "," << fmt(em.mean_w) << "," << fmt(em.train_acc)
       << "\n";
    mf.flush();
    require(mf.good(), Err::IoError, "failed writing metrics row");
  }

  Checkpoint ck = model.to_checkpoint();
  for (size_t i = 0; i < model.store.size(); ++i) {
    const std::string& name = model.store.entry(static_cast<int>(i)).name;
    const AdamSlot& slot = opt.params[i];
    Tensor shape_like = Tensor::zeros(model.store.entry(static_cast<int>(i)).value.shape);
    ck.put("opt.m." + name, slot.m.data.empty() ? shape_like : slot.m);
    ck.put("opt.v." + name, slot.v.data.empty() ? shape_like : slot.v);
  }
  Tensor atoms_like = Tensor::zeros(model.dict.atoms.shape);
  ck.put("opt.m.dict.atoms", opt.atoms.m.data.empty() ? atoms_like : opt.atoms.m);
  ck.put("opt.v.dict.atoms", opt.atoms.v.data.empty() ? atoms_like : opt.atoms.v);
  ck.put("opt.step", Tensor::scalar(static_cast<double>(opt.step)));
  ck.meta()["next_epoch"] = cfg.epochs;
  ck.meta()["train_config"] = cfg.to_json();

  result.checkpoint_path = out_dir + "/checkpoint.sdl";
  ck.save(result.checkpoint_path);
  return result;
}

InferenceSession::InferenceSession(const Checkpoint& ck)
    : model_(SdlModel::config_from_checkpoint(ck), /*seed=*/0) {
  model_.load_params(ck);
}

InferenceSession InferenceSession::from_file(const std::string& path) {
  return InferenceSession(Checkpoint::load(path));
}

InferenceSession::Output InferenceSession::run(const Tensor& videos) {
  Tape tape(Tape::Mode::inference);
  ParamCtx ctx(tape, model_.store);
  TokenGrid grid = model_.encoder.forward(ctx, videos);
  Output out;
  out.logits = model_.encoder.frame_logits(ctx, grid);
  out.features = model_.encoder.frame_features(tape, grid);
  require(tape.size() == 0, Err::TapeNotRecording, "inference must not record tape nodes");
  for (const std::string& name : ctx.accessed()) {
    bool ok = name.rfind("encoder.", 0) == 0 || name.rfind("heads.", 0) == 0;
    if (!ok)
      throw std::logic_error("inference touched training-only parameter " + name);
    accessed_.insert(name);
  }
  return out;
}

int64_t InferenceSession::param_count() const {
  return model_.store.count_with_prefix("encoder.") + model_.store.count_with_prefix("heads.");
}

}  // namespace sdl
