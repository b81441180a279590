#include "sdl/discovery.hpp"

#include <cmath>

namespace sdl {

Dictionary init_dictionary(int64_t c_cls, int64_t d, uint64_t seed) {
  require(c_cls >= 2, Err::InvalidDims, "dictionary needs at least two classes");
  require(d >= 1, Err::InvalidDims, "dictionary width must be positive");
  Rng rng(mix_seed({seed, static_cast<uint64_t>(Stream::DictInit)}));
  Dictionary dict;
  dict.atoms = Tensor({c_cls, d});
  for (int64_t r = 0; r < c_cls; ++r) {
    double norm2 = 0.0;
    double* row = dict.atoms.data.data() + r * d;
    for (int64_t j = 0; j < d; ++j) {
      row[j] = rng.normal();
      norm2 += row[j] * row[j];
    }
    double inv = 1.0 / std::sqrt(norm2);
    for (int64_t j = 0; j < d; ++j) row[j] *= inv;
  }
  return dict;
}

namespace {

void check_class(const Dictionary& dict, int y) {
  require(y >= 0 && y < dict.atoms.rows(), Err::UnknownClass,
          "class id " + std::to_string(y) + " outside dictionary of " +
              std::to_string(dict.atoms.rows()) + " atoms");
}

Tensor atom_row(const Dictionary& dict, int y) {
  int64_t d = dict.atoms.cols();
  Tensor row({d});
  for (int64_t j = 0; j < d; ++j) row.data[static_cast<size_t>(j)] = dict.atoms.at2(y, j);
  return row;
}

}  // namespace

Tensor feature_update(const Tensor& f, const Dictionary& dict, int y, const SdmConfig& cfg,
                      int epoch) {
  require(epoch >= cfg.gate_epoch, Err::GateClosed,
          "feature update gated until epoch " + std::to_string(cfg.gate_epoch));
  check_class(dict, y);
  require(f.numel() == dict.atoms.cols(), Err::ShapeMismatch,
          "feature width does not match dictionary width");
  Tensor out(f.shape);
  for (int64_t j = 0; j < f.numel(); ++j)
    out.data[static_cast<size_t>(j)] =
        (1.0 - cfg.alpha) * f.data[static_cast<size_t>(j)] + cfg.alpha * dict.atoms.at2(y, j);
  return out;
}

double uncertainty(const Tensor& f, const Tensor& atom) {
  require(f.numel() == atom.numel(), Err::ShapeMismatch,
          "uncertainty: feature and atom widths differ");
  double dot = 0.0, nf = 0.0, na = 0.0;
  for (size_t i = 0; i < f.data.size(); ++i) {
    dot += f.data[i] * atom.data[i];
    nf += f.data[i] * f.data[i];
    na += atom.data[i] * atom.data[i];
  }
  require(nf > 0.0 && na > 0.0, Err::ZeroNormVector, "uncertainty: zero-norm input");
  return 1.0 - dot / (std::sqrt(nf) * std::sqrt(na));
}

double sample_weight(double mu, const SdmConfig& cfg) {
  require(mu >= -1e-9 && mu <= 2.0 + 1e-9, Err::OutOfRangeMu,
          "mu = " + std::to_string(mu) + " outside [0, 2]");
  double w = 1.0 - mu;
  return std::min(cfg.weight_ceil, std::max(cfg.weight_floor, w));
}

void dictionary_update(Dictionary& dict, const Tensor& f, int y, double beta) {
  check_class(dict, y);
  require(beta >= 0.0 && beta <= 1.0, Err::InvalidConfig, "beta must lie in [0,1]");
  require(f.numel() == dict.atoms.cols(), Err::ShapeMismatch,
          "feature width does not match dictionary width");
  int64_t d = dict.atoms.cols();
  double* row = dict.atoms.data.data() + static_cast<int64_t>(y) * d;
  for (int64_t j = 0; j < d; ++j)
    row[j] = (1.0 - beta) * row[j] + beta * f.data[static_cast<size_t>(j)];

  require(all_finite(dict.atoms.data), Err::DictionaryCollapse,
          "dictionary atoms became non-finite");
  // at least two atoms must stay distinct
  bool distinct = false;
  int64_t c = dict.atoms.rows();
  for (int64_t a = 0; a < c && !distinct; ++a)
    for (int64_t b = a + 1; b < c && !distinct; ++b)
      for (int64_t j = 0; j < d; ++j)
        if (dict.atoms.at2(a, j) != dict.atoms.at2(b, j)) {
          distinct = true;
          break;
        }
  require(distinct, Err::DictionaryCollapse, "all dictionary atoms collapsed to one point");
}

double beta_schedule(int epoch, int total_epochs, const SdmConfig& cfg) {
  require(total_epochs > 0 && epoch >= 0 && epoch < total_epochs, Err::InvalidEpoch,
          "epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(total_epochs) + ")");
  if (total_epochs == 1) return cfg.beta0;
  double t = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
  return cfg.beta0 - (cfg.beta0 - cfg.beta_min) * t;
}

Tensor dict_loss(Tape& tape, const Tensor& atoms, const SdmConfig& cfg) {
  require(atoms.ndim() == 2 && atoms.rows() >= 2, Err::InvalidDims,
          "dict_loss needs at least two atoms");
  int64_t c = atoms.rows(), d = atoms.cols();
  for (int64_t r = 0; r < c; ++r) {
    double n2 = 0.0;
    for (int64_t j = 0; j < d; ++j) n2 += atoms.at2(r, j) * atoms.at2(r, j);
    require(n2 > 0.0, Err::ZeroNormAtom, "dict_loss: zero-norm atom " + std::to_string(r));
  }
  Tensor unit = tape.row_normalize(atoms);
  Tensor cosines = tape.matmul(unit, tape.transpose(unit));
  Tensor logits = tape.scale(cosines, cfg.scale);
  // diagonal becomes the margin target s(cos(m*0) - delta); cos of the
  // self-angle is 1 regardless of margin_mult
  Tensor diag_shift = Tensor::zeros({c, c});
  for (int64_t r = 0; r < c; ++r) diag_shift.at2(r, r) = -cfg.scale * cfg.delta;
  logits = tape.add(logits, diag_shift);
  std::vector<int> labels(static_cast<size_t>(c));
  for (int64_t r = 0; r < c; ++r) labels[static_cast<size_t>(r)] = static_cast<int>(r);
  return tape.cross_entropy(logits, labels);
}

double dict_loss_value(const Dictionary& dict, const SdmConfig& cfg) {
  Tape tape(Tape::Mode::inference);
  return dict_loss(tape, dict.atoms, cfg).data[0];
}

SdPassResult sample_discovery_pass(const Tensor& features, const std::vector<int>& labels,
                                   Dictionary& dict, int epoch, int total_epochs,
                                   const SdmConfig& cfg, int background_class) {
  require(features.ndim() == 2, Err::ShapeMismatch, "features must be [n, D]");
  require(static_cast<int64_t>(labels.size()) == features.rows(), Err::ShapeMismatch,
          "one label per feature row required");
  cfg.validate();

  const int64_t n = features.rows(), d = features.cols();
  const bool gate_open = epoch >= cfg.gate_epoch;
  const double beta = beta_schedule(epoch, total_epochs, cfg);

  SdPassResult res;
  res.features = features;
  res.features.node = -1;
  res.mu.assign(static_cast<size_t>(n), 0.0);
  res.weights.assign(static_cast<size_t>(n), 1.0);

  Tensor row({d});
  for (int64_t i = 0; i < n; ++i) {
    int y = labels[static_cast<size_t>(i)];
    if (y == background_class) continue;
    check_class(dict, y);
    for (int64_t j = 0; j < d; ++j)
      row.data[static_cast<size_t>(j)] = features.at2(i, j);

    if (gate_open) {
      Tensor updated = feature_update(row, dict, y, cfg, epoch);
      double mu = uncertainty(updated, atom_row(dict, y));
      res.mu[static_cast<size_t>(i)] = mu;
      res.weights[static_cast<size_t>(i)] = sample_weight(mu, cfg);
      for (int64_t j = 0; j < d; ++j) res.features.at2(i, j) = updated.data[static_cast<size_t>(j)];
    }
    // the EMA consumes the encoder feature, not the blended one, so the
    // dictionary keeps tracking the actual feature statistics
    dictionary_update(dict, row, y, beta);
  }
  dict.last_update_epoch = epoch;
  return res;
}

}  // namespace sdl
