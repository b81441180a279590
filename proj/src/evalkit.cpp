#include "sdl/evalkit.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

namespace sdl {

namespace {

std::string fmt(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

Tensor feature_row(const Tensor& features, int64_t row) {
  int64_t d = features.cols();
  Tensor out({d});
  for (int64_t j = 0; j < d; ++j) out.data[static_cast<size_t>(j)] = features.at2(row, j);
  return out;
}

Tensor atom_of(const Dictionary& dict, int cls) {
  int64_t d = dict.atoms.cols();
  Tensor out({d});
  for (int64_t j = 0; j < d; ++j) out.data[static_cast<size_t>(j)] = dict.atoms.at2(cls, j);
  return out;
}

}  // namespace

double average_precision(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
  require(scores.size() == labels.size(), Err::ShapeMismatch,
          "average_precision: score/label lengths differ");
  int64_t positives = 0;
  for (uint8_t l : labels) positives += l ? 1 : 0;
  require(positives > 0, Err::NoPositives, "average_precision needs at least one positive");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  double ap = 0.0;
  int64_t hits = 0;
  for (size_t k = 0; k < order.size(); ++k) {
    if (labels[order[k]]) {
      ++hits;
      double precision = static_cast<double>(hits) / static_cast<double>(k + 1);
      ap += precision / static_cast<double>(positives);  // delta-recall = 1/positives
    }
  }
  return ap;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  nlohmann::json cls = nlohmann::json::array();
  for (const auto& c : classes)
    cls.push_back({{"name", c.name},
                   {"ap", c.ap},
                   {"positives", c.positives},
                   {"included_in_map", c.included}});
  j["classes"] = std::move(cls);
  j["map"] = map;
  j["notes"] = notes;
  j["frame_count"] = frames.size();
  return j;
}

EvalReport evaluate(InferenceSession& session, const Dictionary& dict, const DatasetReader& data,
                    bool include_background) {
  const EncoderConfig& cfg = session.config();
  const int64_t T = cfg.frames, C = cfg.classes, pt = cfg.tubelet.patch_frames;
  const int64_t total = data.count();
  const int64_t batch_size = 16;

  EvalReport report;
  std::vector<std::vector<double>> class_scores(static_cast<size_t>(C));
  std::vector<std::vector<uint8_t>> class_labels(static_cast<size_t>(C));

  Tape inf(Tape::Mode::inference);
  for (int64_t off = 0; off < total; off += batch_size) {
    int64_t n = std::min(batch_size, total - off);
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), off);
    DatasetReader::Batch batch = data.load_batch(idx, /*augment=*/false, 0);
    InferenceSession::Output out = session.run(batch.videos);
    Tensor probs = inf.softmax(out.logits, 1);

    for (int64_t b = 0; b < n; ++b)
      for (int64_t f = 0; f < T; ++f) {
        int64_t row = b * T + f;
        int true_label = batch.labels[static_cast<size_t>(row)];
        int64_t arg = 0;
        for (int64_t j = 1; j < C; ++j)
          if (probs.at2(row, j) > probs.at2(row, arg)) arg = j;

        Tensor feat = feature_row(out.features, b * (T / pt) + f / pt);
        double mu = uncertainty(feat, atom_of(dict, static_cast<int>(arg)));
        EvalReport::FrameRow fr;
        fr.sequence = off + b;
        fr.frame = f;
        fr.true_label = true_label;
        fr.predicted = static_cast<int>(arg);
        fr.score = probs.at2(row, arg);
        fr.mu = mu;
        fr.w = sample_weight(std::clamp(mu, 0.0, 2.0));
        report.frames.push_back(fr);

        for (int64_t c = 0; c < C; ++c) {
          class_scores[static_cast<size_t>(c)].push_back(probs.at2(row, c));
          class_labels[static_cast<size_t>(c)].push_back(true_label == c ? 1 : 0);
        }
      }
  }

  double ap_sum = 0.0;
  int64_t included = 0;
  for (int64_t c = 0; c < C; ++c) {
    EvalReport::ClassResult res;
    res.name = c < kNumClasses ? kClassNames[static_cast<size_t>(c)]
                               : "class" + std::to_string(c);
    res.positives = std::count(class_labels[static_cast<size_t>(c)].begin(),
                               class_labels[static_cast<size_t>(c)].end(), uint8_t{1});
    bool is_background = (c == kBackground);
    if (is_background && !include_background) {
      res.included = false;
      if (res.positives > 0)
        res.ap = average_precision(class_scores[static_cast<size_t>(c)],
                                   class_labels[static_cast<size_t>(c)]);
      report.notes.push_back("background class reported but excluded from mAP");
    } else if (res.positives == 0) {
      res.included = false;
      report.notes.push_back("class " + res.name + " has no test positives; excluded from mAP");
    } else {
      res.ap = average_precision(class_scores[static_cast<size_t>(c)],
                                 class_labels[static_cast<size_t>(c)]);
      res.included = true;
      ap_sum += res.ap;
      ++included;
    }
    report.classes.push_back(res);
  }
  require(included > 0, Err::NoPositives, "no class had test positives");
  report.map = ap_sum / static_cast<double>(included);
  return report;
}

void write_frame_csv(const EvalReport& report, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), Err::IoError, "cannot open " + path);
  f << "sequence,frame,true,predicted,score,mu,w\n";
  for (const auto& r : report.frames)
    f << r.sequence << "," << r.frame << "," << r.true_label << "," << r.predicted << ","
      << fmt(r.score) << "," << fmt(r.mu) << "," << fmt(r.w) << "\n";
  require(f.good(), Err::IoError, "short write to " + path);
}

UncertaintyCurve uncertainty_curve(InferenceSession& session, const Dictionary& dict,
                                   const DatasetReader& data, int64_t sequence_index) {
  require(sequence_index >= 0 && sequence_index < data.count(), Err::IndexOutOfRange,
          "sequence index outside the split");
  const EncoderConfig& cfg = session.config();
  const int64_t T = cfg.frames, pt = cfg.tubelet.patch_frames, C = cfg.classes;

  DatasetReader::Batch batch = data.load_batch({sequence_index}, /*augment=*/false, 0);
  InferenceSession::Output out = session.run(batch.videos);

  UncertaintyCurve curve;
  for (int64_t f = 0; f < T; ++f) {
    int64_t arg = 0;
    for (int64_t j = 1; j < C; ++j)
      if (out.logits.at2(f, j) > out.logits.at2(f, arg)) arg = j;
    Tensor feat = feature_row(out.features, f / pt);

    UncertaintyCurve::Row row;
    row.frame = f;
    row.label = batch.labels[static_cast<size_t>(f)];
    row.predicted = static_cast<int>(arg);
    row.boundary = batch.boundary[static_cast<size_t>(f)];
    row.mu_pred = uncertainty(feat, atom_of(dict, row.predicted));
    row.w_pred = sample_weight(std::clamp(row.mu_pred, 0.0, 2.0));
    row.mu_true = uncertainty(feat, atom_of(dict, row.label));
    row.w_true = sample_weight(std::clamp(row.mu_true, 0.0, 2.0));
    curve.rows.push_back(row);
  }
  return curve;
}

void write_curve_csv(const UncertaintyCurve& curve, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), Err::IoError, "cannot open " + path);
  f << "frame,label,predicted,boundary,mu_pred,w_pred,mu_true,w_true\n";
  for (const auto& r : curve.rows)
    f << r.frame << "," << r.label << "," << r.predicted << "," << int(r.boundary) << ","
      << fmt(r.mu_pred) << "," << fmt(r.w_pred) << "," << fmt(r.mu_true) << "," << fmt(r.w_true)
      << "\n";
  require(f.good(), Err::IoError, "short write to " + path);
}

void write_curve_svg(const UncertaintyCurve& curve, const std::string& path) {
  const int w = 480, h = 240, ml = 40, mb = 24, mt = 12, mr = 12;
  const int plot_w = w - ml - mr, plot_h = h - mt - mb;
  const size_t n = curve.rows.size();
  require(n >= 2, Err::InvalidDims, "curve needs at least two frames");

  auto xpos = [&](size_t i) {
    return ml + static_cast<double>(i) * plot_w / static_cast<double>(n - 1);
  };
  auto ypos = [&](double wv) { return mt + (1.0 - (wv - 0.5) / 0.5) * plot_h; };

  std::ofstream f(path, std::ios::trunc);
  require(f.good(), Err::IoError, "cannot open " + path);
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  f << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  f << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << (mt + plot_h)
    << "\" stroke=\"black\"/>\n";
  f << "<line x1=\"" << ml << "\" y1=\"" << (mt + plot_h) << "\" x2=\"" << (ml + plot_w)
    << "\" y2=\"" << (mt + plot_h) << "\" stroke=\"black\"/>\n";
  f << "<text x=\"4\" y=\"" << (mt + 6) << "\" font-size=\"10\">w=1</text>\n";
  f << "<text x=\"4\" y=\"" << (mt + plot_h) << "\" font-size=\"10\">w=0.5</text>\n";
  f << "<text x=\"" << (ml + plot_w / 2 - 16) << "\" y=\"" << (h - 6)
    << "\" font-size=\"10\">frame</text>\n";
  f << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
  for (size_t i = 0; i < n; ++i) f << fmt(xpos(i)) << "," << fmt(ypos(curve.rows[i].w_true)) << " ";
  f << "\"/>\n";
  // boundary-flagged frames marked on the axis
  for (size_t i = 0; i < n; ++i)
    if (curve.rows[i].boundary)
      f << "<circle cx=\"" << fmt(xpos(i)) << "\" cy=\"" << (mt + plot_h)
        << "\" r=\"3\" fill=\"crimson\"/>\n";
  f << "</svg>\n";
  require(f.good(), Err::IoError, "short write to " + path);
}

void export_features(InferenceSession& session, const Dictionary& dict, const DatasetReader& data,
                     double alpha, const std::string& path) {
  require(alpha >= 0.0 && alpha <= 1.0, Err::InvalidConfig, "alpha must lie in [0,1]");
  const EncoderConfig& cfg = session.config();
  const int64_t T = cfg.frames, pt = cfg.tubelet.patch_frames, d = cfg.tubelet.dim;
  const int64_t batch_size = 16;

  std::ofstream f(path, std::ios::trunc);
  require(f.good(), Err::IoError, "cannot open " + path);
  f << "class,frame";
  for (int64_t j = 0; j < d; ++j) f << ",f" << j;
  f << "\n";

  for (int64_t off = 0; off < data.count(); off += batch_size) {
    int64_t n = std::min(batch_size, data.count() - off);
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), off);
    DatasetReader::Batch batch = data.load_batch(idx, /*augment=*/false, 0);
    InferenceSession::Output out = session.run(batch.videos);

    for (int64_t b = 0; b < n; ++b)
      for (int64_t fr = 0; fr < T; ++fr) {
        int label = batch.labels[static_cast<size_t>(b * T + fr)];
        if (label == kBackground) continue;
        int64_t row = b * (T / pt) + fr / pt;
        f << label << "," << (off + b) * T + fr;
        for (int64_t j = 0; j < d; ++j) {
          double v = (1.0 - alpha) * out.features.at2(row, j) + alpha * dict.atoms.at2(label, j);
          f << "," << fmt(v);
        }
        f << "\n";
      }
  }
  require(f.good(), Err::IoError, "short write to " + path);
}

}  // namespace sdl
