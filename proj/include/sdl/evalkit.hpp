#pragma once

#include "sdl/trainer.hpp"

namespace sdl {

// Step-wise area under the precision-recall curve: items sorted by
// descending score (ties keep their original order), recall increments
// accumulate precision-at-rank. Throws NoPositives when labels are all zero.
double average_precision(const std::vector<double>& scores, const std::vector<uint8_t>& labels);

struct EvalReport {
  struct ClassResult {
    std::string name;
    double ap = 0.0;
    int64_t positives = 0;
    bool included = false;  // zero-positive classes are reported but excluded from mAP
  };
  struct FrameRow {
    int64_t sequence = 0;
    int64_t frame = 0;
    int true_label = 0;
    int predicted = 0;
    double score = 0.0;  // softmax probability of the predicted class
    double mu = 0.0;     // cosine distance to the predicted-class atom
    double w = 0.0;
  };

  std::vector<ClassResult> classes;
  double map = 0.0;
  std::vector<std::string> notes;
  std::vector<FrameRow> frames;

  nlohmann::json to_json() const;
};

// frame-level one-vs-rest AP per class over the whole split; background is
// excluded from the mAP mean unless include_background is set
EvalReport evaluate(InferenceSession& session, const Dictionary& dict, const DatasetReader& data,
                    bool include_background = false);

void write_frame_csv(const EvalReport& report, const std::string& path);

struct UncertaintyCurve {
  struct Row {
    int64_t frame;
    int label;
    int predicted;
    uint8_t boundary;
    double mu_pred, w_pred;
    double mu_true, w_true;
  };
  std::vector<Row> rows;
};

// per-frame uncertainty series for one sequence; features are the raw
// encoder features (no feature update at evaluation time)
UncertaintyCurve uncertainty_curve(InferenceSession& session, const Dictionary& dict,
                                   const DatasetReader& data, int64_t sequence_index);

void write_curve_csv(const UncertaintyCurve& curve, const std::string& path);
// single-curve line chart of w over the frame index, no external renderer
void write_curve_svg(const UncertaintyCurve& curve, const std::string& path);

// rows {class, frame, D feature values} for every non-background test frame;
// alpha > 0 blends each feature toward its true-class atom first
void export_features(InferenceSession& session, const Dictionary& dict, const DatasetReader& data,
                     double alpha, const std::string& path);

}  // namespace sdl
