#pragma once

#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "sdl/tensor.hpp"

namespace sdl {

// Reverse-mode tape. Rebuilt per forward pass: every op computes its value
// eagerly and, while recording, appends one node whose closure scatters the
// output gradient back into the parents. In inference mode ops return plain
// values and append nothing.
class Tape {
 public:
  enum class Mode { recording, inference };

  explicit Tape(Mode mode = Mode::recording) : mode_(mode) {}

  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }
  bool recording() const { return mode_ == Mode::recording; }
  size_t size() const { return nodes_.size(); }
  void reset();

  // Registers a tensor as a graph leaf. Trainable leaves appear in the map
  // returned by backward().
  Tensor leaf(Tensor value, bool trainable = false);

  // ---- arithmetic -------------------------------------------------------
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& x, double c);
  Tensor add_scalar(const Tensor& x, double c);
  // x:[R x d] + bias[d], broadcast over rows
  Tensor add_bias(const Tensor& x, const Tensor& bias);
  // x:[(B*N) x d] + e:[N x d], e tiled over the leading B blocks
  Tensor tile_rows_add(const Tensor& x, const Tensor& e);
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& x);

  // ---- shape / data movement -------------------------------------------
  Tensor reshape(const Tensor& x, std::vector<int64_t> shape);
  // out.data[i] = x.data[(*index)[i]]; gradient scatter-adds through the map
  Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<int64_t>> index,
                std::vector<int64_t> out_shape);
  // row gather on a 2-D tensor
  Tensor gather_rows(const Tensor& x, std::shared_ptr<const std::vector<int64_t>> rows);
  // concatenate along axis 0 (equal trailing shapes)
  Tensor concat_rows(const std::vector<Tensor>& xs);

  // ---- nonlinearities and norms ------------------------------------------
  Tensor softmax(const Tensor& x, int axis);
  Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
  Tensor gelu(const Tensor& x);
  // rows scaled to unit L2 norm
  Tensor row_normalize(const Tensor& x);

  // ---- reductions ---------------------------------------------------------
  Tensor sum(const Tensor& x);
  Tensor mean(const Tensor& x);
  Tensor sum_axis(const Tensor& x, int axis);
  Tensor mean_axis(const Tensor& x, int axis);

  // ---- losses and similarities -------------------------------------------
  Tensor mse_loss(const Tensor& a, const Tensor& b);
  // mean over rows of weights[i] * CE(logits row i, labels[i]); empty weights = all ones
  Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                       const std::vector<double>& weights = {});
  Tensor cosine_similarity(const Tensor& a, const Tensor& b);

  // ---- attention ----------------------------------------------------------
  // softmax(q k^T / sqrt(d_k)) v per head; head width = d_k, heads = cols/d_k
  Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t d_k);
  // rows split into n_groups consecutive blocks, cols into n_heads slices;
  // scaled dot-product attention within each (group, head)
  Tensor grouped_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t n_groups,
                           int64_t n_heads);

  // ---- reverse pass ---------------------------------------------------------
  // Returns {node-id -> gradient} for every trainable leaf.
  std::unordered_map<int, Tensor> backward(const Tensor& loss);
  // Gradient of any recorded node after backward() (zeros if off the loss path).
  const Tensor& grad(const Tensor& t) const;
  const Tensor& grad(int node) const;

 private:
  struct Node {
    Tensor value;
    std::vector<int> parents;
    std::function<void(Tape&, const Tensor& out_grad)> backprop;  // null for leaves
    bool trainable = false;
  };

  Mode mode_;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;

  int append(Tensor value, std::vector<int> parents,
             std::function<void(Tape&, const Tensor&)> backprop, bool trainable = false);
  void accumulate(int node, const double* g, size_t n);
  friend struct GradSink;
};

// Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h per entry.
// Independent of the tape; used to check every differentiable op.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h = 1e-6);

}  // namespace sdl
