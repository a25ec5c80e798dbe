#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <vector>

#include "fewshot/common.hpp"

namespace fewshot::diff {

// A 2D array node on the tape. Data is row-major in a flat buffer so
// matmuls can Map it without copies.
struct Node {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::ArrayXd value;
  Eigen::ArrayXd grad;
  bool requires_grad = false;
  std::function<void()> backward;  // accumulates into input grads

  Eigen::Index size() const { return rows * cols; }
  void ensure_grad() {
    if (grad.size() != size()) grad = Eigen::ArrayXd::Zero(size());
  }

  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<Mat> mat() { return {value.data(), rows, cols}; }
  Eigen::Map<const Mat> mat() const { return {value.data(), rows, cols}; }
  Eigen::Map<Mat> gmat() {
    ensure_grad();
    return {grad.data(), rows, cols};
  }
};

using Ptr = std::shared_ptr<Node>;

// Records nodes in construction order; construction order is a valid
// topological order, so backward() is a single reverse sweep.
class Tape {
 public:
  Ptr leaf(Eigen::Index rows, Eigen::Index cols, const Eigen::ArrayXd& value,
           bool requires_grad = false);
  Ptr constant(const Eigen::MatrixXd& m);
  Ptr scalar(double v);

  Ptr add(const Ptr& a, const Ptr& b);
  Ptr sub(const Ptr& a, const Ptr& b);
  Ptr mul(const Ptr& a, const Ptr& b);
  Ptr div(const Ptr& a, const Ptr& b);
  Ptr scalar_mul(const Ptr& a, double s);
  Ptr scalar_add(const Ptr& a, double s);

  Ptr matmul(const Ptr& a, const Ptr& b);     // a[r,k] * b[k,c]
  Ptr matmul_nt(const Ptr& a, const Ptr& b);  // a[r,k] * b[c,k]^T

  Ptr exp_(const Ptr& a);
  Ptr log_(const Ptr& a);
  Ptr sqrt_(const Ptr& a);
  Ptr gelu(const Ptr& a);  // tanh approximation
  Ptr clamp_min(const Ptr& a, double floor);  // gradient passes where input >= floor

  // Row-wise RMS normalization with a learnable gain (1 x cols), eps inside the root.
  Ptr rms_norm(const Ptr& a, const Ptr& gain, double eps = 1e-8);

  // Row-wise softmax; mask (1 x cols) is added to every row first.
  // Masked positions (mask <= -1e29) produce exactly zero probability and gradient.
  Ptr softmax_masked(const Ptr& logits, const Ptr& mask);
  Ptr softmax_rows(const Ptr& logits);

  Ptr embedding_lookup(const Ptr& table, const std::vector<int>& ids);
  Ptr concat_rows(const std::vector<Ptr>& parts);
  Ptr concat_cols(const std::vector<Ptr>& parts);
  Ptr slice_rows(const Ptr& a, Eigen::Index begin, Eigen::Index end);
  Ptr slice_cols(const Ptr& a, Eigen::Index begin, Eigen::Index end);

  Ptr reduce_sum(const Ptr& a);           // 1 x 1
  Ptr reduce_mean(const Ptr& a);          // 1 x 1
  Ptr rowwise_sum(const Ptr& a);          // rows x 1
  Ptr colwise_sum(const Ptr& a);          // 1 x cols
  Ptr broadcast_rows(const Ptr& a, Eigen::Index rows);  // (1 x c) -> (rows x c)

  // Reverse-mode sweep from a scalar loss node.
  void backward(const Ptr& loss);

  std::size_t node_count() const { return order_.size(); }

 private:
  Ptr make(Eigen::Index rows, Eigen::Index cols, bool requires_grad);
  static void check_finite(const Ptr& n);

  std::vector<Ptr> order_;
};

// Central-difference check of an analytic gradient. `f` evaluates the
// scalar function at a parameter point; `analytic` are the gradients to
// verify, aligned with `point`. Returns the worst relative error, with
// 1e-12 denominators guarded.
double finite_diff_check(
    const std::function<double(const std::vector<Eigen::ArrayXd>&)>& f,
    const std::vector<Eigen::ArrayXd>& point,
    const std::vector<Eigen::ArrayXd>& analytic, double eps = 1e-5);

}  // namespace fewshot::diff
