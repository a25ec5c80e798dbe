#include "fewshot/diffable.hpp"

#include <cmath>
#include <numbers>

namespace fewshot::diff {

namespace {
constexpr double kMaskCutoff = -1e29;
}

Ptr Tape::make(Eigen::Index rows, Eigen::Index cols, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->value.resize(rows * cols);
  n->requires_grad = requires_grad;
  order_.push_back(n);
  return n;
}

void Tape::check_finite(const Ptr& n) {
  if (!n->value.isFinite().all())
    throw NumericError("non-finite value produced by a forward op");
}

Ptr Tape::leaf(Eigen::Index rows, Eigen::Index cols, const Eigen::ArrayXd& value,
               bool requires_grad) {
  if (value.size() != rows * cols) throw UsageError("leaf: shape/data mismatch");
  auto n = make(rows, cols, requires_grad);
  n->value = value;
  check_finite(n);
  return n;
}

Ptr Tape::constant(const Eigen::MatrixXd& m) {
  auto n = make(m.rows(), m.cols(), false);
  Node::Mat rm = m;
  n->value = Eigen::Map<const Eigen::ArrayXd>(rm.data(), rm.size());
  check_finite(n);
  return n;
}

Ptr Tape::scalar(double v) {
  auto n = make(1, 1, false);
  n->value(0) = v;
  check_finite(n);
  return n;
}

Ptr Tape::add(const Ptr& a, const Ptr& b) {
  if (a->rows != b->rows || a->cols != b->cols) throw UsageError("add: shape mismatch");
  auto out = make(a->rows, a->cols, a->requires_grad || b->requires_grad);
  out->value = a->value + b->value;
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a, ob = b;
    Node* o = out.get();
    out->backward = [oa, ob, o] {
      if (oa->requires_grad) { oa->ensure_grad(); oa->grad += o->grad; }
      if (ob->requires_grad) { ob->ensure_grad(); ob->grad += o->grad; }
    };
  }
  return out;
}

Ptr Tape::sub(const Ptr& a, const Ptr& b) {
  if (a->rows != b->rows || a->cols != b->cols) throw UsageError("sub: shape mismatch");
  auto out = make(a->rows, a->cols, a->requires_grad || b->requires_grad);
  out->value = a->value - b->value;
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a, ob = b;
    Node* o = out.get();
    out->backward = [oa, ob, o] {
      if (oa->requires_grad) { oa->ensure_grad(); oa->grad += o->grad; }
      if (ob->requires_grad) { ob->ensure_grad(); ob->grad -= o->grad; }
    };
  }
  return out;
}

Ptr Tape::mul(const Ptr& a, const Ptr& b) {
  if (a->rows != b->rows || a->cols != b->cols) throw UsageError("mul: shape mismatch");
  auto out = make(a->rows, a->cols, a->requires_grad || b->requires_grad);
  out->value = a->value * b->value;
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a, ob = b;
    Node* o = out.get();
    out->backward = [oa, ob, o] {
      if (oa->requires_grad) { oa->ensure_grad(); oa->grad += o->grad * ob->value; }
      if (ob->requires_grad) { ob->ensure_grad(); ob->grad += o->grad * oa->value; }
    };
  }
  return out;
}

Ptr Tape::div(const Ptr& a, const Ptr& b) {
  if (a->rows != b->rows || a->cols != b->cols) throw UsageError("div: shape mismatch");
  auto out = make(a->rows, a->cols, a->requires_grad || b->requires_grad);
  out->value = a->value / b->value;
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a, ob = b;
    Node* o = out.get();
    out->backward = [oa, ob, o] {
      if (oa->requires_grad) { oa->ensure_grad(); oa->grad += o->grad / ob->value; }
      if (ob->requires_grad) {
        ob->ensure_grad();
        ob->grad -= o->grad * oa->value / (ob->value * ob->value);
      }
    };
  }
  return out;
}

Ptr Tape::scalar_mul(const Ptr& a, double s) {
  auto out = make(a->rows, a->cols, a->requires_grad);
  out->value = a->value * s;
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a;
    Node* o = out.get();
    out->backward = [oa, o, s] { oa->ensure_grad(); oa->grad += o->grad * s; };
  }
  return out;
}

Ptr Tape::scalar_add(const Ptr& a, double s) {
  auto out = make(a->rows, a->cols, a->requires_grad);
  out->value = a->value + s;
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a;
    Node* o = out.get();
    out->backward = [oa, o] { oa->ensure_grad(); oa->grad += o->grad; };
  }
  return out;
}

Ptr Tape::matmul(const Ptr& a, const Ptr& b) {
  if (a->cols != b->rows) throw UsageError("matmul: inner dimension mismatch");
  auto out = make(a->rows, b->cols, a->requires_grad || b->requires_grad);
  Eigen::Map<Node::Mat>(out->value.data(), out->rows, out->cols) = a->mat() * b->mat();
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a, ob = b;
    Node* o = out.get();
    out->backward = [oa, ob, o] {
      Eigen::Map<const Node::Mat> g(o->grad.data(), o->rows, o->cols);
      if (oa->requires_grad) oa->gmat() += g * ob->mat().transpose();
      if (ob->requires_grad) ob->gmat() += oa->mat().transpose() * g;
    };
  }
  return out;
}

Ptr Tape::matmul_nt(const Ptr& a, const Ptr& b) {
  if (a->cols != b->cols) throw UsageError("matmul_nt: inner dimension mismatch");
  auto out = make(a->rows, b->rows, a->requires_grad || b->requires_grad);
  Eigen::Map<Node::Mat>(out->value.data(), out->rows, out->cols) =
      a->mat() * b->mat().transpose();
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a, ob = b;
    Node* o = out.get();
    out->backward = [oa, ob, o] {
      Eigen::Map<const Node::Mat> g(o->grad.data(), o->rows, o->cols);
      if (oa->requires_grad) oa->gmat() += g * ob->mat();
      if (ob->requires_grad) ob->gmat() += g.transpose() * oa->mat();
    };
  }
  return out;
}

Ptr Tape::exp_(const Ptr& a) {
  auto out = make(a->rows, a->cols, a->requires_grad);
  out->value = a->value.exp();
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a;
    Node* o = out.get();
    out->backward = [oa, o] { oa->ensure_grad(); oa->grad += o->grad * o->value; };
  }
  return out;
}

Ptr Tape::log_(const Ptr& a) {
  auto out = make(a->rows, a->cols, a->requires_grad);
  out->value = a->value.log();
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a;
    Node* o = out.get();
    out->backward = [oa, o] { oa->ensure_grad(); oa->grad += o->grad / oa->value; };
  }
  return out;
}

Ptr Tape::sqrt_(const Ptr& a) {
  auto out = make(a->rows, a->cols, a->requires_grad);
  out->value = a->value.sqrt();
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a;
    Node* o = out.get();
    out->backward = [oa, o] { oa->ensure_grad(); oa->grad += o->grad / (2.0 * o->value); };
  }
  return out;
}

Ptr Tape::gelu(const Ptr& a) {
  constexpr double kA = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kB = 0.044715;
  auto out = make(a->rows, a->cols, a->requires_grad);
  const Eigen::ArrayXd x = a->value;
  const Eigen::ArrayXd t = (kA * (x + kB * x.cube())).tanh();
  out->value = 0.5 * x * (1.0 + t);
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a;
    Node* o = out.get();
    out->backward = [oa, o, t, kA, kB] {
      oa->ensure_grad();
      const Eigen::ArrayXd& x = oa->value;
      const Eigen::ArrayXd dt = (1.0 - t.square()) * kA * (1.0 + 3.0 * kB * x.square());
      oa->grad += o->grad * (0.5 * (1.0 + t) + 0.5 * x * dt);
    };
  }
  return out;
}

Ptr Tape::clamp_min(const Ptr& a, double floor) {
  auto out = make(a->rows, a->cols, a->requires_grad);
  out->value = a->value.max(floor);
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a;
    Node* o = out.get();
    // Ties pass gradient so a value sitting exactly on the floor can recover.
    out->backward = [oa, o, floor] {
      oa->ensure_grad();
      oa->grad += o->grad * (oa->value >= floor).cast<double>();
    };
  }
  return out;
}

Ptr Tape::rms_norm(const Ptr& a, const Ptr& gain, double eps) {
  if (gain->rows != 1 || gain->cols != a->cols) throw UsageError("rms_norm: gain shape");
  const Eigen::Index r = a->rows, c = a->cols;
  auto out = make(r, c, a->requires_grad || gain->requires_grad);
  Eigen::ArrayXd inv_rms(r);
  for (Eigen::Index i = 0; i < r; ++i) {
    const auto row = a->value.segment(i * c, c);
    inv_rms(i) = 1.0 / std::sqrt(row.square().mean() + eps);
    out->value.segment(i * c, c) = row * inv_rms(i) * gain->value;
  }
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a, og = gain;
    Node* o = out.get();
    out->backward = [oa, og, o, inv_rms] {
      const Eigen::Index r = oa->rows, c = oa->cols;
      for (Eigen::Index i = 0; i < r; ++i) {
        const auto x = oa->value.segment(i * c, c);
        const auto g = o->grad.segment(i * c, c);
        const Eigen::ArrayXd gg = g * og->value;  // upstream times gain
        if (og->requires_grad) {
          og->ensure_grad();
          og->grad += g * x * inv_rms(i);
        }
        if (oa->requires_grad) {
          oa->ensure_grad();
          const double dot = (gg * x).sum();
          oa->grad.segment(i * c, c) +=
              gg * inv_rms(i) -
              x * (dot * inv_rms(i) * inv_rms(i) * inv_rms(i) / static_cast<double>(c));
        }
      }
    };
  }
  return out;
}

Ptr Tape::softmax_masked(const Ptr& logits, const Ptr& mask) {
  if (mask->rows != 1 || mask->cols != logits->cols)
    throw UsageError("softmax_masked: mask shape mismatch");
  return softmax_rows(add(logits, broadcast_rows(mask, logits->rows)));
}

Ptr Tape::softmax_rows(const Ptr& logits) {
  const Eigen::Index r = logits->rows, c = logits->cols;
  auto out = make(r, c, logits->requires_grad);
  for (Eigen::Index i = 0; i < r; ++i) {
    const auto row = logits->value.segment(i * c, c);
    const double m = row.maxCoeff();
    Eigen::ArrayXd e = (row - m).exp();
    // Eigen's vectorized exp clamps very negative arguments to a denormal
    // instead of underflowing; force masked entries to exactly zero.
    e = (row <= -1e29).select(0.0, e);
    out->value.segment(i * c, c) = e / e.sum();
  }
  check_finite(out);
  if (out->requires_grad) {
    Ptr ol = logits;
    Node* o = out.get();
    out->backward = [ol, o] {
      ol->ensure_grad();
      const Eigen::Index r = o->rows, c = o->cols;
      for (Eigen::Index i = 0; i < r; ++i) {
        const auto p = o->value.segment(i * c, c);
        const auto g = o->grad.segment(i * c, c);
        const double dot = (g * p).sum();
        ol->grad.segment(i * c, c) += p * (g - dot);
      }
    };
  }
  return out;
}

Ptr Tape::embedding_lookup(const Ptr& table, const std::vector<int>& ids) {
  const Eigen::Index c = table->cols;
  for (int id : ids)
    if (id < 0 || id >= table->rows) throw UsageError("embedding_lookup: id out of range");
  auto out = make(static_cast<Eigen::Index>(ids.size()), c, table->requires_grad);
  for (std::size_t i = 0; i < ids.size(); ++i)
    out->value.segment(static_cast<Eigen::Index>(i) * c, c) =
        table->value.segment(static_cast<Eigen::Index>(ids[i]) * c, c);
  check_finite(out);
  if (out->requires_grad) {
    Ptr ot = table;
    Node* o = out.get();
    out->backward = [ot, o, ids] {
      ot->ensure_grad();
      const Eigen::Index c = ot->cols;
      for (std::size_t i = 0; i < ids.size(); ++i)
        ot->grad.segment(static_cast<Eigen::Index>(ids[i]) * c, c) +=
            o->grad.segment(static_cast<Eigen::Index>(i) * c, c);
    };
  }
  return out;
}

Ptr Tape::concat_rows(const std::vector<Ptr>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: no parts");
  const Eigen::Index c = parts[0]->cols;
  Eigen::Index r = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p->cols != c) throw UsageError("concat_rows: column mismatch");
    r += p->rows;
    rg = rg || p->requires_grad;
  }
  auto out = make(r, c, rg);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out->value.segment(off, p->size()) = p->value;
    off += p->size();
  }
  check_finite(out);
  if (rg) {
    Node* o = out.get();
    auto ps = parts;
    out->backward = [ps, o] {
      Eigen::Index off = 0;
      for (const auto& p : ps) {
        if (p->requires_grad) {
          p->ensure_grad();
          p->grad += o->grad.segment(off, p->size());
        }
        off += p->size();
      }
    };
  }
  return out;
}

Ptr Tape::concat_cols(const std::vector<Ptr>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no parts");
  const Eigen::Index r = parts[0]->rows;
  Eigen::Index c = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p->rows != r) throw UsageError("concat_cols: row mismatch");
    c += p->cols;
    rg = rg || p->requires_grad;
  }
  auto out = make(r, c, rg);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    for (Eigen::Index i = 0; i < r; ++i)
      out->value.segment(i * c + off, p->cols) = p->value.segment(i * p->cols, p->cols);
    off += p->cols;
  }
  check_finite(out);
  if (rg) {
    Node* o = out.get();
    auto ps = parts;
    out->backward = [ps, o] {
      const Eigen::Index r = o->rows, c = o->cols;
      Eigen::Index off = 0;
      for (const auto& p : ps) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (Eigen::Index i = 0; i < r; ++i)
            p->grad.segment(i * p->cols, p->cols) += o->grad.segment(i * c + off, p->cols);
        }
        off += p->cols;
      }
    };
  }
  return out;
}

Ptr Tape::slice_rows(const Ptr& a, Eigen::Index begin, Eigen::Index end) {
  if (begin < 0 || end > a->rows || begin >= end) throw UsageError("slice_rows: bad range");
  const Eigen::Index c = a->cols;
  auto out = make(end - begin, c, a->requires_grad);
  out->value = a->value.segment(begin * c, (end - begin) * c);
  if (out->requires_grad) {
    Ptr oa = a;
    Node* o = out.get();
    out->backward = [oa, o, begin] {
      oa->ensure_grad();
      oa->grad.segment(begin * oa->cols, o->size()) += o->grad;
    };
  }
  return out;
}

Ptr Tape::slice_cols(const Ptr& a, Eigen::Index begin, Eigen::Index end) {
  if (begin < 0 || end > a->cols || begin >= end) throw UsageError("slice_cols: bad range");
  const Eigen::Index w = end - begin;
  auto out = make(a->rows, w, a->requires_grad);
  for (Eigen::Index i = 0; i < a->rows; ++i)
    out->value.segment(i * w, w) = a->value.segment(i * a->cols + begin, w);
  if (out->requires_grad) {
    Ptr oa = a;
    Node* o = out.get();
    out->backward = [oa, o, begin, w] {
      oa->ensure_grad();
      for (Eigen::Index i = 0; i < oa->rows; ++i)
        oa->grad.segment(i * oa->cols + begin, w) += o->grad.segment(i * w, w);
    };
  }
  return out;
}

Ptr Tape::reduce_sum(const Ptr& a) {
  auto out = make(1, 1, a->requires_grad);
  out->value(0) = a->value.sum();
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a;
    Node* o = out.get();
    out->backward = [oa, o] { oa->ensure_grad(); oa->grad += o->grad(0); };
  }
  return out;
}

Ptr Tape::reduce_mean(const Ptr& a) {
  return scalar_mul(reduce_sum(a), 1.0 / static_cast<double>(a->size()));
}

Ptr Tape::rowwise_sum(const Ptr& a) {
  const Eigen::Index r = a->rows, c = a->cols;
  auto out = make(r, 1, a->requires_grad);
  for (Eigen::Index i = 0; i < r; ++i) out->value(i) = a->value.segment(i * c, c).sum();
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a;
    Node* o = out.get();
    out->backward = [oa, o] {
      oa->ensure_grad();
      const Eigen::Index r = oa->rows, c = oa->cols;
      for (Eigen::Index i = 0; i < r; ++i) oa->grad.segment(i * c, c) += o->grad(i);
    };
  }
  return out;
}

Ptr Tape::colwise_sum(const Ptr& a) {
  const Eigen::Index r = a->rows, c = a->cols;
  auto out = make(1, c, a->requires_grad);
  out->value.setZero();
  for (Eigen::Index i = 0; i < r; ++i) out->value += a->value.segment(i * c, c);
  check_finite(out);
  if (out->requires_grad) {
    Ptr oa = a;
    Node* o = out.get();
    out->backward = [oa, o] {
      oa->ensure_grad();
      const Eigen::Index r = oa->rows, c = oa->cols;
      for (Eigen::Index i = 0; i < r; ++i) oa->grad.segment(i * c, c) += o->grad;
    };
  }
  return out;
}

Ptr Tape::broadcast_rows(const Ptr& a, Eigen::Index rows) {
  if (a->rows != 1) throw UsageError("broadcast_rows: input must have one row");
  const Eigen::Index c = a->cols;
  auto out = make(rows, c, a->requires_grad);
  for (Eigen::Index i = 0; i < rows; ++i) out->value.segment(i * c, c) = a->value;
  if (out->requires_grad) {
    Ptr oa = a;
    Node* o = out.get();
    out->backward = [oa, o] {
      oa->ensure_grad();
      const Eigen::Index c = oa->cols;
      for (Eigen::Index i = 0; i < o->rows; ++i) oa->grad += o->grad.segment(i * c, c);
    };
  }
  return out;
}

void Tape::backward(const Ptr& loss) {
  if (loss->rows != 1 || loss->cols != 1)
    throw UsageError("backward: loss must be a scalar node");
  loss->ensure_grad();
  loss->grad(0) = 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it)
    if ((*it)->requires_grad && (*it)->backward && (*it)->grad.size() > 0)
      (*it)->backward();
}

double finite_diff_check(
    const std::function<double(const std::vector<Eigen::ArrayXd>&)>& f,
    const std::vector<Eigen::ArrayXd>& point,
    const std::vector<Eigen::ArrayXd>& analytic, double eps) {
  if (point.size() != analytic.size())
    throw UsageError("finite_diff_check: point/gradient arity mismatch");
  double worst = 0.0;
  std::vector<Eigen::ArrayXd> p = point;
  // Central differences carry rounding noise of about |f| * machine-eps / eps;
  // absolute disagreement below that scale says nothing about the gradient.
  const double f0 = std::abs(f(p));
  const double noise_floor = std::max(1e-10, f0 * 1e-16 / eps * 8.0);
  for (std::size_t g = 0; g < p.size(); ++g) {
    for (Eigen::Index i = 0; i < p[g].size(); ++i) {
      const double orig = p[g](i);
      p[g](i) = orig + eps;
      const double up = f(p);
      p[g](i) = orig - eps;
      const double down = f(p);
      p[g](i) = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[g](i);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
      // Absolute agreement below eps^2 scale counts as a match even if the
      // relative ratio is noisy (both gradients effectively zero).
      const double abs_err = std::abs(a - numeric);
      if (abs_err < noise_floor) continue;
      worst = std::max(worst, abs_err / denom);
    }
  }
  return worst;
}

}  // namespace fewshot::diff
