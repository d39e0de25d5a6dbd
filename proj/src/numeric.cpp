#include "pvfl/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "pvfl/error.hpp"

namespace pvfl {

namespace {

std::string shapes(const char* op, const Matrix& a, const Matrix& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << a.shape_string() << " and " << b.shape_string();
  return os.str();
}

void check_same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw StateError("operands recorded on different tapes");
  }
}

// c += a * b
void gemm_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      const double* brow = b.row(p).data();
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
  }
}

// c += a^T * b
void gemm_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t p = 0; p < n; ++p) {
    const double* brow = b.row(p).data();
    for (std::size_t i = 0; i < k; ++i) {
      const double api = a(p, i);
      if (api == 0.0) continue;
      double* crow = c.row(i).data();
      for (std::size_t j = 0; j < m; ++j) crow[j] += api * brow[j];
    }
  }
}

// c += a * b^T
void gemm_nt_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a.row(i).data();
    double* crow = c.row(i).data();
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b.row(j).data();
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

void softmax_row_inplace(std::span<double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    total += v;
  }
  for (double& v : row) v /= total;
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                         " does not match " + shape_string());
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() ? rows.begin()->size() : 0) {
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw DimensionError("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

ParamTensor::ParamTensor(std::string n, Matrix v)
    : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DimensionError(shapes("matmul", a, b));
  Matrix c(a.rows(), b.cols());
  gemm_acc(a, b, c);
  return c;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out = m;
  for (std::size_t i = 0; i < out.rows(); ++i) softmax_row_inplace(out.row(i));
  return out;
}

Matrix relu(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.values()) v = std::max(v, 0.0);
  return out;
}

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  if (x.cols() != w.rows()) throw DimensionError(shapes("affine", x, w));
  if (b.size() != w.cols()) throw DimensionError(shapes("affine bias", w, b));
  Matrix out(x.rows(), w.cols());
  for (std::size_t i = 0; i < out.rows(); ++i) std::copy(b.values().begin(), b.values().end(), out.row(i).begin());
  gemm_acc(x, w, out);
  return out;
}

// --- Tape ------------------------------------------------------------------

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::record(Matrix value, Backprop backprop, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Matrix(), std::move(backprop), requires_grad});
  return Var{this, nodes_.size() - 1};
}

Matrix& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::constant(Matrix value) { return record(std::move(value), nullptr, false); }

Var Tape::parameter(ParamTensor& p) {
  if (seen_params_.insert(&p).second) p.zero_grad();
  ParamTensor* target = &p;
  return record(p.value, [target](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    auto dst = target->grad.values();
    auto src = g.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  });
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw StateError("backward: loss recorded on another tape");
  if (consumed_) throw StateError("backward called twice on the same forward pass");
  const Matrix& lv = nodes_[loss.id].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw DimensionError("backward: loss must be 1x1, got " + lv.shape_string());
  }
  consumed_ = true;
  grad(loss.id)(0, 0) = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backprop || n.grad.empty()) continue;
    n.backprop(*this, i);
  }
}

// --- recorded operations ---------------------------------------------------

Var affine(Var x, Var w, Var b) {
  check_same_tape(x, w);
  check_same_tape(x, b);
  Matrix out = affine(x.value(), w.value(), b.value());
  const std::size_t xi = x.id, wi = w.id, bi = b.id;
  return x.tape->record(std::move(out), [xi, wi, bi](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(xi)) gemm_nt_acc(g, t.node_value(wi), t.grad(xi));
    gemm_tn_acc(t.node_value(xi), g, t.grad(wi));
    auto gb = t.grad(bi).values();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto gr = g.row(r);
      for (std::size_t c = 0; c < gr.size(); ++c) gb[c] += gr[c];
    }
  });
}

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  Matrix out = matmul(a.value(), b.value());
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), [ai, bi](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ai)) gemm_nt_acc(g, t.node_value(bi), t.grad(ai));
    if (t.requires_grad(bi)) gemm_tn_acc(t.node_value(ai), g, t.grad(bi));
  });
}

Var relu(Var x) {
  Matrix out = relu(x.value());
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), [xi](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& in = t.node_value(xi);
    auto gx = t.grad(xi).values();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (in.values()[i] > 0.0) gx[i] += g.values()[i];
  });
}

Var softmax_rows(Var x) {
  Matrix out = softmax_rows(x.value());
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), [xi](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& p = t.node_value(self);
    Matrix& gx = t.grad(xi);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < p.cols(); ++c) dot += g(r, c) * p(r, c);
      for (std::size_t c = 0; c < p.cols(); ++c) gx(r, c) += p(r, c) * (g(r, c) - dot);
    }
  });
}

Var scaled_dot_attention(Var q, Var k, Var v, std::size_t d_k, std::size_t group_rows) {
  check_same_tape(q, k);
  check_same_tape(q, v);
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  if (Q.cols() != d_k || K.cols() != d_k) {
    throw DimensionError("attention: Q " + Q.shape_string() + " and K " + K.shape_string() +
                         " must both have d_k=" + std::to_string(d_k) + " columns");
  }
  if (K.rows() != V.rows()) throw DimensionError(shapes("attention K/V rows", K, V));
  const std::size_t g = group_rows == 0 ? Q.rows() : group_rows;
  if (group_rows != 0 && (Q.rows() % g != 0 || K.rows() != Q.rows())) {
    throw DimensionError("attention: " + std::to_string(Q.rows()) +
                         " rows do not split into groups of " + std::to_string(g));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_k));
  const std::size_t groups = group_rows == 0 ? 1 : Q.rows() / g;
  const std::size_t keys = group_rows == 0 ? K.rows() : g;

  // Attention probabilities, one keys-wide row per query row.
  Matrix probs(Q.rows(), keys);
  Matrix out(Q.rows(), V.cols());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t q0 = gi * (group_rows == 0 ? Q.rows() : g);
    const std::size_t qn = group_rows == 0 ? Q.rows() : g;
    const std::size_t k0 = group_rows == 0 ? 0 : q0;
    for (std::size_t i = 0; i < qn; ++i) {
      auto prow = probs.row(q0 + i);
      auto qrow = Q.row(q0 + i);
      for (std::size_t j = 0; j < keys; ++j) {
        auto krow = K.row(k0 + j);
        double s = 0.0;
        for (std::size_t c = 0; c < d_k; ++c) s += qrow[c] * krow[c];
        prow[j] = s * scale;
      }
      softmax_row_inplace(prow);
      auto orow = out.row(q0 + i);
      for (std::size_t j = 0; j < keys; ++j) {
        auto vrow = V.row(k0 + j);
        for (std::size_t c = 0; c < V.cols(); ++c) orow[c] += prow[j] * vrow[c];
      }
    }
  }

  const std::size_t qi = q.id, ki = k.id, vi = v.id;
  return q.tape->record(std::move(out), [=, probs = std::move(probs)](Tape& t, std::size_t self) {
    const Matrix& gout = t.grad(self);
    const Matrix& Qv = t.node_value(qi);
    const Matrix& Kv = t.node_value(ki);
    const Matrix& Vv = t.node_value(vi);
    Matrix& gq = t.grad(qi);
    Matrix& gk = t.grad(ki);
    Matrix& gv = t.grad(vi);
    std::vector<double> dp(keys);
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t q0 = gi * (group_rows == 0 ? Qv.rows() : g);
      const std::size_t qn = group_rows == 0 ? Qv.rows() : g;
      const std::size_t k0 = group_rows == 0 ? 0 : q0;
      for (std::size_t i = 0; i < qn; ++i) {
        auto prow = probs.row(q0 + i);
        auto grow = gout.row(q0 + i);
        // dV += P^T dO ; dP = dO V^T
        double dot = 0.0;
        for (std::size_t j = 0; j < keys; ++j) {
          auto vrow = Vv.row(k0 + j);
          auto gvrow = gv.row(k0 + j);
          double s = 0.0;
          for (std::size_t c = 0; c < Vv.cols(); ++c) {
            gvrow[c] += prow[j] * grow[c];
            s += grow[c] * vrow[c];
          }
          dp[j] = s;
          dot += s * prow[j];
        }
        // dS = P * (dP - <dP, P>), scaled into dQ and dK.
        auto qrow = Qv.row(q0 + i);
        auto gqrow = gq.row(q0 + i);
        for (std::size_t j = 0; j < keys; ++j) {
          const double ds = prow[j] * (dp[j] - dot) * scale;
          if (ds == 0.0) continue;
          auto krow = Kv.row(k0 + j);
          auto gkrow = gk.row(k0 + j);
          for (std::size_t c = 0; c < d_k; ++c) {
            gqrow[c] += ds * krow[c];
            gkrow[c] += ds * qrow[c];
          }
        }
      }
    }
  });
}

Var select_rows(Var x, std::size_t offset, std::size_t stride) {
  const Matrix& in = x.value();
  if (stride == 0 || offset >= stride || in.rows() % stride != 0) {
    throw DimensionError("select_rows: offset " + std::to_string(offset) + " / stride " +
                         std::to_string(stride) + " do not fit " + in.shape_string());
  }
  const std::size_t n = in.rows() / stride;
  Matrix out(n, in.cols());
  for (std::size_t r = 0; r < n; ++r) {
    auto src = in.row(r * stride + offset);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), [xi, offset, stride](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(xi);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto src = g.row(r);
      auto dst = gx.row(r * stride + offset);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

Var mse(Var prediction, const Matrix& target) {
  const Matrix& p = prediction.value();
  if (!p.same_shape(target)) throw DimensionError(shapes("mse", p, target));
  if (p.empty()) throw ContractError("mse: empty prediction");
  const double n = static_cast<double>(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p.values()[i] - target.values()[i];
    total += d * d;
  }
  const std::size_t pi = prediction.id;
  return prediction.tape->record(Matrix(1, 1, total / n), [pi, target, n](Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    const Matrix& pv = t.node_value(pi);
    auto gp = t.grad(pi).values();
    for (std::size_t i = 0; i < gp.size(); ++i) {
      gp[i] += g * 2.0 * (pv.values()[i] - target.values()[i]) / n;
    }
  });
}

Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  const std::size_t xi = x.id;
  return x.tape->record(Matrix(1, 1, total), [xi](Tape& t, std::size_t self) {
    const double g = t.grad(self)(0, 0);
    for (double& v : t.grad(xi).values()) v += g;
  });
}

// --- optimisation helpers --------------------------------------------------

std::vector<Matrix> finite_difference_grad(const std::function<double()>& f,
                                           std::span<ParamTensor* const> params, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_difference_grad: eps must be positive");
  std::vector<Matrix> grads;
  grads.reserve(params.size());
  for (ParamTensor* p : params) {
    Matrix g(p->value.rows(), p->value.cols());
    auto vals = p->value.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + eps;
      const double up = f();
      vals[i] = orig - eps;
      const double down = f();
      vals[i] = orig;
      g.values()[i] = (up - down) / (2.0 * eps);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

void sgd_step(std::span<ParamTensor* const> params, double learning_rate) {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ContractError("sgd_step: learning rate must be finite and non-negative");
  }
  for (ParamTensor* p : params) {
    if (!p->value.same_shape(p->grad)) {
      throw DimensionError("sgd_step: " + p->name + " value " + p->value.shape_string() +
                           " vs grad " + p->grad.shape_string());
    }
    auto v = p->value.values();
    auto g = p->grad.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= learning_rate * g[i];
  }
}

// --- randomness ------------------------------------------------------------

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  // Box-Muller; one draw per call keeps the stream layout simple.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw ContractError("Rng::below(0)");
  // Rejection sampling for an unbiased index.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> stream) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(master);
  for (std::uint64_t s : stream) h = mix(h ^ mix(s));
  return h;
}

}  // namespace pvfl
