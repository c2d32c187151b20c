#pragma once

// Minimal reverse-mode autodiff over dense double matrices, plus the network
// blocks the denoiser is built from. Graphs are built per forward pass; only
// parameter gradients persist across passes. Everything is 64-bit and
// single-threaded per graph, so identical seeds give bit-identical results.

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mocpose/common.hpp"
#include "mocpose/rng.hpp"

namespace mocpose::ad {

using Mat = Eigen::MatrixXd;

namespace detail {
inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}
}  // namespace detail

struct Node {
  Mat value;
  Mat grad;  // empty until needed
  bool requires_grad = false;
  bool is_parameter = false;
  bool backward_done = false;
  std::int64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pulls self.grad into parents

  bool has_grad() const { return grad.size() != 0; }
  void ensure_grad() {
    if (!has_grad()) grad = Mat::Zero(value.rows(), value.cols());
  }
};

inline std::int64_t next_node_id() {
  static std::atomic<std::int64_t> counter{0};
  return ++counter;
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor constant(Mat v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->id = next_node_id();
    return Tensor(std::move(n));
  }

  static Tensor parameter(Mat v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->is_parameter = true;
    n->id = next_node_id();
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Mat& value() const { return node_->value; }
  Mat& mutable_value() { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  bool has_grad() const { return node_->has_grad(); }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Tensor make_op(Mat value, std::vector<std::shared_ptr<Node>> parents,
                      std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backprop = std::move(backprop);
  n->id = next_node_id();
  return Tensor(std::move(n));
}

}  // namespace detail

// -----------------------------------------------------------------------------
// primitive operations

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: incompatible shapes " +
                                detail::shape_str(a.rows(), a.cols()) + " and " +
                                detail::shape_str(b.rows(), b.cols()));
  Mat v = a.value() * b.value();
  return detail::make_op(std::move(v), {a.node(), b.node()}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      pa.grad.noalias() += self.grad * pb.value.transpose();
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      pb.grad.noalias() += pa.value.transpose() * self.grad;
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("add: shape mismatch " + detail::shape_str(a.rows(), a.cols()) +
                                " vs " + detail::shape_str(b.rows(), b.cols()));
  return detail::make_op(a.value() + b.value(), {a.node(), b.node()}, [](Node& self) {
    for (int i = 0; i < 2; ++i) {
      auto& p = *self.parents[static_cast<std::size_t>(i)];
      if (p.requires_grad) {
        p.ensure_grad();
        p.grad += self.grad;
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("sub: shape mismatch " + detail::shape_str(a.rows(), a.cols()) +
                                " vs " + detail::shape_str(b.rows(), b.cols()));
  return detail::make_op(a.value() - b.value(), {a.node(), b.node()}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      pa.grad += self.grad;
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      pb.grad -= self.grad;
    }
  });
}

// broadcast a 1 x d row over every row of a
inline Tensor add_rowvec(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw std::invalid_argument("add_rowvec: need 1x" + std::to_string(a.cols()) + ", got " +
                                detail::shape_str(row.rows(), row.cols()));
  Mat v = a.value().rowwise() + row.value().row(0);
  return detail::make_op(std::move(v), {a.node(), row.node()}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pr = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      pa.grad += self.grad;
    }
    if (pr.requires_grad) {
      pr.ensure_grad();
      pr.grad.row(0) += self.grad.colwise().sum();
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::make_op(a.value() * s, {a.node()}, [s](Node& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) {
      p.ensure_grad();
      p.grad += self.grad * s;
    }
  });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("hadamard: shape mismatch");
  return detail::make_op(a.value().cwiseProduct(b.value()), {a.node(), b.node()}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      pa.grad += self.grad.cwiseProduct(pb.value);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      pb.grad += self.grad.cwiseProduct(pa.value);
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  return detail::make_op(a.value().transpose(), {a.node()}, [](Node& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) {
      p.ensure_grad();
      p.grad += self.grad.transpose();
    }
  });
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("concat_rows: column mismatch");
  Mat v(a.rows() + b.rows(), a.cols());
  v.topRows(a.rows()) = a.value();
  v.bottomRows(b.rows()) = b.value();
  const Eigen::Index ra = a.rows();
  return detail::make_op(std::move(v), {a.node(), b.node()}, [ra](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      pa.grad += self.grad.topRows(ra);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      pb.grad += self.grad.bottomRows(self.grad.rows() - ra);
    }
  });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row mismatch");
  Mat v(a.rows(), a.cols() + b.cols());
  v.leftCols(a.cols()) = a.value();
  v.rightCols(b.cols()) = b.value();
  const Eigen::Index ca = a.cols();
  return detail::make_op(std::move(v), {a.node(), b.node()}, [ca](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      pa.grad += self.grad.leftCols(ca);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      pb.grad += self.grad.rightCols(self.grad.cols() - ca);
    }
  });
}

inline Tensor slice_rows(const Tensor& a, Eigen::Index first, Eigen::Index count) {
  if (first < 0 || count < 0 || first + count > a.rows())
    throw std::invalid_argument("slice_rows: range out of bounds");
  Mat v = a.value().middleRows(first, count);
  return detail::make_op(std::move(v), {a.node()}, [first, count](Node& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) {
      p.ensure_grad();
      p.grad.middleRows(first, count) += self.grad;
    }
  });
}

inline Tensor slice_cols(const Tensor& a, Eigen::Index first, Eigen::Index count) {
  if (first < 0 || count < 0 || first + count > a.cols())
    throw std::invalid_argument("slice_cols: range out of bounds");
  Mat v = a.value().middleCols(first, count);
  return detail::make_op(std::move(v), {a.node()}, [first, count](Node& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) {
      p.ensure_grad();
      p.grad.middleCols(first, count) += self.grad;
    }
  });
}

// Row-major reshape: element order follows rows of the source.
inline Tensor reshape(const Tensor& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.rows() * a.cols())
    throw std::invalid_argument("reshape: element count mismatch " +
                                detail::shape_str(a.rows(), a.cols()) + " -> " +
                                detail::shape_str(rows, cols));
  const Eigen::Index src_cols = a.cols();
  Mat v(rows, cols);
  for (Eigen::Index i = 0; i < rows * cols; ++i)
    v(i / cols, i % cols) = a.value()(i / src_cols, i % src_cols);
  return detail::make_op(std::move(v), {a.node()}, [src_cols](Node& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) {
      p.ensure_grad();
      const Eigen::Index cols = self.grad.cols();
      for (Eigen::Index i = 0; i < self.grad.size(); ++i)
        p.grad(i / src_cols, i % src_cols) += self.grad(i / cols, i % cols);
    }
  });
}

inline Tensor softmax_rows(const Tensor& a) {
  Mat v(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    double m = a.value().row(r).maxCoeff();
    Eigen::RowVectorXd e = (a.value().row(r).array() - m).exp();
    v.row(r) = e / e.sum();
  }
  return detail::make_op(std::move(v), {a.node()}, [](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (Eigen::Index r = 0; r < self.grad.rows(); ++r) {
      double dot = self.grad.row(r).dot(self.value.row(r));
      p.grad.row(r) += (self.value.row(r).array() * (self.grad.row(r).array() - dot)).matrix();
    }
  });
}

inline Tensor gelu(const Tensor& a) {
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  Mat v = a.value().unaryExpr([inv_sqrt2](double x) {
    return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  });
  return detail::make_op(std::move(v), {a.node()}, [inv_sqrt2](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    p.grad += self.grad.cwiseProduct(p.value.unaryExpr([&](double x) {
      double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double pdf = std::exp(-0.5 * x * x) * inv_sqrt2pi;
      return phi + x * pdf;
    }));
  });
}

// Per-row standardization followed by the learned affine map. gain and bias
// are 1 x d.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-6) {
  if (x.cols() < 1) throw std::invalid_argument("layer_norm: empty rows");
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 || bias.cols() != x.cols())
    throw std::invalid_argument("layer_norm: gain/bias must be 1x" + std::to_string(x.cols()));
  const Eigen::Index rows = x.rows(), cols = x.cols();
  Mat xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    double m = x.value().row(r).mean();
    double var = (x.value().row(r).array() - m).square().mean();
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    xhat.row(r) = (x.value().row(r).array() - m) * inv;
  }
  Mat v = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
          bias.value().row(0).array();
  return detail::make_op(std::move(v), {x.node(), gain.node(), bias.node()},
                         [xhat, inv_std](Node& self) {
                           auto& px = *self.parents[0];
                           auto& pg = *self.parents[1];
                           auto& pb = *self.parents[2];
                           const Eigen::Index cols = self.grad.cols();
                           if (pg.requires_grad) {
                             pg.ensure_grad();
                             pg.grad.row(0) += self.grad.cwiseProduct(xhat).colwise().sum();
                           }
                           if (pb.requires_grad) {
                             pb.ensure_grad();
                             pb.grad.row(0) += self.grad.colwise().sum();
                           }
                           if (px.requires_grad) {
                             px.ensure_grad();
                             for (Eigen::Index r = 0; r < self.grad.rows(); ++r) {
                               Eigen::RowVectorXd dxh =
                                   self.grad.row(r).cwiseProduct(pg.value.row(0));
                               double mean_dxh = dxh.mean();
                               double mean_dxh_xh = dxh.cwiseProduct(xhat.row(r)).mean();
                               px.grad.row(r) +=
                                   inv_std[r] *
                                   (dxh.array() - mean_dxh - xhat.row(r).array() * mean_dxh_xh)
                                       .matrix();
                             }
                           }
                         });
}

inline Tensor sum(const Tensor& a) {
  Mat v(1, 1);
  v(0, 0) = a.value().sum();
  return detail::make_op(std::move(v), {a.node()}, [](Node& self) {
    auto& p = *self.parents[0];
    if (p.requires_grad) {
      p.ensure_grad();
      p.grad.array() += self.grad(0, 0);
    }
  });
}

// sum of squared differences (no mean: batch averaging is explicit where wanted)
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw std::invalid_argument("mse_loss: shape mismatch " +
                                detail::shape_str(pred.rows(), pred.cols()) + " vs " +
                                detail::shape_str(target.rows(), target.cols()));
  Mat diff = pred.value() - target.value();
  Mat v(1, 1);
  v(0, 0) = diff.squaredNorm();
  return detail::make_op(std::move(v), {pred.node(), target.node()}, [diff](Node& self) {
    auto& pp = *self.parents[0];
    auto& pt = *self.parents[1];
    double g = self.grad(0, 0);
    if (pp.requires_grad) {
      pp.ensure_grad();
      pp.grad += 2.0 * g * diff;
    }
    if (pt.requires_grad) {
      pt.ensure_grad();
      pt.grad -= 2.0 * g * diff;
    }
  });
}

// -----------------------------------------------------------------------------
// backward

inline void backward(const Tensor& loss) {
  if (loss.rows() != 1 || loss.cols() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                detail::shape_str(loss.rows(), loss.cols()));
  Node* root = loss.node().get();
  if (root->backward_done)
    throw std::logic_error("backward: already called on this graph; build a new forward pass");
  root->backward_done = true;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  // creation ids are topological: every op node is newer than its parents
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });

  root->grad = Mat::Ones(1, 1);
  for (Node* n : order) {
    if (n->backprop && n->has_grad()) n->backprop(*n);
  }
}

// -----------------------------------------------------------------------------
// embeddings

// Interleaved (sin, cos) pairs over geometric frequencies; the standard
// transformer encoding.
inline Eigen::RowVectorXd sinusoidal_embedding(double step, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: dim must be even");
  Eigen::RowVectorXd out(dim);
  for (int i = 0; i < dim / 2; ++i) {
    double freq = std::exp(-std::log(10000.0) * (2.0 * i) / dim);
    out[2 * i] = std::sin(step * freq);
    out[2 * i + 1] = std::cos(step * freq);
  }
  return out;
}

inline Mat positional_encoding(int positions, int dim) {
  Mat out(positions, dim);
  for (int p = 0; p < positions; ++p) out.row(p) = sinusoidal_embedding(p, dim);
  return out;
}

// -----------------------------------------------------------------------------
// attention

// Scaled dot-product attention with the model dimension split across heads;
// head outputs are concatenated back. Learned projections live in the layers
// that use this op. `mask` is added to the logits when given.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                                   const Mat* mask = nullptr) {
  if (q.cols() != k.cols() || k.rows() != v.rows() || q.cols() != v.cols())
    throw std::invalid_argument("multi_head_attention: incompatible shapes");
  if (heads < 1 || q.cols() % heads != 0)
    throw std::invalid_argument("multi_head_attention: model dim not divisible by heads");
  const Eigen::Index dh = q.cols() / heads;
  Tensor out;
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor logits = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (mask != nullptr) {
      if (mask->rows() != logits.rows() || mask->cols() != logits.cols())
        throw std::invalid_argument("multi_head_attention: mask shape mismatch");
      logits = add(logits, Tensor::constant(*mask));
    }
    Tensor oh = matmul(softmax_rows(logits), vh);
    out = h == 0 ? oh : concat_cols(out, oh);
  }
  return out;
}

// -----------------------------------------------------------------------------
// parameters and optimizer

struct ParamStore {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  Tensor create_glorot(const std::string& name, Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Mat m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(-limit, limit);
    return push(name, std::move(m));
  }

  Tensor create_zeros(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    return push(name, Mat::Zero(rows, cols));
  }

  Tensor create_ones(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    return push(name, Mat::Ones(rows, cols));
  }

  Tensor push(const std::string& name, Mat m) {
    names.push_back(name);
    tensors.push_back(Tensor::parameter(std::move(m)));
    return tensors.back();
  }

  std::size_t size() const { return tensors.size(); }

  void zero_grad() {
    for (auto& t : tensors) {
      t.node()->ensure_grad();
      t.node()->grad.setZero();
    }
  }
};

struct AdamConfig {
  double lr = 4e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig cfg;
  long step = 0;
  std::vector<Mat> m;
  std::vector<Mat> v;

  static AdamState init(const ParamStore& params, const AdamConfig& cfg) {
    AdamState st;
    st.cfg = cfg;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& t : params.tensors) {
      st.m.emplace_back(Mat::Zero(t.rows(), t.cols()));
      st.v.emplace_back(Mat::Zero(t.rows(), t.cols()));
    }
    return st;
  }
};

// standard bias-corrected update; gradients must have been populated
inline void adam_step(ParamStore& params, AdamState& st) {
  if (st.m.size() != params.size()) throw std::invalid_argument("adam_step: state size mismatch");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Node& n = *params.tensors[i].node();
    if (!n.has_grad())
      throw NumericError("adam_step: missing gradient for parameter " + params.names[i]);
    st.m[i] = st.cfg.beta1 * st.m[i] + (1.0 - st.cfg.beta1) * n.grad;
    st.v[i] = st.cfg.beta2 * st.v[i] + (1.0 - st.cfg.beta2) * n.grad.cwiseProduct(n.grad);
    Mat mhat = st.m[i] / bc1;
    Mat vhat = st.v[i] / bc2;
    n.value.array() -= st.cfg.lr * mhat.array() / (vhat.array().sqrt() + st.cfg.eps);
  }
}

// -----------------------------------------------------------------------------
// layers

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  static Linear create(ParamStore& store, const std::string& name, Eigen::Index in,
                       Eigen::Index out, Rng& rng) {
    Linear l;
    l.weight = store.create_glorot(name + ".W", in, out, rng);
    l.bias = store.create_zeros(name + ".b", 1, out);
    return l;
  }

  Tensor forward(const Tensor& x) const { return add_rowvec(matmul(x, weight), bias); }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm create(ParamStore& store, const std::string& name, Eigen::Index dim) {
    LayerNorm ln;
    ln.gain = store.create_ones(name + ".g", 1, dim);
    ln.bias = store.create_zeros(name + ".b", 1, dim);
    return ln;
  }

  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct AttentionBlock {
  Linear wq, wk, wv, wo;
  int heads = 4;

  static AttentionBlock create(ParamStore& store, const std::string& name, Eigen::Index dim,
                               int heads, Rng& rng) {
    AttentionBlock b;
    b.heads = heads;
    b.wq = Linear::create(store, name + ".wq", dim, dim, rng);
    b.wk = Linear::create(store, name + ".wk", dim, dim, rng);
    b.wv = Linear::create(store, name + ".wv", dim, dim, rng);
    b.wo = Linear::create(store, name + ".wo", dim, dim, rng);
    return b;
  }

  // keys/values of a fixed context, reusable across forward passes in one graph
  std::pair<Tensor, Tensor> context_kv(const Tensor& context) const {
    return {wk.forward(context), wv.forward(context)};
  }

  Tensor forward_self(const Tensor& x) const {
    return wo.forward(multi_head_attention(wq.forward(x), wk.forward(x), wv.forward(x), heads));
  }

  Tensor forward_cross(const Tensor& x, const Tensor& keys, const Tensor& values) const {
    return wo.forward(multi_head_attention(wq.forward(x), keys, values, heads));
  }
};

struct FeedForward {
  Linear in, out;

  static FeedForward create(ParamStore& store, const std::string& name, Eigen::Index dim,
                            Eigen::Index hidden, Rng& rng) {
    FeedForward f;
    f.in = Linear::create(store, name + ".ff1", dim, hidden, rng);
    f.out = Linear::create(store, name + ".ff2", hidden, dim, rng);
    return f;
  }

  Tensor forward(const Tensor& x) const { return out.forward(gelu(in.forward(x))); }
};

// pre-norm transformer layer; the cross-attention block is only materialized
// for decoder layers
struct TransformerLayer {
  LayerNorm ln_self, ln_ff;
  AttentionBlock self_attn;
  FeedForward ff;
  bool has_cross = false;
  LayerNorm ln_cross;
  AttentionBlock cross_attn;

  static TransformerLayer create(ParamStore& store, const std::string& name, Eigen::Index dim,
                                 int heads, Eigen::Index hidden, bool with_cross, Rng& rng) {
    TransformerLayer l;
    l.ln_self = LayerNorm::create(store, name + ".ln1", dim);
    l.self_attn = AttentionBlock::create(store, name + ".self", dim, heads, rng);
    if (with_cross) {
      l.has_cross = true;
      l.ln_cross = LayerNorm::create(store, name + ".lnx", dim);
      l.cross_attn = AttentionBlock::create(store, name + ".cross", dim, heads, rng);
    }
    l.ln_ff = LayerNorm::create(store, name + ".ln2", dim);
    l.ff = FeedForward::create(store, name + ".ff", dim, hidden, rng);
    return l;
  }

  Tensor forward(const Tensor& x_in, const Tensor* cross_k = nullptr,
                 const Tensor* cross_v = nullptr) const {
    Tensor x = add(x_in, self_attn.forward_self(ln_self.forward(x_in)));
    if (has_cross) {
      if (cross_k == nullptr || cross_v == nullptr)
        throw std::invalid_argument("transformer layer: missing cross-attention context");
      x = add(x, cross_attn.forward_cross(ln_cross.forward(x), *cross_k, *cross_v));
    }
    return add(x, ff.forward(ln_ff.forward(x)));
  }
};

// -----------------------------------------------------------------------------
// named-tensor binary container (checkpoints)

inline constexpr std::uint8_t kTensorFileVersion = 1;

namespace detail {
inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
inline void write_f64(std::ostream& os, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline double read_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}
}  // namespace detail

// version byte, manifest (names and shapes), then a little-endian f64 payload
inline void save_named_tensors(const std::filesystem::path& path,
                               const std::vector<std::pair<std::string, Mat>>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write tensor file: " + path.string());
  os.put(static_cast<char>(kTensorFileVersion));
  detail::write_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, m] : entries) {
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(m.rows()));
    detail::write_u32(os, static_cast<std::uint32_t>(m.cols()));
  }
  for (const auto& [name, m] : entries)
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) detail::write_f64(os, m(r, c));
  if (!os) throw DataError("failed writing tensor file: " + path.string());
}

inline std::vector<std::pair<std::string, Mat>> load_named_tensors(
    const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read tensor file: " + path.string());
  int version = is.get();
  if (version != kTensorFileVersion)
    throw DataError("unsupported tensor file version in " + path.string());
  std::uint32_t count = detail::read_u32(is);
  std::vector<std::pair<std::string, Mat>> entries(count);
  for (auto& [name, m] : entries) {
    std::uint32_t len = detail::read_u32(is);
    name.resize(len);
    is.read(name.data(), len);
    std::uint32_t rows = detail::read_u32(is), cols = detail::read_u32(is);
    m.resize(rows, cols);
  }
  for (auto& [name, m] : entries)
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = detail::read_f64(is);
  if (!is) throw DataError("truncated tensor file: " + path.string());
  return entries;
}

}  // namespace mocpose::ad
