#include "nli/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "nli/error.hpp"

namespace nli {

template <typename T>
Parameter<T>::Parameter(std::string n, Tensor<T> v, bool t)
    : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(t) {}

template <typename T>
void Parameter<T>::zero_grad() {
  if (grad.shape() != value.shape() || grad.size() != value.size())
    grad = Tensor<T>(value.shape());
  else
    grad.fill(T{0});
}

// --- BackwardContext --------------------------------------------------------

template <typename T>
const Tensor<T>& BackwardContext<T>::output() const {
  return tape_.value(node_);
}

template <typename T>
const Tensor<T>& BackwardContext<T>::input(std::size_t k) const {
  return tape_.value(tape_.inputs(node_)[k]);
}

template <typename T>
bool BackwardContext<T>::wants(std::size_t k) const {
  return tape_.requires_grad(tape_.inputs(node_)[k]);
}

template <typename T>
Tensor<T>& BackwardContext<T>::input_grad(std::size_t k) {
  return tape_.grad_buffer(tape_.inputs(node_)[k]);
}

// --- Tape -------------------------------------------------------------------

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.op = "constant";
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  Node n;
  n.op = "variable";
  n.owned = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& p) {
  Node n;
  n.op = "parameter";
  n.external = &p.value;
  n.param = &p;
  n.requires_grad = p.trainable;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::view(const Tensor<T>& value) {
  Node n;
  n.op = "view";
  n.external = &value;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node n;
  n.op = op;
  n.owned = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
const Tensor<T>& Tape<T>::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.owned;
}

template <typename T>
const Tensor<T>& Tape<T>::grad(std::size_t id) const {
  return nodes_[id].grad;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Tensor<T>(value(id).shape());
  return n.grad;
}

template <typename T>
void Tape<T>::corrupt_backward(std::string op, T factor) {
  corrupt_op_ = std::move(op);
  corrupt_factor_ = factor;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (!loss.valid() || &loss.tape() != this) throw UsageError("loss was not recorded on this tape");
  const std::size_t root = loss.id();
  if (value(root).size() != 1)
    throw UsageError("backward needs a scalar loss, got shape " + shape_string(value(root).shape()));
  for (auto& n : nodes_) n.grad = Tensor<T>();
  if (!nodes_[root].requires_grad) return;
  grad_buffer(root).fill(T{1});

  for (std::size_t id = root + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.param) {
      if (n.param->trainable) {
        if (n.param->grad.size() != n.param->value.size()) n.param->zero_grad();
        auto dst = n.param->grad.values();
        auto src = n.grad.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
      continue;
    }
    if (!n.backward) continue;
    if (!corrupt_op_.empty() && corrupt_op_ == n.op) {
      Tensor<T> scaled = n.grad;
      for (auto& v : scaled.values()) v *= corrupt_factor_;
      BackwardContext<T> ctx(*this, id, scaled);
      n.backward(ctx);
    } else {
      BackwardContext<T> ctx(*this, id, n.grad);
      n.backward(ctx);
    }
  }
}

// --- helpers ----------------------------------------------------------------

namespace {

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (&a.tape() != &b.tape()) throw UsageError("operands recorded on different tapes");
}

template <typename T>
void require_same_shape(const char* op, Var<T> a, Var<T> b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename T, typename F, typename G>
Var<T> unary(const char* op, Var<T> x, F forward, G derivative) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = forward(xv[i]);
  return x.tape().record(op, std::move(out), {x.id()}, [derivative](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad();
    const auto& in = ctx.input(0);
    const auto& outv = ctx.output();
    auto& dx = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * derivative(in[i], outv[i]);
  });
}

void check_mask(const char* op, const Mask& mask, std::size_t rows) {
  if (mask.size() != rows)
    throw DimensionError(std::string(op) + ": mask length " + std::to_string(mask.size()) + " vs " +
                         std::to_string(rows) + " rows");
}

void check_groups(const char* op, std::size_t rows, std::size_t groups) {
  if (groups == 0 || rows % groups != 0)
    throw DimensionError(std::string(op) + ": " + std::to_string(rows) + " rows not divisible into " +
                         std::to_string(groups) + " sequences");
}

// Scores may be [n] or [n x 1]; either way there is one score per row.
template <typename T>
std::size_t score_count(const char* op, const Tensor<T>& s) {
  if (s.rank() == 1) return s.size();
  if (s.rank() == 2 && s.cols() == 1) return s.rows();
  throw DimensionError(std::string(op) + ": scores must be [n] or [n x 1], got " + shape_string(s.shape()));
}

}  // namespace

// --- linear algebra ---------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows())
    throw DimensionError("matmul: cannot multiply " + shape_string(av.shape()) + " by " + shape_string(bv.shape()));
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor<T> out(Shape{m, n});
  kernels::gemm_nn(m, k, n, av.data(), bv.data(), out.data());
  return a.tape().record("matmul", std::move(out), {a.id(), b.id()}, [m, k, n](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad();
    if (ctx.wants(0)) {
      // dA = dC * B^T
      const Tensor<T> bt = kernels::transpose(ctx.input(1));
      kernels::gemm_nn(m, n, k, g.data(), bt.data(), ctx.input_grad(0).data());
    }
    if (ctx.wants(1)) {
      // dB = A^T * dC
      kernels::gemm_tn(m, k, n, ctx.input(0).data(), g.data(), ctx.input_grad(1).data());
    }
  });
}

template <typename T>
Var<T> transpose(Var<T> x) {
  const auto& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("transpose: needs a matrix, got " + shape_string(xv.shape()));
  return x.tape().record("transpose", kernels::transpose(xv), {x.id()}, [](BackwardContext<T>& ctx) {
    accumulate(ctx.input_grad(0), kernels::transpose(ctx.grad()));
  });
}

// --- elementwise ------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  require_same_shape("add", a, b);
  Tensor<T> out = a.value();
  accumulate(out, b.value());
  return a.tape().record("add", std::move(out), {a.id(), b.id()}, [](BackwardContext<T>& ctx) {
    if (ctx.wants(0)) accumulate(ctx.input_grad(0), ctx.grad());
    if (ctx.wants(1)) accumulate(ctx.input_grad(1), ctx.grad());
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  require_same_shape("sub", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape().record("sub", std::move(out), {a.id(), b.id()}, [](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad();
    if (ctx.wants(0)) accumulate(ctx.input_grad(0), g);
    if (ctx.wants(1)) {
      auto& d = ctx.input_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  require_same_shape("mul", a, b);
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record("mul", std::move(out), {a.id(), b.id()}, [](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad();
    if (ctx.wants(0)) {
      auto& d = ctx.input_grad(0);
      const auto& other = ctx.input(1);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * other[i];
    }
    if (ctx.wants(1)) {
      auto& d = ctx.input_grad(1);
      const auto& other = ctx.input(0);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * other[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= factor;
  return x.tape().record("scale", std::move(out), {x.id()}, [factor](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad();
    auto& d = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> add_row_bias(Var<T> x, Var<T> bias) {
  require_same_tape(x, bias);
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (xv.rank() != 2 || bv.size() != xv.cols() || bv.rows() != 1)
    throw DimensionError("add_row_bias: bias " + shape_string(bv.shape()) + " does not match rows of " +
                         shape_string(xv.shape()));
  Tensor<T> out = xv;
  const std::size_t r = xv.rows(), c = xv.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) += bv[j];
  return x.tape().record("add_row_bias", std::move(out), {x.id(), bias.id()}, [r, c](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad();
    if (ctx.wants(0)) accumulate(ctx.input_grad(0), g);
    if (ctx.wants(1)) {
      auto& d = ctx.input_grad(1);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) d[j] += g.at(i, j);
    }
  });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  return unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> abs(Var<T> x) {
  return unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

// --- structural -------------------------------------------------------------

template <typename T>
Var<T> sum(Var<T> x) {
  T total{0};
  for (T v : x.value().values()) total += v;
  return x.tape().record("sum", Tensor<T>::scalar(total), {x.id()}, [](BackwardContext<T>& ctx) {
    const T g = ctx.grad()[0];
    for (auto& v : ctx.input_grad(0).values()) v += g;
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  return x.tape().record("reshape", x.value().reshaped(std::move(shape)), {x.id()}, [](BackwardContext<T>& ctx) {
    auto d = ctx.input_grad(0).values();
    auto g = ctx.grad().values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw InvalidInputError("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p);
    const auto& v = p.value();
    if (v.rank() != 2 || v.rows() != rows)
      throw DimensionError("concat_cols: " + shape_string(v.shape()) + " does not stack beside " +
                           shape_string(parts[0].shape()));
    widths.push_back(v.cols());
    ids.push_back(p.id());
    total += v.cols();
  }
  Tensor<T> out(Shape{rows, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t i = 0; i < rows; ++i) std::copy_n(v.row(i).data(), widths[k], out.row(i).data() + offset);
    offset += widths[k];
  }
  return parts[0].tape().record("concat_cols", std::move(out), std::move(ids),
                                [widths, rows](BackwardContext<T>& ctx) {
                                  const auto& g = ctx.grad();
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < widths.size(); ++k) {
                                    if (ctx.wants(k)) {
                                      auto& d = ctx.input_grad(k);
                                      for (std::size_t i = 0; i < rows; ++i)
                                        for (std::size_t j = 0; j < widths[k]; ++j) d.at(i, j) += g.at(i, off + j);
                                    }
                                    off += widths[k];
                                  }
                                });
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  if (xv.rank() != 2 || begin >= end || end > xv.cols())
    throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                         shape_string(xv.shape()));
  const std::size_t rows = xv.rows(), w = end - begin;
  Tensor<T> out(Shape{rows, w});
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(xv.row(i).data() + begin, w, out.row(i).data());
  return x.tape().record("slice_cols", std::move(out), {x.id()}, [begin, w, rows](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad();
    auto& d = ctx.input_grad(0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < w; ++j) d.at(i, begin + j) += g.at(i, j);
  });
}

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  if (xv.rank() != 2 || begin >= end || end > xv.rows())
    throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                         shape_string(xv.shape()));
  const std::size_t c = xv.cols();
  Tensor<T> out(Shape{end - begin, c});
  std::copy_n(xv.data() + begin * c, (end - begin) * c, out.data());
  return x.tape().record("slice_rows", std::move(out), {x.id()}, [begin, c](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad();
    T* d = ctx.input_grad(0).data() + begin * c;
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

template <typename T>
Var<T> stack_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw InvalidInputError("stack_rows: no inputs");
  const std::size_t c = parts[0].value().cols();
  std::vector<std::size_t> heights, ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_same_tape(parts[0], p);
    const auto& v = p.value();
    if (v.rank() != 2 || v.cols() != c)
      throw DimensionError("stack_rows: " + shape_string(v.shape()) + " does not stack under " +
                           shape_string(parts[0].shape()));
    heights.push_back(v.rows());
    ids.push_back(p.id());
    total += v.rows();
  }
  Tensor<T> out(Shape{total, c});
  T* dst = out.data();
  for (const auto& p : parts) dst = std::copy_n(p.value().data(), p.value().size(), dst);
  return parts[0].tape().record("stack_rows", std::move(out), std::move(ids), [heights, c](BackwardContext<T>& ctx) {
    const T* g = ctx.grad().data();
    for (std::size_t k = 0; k < heights.size(); ++k) {
      const std::size_t n = heights[k] * c;
      if (ctx.wants(k)) {
        T* d = ctx.input_grad(k).data();
        for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
      }
      g += n;
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::size_t> ids) {
  const auto& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("gather_rows: table must be a matrix, got " + shape_string(tv.shape()));
  if (ids.empty()) throw InvalidInputError("gather_rows: no ids");
  const std::size_t c = tv.cols();
  Tensor<T> out(Shape{ids.size(), c});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows())
      throw InvalidInputError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(tv.rows()) + " rows");
    std::copy_n(tv.row(ids[i]).data(), c, out.row(i).data());
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return table.tape().record("gather_rows", std::move(out), {table.id()}, [idx, c](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad();
    auto& d = ctx.input_grad(0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) d.at(idx[i], j) += g.at(i, j);
  });
}

template <typename T>
Var<T> repeat_rows(Var<T> x, std::size_t times) {
  const auto& xv = x.value();
  if (xv.rank() != 2 || times == 0) throw DimensionError("repeat_rows: needs a matrix and times >= 1");
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor<T> out(Shape{r * times, c});
  for (std::size_t t = 0; t < times; ++t) std::copy_n(xv.data(), r * c, out.data() + t * r * c);
  return x.tape().record("repeat_rows", std::move(out), {x.id()}, [r, c, times](BackwardContext<T>& ctx) {
    const T* g = ctx.grad().data();
    T* d = ctx.input_grad(0).data();
    for (std::size_t t = 0; t < times; ++t)
      for (std::size_t i = 0; i < r * c; ++i) d[i] += g[t * r * c + i];
  });
}

template <typename T>
Var<T> select_rows(const Mask& mask, Var<T> a, Var<T> b) {
  require_same_tape(a, b);
  require_same_shape("select_rows", a, b);
  check_mask("select_rows", mask, a.value().rows());
  const std::size_t c = a.value().cols();
  Tensor<T> out = b.value();
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) std::copy_n(a.value().row(i).data(), c, out.row(i).data());
  return a.tape().record("select_rows", std::move(out), {a.id(), b.id()}, [mask, c](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.wants(k)) continue;
      auto& d = ctx.input_grad(k);
      for (std::size_t i = 0; i < mask.size(); ++i)
        if ((mask[i] != 0) == (k == 0))
          for (std::size_t j = 0; j < c; ++j) d.at(i, j) += g.at(i, j);
    }
  });
}

template <typename T>
Var<T> mask_rows(Var<T> x, const Mask& mask) {
  check_mask("mask_rows", mask, x.value().rows());
  Tensor<T> out = x.value();
  const std::size_t c = out.cols();
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (!mask[i]) std::fill_n(out.row(i).data(), c, T{0});
  return x.tape().record("mask_rows", std::move(out), {x.id()}, [mask, c](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad();
    auto& d = ctx.input_grad(0);
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i])
        for (std::size_t j = 0; j < c; ++j) d.at(i, j) += g.at(i, j);
  });
}

// --- grouped sequence operations --------------------------------------------

template <typename T>
Var<T> masked_softmax(Var<T> scores, const Mask& mask, std::size_t groups) {
  const auto& sv = scores.value();
  const std::size_t n = score_count("masked_softmax", sv);
  check_mask("masked_softmax", mask, n);
  check_groups("masked_softmax", n, groups);
  Tensor<T> out(sv.shape());
  for (std::size_t g = 0; g < groups; ++g) {
    T hi = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t r = g; r < n; r += groups)
      if (mask[r]) {
        hi = any ? std::max(hi, sv[r]) : sv[r];
        any = true;
      }
    if (!any) throw InvalidInputError("masked_softmax: sequence " + std::to_string(g) + " has every position masked");
    T total{0};
    for (std::size_t r = g; r < n; r += groups)
      if (mask[r]) {
        out[r] = std::exp(sv[r] - hi);
        total += out[r];
      }
    for (std::size_t r = g; r < n; r += groups)
      if (mask[r]) out[r] /= total;
  }
  return scores.tape().record("masked_softmax", std::move(out), {scores.id()},
                              [mask, groups, n](BackwardContext<T>& ctx) {
                                const auto& gr = ctx.grad();
                                const auto& y = ctx.output();
                                auto& d = ctx.input_grad(0);
                                for (std::size_t g = 0; g < groups; ++g) {
                                  T dot{0};
                                  for (std::size_t r = g; r < n; r += groups)
                                    if (mask[r]) dot += gr[r] * y[r];
                                  for (std::size_t r = g; r < n; r += groups)
                                    if (mask[r]) d[r] += y[r] * (gr[r] - dot);
                                }
                              });
}

template <typename T>
Var<T> masked_reduce(ReduceOp op, Var<T> x, const Mask& mask, std::size_t groups) {
  const auto& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("masked_reduce: needs [n x d], got " + shape_string(xv.shape()));
  const std::size_t n = xv.rows(), d = xv.cols();
  check_mask("masked_reduce", mask, n);
  check_groups("masked_reduce", n, groups);

  std::vector<std::size_t> counts(groups, 0);
  for (std::size_t r = 0; r < n; ++r)
    if (mask[r]) ++counts[r % groups];
  for (std::size_t g = 0; g < groups; ++g)
    if (counts[g] == 0) throw InvalidInputError("masked_reduce: sequence " + std::to_string(g) + " is fully masked");

  Tensor<T> out(Shape{groups, d});
  // For max: which input row supplied each output component.
  std::vector<std::size_t> argmax;
  if (op == ReduceOp::max) {
    argmax.assign(groups * d, n);
    for (std::size_t r = 0; r < n; ++r) {
      if (!mask[r]) continue;
      const std::size_t g = r % groups;
      for (std::size_t j = 0; j < d; ++j) {
        std::size_t& best = argmax[g * d + j];
        // Strict comparison keeps the earliest row on ties.
        if (best == n || xv.at(r, j) > xv.at(best, j)) best = r;
      }
    }
    for (std::size_t k = 0; k < groups * d; ++k) out[k] = xv.at(argmax[k], k % d);
  } else {
    for (std::size_t r = 0; r < n; ++r) {
      if (!mask[r]) continue;
      T* o = out.row(r % groups).data();
      const T* row = xv.row(r).data();
      for (std::size_t j = 0; j < d; ++j) o[j] += row[j];
    }
    if (op == ReduceOp::mean)
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t j = 0; j < d; ++j) out.at(g, j) /= static_cast<T>(counts[g]);
  }

  const char* name = op == ReduceOp::mean ? "reduce_mean" : op == ReduceOp::sum ? "reduce_sum" : "reduce_max";
  return x.tape().record(name, std::move(out), {x.id()},
                         [op, mask, groups, n, d, counts, argmax](BackwardContext<T>& ctx) {
                           const auto& g = ctx.grad();
                           auto& dx = ctx.input_grad(0);
                           if (op == ReduceOp::max) {
                             for (std::size_t k = 0; k < groups * d; ++k) dx.at(argmax[k], k % d) += g[k];
                             return;
                           }
                           for (std::size_t r = 0; r < n; ++r) {
                             if (!mask[r]) continue;
                             const std::size_t grp = r % groups;
                             const T s = op == ReduceOp::mean ? T{1} / static_cast<T>(counts[grp]) : T{1};
                             for (std::size_t j = 0; j < d; ++j) dx.at(r, j) += g.at(grp, j) * s;
                           }
                         });
}

template <typename T>
Var<T> weighted_sum(Var<T> weights, Var<T> x, std::size_t groups) {
  require_same_tape(weights, x);
  const auto& wv = weights.value();
  const auto& xv = x.value();
  const std::size_t n = score_count("weighted_sum", wv);
  if (xv.rank() != 2 || xv.rows() != n)
    throw DimensionError("weighted_sum: weights " + shape_string(wv.shape()) + " vs values " +
                         shape_string(xv.shape()));
  check_groups("weighted_sum", n, groups);
  const std::size_t d = xv.cols();
  Tensor<T> out(Shape{groups, d});
  for (std::size_t r = 0; r < n; ++r) {
    const T w = wv[r];
    T* o = out.row(r % groups).data();
    const T* row = xv.row(r).data();
    for (std::size_t j = 0; j < d; ++j) o[j] += w * row[j];
  }
  return weights.tape().record("weighted_sum", std::move(out), {weights.id(), x.id()},
                               [groups, n, d](BackwardContext<T>& ctx) {
                                 const auto& g = ctx.grad();
                                 const auto& w = ctx.input(0);
                                 const auto& xs = ctx.input(1);
                                 if (ctx.wants(0)) {
                                   auto& dw = ctx.input_grad(0);
                                   for (std::size_t r = 0; r < n; ++r) {
                                     T acc{0};
                                     for (std::size_t j = 0; j < d; ++j) acc += g.at(r % groups, j) * xs.at(r, j);
                                     dw[r] += acc;
                                   }
                                 }
                                 if (ctx.wants(1)) {
                                   auto& dx = ctx.input_grad(1);
                                   for (std::size_t r = 0; r < n; ++r)
                                     for (std::size_t j = 0; j < d; ++j) dx.at(r, j) += w[r] * g.at(r % groups, j);
                                 }
                               });
}

template <typename T>
Var<T> reduce(ReduceOp op, Var<T> x, const Mask& mask) {
  const std::size_t d = x.value().cols();
  return reshape(masked_reduce(op, x, mask, 1), Shape{d});
}

// --- regularization and loss ------------------------------------------------

template <typename T>
Var<T> dropout(Var<T> x, double p, bool training, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const auto& xv = x.value();
  Tensor<T> keep(xv.shape());
  std::bernoulli_distribution survive(1.0 - p);
  const T inv = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    keep[i] = survive(rng) ? inv : T{0};
    out[i] = xv[i] * keep[i];
  }
  return x.tape().record("dropout", std::move(out), {x.id()}, [keep = std::move(keep)](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad();
    auto& d = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * keep[i];
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  Tensor<T> out(logits.shape());
  const std::size_t r = logits.rows(), c = logits.cols();
  for (std::size_t i = 0; i < r; ++i) {
    const auto row = logits.row(i);
    const T hi = *std::max_element(row.begin(), row.end());
    T total{0};
    for (std::size_t j = 0; j < c; ++j) total += (out.at(i, j) = std::exp(row[j] - hi));
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= total;
  }
  return out;
}

template <typename T>
Var<T> cross_entropy_from_logits(Var<T> logits, std::span<const int> labels) {
  const auto& lv = logits.value();
  if (lv.rank() != 2) throw DimensionError("cross_entropy: logits must be [b x c], got " + shape_string(lv.shape()));
  const std::size_t b = lv.rows(), c = lv.cols();
  if (labels.size() != b)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) +
                         " rows");
  for (std::size_t i = 0; i < b; ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
      throw DataError("cross_entropy: label " + std::to_string(labels[i]) + " out of range at example " +
                      std::to_string(i));
  Tensor<T> probs = softmax_rows(lv);
  T loss{0};
  for (std::size_t i = 0; i < b; ++i) {
    const auto row = lv.row(i);
    const T hi = *std::max_element(row.begin(), row.end());
    T total{0};
    for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - hi);
    loss += hi + std::log(total) - row[labels[i]];
  }
  loss /= static_cast<T>(b);
  std::vector<int> y(labels.begin(), labels.end());
  return logits.tape().record("cross_entropy", Tensor<T>::scalar(loss), {logits.id()},
                              [probs = std::move(probs), y, b, c](BackwardContext<T>& ctx) {
                                const T g = ctx.grad()[0] / static_cast<T>(b);
                                auto& d = ctx.input_grad(0);
                                for (std::size_t i = 0; i < b; ++i)
                                  for (std::size_t j = 0; j < c; ++j)
                                    d.at(i, j) += g * (probs.at(i, j) - (static_cast<int>(j) == y[i] ? T{1} : T{0}));
                              });
}

// --- instantiations ---------------------------------------------------------

#define NLI_INSTANTIATE(T)                                                                        \
  template struct Parameter<T>;                                                                   \
  template class BackwardContext<T>;                                                              \
  template class Tape<T>;                                                                         \
  template Var<T> matmul(Var<T>, Var<T>);                                                         \
  template Var<T> transpose(Var<T>);                                                              \
  template Var<T> add(Var<T>, Var<T>);                                                            \
  template Var<T> sub(Var<T>, Var<T>);                                                            \
  template Var<T> mul(Var<T>, Var<T>);                                                            \
  template Var<T> scale(Var<T>, T);                                                               \
  template Var<T> add_row_bias(Var<T>, Var<T>);                                                   \
  template Var<T> tanh(Var<T>);                                                                   \
  template Var<T> sigmoid(Var<T>);                                                                \
  template Var<T> relu(Var<T>);                                                                   \
  template Var<T> abs(Var<T>);                                                                    \
  template Var<T> sum(Var<T>);                                                                    \
  template Var<T> reshape(Var<T>, Shape);                                                         \
  template Var<T> concat_cols(const std::vector<Var<T>>&);                                        \
  template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                                   \
  template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                                   \
  template Var<T> stack_rows(const std::vector<Var<T>>&);                                         \
  template Var<T> gather_rows(Var<T>, std::span<const std::size_t>);                              \
  template Var<T> repeat_rows(Var<T>, std::size_t);                                               \
  template Var<T> select_rows(const Mask&, Var<T>, Var<T>);                                       \
  template Var<T> mask_rows(Var<T>, const Mask&);                                                 \
  template Var<T> masked_softmax(Var<T>, const Mask&, std::size_t);                               \
  template Var<T> masked_reduce(ReduceOp, Var<T>, const Mask&, std::size_t);                      \
  template Var<T> weighted_sum(Var<T>, Var<T>, std::size_t);                                      \
  template Var<T> reduce(ReduceOp, Var<T>, const Mask&);                                          \
  template Var<T> dropout(Var<T>, double, bool, std::mt19937_64&);                                \
  template Var<T> cross_entropy_from_logits(Var<T>, std::span<const int>);                        \
  template Tensor<T> softmax_rows(const Tensor<T>&);

NLI_INSTANTIATE(float)
NLI_INSTANTIATE(double)

#undef NLI_INSTANTIATE

}  // namespace nli
