#include "anchorcir/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "anchorcir/errors.hpp"

namespace anchorcir {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, nullptr});
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool rg = false;
  for (const Var& in : inputs) {
    if (in.tape != this) throw ContractError("operation mixes handles from different tapes");
    rg = rg || nodes_[in.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Tensor{}, rg, rg ? std::move(backward) : nullptr});
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Tensor(n.value.rows(), n.value.cols());
  return n.grad;
}

Tensor& Tape::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw ContractError("backward: root belongs to another tape");
  const Tensor& rv = nodes_[root.id].value;
  if (rv.rows() != 1 || rv.cols() != 1) {
    throw ContractError("backward: root must be a scalar, got " + shape_string(rv));
  }
  if (!nodes_[root.id].requires_grad) return;
  for (std::uint32_t i = 0; i <= root.id; ++i) {
    if (nodes_[i].backward) nodes_[i].grad = Tensor{};
  }
  grad_buffer(root.id)[0] += 1.0;
  for (std::uint32_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
}

void Tape::zero_grad() {
  for (Node& n : nodes_) n.grad = Tensor{};
}

void Tape::clear() { nodes_.clear(); }

namespace ad {
namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shapes differ: " + shape_string(a) + " vs " +
                         shape_string(b));
  }
}

void accumulate(Tape& t, Var target, const Tensor& delta) {
  if (!t.requires_grad(target)) return;
  Tensor& g = t.grad_buffer(target.id);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

Tape& tape_of(Var v) {
  if (v.tape == nullptr) throw ContractError("operation on an unbound Var");
  return *v.tape;
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  require_same_shape("add", av, b.value());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const Var ins[] = {a, b};
  return t.record(std::move(out), ins, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_buffer(self);
    accumulate(tp, a, g);
    accumulate(tp, b, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  require_same_shape("sub", av, b.value());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const Var ins[] = {a, b};
  return t.record(std::move(out), ins, [a, b](Tape& tp, std::uint32_t self) {
    Tensor g = tp.grad_buffer(self);
    accumulate(tp, a, g);
    for (double& v : g.data()) v = -v;
    accumulate(tp, b, g);
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a);
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const Var ins[] = {a, b};
  return t.record(std::move(out), ins, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    Tensor da(g.rows(), g.cols());
    Tensor db(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.size(); ++i) {
      da[i] = g[i] * bv[i];
      db[i] = g[i] * av[i];
    }
    accumulate(tp, a, da);
    accumulate(tp, b, db);
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  const Var ins[] = {a};
  return t.record(std::move(out), ins, [a, s](Tape& tp, std::uint32_t self) {
    Tensor g = tp.grad_buffer(self);
    for (double& v : g.data()) v *= s;
    accumulate(tp, a, g);
  });
}

Var add_row(Var x, Var bias) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw DimensionError("add_row: bias " + shape_string(bv) + " does not broadcast over " +
                         shape_string(xv));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv[j];
  const Var ins[] = {x, bias};
  return t.record(std::move(out), ins, [x, bias](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_buffer(self);
    accumulate(tp, x, g);
    if (tp.requires_grad(bias)) {
      Tensor& gb = tp.grad_buffer(bias.id);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += g(i, j);
    }
  });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a);
  Tensor out = anchorcir::matmul(a.value(), b.value());
  const Var ins[] = {a, b};
  return t.record(std::move(out), ins, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_buffer(self);
    if (tp.requires_grad(a)) accumulate(tp, a, anchorcir::matmul_bt(g, tp.value(b)));
    if (tp.requires_grad(b)) accumulate(tp, b, anchorcir::matmul_at(tp.value(a), g));
  });
}

Var matmul_bt(Var a, Var b) {
  Tape& t = tape_of(a);
  Tensor out = anchorcir::matmul_bt(a.value(), b.value());
  const Var ins[] = {a, b};
  return t.record(std::move(out), ins, [a, b](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_buffer(self);
    if (tp.requires_grad(a)) accumulate(tp, a, anchorcir::matmul(g, tp.value(b)));
    if (tp.requires_grad(b)) accumulate(tp, b, anchorcir::matmul_at(g, tp.value(a)));
  });
}

Var square(Var a) { return mul(a, a); }

Var transpose(Var a) {
  Tape& t = tape_of(a);
  const Var ins[] = {a};
  return t.record(anchorcir::transpose(a.value()), ins, [a](Tape& tp, std::uint32_t self) {
    accumulate(tp, a, anchorcir::transpose(tp.grad_buffer(self)));
  });
}

Var gelu(Var a) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  const Var ins[] = {a};
  return t.record(std::move(out), ins, [a](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& x = tp.value(a);
    Tensor d(g.rows(), g.cols());
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
      d[i] = g[i] * (cdf + x[i] * pdf);
    }
    accumulate(tp, a, d);
  });
}

Var softmax_rows(Var x) {
  Tape& t = tape_of(x);
  Tensor out = anchorcir::softmax_rows(x.value());
  const Var ins[] = {x};
  return t.record(std::move(out), ins, [x](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& y = tp.value(self);
    Tensor d(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double gy = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) gy += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < g.cols(); ++j) d(i, j) = y(i, j) * (g(i, j) - gy);
    }
    accumulate(tp, x, d);
  });
}

Var log_softmax_rows(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    auto r = xv.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < r.size(); ++j) out(i, j) = r[j] - lse;
  }
  const Var ins[] = {x};
  return t.record(std::move(out), ins, [x](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& y = tp.value(self);
    Tensor d(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) gs += g(i, j);
      for (std::size_t j = 0; j < g.cols(); ++j) d(i, j) = g(i, j) - std::exp(y(i, j)) * gs;
    }
    accumulate(tp, x, d);
  });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const std::size_t c = xv.cols();
  if (gamma.value().rows() != 1 || gamma.value().cols() != c || beta.value().rows() != 1 ||
      beta.value().cols() != c) {
    throw DimensionError("layer_norm_rows: gain/bias must be [1x" + std::to_string(c) + "]");
  }
  // Cache the normalized input and per-row inverse std for the backward rule.
  auto xhat = std::make_shared<Tensor>(xv.rows(), c);
  auto inv_std = std::make_shared<std::vector<double>>(xv.rows());
  Tensor out(xv.rows(), c);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    double mean = 0.0;
    for (double v : xv.row(i)) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : xv.row(i)) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xv(i, j) - mean) * is;
      (*xhat)(i, j) = h;
      out(i, j) = gv[j] * h + bv[j];
    }
  }
  const Var ins[] = {x, gamma, beta};
  return t.record(std::move(out), ins,
                  [x, gamma, beta, xhat, inv_std](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_buffer(self);
                    const Tensor& gv = tp.value(gamma);
                    const std::size_t rows = g.rows();
                    const std::size_t cols = g.cols();
                    if (tp.requires_grad(gamma) || tp.requires_grad(beta)) {
                      Tensor dg(1, cols);
                      Tensor db(1, cols);
                      for (std::size_t i = 0; i < rows; ++i)
                        for (std::size_t j = 0; j < cols; ++j) {
                          dg[j] += g(i, j) * (*xhat)(i, j);
                          db[j] += g(i, j);
                        }
                      accumulate(tp, gamma, dg);
                      accumulate(tp, beta, db);
                    }
                    if (!tp.requires_grad(x)) return;
                    Tensor dx(rows, cols);
                    const double inv_c = 1.0 / static_cast<double>(cols);
                    for (std::size_t i = 0; i < rows; ++i) {
                      double m1 = 0.0;
                      double m2 = 0.0;
                      for (std::size_t j = 0; j < cols; ++j) {
                        const double dh = g(i, j) * gv[j];
                        m1 += dh;
                        m2 += dh * (*xhat)(i, j);
                      }
                      m1 *= inv_c;
                      m2 *= inv_c;
                      for (std::size_t j = 0; j < cols; ++j) {
                        const double dh = g(i, j) * gv[j];
                        dx(i, j) = (*inv_std)[i] * (dh - m1 - (*xhat)(i, j) * m2);
                      }
                    }
                    accumulate(tp, x, dx);
                  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Tape& t = tape_of(parts[0]);
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) {
      throw DimensionError("concat_rows: column counts differ: " + shape_string(parts[0].value()) +
                           " vs " + shape_string(p.value()));
    }
    r += p.rows();
  }
  Tensor out(r, c);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    std::copy(pv.data().begin(), pv.data().end(), out.data().begin() + offset * c);
    offset += pv.rows();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record(std::move(out), ins, [ins](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_buffer(self);
    std::size_t off = 0;
    for (const Var& p : ins) {
      const Tensor& pv = tp.value(p);
      if (tp.requires_grad(p)) {
        Tensor& gp = tp.grad_buffer(p.id);
        for (std::size_t k = 0; k < pv.size(); ++k) gp[k] += g[off * g.cols() + k];
      }
      off += pv.rows();
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Tape& t = tape_of(parts[0]);
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const Var& p : parts) {
    if (p.rows() != r) {
      throw DimensionError("concat_cols: row counts differ: " + shape_string(parts[0].value()) +
                           " vs " + shape_string(p.value()));
    }
    c += p.cols();
  }
  Tensor out(r, c);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out(i, offset + j) = pv(i, j);
    offset += pv.cols();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record(std::move(out), ins, [ins](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_buffer(self);
    std::size_t off = 0;
    for (const Var& p : ins) {
      const Tensor& pv = tp.value(p);
      if (tp.requires_grad(p)) {
        Tensor& gp = tp.grad_buffer(p.id);
        for (std::size_t i = 0; i < pv.rows(); ++i)
          for (std::size_t j = 0; j < pv.cols(); ++j) gp(i, j) += g(i, off + j);
      }
      off += pv.cols();
    }
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  if (begin + count > xv.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") out of range for " + shape_string(xv));
  }
  const std::size_t c = xv.cols();
  Tensor out(count, c,
             std::vector<double>(xv.data().begin() + begin * c,
                                 xv.data().begin() + (begin + count) * c));
  const Var ins[] = {x};
  return t.record(std::move(out), ins, [x, begin](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_buffer(self);
    if (!tp.requires_grad(x)) return;
    Tensor& gx = tp.grad_buffer(x.id);
    const std::size_t off = begin * g.cols();
    for (std::size_t k = 0; k < g.size(); ++k) gx[off + k] += g[k];
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  if (begin + count > xv.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") out of range for " + shape_string(xv));
  }
  Tensor out(xv.rows(), count);
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = xv(i, begin + j);
  const Var ins[] = {x};
  return t.record(std::move(out), ins, [x, begin](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_buffer(self);
    if (!tp.requires_grad(x)) return;
    Tensor& gx = tp.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gx(i, begin + j) += g(i, j);
  });
}

Var mean_rows(Var x) {
  Tape& t = tape_of(x);
  Tensor out = anchorcir::mean_rows(x.value());
  const Var ins[] = {x};
  return t.record(std::move(out), ins, [x](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_buffer(self);
    if (!tp.requires_grad(x)) return;
    Tensor& gx = tp.grad_buffer(x.id);
    const double inv = 1.0 / static_cast<double>(gx.rows());
    for (std::size_t i = 0; i < gx.rows(); ++i)
      for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) += g[j] * inv;
  });
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const Var ins[] = {x};
  return t.record(Tensor::scalar(s), ins, [x](Tape& tp, std::uint32_t self) {
    const double g = tp.grad_buffer(self)[0];
    if (!tp.requires_grad(x)) return;
    for (double& v : tp.grad_buffer(x.id).data()) v += g;
  });
}

Var l2_normalize_rows(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  auto norms = std::make_shared<std::vector<double>>(xv.rows());
  Tensor out = xv;
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    const double n = norm(xv.row(i));
    if (!(n > 0.0)) {
      throw DegenerateInputError("l2_normalize_rows: zero-norm row " + std::to_string(i));
    }
    (*norms)[i] = n;
    for (double& v : out.row(i)) v /= n;
  }
  const Var ins[] = {x};
  return t.record(std::move(out), ins, [x, norms](Tape& tp, std::uint32_t self) {
    const Tensor& g = tp.grad_buffer(self);
    const Tensor& y = tp.value(self);
    Tensor d(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      const double yg = dot(y.row(i), g.row(i));
      for (std::size_t j = 0; j < g.cols(); ++j) d(i, j) = (g(i, j) - y(i, j) * yg) / (*norms)[i];
    }
    accumulate(tp, x, d);
  });
}

Var add_masked_bias(Var logits, Var beta, std::span<const double> mask) {
  Tape& t = tape_of(logits);
  const Tensor& lv = logits.value();
  const Tensor& bv = beta.value();
  if (mask.size() != lv.cols()) {
    throw DimensionError("add_masked_bias: mask length " + std::to_string(mask.size()) +
                         " vs logits " + shape_string(lv));
  }
  const bool shared = bv.rows() == 1 && bv.cols() == 1;
  if (!shared && !(bv.rows() == lv.rows() && bv.cols() == 1)) {
    throw DimensionError("add_masked_bias: beta " + shape_string(bv) + " must be [1x1] or [" +
                         std::to_string(lv.rows()) + "x1]");
  }
  Tensor out = lv;
  for (std::size_t i = 0; i < lv.rows(); ++i) {
    const double b = shared ? bv[0] : bv[i];
    for (std::size_t j = 0; j < lv.cols(); ++j) out(i, j) += b * mask[j];
  }
  std::vector<double> m(mask.begin(), mask.end());
  const Var ins[] = {logits, beta};
  return t.record(std::move(out), ins,
                  [logits, beta, shared, m = std::move(m)](Tape& tp, std::uint32_t self) {
                    const Tensor& g = tp.grad_buffer(self);
                    accumulate(tp, logits, g);
                    if (!tp.requires_grad(beta)) return;
                    Tensor& gb = tp.grad_buffer(beta.id);
                    for (std::size_t i = 0; i < g.rows(); ++i) {
                      double s = 0.0;
                      for (std::size_t j = 0; j < g.cols(); ++j) s += g(i, j) * m[j];
                      gb[shared ? 0 : i] += s;
                    }
                  });
}

}  // namespace ad
}  // namespace anchorcir
