#include "gnr/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "gnr/error.hpp"

namespace gnr::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

ConstMatMap as_mat(const Tensor& t, int rows, int cols) { return {t.data().data(), rows, cols}; }
MatMap as_mat(Tensor& t, int rows, int cols) { return {t.data().data(), rows, cols}; }

Tape& tape_of(Var a) {
  if (!a.valid()) throw ArgumentError("autodiff: invalid variable");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (!a.valid() || !b.valid() || a.tape != b.tape) {
    throw ArgumentError("autodiff: variables belong to different tapes");
  }
  return *a.tape;
}

void require_rank(const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank) {
    throw ArgumentError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_str(t.shape()));
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// (Cin, H, W) -> (Cin*k*k, H*W), zero padded.
Tensor im2col(const Tensor& x, int k) {
  const int c_in = x.dim(0), h = x.dim(1), w = x.dim(2), pad = k / 2;
  Tensor cols({c_in * k * k, h * w});
  for (int c = 0; c < c_in; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols.data().data() + static_cast<std::size_t>(((c * k + ky) * k + kx) * h * w);
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            row[y * w + xx] = (sy >= 0 && sy < h && sx >= 0 && sx < w)
                                  ? x[static_cast<std::size_t>((c * h + sy) * w + sx)]
                                  : 0.0;
          }
        }
      }
    }
  }
  return cols;
}

void col2im_add(const Tensor& cols, int k, Tensor& dx) {
  const int c_in = dx.dim(0), h = dx.dim(1), w = dx.dim(2), pad = k / 2;
  for (int c = 0; c < c_in; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row =
            cols.data().data() + static_cast<std::size_t>(((c * k + ky) * k + kx) * h * w);
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            if (sx < 0 || sx >= w) continue;
            dx[static_cast<std::size_t>((c * h + sy) * w + sx)] += row[y * w + xx];
          }
        }
      }
    }
  }
}

}  // namespace

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::make_leaf(Tensor own, const Tensor* ref, bool requires_grad) {
  Node n;
  n.own = std::move(own);
  n.ref = ref;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Tensor v) { return make_leaf(std::move(v), nullptr, false); }
Var Tape::constant_ref(const Tensor& v) { return make_leaf({}, &v, false); }
Var Tape::variable(Tensor v) { return make_leaf(std::move(v), nullptr, true); }
Var Tape::parameter(const Tensor& v) { return make_leaf({}, &v, true); }

Tape::Node& Tape::node(Var v) {
  if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
    throw ArgumentError("autodiff: variable does not belong to this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
    throw ArgumentError("autodiff: variable does not belong to this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tensor& Tape::value(Var v) const {
  const Node& n = node(v);
  return n.ref ? *n.ref : n.own;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }
bool Tape::has_grad(Var v) const { return node(v).has_grad; }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.has_grad) return n.grad;
  return Tensor(value(v).shape(), 0.0);
}

Tensor& Tape::grad_ref(Var v) {
  Node& n = node(v);
  if (!n.has_grad) {
    n.grad = Tensor(value(v).shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

Var Tape::push(Tensor value, const std::vector<Var>& parents, Backward backward) {
  bool needs = false;
  for (Var p : parents) needs = needs || requires_grad(p);
  Node n;
  n.own = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var root) {
  if (value(root).size() != 1) {
    throw ArgumentError("backward: root must be a single-element tensor, got " +
                        shape_str(value(root).shape()));
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  grad_ref(root)[0] = 1.0;
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.has_grad || !n.backward) continue;
    // Copy: the closure may not reallocate nodes_, but it does write into
    // other nodes' gradients and must see a stable grad_out.
    const Tensor grad_out = n.grad;
    n.backward(*this, n.ref ? *n.ref : n.own, grad_out);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  Tensor out = a.value() + b.value();
  return t.push(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor&, const Tensor& g) {
    if (tp.requires_grad(a)) tp.grad_ref(a) += g;
    if (tp.requires_grad(b)) tp.grad_ref(b) += g;
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  Tensor out = a.value() - b.value();
  return t.push(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor&, const Tensor& g) {
    if (tp.requires_grad(a)) tp.grad_ref(a) += g;
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_ref(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return t.push(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor&, const Tensor& g) {
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_ref(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  return t.push(s * a.value(), {a}, [a, s](Tape& tp, const Tensor&, const Tensor& g) {
    Tensor& ga = tp.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var square(Var a) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) v *= v;
  return t.push(std::move(out), {a}, [a](Tape& tp, const Tensor&, const Tensor& g) {
    const Tensor& av = tp.value(a);
    Tensor& ga = tp.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * av[i] * g[i];
  });
}

Var abs(Var a) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) v = std::abs(v);
  return t.push(std::move(out), {a}, [a](Tape& tp, const Tensor&, const Tensor& g) {
    const Tensor& av = tp.value(a);
    Tensor& ga = tp.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = av[i] > 0.0 ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0);
      ga[i] += s * g[i];
    }
  });
}

Var silu(Var a) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.data()) v = v * sigmoid(v);
  return t.push(std::move(out), {a}, [a](Tape& tp, const Tensor&, const Tensor& g) {
    const Tensor& av = tp.value(a);
    Tensor& ga = tp.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = sigmoid(av[i]);
      ga[i] += g[i] * s * (1.0 + av[i] * (1.0 - s));
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return t.push(Tensor::scalar(s), {a}, [a](Tape& tp, const Tensor&, const Tensor& g) {
    Tensor& ga = tp.grad_ref(a);
    for (double& v : ga.data()) v += g[0];
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ArgumentError("mean of empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var reshape(Var a, Shape shape) {
  Tape& t = tape_of(a);
  Tensor out = a.value().reshaped(std::move(shape));
  return t.push(std::move(out), {a}, [a](Tape& tp, const Tensor&, const Tensor& g) {
    Tensor& ga = tp.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var add_channel(Var x, Var v) {
  Tape& t = tape_of(x, v);
  const Tensor& xv = x.value();
  const Tensor& vv = v.value();
  if (xv.rank() < 1 || vv.rank() != 1 || vv.dim(0) != xv.dim(0)) {
    throw ArgumentError("add_channel: bias " + shape_str(vv.shape()) + " does not match " +
                        shape_str(xv.shape()));
  }
  const std::size_t per = xv.size() / static_cast<std::size_t>(xv.dim(0));
  Tensor out = xv;
  for (int c = 0; c < xv.dim(0); ++c) {
    for (std::size_t i = 0; i < per; ++i) out[c * per + i] += vv[static_cast<std::size_t>(c)];
  }
  return t.push(std::move(out), {x, v}, [x, v, per](Tape& tp, const Tensor&, const Tensor& g) {
    if (tp.requires_grad(x)) tp.grad_ref(x) += g;
    if (tp.requires_grad(v)) {
      Tensor& gv = tp.grad_ref(v);
      for (std::size_t c = 0; c < gv.size(); ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < per; ++i) s += g[c * per + i];
        gv[c] += s;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutional

Var conv2d(Var x, Var w, Var b) {
  Tape& t = tape_of(x, w);
  tape_of(w, b);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_rank(xv, 3, "conv2d input");
  require_rank(wv, 4, "conv2d weight");
  const int c_out = wv.dim(0), c_in = wv.dim(1), k = wv.dim(2);
  if (xv.dim(0) != c_in || wv.dim(3) != k || k % 2 != 1 || bv.size() != static_cast<std::size_t>(c_out)) {
    throw ArgumentError("conv2d: incompatible shapes " + shape_str(xv.shape()) + " * " +
                        shape_str(wv.shape()));
  }
  const int h = xv.dim(1), wd = xv.dim(2), hw = h * wd, kk = c_in * k * k;
  const Tensor cols = k == 1 ? xv.reshaped({c_in, hw}) : im2col(xv, k);
  Tensor out({c_out, h, wd});
  as_mat(out, c_out, hw).noalias() = as_mat(wv, c_out, kk) * as_mat(cols, kk, hw);
  for (int c = 0; c < c_out; ++c) {
    for (int i = 0; i < hw; ++i) out[static_cast<std::size_t>(c * hw + i)] += bv[static_cast<std::size_t>(c)];
  }
  return t.push(std::move(out), {x, w, b},
                [x, w, b, c_out, c_in, k, hw, kk](Tape& tp, const Tensor&, const Tensor& g) {
                  const Tensor& xv2 = tp.value(x);
                  const Tensor& wv2 = tp.value(w);
                  const auto gm = as_mat(g, c_out, hw);
                  if (tp.requires_grad(w)) {
                    const Tensor cols2 = k == 1 ? xv2.reshaped({c_in, hw}) : im2col(xv2, k);
                    Tensor& gw = tp.grad_ref(w);
                    as_mat(gw, c_out, kk).noalias() += gm * as_mat(cols2, kk, hw).transpose();
                  }
                  if (tp.requires_grad(b)) {
                    Tensor& gb = tp.grad_ref(b);
                    VecMap(gb.data().data(), c_out) += gm.rowwise().sum();
                  }
                  if (tp.requires_grad(x)) {
                    Tensor dcols({kk, hw});
                    as_mat(dcols, kk, hw).noalias() = as_mat(wv2, c_out, kk).transpose() * gm;
                    Tensor& gx = tp.grad_ref(x);
                    if (k == 1) {
                      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dcols[i];
                    } else {
                      col2im_add(dcols, k, gx);
                    }
                  }
                });
}

Var avg_pool2(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  require_rank(xv, 3, "avg_pool2");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  if (h % 2 || w % 2) throw ArgumentError("avg_pool2: odd spatial size " + shape_str(xv.shape()));
  const int ho = h / 2, wo = w / 2;
  Tensor out({c, ho, wo});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx) {
        const auto at = [&](int yy, int x2) { return xv[static_cast<std::size_t>((ch * h + yy) * w + x2)]; };
        out[static_cast<std::size_t>((ch * ho + y) * wo + xx)] =
            0.25 * (at(2 * y, 2 * xx) + at(2 * y, 2 * xx + 1) + at(2 * y + 1, 2 * xx) + at(2 * y + 1, 2 * xx + 1));
      }
    }
  }
  return t.push(std::move(out), {x}, [x, c, h, w, ho, wo](Tape& tp, const Tensor&, const Tensor& g) {
    Tensor& gx = tp.grad_ref(x);
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
          gx[static_cast<std::size_t>((ch * h + y) * w + xx)] +=
              0.25 * g[static_cast<std::size_t>((ch * ho + y / 2) * wo + xx / 2)];
        }
      }
    }
  });
}

Var upsample_nearest2(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  require_rank(xv, 3, "upsample_nearest2");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2), ho = 2 * h, wo = 2 * w;
  Tensor out({c, ho, wo});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx) {
        out[static_cast<std::size_t>((ch * ho + y) * wo + xx)] =
            xv[static_cast<std::size_t>((ch * h + y / 2) * w + xx / 2)];
      }
    }
  }
  return t.push(std::move(out), {x}, [x, c, h, w, ho, wo](Tape& tp, const Tensor&, const Tensor& g) {
    Tensor& gx = tp.grad_ref(x);
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < ho; ++y) {
        for (int xx = 0; xx < wo; ++xx) {
          gx[static_cast<std::size_t>((ch * h + y / 2) * w + xx / 2)] +=
              g[static_cast<std::size_t>((ch * ho + y) * wo + xx)];
        }
      }
    }
  });
}

Var concat_channels(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2)) {
    throw ArgumentError("concat_channels: incompatible " + shape_str(av.shape()) + " and " +
                        shape_str(bv.shape()));
  }
  std::vector<double> data(av.vec());
  data.insert(data.end(), bv.vec().begin(), bv.vec().end());
  Tensor out({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)}, std::move(data));
  const std::size_t na = av.size();
  return t.push(std::move(out), {a, b}, [a, b, na](Tape& tp, const Tensor&, const Tensor& g) {
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_ref(a);
      for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_ref(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
    }
  });
}

Var group_norm(Var x, int groups, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x, gamma);
  tape_of(gamma, beta);
  const Tensor& xv = x.value();
  const int c = xv.dim(0);
  if (groups <= 0 || c % groups != 0 || gamma.value().size() != static_cast<std::size_t>(c) ||
      beta.value().size() != static_cast<std::size_t>(c)) {
    throw ArgumentError("group_norm: " + std::to_string(c) + " channels, " + std::to_string(groups) +
                        " groups");
  }
  const std::size_t per_c = xv.size() / static_cast<std::size_t>(c);
  const int cpg = c / groups;
  const std::size_t m = per_c * static_cast<std::size_t>(cpg);
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(groups));
  for (int gi = 0; gi < groups; ++gi) {
    const std::size_t off = static_cast<std::size_t>(gi) * m;
    double mu = 0.0;
    for (std::size_t i = 0; i < m; ++i) mu += xv[off + i];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) var += (xv[off + i] - mu) * (xv[off + i] - mu);
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(gi)] = is;
    for (std::size_t i = 0; i < m; ++i) xhat[off + i] = (xv[off + i] - mu) * is;
  }
  Tensor out(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (int ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < per_c; ++i) {
      const std::size_t k = static_cast<std::size_t>(ch) * per_c + i;
      out[k] = gv[static_cast<std::size_t>(ch)] * xhat[k] + bv[static_cast<std::size_t>(ch)];
    }
  }
  return t.push(std::move(out), {x, gamma, beta},
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), groups, c, per_c, m](
                    Tape& tp, const Tensor&, const Tensor& g) {
                  const Tensor& gv2 = tp.value(gamma);
                  if (tp.requires_grad(gamma) || tp.requires_grad(beta)) {
                    for (int ch = 0; ch < c; ++ch) {
                      double sg = 0.0, sgx = 0.0;
                      for (std::size_t i = 0; i < per_c; ++i) {
                        const std::size_t k = static_cast<std::size_t>(ch) * per_c + i;
                        sg += g[k];
                        sgx += g[k] * xhat[k];
                      }
                      if (tp.requires_grad(gamma)) tp.grad_ref(gamma)[static_cast<std::size_t>(ch)] += sgx;
                      if (tp.requires_grad(beta)) tp.grad_ref(beta)[static_cast<std::size_t>(ch)] += sg;
                    }
                  }
                  if (!tp.requires_grad(x)) return;
                  Tensor& gx = tp.grad_ref(x);
                  const int cpg = c / groups;
                  std::vector<double> dxhat(m);
                  for (int gi = 0; gi < groups; ++gi) {
                    const std::size_t off = static_cast<std::size_t>(gi) * m;
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t i = 0; i < m; ++i) {
                      const int ch = gi * cpg + static_cast<int>(i / per_c);
                      dxhat[i] = g[off + i] * gv2[static_cast<std::size_t>(ch)];
                      mean_d += dxhat[i];
                      mean_dx += dxhat[i] * xhat[off + i];
                    }
                    mean_d /= static_cast<double>(m);
                    mean_dx /= static_cast<double>(m);
                    const double is = inv_std[static_cast<std::size_t>(gi)];
                    for (std::size_t i = 0; i < m; ++i) {
                      gx[off + i] += is * (dxhat[i] - mean_d - xhat[off + i] * mean_dx);
                    }
                  }
                });
}

Var linear(Var v, Var w, Var b) {
  Tape& t = tape_of(v, w);
  tape_of(w, b);
  const Tensor& vv = v.value();
  const Tensor& wv = w.value();
  require_rank(wv, 2, "linear weight");
  const int n_out = wv.dim(0), n_in = wv.dim(1);
  if (vv.size() != static_cast<std::size_t>(n_in) || b.value().size() != static_cast<std::size_t>(n_out)) {
    throw ArgumentError("linear: input " + shape_str(vv.shape()) + " vs weight " + shape_str(wv.shape()));
  }
  Tensor out({n_out});
  VecMap(out.data().data(), n_out) =
      as_mat(wv, n_out, n_in) * ConstVecMap(vv.data().data(), n_in) + ConstVecMap(b.value().data().data(), n_out);
  return t.push(std::move(out), {v, w, b}, [v, w, b, n_out, n_in](Tape& tp, const Tensor&, const Tensor& g) {
    const ConstVecMap gv(g.data().data(), n_out);
    if (tp.requires_grad(w)) {
      Tensor& gw = tp.grad_ref(w);
      as_mat(gw, n_out, n_in) += gv * ConstVecMap(tp.value(v).data().data(), n_in).transpose();
    }
    if (tp.requires_grad(b)) VecMap(tp.grad_ref(b).data().data(), n_out) += gv;
    if (tp.requires_grad(v)) {
      VecMap(tp.grad_ref(v).data().data(), n_in) += as_mat(tp.value(w), n_out, n_in).transpose() * gv;
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 2, "matmul lhs");
  require_rank(bv, 2, "matmul rhs");
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw ArgumentError("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  Tensor out({m, n});
  as_mat(out, m, n).noalias() = as_mat(av, m, k) * as_mat(bv, k, n);
  return t.push(std::move(out), {a, b}, [a, b, m, k, n](Tape& tp, const Tensor&, const Tensor& g) {
    const auto gm = as_mat(g, m, n);
    if (tp.requires_grad(a)) {
      as_mat(tp.grad_ref(a), m, k).noalias() += gm * as_mat(tp.value(b), k, n).transpose();
    }
    if (tp.requires_grad(b)) {
      as_mat(tp.grad_ref(b), k, n).noalias() += as_mat(tp.value(a), m, k).transpose() * gm;
    }
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  require_rank(av, 2, "transpose");
  const int m = av.dim(0), n = av.dim(1);
  Tensor out({n, m});
  as_mat(out, n, m) = as_mat(av, m, n).transpose();
  return t.push(std::move(out), {a}, [a, m, n](Tape& tp, const Tensor&, const Tensor& g) {
    as_mat(tp.grad_ref(a), m, n) += as_mat(g, n, m).transpose();
  });
}

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  require_rank(av, 2, "softmax_rows");
  const int m = av.dim(0), n = av.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    const double* row = av.data().data() + static_cast<std::size_t>(i * n);
    double* o = out.data().data() + static_cast<std::size_t>(i * n);
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      o[j] = std::exp(row[j] - mx);
      s += o[j];
    }
    for (int j = 0; j < n; ++j) o[j] /= s;
  }
  return t.push(std::move(out), {a}, [a, m, n](Tape& tp, const Tensor& y, const Tensor& g) {
    Tensor& ga = tp.grad_ref(a);
    for (int i = 0; i < m; ++i) {
      const std::size_t off = static_cast<std::size_t>(i * n);
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += g[off + j] * y[off + j];
      for (int j = 0; j < n; ++j) ga[off + j] += y[off + j] * (g[off + j] - s);
    }
  });
}

Var slice_rows(Var a, int begin, int end) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  require_rank(av, 2, "slice_rows");
  const int m = av.dim(0), n = av.dim(1);
  if (begin < 0 || end > m || begin >= end) {
    throw ArgumentError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                        ") out of " + std::to_string(m));
  }
  const auto first = av.vec().begin() + static_cast<std::ptrdiff_t>(begin) * n;
  Tensor out({end - begin, n}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(end - begin) * n));
  return t.push(std::move(out), {a}, [a, begin, n](Tape& tp, const Tensor&, const Tensor& g) {
    Tensor& ga = tp.grad_ref(a);
    const std::size_t off = static_cast<std::size_t>(begin) * static_cast<std::size_t>(n);
    for (std::size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
  Tape& t = tape_of(parts.front());
  const int n = parts.front().value().dim(1);
  int rows = 0;
  std::vector<double> data;
  for (Var p : parts) {
    tape_of(parts.front(), p);
    const Tensor& pv = p.value();
    require_rank(pv, 2, "concat_rows");
    if (pv.dim(1) != n) throw ArgumentError("concat_rows: column mismatch");
    rows += pv.dim(0);
    data.insert(data.end(), pv.vec().begin(), pv.vec().end());
  }
  Tensor out({rows, n}, std::move(data));
  return t.push(std::move(out), parts, [parts](Tape& tp, const Tensor&, const Tensor& g) {
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t sz = tp.value(p).size();
      if (tp.requires_grad(p)) {
        Tensor& gp = tp.grad_ref(p);
        for (std::size_t i = 0; i < sz; ++i) gp[i] += g[off + i];
      }
      off += sz;
    }
  });
}

Var mean_rows(Var table, const std::vector<int>& rows) {
  Tape& t = tape_of(table);
  const Tensor& tv = table.value();
  require_rank(tv, 2, "mean_rows");
  if (rows.empty()) throw ArgumentError("mean_rows: no rows");
  const int v = tv.dim(0), d = tv.dim(1);
  Tensor out({d});
  for (int r : rows) {
    if (r < 0 || r >= v) throw ArgumentError("mean_rows: row " + std::to_string(r) + " out of range");
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += tv[static_cast<std::size_t>(r * d + j)];
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (double& x : out.data()) x *= inv;
  return t.push(std::move(out), {table}, [table, rows, d, inv](Tape& tp, const Tensor&, const Tensor& g) {
    Tensor& gt = tp.grad_ref(table);
    for (int r : rows) {
      for (int j = 0; j < d; ++j) gt[static_cast<std::size_t>(r * d + j)] += inv * g[static_cast<std::size_t>(j)];
    }
  });
}

}  // namespace gnr::ad
