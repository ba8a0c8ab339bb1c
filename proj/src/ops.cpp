// Copyright (c) 2026, The tdmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "tdmoe/ops.hpp"

#include <algorithm>
#include <limits>

#include "tdmoe/kernels.hpp"

namespace tdmoe {

Activation parse_activation(std::string_view name) {
  if (name == "silu") return Activation::silu;
  if (name == "relu") return Activation::relu;
  throw ConfigError("activation", "unknown activation '" + std::string(name) +
                                      "' (expected silu or relu)");
}

std::string_view activation_name(Activation a) {
  return a == Activation::relu ? "relu" : "silu";
}

template <typename S>
void Graph<S>::backward(const Var<S>& loss) {
  if (!loss.defined() || loss.value().size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad() || !loss.node()->backward) {
    throw ContractError("backward: loss is not on a recorded graph");
  }
  loss.node()->grad_buffer()[0] += S{1};
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
    Node<S>& n = **it;
    if (!n.grad.empty()) n.backward(n.grad);
  }
}

namespace {

template <typename S>
void require_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

template <typename S>
Tensor<S> as_matrix(const Tensor<S>& t) {
  if (t.rank() == 2) return t;
  return t.reshaped({t.rows(), t.cols()});
}

}  // namespace

template <typename S>
Var<S> matmul(Graph<S>& g, const Var<S>& a, const Var<S>& b) {
  Tensor<S> out = kernels::matmul(a.value(), b.value());
  return g.record(std::move(out), g.needs_grad({&a, &b}), [a, b](Node<S>*) {
    return [a, b](const Tensor<S>& gout) {
      if (a.requires_grad()) accumulate_grad(a, kernels::matmul_nt(gout, b.value()));
      if (b.requires_grad()) accumulate_grad(b, kernels::matmul_tn(a.value(), gout));
    };
  });
}

template <typename S>
Var<S> linear(Graph<S>& g, const Var<S>& x, const Var<S>& w) {
  if (x.value().cols() != w.value().cols() || w.value().rank() != 2) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(w.shape()));
  }
  Tensor<S> out = kernels::matmul_nt(x.value(), w.value());
  return g.record(std::move(out), g.needs_grad({&x, &w}), [x, w](Node<S>*) {
    return [x, w](const Tensor<S>& gout) {
      if (x.requires_grad()) {
        accumulate_grad(x, kernels::matmul(gout, w.value()).reshaped(x.shape()));
      }
      if (w.requires_grad()) accumulate_grad(w, kernels::matmul_tn(gout, as_matrix(x.value())));
    };
  });
}

template <typename S>
Var<S> add(Graph<S>& g, const Var<S>& a, const Var<S>& b) {
  require_same_shape(a, b, "add");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return g.record(std::move(out), g.needs_grad({&a, &b}), [a, b](Node<S>*) {
    return [a, b](const Tensor<S>& gout) {
      accumulate_grad(a, gout);
      accumulate_grad(b, gout);
    };
  });
}

template <typename S>
Var<S> mul(Graph<S>& g, const Var<S>& a, const Var<S>& b) {
  require_same_shape(a, b, "mul");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return g.record(std::move(out), g.needs_grad({&a, &b}), [a, b](Node<S>*) {
    return [a, b](const Tensor<S>& gout) {
      if (a.requires_grad()) {
        Tensor<S> d = gout;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= b.value()[i];
        accumulate_grad(a, d);
      }
      if (b.requires_grad()) {
        Tensor<S> d = gout;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= a.value()[i];
        accumulate_grad(b, d);
      }
    };
  });
}

template <typename S>
Var<S> scale(Graph<S>& g, const Var<S>& a, S factor) {
  Tensor<S> out = a.value();
  for (S& v : out.values()) v *= factor;
  return g.record(std::move(out), g.needs_grad({&a}), [a, factor](Node<S>*) {
    return [a, factor](const Tensor<S>& gout) {
      Tensor<S> d = gout;
      for (S& v : d.values()) v *= factor;
      accumulate_grad(a, d);
    };
  });
}

template <typename S>
Var<S> sum(Graph<S>& g, const Var<S>& a) {
  S total{0};
  for (S v : a.value().values()) total += v;
  return g.record(Tensor<S>({1}, std::vector<S>{total}), g.needs_grad({&a}), [a](Node<S>*) {
    return [a](const Tensor<S>& gout) { accumulate_grad(a, Tensor<S>(a.shape(), gout[0])); };
  });
}

template <typename S>
Var<S> activation(Graph<S>& g, const Var<S>& x, Activation act) {
  const bool track = g.needs_grad({&x});
  Tensor<S> out = x.value();
  Tensor<S> slope;
  if (track) slope = Tensor<S>(out.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const S xi = out[i];
    if (act == Activation::relu) {
      out[i] = activate(xi, act);
      if (track) slope[i] = activate_derivative(xi, act);
    } else {
      // Same rounding sequence as activate(): x * sigmoid(x).
      const S s = sigmoid(xi);
      out[i] = xi * s;
      if (track) slope[i] = s + xi * s * (S{1} - s);
    }
  }
  return g.record(std::move(out), track, [x, &slope](Node<S>*) {
    return [x, slope = std::move(slope)](const Tensor<S>& gout) {
      Tensor<S> d = gout;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= slope[i];
      accumulate_grad(x, d);
    };
  });
}

template <typename S>
Var<S> rms_norm(Graph<S>& g, const Var<S>& x, const Var<S>& gain, S eps) {
  const Tensor<S>& xv = x.value();
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  if (gain.value().size() != cols) {
    throw ShapeError("rms_norm: gain " + to_string(gain.shape()) + " does not match width " +
                     std::to_string(cols));
  }
  Tensor<S> out(xv.shape());
  std::vector<S> inv_rms(rows);
  const S* gv = gain.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xr = xv.data() + r * cols;
    S ms{0};
    for (std::size_t c = 0; c < cols; ++c) ms += xr[c] * xr[c];
    ms /= static_cast<S>(cols);
    const S inv = S{1} / std::sqrt(ms + eps);
    inv_rms[r] = inv;
    S* yr = out.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) yr[c] = xr[c] * inv * gv[c];
  }
  return g.record(
      std::move(out), g.needs_grad({&x, &gain}),
      [x, gain, inv_rms = std::move(inv_rms), rows, cols](Node<S>*) mutable {
        return [x, gain, inv_rms = std::move(inv_rms), rows, cols](const Tensor<S>& gout) {
          const Tensor<S>& xv = x.value();
          const S* gv = gain.value().data();
          if (gain.requires_grad()) {
            Tensor<S> dg(gain.shape());
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < cols; ++c) {
                dg[c] += gout[r * cols + c] * xv[r * cols + c] * inv_rms[r];
              }
            }
            accumulate_grad(gain, dg);
          }
          if (x.requires_grad()) {
            Tensor<S> dx(xv.shape());
            for (std::size_t r = 0; r < rows; ++r) {
              const S inv = inv_rms[r];
              S dot{0};
              for (std::size_t c = 0; c < cols; ++c) {
                dot += gout[r * cols + c] * gv[c] * xv[r * cols + c] * inv;
              }
              dot /= static_cast<S>(cols);
              for (std::size_t c = 0; c < cols; ++c) {
                const S xhat = xv[r * cols + c] * inv;
                dx[r * cols + c] = inv * (gout[r * cols + c] * gv[c] - xhat * dot);
              }
            }
            accumulate_grad(x, dx);
          }
        };
      });
}

template <typename S>
Var<S> embedding(Graph<S>& g, const Var<S>& table, std::span<const int> ids) {
  const std::size_t vocab = table.value().rows();
  const std::size_t dim = table.value().cols();
  Tensor<S> out({ids.size(), dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " at position " +
                       std::to_string(i) + " outside [0, " + std::to_string(vocab) + ")");
    }
    std::copy_n(table.value().data() + static_cast<std::size_t>(ids[i]) * dim, dim,
                out.data() + i * dim);
  }
  std::vector<int> id_copy(ids.begin(), ids.end());
  return g.record(std::move(out), g.needs_grad({&table}),
                  [table, id_copy = std::move(id_copy), dim](Node<S>*) mutable {
                    return [table, id_copy = std::move(id_copy), dim](const Tensor<S>& gout) {
                      Tensor<S>& gt = table.node()->grad_buffer();
                      for (std::size_t i = 0; i < id_copy.size(); ++i) {
                        S* dst = gt.data() + static_cast<std::size_t>(id_copy[i]) * dim;
                        const S* src = gout.data() + i * dim;
                        for (std::size_t c = 0; c < dim; ++c) dst[c] += src[c];
                      }
                    };
                  });
}

template <typename S>
Var<S> causal_attention(Graph<S>& g, const Var<S>& q, const Var<S>& k, const Var<S>& v,
                        std::size_t batch, std::size_t seq, std::size_t heads) {
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t width = q.value().cols();
  if (q.value().rows() != batch * seq) {
    throw ShapeError("causal_attention: " + std::to_string(q.value().rows()) +
                     " rows for batch " + std::to_string(batch) + " x seq " +
                     std::to_string(seq));
  }
  if (heads == 0 || width % heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(width) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t hd = width / heads;
  const S scale_factor = S{1} / std::sqrt(static_cast<S>(hd));
  const S* qv = q.value().data();
  const S* kv = k.value().data();
  const S* vv = v.value().data();

  Tensor<S> out({batch * seq, width});
  // probs[((b * heads + h) * seq + i) * seq + j], zero above the diagonal
  std::vector<S> probs(batch * heads * seq * seq, S{0});
  std::vector<S> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t i = 0; i < seq; ++i) {
        const S* qi = qv + (b * seq + i) * width + off;
        S mx = -std::numeric_limits<S>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const S* kj = kv + (b * seq + j) * width + off;
          S dot{0};
          for (std::size_t d = 0; d < hd; ++d) dot += qi[d] * kj[d];
          scores[j] = dot * scale_factor;
          mx = std::max(mx, scores[j]);
        }
        S denom{0};
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          denom += scores[j];
        }
        S* prow = probs.data() + ((b * heads + h) * seq + i) * seq;
        S* oi = out.data() + (b * seq + i) * width + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const S p = scores[j] / denom;
          prow[j] = p;
          const S* vj = vv + (b * seq + j) * width + off;
          for (std::size_t d = 0; d < hd; ++d) oi[d] += p * vj[d];
        }
      }
    }
  }

  return g.record(
      std::move(out), g.needs_grad({&q, &k, &v}),
      [q, k, v, probs = std::move(probs), batch, seq, heads, hd, width,
       scale_factor](Node<S>*) mutable {
        return [q, k, v, probs = std::move(probs), batch, seq, heads, hd, width,
                scale_factor](const Tensor<S>& gout) {
          const S* qv = q.value().data();
          const S* kv = k.value().data();
          const S* vv = v.value().data();
          Tensor<S> dq(q.shape()), dk(k.shape()), dv(v.shape());
          std::vector<S> dp(seq);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
              const std::size_t off = h * hd;
              for (std::size_t i = 0; i < seq; ++i) {
                const S* prow = probs.data() + ((b * heads + h) * seq + i) * seq;
                const S* gi = gout.data() + (b * seq + i) * width + off;
                S weighted{0};
                for (std::size_t j = 0; j <= i; ++j) {
                  const S* vj = vv + (b * seq + j) * width + off;
                  S dot{0};
                  for (std::size_t d = 0; d < hd; ++d) dot += gi[d] * vj[d];
                  dp[j] = dot;
                  weighted += prow[j] * dot;
                  S* dvj = dv.data() + (b * seq + j) * width + off;
                  for (std::size_t d = 0; d < hd; ++d) dvj[d] += prow[j] * gi[d];
                }
                const S* qi = qv + (b * seq + i) * width + off;
                S* dqi = dq.data() + (b * seq + i) * width + off;
                for (std::size_t j = 0; j <= i; ++j) {
                  const S ds = prow[j] * (dp[j] - weighted) * scale_factor;
                  const S* kj = kv + (b * seq + j) * width + off;
                  S* dkj = dk.data() + (b * seq + j) * width + off;
                  for (std::size_t d = 0; d < hd; ++d) {
                    dqi[d] += ds * kj[d];
                    dkj[d] += ds * qi[d];
                  }
                }
              }
            }
          }
          accumulate_grad(q, dq);
          accumulate_grad(k, dk);
          accumulate_grad(v, dv);
        };
      });
}

template <typename S>
Var<S> cross_entropy(Graph<S>& g, const Var<S>& logits, std::span<const int> targets) {
  const Tensor<S>& z = logits.value();
  const std::size_t rows = z.rows();
  const std::size_t classes = z.cols();
  if (rows == 0) throw ContractError("cross_entropy: empty batch");
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  }
  Tensor<S> probs({rows, classes});
  S total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " at row " +
                       std::to_string(r) + " outside [0, " + std::to_string(classes) + ")");
    }
    const S* zr = z.data() + r * classes;
    S mx = zr[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, zr[c]);
    S denom{0};
    S* pr = probs.data() + r * classes;
    for (std::size_t c = 0; c < classes; ++c) {
      pr[c] = std::exp(zr[c] - mx);
      denom += pr[c];
    }
    for (std::size_t c = 0; c < classes; ++c) pr[c] /= denom;
    total += std::log(denom) - (zr[t] - mx);
  }
  const S loss = total / static_cast<S>(rows);
  std::vector<int> tcopy(targets.begin(), targets.end());
  return g.record(
      Tensor<S>({1}, std::vector<S>{loss}), g.needs_grad({&logits}),
      [logits, probs = std::move(probs), tcopy = std::move(tcopy), rows, classes](Node<S>*) mutable {
        return [logits, probs = std::move(probs), tcopy = std::move(tcopy), rows,
                classes](const Tensor<S>& gout) {
          Tensor<S> d = probs;
          const S w = gout[0] / static_cast<S>(rows);
          for (std::size_t r = 0; r < rows; ++r) {
            d[r * classes + static_cast<std::size_t>(tcopy[r])] -= S{1};
            for (std::size_t c = 0; c < classes; ++c) d[r * classes + c] *= w;
          }
          accumulate_grad(logits, d.reshaped(logits.shape()));
        };
      });
}

template <typename S>
Var<S> select_rows(Graph<S>& g, const Var<S>& x, std::span<const std::size_t> rows) {
  const std::size_t cols = x.value().cols();
  const std::size_t n = x.value().rows();
  Tensor<S> out({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) {
      throw IndexError("select_rows: row " + std::to_string(rows[i]) + " of " +
                       std::to_string(n));
    }
    std::copy_n(x.value().data() + rows[i] * cols, cols, out.data() + i * cols);
  }
  std::vector<std::size_t> rcopy(rows.begin(), rows.end());
  return g.record(std::move(out), g.needs_grad({&x}),
                  [x, rcopy = std::move(rcopy), cols](Node<S>*) mutable {
                    return [x, rcopy = std::move(rcopy), cols](const Tensor<S>& gout) {
                      Tensor<S>& gx = x.node()->grad_buffer();
                      for (std::size_t i = 0; i < rcopy.size(); ++i) {
                        for (std::size_t c = 0; c < cols; ++c) {
                          gx[rcopy[i] * cols + c] += gout[i * cols + c];
                        }
                      }
                    };
                  });
}

template <typename S>
Var<S> softmax_pick(Graph<S>& g, const Var<S>& logits, std::span<const int> cols) {
  const Tensor<S>& z = logits.value();
  const std::size_t rows = z.rows();
  const std::size_t classes = z.cols();
  if (cols.size() != rows) {
    throw ShapeError("softmax_pick: " + std::to_string(cols.size()) + " indices for " +
                     std::to_string(rows) + " rows");
  }
  Tensor<S> probs({rows, classes});
  Tensor<S> out({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    if (cols[r] < 0 || static_cast<std::size_t>(cols[r]) >= classes) {
      throw IndexError("softmax_pick: index " + std::to_string(cols[r]) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    const S* zr = z.data() + r * classes;
    S* pr = probs.data() + r * classes;
    S mx = zr[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, zr[c]);
    S denom{0};
    for (std::size_t c = 0; c < classes; ++c) {
      pr[c] = std::exp(zr[c] - mx);
      denom += pr[c];
    }
    for (std::size_t c = 0; c < classes; ++c) pr[c] /= denom;
    out[r] = pr[static_cast<std::size_t>(cols[r])];
  }
  std::vector<int> ccopy(cols.begin(), cols.end());
  return g.record(
      std::move(out), g.needs_grad({&logits}),
      [logits, probs = std::move(probs), ccopy = std::move(ccopy), rows, classes](Node<S>*) mutable {
        return [logits, probs = std::move(probs), ccopy = std::move(ccopy), rows,
                classes](const Tensor<S>& gout) {
          Tensor<S> d({rows, classes});
          for (std::size_t r = 0; r < rows; ++r) {
            const S* pr = probs.data() + r * classes;
            const std::size_t pick = static_cast<std::size_t>(ccopy[r]);
            const S gp = gout[r] * pr[pick];
            for (std::size_t c = 0; c < classes; ++c) {
              d[r * classes + c] = gp * ((c == pick ? S{1} : S{0}) - pr[c]);
            }
          }
          accumulate_grad(logits, d);
        };
      });
}

template <typename S>
Var<S> scale_rows(Graph<S>& g, const Var<S>& x, const Var<S>& factors) {
  const std::size_t rows = x.value().rows();
  const std::size_t cols = x.value().cols();
  if (factors.value().size() != rows) {
    throw ShapeError("scale_rows: " + std::to_string(factors.value().size()) +
                     " factors for " + std::to_string(rows) + " rows");
  }
  Tensor<S> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] *= factors.value()[r];
  }
  return g.record(std::move(out), g.needs_grad({&x, &factors}), [x, factors, rows, cols](Node<S>*) {
    return [x, factors, rows, cols](const Tensor<S>& gout) {
      if (x.requires_grad()) {
        Tensor<S> dx = gout;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] *= factors.value()[r];
        }
        accumulate_grad(x, dx);
      }
      if (factors.requires_grad()) {
        Tensor<S> df(factors.shape());
        for (std::size_t r = 0; r < rows; ++r) {
          S dot{0};
          for (std::size_t c = 0; c < cols; ++c) dot += gout[r * cols + c] * x.value()[r * cols + c];
          df[r] = dot;
        }
        accumulate_grad(factors, df);
      }
    };
  });
}

#define TDMOE_INSTANTIATE(S)                                                                   \
  template class Graph<S>;                                                                     \
  template Var<S> matmul<S>(Graph<S>&, const Var<S>&, const Var<S>&);                          \
  template Var<S> linear<S>(Graph<S>&, const Var<S>&, const Var<S>&);                          \
  template Var<S> add<S>(Graph<S>&, const Var<S>&, const Var<S>&);                             \
  template Var<S> mul<S>(Graph<S>&, const Var<S>&, const Var<S>&);                             \
  template Var<S> scale<S>(Graph<S>&, const Var<S>&, S);                                       \
  template Var<S> sum<S>(Graph<S>&, const Var<S>&);                                            \
  template Var<S> activation<S>(Graph<S>&, const Var<S>&, Activation);                         \
  template Var<S> rms_norm<S>(Graph<S>&, const Var<S>&, const Var<S>&, S);                     \
  template Var<S> embedding<S>(Graph<S>&, const Var<S>&, std::span<const int>);                \
  template Var<S> causal_attention<S>(Graph<S>&, const Var<S>&, const Var<S>&, const Var<S>&,  \
                                      std::size_t, std::size_t, std::size_t);                  \
  template Var<S> cross_entropy<S>(Graph<S>&, const Var<S>&, std::span<const int>);            \
  template Var<S> select_rows<S>(Graph<S>&, const Var<S>&, std::span<const std::size_t>);      \
  template Var<S> softmax_pick<S>(Graph<S>&, const Var<S>&, std::span<const int>);             \
  template Var<S> scale_rows<S>(Graph<S>&, const Var<S>&, const Var<S>&);

TDMOE_INSTANTIATE(float)
TDMOE_INSTANTIATE(double)
#undef TDMOE_INSTANTIATE

}  // namespace tdmoe
