#include "regvit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "regvit/errors.hpp"

namespace regvit::ad {

namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw ContractError("variable is not attached to a tape");
  return *a.tape;
}

Tape& common_tape(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("variables belong to different tapes");
  return tape_of(a);
}

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a rank-2 tensor, got " + shape_to_string(t.shape()));
  }
}

}  // namespace

const Tensor& Var::value() const { return tape_of(*this).value(id); }

void GradientBuffer::accumulate(NodeId id, const Tensor& g) {
  if (!present_[id]) {
    grads_[id] = g;
    present_[id] = true;
    return;
  }
  auto dst = grads_[id].data();
  const auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, true});
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, true});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<NodeId> inputs, BackwardFn backward) {
  bool needs = false;
  for (auto id : inputs) needs = needs || nodes_[id].requires_grad;
  if (!needs) backward = nullptr;
  nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), needs, false});
  return Var{this, nodes_.size() - 1};
}

Gradients backward(const Tape& tape, Var loss) {
  if (loss.tape != &tape) throw ContractError("loss does not belong to this tape");
  const Tensor& loss_value = tape.value(loss.id);
  if (loss_value.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_to_string(loss_value.shape()));
  }
  GradientBuffer buffer(tape.size());
  buffer.accumulate(loss.id, Tensor(loss_value.shape(), 1.0));
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    const auto& node = tape.nodes_[i];
    if (!buffer.has(i) || !node.requires_grad || !node.backward) continue;
    node.backward(buffer.get(i), buffer);
  }
  Gradients out;
  out.grads_.reserve(tape.size());
  for (std::size_t i = 0; i < tape.size(); ++i) {
    if (buffer.has(i)) {
      out.grads_.push_back(std::move(buffer.grads_[i]));
    } else {
      out.grads_.emplace_back(tape.value(i).shape(), 0.0);
    }
  }
  return out;
}

Var matmul(Var a, Var b) {
  Tape& t = common_tape(a, b);
  Tensor out = regvit::matmul(a.value(), b.value());
  return t.record(std::move(out), {a.id, b.id}, [&t, a = a.id, b = b.id](const Tensor& g, GradientBuffer& grads) {
    if (t.requires_grad(a)) grads.accumulate(a, regvit::matmul_nt(g, t.value(b)));
    if (t.requires_grad(b)) grads.accumulate(b, regvit::matmul_tn(t.value(a), g));
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = common_tape(a, b);
  Tensor out = regvit::matmul_nt(a.value(), b.value());
  return t.record(std::move(out), {a.id, b.id}, [&t, a = a.id, b = b.id](const Tensor& g, GradientBuffer& grads) {
    if (t.requires_grad(a)) grads.accumulate(a, regvit::matmul(g, t.value(b)));
    if (t.requires_grad(b)) grads.accumulate(b, regvit::matmul_tn(g, t.value(a)));
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  return t.record(regvit::transpose(a.value()), {a.id}, [a = a.id](const Tensor& g, GradientBuffer& grads) {
    grads.accumulate(a, regvit::transpose(g));
  });
}

Var add(Var a, Var b) {
  Tape& t = common_tape(a, b);
  return t.record(regvit::add(a.value(), b.value()), {a.id, b.id},
                  [&t, a = a.id, b = b.id](const Tensor& g, GradientBuffer& grads) {
                    if (t.requires_grad(a)) grads.accumulate(a, g);
                    if (t.requires_grad(b)) grads.accumulate(b, g);
                  });
}

Var add_row(Var x, Var row) {
  Tape& t = common_tape(x, row);
  const Tensor& xv = x.value();
  const Tensor& rv = row.value();
  require_rank2(xv, "add_row");
  if (rv.numel() != xv.dim(1)) {
    throw DimensionError("add_row: row " + shape_to_string(rv.shape()) + " does not fit " + shape_to_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.dim(0); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += rv[j];
  }
  return t.record(std::move(out), {x.id, row.id},
                  [&t, x = x.id, row = row.id](const Tensor& g, GradientBuffer& grads) {
                    if (t.requires_grad(x)) grads.accumulate(x, g);
                    if (t.requires_grad(row)) {
                      Tensor gr(t.value(row).shape(), 0.0);
                      for (std::size_t i = 0; i < g.dim(0); ++i) {
                        auto src = g.row(i);
                        for (std::size_t j = 0; j < src.size(); ++j) gr[j] += src[j];
                      }
                      grads.accumulate(row, gr);
                    }
                  });
}

Var mul(Var a, Var b) {
  Tape& t = common_tape(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shapes differ: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return t.record(std::move(out), {a.id, b.id}, [&t, a = a.id, b = b.id](const Tensor& g, GradientBuffer& grads) {
    if (t.requires_grad(a)) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= t.value(b)[i];
      grads.accumulate(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor gb = g;
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] *= t.value(a)[i];
      grads.accumulate(b, gb);
    }
  });
}

Var scale(Var x, double factor) {
  Tape& t = tape_of(x);
  return t.record(regvit::scaled(x.value(), factor), {x.id}, [x = x.id, factor](const Tensor& g, GradientBuffer& grads) {
    grads.accumulate(x, regvit::scaled(g, factor));
  });
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return t.record(Tensor::scalar(total), {x.id}, [&t, x = x.id](const Tensor& g, GradientBuffer& grads) {
    grads.accumulate(x, Tensor(t.value(x).shape(), g.item()));
  });
}

Var softmax_lastdim(Var x) {
  Tape& t = tape_of(x);
  Tensor out = regvit::softmax_lastdim(x.value());
  const NodeId self = t.size();
  return t.record(std::move(out), {x.id}, [&t, x = x.id, self](const Tensor& g, GradientBuffer& grads) {
    const Tensor& y = t.value(self);
    Tensor gx = g;
    for (std::size_t r = 0; r < y.outer_size(); ++r) {
      const auto yr = y.row(r);
      const auto gr = g.row(r);
      double dot = 0.0;
      for (std::size_t j = 0; j < yr.size(); ++j) dot += gr[j] * yr[j];
      auto out = gx.row(r);
      for (std::size_t j = 0; j < yr.size(); ++j) out[j] = yr[j] * (gr[j] - dot);
    }
    grads.accumulate(x, gx);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = common_tape(x, gain);
  common_tape(x, bias);
  Tensor out = regvit::layer_norm(x.value(), gain.value(), bias.value(), eps);
  return t.record(std::move(out), {x.id, gain.id, bias.id},
                  [&t, x = x.id, gain = gain.id, bias = bias.id, eps](const Tensor& g, GradientBuffer& grads) {
                    const Tensor& xv = t.value(x);
                    const Tensor& gv = t.value(gain);
                    const std::size_t width = xv.last_dim();
                    const double n = static_cast<double>(width);
                    Tensor gx(xv.shape(), 0.0);
                    Tensor ggain(gv.shape(), 0.0);
                    Tensor gbias(gv.shape(), 0.0);
                    std::vector<double> xhat(width), gxhat(width);
                    for (std::size_t r = 0; r < xv.outer_size(); ++r) {
                      const auto xr = xv.row(r);
                      const auto gr = g.row(r);
                      double mean = 0.0;
                      for (double v : xr) mean += v;
                      mean /= n;
                      double var = 0.0;
                      for (double v : xr) var += (v - mean) * (v - mean);
                      var /= n;
                      const double inv_std = 1.0 / std::sqrt(var + eps);
                      double sum_gxhat = 0.0;
                      double sum_gxhat_xhat = 0.0;
                      for (std::size_t j = 0; j < width; ++j) {
                        xhat[j] = (xr[j] - mean) * inv_std;
                        gxhat[j] = gr[j] * gv[j];
                        ggain[j] += gr[j] * xhat[j];
                        gbias[j] += gr[j];
                        sum_gxhat += gxhat[j];
                        sum_gxhat_xhat += gxhat[j] * xhat[j];
                      }
                      auto dst = gx.row(r);
                      for (std::size_t j = 0; j < width; ++j) {
                        dst[j] = inv_std / n * (n * gxhat[j] - sum_gxhat - xhat[j] * sum_gxhat_xhat);
                      }
                    }
                    if (t.requires_grad(x)) grads.accumulate(x, gx);
                    if (t.requires_grad(gain)) grads.accumulate(gain, ggain);
                    if (t.requires_grad(bias)) grads.accumulate(bias, gbias);
                  });
}

Var gelu(Var x) {
  Tape& t = tape_of(x);
  return t.record(regvit::gelu(x.value()), {x.id}, [&t, x = x.id](const Tensor& g, GradientBuffer& grads) {
    constexpr double kAlpha = 0.7978845608028654;
    const Tensor& xv = t.value(x);
    Tensor gx = g;
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      const double v = xv[i];
      const double inner = kAlpha * (v + 0.044715 * v * v * v);
      const double th = std::tanh(inner);
      const double dinner = kAlpha * (1.0 + 3.0 * 0.044715 * v * v);
      gx[i] *= 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner;
    }
    grads.accumulate(x, gx);
  });
}

Var reshape(Var x, Shape shape) {
  Tape& t = tape_of(x);
  return t.record(x.value().reshaped(std::move(shape)), {x.id}, [&t, x = x.id](const Tensor& g, GradientBuffer& grads) {
    grads.accumulate(x, g.reshaped(t.value(x).shape()));
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(x);
  require_rank2(x.value(), "slice_rows");
  return t.record(x.value().slice0(begin, end), {x.id}, [&t, x = x.id, begin](const Tensor& g, GradientBuffer& grads) {
    Tensor gx(t.value(x).shape(), 0.0);
    std::copy(g.data().begin(), g.data().end(), gx.data().begin() + static_cast<std::ptrdiff_t>(begin * gx.dim(1)));
    grads.accumulate(x, gx);
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  require_rank2(xv, "slice_cols");
  if (begin >= end || end > xv.dim(1)) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                         shape_to_string(xv.shape()));
  }
  const std::size_t width = end - begin;
  Tensor out({xv.dim(0), width});
  for (std::size_t i = 0; i < xv.dim(0); ++i)
    for (std::size_t j = 0; j < width; ++j) out.at(i, j) = xv.at(i, begin + j);
  return t.record(std::move(out), {x.id}, [&t, x = x.id, begin, width](const Tensor& g, GradientBuffer& grads) {
    Tensor gx(t.value(x).shape(), 0.0);
    for (std::size_t i = 0; i < g.dim(0); ++i)
      for (std::size_t j = 0; j < width; ++j) gx.at(i, begin + j) = g.at(i, j);
    grads.accumulate(x, gx);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of zero parts");
  Tape& t = tape_of(parts.front());
  const std::size_t width = parts.front().value().dim(1);
  std::size_t rows = 0;
  std::vector<NodeId> ids;
  std::vector<double> data;
  for (const auto& p : parts) {
    common_tape(parts.front(), p);
    const Tensor& v = p.value();
    require_rank2(v, "concat_rows");
    if (v.dim(1) != width) {
      throw DimensionError("concat_rows widths differ: " + std::to_string(width) + " vs " + std::to_string(v.dim(1)));
    }
    rows += v.dim(0);
    ids.push_back(p.id);
    data.insert(data.end(), v.values().begin(), v.values().end());
  }
  Tensor out({rows, width}, std::move(data));
  return t.record(std::move(out), ids, [&t, ids](const Tensor& g, GradientBuffer& grads) {
    std::size_t offset = 0;
    for (auto id : ids) {
      const std::size_t r = t.value(id).dim(0);
      if (t.requires_grad(id)) grads.accumulate(id, g.slice0(offset, offset + r));
      offset += r;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols of zero parts");
  Tape& t = tape_of(parts.front());
  const std::size_t rows = parts.front().value().dim(0);
  std::size_t width = 0;
  std::vector<NodeId> ids;
  for (const auto& p : parts) {
    common_tape(parts.front(), p);
    require_rank2(p.value(), "concat_cols");
    if (p.value().dim(0) != rows) throw DimensionError("concat_cols row counts differ");
    width += p.value().dim(1);
    ids.push_back(p.id);
  }
  Tensor out({rows, width});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < v.dim(1); ++j) out.at(i, offset + j) = v.at(i, j);
    offset += v.dim(1);
  }
  return t.record(std::move(out), ids, [&t, ids](const Tensor& g, GradientBuffer& grads) {
    std::size_t col = 0;
    for (auto id : ids) {
      const Tensor& v = t.value(id);
      const std::size_t w = v.dim(1);
      if (t.requires_grad(id)) {
        Tensor part(v.shape(), 0.0);
        for (std::size_t i = 0; i < v.dim(0); ++i)
          for (std::size_t j = 0; j < w; ++j) part.at(i, j) = g.at(i, col + j);
        grads.accumulate(id, part);
      }
      col += w;
    }
  });
}

Var cross_entropy(Var logits, std::size_t label) {
  Tape& t = tape_of(logits);
  const Tensor& z = logits.value();
  if (label >= z.numel()) {
    throw RangeError("label " + std::to_string(label) + " out of range for " + std::to_string(z.numel()) + " classes");
  }
  Tensor probs = regvit::softmax_lastdim(z.reshaped({z.numel()}));
  double peak = z[0];
  for (double v : z.data()) peak = std::max(peak, v);
  double total = 0.0;
  for (double v : z.data()) total += std::exp(v - peak);
  const double loss = peak + std::log(total) - z[label];
  return t.record(Tensor::scalar(loss), {logits.id},
                  [&t, id = logits.id, probs = std::move(probs), label](const Tensor& g, GradientBuffer& grads) {
                    Tensor gz = probs;
                    gz[label] -= 1.0;
                    for (auto& v : gz.data()) v *= g.item();
                    grads.accumulate(id, gz.reshaped(t.value(id).shape()));
                  });
}

}  // namespace regvit::ad
