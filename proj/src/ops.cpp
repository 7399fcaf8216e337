#include "usseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace usseg {

namespace {

thread_local bool g_intra_op_parallel = true;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str());
}

void require(bool ok, const char* op, const std::string& msg) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": " + msg);
}

void require_rank5(const char* op, const Shape& s) {
  require(s.rank() == 5, op, "expected rank-5 (n,c,x,y,z) tensor, got " + s.str());
}

struct Dims5 {
  std::int64_t n, c, x, y, z, s;  // s = x*y*z
};

Dims5 dims5(const Shape& s) {
  return {s[0], s[1], s[2], s[3], s[4], s[2] * s[3] * s[4]};
}

using detail::make_op;
using detail::NodeT;

template <typename S>
bool wants(const DiffT<S>& t) {
  return t.requires_grad();
}

}  // namespace

bool intra_op_parallel() { return g_intra_op_parallel; }
void set_intra_op_parallel(bool enabled) { g_intra_op_parallel = enabled; }

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S>
DiffT<S> add(const DiffT<S>& a, const DiffT<S>& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  TensorT<S> out(a.shape());
  out.array() = a.value().array() + b.value().array();
  return make_op<S>("add", std::move(out), {a, b}, [a, b](NodeT<S>& n) {
    if (wants(a)) a.node()->accumulate(n.grad);
    if (wants(b)) b.node()->accumulate(n.grad);
  });
}

template <typename S>
DiffT<S> sub(const DiffT<S>& a, const DiffT<S>& b) {
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  TensorT<S> out(a.shape());
  out.array() = a.value().array() - b.value().array();
  return make_op<S>("sub", std::move(out), {a, b}, [a, b](NodeT<S>& n) {
    if (wants(a)) a.node()->accumulate(n.grad);
    if (wants(b)) {
      TensorT<S> g(n.grad.shape());
      g.array() = -n.grad.array();
      b.node()->accumulate(g);
    }
  });
}

namespace {

// b is a (n,1,x,y,z) mask multiplied across a's channels.
template <typename S>
DiffT<S> mul_channel_mask(const DiffT<S>& a, const DiffT<S>& b) {
  const Dims5 d = dims5(a.shape());
  TensorT<S> out(a.shape());
  const S* ap = a.value().data();
  const S* bp = b.value().data();
  S* op = out.data();
  for (std::int64_t n = 0; n < d.n; ++n) {
    const S* mask = bp + n * d.s;
    for (std::int64_t c = 0; c < d.c; ++c) {
      const S* av = ap + (n * d.c + c) * d.s;
      S* ov = op + (n * d.c + c) * d.s;
      for (std::int64_t v = 0; v < d.s; ++v) ov[v] = av[v] * mask[v];
    }
  }
  return make_op<S>("mul", std::move(out), {a, b}, [a, b, d](NodeT<S>& n) {
    const S* gp = n.grad.data();
    if (wants(a)) {
      TensorT<S> ga(a.shape());
      S* gap = ga.data();
      const S* bp = b.value().data();
      for (std::int64_t i = 0; i < d.n; ++i) {
        const S* mask = bp + i * d.s;
        for (std::int64_t c = 0; c < d.c; ++c) {
          const S* gv = gp + (i * d.c + c) * d.s;
          S* out = gap + (i * d.c + c) * d.s;
          for (std::int64_t v = 0; v < d.s; ++v) out[v] = gv[v] * mask[v];
        }
      }
      a.node()->accumulate(ga);
    }
    if (wants(b)) {
      TensorT<S> gb(b.shape());
      S* gbp = gb.data();
      const S* ap = a.value().data();
      for (std::int64_t i = 0; i < d.n; ++i) {
        S* out = gbp + i * d.s;
        for (std::int64_t c = 0; c < d.c; ++c) {
          const S* gv = gp + (i * d.c + c) * d.s;
          const S* av = ap + (i * d.c + c) * d.s;
          for (std::int64_t v = 0; v < d.s; ++v) out[v] += gv[v] * av[v];
        }
      }
      b.node()->accumulate(gb);
    }
  });
}

}  // namespace

template <typename S>
DiffT<S> mul(const DiffT<S>& a, const DiffT<S>& b) {
  if (a.shape() != b.shape()) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const bool mask_case = sa.rank() == 5 && sb.rank() == 5 && sb[1] == 1 && sa[0] == sb[0] &&
                           sa[2] == sb[2] && sa[3] == sb[3] && sa[4] == sb[4];
    if (!mask_case) shape_error("mul", sa, sb);
    return mul_channel_mask(a, b);
  }
  TensorT<S> out(a.shape());
  out.array() = a.value().array() * b.value().array();
  return make_op<S>("mul", std::move(out), {a, b}, [a, b](NodeT<S>& n) {
    if (wants(a)) {
      TensorT<S> g(n.grad.shape());
      g.array() = n.grad.array() * b.value().array();
      a.node()->accumulate(g);
    }
    if (wants(b)) {
      TensorT<S> g(n.grad.shape());
      g.array() = n.grad.array() * a.value().array();
      b.node()->accumulate(g);
    }
  });
}

template <typename S>
DiffT<S> add_scalar(const DiffT<S>& a, double v) {
  TensorT<S> out(a.shape());
  out.array() = a.value().array() + static_cast<S>(v);
  return make_op<S>("add_scalar", std::move(out), {a}, [a](NodeT<S>& n) { a.node()->accumulate(n.grad); });
}

template <typename S>
DiffT<S> mul_scalar(const DiffT<S>& a, double v) {
  const S sv = static_cast<S>(v);
  TensorT<S> out(a.shape());
  out.array() = a.value().array() * sv;
  return make_op<S>("mul_scalar", std::move(out), {a}, [a, sv](NodeT<S>& n) {
    TensorT<S> g(n.grad.shape());
    g.array() = n.grad.array() * sv;
    a.node()->accumulate(g);
  });
}

template <typename S>
DiffT<S> relu(const DiffT<S>& a) {
  TensorT<S> out(a.shape());
  out.array() = a.value().array().max(S(0));
  return make_op<S>("relu", std::move(out), {a}, [a](NodeT<S>& n) {
    TensorT<S> g(n.grad.shape());
    g.array() = (a.value().array() > S(0)).select(n.grad.array(), S(0));
    a.node()->accumulate(g);
  });
}

template <typename S>
DiffT<S> sigmoid(const DiffT<S>& a) {
  TensorT<S> out(a.shape());
  out.array() = S(1) / (S(1) + (-a.value().array()).exp());
  return make_op<S>("sigmoid", std::move(out), {a}, [a](NodeT<S>& n) {
    TensorT<S> g(n.grad.shape());
    const auto y = n.value.array();
    g.array() = n.grad.array() * y * (S(1) - y);
    a.node()->accumulate(g);
  });
}

template <typename S>
DiffT<S> exp(const DiffT<S>& a) {
  TensorT<S> out(a.shape());
  out.array() = a.value().array().exp();
  return make_op<S>("exp", std::move(out), {a}, [a](NodeT<S>& n) {
    TensorT<S> g(n.grad.shape());
    g.array() = n.grad.array() * n.value.array();
    a.node()->accumulate(g);
  });
}

template <typename S>
DiffT<S> log(const DiffT<S>& a) {
  TensorT<S> out(a.shape());
  out.array() = a.value().array().log();
  return make_op<S>("log", std::move(out), {a}, [a](NodeT<S>& n) {
    TensorT<S> g(n.grad.shape());
    g.array() = n.grad.array() / a.value().array();
    a.node()->accumulate(g);
  });
}

template <typename S>
DiffT<S> square(const DiffT<S>& a) {
  TensorT<S> out(a.shape());
  out.array() = a.value().array().square();
  return make_op<S>("square", std::move(out), {a}, [a](NodeT<S>& n) {
    TensorT<S> g(n.grad.shape());
    g.array() = n.grad.array() * S(2) * a.value().array();
    a.node()->accumulate(g);
  });
}

template <typename S>
DiffT<S> clamp(const DiffT<S>& a, double lo, double hi) {
  require(lo <= hi, "clamp", "lo must not exceed hi");
  const S slo = static_cast<S>(lo), shi = static_cast<S>(hi);
  TensorT<S> out(a.shape());
  out.array() = a.value().array().max(slo).min(shi);
  return make_op<S>("clamp", std::move(out), {a}, [a, slo, shi](NodeT<S>& n) {
    TensorT<S> g(n.grad.shape());
    const auto x = a.value().array();
    g.array() = (x > slo && x < shi).select(n.grad.array(), S(0));
    a.node()->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// shape / channel structure
// ---------------------------------------------------------------------------

template <typename S>
DiffT<S> reshape(const DiffT<S>& a, const Shape& shape) {
  TensorT<S> out = a.value().reshaped(shape);
  return make_op<S>("reshape", std::move(out), {a}, [a](NodeT<S>& n) {
    a.node()->accumulate(n.grad.reshaped(a.shape()));
  });
}

template <typename S>
DiffT<S> concat_channels(const DiffT<S>& a, const DiffT<S>& b) {
  require_rank5("concat_channels", a.shape());
  require_rank5("concat_channels", b.shape());
  const Dims5 da = dims5(a.shape());
  const Dims5 db = dims5(b.shape());
  if (da.n != db.n || da.x != db.x || da.y != db.y || da.z != db.z) {
    shape_error("concat_channels", a.shape(), b.shape());
  }
  TensorT<S> out(Shape{da.n, da.c + db.c, da.x, da.y, da.z});
  S* op = out.data();
  for (std::int64_t n = 0; n < da.n; ++n) {
    std::copy_n(a.value().data() + n * da.c * da.s, da.c * da.s, op + n * (da.c + db.c) * da.s);
    std::copy_n(b.value().data() + n * db.c * da.s, db.c * da.s,
                op + (n * (da.c + db.c) + da.c) * da.s);
  }
  return make_op<S>("concat_channels", std::move(out), {a, b}, [a, b, da, db](NodeT<S>& n) {
    const S* gp = n.grad.data();
    if (wants(a)) {
      TensorT<S> ga(a.shape());
      for (std::int64_t i = 0; i < da.n; ++i) {
        std::copy_n(gp + i * (da.c + db.c) * da.s, da.c * da.s, ga.data() + i * da.c * da.s);
      }
      a.node()->accumulate(ga);
    }
    if (wants(b)) {
      TensorT<S> gb(b.shape());
      for (std::int64_t i = 0; i < da.n; ++i) {
        std::copy_n(gp + (i * (da.c + db.c) + da.c) * da.s, db.c * da.s, gb.data() + i * db.c * da.s);
      }
      b.node()->accumulate(gb);
    }
  });
}

template <typename S>
DiffT<S> broadcast_channels(const DiffT<S>& a, std::int64_t x, std::int64_t y, std::int64_t z) {
  require_rank5("broadcast_channels", a.shape());
  const Dims5 d = dims5(a.shape());
  require(d.x == 1 && d.y == 1 && d.z == 1, "broadcast_channels",
          "source must be (n,c,1,1,1), got " + a.shape().str());
  TensorT<S> out(Shape{d.n, d.c, x, y, z});
  const std::int64_t s = x * y * z;
  for (std::int64_t i = 0; i < d.n * d.c; ++i) {
    std::fill_n(out.data() + i * s, s, a.value()[i]);
  }
  return make_op<S>("broadcast_channels", std::move(out), {a}, [a, d, s](NodeT<S>& n) {
    TensorT<S> ga(a.shape());
    const S* gp = n.grad.data();
    for (std::int64_t i = 0; i < d.n * d.c; ++i) {
      double acc = 0.0;
      const S* block = gp + i * s;
      for (std::int64_t v = 0; v < s; ++v) acc += static_cast<double>(block[v]);
      ga[i] = static_cast<S>(acc);
    }
    a.node()->accumulate(ga);
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
DiffT<S> sum_all(const DiffT<S>& a) {
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(a.value().sum64()));
  return make_op<S>("sum_all", std::move(out), {a}, [a](NodeT<S>& n) {
    a.node()->accumulate(TensorT<S>(a.shape(), n.grad[0]));
  });
}

template <typename S>
DiffT<S> mean_all(const DiffT<S>& a) {
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(a.value().mean64()));
  const double inv = 1.0 / static_cast<double>(a.numel());
  return make_op<S>("mean_all", std::move(out), {a}, [a, inv](NodeT<S>& n) {
    a.node()->accumulate(TensorT<S>(a.shape(), static_cast<S>(static_cast<double>(n.grad[0]) * inv)));
  });
}

template <typename S>
DiffT<S> spatial_mean(const DiffT<S>& a) {
  require_rank5("spatial_mean", a.shape());
  const Dims5 d = dims5(a.shape());
  TensorT<S> out(Shape{d.n, d.c, 1, 1, 1});
  const S* ap = a.value().data();
  for (std::int64_t i = 0; i < d.n * d.c; ++i) {
    double acc = 0.0;
    const S* block = ap + i * d.s;
    for (std::int64_t v = 0; v < d.s; ++v) acc += static_cast<double>(block[v]);
    out[i] = static_cast<S>(acc / static_cast<double>(d.s));
  }
  return make_op<S>("spatial_mean", std::move(out), {a}, [a, d](NodeT<S>& n) {
    TensorT<S> ga(a.shape());
    const double inv = 1.0 / static_cast<double>(d.s);
    for (std::int64_t i = 0; i < d.n * d.c; ++i) {
      std::fill_n(ga.data() + i * d.s, d.s, static_cast<S>(static_cast<double>(n.grad[i]) * inv));
    }
    a.node()->accumulate(ga);
  });
}

// ---------------------------------------------------------------------------
// softmax over the channel axis
// ---------------------------------------------------------------------------

template <typename S>
DiffT<S> softmax_channels(const DiffT<S>& a) {
  require_rank5("softmax_channels", a.shape());
  const Dims5 d = dims5(a.shape());
  require(d.c >= 1, "softmax_channels", "needs at least one channel");
  TensorT<S> out(a.shape());
  const S* ap = a.value().data();
  S* op = out.data();
#pragma omp parallel for collapse(2) schedule(static) if (g_intra_op_parallel)
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t v = 0; v < d.s; ++v) {
      const std::int64_t base = n * d.c * d.s + v;
      S m = ap[base];
      for (std::int64_t c = 1; c < d.c; ++c) m = std::max(m, ap[base + c * d.s]);
      double denom = 0.0;
      for (std::int64_t c = 0; c < d.c; ++c) {
        const S e = std::exp(ap[base + c * d.s] - m);
        op[base + c * d.s] = e;
        denom += static_cast<double>(e);
      }
      const S inv = static_cast<S>(1.0 / denom);
      for (std::int64_t c = 0; c < d.c; ++c) op[base + c * d.s] *= inv;
    }
  }
  return make_op<S>("softmax_channels", std::move(out), {a}, [a, d](NodeT<S>& n) {
    TensorT<S> ga(a.shape());
    const S* yp = n.value.data();
    const S* gp = n.grad.data();
    S* gap = ga.data();
#pragma omp parallel for collapse(2) schedule(static) if (g_intra_op_parallel)
    for (std::int64_t i = 0; i < d.n; ++i) {
      for (std::int64_t v = 0; v < d.s; ++v) {
        const std::int64_t base = i * d.c * d.s + v;
        double dot = 0.0;
        for (std::int64_t c = 0; c < d.c; ++c) {
          dot += static_cast<double>(gp[base + c * d.s]) * static_cast<double>(yp[base + c * d.s]);
        }
        for (std::int64_t c = 0; c < d.c; ++c) {
          const std::int64_t k = base + c * d.s;
          gap[k] = yp[k] * (gp[k] - static_cast<S>(dot));
        }
      }
    }
    a.node()->accumulate(ga);
  });
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  std::int64_t n, ci, x, y, z, s;
  std::int64_t co, kx, ky, kz;
};

ConvDims conv_dims(const char* op, const Shape& xs, const Shape& ws, const Shape& bs) {
  require(xs.rank() == 5, op, "input must be rank-5, got " + xs.str());
  require(ws.rank() == 5, op, "weight must be rank-5, got " + ws.str());
  ConvDims d{xs[0], xs[1], xs[2], xs[3], xs[4], xs[2] * xs[3] * xs[4], ws[0], ws[2], ws[3], ws[4]};
  if (ws[1] != d.ci) shape_error(op, xs, ws);
  require(d.kx % 2 == 1 && d.ky % 2 == 1 && d.kz % 2 == 1, op,
          "kernel extents must be odd, got " + ws.str());
  require(bs.rank() == 1 && bs[0] == d.co, op,
          "bias shape " + bs.str() + " must be (" + std::to_string(d.co) + ")");
  return d;
}

template <typename S>
TensorT<S> conv3d_value(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b,
                        const ConvDims& d) {
  TensorT<S> out(Shape{d.n, d.co, d.x, d.y, d.z});
  const S* xp = x.data();
  const S* wp = w.data();
  const S* bp = b.data();
  S* op = out.data();

  if (d.kx == 1 && d.ky == 1 && d.kz == 1) {
#pragma omp parallel for collapse(2) schedule(static) if (g_intra_op_parallel)
    for (std::int64_t n = 0; n < d.n; ++n) {
      for (std::int64_t co = 0; co < d.co; ++co) {
        S* ov = op + (n * d.co + co) * d.s;
        std::fill_n(ov, d.s, bp[co]);
        for (std::int64_t ci = 0; ci < d.ci; ++ci) {
          const S wv = wp[co * d.ci + ci];
          const S* xv = xp + (n * d.ci + ci) * d.s;
          for (std::int64_t v = 0; v < d.s; ++v) ov[v] += wv * xv[v];
        }
      }
    }
    return out;
  }

  const std::int64_t hx = d.kx / 2, hy = d.ky / 2, hz = d.kz / 2;
#pragma omp parallel for collapse(3) schedule(static) if (g_intra_op_parallel)
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t co = 0; co < d.co; ++co) {
      for (std::int64_t xo = 0; xo < d.x; ++xo) {
        S* orow = op + ((n * d.co + co) * d.x + xo) * d.y * d.z;
        std::fill_n(orow, d.y * d.z, bp[co]);
        for (std::int64_t ci = 0; ci < d.ci; ++ci) {
          const S* xin = xp + (n * d.ci + ci) * d.s;
          const S* wk = wp + (co * d.ci + ci) * d.kx * d.ky * d.kz;
          for (std::int64_t kx = 0; kx < d.kx; ++kx) {
            const std::int64_t xi = xo + kx - hx;
            if (xi < 0 || xi >= d.x) continue;
            for (std::int64_t ky = 0; ky < d.ky; ++ky) {
              const std::int64_t dy = ky - hy;
              const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
              const std::int64_t y1 = std::min(d.y, d.y - dy);
              for (std::int64_t kz = 0; kz < d.kz; ++kz) {
                const std::int64_t dz = kz - hz;
                const std::int64_t z0 = std::max<std::int64_t>(0, -dz);
                const std::int64_t z1 = std::min(d.z, d.z - dz);
                const S wv = wk[(kx * d.ky + ky) * d.kz + kz];
                for (std::int64_t yo = y0; yo < y1; ++yo) {
                  const S* iv = xin + (xi * d.y + yo + dy) * d.z + z0 + dz;
                  S* ov = orow + yo * d.z + z0;
                  const std::int64_t len = z1 - z0;
                  for (std::int64_t t = 0; t < len; ++t) ov[t] += wv * iv[t];
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename S>
TensorT<S> conv3d_grad_input(const TensorT<S>& gout, const TensorT<S>& w, const ConvDims& d) {
  TensorT<S> gin(Shape{d.n, d.ci, d.x, d.y, d.z});
  const S* gp = gout.data();
  const S* wp = w.data();
  S* ip = gin.data();

  if (d.kx == 1 && d.ky == 1 && d.kz == 1) {
#pragma omp parallel for collapse(2) schedule(static) if (g_intra_op_parallel)
    for (std::int64_t n = 0; n < d.n; ++n) {
      for (std::int64_t ci = 0; ci < d.ci; ++ci) {
        S* iv = ip + (n * d.ci + ci) * d.s;
        for (std::int64_t co = 0; co < d.co; ++co) {
          const S wv = wp[co * d.ci + ci];
          const S* gv = gp + (n * d.co + co) * d.s;
          for (std::int64_t v = 0; v < d.s; ++v) iv[v] += wv * gv[v];
        }
      }
    }
    return gin;
  }

  const std::int64_t hx = d.kx / 2, hy = d.ky / 2, hz = d.kz / 2;
#pragma omp parallel for collapse(3) schedule(static) if (g_intra_op_parallel)
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t ci = 0; ci < d.ci; ++ci) {
      for (std::int64_t xi = 0; xi < d.x; ++xi) {
        S* irow = ip + ((n * d.ci + ci) * d.x + xi) * d.y * d.z;
        for (std::int64_t co = 0; co < d.co; ++co) {
          const S* gch = gp + (n * d.co + co) * d.s;
          const S* wk = wp + (co * d.ci + ci) * d.kx * d.ky * d.kz;
          for (std::int64_t kx = 0; kx < d.kx; ++kx) {
            const std::int64_t xo = xi - (kx - hx);
            if (xo < 0 || xo >= d.x) continue;
            for (std::int64_t ky = 0; ky < d.ky; ++ky) {
              const std::int64_t dy = ky - hy;
              const std::int64_t y0 = std::max<std::int64_t>(0, dy);
              const std::int64_t y1 = std::min(d.y, d.y + dy);
              for (std::int64_t kz = 0; kz < d.kz; ++kz) {
                const std::int64_t dz = kz - hz;
                const std::int64_t z0 = std::max<std::int64_t>(0, dz);
                const std::int64_t z1 = std::min(d.z, d.z + dz);
                const S wv = wk[(kx * d.ky + ky) * d.kz + kz];
                for (std::int64_t yi = y0; yi < y1; ++yi) {
                  const S* gv = gch + (xo * d.y + yi - dy) * d.z + z0 - dz;
                  S* iv = irow + yi * d.z + z0;
                  const std::int64_t len = z1 - z0;
                  for (std::int64_t t = 0; t < len; ++t) iv[t] += wv * gv[t];
                }
              }
            }
          }
        }
      }
    }
  }
  return gin;
}

template <typename S>
TensorT<S> conv3d_grad_weight(const TensorT<S>& gout, const TensorT<S>& x, const ConvDims& d) {
  TensorT<S> gw(Shape{d.co, d.ci, d.kx, d.ky, d.kz});
  const S* gp = gout.data();
  const S* xp = x.data();
  S* wp = gw.data();
  const std::int64_t hx = d.kx / 2, hy = d.ky / 2, hz = d.kz / 2;
#pragma omp parallel for collapse(2) schedule(static) if (g_intra_op_parallel)
  for (std::int64_t co = 0; co < d.co; ++co) {
    for (std::int64_t ci = 0; ci < d.ci; ++ci) {
      S* wk = wp + (co * d.ci + ci) * d.kx * d.ky * d.kz;
      for (std::int64_t kx = 0; kx < d.kx; ++kx) {
        const std::int64_t dx = kx - hx;
        const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
        const std::int64_t x1 = std::min(d.x, d.x - dx);
        for (std::int64_t ky = 0; ky < d.ky; ++ky) {
          const std::int64_t dy = ky - hy;
          const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
          const std::int64_t y1 = std::min(d.y, d.y - dy);
          for (std::int64_t kz = 0; kz < d.kz; ++kz) {
            const std::int64_t dz = kz - hz;
            const std::int64_t z0 = std::max<std::int64_t>(0, -dz);
            const std::int64_t z1 = std::min(d.z, d.z - dz);
            const std::int64_t len = z1 - z0;
            double acc = 0.0;
            for (std::int64_t n = 0; n < d.n; ++n) {
              const S* gch = gp + (n * d.co + co) * d.s;
              const S* xch = xp + (n * d.ci + ci) * d.s;
              for (std::int64_t xo = x0; xo < x1; ++xo) {
                for (std::int64_t yo = y0; yo < y1; ++yo) {
                  const S* gv = gch + (xo * d.y + yo) * d.z + z0;
                  const S* xv = xch + ((xo + dx) * d.y + yo + dy) * d.z + z0 + dz;
                  S dot = S(0);
#pragma omp simd reduction(+ : dot)
                  for (std::int64_t t = 0; t < len; ++t) dot += gv[t] * xv[t];
                  acc += static_cast<double>(dot);
                }
              }
            }
            wk[(kx * d.ky + ky) * d.kz + kz] = static_cast<S>(acc);
          }
        }
      }
    }
  }
  return gw;
}

template <typename S>
TensorT<S> conv3d_grad_bias(const TensorT<S>& gout, const ConvDims& d) {
  TensorT<S> gb(Shape{d.co});
  const S* gp = gout.data();
#pragma omp parallel for schedule(static) if (g_intra_op_parallel)
  for (std::int64_t co = 0; co < d.co; ++co) {
    double acc = 0.0;
    for (std::int64_t n = 0; n < d.n; ++n) {
      const S* gch = gp + (n * d.co + co) * d.s;
      for (std::int64_t v = 0; v < d.s; ++v) acc += static_cast<double>(gch[v]);
    }
    gb[co] = static_cast<S>(acc);
  }
  return gb;
}

}  // namespace

template <typename S>
DiffT<S> conv3d(const DiffT<S>& x, const DiffT<S>& w, const DiffT<S>& bias) {
  const ConvDims d = conv_dims("conv3d", x.shape(), w.shape(), bias.shape());
  TensorT<S> out = conv3d_value(x.value(), w.value(), bias.value(), d);
  return make_op<S>("conv3d", std::move(out), {x, w, bias}, [x, w, bias, d](NodeT<S>& n) {
    if (wants(x)) x.node()->accumulate(conv3d_grad_input(n.grad, w.value(), d));
    if (wants(w)) w.node()->accumulate(conv3d_grad_weight(n.grad, x.value(), d));
    if (wants(bias)) bias.node()->accumulate(conv3d_grad_bias(n.grad, d));
  });
}

// ---------------------------------------------------------------------------
// pooling / upsampling
// ---------------------------------------------------------------------------

template <typename S>
DiffT<S> maxpool2(const DiffT<S>& x) {
  require_rank5("maxpool2", x.shape());
  const Dims5 d = dims5(x.shape());
  require(d.x % 2 == 0 && d.y % 2 == 0 && d.z % 2 == 0, "maxpool2",
          "spatial extents must be even, got " + x.shape().str());
  const std::int64_t ox = d.x / 2, oy = d.y / 2, oz = d.z / 2, os = ox * oy * oz;
  TensorT<S> out(Shape{d.n, d.c, ox, oy, oz});
  auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));
  const S* xp = x.value().data();
  S* op = out.data();
  std::int64_t* argp = arg->data();
#pragma omp parallel for collapse(2) schedule(static) if (g_intra_op_parallel)
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t c = 0; c < d.c; ++c) {
      const S* xch = xp + (n * d.c + c) * d.s;
      S* och = op + (n * d.c + c) * os;
      std::int64_t* ach = argp + (n * d.c + c) * os;
      for (std::int64_t xo = 0; xo < ox; ++xo) {
        for (std::int64_t yo = 0; yo < oy; ++yo) {
          for (std::int64_t zo = 0; zo < oz; ++zo) {
            S best = -std::numeric_limits<S>::infinity();
            std::int64_t besti = 0;
            for (std::int64_t ax = 0; ax < 2; ++ax) {
              for (std::int64_t ay = 0; ay < 2; ++ay) {
                for (std::int64_t az = 0; az < 2; ++az) {
                  const std::int64_t idx = ((2 * xo + ax) * d.y + 2 * yo + ay) * d.z + 2 * zo + az;
                  if (xch[idx] > best) {  // ties keep the first window element
                    best = xch[idx];
                    besti = idx;
                  }
                }
              }
            }
            och[(xo * oy + yo) * oz + zo] = best;
            ach[(xo * oy + yo) * oz + zo] = besti;
          }
        }
      }
    }
  }
  return make_op<S>("maxpool2", std::move(out), {x}, [x, d, os, arg](NodeT<S>& n) {
    TensorT<S> gx(x.shape());
    const S* gp = n.grad.data();
    S* gxp = gx.data();
    const std::int64_t* argp2 = arg->data();
#pragma omp parallel for collapse(2) schedule(static) if (g_intra_op_parallel)
    for (std::int64_t i = 0; i < d.n; ++i) {
      for (std::int64_t c = 0; c < d.c; ++c) {
        const S* gch = gp + (i * d.c + c) * os;
        S* gxch = gxp + (i * d.c + c) * d.s;
        const std::int64_t* ach = argp2 + (i * d.c + c) * os;
        for (std::int64_t v = 0; v < os; ++v) gxch[ach[v]] += gch[v];
      }
    }
    x.node()->accumulate(gx);
  });
}

template <typename S>
DiffT<S> upsample_nearest2(const DiffT<S>& x) {
  require_rank5("upsample_nearest2", x.shape());
  const Dims5 d = dims5(x.shape());
  const std::int64_t ox = 2 * d.x, oy = 2 * d.y, oz = 2 * d.z, os = ox * oy * oz;
  TensorT<S> out(Shape{d.n, d.c, ox, oy, oz});
  const S* xp = x.value().data();
  S* op = out.data();
#pragma omp parallel for collapse(2) schedule(static) if (g_intra_op_parallel)
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t c = 0; c < d.c; ++c) {
      const S* xch = xp + (n * d.c + c) * d.s;
      S* och = op + (n * d.c + c) * os;
      for (std::int64_t xo = 0; xo < ox; ++xo) {
        for (std::int64_t yo = 0; yo < oy; ++yo) {
          const S* xrow = xch + ((xo / 2) * d.y + yo / 2) * d.z;
          S* orow = och + (xo * oy + yo) * oz;
          for (std::int64_t zo = 0; zo < oz; ++zo) orow[zo] = xrow[zo / 2];
        }
      }
    }
  }
  return make_op<S>("upsample_nearest2", std::move(out), {x}, [x, d, oy, oz, os](NodeT<S>& n) {
    TensorT<S> gx(x.shape());
    const S* gp = n.grad.data();
    S* gxp = gx.data();
#pragma omp parallel for collapse(2) schedule(static) if (g_intra_op_parallel)
    for (std::int64_t i = 0; i < d.n; ++i) {
      for (std::int64_t c = 0; c < d.c; ++c) {
        const S* gch = gp + (i * d.c + c) * os;
        S* gxch = gxp + (i * d.c + c) * d.s;
        for (std::int64_t xi = 0; xi < d.x; ++xi) {
          for (std::int64_t yi = 0; yi < d.y; ++yi) {
            S* gxrow = gxch + (xi * d.y + yi) * d.z;
            for (std::int64_t ax = 0; ax < 2; ++ax) {
              for (std::int64_t ay = 0; ay < 2; ++ay) {
                const S* grow = gch + ((2 * xi + ax) * oy + 2 * yi + ay) * oz;
                for (std::int64_t zi = 0; zi < d.z; ++zi) {
                  gxrow[zi] += grow[2 * zi] + grow[2 * zi + 1];
                }
              }
            }
          }
        }
      }
    }
    x.node()->accumulate(gx);
  });
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

template <typename S>
DiffT<S> dropout(const DiffT<S>& x, double rate, RngStream& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout", "rate must be in [0, 1), got " + std::to_string(rate));
  if (rate == 0.0) return x;
  const S scale = static_cast<S>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<TensorT<S>>(x.shape());
  // Mask draws are strictly sequential so the stream state alone fixes them.
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    (*mask)[i] = rng.uniform() < rate ? S(0) : scale;
  }
  TensorT<S> out(x.shape());
  out.array() = x.value().array() * mask->array();
  return make_op<S>("dropout", std::move(out), {x}, [x, mask](NodeT<S>& n) {
    TensorT<S> g(n.grad.shape());
    g.array() = n.grad.array() * mask->array();
    x.node()->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// instance normalization
// ---------------------------------------------------------------------------

template <typename S>
DiffT<S> instance_norm(const DiffT<S>& x, const DiffT<S>& gamma, const DiffT<S>& beta, double eps) {
  require_rank5("instance_norm", x.shape());
  const Dims5 d = dims5(x.shape());
  const Shape affine{1, d.c, 1, 1, 1};
  if (gamma.shape() != affine) shape_error("instance_norm", x.shape(), gamma.shape());
  if (beta.shape() != affine) shape_error("instance_norm", x.shape(), beta.shape());

  auto xhat = std::make_shared<TensorT<S>>(x.shape());
  auto inv_sigma = std::make_shared<std::vector<S>>(static_cast<std::size_t>(d.n * d.c));
  TensorT<S> out(x.shape());
  const S* xp = x.value().data();
  const S* gp = gamma.value().data();
  const S* bp = beta.value().data();
  S* hp = xhat->data();
  S* op = out.data();
  S* isp = inv_sigma->data();
#pragma omp parallel for collapse(2) schedule(static) if (g_intra_op_parallel)
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t c = 0; c < d.c; ++c) {
      const S* xv = xp + (n * d.c + c) * d.s;
      S* hv = hp + (n * d.c + c) * d.s;
      S* ov = op + (n * d.c + c) * d.s;
      double mean = 0.0;
      for (std::int64_t v = 0; v < d.s; ++v) mean += static_cast<double>(xv[v]);
      mean /= static_cast<double>(d.s);
      double var = 0.0;
      for (std::int64_t v = 0; v < d.s; ++v) {
        const double t = static_cast<double>(xv[v]) - mean;
        var += t * t;
      }
      var /= static_cast<double>(d.s);
      const S inv = static_cast<S>(1.0 / std::sqrt(var + eps));
      isp[n * d.c + c] = inv;
      const S mu = static_cast<S>(mean);
      const S g = gp[c], b = bp[c];
      for (std::int64_t v = 0; v < d.s; ++v) {
        hv[v] = (xv[v] - mu) * inv;
        ov[v] = g * hv[v] + b;
      }
    }
  }
  return make_op<S>("instance_norm", std::move(out), {x, gamma, beta},
                    [x, gamma, beta, d, xhat, inv_sigma](NodeT<S>& n) {
    const S* gp = n.grad.data();
    const S* hp = xhat->data();
    // Per-(sample, channel) sums feed both the input gradient and the
    // affine gradients.
    std::vector<double> s1(static_cast<std::size_t>(d.n * d.c));
    std::vector<double> s2(static_cast<std::size_t>(d.n * d.c));
#pragma omp parallel for collapse(2) schedule(static) if (g_intra_op_parallel)
    for (std::int64_t i = 0; i < d.n; ++i) {
      for (std::int64_t c = 0; c < d.c; ++c) {
        const S* gv = gp + (i * d.c + c) * d.s;
        const S* hv = hp + (i * d.c + c) * d.s;
        double a = 0.0, b = 0.0;
        for (std::int64_t v = 0; v < d.s; ++v) {
          a += static_cast<double>(gv[v]);
          b += static_cast<double>(gv[v]) * static_cast<double>(hv[v]);
        }
        s1[static_cast<std::size_t>(i * d.c + c)] = a;
        s2[static_cast<std::size_t>(i * d.c + c)] = b;
      }
    }
    if (wants(x)) {
      TensorT<S> gx(x.shape());
      S* gxp = gx.data();
      const S* gammap = gamma.value().data();
      const S* isp = inv_sigma->data();
#pragma omp parallel for collapse(2) schedule(static) if (g_intra_op_parallel)
      for (std::int64_t i = 0; i < d.n; ++i) {
        for (std::int64_t c = 0; c < d.c; ++c) {
          const S* gv = gp + (i * d.c + c) * d.s;
          const S* hv = hp + (i * d.c + c) * d.s;
          S* gxv = gxp + (i * d.c + c) * d.s;
          const S k = gammap[c] * isp[i * d.c + c];
          const S m1 = static_cast<S>(s1[static_cast<std::size_t>(i * d.c + c)] / static_cast<double>(d.s));
          const S m2 = static_cast<S>(s2[static_cast<std::size_t>(i * d.c + c)] / static_cast<double>(d.s));
          for (std::int64_t v = 0; v < d.s; ++v) {
            gxv[v] = k * (gv[v] - m1 - hv[v] * m2);
          }
        }
      }
      x.node()->accumulate(gx);
    }
    if (wants(gamma)) {
      TensorT<S> gg(gamma.shape());
      for (std::int64_t c = 0; c < d.c; ++c) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < d.n; ++i) acc += s2[static_cast<std::size_t>(i * d.c + c)];
        gg[c] = static_cast<S>(acc);
      }
      gamma.node()->accumulate(gg);
    }
    if (wants(beta)) {
      TensorT<S> gb(beta.shape());
      for (std::int64_t c = 0; c < d.c; ++c) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < d.n; ++i) acc += s1[static_cast<std::size_t>(i * d.c + c)];
        gb[c] = static_cast<S>(acc);
      }
      beta.node()->accumulate(gb);
    }
  });
}

// ---------------------------------------------------------------------------
// explicit instantiations: float graphs for training, double graphs for the
// finite-difference oracles
// ---------------------------------------------------------------------------

#define USSEG_INSTANTIATE_OPS(S)                                                           \
  template DiffT<S> add(const DiffT<S>&, const DiffT<S>&);                                 \
  template DiffT<S> sub(const DiffT<S>&, const DiffT<S>&);                                 \
  template DiffT<S> mul(const DiffT<S>&, const DiffT<S>&);                                 \
  template DiffT<S> add_scalar(const DiffT<S>&, double);                                   \
  template DiffT<S> mul_scalar(const DiffT<S>&, double);                                   \
  template DiffT<S> relu(const DiffT<S>&);                                                 \
  template DiffT<S> sigmoid(const DiffT<S>&);                                              \
  template DiffT<S> exp(const DiffT<S>&);                                                  \
  template DiffT<S> log(const DiffT<S>&);                                                  \
  template DiffT<S> square(const DiffT<S>&);                                               \
  template DiffT<S> clamp(const DiffT<S>&, double, double);                                \
  template DiffT<S> reshape(const DiffT<S>&, const Shape&);                                \
  template DiffT<S> concat_channels(const DiffT<S>&, const DiffT<S>&);                     \
  template DiffT<S> broadcast_channels(const DiffT<S>&, std::int64_t, std::int64_t,        \
                                       std::int64_t);                                      \
  template DiffT<S> sum_all(const DiffT<S>&);                                              \
  template DiffT<S> mean_all(const DiffT<S>&);                                             \
  template DiffT<S> spatial_mean(const DiffT<S>&);                                         \
  template DiffT<S> softmax_channels(const DiffT<S>&);                                     \
  template DiffT<S> conv3d(const DiffT<S>&, const DiffT<S>&, const DiffT<S>&);             \
  template DiffT<S> maxpool2(const DiffT<S>&);                                             \
  template DiffT<S> upsample_nearest2(const DiffT<S>&);                                    \
  template DiffT<S> dropout(const DiffT<S>&, double, RngStream&);                          \
  template DiffT<S> instance_norm(const DiffT<S>&, const DiffT<S>&, const DiffT<S>&, double);

USSEG_INSTANTIATE_OPS(float)
USSEG_INSTANTIATE_OPS(double)
#undef USSEG_INSTANTIATE_OPS

}  // namespace usseg
