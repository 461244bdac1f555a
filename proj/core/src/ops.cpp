#include "mdf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kernels.hpp"
#include "mdf/error.hpp"

namespace mdf::ops {

namespace {

/// Gradient buffer of input `slot` of node `n`, or nullptr when that input
/// does not need a gradient.
double* input_grad(Graph& g, const Graph::Node& n, std::size_t slot) {
    const std::size_t id = n.inputs[slot];
    if (!g.nodes()[id].requires_grad) return nullptr;
    return g.grad_buffer(id).data();
}

const Tensor& input_value(const Graph& g, const Graph::Node& n, std::size_t slot) {
    return g.nodes()[n.inputs[slot]].value;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw Error(Errc::shape_mismatch, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                              shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw Error(Errc::shape_mismatch, std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

double sigmoid_scalar(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

struct ConvGeometry {
    std::size_t batch, cin, h, w, cout, k, stride, pad, ho, wo;
    [[nodiscard]] std::size_t patch() const { return cin * k * k; }
    [[nodiscard]] std::size_t pixels() const { return ho * wo; }
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad, const char* op) {
    require_rank(x, 4, op);
    require_rank(w, 4, op);
    if (w.dim(1) != x.dim(1)) {
        throw Error(Errc::shape_mismatch, std::string(op) + ": input has " + std::to_string(x.dim(1)) +
                                              " channels, weight expects " + std::to_string(w.dim(1)));
    }
    if (w.dim(2) != w.dim(3)) throw Error(Errc::shape_mismatch, std::string(op) + ": kernel must be square");
    if (stride == 0) throw Error(Errc::invalid_argument, std::string(op) + ": stride must be positive");
    ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, 0, 0};
    if (geo.h + 2 * pad < geo.k || geo.w + 2 * pad < geo.k) {
        throw Error(Errc::shape_mismatch, std::string(op) + ": kernel larger than padded input " + shape_str(x.shape()));
    }
    geo.ho = (geo.h + 2 * pad - geo.k) / stride + 1;
    geo.wo = (geo.w + 2 * pad - geo.k) / stride + 1;
    return geo;
}

/// cols is (C*k*k, Ho*Wo) when transposed == false, (Ho*Wo, C*k*k) otherwise.
void im2col(const double* x, const ConvGeometry& geo, double* cols, bool transposed) {
    const std::size_t P = geo.pixels();
    const std::size_t Q = geo.patch();
    for (std::size_t c = 0; c < geo.cin; ++c) {
        for (std::size_t kh = 0; kh < geo.k; ++kh) {
            for (std::size_t kw = 0; kw < geo.k; ++kw) {
                const std::size_t q = (c * geo.k + kh) * geo.k + kw;
                for (std::size_t oh = 0; oh < geo.ho; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * geo.stride + kh) - static_cast<std::ptrdiff_t>(geo.pad);
                    for (std::size_t ow = 0; ow < geo.wo; ++ow) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow * geo.stride + kw) - static_cast<std::ptrdiff_t>(geo.pad);
                        double v = 0.0;
                        if (ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(geo.h) &&
                            iw < static_cast<std::ptrdiff_t>(geo.w)) {
                            v = x[(c * geo.h + static_cast<std::size_t>(ih)) * geo.w + static_cast<std::size_t>(iw)];
                        }
                        const std::size_t p = oh * geo.wo + ow;
                        if (transposed) {
                            cols[p * Q + q] = v;
                        } else {
                            cols[q * P + p] = v;
                        }
                    }
                }
            }
        }
    }
}

void col2im_add(const double* cols, const ConvGeometry& geo, double* dx) {
    const std::size_t P = geo.pixels();
    for (std::size_t c = 0; c < geo.cin; ++c) {
        for (std::size_t kh = 0; kh < geo.k; ++kh) {
            for (std::size_t kw = 0; kw < geo.k; ++kw) {
                const std::size_t q = (c * geo.k + kh) * geo.k + kw;
                for (std::size_t oh = 0; oh < geo.ho; ++oh) {
                    const auto ih = static_cast<std::ptrdiff_t>(oh * geo.stride + kh) - static_cast<std::ptrdiff_t>(geo.pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(geo.h)) continue;
                    for (std::size_t ow = 0; ow < geo.wo; ++ow) {
                        const auto iw = static_cast<std::ptrdiff_t>(ow * geo.stride + kw) - static_cast<std::ptrdiff_t>(geo.pad);
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(geo.w)) continue;
                        dx[(c * geo.h + static_cast<std::size_t>(ih)) * geo.w + static_cast<std::size_t>(iw)] +=
                            cols[q * P + oh * geo.wo + ow];
                    }
                }
            }
        }
    }
}

Var conv_impl(Graph& g, OpKind kind, Var x, Var weight, std::optional<Var> bias, std::size_t stride, std::size_t pad) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(weight);
    const char* name = kind == OpKind::conv2d ? "conv2d" : "pointwise_conv";
    const ConvGeometry geo = conv_geometry(xv, wv, stride, pad, name);
    if (bias && g.value(*bias).numel() != geo.cout) {
        throw Error(Errc::shape_mismatch, std::string(name) + ": bias has " + std::to_string(g.value(*bias).numel()) +
                                              " entries for " + std::to_string(geo.cout) + " output channels");
    }
    const bool direct = geo.k == 1 && geo.stride == 1 && geo.pad == 0;
    const std::size_t P = geo.pixels();
    const std::size_t Q = geo.patch();

    Tensor out({geo.batch, geo.cout, geo.ho, geo.wo});
    std::vector<double> cols(direct ? 0 : Q * P);
    for (std::size_t b = 0; b < geo.batch; ++b) {
        const double* xb = xv.data().data() + b * geo.cin * geo.h * geo.w;
        double* ob = out.data().data() + b * geo.cout * P;
        const double* src = xb;
        if (!direct) {
            im2col(xb, geo, cols.data(), false);
            src = cols.data();
        }
        if (bias) {
            const auto& bv = g.value(*bias);
            for (std::size_t o = 0; o < geo.cout; ++o) std::fill(ob + o * P, ob + (o + 1) * P, bv[o]);
        }
        kernels::gemm_nn(geo.cout, P, Q, wv.data().data(), src, ob);
    }

    std::vector<Var> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return g.record(kind, std::move(inputs), std::move(out), [geo, direct](Graph& gr, const Graph::Node& n) {
        const Tensor& xv = input_value(gr, n, 0);
        const Tensor& wv = input_value(gr, n, 1);
        double* dx = input_grad(gr, n, 0);
        double* dw = input_grad(gr, n, 1);
        double* db = n.inputs.size() > 2 ? input_grad(gr, n, 2) : nullptr;
        const std::size_t P = geo.pixels();
        const std::size_t Q = geo.patch();
        const double* dy = n.grad.data();
        std::vector<double> cols_t(dw && !direct ? P * Q : 0);
        std::vector<double> xt(dw && direct ? P * Q : 0);
        std::vector<double> dcols(dx && !direct ? Q * P : 0);
        for (std::size_t b = 0; b < geo.batch; ++b) {
            const double* dyb = dy + b * geo.cout * P;
            const double* xb = xv.data().data() + b * geo.cin * geo.h * geo.w;
            if (db) {
                for (std::size_t o = 0; o < geo.cout; ++o) {
                    double s = 0.0;
                    for (std::size_t p = 0; p < P; ++p) s += dyb[o * P + p];
                    db[o] += s;
                }
            }
            if (dw) {
                const double* colsT = nullptr;
                if (direct) {
                    kernels::transpose(xb, Q, P, xt.data());
                    colsT = xt.data();
                } else {
                    im2col(xb, geo, cols_t.data(), true);
                    colsT = cols_t.data();
                }
                kernels::gemm_nn(geo.cout, Q, P, dyb, colsT, dw);
            }
            if (dx) {
                double* dxb = dx + b * geo.cin * geo.h * geo.w;
                if (direct) {
                    kernels::gemm_tn(Q, P, geo.cout, wv.data().data(), dyb, dxb);
                } else {
                    std::fill(dcols.begin(), dcols.end(), 0.0);
                    kernels::gemm_tn(Q, P, geo.cout, wv.data().data(), dyb, dcols.data());
                    col2im_add(dcols.data(), geo, dxb);
                }
            }
        }
    });
}

Var elementwise_unary(Graph& g, OpKind kind, Var x, double (*f)(double), double (*df)(double, double)) {
    const Tensor& xv = g.value(x);
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
    return g.record(kind, {x}, std::move(out), [df](Graph& gr, const Graph::Node& n) {
        double* dx = input_grad(gr, n, 0);
        if (!dx) return;
        const Tensor& xv = input_value(gr, n, 0);
        for (std::size_t i = 0; i < xv.numel(); ++i) dx[i] += n.grad[i] * df(xv[i], n.value[i]);
    });
}

}  // namespace

Var conv2d(Graph& g, Var x, Var weight, std::optional<Var> bias, std::size_t stride, std::size_t pad) {
    return conv_impl(g, OpKind::conv2d, x, weight, bias, stride, pad);
}

Var pointwise_conv(Graph& g, Var x, Var weight, std::optional<Var> bias) {
    const Tensor& wv = g.value(weight);
    if (wv.rank() != 2) throw Error(Errc::shape_mismatch, "pointwise_conv: weight must be (C_out, C_in), got " + shape_str(wv.shape()));
    // Reuse the convolution path with a (C_out, C_in, 1, 1) view of the weight.
    Var w4 = g.record(OpKind::custom, {weight}, wv.reshaped({wv.dim(0), wv.dim(1), 1, 1}),
                      [](Graph& gr, const Graph::Node& n) {
                          double* dw = input_grad(gr, n, 0);
                          if (!dw) return;
                          for (std::size_t i = 0; i < n.grad.size(); ++i) dw[i] += n.grad[i];
                      });
    return conv_impl(g, OpKind::pointwise_conv, x, w4, bias, 1, 0);
}

Var linear(Graph& g, Var x, Var weight, std::optional<Var> bias) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(weight);
    require_rank(xv, 2, "linear");
    require_rank(wv, 2, "linear");
    const std::size_t N = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
    if (wv.dim(1) != in) {
        throw Error(Errc::shape_mismatch, "linear: input " + shape_str(xv.shape()) + " vs weight " + shape_str(wv.shape()));
    }
    if (bias && g.value(*bias).numel() != out_dim) throw Error(Errc::shape_mismatch, "linear: bias size mismatch");
    Tensor out({N, out_dim});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t o = 0; o < out_dim; ++o) {
            double s = bias ? g.value(*bias)[o] : 0.0;
            for (std::size_t i = 0; i < in; ++i) s += xv[n * in + i] * wv[o * in + i];
            out[n * out_dim + o] = s;
        }
    }
    std::vector<Var> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return g.record(OpKind::linear, std::move(inputs), std::move(out), [N, in, out_dim](Graph& gr, const Graph::Node& n) {
        const Tensor& xv = input_value(gr, n, 0);
        const Tensor& wv = input_value(gr, n, 1);
        double* dx = input_grad(gr, n, 0);
        double* dw = input_grad(gr, n, 1);
        double* db = n.inputs.size() > 2 ? input_grad(gr, n, 2) : nullptr;
        for (std::size_t r = 0; r < N; ++r) {
            for (std::size_t o = 0; o < out_dim; ++o) {
                const double d = n.grad[r * out_dim + o];
                if (db) db[o] += d;
                for (std::size_t i = 0; i < in; ++i) {
                    if (dx) dx[r * in + i] += d * wv[o * in + i];
                    if (dw) dw[o * in + i] += d * xv[r * in + i];
                }
            }
        }
    });
}

Var batch_norm2d(Graph& g, Var x, Var gamma, Var beta, BatchNormBuffers buffers, const BatchNormOptions& opts) {
    const Tensor& xv = g.value(x);
    require_rank(xv, 4, "batch_norm2d");
    const std::size_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    if (g.value(gamma).numel() != C || g.value(beta).numel() != C) {
        throw Error(Errc::shape_mismatch, "batch_norm2d: affine parameters do not match " + std::to_string(C) + " channels");
    }
    const bool batch_stats = opts.training && B > 1;
    const double count = static_cast<double>(B * HW);
    std::vector<double> mean(C, 0.0), inv_std(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        double m = 0.0, v = 1.0;
        if (batch_stats) {
            double s = 0.0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t p = 0; p < HW; ++p) s += xv[(b * C + c) * HW + p];
            m = s / count;
            double sq = 0.0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t p = 0; p < HW; ++p) {
                    const double d = xv[(b * C + c) * HW + p] - m;
                    sq += d * d;
                }
            v = sq / count;
            if (opts.update_running && buffers.running_mean && buffers.running_var) {
                auto& rm = *buffers.running_mean;
                auto& rv = *buffers.running_var;
                rm[c] = (1.0 - opts.momentum) * rm[c] + opts.momentum * m;
                const double unbiased = count > 1 ? v * count / (count - 1.0) : v;
                rv[c] = (1.0 - opts.momentum) * rv[c] + opts.momentum * unbiased;
            }
        } else if (buffers.running_mean && buffers.running_var) {
            m = (*buffers.running_mean)[c];
            v = (*buffers.running_var)[c];
        }
        mean[c] = m;
        inv_std[c] = 1.0 / std::sqrt(v + opts.eps);
    }
    const Tensor& gv = g.value(gamma);
    const Tensor& bv = g.value(beta);
    Tensor out(xv.shape());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < HW; ++p) {
                const std::size_t i = (b * C + c) * HW + p;
                out[i] = gv[c] * (xv[i] - mean[c]) * inv_std[c] + bv[c];
            }

    return g.record(OpKind::batch_norm2d, {x, gamma, beta}, std::move(out),
                    [B, C, HW, batch_stats, mean = std::move(mean), inv_std = std::move(inv_std)](Graph& gr,
                                                                                                const Graph::Node& n) {
                        const Tensor& xv = input_value(gr, n, 0);
                        const Tensor& gv = input_value(gr, n, 1);
                        double* dx = input_grad(gr, n, 0);
                        double* dgamma = input_grad(gr, n, 1);
                        double* dbeta = input_grad(gr, n, 2);
                        const double count = static_cast<double>(B * HW);
                        for (std::size_t c = 0; c < C; ++c) {
                            double sum_dy = 0.0, sum_dy_xhat = 0.0;
                            for (std::size_t b = 0; b < B; ++b)
                                for (std::size_t p = 0; p < HW; ++p) {
                                    const std::size_t i = (b * C + c) * HW + p;
                                    const double xhat = (xv[i] - mean[c]) * inv_std[c];
                                    sum_dy += n.grad[i];
                                    sum_dy_xhat += n.grad[i] * xhat;
                                }
                            if (dgamma) dgamma[c] += sum_dy_xhat;
                            if (dbeta) dbeta[c] += sum_dy;
                            if (!dx) continue;
                            for (std::size_t b = 0; b < B; ++b)
                                for (std::size_t p = 0; p < HW; ++p) {
                                    const std::size_t i = (b * C + c) * HW + p;
                                    if (batch_stats) {
                                        const double xhat = (xv[i] - mean[c]) * inv_std[c];
                                        dx[i] += gv[c] * inv_std[c] / count *
                                                 (count * n.grad[i] - sum_dy - xhat * sum_dy_xhat);
                                    } else {
                                        dx[i] += gv[c] * inv_std[c] * n.grad[i];
                                    }
                                }
                        }
                    });
}

Var silu(Graph& g, Var x) {
    return elementwise_unary(
        g, OpKind::silu, x, [](double v) { return v * sigmoid_scalar(v); },
        [](double v, double) {
            const double s = sigmoid_scalar(v);
            return s * (1.0 + v * (1.0 - s));
        });
}

Var sigmoid(Graph& g, Var x) {
    return elementwise_unary(
        g, OpKind::sigmoid, x, [](double v) { return sigmoid_scalar(v); },
        [](double, double y) { return y * (1.0 - y); });
}

Var softmax(Graph& g, Var x, std::size_t axis) {
    const Tensor& xv = g.value(x);
    if (axis >= xv.rank()) throw Error(Errc::shape_mismatch, "softmax: axis out of range for " + shape_str(xv.shape()));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
    for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
    const std::size_t len = xv.dim(axis);
    Tensor out(xv.shape());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
            double s = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(xv[base + j * inner] - mx);
                out[base + j * inner] = e;
                s += e;
            }
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= s;
        }
    return g.record(OpKind::softmax, {x}, std::move(out), [outer, inner, len](Graph& gr, const Graph::Node& n) {
        double* dx = input_grad(gr, n, 0);
        if (!dx) return;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < len; ++j) dot += n.grad[base + j * inner] * n.value[base + j * inner];
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t i = base + j * inner;
                    dx[i] += n.value[i] * (n.grad[i] - dot);
                }
            }
    });
}

Var global_avg_pool(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    require_rank(xv, 4, "global_avg_pool");
    const std::size_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    Tensor out({B, C});
    for (std::size_t bc = 0; bc < B * C; ++bc) {
        double s = 0.0;
        for (std::size_t p = 0; p < HW; ++p) s += xv[bc * HW + p];
        out[bc] = s / static_cast<double>(HW);
    }
    return g.record(OpKind::global_avg_pool, {x}, std::move(out), [B, C, HW](Graph& gr, const Graph::Node& n) {
        double* dx = input_grad(gr, n, 0);
        if (!dx) return;
        for (std::size_t bc = 0; bc < B * C; ++bc) {
            const double d = n.grad[bc] / static_cast<double>(HW);
            for (std::size_t p = 0; p < HW; ++p) dx[bc * HW + p] += d;
        }
    });
}

Var upsample_nearest2x(Graph& g, Var x) {
    const Tensor& xv = g.value(x);
    require_rank(xv, 4, "upsample_nearest2x");
    const std::size_t BC = xv.dim(0) * xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor out({xv.dim(0), xv.dim(1), 2 * H, 2 * W});
    for (std::size_t bc = 0; bc < BC; ++bc)
        for (std::size_t h = 0; h < 2 * H; ++h)
            for (std::size_t w = 0; w < 2 * W; ++w) out[(bc * 2 * H + h) * 2 * W + w] = xv[(bc * H + h / 2) * W + w / 2];
    return g.record(OpKind::upsample_nearest2x, {x}, std::move(out), [BC, H, W](Graph& gr, const Graph::Node& n) {
        double* dx = input_grad(gr, n, 0);
        if (!dx) return;
        for (std::size_t bc = 0; bc < BC; ++bc)
            for (std::size_t h = 0; h < 2 * H; ++h)
                for (std::size_t w = 0; w < 2 * W; ++w) dx[(bc * H + h / 2) * W + w / 2] += n.grad[(bc * 2 * H + h) * 2 * W + w];
    });
}

Var concat_channels(Graph& g, std::span<const Var> xs) {
    if (xs.empty()) throw Error(Errc::invalid_argument, "concat_channels: no inputs");
    const Tensor& first = g.value(xs[0]);
    require_rank(first, 4, "concat_channels");
    const std::size_t B = first.dim(0), H = first.dim(2), W = first.dim(3);
    std::vector<std::size_t> channels;
    std::size_t total = 0;
    for (auto v : xs) {
        const Tensor& t = g.value(v);
        require_rank(t, 4, "concat_channels");
        if (t.dim(0) != B || t.dim(2) != H || t.dim(3) != W) {
            throw Error(Errc::shape_mismatch, "concat_channels: " + shape_str(first.shape()) + " vs " + shape_str(t.shape()));
        }
        channels.push_back(t.dim(1));
        total += t.dim(1);
    }
    const std::size_t HW = H * W;
    Tensor out({B, total, H, W});
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const Tensor& t = g.value(xs[i]);
            std::copy_n(t.data().data() + b * channels[i] * HW, channels[i] * HW,
                        out.data().data() + (b * total + offset) * HW);
            offset += channels[i];
        }
    }
    return g.record(OpKind::concat_channels, std::vector<Var>(xs.begin(), xs.end()), std::move(out),
                    [B, HW, total, channels](Graph& gr, const Graph::Node& n) {
                        std::size_t offset = 0;
                        for (std::size_t i = 0; i < channels.size(); ++i) {
                            double* dx = input_grad(gr, n, i);
                            if (dx) {
                                for (std::size_t b = 0; b < B; ++b) {
                                    const double* src = n.grad.data() + (b * total + offset) * HW;
                                    double* dst = dx + b * channels[i] * HW;
                                    for (std::size_t j = 0; j < channels[i] * HW; ++j) dst[j] += src[j];
                                }
                            }
                            offset += channels[i];
                        }
                    });
}

Var add(Graph& g, Var a, Var b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    require_same_shape(av, bv, "add");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
    return g.record(OpKind::add, {a, b}, std::move(out), [](Graph& gr, const Graph::Node& n) {
        for (std::size_t s = 0; s < 2; ++s) {
            double* d = input_grad(gr, n, s);
            if (!d) continue;
            for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += n.grad[i];
        }
    });
}

Var sub(Graph& g, Var a, Var b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    require_same_shape(av, bv, "sub");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] - bv[i];
    return g.record(OpKind::sub, {a, b}, std::move(out), [](Graph& gr, const Graph::Node& n) {
        if (double* d = input_grad(gr, n, 0))
            for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += n.grad[i];
        if (double* d = input_grad(gr, n, 1))
            for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] -= n.grad[i];
    });
}

Var mul(Graph& g, Var a, Var b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    require_same_shape(av, bv, "mul");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
    return g.record(OpKind::mul, {a, b}, std::move(out), [](Graph& gr, const Graph::Node& n) {
        const Tensor& av = input_value(gr, n, 0);
        const Tensor& bv = input_value(gr, n, 1);
        if (double* d = input_grad(gr, n, 0))
            for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += n.grad[i] * bv[i];
        if (double* d = input_grad(gr, n, 1))
            for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += n.grad[i] * av[i];
    });
}

Var scale(Graph& g, Var a, double factor) {
    const Tensor& av = g.value(a);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] * factor;
    return g.record(OpKind::scale, {a}, std::move(out), [factor](Graph& gr, const Graph::Node& n) {
        if (double* d = input_grad(gr, n, 0))
            for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += n.grad[i] * factor;
    });
}

Var reduce_sum(Graph& g, Var a) {
    const Tensor& av = g.value(a);
    double s = 0.0;
    for (double v : av.data()) s += v;
    return g.record(OpKind::reduce_sum, {a}, Tensor::scalar(s), [](Graph& gr, const Graph::Node& n) {
        if (double* d = input_grad(gr, n, 0)) {
            const std::size_t count = gr.nodes()[n.inputs[0]].value.numel();
            for (std::size_t i = 0; i < count; ++i) d[i] += n.grad[0];
        }
    });
}

Var reduce_mean(Graph& g, Var a) {
    const Tensor& av = g.value(a);
    double s = 0.0;
    for (double v : av.data()) s += v;
    const double count = static_cast<double>(av.numel());
    return g.record(OpKind::reduce_mean, {a}, Tensor::scalar(s / count), [count](Graph& gr, const Graph::Node& n) {
        if (double* d = input_grad(gr, n, 0)) {
            const std::size_t len = gr.nodes()[n.inputs[0]].value.numel();
            for (std::size_t i = 0; i < len; ++i) d[i] += n.grad[0] / count;
        }
    });
}

Var mean_rows(Graph& g, Var a) {
    const Tensor& av = g.value(a);
    require_rank(av, 2, "mean_rows");
    const std::size_t N = av.dim(0), E = av.dim(1);
    Tensor out({E});
    for (std::size_t e = 0; e < E; ++e) {
        double s = 0.0;
        for (std::size_t r = 0; r < N; ++r) s += av[r * E + e];
        out[e] = s / static_cast<double>(N);
    }
    return g.record(OpKind::mean_rows, {a}, std::move(out), [N, E](Graph& gr, const Graph::Node& n) {
        if (double* d = input_grad(gr, n, 0))
            for (std::size_t r = 0; r < N; ++r)
                for (std::size_t e = 0; e < E; ++e) d[r * E + e] += n.grad[e] / static_cast<double>(N);
    });
}

std::vector<std::size_t> topk_row(std::span<const double> row, std::size_t k) {
    if (k == 0 || k > row.size()) {
        throw Error(Errc::invalid_argument, "top-k with k=" + std::to_string(k) + " over " + std::to_string(row.size()) + " entries");
    }
    std::vector<std::size_t> order(row.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    order.resize(k);
    return order;
}

Var topk_select(Graph& g, Var logits, std::size_t k) {
    const Tensor& lv = g.value(logits);
    require_rank(lv, 2, "topk_select");
    const std::size_t N = lv.dim(0), E = lv.dim(1);
    Tensor out({N, k});
    for (std::size_t r = 0; r < N; ++r) {
        std::span<const double> row(lv.data().data() + r * E, E);
        const auto idx = topk_row(row, k);
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] = static_cast<double>(idx[j]);
        if (k < E) {
            double best_out = -std::numeric_limits<double>::infinity();
            for (std::size_t e = 0; e < E; ++e) {
                if (std::find(idx.begin(), idx.end(), e) == idx.end()) best_out = std::max(best_out, row[e]);
            }
            g.note_topk_margin(row[idx[k - 1]] - best_out);
        }
    }
    return g.record(OpKind::topk_select, {logits}, std::move(out), nullptr, /*differentiable=*/false);
}

std::vector<std::vector<std::size_t>> topk_indices(const Graph& g, Var topk) {
    const Tensor& t = g.value(topk);
    const std::size_t N = t.dim(0), k = t.dim(1);
    std::vector<std::vector<std::size_t>> out(N, std::vector<std::size_t>(k));
    for (std::size_t r = 0; r < N; ++r)
        for (std::size_t j = 0; j < k; ++j) out[r][j] = static_cast<std::size_t>(t[r * k + j]);
    return out;
}

Var gather_rows(Graph& g, Var x, std::span<const std::size_t> rows) {
    const Tensor& xv = g.value(x);
    if (xv.rank() == 0 || rows.empty()) throw Error(Errc::invalid_argument, "gather_rows: nothing to gather");
    const std::size_t stride = xv.numel() / xv.dim(0);
    Shape shape = xv.shape();
    shape[0] = rows.size();
    Tensor out(shape);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= xv.dim(0)) throw Error(Errc::shape_mismatch, "gather_rows: row index out of range");
        std::copy_n(xv.data().data() + rows[i] * stride, stride, out.data().data() + i * stride);
    }
    return g.record(OpKind::gather_rows, {x}, std::move(out),
                    [stride, rows = std::vector<std::size_t>(rows.begin(), rows.end())](Graph& gr, const Graph::Node& n) {
                        double* dx = input_grad(gr, n, 0);
                        if (!dx) return;
                        for (std::size_t i = 0; i < rows.size(); ++i)
                            for (std::size_t j = 0; j < stride; ++j) dx[rows[i] * stride + j] += n.grad[i * stride + j];
                    });
}

Var select_softmax(Graph& g, Var logits, Var indices) {
    const Tensor& lv = g.value(logits);
    const Tensor& iv = g.value(indices);
    require_rank(lv, 2, "select_softmax");
    require_rank(iv, 2, "select_softmax");
    const std::size_t N = lv.dim(0), E = lv.dim(1), k = iv.dim(1);
    if (iv.dim(0) != N) throw Error(Errc::shape_mismatch, "select_softmax: index rows do not match logits");
    Tensor out({N, k});
    for (std::size_t r = 0; r < N; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, lv[r * E + static_cast<std::size_t>(iv[r * k + j])]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const double e = std::exp(lv[r * E + static_cast<std::size_t>(iv[r * k + j])] - mx);
            out[r * k + j] = e;
            s += e;
        }
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] /= s;
    }
    return g.record(OpKind::select_softmax, {logits, indices}, std::move(out), [N, E, k](Graph& gr, const Graph::Node& n) {
        double* dz = input_grad(gr, n, 0);
        if (!dz) return;
        const Tensor& iv = input_value(gr, n, 1);
        for (std::size_t r = 0; r < N; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < k; ++j) dot += n.grad[r * k + j] * n.value[r * k + j];
            for (std::size_t j = 0; j < k; ++j) {
                const auto e = static_cast<std::size_t>(iv[r * k + j]);
                dz[r * E + e] += n.value[r * k + j] * (n.grad[r * k + j] - dot);
            }
        }
    });
}

Var mixture(Graph& g, std::span<const Var> sources, const std::vector<std::vector<MixtureSlot>>& slots, Var weights) {
    if (sources.empty()) throw Error(Errc::invalid_argument, "mixture: no sources");
    const Tensor& wv = g.value(weights);
    require_rank(wv, 2, "mixture");
    const std::size_t B = slots.size(), K = wv.dim(1);
    if (wv.dim(0) != B) throw Error(Errc::shape_mismatch, "mixture: weight rows do not match slot rows");
    Shape shape = g.value(sources[0]).shape();
    const std::size_t stride = g.value(sources[0]).numel() / shape[0];
    for (auto s : sources) {
        const Tensor& t = g.value(s);
        if (t.numel() / t.dim(0) != stride) throw Error(Errc::shape_mismatch, "mixture: sources disagree on per-row shape");
    }
    shape[0] = B;
    Tensor out(shape);
    for (std::size_t b = 0; b < B; ++b) {
        if (slots[b].size() != K) throw Error(Errc::shape_mismatch, "mixture: slot count differs from weight columns");
        double* dst = out.data().data() + b * stride;
        for (std::size_t j = 0; j < K; ++j) {
            const auto& slot = slots[b][j];
            const Tensor& src = g.value(sources[slot.source]);
            const double w = wv[b * K + j];
            const double* s = src.data().data() + slot.row * stride;
            for (std::size_t i = 0; i < stride; ++i) dst[i] += w * s[i];
        }
    }
    std::vector<Var> inputs(sources.begin(), sources.end());
    inputs.push_back(weights);
    const std::size_t weight_slot = sources.size();
    return g.record(OpKind::mixture, std::move(inputs), std::move(out),
                    [slots, stride, K, weight_slot](Graph& gr, const Graph::Node& n) {
                        const Tensor& wv = input_value(gr, n, weight_slot);
                        double* dw = input_grad(gr, n, weight_slot);
                        for (std::size_t b = 0; b < slots.size(); ++b) {
                            const double* dy = n.grad.data() + b * stride;
                            for (std::size_t j = 0; j < K; ++j) {
                                const auto& slot = slots[b][j];
                                const Tensor& src = input_value(gr, n, slot.source);
                                const double* s = src.data().data() + slot.row * stride;
                                if (dw) {
                                    double dot = 0.0;
                                    for (std::size_t i = 0; i < stride; ++i) dot += dy[i] * s[i];
                                    dw[b * K + j] += dot;
                                }
                                if (double* ds = input_grad(gr, n, slot.source)) {
                                    const double w = wv[b * K + j];
                                    for (std::size_t i = 0; i < stride; ++i) ds[slot.row * stride + i] += w * dy[i];
                                }
                            }
                        }
                    });
}

Var cv_squared(Graph& g, Var v) {
    const Tensor& vv = g.value(v);
    const auto E = static_cast<double>(vv.numel());
    double mean = 0.0;
    for (double x : vv.data()) mean += x;
    mean /= E;
    if (mean == 0.0) throw Error(Errc::zero_mean_vector, "cv_squared of a zero-mean vector");
    double var = 0.0;
    for (double x : vv.data()) var += (x - mean) * (x - mean);
    var /= E;
    return g.record(OpKind::cv_squared, {v}, Tensor::scalar(var / (mean * mean)), [mean, var, E](Graph& gr, const Graph::Node& n) {
        double* d = input_grad(gr, n, 0);
        if (!d) return;
        const Tensor& vv = input_value(gr, n, 0);
        const double m2 = mean * mean;
        for (std::size_t i = 0; i < vv.numel(); ++i) {
            d[i] += n.grad[0] * (2.0 * (vv[i] - mean) / (E * m2) - 2.0 * var / (E * m2 * mean));
        }
    });
}

Var gather_cells(Graph& g, Var x, std::span<const Cell> cells) {
    const Tensor& xv = g.value(x);
    require_rank(xv, 4, "gather_cells");
    const std::size_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (cells.empty()) throw Error(Errc::invalid_argument, "gather_cells: no cells");
    std::vector<std::size_t> offsets;
    offsets.reserve(cells.size());
    for (const auto& c : cells) {
        if (c.b >= B || c.y >= H || c.x >= W) throw Error(Errc::shape_mismatch, "gather_cells: cell outside the map");
        offsets.push_back(c.b * C * H * W + c.y * W + c.x);
    }
    Tensor out({cells.size(), C});
    for (std::size_t p = 0; p < cells.size(); ++p)
        for (std::size_t ch = 0; ch < C; ++ch) out[p * C + ch] = xv[offsets[p] + ch * H * W];
    return g.record(OpKind::gather_cells, {x}, std::move(out),
                    [offsets = std::move(offsets), C, HW = H * W](Graph& gr, const Graph::Node& n) {
                        double* dx = input_grad(gr, n, 0);
                        if (!dx) return;
                        for (std::size_t p = 0; p < offsets.size(); ++p)
                            for (std::size_t ch = 0; ch < C; ++ch) dx[offsets[p] + ch * HW] += n.grad[p * C + ch];
                    });
}

Var bce_with_logits(Graph& g, Var logits, const Tensor& targets) {
    const Tensor& zv = g.value(logits);
    require_same_shape(zv, targets, "bce_with_logits");
    double s = 0.0;
    for (std::size_t i = 0; i < zv.numel(); ++i) {
        const double z = zv[i];
        s += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    }
    return g.record(OpKind::bce_with_logits, {logits}, Tensor::scalar(s), [targets](Graph& gr, const Graph::Node& n) {
        double* d = input_grad(gr, n, 0);
        if (!d) return;
        const Tensor& zv = input_value(gr, n, 0);
        for (std::size_t i = 0; i < zv.numel(); ++i) d[i] += n.grad[0] * (sigmoid_scalar(zv[i]) - targets[i]);
    });
}

Var cross_entropy(Graph& g, Var logits, std::span<const std::size_t> labels) {
    const Tensor& zv = g.value(logits);
    require_rank(zv, 2, "cross_entropy");
    const std::size_t P = zv.dim(0), C = zv.dim(1);
    if (labels.size() != P) throw Error(Errc::shape_mismatch, "cross_entropy: one label per row required");
    Tensor probs({P, C});
    double s = 0.0;
    for (std::size_t r = 0; r < P; ++r) {
        if (labels[r] >= C) throw Error(Errc::shape_mismatch, "cross_entropy: label outside the class range");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, zv[r * C + c]);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(zv[r * C + c] - mx);
        for (std::size_t c = 0; c < C; ++c) probs[r * C + c] = std::exp(zv[r * C + c] - mx) / z;
        s += mx + std::log(z) - zv[r * C + labels[r]];
    }
    return g.record(OpKind::cross_entropy, {logits}, Tensor::scalar(s),
                    [probs = std::move(probs), labels = std::vector<std::size_t>(labels.begin(), labels.end()), C](
                        Graph& gr, const Graph::Node& n) {
                        double* d = input_grad(gr, n, 0);
                        if (!d) return;
                        for (std::size_t r = 0; r < labels.size(); ++r)
                            for (std::size_t c = 0; c < C; ++c)
                                d[r * C + c] += n.grad[0] * (probs[r * C + c] - (c == labels[r] ? 1.0 : 0.0));
                    });
}

namespace {

/// 1 - GIoU for one row and its gradient with respect to (tx, ty, tw, th).
double giou_row(const double* t, const BoxAnchor& a, const BoxTarget& gt, double* grad) {
    const double sx = sigmoid_scalar(t[0]), sy = sigmoid_scalar(t[1]);
    const double unit = a.stride / a.size;
    const double cx = (a.gx + sx) * unit, cy = (a.gy + sy) * unit;
    const double w = std::exp(t[2]) * 4.0 * unit, h = std::exp(t[3]) * 4.0 * unit;
    const double px1 = cx - w / 2, px2 = cx + w / 2, py1 = cy - h / 2, py2 = cy + h / 2;
    const double gx1 = gt.cx - gt.w / 2, gx2 = gt.cx + gt.w / 2, gy1 = gt.cy - gt.h / 2, gy2 = gt.cy + gt.h / 2;

    const double iw_raw = std::min(px2, gx2) - std::max(px1, gx1), ih_raw = std::min(py2, gy2) - std::max(py1, gy1);
    const double iw = std::max(0.0, iw_raw), ih = std::max(0.0, ih_raw);
    const double inter = iw * ih;
    const double ap = w * h, ag = gt.w * gt.h;
    const double uni = ap + ag - inter;
    const double cw = std::max(px2, gx2) - std::min(px1, gx1), chh = std::max(py2, gy2) - std::min(py1, gy1);
    const double enc = cw * chh;
    const double loss = 2.0 - inter / uni - uni / enc;

    const double g_ap = inter / (uni * uni) - 1.0 / enc;
    const double g_inter = -1.0 / uni - g_ap;
    const double g_enc = uni / (enc * enc);

    double d_px1 = 0, d_px2 = 0, d_py1 = 0, d_py2 = 0;
    // Predicted area.
    d_px2 += g_ap * h, d_px1 -= g_ap * h;
    d_py2 += g_ap * w, d_py1 -= g_ap * w;
    // Intersection.
    if (iw_raw > 0 && ih_raw > 0) {
        if (px2 < gx2) d_px2 += g_inter * ih;
        if (px1 > gx1) d_px1 -= g_inter * ih;
        if (py2 < gy2) d_py2 += g_inter * iw;
        if (py1 > gy1) d_py1 -= g_inter * iw;
    }
    // Enclosing box.
    if (px2 > gx2) d_px2 += g_enc * chh;
    if (px1 < gx1) d_px1 -= g_enc * chh;
    if (py2 > gy2) d_py2 += g_enc * cw;
    if (py1 < gy1) d_py1 -= g_enc * cw;

    const double d_cx = d_px1 + d_px2, d_cy = d_py1 + d_py2;
    const double d_w = (d_px2 - d_px1) / 2, d_h = (d_py2 - d_py1) / 2;
    grad[0] = d_cx * sx * (1 - sx) * unit;
    grad[1] = d_cy * sy * (1 - sy) * unit;
    grad[2] = d_w * w;
    grad[3] = d_h * h;
    return loss;
}

}  // namespace

Var giou_loss(Graph& g, Var params, std::span<const BoxAnchor> anchors, std::span<const BoxTarget> targets) {
    const Tensor& tv = g.value(params);
    require_rank(tv, 2, "giou_loss");
    const std::size_t P = tv.dim(0);
    if (tv.dim(1) != 4) throw Error(Errc::shape_mismatch, "giou_loss: expected (P, 4) box parameters");
    if (anchors.size() != P || targets.size() != P) throw Error(Errc::shape_mismatch, "giou_loss: one anchor and target per row");
    std::vector<double> local(P * 4);
    double s = 0.0;
    for (std::size_t r = 0; r < P; ++r) {
        if (!(targets[r].w > 0 && targets[r].h > 0)) throw Error(Errc::invalid_argument, "giou_loss: target without area");
        s += giou_row(tv.data().data() + r * 4, anchors[r], targets[r], local.data() + r * 4);
    }
    return g.record(OpKind::giou_loss, {params}, Tensor::scalar(s), [local = std::move(local)](Graph& gr, const Graph::Node& n) {
        double* d = input_grad(gr, n, 0);
        if (!d) return;
        for (std::size_t i = 0; i < local.size(); ++i) d[i] += n.grad[0] * local[i];
    });
}

}  // namespace mdf::ops
