#include "hitrans/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace hitrans::ops {

namespace {

template <typename Scalar>
void require_rank(const Tensor<Scalar>& t, Index rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_to_string(t.shape()));
    }
}

struct ConvGeometry {
    Index channels, height, width, kernel, stride, pad, out_h, out_w;
};

/// Unrolls the receptive fields of one sample into a (C*k*k, Ho*Wo) matrix.
template <typename Scalar>
void im2col(const Scalar* src, const ConvGeometry& g, RowMatrix<Scalar>& cols) {
    cols.resize(g.channels * g.kernel * g.kernel, g.out_h * g.out_w);
    Index row = 0;
    for (Index c = 0; c < g.channels; ++c) {
        const Scalar* plane = src + c * g.height * g.width;
        for (Index ky = 0; ky < g.kernel; ++ky) {
            for (Index kx = 0; kx < g.kernel; ++kx, ++row) {
                Scalar* dst = cols.data() + row * g.out_h * g.out_w;
                for (Index oy = 0; oy < g.out_h; ++oy) {
                    const Index iy = oy * g.stride - g.pad + ky;
                    Scalar* out = dst + oy * g.out_w;
                    if (iy < 0 || iy >= g.height) {
                        std::fill(out, out + g.out_w, Scalar(0));
                        continue;
                    }
                    const Scalar* in = plane + iy * g.width;
                    for (Index ox = 0; ox < g.out_w; ++ox) {
                        const Index ix = ox * g.stride - g.pad + kx;
                        out[ox] = (ix >= 0 && ix < g.width) ? in[ix] : Scalar(0);
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto one sample.
template <typename Scalar>
void col2im(const RowMatrix<Scalar>& cols, const ConvGeometry& g, Scalar* dst) {
    Index row = 0;
    for (Index c = 0; c < g.channels; ++c) {
        Scalar* plane = dst + c * g.height * g.width;
        for (Index ky = 0; ky < g.kernel; ++ky) {
            for (Index kx = 0; kx < g.kernel; ++kx, ++row) {
                const Scalar* src = cols.data() + row * g.out_h * g.out_w;
                for (Index oy = 0; oy < g.out_h; ++oy) {
                    const Index iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.height) continue;
                    Scalar* out = plane + iy * g.width;
                    const Scalar* in = src + oy * g.out_w;
                    for (Index ox = 0; ox < g.out_w; ++ox) {
                        const Index ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.width) out[ix] += in[ox];
                    }
                }
            }
        }
    }
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
    if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
    const Scalar e = std::exp(x);
    return e / (Scalar(1) + e);
}

}  // namespace

template <typename Scalar>
Var<Scalar> conv2d(Tape<Scalar>& tape, const Var<Scalar>& x, ParamRef<Scalar> weight, ParamRef<Scalar> bias,
                   int stride, int pad) {
    const auto& in = x->value;
    const auto& w = *weight;
    require_rank(in, 4, "conv2d");
    require_rank(w, 4, "conv2d weight");
    if (w.dim(1) != in.dim(1)) {
        throw ShapeError("conv2d: input has " + std::to_string(in.dim(1)) + " channels, weight expects " +
                         std::to_string(w.dim(1)));
    }
    const Index n = in.dim(0), cout = w.dim(0), k = w.dim(2);
    ConvGeometry g{in.dim(1), in.dim(2), in.dim(3), k, stride, pad, 0, 0};
    g.out_h = (g.height + 2 * pad - k) / stride + 1;
    g.out_w = (g.width + 2 * pad - k) / stride + 1;
    const bool pointwise = (k == 1 && stride == 1 && pad == 0);

    Tensor<Scalar> out({n, cout, g.out_h, g.out_w});
    const ConstRowMatrixMap<Scalar> wm(w.data(), cout, g.channels * k * k);
    RowMatrix<Scalar> cols;
    for (Index s = 0; s < n; ++s) {
        auto y = out.sample_matrix(s);
        if (pointwise) {
            y.noalias() = wm * in.sample_matrix(s);
        } else {
            im2col(in.data() + s * g.channels * g.height * g.width, g, cols);
            y.noalias() = wm * cols;
        }
        if (bias) y.colwise() += (*bias).values();
    }

    const bool grad = needs_grad(x) || needs_grad(weight) || needs_grad(bias);
    return tape.emit(std::move(out), grad, [x, weight, bias, g, pointwise](Node<Scalar>& self) {
        const auto& in = x->value;
        const auto& dy = self.grad;
        const Index n = in.dim(0);
        const Index cout = weight->dim(0);
        const Index k = g.kernel;
        const ConstRowMatrixMap<Scalar> wm(weight->data(), cout, g.channels * k * k);
        RowMatrix<Scalar> cols, dcols;
        for (Index s = 0; s < n; ++s) {
            const auto dys = dy.sample_matrix(s);
            if (bias.grad) bias.grad->values() += dys.rowwise().sum();
            if (weight.grad) {
                RowMatrixMap<Scalar> dw(weight.grad->data(), cout, g.channels * k * k);
                if (pointwise) {
                    dw.noalias() += dys * in.sample_matrix(s).transpose();
                } else {
                    im2col(in.data() + s * g.channels * g.height * g.width, g, cols);
                    dw.noalias() += dys * cols.transpose();
                }
            }
            if (x->requires_grad) {
                auto& dx = x->grad_buffer();
                if (pointwise) {
                    dx.sample_matrix(s).noalias() += wm.transpose() * dys;
                } else {
                    dcols.noalias() = wm.transpose() * dys;
                    col2im(dcols, g, dx.data() + s * g.channels * g.height * g.width);
                }
            }
        }
    });
}

template <typename Scalar>
Var<Scalar> conv_transpose2x2(Tape<Scalar>& tape, const Var<Scalar>& x, ParamRef<Scalar> weight,
                              ParamRef<Scalar> bias) {
    const auto& in = x->value;
    const auto& w = *weight;
    require_rank(in, 4, "conv_transpose2x2");
    if (w.rank() != 4 || w.dim(0) != in.dim(1) || w.dim(2) != 2 || w.dim(3) != 2) {
        throw ShapeError("conv_transpose2x2: weight " + shape_to_string(w.shape()) + " incompatible with input " +
                         shape_to_string(in.shape()));
    }
    const Index n = in.dim(0), cin = in.dim(1), h = in.dim(2), wd = in.dim(3), cout = w.dim(1);
    Tensor<Scalar> out({n, cout, 2 * h, 2 * wd});
    const ConstRowMatrixMap<Scalar> wm(w.data(), cin, cout * 4);
    RowMatrix<Scalar> y4;
    for (Index s = 0; s < n; ++s) {
        y4.noalias() = wm.transpose() * in.sample_matrix(s);
        for (Index o = 0; o < cout; ++o) {
            const Scalar b = bias ? (*bias)[o] : Scalar(0);
            for (Index q = 0; q < 4; ++q) {
                const Index i = q / 2, j = q % 2;
                const Scalar* src = y4.data() + (o * 4 + q) * h * wd;
                for (Index yy = 0; yy < h; ++yy) {
                    for (Index xx = 0; xx < wd; ++xx) {
                        out.at(s, o, 2 * yy + i, 2 * xx + j) = src[yy * wd + xx] + b;
                    }
                }
            }
        }
    }
    const bool grad = needs_grad(x) || needs_grad(weight) || needs_grad(bias);
    return tape.emit(std::move(out), grad, [x, weight, bias](Node<Scalar>& self) {
        const auto& in = x->value;
        const auto& dy = self.grad;
        const Index n = in.dim(0), cin = in.dim(1), h = in.dim(2), wd = in.dim(3), cout = weight->dim(1);
        const ConstRowMatrixMap<Scalar> wm(weight->data(), cin, cout * 4);
        RowMatrix<Scalar> dy4(cout * 4, h * wd);
        for (Index s = 0; s < n; ++s) {
            for (Index o = 0; o < cout; ++o) {
                for (Index q = 0; q < 4; ++q) {
                    const Index i = q / 2, j = q % 2;
                    Scalar* dst = dy4.data() + (o * 4 + q) * h * wd;
                    for (Index yy = 0; yy < h; ++yy) {
                        for (Index xx = 0; xx < wd; ++xx) dst[yy * wd + xx] = dy.at(s, o, 2 * yy + i, 2 * xx + j);
                    }
                }
            }
            if (bias.grad) {
                for (Index o = 0; o < cout; ++o) (*bias.grad)[o] += dy4.middleRows(o * 4, 4).sum();
            }
            if (weight.grad) {
                RowMatrixMap<Scalar> dw(weight.grad->data(), cin, cout * 4);
                dw.noalias() += in.sample_matrix(s) * dy4.transpose();
            }
            if (x->requires_grad) x->grad_buffer().sample_matrix(s).noalias() += wm * dy4;
        }
    });
}

template <typename Scalar>
Var<Scalar> batch_norm(Tape<Scalar>& tape, const Var<Scalar>& x, ParamRef<Scalar> gamma, ParamRef<Scalar> beta,
                       const Tensor<Scalar>& running_mean, const Tensor<Scalar>& running_var, bool training,
                       BatchStats<Scalar>* stats, Scalar eps) {
    const auto& in = x->value;
    require_rank(in, 4, "batch_norm");
    const Index n = in.dim(0), c = in.dim(1), hw = in.dim(2) * in.dim(3);
    const Index m = n * hw;
    Vector<Scalar> mean(c), rstd(c);
    if (training) {
        Vector<Scalar> var(c);
        for (Index ch = 0; ch < c; ++ch) {
            Scalar sum = 0;
            for (Index s = 0; s < n; ++s) sum += in.sample_matrix(s).row(ch).sum();
            const Scalar mu = sum / Scalar(m);
            Scalar sq = 0;
            for (Index s = 0; s < n; ++s) sq += (in.sample_matrix(s).row(ch).array() - mu).square().sum();
            mean[ch] = mu;
            var[ch] = sq / Scalar(m);
        }
        rstd = (var.array() + eps).rsqrt();
        if (stats) {
            stats->mean = mean;
            stats->var = m > 1 ? Vector<Scalar>(var * (Scalar(m) / Scalar(m - 1))) : var;
        }
    } else {
        mean = running_mean.values();
        rstd = (running_var.values().array() + eps).rsqrt();
    }
    Tensor<Scalar> xhat(in.shape());
    Tensor<Scalar> out(in.shape());
    for (Index s = 0; s < n; ++s) {
        auto xs = in.sample_matrix(s);
        auto hs = xhat.sample_matrix(s);
        auto ys = out.sample_matrix(s);
        for (Index ch = 0; ch < c; ++ch) {
            hs.row(ch) = (xs.row(ch).array() - mean[ch]) * rstd[ch];
            ys.row(ch) = hs.row(ch).array() * (*gamma)[ch] + (*beta)[ch];
        }
    }
    const bool grad = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
    if (!(grad && tape.recording())) xhat = Tensor<Scalar>();
    return tape.emit(std::move(out), grad,
                     [x, gamma, beta, training, rstd, xhat = std::move(xhat), n, c, m](Node<Scalar>& self) {
                         const auto& dy = self.grad;
                         Vector<Scalar> sum_dy = Vector<Scalar>::Zero(c);
                         Vector<Scalar> sum_dy_xhat = Vector<Scalar>::Zero(c);
                         for (Index s = 0; s < n; ++s) {
                             auto ds = dy.sample_matrix(s);
                             auto hs = xhat.sample_matrix(s);
                             sum_dy += ds.rowwise().sum();
                             sum_dy_xhat += ds.cwiseProduct(hs).rowwise().sum();
                         }
                         if (gamma.grad) gamma.grad->values() += sum_dy_xhat;
                         if (beta.grad) beta.grad->values() += sum_dy;
                         if (!x->requires_grad) return;
                         auto& dx = x->grad_buffer();
                         for (Index s = 0; s < n; ++s) {
                             auto ds = dy.sample_matrix(s);
                             auto hs = xhat.sample_matrix(s);
                             auto dxs = dx.sample_matrix(s);
                             for (Index ch = 0; ch < c; ++ch) {
                                 const Scalar scale = (*gamma)[ch] * rstd[ch];
                                 if (training) {
                                     const Scalar inv_m = Scalar(1) / Scalar(m);
                                     dxs.row(ch).array() +=
                                         scale * (ds.row(ch).array() - sum_dy[ch] * inv_m -
                                                  hs.row(ch).array() * (sum_dy_xhat[ch] * inv_m));
                                 } else {
                                     dxs.row(ch).array() += scale * ds.row(ch).array();
                                 }
                             }
                         }
                     });
}

template <typename Scalar>
Var<Scalar> relu(Tape<Scalar>& tape, const Var<Scalar>& x) {
    Tensor<Scalar> out(x->value.shape());
    out.values() = x->value.values().cwiseMax(Scalar(0));
    return tape.emit(std::move(out), needs_grad(x), [x](Node<Scalar>& self) {
        auto& dx = x->grad_buffer();
        dx.values().array() += (x->value.values().array() > Scalar(0)).select(self.grad.values().array(), Scalar(0));
    });
}

template <typename Scalar>
Var<Scalar> max_pool3x3s2(Tape<Scalar>& tape, const Var<Scalar>& x) {
    const auto& in = x->value;
    require_rank(in, 4, "max_pool3x3s2");
    const Index n = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
    const Index oh = (h - 1) / 2 + 1, ow = (w - 1) / 2 + 1;
    Tensor<Scalar> out({n, c, oh, ow});
    std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
    Index o = 0;
    for (Index s = 0; s < n; ++s) {
        for (Index ch = 0; ch < c; ++ch) {
            const Index base = (s * c + ch) * h * w;
            for (Index oy = 0; oy < oh; ++oy) {
                for (Index ox = 0; ox < ow; ++ox, ++o) {
                    Scalar best = -std::numeric_limits<Scalar>::infinity();
                    Index best_i = -1;
                    for (Index ky = 0; ky < 3; ++ky) {
                        const Index iy = oy * 2 - 1 + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (Index kx = 0; kx < 3; ++kx) {
                            const Index ix = ox * 2 - 1 + kx;
                            if (ix < 0 || ix >= w) continue;
                            const Index idx = base + iy * w + ix;
                            if (best_i < 0 || in[idx] > best) {
                                best = in[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out[o] = best;
                    argmax[static_cast<std::size_t>(o)] = best_i;
                }
            }
        }
    }
    return tape.emit(std::move(out), needs_grad(x), [x, argmax = std::move(argmax)](Node<Scalar>& self) {
        auto& dx = x->grad_buffer();
        for (Index i = 0; i < self.grad.size(); ++i) dx[argmax[static_cast<std::size_t>(i)]] += self.grad[i];
    });
}

template <typename Scalar>
Var<Scalar> add(Tape<Scalar>& tape, const Var<Scalar>& a, const Var<Scalar>& b) {
    if (!a->value.same_shape(b->value)) {
        throw ShapeError("add: " + shape_to_string(a->value.shape()) + " vs " + shape_to_string(b->value.shape()));
    }
    Tensor<Scalar> out(a->value.shape());
    out.values() = a->value.values() + b->value.values();
    return tape.emit(std::move(out), needs_grad(a) || needs_grad(b), [a, b](Node<Scalar>& self) {
        if (a->requires_grad) a->grad_buffer().values() += self.grad.values();
        if (b->requires_grad) b->grad_buffer().values() += self.grad.values();
    });
}

template <typename Scalar>
Var<Scalar> concat_channels(Tape<Scalar>& tape, const Var<Scalar>& a, const Var<Scalar>& b) {
    const auto& x = a->value;
    const auto& y = b->value;
    require_rank(x, 4, "concat_channels");
    require_rank(y, 4, "concat_channels");
    if (x.dim(0) != y.dim(0) || x.dim(2) != y.dim(2) || x.dim(3) != y.dim(3)) {
        throw ShapeError("concat_channels: " + shape_to_string(x.shape()) + " vs " + shape_to_string(y.shape()));
    }
    const Index n = x.dim(0), ca = x.dim(1), cb = y.dim(1);
    Tensor<Scalar> out({n, ca + cb, x.dim(2), x.dim(3)});
    for (Index s = 0; s < n; ++s) {
        auto o = out.sample_matrix(s);
        o.topRows(ca) = x.sample_matrix(s);
        o.bottomRows(cb) = y.sample_matrix(s);
    }
    return tape.emit(std::move(out), needs_grad(a) || needs_grad(b), [a, b, n, ca, cb](Node<Scalar>& self) {
        for (Index s = 0; s < n; ++s) {
            auto g = self.grad.sample_matrix(s);
            if (a->requires_grad) a->grad_buffer().sample_matrix(s) += g.topRows(ca);
            if (b->requires_grad) b->grad_buffer().sample_matrix(s) += g.bottomRows(cb);
        }
    });
}

namespace {

struct AxisInterp {
    std::vector<Index> lo, hi;
    std::vector<double> frac;
};

AxisInterp aligned_axis(Index in, Index out) {
    AxisInterp a;
    a.lo.resize(static_cast<std::size_t>(out));
    a.hi.resize(static_cast<std::size_t>(out));
    a.frac.resize(static_cast<std::size_t>(out));
    for (Index o = 0; o < out; ++o) {
        const auto k = static_cast<std::size_t>(o);
        if (in == 1 || out == 1) {
            a.lo[k] = a.hi[k] = 0;
            a.frac[k] = 0.0;
            continue;
        }
        // Exact rational source coordinate o * (in - 1) / (out - 1).
        const Index num = o * (in - 1);
        const Index lo = num / (out - 1);
        a.lo[k] = lo;
        a.hi[k] = std::min(lo + 1, in - 1);
        a.frac[k] = static_cast<double>(num - lo * (out - 1)) / static_cast<double>(out - 1);
    }
    return a;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> upsample_bilinear2x_aligned(const Tensor<Scalar>& in) {
    require_rank(in, 4, "upsample_bilinear2x_aligned");
    const Index n = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
    const Index oh = 2 * h, ow = 2 * w;
    const auto ay = aligned_axis(h, oh);
    const auto ax = aligned_axis(w, ow);
    Tensor<Scalar> out({n, c, oh, ow});
    for (Index s = 0; s < n; ++s) {
        for (Index ch = 0; ch < c; ++ch) {
            for (Index oy = 0; oy < oh; ++oy) {
                const auto ky = static_cast<std::size_t>(oy);
                const Scalar fy = static_cast<Scalar>(ay.frac[ky]);
                for (Index ox = 0; ox < ow; ++ox) {
                    const auto kx = static_cast<std::size_t>(ox);
                    const Scalar fx = static_cast<Scalar>(ax.frac[kx]);
                    const Scalar top = in.at(s, ch, ay.lo[ky], ax.lo[kx]) * (1 - fx) + in.at(s, ch, ay.lo[ky], ax.hi[kx]) * fx;
                    const Scalar bot = in.at(s, ch, ay.hi[ky], ax.lo[kx]) * (1 - fx) + in.at(s, ch, ay.hi[ky], ax.hi[kx]) * fx;
                    out.at(s, ch, oy, ox) = top * (1 - fy) + bot * fy;
                }
            }
        }
    }
    return out;
}

template <typename Scalar>
Var<Scalar> upsample_bilinear2x_aligned(Tape<Scalar>& tape, const Var<Scalar>& x) {
    Tensor<Scalar> out = upsample_bilinear2x_aligned(x->value);
    return tape.emit(std::move(out), needs_grad(x), [x](Node<Scalar>& self) {
        const auto& in = x->value;
        const Index n = in.dim(0), c = in.dim(1), h = in.dim(2), w = in.dim(3);
        const Index oh = 2 * h, ow = 2 * w;
        const auto ay = aligned_axis(h, oh);
        const auto ax = aligned_axis(w, ow);
        auto& dx = x->grad_buffer();
        for (Index s = 0; s < n; ++s) {
            for (Index ch = 0; ch < c; ++ch) {
                for (Index oy = 0; oy < oh; ++oy) {
                    const auto ky = static_cast<std::size_t>(oy);
                    const Scalar fy = static_cast<Scalar>(ay.frac[ky]);
                    for (Index ox = 0; ox < ow; ++ox) {
                        const auto kx = static_cast<std::size_t>(ox);
                        const Scalar fx = static_cast<Scalar>(ax.frac[kx]);
                        const Scalar g = self.grad.at(s, ch, oy, ox);
                        dx.at(s, ch, ay.lo[ky], ax.lo[kx]) += g * (1 - fy) * (1 - fx);
                        dx.at(s, ch, ay.lo[ky], ax.hi[kx]) += g * (1 - fy) * fx;
                        dx.at(s, ch, ay.hi[ky], ax.lo[kx]) += g * fy * (1 - fx);
                        dx.at(s, ch, ay.hi[ky], ax.hi[kx]) += g * fy * fx;
                    }
                }
            }
        }
    });
}

template <typename Scalar>
Var<Scalar> linear(Tape<Scalar>& tape, const Var<Scalar>& x, ParamRef<Scalar> weight, ParamRef<Scalar> bias) {
    const auto& in = x->value;
    const auto& w = *weight;
    if (in.shape().back() != w.dim(1)) {
        throw ShapeError("linear: input width " + std::to_string(in.shape().back()) + " but weight " +
                         shape_to_string(w.shape()));
    }
    auto shape = in.shape();
    shape.back() = w.dim(0);
    Tensor<Scalar> out(shape);
    out.rows_view().noalias() = in.rows_view() * w.matrix().transpose();
    if (bias) out.rows_view().rowwise() += (*bias).values().transpose();
    const bool grad = needs_grad(x) || needs_grad(weight) || needs_grad(bias);
    return tape.emit(std::move(out), grad, [x, weight, bias](Node<Scalar>& self) {
        const auto dy = self.grad.rows_view();
        if (bias.grad) bias.grad->values() += dy.colwise().sum().transpose();
        if (weight.grad) weight.grad->matrix().noalias() += dy.transpose() * x->value.rows_view();
        if (x->requires_grad) x->grad_buffer().rows_view().noalias() += dy * weight->matrix();
    });
}

template <typename Scalar>
Var<Scalar> layer_norm(Tape<Scalar>& tape, const Var<Scalar>& x, ParamRef<Scalar> gamma, ParamRef<Scalar> beta,
                       Scalar eps) {
    const auto& in = x->value;
    const auto rows = in.rows_view();
    const Index r = rows.rows(), d = rows.cols();
    if ((*gamma).size() != d) throw ShapeError("layer_norm: width mismatch");
    Tensor<Scalar> xhat(in.shape());
    Tensor<Scalar> out(in.shape());
    Vector<Scalar> rstd(r);
    auto h = xhat.rows_view();
    auto y = out.rows_view();
    for (Index i = 0; i < r; ++i) {
        const Scalar mu = rows.row(i).mean();
        const Scalar var = (rows.row(i).array() - mu).square().mean();
        rstd[i] = Scalar(1) / std::sqrt(var + eps);
        h.row(i) = (rows.row(i).array() - mu) * rstd[i];
        y.row(i) = h.row(i).array() * (*gamma).values().transpose().array() + (*beta).values().transpose().array();
    }
    const bool grad = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
    return tape.emit(std::move(out), grad, [x, gamma, beta, xhat = std::move(xhat), rstd](Node<Scalar>& self) {
        const auto dy = self.grad.rows_view();
        const auto h = xhat.rows_view();
        if (gamma.grad) gamma.grad->values() += dy.cwiseProduct(h).colwise().sum().transpose();
        if (beta.grad) beta.grad->values() += dy.colwise().sum().transpose();
        if (!x->requires_grad) return;
        auto dx = x->grad_buffer().rows_view();
        const Index d = dy.cols();
        for (Index i = 0; i < dy.rows(); ++i) {
            const auto dh = (dy.row(i).array() * (*gamma).values().transpose().array()).eval();
            const Scalar mean_dh = dh.sum() / Scalar(d);
            const Scalar mean_dh_h = (dh * h.row(i).array()).sum() / Scalar(d);
            dx.row(i).array() += rstd[i] * (dh - mean_dh - h.row(i).array() * mean_dh_h);
        }
    });
}

template <typename Scalar>
Var<Scalar> gelu(Tape<Scalar>& tape, const Var<Scalar>& x) {
    const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
    Tensor<Scalar> out(x->value.shape());
    for (Index i = 0; i < out.size(); ++i) {
        const Scalar v = x->value[i];
        out[i] = Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2));
    }
    return tape.emit(std::move(out), needs_grad(x), [x, inv_sqrt2](Node<Scalar>& self) {
        const Scalar inv_sqrt_2pi = Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
        auto& dx = x->grad_buffer();
        for (Index i = 0; i < dx.size(); ++i) {
            const Scalar v = x->value[i];
            const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
            const Scalar pdf = inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
            dx[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

template <typename Scalar>
Var<Scalar> self_attention(Tape<Scalar>& tape, const Var<Scalar>& qkv, int heads) {
    const auto& in = qkv->value;
    require_rank(in, 3, "self_attention");
    const Index n = in.dim(0), len = in.dim(1), d = in.dim(2) / 3;
    if (d * 3 != in.dim(2) || d % heads != 0) throw ShapeError("self_attention: bad packed width");
    const Index dh = d / heads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
    Tensor<Scalar> out({n, len, d});
    const bool keep = needs_grad(qkv) && tape.recording();
    std::vector<RowMatrix<Scalar>> probs;
    if (keep) probs.resize(static_cast<std::size_t>(n * heads));
    RowMatrix<Scalar> att;
    for (Index s = 0; s < n; ++s) {
        const auto m = in.matrix(s);
        auto o = out.matrix(s);
        for (Index hd = 0; hd < heads; ++hd) {
            const auto q = m.middleCols(hd * dh, dh);
            const auto k = m.middleCols(d + hd * dh, dh);
            const auto v = m.middleCols(2 * d + hd * dh, dh);
            att.noalias() = (q * k.transpose()) * scale;
            for (Index i = 0; i < len; ++i) {
                const Scalar mx = att.row(i).maxCoeff();
                att.row(i) = (att.row(i).array() - mx).exp();
                att.row(i) /= att.row(i).sum();
            }
            o.middleCols(hd * dh, dh).noalias() = att * v;
            if (keep) probs[static_cast<std::size_t>(s * heads + hd)] = att;
        }
    }
    return tape.emit(std::move(out), needs_grad(qkv),
                     [qkv, heads, d, dh, scale, probs = std::move(probs)](Node<Scalar>& self) {
                         const auto& in = qkv->value;
                         auto& dqkv = qkv->grad_buffer();
                         const Index n = in.dim(0), len = in.dim(1);
                         RowMatrix<Scalar> datt, ds;
                         for (Index s = 0; s < n; ++s) {
                             const auto m = in.matrix(s);
                             auto dm = dqkv.matrix(s);
                             const auto dout = self.grad.matrix(s);
                             for (Index hd = 0; hd < heads; ++hd) {
                                 const auto& a = probs[static_cast<std::size_t>(s * heads + hd)];
                                 const auto q = m.middleCols(hd * dh, dh);
                                 const auto k = m.middleCols(d + hd * dh, dh);
                                 const auto v = m.middleCols(2 * d + hd * dh, dh);
                                 const auto dov = dout.middleCols(hd * dh, dh);
                                 dm.middleCols(2 * d + hd * dh, dh).noalias() += a.transpose() * dov;
                                 datt.noalias() = dov * v.transpose();
                                 ds.resize(len, len);
                                 for (Index i = 0; i < len; ++i) {
                                     const Scalar dot = a.row(i).dot(datt.row(i));
                                     ds.row(i) = a.row(i).array() * (datt.row(i).array() - dot);
                                 }
                                 dm.middleCols(hd * dh, dh).noalias() += (ds * k) * scale;
                                 dm.middleCols(d + hd * dh, dh).noalias() += (ds.transpose() * q) * scale;
                             }
                         }
                     });
}

namespace {

/// Flat offset of (b, c, y, x) in the map and of the matching token slot.
struct UnfoldIndex {
    Index batch, channels, height, width, p, gh, gw;

    Index token_offset(Index b, Index y, Index x) const {
        const Index k = (y / p) * gw + (x / p);
        const Index t = (y % p) * p + (x % p);
        return ((b * gh * gw + k) * p * p + t) * channels;
    }
};

template <typename Scalar, typename Fn>
void for_each_unfold(const UnfoldIndex& u, Fn&& fn) {
    for (Index b = 0; b < u.batch; ++b) {
        for (Index c = 0; c < u.channels; ++c) {
            for (Index y = 0; y < u.height; ++y) {
                for (Index x = 0; x < u.width; ++x) {
                    const Index map_off = ((b * u.channels + c) * u.height + y) * u.width + x;
                    fn(map_off, u.token_offset(b, y, x) + c);
                }
            }
        }
    }
}

}  // namespace

template <typename Scalar>
Var<Scalar> unfold_tokens(Tape<Scalar>& tape, const Var<Scalar>& map, int p) {
    const auto& in = map->value;
    require_rank(in, 4, "unfold_tokens");
    if (p <= 0 || in.dim(2) % p != 0 || in.dim(3) % p != 0) {
        throw ShapeError("unfold_tokens: map " + shape_to_string(in.shape()) + " not divisible by sub-patch size " +
                         std::to_string(p));
    }
    const UnfoldIndex u{in.dim(0), in.dim(1), in.dim(2), in.dim(3), p, in.dim(2) / p, in.dim(3) / p};
    Tensor<Scalar> out({u.batch * u.gh * u.gw, Index(p) * p, u.channels});
    for_each_unfold<Scalar>(u, [&](Index m, Index t) { out[t] = in[m]; });
    return tape.emit(std::move(out), needs_grad(map), [map, u](Node<Scalar>& self) {
        auto& dx = map->grad_buffer();
        for_each_unfold<Scalar>(u, [&](Index m, Index t) { dx[m] += self.grad[t]; });
    });
}

template <typename Scalar>
Var<Scalar> fold_tokens(Tape<Scalar>& tape, const Var<Scalar>& tokens, Index batch, Index height, Index width,
                        int p) {
    const auto& in = tokens->value;
    require_rank(in, 3, "fold_tokens");
    if (p <= 0 || height % p != 0 || width % p != 0 || in.dim(0) != batch * (height / p) * (width / p) ||
        in.dim(1) != Index(p) * p) {
        throw ShapeError("fold_tokens: tokens " + shape_to_string(in.shape()) + " inconsistent with map " +
                         std::to_string(height) + "x" + std::to_string(width) + ", P=" + std::to_string(p));
    }
    const UnfoldIndex u{batch, in.dim(2), height, width, p, height / p, width / p};
    Tensor<Scalar> out({batch, u.channels, height, width});
    for_each_unfold<Scalar>(u, [&](Index m, Index t) { out[m] = in[t]; });
    return tape.emit(std::move(out), needs_grad(tokens), [tokens, u](Node<Scalar>& self) {
        auto& dt = tokens->grad_buffer();
        for_each_unfold<Scalar>(u, [&](Index m, Index t) { dt[t] += self.grad[m]; });
    });
}

template <typename Scalar>
Var<Scalar> prepend_token(Tape<Scalar>& tape, const Var<Scalar>& x, ParamRef<Scalar> token) {
    const auto& in = x->value;
    require_rank(in, 3, "prepend_token");
    const Index n = in.dim(0), len = in.dim(1), d = in.dim(2);
    if ((*token).size() != d) throw ShapeError("prepend_token: token width mismatch");
    Tensor<Scalar> out({n, len + 1, d});
    for (Index s = 0; s < n; ++s) {
        auto o = out.matrix(s);
        o.row(0) = (*token).values().transpose();
        o.bottomRows(len) = in.matrix(s);
    }
    return tape.emit(std::move(out), needs_grad(x) || needs_grad(token), [x, token, n, len](Node<Scalar>& self) {
        for (Index s = 0; s < n; ++s) {
            const auto g = self.grad.matrix(s);
            if (token.grad) token.grad->values() += g.row(0).transpose();
            if (x->requires_grad) x->grad_buffer().matrix(s) += g.bottomRows(len);
        }
    });
}

template <typename Scalar>
Var<Scalar> add_positional(Tape<Scalar>& tape, const Var<Scalar>& x, ParamRef<Scalar> pos) {
    const auto& in = x->value;
    require_rank(in, 3, "add_positional");
    if ((*pos).shape() != std::vector<Index>{in.dim(1), in.dim(2)}) {
        throw ShapeError("add_positional: table " + shape_to_string((*pos).shape()) + " vs sequence " +
                         shape_to_string(in.shape()));
    }
    Tensor<Scalar> out(in.shape());
    for (Index s = 0; s < in.dim(0); ++s) out.matrix(s) = in.matrix(s) + (*pos).matrix();
    return tape.emit(std::move(out), needs_grad(x) || needs_grad(pos), [x, pos](Node<Scalar>& self) {
        for (Index s = 0; s < self.grad.dim(0); ++s) {
            if (pos.grad) pos.grad->matrix() += self.grad.matrix(s);
            if (x->requires_grad) x->grad_buffer().matrix(s) += self.grad.matrix(s);
        }
    });
}

template <typename Scalar>
std::pair<Var<Scalar>, Var<Scalar>> split_first_token(Tape<Scalar>& tape, const Var<Scalar>& x) {
    const auto& in = x->value;
    require_rank(in, 3, "split_first_token");
    const Index n = in.dim(0), len = in.dim(1), d = in.dim(2);
    Tensor<Scalar> head({n, d});
    Tensor<Scalar> rest({n, len - 1, d});
    for (Index s = 0; s < n; ++s) {
        head.matrix().row(s) = in.matrix(s).row(0);
        rest.matrix(s) = in.matrix(s).bottomRows(len - 1);
    }
    auto a = tape.emit(std::move(head), needs_grad(x), [x](Node<Scalar>& self) {
        auto& dx = x->grad_buffer();
        for (Index s = 0; s < dx.dim(0); ++s) dx.matrix(s).row(0) += self.grad.matrix().row(s);
    });
    auto b = tape.emit(std::move(rest), needs_grad(x), [x](Node<Scalar>& self) {
        auto& dx = x->grad_buffer();
        const Index len = dx.dim(1);
        for (Index s = 0; s < dx.dim(0); ++s) dx.matrix(s).bottomRows(len - 1) += self.grad.matrix(s);
    });
    return {a, b};
}

template <typename Scalar>
Var<Scalar> reshape(Tape<Scalar>& tape, const Var<Scalar>& x, std::vector<Index> shape) {
    Tensor<Scalar> out = x->value.reshaped(std::move(shape));
    return tape.emit(std::move(out), needs_grad(x),
                     [x](Node<Scalar>& self) { x->grad_buffer().values() += self.grad.values(); });
}

template <typename Scalar>
Var<Scalar> cells_to_map(Tape<Scalar>& tape, const Var<Scalar>& cells, int grid_side) {
    const auto& in = cells->value;
    require_rank(in, 3, "cells_to_map");
    const Index b = in.dim(0), g = grid_side, d = in.dim(2);
    if (in.dim(1) != g * g) throw ShapeError("cells_to_map: expected " + std::to_string(g * g) + " cells");
    Tensor<Scalar> out({b, d, g, g});
    for (Index s = 0; s < b; ++s) out.sample_matrix(s) = in.matrix(s).transpose();
    return tape.emit(std::move(out), needs_grad(cells), [cells](Node<Scalar>& self) {
        auto& dc = cells->grad_buffer();
        for (Index s = 0; s < dc.dim(0); ++s) dc.matrix(s) += self.grad.sample_matrix(s).transpose();
    });
}

template <typename Scalar>
Var<Scalar> broadcast_add_cells(Tape<Scalar>& tape, const Var<Scalar>& map, const Var<Scalar>& cells, int p) {
    const auto& m = map->value;
    const auto& c = cells->value;
    require_rank(m, 4, "broadcast_add_cells");
    require_rank(c, 3, "broadcast_add_cells");
    const Index b = m.dim(0), d = m.dim(1), h = m.dim(2), w = m.dim(3);
    if (h % p != 0 || w % p != 0 || c.dim(0) != b || c.dim(1) != (h / p) * (w / p) || c.dim(2) != d) {
        throw ShapeError("broadcast_add_cells: cells " + shape_to_string(c.shape()) + " vs map " +
                         shape_to_string(m.shape()) + " with P=" + std::to_string(p));
    }
    const Index gw = w / p;
    Tensor<Scalar> out = m;
    for (Index s = 0; s < b; ++s) {
        for (Index ch = 0; ch < d; ++ch) {
            for (Index y = 0; y < h; ++y) {
                for (Index x = 0; x < w; ++x) out.at(s, ch, y, x) += c.at(s, (y / p) * gw + x / p, ch);
            }
        }
    }
    return tape.emit(std::move(out), needs_grad(map) || needs_grad(cells), [map, cells, p](Node<Scalar>& self) {
        if (map->requires_grad) map->grad_buffer().values() += self.grad.values();
        if (!cells->requires_grad) return;
        auto& dc = cells->grad_buffer();
        const auto& g = self.grad;
        const Index b = g.dim(0), d = g.dim(1), h = g.dim(2), w = g.dim(3), gw = w / p;
        for (Index s = 0; s < b; ++s) {
            for (Index ch = 0; ch < d; ++ch) {
                for (Index y = 0; y < h; ++y) {
                    for (Index x = 0; x < w; ++x) dc.at(s, (y / p) * gw + x / p, ch) += g.at(s, ch, y, x);
                }
            }
        }
    });
}

template <typename Scalar>
Var<Scalar> bce_with_logits(Tape<Scalar>& tape, const Var<Scalar>& logits, const Tensor<Scalar>& target) {
    const auto& l = logits->value;
    if (!l.same_shape(target)) {
        throw ShapeError("bce_with_logits: logits " + shape_to_string(l.shape()) + " vs target " +
                         shape_to_string(target.shape()));
    }
    Scalar sum = 0;
    for (Index i = 0; i < l.size(); ++i) {
        const Scalar v = l[i];
        sum += std::max(v, Scalar(0)) - v * target[i] + std::log1p(std::exp(-std::abs(v)));
    }
    Tensor<Scalar> out({1});
    out[0] = sum / Scalar(l.size());
    return tape.emit(std::move(out), needs_grad(logits), [logits, target](Node<Scalar>& self) {
        auto& dl = logits->grad_buffer();
        const Scalar scale = self.grad[0] / Scalar(dl.size());
        for (Index i = 0; i < dl.size(); ++i) dl[i] += (sigmoid(logits->value[i]) - target[i]) * scale;
    });
}

#define HITRANS_INSTANTIATE_OPS(S)                                                                                  \
    template Var<S> conv2d(Tape<S>&, const Var<S>&, ParamRef<S>, ParamRef<S>, int, int);                            \
    template Var<S> conv_transpose2x2(Tape<S>&, const Var<S>&, ParamRef<S>, ParamRef<S>);                           \
    template Var<S> batch_norm(Tape<S>&, const Var<S>&, ParamRef<S>, ParamRef<S>, const Tensor<S>&,                 \
                               const Tensor<S>&, bool, BatchStats<S>*, S);                                          \
    template Var<S> relu(Tape<S>&, const Var<S>&);                                                                  \
    template Var<S> max_pool3x3s2(Tape<S>&, const Var<S>&);                                                         \
    template Var<S> add(Tape<S>&, const Var<S>&, const Var<S>&);                                                    \
    template Var<S> concat_channels(Tape<S>&, const Var<S>&, const Var<S>&);                                        \
    template Var<S> upsample_bilinear2x_aligned(Tape<S>&, const Var<S>&);                                           \
    template Tensor<S> upsample_bilinear2x_aligned(const Tensor<S>&);                                               \
    template Var<S> linear(Tape<S>&, const Var<S>&, ParamRef<S>, ParamRef<S>);                                      \
    template Var<S> layer_norm(Tape<S>&, const Var<S>&, ParamRef<S>, ParamRef<S>, S);                               \
    template Var<S> gelu(Tape<S>&, const Var<S>&);                                                                  \
    template Var<S> self_attention(Tape<S>&, const Var<S>&, int);                                                   \
    template Var<S> unfold_tokens(Tape<S>&, const Var<S>&, int);                                                    \
    template Var<S> fold_tokens(Tape<S>&, const Var<S>&, Index, Index, Index, int);                                 \
    template Var<S> prepend_token(Tape<S>&, const Var<S>&, ParamRef<S>);                                            \
    template Var<S> add_positional(Tape<S>&, const Var<S>&, ParamRef<S>);                                           \
    template std::pair<Var<S>, Var<S>> split_first_token(Tape<S>&, const Var<S>&);                                  \
    template Var<S> reshape(Tape<S>&, const Var<S>&, std::vector<Index>);                                           \
    template Var<S> cells_to_map(Tape<S>&, const Var<S>&, int);                                                     \
    template Var<S> broadcast_add_cells(Tape<S>&, const Var<S>&, const Var<S>&, int);                               \
    template Var<S> bce_with_logits(Tape<S>&, const Var<S>&, const Tensor<S>&);

HITRANS_INSTANTIATE_OPS(float)
HITRANS_INSTANTIATE_OPS(double)

#undef HITRANS_INSTANTIATE_OPS

}  // namespace hitrans::ops
