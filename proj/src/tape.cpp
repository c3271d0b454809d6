#include "demist/tape.hpp"

#include <cmath>

namespace demist {

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::push(Tensor value, std::vector<int32_t> parents, std::function<void(Tape&, int32_t)> bp) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = any_requires(parents);
    if (n.requires_grad) n.backprop = std::move(bp);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

bool Tape::any_requires(const std::vector<int32_t>& parents) const {
    for (int32_t p : parents)
        if (nodes_[static_cast<size_t>(p)].requires_grad) return true;
    return false;
}

Tensor& Tape::grad_buf(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad_alloc) {
        n.grad = Tensor::zeros(n.value.shape());
        n.grad_alloc = true;
    }
    return n.grad;
}

const Tensor& Tape::grad(Var v) { return grad_buf(v.id); }

void Tape::backward(Var root) {
    require(root.valid() && node(root).value.numel() == 1, "backward: root must be a scalar");
    grad_buf(root.id)[0] = 1.0;
    for (int32_t id = root.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.requires_grad && n.grad_alloc && n.backprop) n.backprop(*this, id);
    }
}

// ---------------------------------------------------------------- elementwise

Var Tape::add(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(same_shape(ta.shape(), tb.shape()),
            "add: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.numel(); ++i) out[i] = ta[i] + tb[i];
    int32_t ia = a.id, ib = b.id;
    return push(std::move(out), {ia, ib}, [ia, ib](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        if (t.nodes_[ia].requires_grad) {
            Tensor& ga = t.grad_buf(ia);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (t.nodes_[ib].requires_grad) {
            Tensor& gb = t.grad_buf(ib);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
        }
    });
}

Var Tape::sub(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(same_shape(ta.shape(), tb.shape()),
            "sub: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.numel(); ++i) out[i] = ta[i] - tb[i];
    int32_t ia = a.id, ib = b.id;
    return push(std::move(out), {ia, ib}, [ia, ib](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        if (t.nodes_[ia].requires_grad) {
            Tensor& ga = t.grad_buf(ia);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (t.nodes_[ib].requires_grad) {
            Tensor& gb = t.grad_buf(ib);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    });
}

Var Tape::mul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(same_shape(ta.shape(), tb.shape()), "mul: shape mismatch");
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.numel(); ++i) out[i] = ta[i] * tb[i];
    int32_t ia = a.id, ib = b.id;
    return push(std::move(out), {ia, ib}, [ia, ib](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& va = t.nodes_[ia].value;
        const Tensor& vb = t.nodes_[ib].value;
        if (t.nodes_[ia].requires_grad) {
            Tensor& ga = t.grad_buf(ia);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb[i];
        }
        if (t.nodes_[ib].requires_grad) {
            Tensor& gb = t.grad_buf(ib);
            for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va[i];
        }
    });
}

Var Tape::scale(Var a, double s) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.numel(); ++i) out[i] = ta[i] * s;
    int32_t ia = a.id;
    return push(std::move(out), {ia}, [ia, s](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        Tensor& ga = t.grad_buf(ia);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * s;
    });
}

Var Tape::add_scalar(Var a, double c) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.numel(); ++i) out[i] = ta[i] + c;
    int32_t ia = a.id;
    return push(std::move(out), {ia}, [ia](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        Tensor& ga = t.grad_buf(ia);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

Var Tape::exp_(Var a) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.numel(); ++i) out[i] = std::exp(ta[i]);
    int32_t ia = a.id;
    return push(std::move(out), {ia}, [ia](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& y = t.nodes_[self].value;
        Tensor& ga = t.grad_buf(ia);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i];
    });
}

Var Tape::silu(Var a) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.numel(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-ta[i]));
        out[i] = ta[i] * s;
    }
    int32_t ia = a.id;
    return push(std::move(out), {ia}, [ia](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& x = t.nodes_[ia].value;
        Tensor& ga = t.grad_buf(ia);
        for (int64_t i = 0; i < g.numel(); ++i) {
            double s = 1.0 / (1.0 + std::exp(-x[i]));
            ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
        }
    });
}

Var Tape::leaky_relu(Var a, double slope) {
    const Tensor& ta = val(a);
    Tensor out(ta.shape());
    for (int64_t i = 0; i < ta.numel(); ++i) out[i] = ta[i] > 0.0 ? ta[i] : slope * ta[i];
    int32_t ia = a.id;
    return push(std::move(out), {ia}, [ia, slope](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& x = t.nodes_[ia].value;
        Tensor& ga = t.grad_buf(ia);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * (x[i] > 0.0 ? 1.0 : slope);
    });
}

// ---------------------------------------------------------------- structure

Var Tape::reshape(Var a, Shape s) {
    const Tensor& ta = val(a);
    require(shape_numel(s) == ta.numel(), "reshape: numel mismatch");
    Tensor out(s);
    for (int64_t i = 0; i < ta.numel(); ++i) out[i] = ta[i];
    int32_t ia = a.id;
    return push(std::move(out), {ia}, [ia](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        Tensor& ga = t.grad_buf(ia);
        for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

Var Tape::concat_ch(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.ndim() == 4 && tb.ndim() == 4, "concat_ch: expects 4D tensors");
    for (int i = 1; i < 4; ++i)
        require(ta.dim(i) == tb.dim(i), "concat_ch: spatial dims differ");
    int64_t ca = ta.dim(0), cb = tb.dim(0);
    int64_t spatial = ta.dim(1) * ta.dim(2) * ta.dim(3);
    Tensor out(Shape{ca + cb, ta.dim(1), ta.dim(2), ta.dim(3)});
    for (int64_t i = 0; i < ca * spatial; ++i) out[i] = ta[i];
    for (int64_t i = 0; i < cb * spatial; ++i) out[ca * spatial + i] = tb[i];
    int32_t ia = a.id, ib = b.id;
    return push(std::move(out), {ia, ib}, [ia, ib, ca, cb, spatial](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        if (t.nodes_[ia].requires_grad) {
            Tensor& ga = t.grad_buf(ia);
            for (int64_t i = 0; i < ca * spatial; ++i) ga[i] += g[i];
        }
        if (t.nodes_[ib].requires_grad) {
            Tensor& gb = t.grad_buf(ib);
            for (int64_t i = 0; i < cb * spatial; ++i) gb[i] += g[ca * spatial + i];
        }
    });
}

Var Tape::slice_ch(Var a, int64_t c0, int64_t c1) {
    const Tensor& ta = val(a);
    require(ta.ndim() == 4 && c0 >= 0 && c1 <= ta.dim(0) && c0 < c1, "slice_ch: bad channel range");
    int64_t spatial = ta.dim(1) * ta.dim(2) * ta.dim(3);
    Tensor out(Shape{c1 - c0, ta.dim(1), ta.dim(2), ta.dim(3)});
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = ta[c0 * spatial + i];
    int32_t ia = a.id;
    return push(std::move(out), {ia}, [ia, c0, spatial](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        Tensor& ga = t.grad_buf(ia);
        for (int64_t i = 0; i < g.numel(); ++i) ga[c0 * spatial + i] += g[i];
    });
}

Var Tape::transpose(Var a) {
    const Tensor& ta = val(a);
    require(ta.ndim() == 2, "transpose: expects 2D");
    int64_t r = ta.dim(0), c = ta.dim(1);
    Tensor out(Shape{c, r});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[j * r + i] = ta[i * c + j];
    int32_t ia = a.id;
    return push(std::move(out), {ia}, [ia, r, c](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        Tensor& ga = t.grad_buf(ia);
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
}

// ---------------------------------------------------------------- conv3d

namespace {

struct ConvDims {
    int64_t ci, x, y, z;
    int64_t co, k;
    int64_t ox, oy, oz;
    int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    require(x.ndim() == 4, "conv3d: input must be (C,X,Y,Z)");
    require(w.ndim() == 5, "conv3d: weight must be (Co,Ci,K,K,K)");
    ConvDims d;
    d.ci = x.dim(0);
    d.x = x.dim(1);
    d.y = x.dim(2);
    d.z = x.dim(3);
    d.co = w.dim(0);
    d.k = w.dim(2);
    require(w.dim(1) == d.ci, "conv3d: weight Ci " + std::to_string(w.dim(1)) +
                                  " != input channels " + std::to_string(d.ci));
    require(w.dim(2) == w.dim(3) && w.dim(3) == w.dim(4), "conv3d: kernel must be cubic");
    d.stride = stride;
    d.pad = pad;
    d.ox = (d.x + 2 * pad - d.k) / stride + 1;
    d.oy = (d.y + 2 * pad - d.k) / stride + 1;
    d.oz = (d.z + 2 * pad - d.k) / stride + 1;
    require(d.ox > 0 && d.oy > 0 && d.oz > 0, "conv3d: kernel larger than padded input");
    return d;
}

// stride-1 forward: shifted-row accumulation, contiguous inner loop over x.
void conv_fwd_s1(const ConvDims& d, const double* x, const double* w, const double* b, double* out) {
    int64_t in_sp = d.x * d.y * d.z;
    int64_t out_sp = d.ox * d.oy * d.oz;
#pragma omp parallel for schedule(static)
    for (int64_t oc = 0; oc < d.co; ++oc) {
        double* och = out + oc * out_sp;
        double bias = b ? b[oc] : 0.0;
        for (int64_t i = 0; i < out_sp; ++i) och[i] = bias;
        for (int64_t ic = 0; ic < d.ci; ++ic) {
            const double* ich = x + ic * in_sp;
            const double* wk = w + (oc * d.ci + ic) * d.k * d.k * d.k;
            for (int64_t kz = 0; kz < d.k; ++kz) {
                int64_t dz = kz - d.pad;
                int64_t zlo = std::max<int64_t>(0, -dz), zhi = std::min(d.oz, d.z - dz);
                for (int64_t ky = 0; ky < d.k; ++ky) {
                    int64_t dy = ky - d.pad;
                    int64_t ylo = std::max<int64_t>(0, -dy), yhi = std::min(d.oy, d.y - dy);
                    for (int64_t kx = 0; kx < d.k; ++kx) {
                        int64_t dx = kx - d.pad;
                        int64_t xlo = std::max<int64_t>(0, -dx), xhi = std::min(d.ox, d.x - dx);
                        double wv = wk[(kz * d.k + ky) * d.k + kx];
                        if (wv == 0.0 || xhi <= xlo) continue;
                        for (int64_t oz = zlo; oz < zhi; ++oz) {
                            for (int64_t oy = ylo; oy < yhi; ++oy) {
                                const double* ip = ich + (xlo + dx) + d.x * ((oy + dy) + d.y * (oz + dz));
                                double* op = och + xlo + d.ox * (oy + d.oy * oz);
                                int64_t len = xhi - xlo;
                                for (int64_t i = 0; i < len; ++i) op[i] += wv * ip[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

// generic strided forward: per-output gather.
void conv_fwd_gen(const ConvDims& d, const double* x, const double* w, const double* b, double* out) {
    int64_t in_sp = d.x * d.y * d.z;
    int64_t out_sp = d.ox * d.oy * d.oz;
#pragma omp parallel for schedule(static)
    for (int64_t oc = 0; oc < d.co; ++oc) {
        double* och = out + oc * out_sp;
        for (int64_t oz = 0; oz < d.oz; ++oz)
            for (int64_t oy = 0; oy < d.oy; ++oy)
                for (int64_t ox = 0; ox < d.ox; ++ox) {
                    double acc = b ? b[oc] : 0.0;
                    for (int64_t ic = 0; ic < d.ci; ++ic) {
                        const double* ich = x + ic * in_sp;
                        const double* wk = w + (oc * d.ci + ic) * d.k * d.k * d.k;
                        for (int64_t kz = 0; kz < d.k; ++kz) {
                            int64_t iz = oz * d.stride + kz - d.pad;
                            if (iz < 0 || iz >= d.z) continue;
                            for (int64_t ky = 0; ky < d.k; ++ky) {
                                int64_t iy = oy * d.stride + ky - d.pad;
                                if (iy < 0 || iy >= d.y) continue;
                                for (int64_t kx = 0; kx < d.k; ++kx) {
                                    int64_t ix = ox * d.stride + kx - d.pad;
                                    if (ix < 0 || ix >= d.x) continue;
                                    acc += wk[(kz * d.k + ky) * d.k + kx] * ich[ix + d.x * (iy + d.y * iz)];
                                }
                            }
                        }
                    }
                    och[ox + d.ox * (oy + d.oy * oz)] = acc;
                }
    }
}

}  // namespace

Var Tape::conv3d(Var xv, Var wv, Var bv, int stride, int pad) {
    const Tensor& x = val(xv);
    const Tensor& w = val(wv);
    ConvDims d = conv_dims(x, w, stride, pad);
    const double* bptr = nullptr;
    if (bv.valid()) {
        const Tensor& b = val(bv);
        require(b.numel() == d.co, "conv3d: bias size must equal output channels");
        bptr = b.data();
    }
    Tensor out(Shape{d.co, d.ox, d.oy, d.oz});
    if (stride == 1)
        conv_fwd_s1(d, x.data(), w.data(), bptr, out.data());
    else
        conv_fwd_gen(d, x.data(), w.data(), bptr, out.data());

    int32_t ix = xv.id, iw = wv.id, ib = bv.valid() ? bv.id : -1;
    std::vector<int32_t> parents = {ix, iw};
    if (ib >= 0) parents.push_back(ib);
    return push(std::move(out), parents, [ix, iw, ib, d](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& x = t.nodes_[ix].value;
        const Tensor& w = t.nodes_[iw].value;
        int64_t in_sp = d.x * d.y * d.z;
        int64_t out_sp = d.ox * d.oy * d.oz;
        int64_t kvol = d.k * d.k * d.k;

        if (ib >= 0 && t.nodes_[ib].requires_grad) {
            Tensor& gb = t.grad_buf(ib);
            for (int64_t oc = 0; oc < d.co; ++oc) {
                const double* gch = g.data() + oc * out_sp;
                double s = 0.0;
                for (int64_t i = 0; i < out_sp; ++i) s += gch[i];
                gb[oc] += s;
            }
        }

        if (t.nodes_[iw].requires_grad) {
            Tensor& gw = t.grad_buf(iw);
#pragma omp parallel for schedule(static)
            for (int64_t oc = 0; oc < d.co; ++oc) {
                const double* gch = g.data() + oc * out_sp;
                for (int64_t ic = 0; ic < d.ci; ++ic) {
                    const double* ich = x.data() + ic * in_sp;
                    double* gwk = gw.data() + (oc * d.ci + ic) * kvol;
                    for (int64_t kz = 0; kz < d.k; ++kz)
                        for (int64_t ky = 0; ky < d.k; ++ky)
                            for (int64_t kx = 0; kx < d.k; ++kx) {
                                double acc = 0.0;
                                for (int64_t oz = 0; oz < d.oz; ++oz) {
                                    int64_t iz = oz * d.stride + kz - d.pad;
                                    if (iz < 0 || iz >= d.z) continue;
                                    for (int64_t oy = 0; oy < d.oy; ++oy) {
                                        int64_t iy = oy * d.stride + ky - d.pad;
                                        if (iy < 0 || iy >= d.y) continue;
                                        if (d.stride == 1) {
                                            int64_t dx = kx - d.pad;
                                            int64_t xlo = std::max<int64_t>(0, -dx);
                                            int64_t xhi = std::min(d.ox, d.x - dx);
                                            const double* gp = gch + xlo + d.ox * (oy + d.oy * oz);
                                            const double* ip = ich + (xlo + dx) + d.x * (iy + d.y * iz);
                                            for (int64_t i = 0; i < xhi - xlo; ++i) acc += gp[i] * ip[i];
                                        } else {
                                            for (int64_t ox = 0; ox < d.ox; ++ox) {
                                                int64_t ixx = ox * d.stride + kx - d.pad;
                                                if (ixx < 0 || ixx >= d.x) continue;
                                                acc += gch[ox + d.ox * (oy + d.oy * oz)] *
                                                       ich[ixx + d.x * (iy + d.y * iz)];
                                            }
                                        }
                                    }
                                }
                                gwk[(kz * d.k + ky) * d.k + kx] += acc;
                            }
                }
            }
        }

        if (t.nodes_[ix].requires_grad) {
            Tensor& gx = t.grad_buf(ix);
#pragma omp parallel for schedule(static)
            for (int64_t ic = 0; ic < d.ci; ++ic) {
                double* gich = gx.data() + ic * in_sp;
                for (int64_t oc = 0; oc < d.co; ++oc) {
                    const double* gch = g.data() + oc * out_sp;
                    const double* wk = w.data() + (oc * d.ci + ic) * kvol;
                    for (int64_t kz = 0; kz < d.k; ++kz)
                        for (int64_t ky = 0; ky < d.k; ++ky)
                            for (int64_t kx = 0; kx < d.k; ++kx) {
                                double wv = wk[(kz * d.k + ky) * d.k + kx];
                                if (wv == 0.0) continue;
                                if (d.stride == 1) {
                                    int64_t dz = kz - d.pad, dy = ky - d.pad, dx = kx - d.pad;
                                    int64_t zlo = std::max<int64_t>(0, -dz), zhi = std::min(d.oz, d.z - dz);
                                    int64_t ylo = std::max<int64_t>(0, -dy), yhi = std::min(d.oy, d.y - dy);
                                    int64_t xlo = std::max<int64_t>(0, -dx), xhi = std::min(d.ox, d.x - dx);
                                    for (int64_t oz = zlo; oz < zhi; ++oz)
                                        for (int64_t oy = ylo; oy < yhi; ++oy) {
                                            const double* gp = gch + xlo + d.ox * (oy + d.oy * oz);
                                            double* ip = gich + (xlo + dx) + d.x * ((oy + dy) + d.y * (oz + dz));
                                            for (int64_t i = 0; i < xhi - xlo; ++i) ip[i] += wv * gp[i];
                                        }
                                } else {
                                    for (int64_t oz = 0; oz < d.oz; ++oz) {
                                        int64_t iz = oz * d.stride + kz - d.pad;
                                        if (iz < 0 || iz >= d.z) continue;
                                        for (int64_t oy = 0; oy < d.oy; ++oy) {
                                            int64_t iy = oy * d.stride + ky - d.pad;
                                            if (iy < 0 || iy >= d.y) continue;
                                            for (int64_t ox = 0; ox < d.ox; ++ox) {
                                                int64_t ixx = ox * d.stride + kx - d.pad;
                                                if (ixx < 0 || ixx >= d.x) continue;
                                                gich[ixx + d.x * (iy + d.y * iz)] +=
                                                    wv * gch[ox + d.ox * (oy + d.oy * oz)];
                                            }
                                        }
                                    }
                                }
                            }
                }
            }
        }
    });
}

// ---------------------------------------------------------------- broadcast bias

Var Tape::add_channel_bias(Var xv, Var bv) {
    const Tensor& x = val(xv);
    const Tensor& b = val(bv);
    require(x.ndim() == 4 && b.numel() == x.dim(0), "add_channel_bias: bias must be (C)");
    int64_t sp = x.dim(1) * x.dim(2) * x.dim(3);
    Tensor out(x.shape());
    for (int64_t c = 0; c < x.dim(0); ++c)
        for (int64_t i = 0; i < sp; ++i) out[c * sp + i] = x[c * sp + i] + b[c];
    int32_t ix = xv.id, ib = bv.id;
    int64_t C = x.dim(0);
    return push(std::move(out), {ix, ib}, [ix, ib, C, sp](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        if (t.nodes_[ix].requires_grad) {
            Tensor& gx = t.grad_buf(ix);
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        }
        if (t.nodes_[ib].requires_grad) {
            Tensor& gb = t.grad_buf(ib);
            for (int64_t c = 0; c < C; ++c) {
                double s = 0.0;
                for (int64_t i = 0; i < sp; ++i) s += g[c * sp + i];
                gb[c] += s;
            }
        }
    });
}

Var Tape::add_row_bias(Var xv, Var bv) {
    const Tensor& x = val(xv);
    const Tensor& b = val(bv);
    require(x.ndim() == 2 && b.numel() == x.dim(1), "add_row_bias: bias must be (cols)");
    int64_t r = x.dim(0), c = x.dim(1);
    Tensor out(x.shape());
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + b[j];
    int32_t ix = xv.id, ib = bv.id;
    return push(std::move(out), {ix, ib}, [ix, ib, r, c](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        if (t.nodes_[ix].requires_grad) {
            Tensor& gx = t.grad_buf(ix);
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        }
        if (t.nodes_[ib].requires_grad) {
            Tensor& gb = t.grad_buf(ib);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
    });
}

// ---------------------------------------------------------------- matmul / softmax

Var Tape::matmul(Var av, Var bv) {
    const Tensor& a = val(av);
    const Tensor& b = val(bv);
    require(a.ndim() == 2 && b.ndim() == 2, "matmul: expects 2D");
    require(a.dim(1) == b.dim(0), "matmul: inner dims " + std::to_string(a.dim(1)) + " vs " +
                                      std::to_string(b.dim(0)));
    int64_t R = a.dim(0), K = a.dim(1), C = b.dim(1);
    Tensor out(Shape{R, C});
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < R; ++i) {
        double* orow = out.data() + i * C;
        for (int64_t k = 0; k < K; ++k) {
            double av_ = a[i * K + k];
            if (av_ == 0.0) continue;
            const double* brow = b.data() + k * C;
            for (int64_t j = 0; j < C; ++j) orow[j] += av_ * brow[j];
        }
    }
    int32_t ia = av.id, ib = bv.id;
    return push(std::move(out), {ia, ib}, [ia, ib, R, K, C](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& a = t.nodes_[ia].value;
        const Tensor& b = t.nodes_[ib].value;
        if (t.nodes_[ia].requires_grad) {
            Tensor& ga = t.grad_buf(ia);
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < R; ++i)
                for (int64_t k = 0; k < K; ++k) {
                    const double* grow = g.data() + i * C;
                    const double* brow = b.data() + k * C;
                    double s = 0.0;
                    for (int64_t j = 0; j < C; ++j) s += grow[j] * brow[j];
                    ga[i * K + k] += s;
                }
        }
        if (t.nodes_[ib].requires_grad) {
            Tensor& gb = t.grad_buf(ib);
            for (int64_t i = 0; i < R; ++i)
                for (int64_t k = 0; k < K; ++k) {
                    double av_ = a[i * K + k];
                    if (av_ == 0.0) continue;
                    const double* grow = g.data() + i * C;
                    double* gbrow = gb.data() + k * C;
                    for (int64_t j = 0; j < C; ++j) gbrow[j] += av_ * grow[j];
                }
        }
    });
}

Var Tape::softmax_rows(Var av) {
    const Tensor& a = val(av);
    require(a.ndim() == 2, "softmax_rows: expects 2D");
    int64_t R = a.dim(0), C = a.dim(1);
    Tensor out(a.shape());
    for (int64_t i = 0; i < R; ++i) {
        const double* row = a.data() + i * C;
        double* orow = out.data() + i * C;
        double m = row[0];
        for (int64_t j = 1; j < C; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (int64_t j = 0; j < C; ++j) {
            orow[j] = std::exp(row[j] - m);
            s += orow[j];
        }
        for (int64_t j = 0; j < C; ++j) orow[j] /= s;
    }
    int32_t ia = av.id;
    return push(std::move(out), {ia}, [ia, R, C](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        const Tensor& y = t.nodes_[self].value;
        Tensor& ga = t.grad_buf(ia);
        for (int64_t i = 0; i < R; ++i) {
            const double* grow = g.data() + i * C;
            const double* yrow = y.data() + i * C;
            double dot = 0.0;
            for (int64_t j = 0; j < C; ++j) dot += grow[j] * yrow[j];
            double* garow = ga.data() + i * C;
            for (int64_t j = 0; j < C; ++j) garow[j] += yrow[j] * (grow[j] - dot);
        }
    });
}

// ---------------------------------------------------------------- group norm

Var Tape::group_norm(Var xv, Var gammav, Var betav, int groups, double eps) {
    const Tensor& x = val(xv);
    const Tensor& gamma = val(gammav);
    const Tensor& beta = val(betav);
    require(x.ndim() == 4, "group_norm: expects (C,X,Y,Z)");
    int64_t C = x.dim(0);
    require(C % groups == 0, "group_norm: channels " + std::to_string(C) + " not divisible by groups " +
                                 std::to_string(groups));
    require(gamma.numel() == C && beta.numel() == C, "group_norm: gamma/beta must be (C)");
    int64_t sp = x.dim(1) * x.dim(2) * x.dim(3);
    int64_t cg = C / groups;
    int64_t n = cg * sp;

    std::vector<double> mean(groups), inv_std(groups);
    Tensor out(x.shape());
    for (int64_t g = 0; g < groups; ++g) {
        const double* xg = x.data() + g * cg * sp;
        double m = 0.0;
        for (int64_t i = 0; i < n; ++i) m += xg[i];
        m /= static_cast<double>(n);
        double v = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            double d = xg[i] - m;
            v += d * d;
        }
        v /= static_cast<double>(n);
        mean[g] = m;
        inv_std[g] = 1.0 / std::sqrt(v + eps);
    }
    for (int64_t c = 0; c < C; ++c) {
        int64_t g = c / cg;
        double m = mean[g], is = inv_std[g];
        const double* xc = x.data() + c * sp;
        double* oc = out.data() + c * sp;
        double ga = gamma[c], be = beta[c];
        for (int64_t i = 0; i < sp; ++i) oc[i] = ga * (xc[i] - m) * is + be;
    }

    int32_t ix = xv.id, ig = gammav.id, ibt = betav.id;
    return push(std::move(out), {ix, ig, ibt},
                [ix, ig, ibt, groups, cg, sp, n, C, mean, inv_std](Tape& t, int32_t self) {
                    const Tensor& g = t.nodes_[self].grad;
                    const Tensor& x = t.nodes_[ix].value;
                    const Tensor& gamma = t.nodes_[ig].value;
                    if (t.nodes_[ibt].requires_grad) {
                        Tensor& gb = t.grad_buf(ibt);
                        for (int64_t c = 0; c < C; ++c) {
                            const double* gc = g.data() + c * sp;
                            double s = 0.0;
                            for (int64_t i = 0; i < sp; ++i) s += gc[i];
                            gb[c] += s;
                        }
                    }
                    if (t.nodes_[ig].requires_grad) {
                        Tensor& gg = t.grad_buf(ig);
                        for (int64_t c = 0; c < C; ++c) {
                            int64_t grp = c / cg;
                            double m = mean[grp], is = inv_std[grp];
                            const double* gc = g.data() + c * sp;
                            const double* xc = x.data() + c * sp;
                            double s = 0.0;
                            for (int64_t i = 0; i < sp; ++i) s += gc[i] * (xc[i] - m) * is;
                            gg[c] += s;
                        }
                    }
                    if (t.nodes_[ix].requires_grad) {
                        Tensor& gx = t.grad_buf(ix);
                        for (int64_t grp = 0; grp < groups; ++grp) {
                            double m = mean[grp], is = inv_std[grp];
                            // dxhat = g * gamma; accumulate row sums for the projection terms
                            double sum1 = 0.0, sum2 = 0.0;
                            for (int64_t cc = 0; cc < cg; ++cc) {
                                int64_t c = grp * cg + cc;
                                const double* gc = g.data() + c * sp;
                                const double* xc = x.data() + c * sp;
                                double ga = gamma[c];
                                for (int64_t i = 0; i < sp; ++i) {
                                    double dxh = gc[i] * ga;
                                    double xh = (xc[i] - m) * is;
                                    sum1 += dxh;
                                    sum2 += dxh * xh;
                                }
                            }
                            double inv_n = 1.0 / static_cast<double>(n);
                            for (int64_t cc = 0; cc < cg; ++cc) {
                                int64_t c = grp * cg + cc;
                                const double* gc = g.data() + c * sp;
                                const double* xc = x.data() + c * sp;
                                double* gxc = gx.data() + c * sp;
                                double ga = gamma[c];
                                for (int64_t i = 0; i < sp; ++i) {
                                    double dxh = gc[i] * ga;
                                    double xh = (xc[i] - m) * is;
                                    gxc[i] += (dxh - (sum1 + xh * sum2) * inv_n) * is;
                                }
                            }
                        }
                    }
                });
}

// ---------------------------------------------------------------- resampling

Var Tape::upsample_nearest2(Var xv) {
    const Tensor& x = val(xv);
    require(x.ndim() == 4, "upsample_nearest2: expects (C,X,Y,Z)");
    int64_t C = x.dim(0), X = x.dim(1), Y = x.dim(2), Z = x.dim(3);
    Tensor out(Shape{C, 2 * X, 2 * Y, 2 * Z});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t z = 0; z < Z; ++z)
            for (int64_t y = 0; y < Y; ++y)
                for (int64_t xx = 0; xx < X; ++xx) {
                    double v = x[c * X * Y * Z + xx + X * (y + Y * z)];
                    for (int64_t dz = 0; dz < 2; ++dz)
                        for (int64_t dy = 0; dy < 2; ++dy)
                            for (int64_t dx = 0; dx < 2; ++dx)
                                out[c * 8 * X * Y * Z + (2 * xx + dx) +
                                    2 * X * ((2 * y + dy) + 2 * Y * (2 * z + dz))] = v;
                }
    int32_t ix = xv.id;
    return push(std::move(out), {ix}, [ix, C, X, Y, Z](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        Tensor& gx = t.grad_buf(ix);
        for (int64_t c = 0; c < C; ++c)
            for (int64_t z = 0; z < Z; ++z)
                for (int64_t y = 0; y < Y; ++y)
                    for (int64_t xx = 0; xx < X; ++xx) {
                        double s = 0.0;
                        for (int64_t dz = 0; dz < 2; ++dz)
                            for (int64_t dy = 0; dy < 2; ++dy)
                                for (int64_t dx = 0; dx < 2; ++dx)
                                    s += g[c * 8 * X * Y * Z + (2 * xx + dx) +
                                           2 * X * ((2 * y + dy) + 2 * Y * (2 * z + dz))];
                        gx[c * X * Y * Z + xx + X * (y + Y * z)] += s;
                    }
    });
}

Var Tape::avg_pool3d(Var xv, int factor) {
    const Tensor& x = val(xv);
    require(x.ndim() == 4, "avg_pool3d: expects (C,X,Y,Z)");
    int64_t C = x.dim(0), X = x.dim(1), Y = x.dim(2), Z = x.dim(3);
    int64_t f = factor;
    require(X % f == 0 && Y % f == 0 && Z % f == 0, "avg_pool3d: dims not divisible by factor");
    int64_t OX = X / f, OY = Y / f, OZ = Z / f;
    double inv = 1.0 / static_cast<double>(f * f * f);
    Tensor out(Shape{C, OX, OY, OZ});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t oz = 0; oz < OZ; ++oz)
            for (int64_t oy = 0; oy < OY; ++oy)
                for (int64_t ox = 0; ox < OX; ++ox) {
                    double s = 0.0;
                    for (int64_t dz = 0; dz < f; ++dz)
                        for (int64_t dy = 0; dy < f; ++dy)
                            for (int64_t dx = 0; dx < f; ++dx)
                                s += x[c * X * Y * Z + (ox * f + dx) + X * ((oy * f + dy) + Y * (oz * f + dz))];
                    out[c * OX * OY * OZ + ox + OX * (oy + OY * oz)] = s * inv;
                }
    int32_t ix = xv.id;
    return push(std::move(out), {ix}, [ix, C, X, Y, Z, OX, OY, OZ, f, inv](Tape& t, int32_t self) {
        const Tensor& g = t.nodes_[self].grad;
        Tensor& gx = t.grad_buf(ix);
        for (int64_t c = 0; c < C; ++c)
            for (int64_t oz = 0; oz < OZ; ++oz)
                for (int64_t oy = 0; oy < OY; ++oy)
                    for (int64_t ox = 0; ox < OX; ++ox) {
                        double gv = g[c * OX * OY * OZ + ox + OX * (oy + OY * oz)] * inv;
                        for (int64_t dz = 0; dz < f; ++dz)
                            for (int64_t dy = 0; dy < f; ++dy)
                                for (int64_t dx = 0; dx < f; ++dx)
                                    gx[c * X * Y * Z + (ox * f + dx) +
                                       X * ((oy * f + dy) + Y * (oz * f + dz))] += gv;
                    }
    });
}

// ---------------------------------------------------------------- reductions

Var Tape::sum_all(Var av) {
    const Tensor& a = val(av);
    Tensor out = Tensor::scalar(a.sum());
    int32_t ia = av.id;
    return push(std::move(out), {ia}, [ia](Tape& t, int32_t self) {
        double g = t.nodes_[self].grad[0];
        Tensor& ga = t.grad_buf(ia);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

Var Tape::mean_all(Var av) {
    const Tensor& a = val(av);
    double inv = 1.0 / static_cast<double>(a.numel());
    Tensor out = Tensor::scalar(a.sum() * inv);
    int32_t ia = av.id;
    return push(std::move(out), {ia}, [ia, inv](Tape& t, int32_t self) {
        double g = t.nodes_[self].grad[0] * inv;
        Tensor& ga = t.grad_buf(ia);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

Var Tape::mse(Var av, Var bv) {
    const Tensor& a = val(av);
    const Tensor& b = val(bv);
    require(same_shape(a.shape(), b.shape()), "mse: shape mismatch");
    double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    int32_t ia = av.id, ib = bv.id;
    return push(Tensor::scalar(s * inv), {ia, ib}, [ia, ib, inv](Tape& t, int32_t self) {
        double g = t.nodes_[self].grad[0] * 2.0 * inv;
        const Tensor& a = t.nodes_[ia].value;
        const Tensor& b = t.nodes_[ib].value;
        if (t.nodes_[ia].requires_grad) {
            Tensor& ga = t.grad_buf(ia);
            for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g * (a[i] - b[i]);
        }
        if (t.nodes_[ib].requires_grad) {
            Tensor& gb = t.grad_buf(ib);
            for (int64_t i = 0; i < a.numel(); ++i) gb[i] -= g * (a[i] - b[i]);
        }
    });
}

Var Tape::l1(Var av, Var bv) {
    const Tensor& a = val(av);
    const Tensor& b = val(bv);
    require(same_shape(a.shape(), b.shape()), "l1: shape mismatch");
    double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += std::fabs(a[i] - b[i]);
    int32_t ia = av.id, ib = bv.id;
    return push(Tensor::scalar(s * inv), {ia, ib}, [ia, ib, inv](Tape& t, int32_t self) {
        double g = t.nodes_[self].grad[0] * inv;
        const Tensor& a = t.nodes_[ia].value;
        const Tensor& b = t.nodes_[ib].value;
        if (t.nodes_[ia].requires_grad) {
            Tensor& ga = t.grad_buf(ia);
            for (int64_t i = 0; i < a.numel(); ++i) {
                double d = a[i] - b[i];
                ga[i] += g * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
            }
        }
        if (t.nodes_[ib].requires_grad) {
            Tensor& gb = t.grad_buf(ib);
            for (int64_t i = 0; i < a.numel(); ++i) {
                double d = a[i] - b[i];
                gb[i] -= g * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
            }
        }
    });
}

Var Tape::mean_sq(Var av) {
    const Tensor& a = val(av);
    double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * a[i];
    int32_t ia = av.id;
    return push(Tensor::scalar(s * inv), {ia}, [ia, inv](Tape& t, int32_t self) {
        double g = t.nodes_[self].grad[0] * 2.0 * inv;
        const Tensor& a = t.nodes_[ia].value;
        Tensor& ga = t.grad_buf(ia);
        for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g * a[i];
    });
}

// ---------------------------------------------------------------- sobel

namespace {

// Separable Sobel weights: derivative [-1,0,1] along the axis, smoothing
// [1,2,1] along the other two. Correlation convention: +1 at offset +1.
inline double sobel_weight(int axis, int dx, int dy, int dz) {
    static const double deriv[3] = {-1.0, 0.0, 1.0};
    static const double smooth[3] = {1.0, 2.0, 1.0};
    double w[3];
    for (int a = 0; a < 3; ++a) {
        int off = (a == 0 ? dx : (a == 1 ? dy : dz)) + 1;
        w[a] = (a == axis) ? deriv[off] : smooth[off];
    }
    return w[0] * w[1] * w[2];
}

inline int64_t clampi(int64_t v, int64_t lo, int64_t hi) { return v < lo ? lo : (v > hi ? hi : v); }

}  // namespace

Var Tape::sobel_mag(Var xv) {
    const Tensor& x = val(xv);
    require(x.ndim() == 4, "sobel_mag: expects (C,X,Y,Z)");
    int64_t C = x.dim(0), X = x.dim(1), Y = x.dim(2), Z = x.dim(3);
    require(X >= 3 && Y >= 3 && Z >= 3, "sobel_mag: every spatial dim must be >= 3");
    int64_t sp = X * Y * Z;

    Tensor gxv(x.shape()), gyv(x.shape()), gzv(x.shape()), mag(x.shape());
    for (int64_t c = 0; c < C; ++c) {
        const double* in = x.data() + c * sp;
        double* pgx = gxv.data() + c * sp;
        double* pgy = gyv.data() + c * sp;
        double* pgz = gzv.data() + c * sp;
        double* pm = mag.data() + c * sp;
#pragma omp parallel for schedule(static)
        for (int64_t z = 0; z < Z; ++z)
            for (int64_t y = 0; y < Y; ++y)
                for (int64_t xx = 0; xx < X; ++xx) {
                    double ax = 0.0, ay = 0.0, az = 0.0;
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                int64_t ix = clampi(xx + dx, 0, X - 1);
                                int64_t iy = clampi(y + dy, 0, Y - 1);
                                int64_t iz = clampi(z + dz, 0, Z - 1);
                                double v = in[ix + X * (iy + Y * iz)];
                                ax += sobel_weight(0, dx, dy, dz) * v;
                                ay += sobel_weight(1, dx, dy, dz) * v;
                                az += sobel_weight(2, dx, dy, dz) * v;
                            }
                    int64_t o = xx + X * (y + Y * z);
                    pgx[o] = ax;
                    pgy[o] = ay;
                    pgz[o] = az;
                    pm[o] = std::sqrt(ax * ax + ay * ay + az * az);
                }
    }

    int32_t ix = xv.id;
    return push(std::move(mag), {ix},
                [ix, C, X, Y, Z, sp, gxv = std::move(gxv), gyv = std::move(gyv),
                 gzv = std::move(gzv)](Tape& t, int32_t self) {
                    const Tensor& g = t.nodes_[self].grad;
                    const Tensor& m = t.nodes_[self].value;
                    Tensor& gin = t.grad_buf(ix);
                    for (int64_t c = 0; c < C; ++c) {
                        const double* gm = g.data() + c * sp;
                        const double* pm = m.data() + c * sp;
                        const double* pgx = gxv.data() + c * sp;
                        const double* pgy = gyv.data() + c * sp;
                        const double* pgz = gzv.data() + c * sp;
                        double* gi = gin.data() + c * sp;
                        for (int64_t z = 0; z < Z; ++z)
                            for (int64_t y = 0; y < Y; ++y)
                                for (int64_t xx = 0; xx < X; ++xx) {
                                    int64_t o = xx + X * (y + Y * z);
                                    double mg = pm[o];
                                    if (mg < 1e-300 || gm[o] == 0.0) continue;
                                    double f = gm[o] / mg;
                                    double dgx = f * pgx[o], dgy = f * pgy[o], dgz = f * pgz[o];
                                    for (int dz = -1; dz <= 1; ++dz)
                                        for (int dy = -1; dy <= 1; ++dy)
                                            for (int dx = -1; dx <= 1; ++dx) {
                                                int64_t tx = clampi(xx + dx, 0, X - 1);
                                                int64_t ty = clampi(y + dy, 0, Y - 1);
                                                int64_t tz = clampi(z + dz, 0, Z - 1);
                                                double w = sobel_weight(0, dx, dy, dz) * dgx +
                                                           sobel_weight(1, dx, dy, dz) * dgy +
                                                           sobel_weight(2, dx, dy, dz) * dgz;
                                                gi[tx + X * (ty + Y * tz)] += w;
                                            }
                                }
                    }
                });
}

}  // namespace demist
