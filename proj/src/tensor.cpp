#include "portrait/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>

#include "portrait/errors.hpp"

namespace portrait {

bool Tensor::all_finite() const {
    for (double x : data)
        if (!std::isfinite(x)) return false;
    return true;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double x : data) m = std::max(m, std::fabs(x));
    return m;
}

int Graph::push(Tensor value, bool needs_grad, std::function<void(Graph&)> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

void Graph::ensure_grad(int i) {
    Node& n = nodes_[i];
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
}

V Graph::input(Tensor value) {
    return V{push(std::move(value), false, nullptr)};
}

V Graph::param(ParamTensor& p) {
    int idx = push(p.value, p.trainable, nullptr);
    nodes_[idx].bound = &p;
    return V{idx};
}

static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) raise(ErrorCode::DimensionMismatch, std::string(op) + ": shapes differ");
}

V Graph::add(V a, V b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require_same_shape(ta, tb, "add");
    Tensor out = ta;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
    bool ng = needs_grad(a) || needs_grad(b);
    int ia = a.i, ib = b.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, ib, io](Graph& g) {
            const Tensor& go = g.nodes_[io].grad;
            if (g.nodes_[ia].needs_grad) {
                g.ensure_grad(ia);
                for (size_t i = 0; i < go.data.size(); ++i) g.nodes_[ia].grad.data[i] += go.data[i];
            }
            if (g.nodes_[ib].needs_grad) {
                g.ensure_grad(ib);
                for (size_t i = 0; i < go.data.size(); ++i) g.nodes_[ib].grad.data[i] += go.data[i];
            }
        };
    }
    return V{idx};
}

V Graph::sub(V a, V b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require_same_shape(ta, tb, "sub");
    Tensor out = ta;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= tb.data[i];
    bool ng = needs_grad(a) || needs_grad(b);
    int ia = a.i, ib = b.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, ib, io](Graph& g) {
            const Tensor& go = g.nodes_[io].grad;
            if (g.nodes_[ia].needs_grad) {
                g.ensure_grad(ia);
                for (size_t i = 0; i < go.data.size(); ++i) g.nodes_[ia].grad.data[i] += go.data[i];
            }
            if (g.nodes_[ib].needs_grad) {
                g.ensure_grad(ib);
                for (size_t i = 0; i < go.data.size(); ++i) g.nodes_[ib].grad.data[i] -= go.data[i];
            }
        };
    }
    return V{idx};
}

V Graph::mul(V a, V b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require_same_shape(ta, tb, "mul");
    Tensor out = ta;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
    bool ng = needs_grad(a) || needs_grad(b);
    int ia = a.i, ib = b.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, ib, io](Graph& g) {
            const Tensor& go = g.nodes_[io].grad;
            if (g.nodes_[ia].needs_grad) {
                g.ensure_grad(ia);
                const Tensor& vb = g.nodes_[ib].value;
                for (size_t i = 0; i < go.data.size(); ++i)
                    g.nodes_[ia].grad.data[i] += go.data[i] * vb.data[i];
            }
            if (g.nodes_[ib].needs_grad) {
                g.ensure_grad(ib);
                const Tensor& va = g.nodes_[ia].value;
                for (size_t i = 0; i < go.data.size(); ++i)
                    g.nodes_[ib].grad.data[i] += go.data[i] * va.data[i];
            }
        };
    }
    return V{idx};
}

V Graph::scale(V a, double c) {
    Tensor out = val(a);
    for (auto& x : out.data) x *= c;
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io, c](Graph& g) {
            g.ensure_grad(ia);
            const Tensor& go = g.nodes_[io].grad;
            for (size_t i = 0; i < go.data.size(); ++i) g.nodes_[ia].grad.data[i] += c * go.data[i];
        };
    }
    return V{idx};
}

V Graph::add_scalar(V a, double c) {
    Tensor out = val(a);
    for (auto& x : out.data) x += c;
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io](Graph& g) {
            g.ensure_grad(ia);
            const Tensor& go = g.nodes_[io].grad;
            for (size_t i = 0; i < go.data.size(); ++i) g.nodes_[ia].grad.data[i] += go.data[i];
        };
    }
    return V{idx};
}

static double norm_cdf(double x) { return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244)); }
static double norm_pdf(double x) { return std::exp(-0.5 * x * x) * 0.3989422804014326779; }

V Graph::gelu(V a) {
    Tensor out = val(a);
    for (auto& x : out.data) x = x * norm_cdf(x);
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io](Graph& g) {
            g.ensure_grad(ia);
            const Tensor& go = g.nodes_[io].grad;
            const Tensor& vx = g.nodes_[ia].value;
            for (size_t i = 0; i < go.data.size(); ++i) {
                double x = vx.data[i];
                g.nodes_[ia].grad.data[i] += go.data[i] * (norm_cdf(x) + x * norm_pdf(x));
            }
        };
    }
    return V{idx};
}

static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

V Graph::silu(V a) {
    Tensor out = val(a);
    for (auto& x : out.data) x = x * sigmoid(x);
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io](Graph& g) {
            g.ensure_grad(ia);
            const Tensor& go = g.nodes_[io].grad;
            const Tensor& vx = g.nodes_[ia].value;
            for (size_t i = 0; i < go.data.size(); ++i) {
                double s = sigmoid(vx.data[i]);
                g.nodes_[ia].grad.data[i] += go.data[i] * s * (1.0 + vx.data[i] * (1.0 - s));
            }
        };
    }
    return V{idx};
}

V Graph::sigmoid_elem(V a) {
    Tensor out = val(a);
    for (auto& x : out.data) x = sigmoid(x);
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io](Graph& g) {
            g.ensure_grad(ia);
            const Tensor& go = g.nodes_[io].grad;
            const Tensor& vy = g.nodes_[io].value;
            for (size_t i = 0; i < go.data.size(); ++i)
                g.nodes_[ia].grad.data[i] += go.data[i] * vy.data[i] * (1.0 - vy.data[i]);
        };
    }
    return V{idx};
}

V Graph::sqrt_elem(V a) {
    Tensor out = val(a);
    for (auto& x : out.data) x = std::sqrt(x);
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io](Graph& g) {
            g.ensure_grad(ia);
            const Tensor& go = g.nodes_[io].grad;
            const Tensor& vy = g.nodes_[io].value;
            for (size_t i = 0; i < go.data.size(); ++i)
                g.nodes_[ia].grad.data[i] += go.data[i] * 0.5 / vy.data[i];
        };
    }
    return V{idx};
}

V Graph::div_elem(V a, V b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require_same_shape(ta, tb, "div_elem");
    Tensor out = ta;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] /= tb.data[i];
    bool ng = needs_grad(a) || needs_grad(b);
    int ia = a.i, ib = b.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, ib, io](Graph& g) {
            const Tensor& go = g.nodes_[io].grad;
            const Tensor& va = g.nodes_[ia].value;
            const Tensor& vb = g.nodes_[ib].value;
            if (g.nodes_[ia].needs_grad) {
                g.ensure_grad(ia);
                for (size_t i = 0; i < go.data.size(); ++i)
                    g.nodes_[ia].grad.data[i] += go.data[i] / vb.data[i];
            }
            if (g.nodes_[ib].needs_grad) {
                g.ensure_grad(ib);
                for (size_t i = 0; i < go.data.size(); ++i)
                    g.nodes_[ib].grad.data[i] -= go.data[i] * va.data[i] / (vb.data[i] * vb.data[i]);
            }
        };
    }
    return V{idx};
}

V Graph::exp_elem(V a) {
    Tensor out = val(a);
    for (auto& x : out.data) x = std::exp(x);
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io](Graph& g) {
            g.ensure_grad(ia);
            const Tensor& go = g.nodes_[io].grad;
            const Tensor& vy = g.nodes_[io].value;
            for (size_t i = 0; i < go.data.size(); ++i)
                g.nodes_[ia].grad.data[i] += go.data[i] * vy.data[i];
        };
    }
    return V{idx};
}

V Graph::mul_scalar_node(V a, V s) {
    const Tensor& ts = val(s);
    if (ts.numel() != 1) raise(ErrorCode::DimensionMismatch, "mul_scalar_node: scalar must have 1 element");
    Tensor out = val(a);
    double sv = ts.data[0];
    for (auto& x : out.data) x *= sv;
    bool ng = needs_grad(a) || needs_grad(s);
    int ia = a.i, is = s.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, is, io](Graph& g) {
            const Tensor& go = g.nodes_[io].grad;
            const Tensor& va = g.nodes_[ia].value;
            double sv2 = g.nodes_[is].value.data[0];
            if (g.nodes_[ia].needs_grad) {
                g.ensure_grad(ia);
                for (size_t i = 0; i < go.data.size(); ++i)
                    g.nodes_[ia].grad.data[i] += go.data[i] * sv2;
            }
            if (g.nodes_[is].needs_grad) {
                g.ensure_grad(is);
                double acc = 0.0;
                for (size_t i = 0; i < go.data.size(); ++i) acc += go.data[i] * va.data[i];
                g.nodes_[is].grad.data[0] += acc;
            }
        };
    }
    return V{idx};
}

V Graph::reshape(V a, std::vector<int> shape) {
    const Tensor& ta = val(a);
    if (Tensor::numel_of(shape) != ta.numel())
        raise(ErrorCode::DimensionMismatch, "reshape: element count mismatch");
    Tensor out;
    out.shape = std::move(shape);
    out.data = ta.data;
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io](Graph& g) {
            g.ensure_grad(ia);
            const Tensor& go = g.nodes_[io].grad;
            for (size_t i = 0; i < go.data.size(); ++i) g.nodes_[ia].grad.data[i] += go.data[i];
        };
    }
    return V{idx};
}

V Graph::transpose(V a) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 2) raise(ErrorCode::DimensionMismatch, "transpose: expects 2-D");
    int r = ta.dim(0), c = ta.dim(1);
    Tensor out({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at2(j, i) = ta.at2(i, j);
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io, r, c](Graph& g) {
            g.ensure_grad(ia);
            const Tensor& go = g.nodes_[io].grad;
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) g.nodes_[ia].grad.at2(i, j) += go.at2(j, i);
        };
    }
    return V{idx};
}

V Graph::concat_rows(const std::vector<V>& parts) {
    if (parts.empty()) raise(ErrorCode::DimensionMismatch, "concat_rows: empty");
    int cols = val(parts[0]).dim(1);
    int rows = 0;
    bool ng = false;
    for (V p : parts) {
        const Tensor& t = val(p);
        if (t.ndim() != 2 || t.dim(1) != cols)
            raise(ErrorCode::DimensionMismatch, "concat_rows: column mismatch");
        rows += t.dim(0);
        ng = ng || needs_grad(p);
    }
    Tensor out({rows, cols});
    int r = 0;
    for (V p : parts) {
        const Tensor& t = val(p);
        std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<size_t>(r) * cols);
        r += t.dim(0);
    }
    std::vector<int> srcs;
    std::vector<int> offsets;
    int off = 0;
    for (V p : parts) {
        srcs.push_back(p.i);
        offsets.push_back(off);
        off += val(p).dim(0);
    }
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [srcs, offsets, cols, io](Graph& g) {
            const Tensor& go = g.nodes_[io].grad;
            for (size_t k = 0; k < srcs.size(); ++k) {
                int is = srcs[k];
                if (!g.nodes_[is].needs_grad) continue;
                g.ensure_grad(is);
                Tensor& gi = g.nodes_[is].grad;
                int nr = g.nodes_[is].value.dim(0);
                for (int i = 0; i < nr; ++i)
                    for (int j = 0; j < cols; ++j)
                        gi.at2(i, j) += go.at2(offsets[k] + i, j);
            }
        };
    }
    return V{idx};
}

V Graph::slice_rows(V a, int r0, int r1) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 2 || r0 < 0 || r1 > ta.dim(0) || r0 >= r1)
        raise(ErrorCode::DimensionMismatch, "slice_rows: bad range");
    int cols = ta.dim(1);
    Tensor out({r1 - r0, cols});
    std::copy(ta.data.begin() + static_cast<size_t>(r0) * cols,
              ta.data.begin() + static_cast<size_t>(r1) * cols, out.data.begin());
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io, r0, cols](Graph& g) {
            g.ensure_grad(ia);
            const Tensor& go = g.nodes_[io].grad;
            for (int i = 0; i < go.dim(0); ++i)
                for (int j = 0; j < cols; ++j)
                    g.nodes_[ia].grad.at2(r0 + i, j) += go.at2(i, j);
        };
    }
    return V{idx};
}

V Graph::concat_cols(const std::vector<V>& parts) {
    if (parts.empty()) raise(ErrorCode::DimensionMismatch, "concat_cols: empty");
    int rows = val(parts[0]).dim(0);
    int cols = 0;
    bool ng = false;
    for (V p : parts) {
        const Tensor& t = val(p);
        if (t.ndim() != 2 || t.dim(0) != rows)
            raise(ErrorCode::DimensionMismatch, "concat_cols: row mismatch");
        cols += t.dim(1);
        ng = ng || needs_grad(p);
    }
    Tensor out({rows, cols});
    int c0 = 0;
    for (V p : parts) {
        const Tensor& t = val(p);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < t.dim(1); ++j) out.at2(i, c0 + j) = t.at2(i, j);
        c0 += t.dim(1);
    }
    std::vector<int> srcs, offs, widths;
    int off = 0;
    for (V p : parts) {
        srcs.push_back(p.i);
        offs.push_back(off);
        widths.push_back(val(p).dim(1));
        off += val(p).dim(1);
    }
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [srcs, offs, widths, rows, io](Graph& g) {
            const Tensor& go = g.nodes_[io].grad;
            for (size_t k = 0; k < srcs.size(); ++k) {
                int is = srcs[k];
                if (!g.nodes_[is].needs_grad) continue;
                g.ensure_grad(is);
                Tensor& gi = g.nodes_[is].grad;
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < widths[k]; ++j)
                        gi.at2(i, j) += go.at2(i, offs[k] + j);
            }
        };
    }
    return V{idx};
}

V Graph::slice_cols(V a, int c0, int c1) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 2 || c0 < 0 || c1 > ta.dim(1) || c0 >= c1)
        raise(ErrorCode::DimensionMismatch, "slice_cols: bad range");
    int rows = ta.dim(0);
    Tensor out({rows, c1 - c0});
    for (int i = 0; i < rows; ++i)
        for (int j = c0; j < c1; ++j) out.at2(i, j - c0) = ta.at2(i, j);
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io, c0](Graph& g) {
            g.ensure_grad(ia);
            const Tensor& go = g.nodes_[io].grad;
            for (int i = 0; i < go.dim(0); ++i)
                for (int j = 0; j < go.dim(1); ++j)
                    g.nodes_[ia].grad.at2(i, c0 + j) += go.at2(i, j);
        };
    }
    return V{idx};
}

V Graph::matmul(V a, V b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.ndim() != 2 || tb.ndim() != 2 || ta.dim(1) != tb.dim(0))
        raise(ErrorCode::DimensionMismatch, "matmul: incompatible shapes");
    int m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            double av = ta.at2(i, p);
            if (av == 0.0) continue;
            const double* brow = &tb.data[static_cast<size_t>(p) * n];
            double* orow = &out.data[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    bool ng = needs_grad(a) || needs_grad(b);
    int ia = a.i, ib = b.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, ib, io, m, k, n](Graph& g) {
            const Tensor& go = g.nodes_[io].grad;
            const Tensor& va = g.nodes_[ia].value;
            const Tensor& vb = g.nodes_[ib].value;
            if (g.nodes_[ia].needs_grad) {
                g.ensure_grad(ia);
                Tensor& ga = g.nodes_[ia].grad;
                // dA = dY . B^T
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        double gv = go.at2(i, j);
                        if (gv == 0.0) continue;
                        for (int p = 0; p < k; ++p) ga.at2(i, p) += gv * vb.at2(p, j);
                    }
            }
            if (g.nodes_[ib].needs_grad) {
                g.ensure_grad(ib);
                Tensor& gb = g.nodes_[ib].grad;
                // dB = A^T . dY
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double av = va.at2(i, p);
                        if (av == 0.0) continue;
                        for (int j = 0; j < n; ++j) gb.at2(p, j) += av * go.at2(i, j);
                    }
            }
        };
    }
    return V{idx};
}

V Graph::add_rowvec(V a, V b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.ndim() != 2 || tb.numel() != ta.dim(1))
        raise(ErrorCode::DimensionMismatch, "add_rowvec: bias size mismatch");
    int rows = ta.dim(0), cols = ta.dim(1);
    Tensor out = ta;
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out.at2(i, j) += tb.data[j];
    bool ng = needs_grad(a) || needs_grad(b);
    int ia = a.i, ib = b.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, ib, io, rows, cols](Graph& g) {
            const Tensor& go = g.nodes_[io].grad;
            if (g.nodes_[ia].needs_grad) {
                g.ensure_grad(ia);
                for (size_t i = 0; i < go.data.size(); ++i) g.nodes_[ia].grad.data[i] += go.data[i];
            }
            if (g.nodes_[ib].needs_grad) {
                g.ensure_grad(ib);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j) g.nodes_[ib].grad.data[j] += go.at2(i, j);
            }
        };
    }
    return V{idx};
}

V Graph::linear(V x, V w, V b) { return add_rowvec(matmul(x, w), b); }

V Graph::sum_all(V a) {
    const Tensor& ta = val(a);
    Tensor out({1});
    double s = 0.0;
    for (double x : ta.data) s += x;
    out.data[0] = s;
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io](Graph& g) {
            g.ensure_grad(ia);
            double gv = g.nodes_[io].grad.data[0];
            for (auto& x : g.nodes_[ia].grad.data) x += gv;
        };
    }
    return V{idx};
}

V Graph::mean_all(V a) {
    int64_t n = val(a).numel();
    return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

V Graph::sumsq(V a) {
    const Tensor& ta = val(a);
    Tensor out({1});
    double s = 0.0;
    for (double x : ta.data) s += x * x;
    out.data[0] = s;
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io](Graph& g) {
            g.ensure_grad(ia);
            double gv = g.nodes_[io].grad.data[0];
            const Tensor& va = g.nodes_[ia].value;
            for (size_t i = 0; i < va.data.size(); ++i)
                g.nodes_[ia].grad.data[i] += 2.0 * gv * va.data[i];
        };
    }
    return V{idx};
}

V Graph::dot(V a, V b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require_same_shape(ta, tb, "dot");
    Tensor out({1});
    double s = 0.0;
    for (size_t i = 0; i < ta.data.size(); ++i) s += ta.data[i] * tb.data[i];
    out.data[0] = s;
    bool ng = needs_grad(a) || needs_grad(b);
    int ia = a.i, ib = b.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, ib, io](Graph& g) {
            double gv = g.nodes_[io].grad.data[0];
            if (g.nodes_[ia].needs_grad) {
                g.ensure_grad(ia);
                const Tensor& vb = g.nodes_[ib].value;
                for (size_t i = 0; i < vb.data.size(); ++i)
                    g.nodes_[ia].grad.data[i] += gv * vb.data[i];
            }
            if (g.nodes_[ib].needs_grad) {
                g.ensure_grad(ib);
                const Tensor& va = g.nodes_[ia].value;
                for (size_t i = 0; i < va.data.size(); ++i)
                    g.nodes_[ib].grad.data[i] += gv * va.data[i];
            }
        };
    }
    return V{idx};
}

V Graph::softmax_rows(V a) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 2) raise(ErrorCode::DimensionMismatch, "softmax_rows: expects 2-D");
    int rows = ta.dim(0), cols = ta.dim(1);
    Tensor out({rows, cols});
    for (int i = 0; i < rows; ++i) {
        double mx = -1e300;
        for (int j = 0; j < cols; ++j) mx = std::max(mx, ta.at2(i, j));
        double denom = 0.0;
        for (int j = 0; j < cols; ++j) {
            double e = std::exp(ta.at2(i, j) - mx);
            out.at2(i, j) = e;
            denom += e;
        }
        for (int j = 0; j < cols; ++j) out.at2(i, j) /= denom;
    }
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io, rows, cols](Graph& g) {
            g.ensure_grad(ia);
            const Tensor& go = g.nodes_[io].grad;
            const Tensor& y = g.nodes_[io].value;
            for (int i = 0; i < rows; ++i) {
                double dotv = 0.0;
                for (int j = 0; j < cols; ++j) dotv += go.at2(i, j) * y.at2(i, j);
                for (int j = 0; j < cols; ++j)
                    g.nodes_[ia].grad.at2(i, j) += y.at2(i, j) * (go.at2(i, j) - dotv);
            }
        };
    }
    return V{idx};
}

V Graph::layer_norm(V x, V gamma, V beta, double eps) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 2) raise(ErrorCode::DimensionMismatch, "layer_norm: expects 2-D");
    int rows = tx.dim(0), cols = tx.dim(1);
    if (val(gamma).numel() != cols || val(beta).numel() != cols)
        raise(ErrorCode::DimensionMismatch, "layer_norm: gamma/beta size");
    Tensor out({rows, cols});
    Tensor xhat({rows, cols});
    Tensor inv_std({rows});
    const Tensor& tg = val(gamma);
    const Tensor& tb = val(beta);
    for (int i = 0; i < rows; ++i) {
        double mean = 0.0;
        for (int j = 0; j < cols; ++j) mean += tx.at2(i, j);
        mean /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
            double d = tx.at2(i, j) - mean;
            var += d * d;
        }
        var /= cols;
        double istd = 1.0 / std::sqrt(var + eps);
        inv_std.data[i] = istd;
        for (int j = 0; j < cols; ++j) {
            double xh = (tx.at2(i, j) - mean) * istd;
            xhat.at2(i, j) = xh;
            out.at2(i, j) = tg.data[j] * xh + tb.data[j];
        }
    }
    bool ng = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
    int ix = x.i, ig = gamma.i, ibt = beta.i;
    // Save xhat/inv_std in an input node so backward can reuse them.
    int aux_xhat = push(std::move(xhat), false, nullptr);
    int aux_istd = push(std::move(inv_std), false, nullptr);
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ix, ig, ibt, io, aux_xhat, aux_istd, rows, cols](Graph& g) {
            const Tensor& go = g.nodes_[io].grad;
            const Tensor& xh = g.nodes_[aux_xhat].value;
            const Tensor& istd = g.nodes_[aux_istd].value;
            const Tensor& tg = g.nodes_[ig].value;
            if (g.nodes_[ig].needs_grad) {
                g.ensure_grad(ig);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                        g.nodes_[ig].grad.data[j] += go.at2(i, j) * xh.at2(i, j);
            }
            if (g.nodes_[ibt].needs_grad) {
                g.ensure_grad(ibt);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j) g.nodes_[ibt].grad.data[j] += go.at2(i, j);
            }
            if (g.nodes_[ix].needs_grad) {
                g.ensure_grad(ix);
                for (int i = 0; i < rows; ++i) {
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int j = 0; j < cols; ++j) {
                        double dxh = go.at2(i, j) * tg.data[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh.at2(i, j);
                    }
                    for (int j = 0; j < cols; ++j) {
                        double dxh = go.at2(i, j) * tg.data[j];
                        g.nodes_[ix].grad.at2(i, j) +=
                            istd.data[i] *
                            (dxh - sum_dxhat / cols - xh.at2(i, j) * sum_dxhat_xhat / cols);
                    }
                }
            }
        };
    }
    return V{idx};
}

V Graph::l2_normalize(V a, double eps) {
    const Tensor& ta = val(a);
    int64_t n = ta.numel();
    double ss = 0.0;
    for (double x : ta.data) ss += x * x;
    double nrm = std::sqrt(ss + eps);
    Tensor out = ta;
    for (auto& x : out.data) x /= nrm;
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io, nrm, n](Graph& g) {
            g.ensure_grad(ia);
            const Tensor& go = g.nodes_[io].grad;
            const Tensor& y = g.nodes_[io].value;  // y = a / nrm
            double dotv = 0.0;
            for (int64_t i = 0; i < n; ++i) dotv += go.data[i] * y.data[i];
            for (int64_t i = 0; i < n; ++i)
                g.nodes_[ia].grad.data[i] += (go.data[i] - y.data[i] * dotv) / nrm;
        };
    }
    return V{idx};
}

V Graph::conv2d(V x, V w, V b, int stride, int pad) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    const Tensor& tb = val(b);
    if (tx.ndim() != 3 || tw.ndim() != 4)
        raise(ErrorCode::DimensionMismatch, "conv2d: expects CHW input and OIHW weight");
    int C = tx.dim(0), H = tx.dim(1), W = tx.dim(2);
    int O = tw.dim(0), I = tw.dim(1), KH = tw.dim(2), KW = tw.dim(3);
    if (I != C) raise(ErrorCode::DimensionMismatch, "conv2d: channel mismatch");
    if (tb.numel() != O) raise(ErrorCode::DimensionMismatch, "conv2d: bias size");
    int OH = (H + 2 * pad - KH) / stride + 1;
    int OW = (W + 2 * pad - KW) / stride + 1;
    Tensor out({O, OH, OW});
    for (int o = 0; o < O; ++o) {
        double* out_plane = &out.data[static_cast<size_t>(o) * OH * OW];
        for (int i = 0; i < OH * OW; ++i) out_plane[i] = tb.data[o];
        for (int c = 0; c < C; ++c) {
            const double* x_plane = &tx.data[static_cast<size_t>(c) * H * W];
            for (int ky = 0; ky < KH; ++ky) {
                for (int kx = 0; kx < KW; ++kx) {
                    double wv = tw.data[((static_cast<size_t>(o) * I + c) * KH + ky) * KW + kx];
                    if (wv == 0.0) continue;
                    for (int oy = 0; oy < OH; ++oy) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        double* out_row = out_plane + static_cast<size_t>(oy) * OW;
                        const double* x_row = x_plane + static_cast<size_t>(iy) * W;
                        int ox0 = 0, ox1 = OW;
                        while (ox0 < OW && ox0 * stride - pad + kx < 0) ++ox0;
                        while (ox1 > ox0 && (ox1 - 1) * stride - pad + kx >= W) --ox1;
                        int ix = ox0 * stride - pad + kx;
                        for (int ox = ox0; ox < ox1; ++ox, ix += stride)
                            out_row[ox] += wv * x_row[ix];
                    }
                }
            }
        }
    }
    bool ng = needs_grad(x) || needs_grad(w) || needs_grad(b);
    int ixn = x.i, iw = w.i, ib = b.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ixn, iw, ib, io, C, H, W, O, I, KH, KW, stride, pad](Graph& g) {
            const Tensor& go = g.nodes_[io].grad;
            const Tensor& vx = g.nodes_[ixn].value;
            const Tensor& vw = g.nodes_[iw].value;
            int OH = go.dim(1), OW = go.dim(2);
            bool gx = g.nodes_[ixn].needs_grad;
            bool gw = g.nodes_[iw].needs_grad;
            bool gb = g.nodes_[ib].needs_grad;
            if (gx) g.ensure_grad(ixn);
            if (gw) g.ensure_grad(iw);
            if (gb) g.ensure_grad(ib);
            for (int o = 0; o < O; ++o) {
                const double* go_plane = &go.data[static_cast<size_t>(o) * OH * OW];
                if (gb) {
                    double acc = 0.0;
                    for (int i = 0; i < OH * OW; ++i) acc += go_plane[i];
                    g.nodes_[ib].grad.data[o] += acc;
                }
                if (!gx && !gw) continue;
                for (int c = 0; c < C; ++c) {
                    const double* x_plane = &vx.data[static_cast<size_t>(c) * H * W];
                    double* gx_plane = gx ? &g.nodes_[ixn].grad.data[static_cast<size_t>(c) * H * W]
                                          : nullptr;
                    for (int ky = 0; ky < KH; ++ky) {
                        for (int kx = 0; kx < KW; ++kx) {
                            size_t wi = ((static_cast<size_t>(o) * I + c) * KH + ky) * KW + kx;
                            double wv = vw.data[wi];
                            double gw_acc = 0.0;
                            for (int oy = 0; oy < OH; ++oy) {
                                int iy = oy * stride - pad + ky;
                                if (iy < 0 || iy >= H) continue;
                                const double* go_row = go_plane + static_cast<size_t>(oy) * OW;
                                const double* x_row = x_plane + static_cast<size_t>(iy) * W;
                                double* gx_row =
                                    gx_plane ? gx_plane + static_cast<size_t>(iy) * W : nullptr;
                                int ox0 = 0, ox1 = OW;
                                while (ox0 < OW && ox0 * stride - pad + kx < 0) ++ox0;
                                while (ox1 > ox0 && (ox1 - 1) * stride - pad + kx >= W) --ox1;
                                int ix = ox0 * stride - pad + kx;
                                for (int ox = ox0; ox < ox1; ++ox, ix += stride) {
                                    double gv = go_row[ox];
                                    if (gx) gx_row[ix] += gv * wv;
                                    gw_acc += gv * x_row[ix];
                                }
                            }
                            if (gw) g.nodes_[iw].grad.data[wi] += gw_acc;
                        }
                    }
                }
            }
        };
    }
    return V{idx};
}

V Graph::group_norm(V x, V gamma, V beta, int groups, double eps) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 3) raise(ErrorCode::DimensionMismatch, "group_norm: expects CHW");
    int C = tx.dim(0), H = tx.dim(1), W = tx.dim(2);
    if (C % groups != 0) raise(ErrorCode::DimensionMismatch, "group_norm: C % groups != 0");
    if (val(gamma).numel() != C || val(beta).numel() != C)
        raise(ErrorCode::DimensionMismatch, "group_norm: gamma/beta size");
    int cpg = C / groups;
    int64_t gsize = static_cast<int64_t>(cpg) * H * W;
    Tensor out({C, H, W});
    Tensor xhat({C, H, W});
    Tensor istd_t({groups});
    const Tensor& tg = val(gamma);
    const Tensor& tb = val(beta);
    for (int gi = 0; gi < groups; ++gi) {
        double mean = 0.0;
        for (int c = gi * cpg; c < (gi + 1) * cpg; ++c)
            for (int i = 0; i < H * W; ++i) mean += tx.data[static_cast<size_t>(c) * H * W + i];
        mean /= static_cast<double>(gsize);
        double var = 0.0;
        for (int c = gi * cpg; c < (gi + 1) * cpg; ++c)
            for (int i = 0; i < H * W; ++i) {
                double d = tx.data[static_cast<size_t>(c) * H * W + i] - mean;
                var += d * d;
            }
        var /= static_cast<double>(gsize);
        double istd = 1.0 / std::sqrt(var + eps);
        istd_t.data[gi] = istd;
        for (int c = gi * cpg; c < (gi + 1) * cpg; ++c)
            for (int i = 0; i < H * W; ++i) {
                size_t off = static_cast<size_t>(c) * H * W + i;
                double xh = (tx.data[off] - mean) * istd;
                xhat.data[off] = xh;
                out.data[off] = tg.data[c] * xh + tb.data[c];
            }
    }
    bool ng = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
    int ix = x.i, ig = gamma.i, ibt = beta.i;
    int aux_xhat = push(std::move(xhat), false, nullptr);
    int aux_istd = push(std::move(istd_t), false, nullptr);
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ix, ig, ibt, io, aux_xhat, aux_istd, groups, cpg, H, W, gsize](Graph& g) {
            const Tensor& go = g.nodes_[io].grad;
            const Tensor& xh = g.nodes_[aux_xhat].value;
            const Tensor& istd = g.nodes_[aux_istd].value;
            const Tensor& tg = g.nodes_[ig].value;
            int hw = H * W;
            if (g.nodes_[ig].needs_grad) {
                g.ensure_grad(ig);
                for (int c = 0; c < groups * cpg; ++c)
                    for (int i = 0; i < hw; ++i)
                        g.nodes_[ig].grad.data[c] +=
                            go.data[static_cast<size_t>(c) * hw + i] * xh.data[static_cast<size_t>(c) * hw + i];
            }
            if (g.nodes_[ibt].needs_grad) {
                g.ensure_grad(ibt);
                for (int c = 0; c < groups * cpg; ++c)
                    for (int i = 0; i < hw; ++i)
                        g.nodes_[ibt].grad.data[c] += go.data[static_cast<size_t>(c) * hw + i];
            }
            if (g.nodes_[ix].needs_grad) {
                g.ensure_grad(ix);
                for (int gi = 0; gi < groups; ++gi) {
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (int c = gi * cpg; c < (gi + 1) * cpg; ++c)
                        for (int i = 0; i < hw; ++i) {
                            size_t off = static_cast<size_t>(c) * hw + i;
                            double dxh = go.data[off] * tg.data[c];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh.data[off];
                        }
                    double n = static_cast<double>(gsize);
                    for (int c = gi * cpg; c < (gi + 1) * cpg; ++c)
                        for (int i = 0; i < hw; ++i) {
                            size_t off = static_cast<size_t>(c) * hw + i;
                            double dxh = go.data[off] * tg.data[c];
                            g.nodes_[ix].grad.data[off] +=
                                istd.data[gi] * (dxh - sum_dxh / n - xh.data[off] * sum_dxh_xh / n);
                        }
                }
            }
        };
    }
    return V{idx};
}

V Graph::upsample2x(V x) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 3) raise(ErrorCode::DimensionMismatch, "upsample2x: expects CHW");
    int C = tx.dim(0), H = tx.dim(1), W = tx.dim(2);
    Tensor out({C, H * 2, W * 2});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H * 2; ++y)
            for (int xx = 0; xx < W * 2; ++xx)
                out.at3(c, y, xx) = tx.at3(c, y / 2, xx / 2);
    bool ng = needs_grad(x);
    int ix = x.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ix, io, C, H, W](Graph& g) {
            g.ensure_grad(ix);
            const Tensor& go = g.nodes_[io].grad;
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H * 2; ++y)
                    for (int xx = 0; xx < W * 2; ++xx)
                        g.nodes_[ix].grad.at3(c, y / 2, xx / 2) += go.at3(c, y, xx);
        };
    }
    return V{idx};
}

// Mean pool onto a fixed g x g grid. Cell boundaries are floor(i*H/g) with a
// 1-pixel minimum so the op stays defined for inputs smaller than the grid.
static void grid_cell(int i, int n, int g, int& lo, int& hi) {
    lo = static_cast<int>(static_cast<int64_t>(i) * n / g);
    hi = static_cast<int>(static_cast<int64_t>(i + 1) * n / g);
    if (hi <= lo) hi = lo + 1;
    if (lo >= n) lo = n - 1;
    if (hi > n) hi = n;
}

V Graph::grid_pool(V x, int g) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 3) raise(ErrorCode::DimensionMismatch, "grid_pool: expects CHW");
    int C = tx.dim(0), H = tx.dim(1), W = tx.dim(2);
    Tensor out({C, g, g});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < g; ++i)
            for (int j = 0; j < g; ++j) {
                int y0, y1, x0, x1;
                grid_cell(i, H, g, y0, y1);
                grid_cell(j, W, g, x0, x1);
                double acc = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int xx = x0; xx < x1; ++xx) acc += tx.at3(c, y, xx);
                out.at3(c, i, j) = acc / ((y1 - y0) * (x1 - x0));
            }
    bool ng = needs_grad(x);
    int ix = x.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        int gg = g;
        nodes_[idx].back = [ix, io, C, H, W, gg](Graph& g2) {
            g2.ensure_grad(ix);
            const Tensor& go = g2.nodes_[io].grad;
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < gg; ++i)
                    for (int j = 0; j < gg; ++j) {
                        int y0, y1, x0, x1;
                        grid_cell(i, H, gg, y0, y1);
                        grid_cell(j, W, gg, x0, x1);
                        double gv = go.at3(c, i, j) / ((y1 - y0) * (x1 - x0));
                        for (int y = y0; y < y1; ++y)
                            for (int xx = x0; xx < x1; ++xx)
                                g2.nodes_[ix].grad.at3(c, y, xx) += gv;
                    }
        };
    }
    return V{idx};
}

V Graph::chw_to_tokens(V x) {
    const Tensor& tx = val(x);
    if (tx.ndim() != 3) raise(ErrorCode::DimensionMismatch, "chw_to_tokens: expects CHW");
    int C = tx.dim(0), H = tx.dim(1), W = tx.dim(2);
    Tensor out({H * W, C});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H * W; ++i) out.at2(i, c) = tx.data[static_cast<size_t>(c) * H * W + i];
    bool ng = needs_grad(x);
    int ix = x.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ix, io, C, H, W](Graph& g) {
            g.ensure_grad(ix);
            const Tensor& go = g.nodes_[io].grad;
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H * W; ++i)
                    g.nodes_[ix].grad.data[static_cast<size_t>(c) * H * W + i] += go.at2(i, c);
        };
    }
    return V{idx};
}

V Graph::tokens_to_chw(V a, int c, int h, int w) {
    const Tensor& ta = val(a);
    if (ta.ndim() != 2 || ta.dim(0) != h * w || ta.dim(1) != c)
        raise(ErrorCode::DimensionMismatch, "tokens_to_chw: shape mismatch");
    Tensor out({c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h * w; ++i)
            out.data[static_cast<size_t>(ch) * h * w + i] = ta.at2(i, ch);
    bool ng = needs_grad(a);
    int ia = a.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, io, c, h, w](Graph& g) {
            g.ensure_grad(ia);
            const Tensor& go = g.nodes_[io].grad;
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < h * w; ++i)
                    g.nodes_[ia].grad.at2(i, ch) += go.data[static_cast<size_t>(ch) * h * w + i];
        };
    }
    return V{idx};
}

V Graph::add_chw_bias(V x, V b) {
    const Tensor& tx = val(x);
    const Tensor& tb = val(b);
    if (tx.ndim() != 3 || tb.numel() != tx.dim(0))
        raise(ErrorCode::DimensionMismatch, "add_chw_bias: bias size");
    int C = tx.dim(0), HW = tx.dim(1) * tx.dim(2);
    Tensor out = tx;
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < HW; ++i) out.data[static_cast<size_t>(c) * HW + i] += tb.data[c];
    bool ng = needs_grad(x) || needs_grad(b);
    int ix = x.i, ib = b.i;
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ix, ib, io, C, HW](Graph& g) {
            const Tensor& go = g.nodes_[io].grad;
            if (g.nodes_[ix].needs_grad) {
                g.ensure_grad(ix);
                for (size_t i = 0; i < go.data.size(); ++i) g.nodes_[ix].grad.data[i] += go.data[i];
            }
            if (g.nodes_[ib].needs_grad) {
                g.ensure_grad(ib);
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < HW; ++i)
                        g.nodes_[ib].grad.data[c] += go.data[static_cast<size_t>(c) * HW + i];
            }
        };
    }
    return V{idx};
}

V Graph::concat_channels(V a, V b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.ndim() != 3 || tb.ndim() != 3 || ta.dim(1) != tb.dim(1) || ta.dim(2) != tb.dim(2))
        raise(ErrorCode::DimensionMismatch, "concat_channels: spatial mismatch");
    int Ca = ta.dim(0), Cb = tb.dim(0), H = ta.dim(1), W = ta.dim(2);
    Tensor out({Ca + Cb, H, W});
    std::copy(ta.data.begin(), ta.data.end(), out.data.begin());
    std::copy(tb.data.begin(), tb.data.end(), out.data.begin() + ta.data.size());
    bool ng = needs_grad(a) || needs_grad(b);
    int ia = a.i, ib = b.i;
    size_t na = ta.data.size();
    int idx = push(std::move(out), ng, nullptr);
    if (ng) {
        int io = idx;
        nodes_[idx].back = [ia, ib, io, na](Graph& g) {
            const Tensor& go = g.nodes_[io].grad;
            if (g.nodes_[ia].needs_grad) {
                g.ensure_grad(ia);
                for (size_t i = 0; i < na; ++i) g.nodes_[ia].grad.data[i] += go.data[i];
            }
            if (g.nodes_[ib].needs_grad) {
                g.ensure_grad(ib);
                for (size_t i = na; i < go.data.size(); ++i)
                    g.nodes_[ib].grad.data[i - na] += go.data[i];
            }
        };
    }
    return V{idx};
}

void Graph::backward(V loss) {
    if (val(loss).numel() != 1) raise(ErrorCode::DimensionMismatch, "backward: loss must be scalar");
    ensure_grad(loss.i);
    nodes_[loss.i].grad.data[0] = 1.0;
    for (int i = loss.i; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.needs_grad || n.grad.data.empty()) continue;
        if (n.back) n.back(*this);
        if (n.bound && n.bound->trainable) {
            for (size_t k = 0; k < n.grad.data.size(); ++k) n.bound->grad.data[k] += n.grad.data[k];
        }
    }
}

void adam_update(const std::vector<ParamTensor*>& params, double lr, int64_t step, double beta1,
                 double beta2, double eps) {
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (ParamTensor* p : params) {
        if (!p->trainable) continue;
        if (p->adam_m.data.empty()) {
            p->adam_m = Tensor::zeros(p->value.shape);
            p->adam_v = Tensor::zeros(p->value.shape);
        }
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            double g = p->grad.data[i];
            p->adam_m.data[i] = beta1 * p->adam_m.data[i] + (1.0 - beta1) * g;
            p->adam_v.data[i] = beta2 * p->adam_v.data[i] + (1.0 - beta2) * g * g;
            double mhat = p->adam_m.data[i] / bc1;
            double vhat = p->adam_v.data[i] / bc2;
            p->value.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

void zero_gradients(const std::vector<ParamTensor*>& params) {
    for (ParamTensor* p : params) p->zero_grad();
}

uint32_t params_checksum(const std::vector<ParamTensor*>& params) {
    // CRC32 implemented locally to keep this module header-light; matches the
    // zlib polynomial.
    static uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            table[i] = c;
        }
        init = true;
    }
    uint32_t crc = 0xffffffffu;
    for (const ParamTensor* p : params) {
        const unsigned char* bytes = reinterpret_cast<const unsigned char*>(p->value.data.data());
        size_t len = p->value.data.size() * sizeof(double);
        for (size_t i = 0; i < len; ++i) crc = table[(crc ^ bytes[i]) & 0xff] ^ (crc >> 8);
    }
    return crc ^ 0xffffffffu;
}

GradCheckResult check_gradients(ParamTensor& p,
                                const std::function<double()>& loss_value,
                                const Tensor& analytic_grad,
                                int max_coords,
                                Rng& rng,
                                double h,
                                double rel_tol,
                                double abs_floor) {
    GradCheckResult res;
    int64_t n = p.value.numel();
    int coords = static_cast<int>(std::min<int64_t>(max_coords, n));
    std::vector<int64_t> picks;
    if (coords == n) {
        for (int64_t i = 0; i < n; ++i) picks.push_back(i);
    } else {
        for (int i = 0; i < coords; ++i) picks.push_back(static_cast<int64_t>(rng.uniform_int(n)));
    }
    for (int64_t ci : picks) {
        double orig = p.value.data[ci];
        double step = h * std::max(1.0, std::fabs(orig));
        p.value.data[ci] = orig + step;
        double lp = loss_value();
        p.value.data[ci] = orig - step;
        double lm = loss_value();
        p.value.data[ci] = orig;
        double fd = (lp - lm) / (2.0 * step);
        double an = analytic_grad.data[ci];
        double denom = std::max({std::fabs(fd), std::fabs(an), abs_floor});
        double rel = std::fabs(fd - an) / denom;
        if (std::fabs(fd - an) <= abs_floor) rel = 0.0;
        res.checked++;
        if (rel < rel_tol) res.passed++;
        res.worst_rel_err = std::max(res.worst_rel_err, rel);
    }
    return res;
}

}  // namespace portrait
