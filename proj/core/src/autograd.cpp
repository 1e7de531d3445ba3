#include "cloak/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "cloak/errors.hpp"

namespace cloak::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

using BackwardFn = std::function<void(Node&)>;

template <class Inputs>
Var make_result_from(Tensor value, const Inputs& inputs, BackwardFn fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        bool any = false;
        for (const Var* in : inputs)
            if (in->defined() && in->requires_grad()) any = true;
        if (any) {
            node->requires_grad = true;
            for (const Var* in : inputs) node->parents.push_back(in->defined() ? in->node() : nullptr);
            node->backward = std::move(fn);
        }
    }
    return Var(std::move(node));
}

Var make_result(Tensor value, std::initializer_list<const Var*> inputs, BackwardFn fn) {
    return make_result_from(std::move(value), inputs, std::move(fn));
}

bool wants(const Node& self, std::size_t i) {
    return i < self.parents.size() && self.parents[i] && self.parents[i]->requires_grad;
}

Tensor& pgrad(Node& self, std::size_t i) { return self.parents[i]->grad_buffer(); }

void require(bool cond, const std::string& msg) {
    if (!cond) throw ArgumentError(msg);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape())
        throw ArgumentError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// col[(c*k + ki)*k + kj, oh*Wo + ow] for one image.
void im2col(const double* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, double* col) {
    const int P = Ho * Wo;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                double* row = col + static_cast<std::size_t>((c * k + ki) * k + kj) * P;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    double* out = row + oh * Wo;
                    if (ih < 0 || ih >= H) {
                        std::fill(out, out + Wo, 0.0);
                        continue;
                    }
                    const double* src = x + (static_cast<std::size_t>(c) * H + ih) * W;
                    if (stride == 1) {
                        // Valid output columns form one contiguous run.
                        const int lo = std::clamp(pad - kj, 0, Wo);
                        const int hi = std::clamp(W + pad - kj, lo, Wo);
                        std::fill(out, out + lo, 0.0);
                        std::copy(src + lo - pad + kj, src + hi - pad + kj, out + lo);
                        std::fill(out + hi, out + Wo, 0.0);
                        continue;
                    }
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        out[ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0;
                    }
                }
            }
}

void col2im(const double* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, double* dx) {
    const int P = Ho * Wo;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                const double* row = col + static_cast<std::size_t>((c * k + ki) * k + kj) * P;
                for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    double* dst = dx + (static_cast<std::size_t>(c) * H + ih) * W;
                    const double* in = row + oh * Wo;
                    if (stride == 1) {
                        const int lo = std::clamp(pad - kj, 0, Wo);
                        const int hi = std::clamp(W + pad - kj, lo, Wo);
                        double* d = dst - pad + kj;
                        for (int ow = lo; ow < hi; ++ow) d[ow] += in[ow];
                        continue;
                    }
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < W) dst[iw] += in[ow];
                    }
                }
            }
}

}  // namespace

Tensor& Node::grad_buffer() {
    if (grad.empty() && value.numel() > 0) grad = Tensor(value.shape());
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

double Var::item() const {
    if (value().numel() != 1) throw ArgumentError("item() on non-scalar " + shape_str(shape()));
    return value()[0];
}

void Var::set_requires_grad(bool on) {
    if (!node_) return;
    if (!node_->is_leaf()) throw InternalError("requires_grad can only be changed on leaf variables");
    node_->requires_grad = on;
}

Tensor Var::grad() const {
    if (!node_) return {};
    if (node_->grad.empty()) return Tensor(node_->value.shape());
    return node_->grad;
}

void Var::zero_grad() {
    if (node_) node_->grad = Tensor();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
    if (root.value().numel() != 1) throw ArgumentError("backward() without seed needs a scalar root");
    backward(root, Tensor(root.shape(), 1.0));
}

void backward(const Var& root, const Tensor& seed) {
    if (!root.defined() || !root.requires_grad()) return;
    if (seed.shape() != root.shape()) throw ArgumentError("backward seed shape mismatch");

    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p && p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order)
        if (!n->is_leaf()) n->grad = Tensor();
    root.node()->grad_buffer() += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->is_leaf() && !n->grad.empty()) n->backward(*n);
    }
}

Var constant(Tensor value) { return Var(std::move(value), false); }

Var detach(const Var& x) { return Var(x.value(), false); }

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    return make_result(a.value() + b.value(), {&a, &b}, [](Node& self) {
        if (wants(self, 0)) pgrad(self, 0) += self.grad;
        if (wants(self, 1)) pgrad(self, 1) += self.grad;
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    return make_result(a.value() - b.value(), {&a, &b}, [](Node& self) {
        if (wants(self, 0)) pgrad(self, 0) += self.grad;
        if (wants(self, 1)) pgrad(self, 1) -= self.grad;
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    return make_result(std::move(out), {&a, &b}, [](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        if (wants(self, 0)) {
            Tensor& g = pgrad(self, 0);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (wants(self, 1)) {
            Tensor& g = pgrad(self, 1);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

Var scale(const Var& a, double s) {
    return make_result(a.value() * s, {&a}, [s](Node& self) {
        Tensor& g = pgrad(self, 0);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s * self.grad[i];
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.values()) v += s;
    return make_result(std::move(out), {&a}, [](Node& self) { pgrad(self, 0) += self.grad; });
}

Var scale_samples(const Var& x, std::span<const double> s) {
    require(x.value().rank() >= 1 && static_cast<std::size_t>(x.value().dim(0)) == s.size(),
            "scale_samples: factor count does not match batch");
    const std::size_t per = s.empty() ? 0 : x.value().numel() / s.size();
    Tensor out = x.value();
    for (std::size_t n = 0; n < s.size(); ++n)
        for (std::size_t i = 0; i < per; ++i) out[n * per + i] *= s[n];
    std::vector<double> factors(s.begin(), s.end());
    return make_result(std::move(out), {&x}, [factors, per](Node& self) {
        Tensor& g = pgrad(self, 0);
        for (std::size_t n = 0; n < factors.size(); ++n)
            for (std::size_t i = 0; i < per; ++i) g[n * per + i] += factors[n] * self.grad[n * per + i];
    });
}

Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return make_result(std::move(out), {&x}, [](Node& self) {
        Tensor& g = pgrad(self, 0);
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

Var sum(const Var& x) {
    return make_result(Tensor({1}, x.value().sum()), {&x}, [](Node& self) {
        Tensor& g = pgrad(self, 0);
        const double d = self.grad[0];
        for (double& v : g.values()) v += d;
    });
}

Var mean(const Var& x) {
    const double n = static_cast<double>(std::max<std::size_t>(1, x.value().numel()));
    return make_result(Tensor({1}, x.value().sum() / n), {&x}, [n](Node& self) {
        Tensor& g = pgrad(self, 0);
        const double d = self.grad[0] / n;
        for (double& v : g.values()) v += d;
    });
}

Var mse(const Var& a, const Var& b) {
    require_same_shape(a, b, "mse");
    const std::size_t n = a.value().numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.value()[i] - b.value()[i];
        acc += d * d;
    }
    const double denom = static_cast<double>(std::max<std::size_t>(1, n));
    return make_result(Tensor({1}, acc / denom), {&a, &b}, [denom](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        const double c = 2.0 * self.grad[0] / denom;
        if (wants(self, 0)) {
            Tensor& g = pgrad(self, 0);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += c * (av[i] - bv[i]);
        }
        if (wants(self, 1)) {
            Tensor& g = pgrad(self, 1);
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= c * (av[i] - bv[i]);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    require(wv.rank() == 2, "linear: weight must be 2-D");
    const int in = wv.dim(1);
    const int out = wv.dim(0);
    require(xv.rank() >= 1 && xv.dim(-1) == in,
            "linear: input " + shape_str(xv.shape()) + " incompatible with weight " + shape_str(wv.shape()));
    if (b.defined()) require(b.value().numel() == static_cast<std::size_t>(out), "linear: bias size mismatch");
    const int rows = static_cast<int>(xv.numel() / in);
    Shape oshape = xv.shape();
    oshape.back() = out;
    Tensor y(oshape);
    MapMat ym(y.data(), rows, out);
    ym.noalias() = CMapMat(xv.data(), rows, in) * CMapMat(wv.data(), out, in).transpose();
    if (b.defined()) ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), out);
    return make_result(std::move(y), {&x, &w, &b}, [rows, in, out](Node& self) {
        CMapMat dy(self.grad.data(), rows, out);
        if (wants(self, 0)) {
            MapMat(pgrad(self, 0).data(), rows, in).noalias() += dy * CMapMat(self.parents[1]->value.data(), out, in);
        }
        if (wants(self, 1)) {
            MapMat(pgrad(self, 1).data(), out, in).noalias() +=
                dy.transpose() * CMapMat(self.parents[0]->value.data(), rows, in);
        }
        if (wants(self, 2)) {
            Eigen::Map<Eigen::RowVectorXd>(pgrad(self, 2).data(), out) += dy.colwise().sum();
        }
    });
}

Var matmul(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
            "matmul: incompatible shapes " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    const int M = av.dim(0), K = av.dim(1), N = bv.dim(1);
    Tensor y({M, N});
    MapMat(y.data(), M, N).noalias() = CMapMat(av.data(), M, K) * CMapMat(bv.data(), K, N);
    return make_result(std::move(y), {&a, &b}, [M, K, N](Node& self) {
        CMapMat dy(self.grad.data(), M, N);
        if (wants(self, 0))
            MapMat(pgrad(self, 0).data(), M, K).noalias() += dy * CMapMat(self.parents[1]->value.data(), K, N).transpose();
        if (wants(self, 1))
            MapMat(pgrad(self, 1).data(), K, N).noalias() += CMapMat(self.parents[0]->value.data(), M, K).transpose() * dy;
    });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    require(xv.rank() == 4 && wv.rank() == 4, "conv2d: expects NCHW input and OIHW weight");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Co = wv.dim(0), k = wv.dim(2);
    require(wv.dim(1) == C && wv.dim(3) == k,
            "conv2d: weight " + shape_str(wv.shape()) + " incompatible with input " + shape_str(xv.shape()));
    require(stride >= 1 && pad >= 0, "conv2d: invalid stride/pad");
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    require(Ho > 0 && Wo > 0, "conv2d: output would be empty");
    const int K = C * k * k;
    const int P = Ho * Wo;
    const bool pointwise = (k == 1 && stride == 1 && pad == 0);

    Tensor y({N, Co, Ho, Wo});
    std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(K) * P);
    CMapMat wm(wv.data(), Co, K);
    for (int n = 0; n < N; ++n) {
        const double* xn = xv.data() + static_cast<std::size_t>(n) * C * H * W;
        const double* src = xn;
        if (!pointwise) {
            im2col(xn, C, H, W, k, stride, pad, Ho, Wo, col.data());
            src = col.data();
        }
        MapMat yn(y.data() + static_cast<std::size_t>(n) * Co * P, Co, P);
        yn.noalias() = wm * CMapMat(src, K, P);
        if (b.defined()) yn.colwise() += Eigen::Map<const Eigen::VectorXd>(b.value().data(), Co);
    }
    return make_result(std::move(y), {&x, &w, &b}, [=](Node& self) {
        const Tensor& xval = self.parents[0]->value;
        const Tensor& wval = self.parents[1]->value;
        const bool need_x = wants(self, 0), need_w = wants(self, 1), need_b = wants(self, 2);
        std::vector<double> colbuf((pointwise || !need_w) ? 0 : static_cast<std::size_t>(K) * P);
        std::vector<double> dcol((pointwise || !need_x) ? 0 : static_cast<std::size_t>(K) * P);
        CMapMat wm2(wval.data(), Co, K);
        for (int n = 0; n < N; ++n) {
            CMapMat dy(self.grad.data() + static_cast<std::size_t>(n) * Co * P, Co, P);
            const double* xn = xval.data() + static_cast<std::size_t>(n) * C * H * W;
            if (need_w) {
                const double* src = xn;
                if (!pointwise) {
                    im2col(xn, C, H, W, k, stride, pad, Ho, Wo, colbuf.data());
                    src = colbuf.data();
                }
                MapMat(pgrad(self, 1).data(), Co, K).noalias() += dy * CMapMat(src, K, P).transpose();
            }
            if (need_b) Eigen::Map<Eigen::VectorXd>(pgrad(self, 2).data(), Co) += dy.rowwise().sum();
            if (need_x) {
                double* dxn = pgrad(self, 0).data() + static_cast<std::size_t>(n) * C * H * W;
                if (pointwise) {
                    MapMat(dxn, K, P).noalias() += wm2.transpose() * dy;
                } else {
                    MapMat(dcol.data(), K, P).noalias() = wm2.transpose() * dy;
                    col2im(dcol.data(), C, H, W, k, stride, pad, Ho, Wo, dxn);
                }
            }
        }
    });
}

Var avg_pool2(const Var& x) {
    const Tensor& xv = x.value();
    require(xv.rank() == 4 && xv.dim(2) % 2 == 0 && xv.dim(3) % 2 == 0, "avg_pool2: needs NCHW with even H, W");
    const int NC = xv.dim(0) * xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Ho = H / 2, Wo = W / 2;
    Tensor y({xv.dim(0), xv.dim(1), Ho, Wo});
    for (int p = 0; p < NC; ++p)
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
                const double* s = xv.data() + (static_cast<std::size_t>(p) * H + 2 * i) * W + 2 * j;
                y[(static_cast<std::size_t>(p) * Ho + i) * Wo + j] = 0.25 * (s[0] + s[1] + s[W] + s[W + 1]);
            }
    return make_result(std::move(y), {&x}, [NC, H, W, Ho, Wo](Node& self) {
        Tensor& g = pgrad(self, 0);
        for (int p = 0; p < NC; ++p)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j) {
                    const double d = 0.25 * self.grad[(static_cast<std::size_t>(p) * Ho + i) * Wo + j];
                    double* s = g.data() + (static_cast<std::size_t>(p) * H + 2 * i) * W + 2 * j;
                    s[0] += d;
                    s[1] += d;
                    s[W] += d;
                    s[W + 1] += d;
                }
    });
}

Var upsample_nearest2(const Var& x) {
    const Tensor& xv = x.value();
    require(xv.rank() == 4, "upsample_nearest2: needs NCHW");
    const int NC = xv.dim(0) * xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Ho = 2 * H, Wo = 2 * W;
    Tensor y({xv.dim(0), xv.dim(1), Ho, Wo});
    for (int p = 0; p < NC; ++p)
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j)
                y[(static_cast<std::size_t>(p) * Ho + i) * Wo + j] = xv[(static_cast<std::size_t>(p) * H + i / 2) * W + j / 2];
    return make_result(std::move(y), {&x}, [NC, H, W, Ho, Wo](Node& self) {
        Tensor& g = pgrad(self, 0);
        for (int p = 0; p < NC; ++p)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j)
                    g[(static_cast<std::size_t>(p) * H + i / 2) * W + j / 2] +=
                        self.grad[(static_cast<std::size_t>(p) * Ho + i) * Wo + j];
    });
}

Var concat_channels(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require(av.rank() == 4 && bv.rank() == 4 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) &&
                av.dim(3) == bv.dim(3),
            "concat_channels: incompatible shapes");
    const int N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1);
    const std::size_t hw = static_cast<std::size_t>(av.dim(2)) * av.dim(3);
    Tensor y({N, Ca + Cb, av.dim(2), av.dim(3)});
    for (int n = 0; n < N; ++n) {
        std::copy_n(av.data() + n * Ca * hw, Ca * hw, y.data() + n * (Ca + Cb) * hw);
        std::copy_n(bv.data() + n * Cb * hw, Cb * hw, y.data() + (n * (Ca + Cb) + Ca) * hw);
    }
    return make_result(std::move(y), {&a, &b}, [N, Ca, Cb, hw](Node& self) {
        for (int n = 0; n < N; ++n) {
            const double* g = self.grad.data() + n * (Ca + Cb) * hw;
            if (wants(self, 0)) {
                double* d = pgrad(self, 0).data() + n * Ca * hw;
                for (std::size_t i = 0; i < Ca * hw; ++i) d[i] += g[i];
            }
            if (wants(self, 1)) {
                double* d = pgrad(self, 1).data() + n * Cb * hw;
                for (std::size_t i = 0; i < Cb * hw; ++i) d[i] += g[Ca * hw + i];
            }
        }
    });
}

Var add_channel_embedding(const Var& x, const Var& e) {
    const Tensor& xv = x.value();
    const Tensor& ev = e.value();
    require(xv.rank() == 4 && ev.rank() == 2 && ev.dim(0) == xv.dim(0) && ev.dim(1) == xv.dim(1),
            "add_channel_embedding: expects x[N,C,H,W] and e[N,C]");
    const std::size_t NC = static_cast<std::size_t>(xv.dim(0)) * xv.dim(1);
    const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    Tensor y = xv;
    for (std::size_t p = 0; p < NC; ++p)
        for (std::size_t i = 0; i < hw; ++i) y[p * hw + i] += ev[p];
    return make_result(std::move(y), {&x, &e}, [NC, hw](Node& self) {
        if (wants(self, 0)) pgrad(self, 0) += self.grad;
        if (wants(self, 1)) {
            Tensor& g = pgrad(self, 1);
            for (std::size_t p = 0; p < NC; ++p) {
                double s = 0.0;
                for (std::size_t i = 0; i < hw; ++i) s += self.grad[p * hw + i];
                g[p] += s;
            }
        }
    });
}

namespace {

// Shared normalisation kernel. Data is viewed as `outer` groups of `inner`
// contiguous elements; `channel_of(o, i)` maps an element to its affine
// parameter index.
template <typename ChannelOf>
Var normalize_groups(const Var& x, const Var& gamma, const Var& beta, std::size_t outer, std::size_t inner,
                     double eps, ChannelOf channel_of) {
    const Tensor& xv = x.value();
    Tensor y(xv.shape());
    Tensor xhat(xv.shape());
    std::vector<double> inv(outer);
    for (std::size_t o = 0; o < outer; ++o) {
        const double* xs = xv.data() + o * inner;
        double mu = 0.0;
        for (std::size_t i = 0; i < inner; ++i) mu += xs[i];
        mu /= static_cast<double>(inner);
        double var = 0.0;
        for (std::size_t i = 0; i < inner; ++i) var += (xs[i] - mu) * (xs[i] - mu);
        var /= static_cast<double>(inner);
        inv[o] = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < inner; ++i) {
            const double h = (xs[i] - mu) * inv[o];
            const int c = channel_of(o, i);
            xhat[o * inner + i] = h;
            y[o * inner + i] = gamma.value()[c] * h + beta.value()[c];
        }
    }
    return make_result(std::move(y), {&x, &gamma, &beta},
                       [xhat = std::move(xhat), inv = std::move(inv), outer, inner, channel_of](Node& self) {
                           const Tensor& gam = self.parents[1]->value;
                           const bool need_x = wants(self, 0), need_g = wants(self, 1), need_b = wants(self, 2);
                           std::vector<double> dxhat(inner);
                           for (std::size_t o = 0; o < outer; ++o) {
                               const double* dy = self.grad.data() + o * inner;
                               const double* h = xhat.data() + o * inner;
                               double s1 = 0.0, s2 = 0.0;
                               for (std::size_t i = 0; i < inner; ++i) {
                                   const int c = channel_of(o, i);
                                   if (need_g) pgrad(self, 1)[c] += dy[i] * h[i];
                                   if (need_b) pgrad(self, 2)[c] += dy[i];
                                   dxhat[i] = dy[i] * gam[c];
                                   s1 += dxhat[i];
                                   s2 += dxhat[i] * h[i];
                               }
                               if (!need_x) continue;
                               double* dx = pgrad(self, 0).data() + o * inner;
                               const double m = static_cast<double>(inner);
                               for (std::size_t i = 0; i < inner; ++i)
                                   dx[i] += inv[o] / m * (m * dxhat[i] - s1 - h[i] * s2);
                           }
                       });
}

}  // namespace

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    const Tensor& xv = x.value();
    require(xv.rank() == 4, "group_norm: needs NCHW");
    const int N = xv.dim(0), C = xv.dim(1);
    require(groups >= 1 && C % groups == 0, "group_norm: channels not divisible by groups");
    require(gamma.value().numel() == static_cast<std::size_t>(C) && beta.value().numel() == static_cast<std::size_t>(C),
            "group_norm: affine parameter size mismatch");
    const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    const int cpg = C / groups;
    const std::size_t inner = cpg * hw;
    return normalize_groups(x, gamma, beta, static_cast<std::size_t>(N) * groups, inner, eps,
                            [groups, cpg, hw](std::size_t o, std::size_t i) {
                                return static_cast<int>(o % groups) * cpg + static_cast<int>(i / hw);
                            });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Tensor& xv = x.value();
    const int C = xv.dim(-1);
    require(gamma.value().numel() == static_cast<std::size_t>(C) && beta.value().numel() == static_cast<std::size_t>(C),
            "layer_norm: affine parameter size mismatch");
    return normalize_groups(x, gamma, beta, xv.numel() / C, static_cast<std::size_t>(C), eps,
                            [](std::size_t, std::size_t i) { return static_cast<int>(i); });
}

Var silu(const Var& x) {
    using Arr = Eigen::Array<double, Eigen::Dynamic, 1>;
    const Eigen::Index n = static_cast<Eigen::Index>(x.value().numel());
    Tensor y(x.shape());
    Eigen::Map<const Arr> xv(x.value().data(), n);
    Eigen::Map<Arr>(y.data(), n) = xv / (1.0 + (-xv).exp());
    return make_result(std::move(y), {&x}, [n](Node& self) {
        Eigen::Map<const Arr> xs(self.parents[0]->value.data(), n);
        Eigen::Map<const Arr> dy(self.grad.data(), n);
        const Arr s = 1.0 / (1.0 + (-xs).exp());
        Eigen::Map<Arr>(pgrad(self, 0).data(), n) += dy * s * (1.0 + xs * (1.0 - s));
    });
}

Var to_tokens(const Var& x) {
    const Tensor& xv = x.value();
    require(xv.rank() == 4, "to_tokens: needs NCHW");
    const int N = xv.dim(0), C = xv.dim(1);
    const int hw = xv.dim(2) * xv.dim(3);
    Tensor y({N, hw, C});
    for (int n = 0; n < N; ++n)
        MapMat(y.data() + static_cast<std::size_t>(n) * hw * C, hw, C) =
            CMapMat(xv.data() + static_cast<std::size_t>(n) * C * hw, C, hw).transpose();
    return make_result(std::move(y), {&x}, [N, C, hw](Node& self) {
        Tensor& g = pgrad(self, 0);
        for (int n = 0; n < N; ++n)
            MapMat(g.data() + static_cast<std::size_t>(n) * C * hw, C, hw) +=
                CMapMat(self.grad.data() + static_cast<std::size_t>(n) * hw * C, hw, C).transpose();
    });
}

Var from_tokens(const Var& x, int height, int width) {
    const Tensor& xv = x.value();
    require(xv.rank() == 3 && xv.dim(1) == height * width, "from_tokens: token count does not match spatial size");
    const int N = xv.dim(0), C = xv.dim(2);
    const int hw = height * width;
    Tensor y({N, C, height, width});
    for (int n = 0; n < N; ++n)
        MapMat(y.data() + static_cast<std::size_t>(n) * C * hw, C, hw) =
            CMapMat(xv.data() + static_cast<std::size_t>(n) * hw * C, hw, C).transpose();
    return make_result(std::move(y), {&x}, [N, C, hw](Node& self) {
        Tensor& g = pgrad(self, 0);
        for (int n = 0; n < N; ++n)
            MapMat(g.data() + static_cast<std::size_t>(n) * hw * C, hw, C) +=
                CMapMat(self.grad.data() + static_cast<std::size_t>(n) * C * hw, C, hw).transpose();
    });
}

Var repeat_batch(const Var& x, int n) {
    const Tensor& xv = x.value();
    require(n >= 1, "repeat_batch: n must be positive");
    Shape s = xv.shape();
    s.insert(s.begin(), n);
    Tensor y(s);
    const std::size_t per = xv.numel();
    for (int i = 0; i < n; ++i) std::copy_n(xv.data(), per, y.data() + i * per);
    return make_result(std::move(y), {&x}, [n, per](Node& self) {
        Tensor& g = pgrad(self, 0);
        for (int i = 0; i < n; ++i)
            for (std::size_t j = 0; j < per; ++j) g[j] += self.grad[i * per + j];
    });
}

Var stack(std::span<const Var> xs) {
    require(!xs.empty(), "stack: no inputs");
    const Shape& s0 = xs[0].shape();
    std::vector<const Var*> inputs;
    for (const Var& x : xs) {
        require(x.shape() == s0, "stack: shape mismatch");
        inputs.push_back(&x);
    }
    Shape s = s0;
    s.insert(s.begin(), static_cast<int>(xs.size()));
    Tensor y(s);
    const std::size_t per = shape_numel(s0);
    for (std::size_t i = 0; i < xs.size(); ++i) std::copy_n(xs[i].value().data(), per, y.data() + i * per);
    return make_result_from(std::move(y), inputs, [per](Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            if (!wants(self, i)) continue;
            Tensor& g = pgrad(self, i);
            for (std::size_t j = 0; j < per; ++j) g[j] += self.grad[i * per + j];
        }
    });
}

Var attention(const Var& q, const Var& k, const Var& v, Tensor* probs_out) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    require(qv.rank() == 3 && kv.rank() == 3 && vv.rank() == 3, "attention: expects 3-D q, k, v");
    const int B = qv.dim(0), Lq = qv.dim(1), D = qv.dim(2);
    const int Lk = kv.dim(1), Dv = vv.dim(2);
    require(kv.dim(0) == B && vv.dim(0) == B && kv.dim(2) == D && vv.dim(1) == Lk,
            "attention: incompatible q/k/v shapes");
    const double sc = 1.0 / std::sqrt(static_cast<double>(D));
    Tensor probs({B, Lq, Lk});
    Tensor y({B, Lq, Dv});
    for (int b = 0; b < B; ++b) {
        CMapMat qb(qv.data() + static_cast<std::size_t>(b) * Lq * D, Lq, D);
        CMapMat kb(kv.data() + static_cast<std::size_t>(b) * Lk * D, Lk, D);
        CMapMat vb(vv.data() + static_cast<std::size_t>(b) * Lk * Dv, Lk, Dv);
        MapMat pb(probs.data() + static_cast<std::size_t>(b) * Lq * Lk, Lq, Lk);
        pb.noalias() = (qb * kb.transpose()) * sc;
        for (int i = 0; i < Lq; ++i) {
            const double m = pb.row(i).maxCoeff();
            pb.row(i) = (pb.row(i).array() - m).exp();
            pb.row(i) /= pb.row(i).sum();
        }
        MapMat(y.data() + static_cast<std::size_t>(b) * Lq * Dv, Lq, Dv).noalias() = pb * vb;
    }
    if (probs_out) *probs_out = probs;
    return make_result(std::move(y), {&q, &k, &v}, [probs = std::move(probs), B, Lq, Lk, D, Dv, sc](Node& self) {
        const Tensor& qv2 = self.parents[0]->value;
        const Tensor& kv2 = self.parents[1]->value;
        const Tensor& vv2 = self.parents[2]->value;
        RowMat dp(Lq, Lk);
        for (int b = 0; b < B; ++b) {
            CMapMat dy(self.grad.data() + static_cast<std::size_t>(b) * Lq * Dv, Lq, Dv);
            CMapMat pb(probs.data() + static_cast<std::size_t>(b) * Lq * Lk, Lq, Lk);
            CMapMat vb(vv2.data() + static_cast<std::size_t>(b) * Lk * Dv, Lk, Dv);
            if (wants(self, 2))
                MapMat(pgrad(self, 2).data() + static_cast<std::size_t>(b) * Lk * Dv, Lk, Dv).noalias() +=
                    pb.transpose() * dy;
            if (!wants(self, 0) && !wants(self, 1)) continue;
            dp.noalias() = dy * vb.transpose();
            for (int i = 0; i < Lq; ++i) {
                const double dot = dp.row(i).dot(pb.row(i));
                dp.row(i) = pb.row(i).array() * (dp.row(i).array() - dot);
            }
            dp *= sc;
            CMapMat qb(qv2.data() + static_cast<std::size_t>(b) * Lq * D, Lq, D);
            CMapMat kb(kv2.data() + static_cast<std::size_t>(b) * Lk * D, Lk, D);
            if (wants(self, 0))
                MapMat(pgrad(self, 0).data() + static_cast<std::size_t>(b) * Lq * D, Lq, D).noalias() += dp * kb;
            if (wants(self, 1))
                MapMat(pgrad(self, 1).data() + static_cast<std::size_t>(b) * Lk * D, Lk, D).noalias() +=
                    dp.transpose() * qb;
        }
    });
}

Var cosine_similarity(const Var& a, const Var& b, int* degenerate) {
    require_same_shape(a, b, "cosine_similarity");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require(av.rank() >= 1 && av.dim(0) > 0, "cosine_similarity: needs a leading sample dimension");
    const int N = av.dim(0);
    const std::size_t per = av.numel() / N;
    std::vector<double> na(N), nb(N), cs(N);
    std::vector<char> valid(N);
    double total = 0.0;
    int bad = 0;
    for (int n = 0; n < N; ++n) {
        Eigen::Map<const Eigen::VectorXd> x(av.data() + n * per, per), y(bv.data() + n * per, per);
        na[n] = x.norm();
        nb[n] = y.norm();
        valid[n] = (na[n] > 1e-12 && nb[n] > 1e-12);
        if (!valid[n]) {
            ++bad;
            cs[n] = 0.0;
            continue;
        }
        cs[n] = x.dot(y) / (na[n] * nb[n]);
        total += cs[n];
    }
    if (degenerate) *degenerate = bad;
    return make_result(Tensor({1}, total / N), {&a, &b}, [=](Node& self) {
        const Tensor& av2 = self.parents[0]->value;
        const Tensor& bv2 = self.parents[1]->value;
        const double d = self.grad[0] / N;
        for (int n = 0; n < N; ++n) {
            if (!valid[n]) continue;
            Eigen::Map<const Eigen::VectorXd> x(av2.data() + n * per, per), y(bv2.data() + n * per, per);
            if (wants(self, 0))
                Eigen::Map<Eigen::VectorXd>(pgrad(self, 0).data() + n * per, per) +=
                    d * (y / (na[n] * nb[n]) - cs[n] * x / (na[n] * na[n]));
            if (wants(self, 1))
                Eigen::Map<Eigen::VectorXd>(pgrad(self, 1).data() + n * per, per) +=
                    d * (x / (na[n] * nb[n]) - cs[n] * y / (nb[n] * nb[n]));
        }
    });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
    const Tensor& lv = logits.value();
    require(lv.rank() == 2 && static_cast<std::size_t>(lv.dim(0)) == labels.size(), "cross_entropy: label count mismatch");
    const int N = lv.dim(0), K = lv.dim(1);
    Tensor soft(lv.shape());
    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
        require(labels[n] >= 0 && labels[n] < K, "cross_entropy: label out of range");
        const double* row = lv.data() + n * K;
        const double m = *std::max_element(row, row + K);
        double z = 0.0;
        for (int j = 0; j < K; ++j) z += std::exp(row[j] - m);
        for (int j = 0; j < K; ++j) soft[n * K + j] = std::exp(row[j] - m) / z;
        loss -= (row[labels[n]] - m - std::log(z));
    }
    std::vector<int> lab(labels.begin(), labels.end());
    return make_result(Tensor({1}, loss / N), {&logits}, [soft = std::move(soft), lab, N, K](Node& self) {
        Tensor& g = pgrad(self, 0);
        const double d = self.grad[0] / N;
        for (int n = 0; n < N; ++n)
            for (int j = 0; j < K; ++j) g[n * K + j] += d * (soft[n * K + j] - (j == lab[n] ? 1.0 : 0.0));
    });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
    const Tensor& tv = table.value();
    require(tv.rank() == 2, "gather_rows: table must be 2-D");
    const int V = tv.dim(0), d = tv.dim(1);
    const int L = static_cast<int>(ids.size());
    Tensor y({L, d});
    for (int i = 0; i < L; ++i) {
        require(ids[i] >= 0 && ids[i] < V, "gather_rows: id out of range");
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, y.data() + static_cast<std::size_t>(i) * d);
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return make_result(std::move(y), {&table}, [idv, d](Node& self) {
        Tensor& g = pgrad(self, 0);
        for (std::size_t i = 0; i < idv.size(); ++i)
            for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(idv[i]) * d + j] += self.grad[i * d + j];
    });
}

Var replace_rows(const Var& base, const Var& row, std::span<const int> positions) {
    const Tensor& bv = base.value();
    require(bv.rank() == 2 && row.value().numel() == static_cast<std::size_t>(bv.dim(1)),
            "replace_rows: row width mismatch");
    const int L = bv.dim(0), d = bv.dim(1);
    Tensor y = bv;
    std::vector<char> hit(L, 0);
    for (int p : positions) {
        require(p >= 0 && p < L, "replace_rows: position out of range");
        hit[p] = 1;
        std::copy_n(row.value().data(), d, y.data() + static_cast<std::size_t>(p) * d);
    }
    return make_result(std::move(y), {&base, &row}, [hit, L, d](Node& self) {
        for (int i = 0; i < L; ++i) {
            const double* g = self.grad.data() + static_cast<std::size_t>(i) * d;
            if (hit[i]) {
                if (wants(self, 1))
                    for (int j = 0; j < d; ++j) pgrad(self, 1)[j] += g[j];
            } else if (wants(self, 0)) {
                for (int j = 0; j < d; ++j) pgrad(self, 0)[static_cast<std::size_t>(i) * d + j] += g[j];
            }
        }
    });
}

}  // namespace cloak::ag
