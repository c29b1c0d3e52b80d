#include "shgvqa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "shgvqa/rng.hpp"

namespace shgvqa {

std::int64_t shape_size(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

struct Tensor::Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool grad_present = false;
    bool requires_grad = false;
    std::uint64_t tape_epoch = 0;  // epoch in which this tensor was produced by a recorded op
};

namespace {

struct TapeNode {
    Tensor out;
    std::function<void()> fn;
};

struct Tape {
    std::vector<TapeNode> nodes;
    std::uint64_t epoch = 1;
};

thread_local Tape g_tape;
thread_local bool g_grad_enabled = true;

void check_defined(const Tensor& t, const char* op) {
    if (!t.defined()) {
        throw std::invalid_argument(std::string(op) + ": undefined tensor");
    }
}

}  // namespace

struct TapeAccess {
    static void record(const Tensor& out, std::function<void()> fn) {
        out.impl_->tape_epoch = g_tape.epoch;
        g_tape.nodes.push_back(TapeNode{out, std::move(fn)});
    }
    static bool on_active_tape(const Tensor& t) {
        return t.impl_ && t.impl_->tape_epoch == g_tape.epoch;
    }
    static std::shared_ptr<Tensor::Impl> make_impl(Shape shape, std::vector<double> data, bool rg) {
        auto impl = std::make_shared<Tensor::Impl>();
        impl->shape = std::move(shape);
        impl->data = std::move(data);
        impl->requires_grad = rg;
        return impl;
    }
    static Tensor wrap(std::shared_ptr<Tensor::Impl> impl) { return Tensor(std::move(impl)); }
};

// ---- Tensor basics --------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = shape_size(shape);
    return from_data(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                     requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_size(shape);
    return from_data(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value),
                     requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    for (std::int64_t d : shape) {
        if (d <= 0) {
            throw std::invalid_argument("Tensor: non-positive dimension in shape " + shape_str(shape));
        }
    }
    if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
        throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match data length " +
                                    std::to_string(data.size()));
    }
    return TapeAccess::wrap(TapeAccess::make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    const auto n = shape_size(shape);
    std::vector<double> data(static_cast<std::size_t>(n));
    for (auto& v : data) {
        v = stddev * rng.normal();
    }
    return from_data(std::move(shape), std::move(data), requires_grad);
}

const Shape& Tensor::shape() const {
    check_defined(*this, "shape");
    return impl_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

std::int64_t Tensor::dim(int axis) const {
    const auto& s = shape();
    int r = static_cast<int>(s.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) {
        throw std::invalid_argument("Tensor::dim: axis out of range for shape " + shape_str(s));
    }
    return s[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::size() const {
    check_defined(*this, "size");
    return static_cast<std::int64_t>(impl_->data.size());
}

bool Tensor::requires_grad() const {
    check_defined(*this, "requires_grad");
    return impl_->requires_grad;
}

std::span<const double> Tensor::data() const {
    check_defined(*this, "data");
    return impl_->data;
}

std::span<double> Tensor::raw_data() {
    check_defined(*this, "raw_data");
    return impl_->data;
}

double Tensor::item() const {
    if (size() != 1) {
        throw std::invalid_argument("Tensor::item: tensor of shape " + shape_str(shape()) +
                                    " is not a scalar");
    }
    return impl_->data[0];
}

double Tensor::at(std::span<const std::int64_t> idx) const {
    const auto& s = shape();
    if (idx.size() != s.size()) {
        throw std::invalid_argument("Tensor::at: rank mismatch");
    }
    std::int64_t flat = 0;
    for (std::size_t k = 0; k < s.size(); ++k) {
        if (idx[k] < 0 || idx[k] >= s[k]) {
            throw std::out_of_range("Tensor::at: index out of bounds");
        }
        flat = flat * s[k] + idx[k];
    }
    return impl_->data[static_cast<std::size_t>(flat)];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    return at(std::span<const std::int64_t>(idx.begin(), idx.size()));
}

bool Tensor::has_grad() const {
    check_defined(*this, "has_grad");
    return impl_->grad_present;
}

std::span<const double> Tensor::grad() const {
    if (!has_grad()) {
        throw std::logic_error("Tensor::grad: gradient not populated");
    }
    return impl_->grad;
}

std::span<double> Tensor::raw_grad() {
    if (!has_grad()) {
        throw std::logic_error("Tensor::raw_grad: gradient not populated");
    }
    return impl_->grad;
}

void Tensor::ensure_grad() {
    check_defined(*this, "ensure_grad");
    if (!impl_->grad_present) {
        impl_->grad.assign(impl_->data.size(), 0.0);
        impl_->grad_present = true;
    }
}

void Tensor::zero_grad() {
    ensure_grad();
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::drop_grad() {
    check_defined(*this, "drop_grad");
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
    impl_->grad_present = false;
}

void Tensor::accumulate_grad(std::span<const double> g) {
    ensure_grad();
    if (g.size() != impl_->grad.size()) {
        throw std::invalid_argument("Tensor::accumulate_grad: size mismatch");
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
        impl_->grad[i] += g[i];
    }
}

const void* Tensor::id() const { return impl_.get(); }

// ---- autograd -------------------------------------------------------------

namespace autograd {

bool enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const Tensor& loss) {
    check_defined(loss, "backward");
    if (loss.size() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    shape_str(loss.shape()));
    }
    if (!TapeAccess::on_active_tape(loss)) {
        throw std::logic_error(
            "backward: loss is not on the active tape (backward already ran, or no forward was "
            "recorded)");
    }
    Tensor seed = loss;
    seed.ensure_grad();
    seed.raw_grad()[0] += 1.0;
    for (auto it = g_tape.nodes.rbegin(); it != g_tape.nodes.rend(); ++it) {
        if (it->out.has_grad()) {
            it->fn();
        }
    }
    g_tape.nodes.clear();
    g_tape.epoch++;
}

std::size_t tape_size() { return g_tape.nodes.size(); }

void clear_tape() {
    g_tape.nodes.clear();
    g_tape.epoch++;
}

}  // namespace autograd

namespace {

bool want_grad(std::initializer_list<const Tensor*> inputs) {
    if (!g_grad_enabled) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

Tensor make_output(Shape shape, std::vector<double> data, bool rg) {
    return Tensor::from_data(std::move(shape), std::move(data), rg);
}

// ---- matmul kernels (row-major) -------------------------------------------

// C[M,N] += A[M,K] * B[K,N]
void mm_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
            std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] += aip * brow[j];
            }
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
void mm_acc_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
               std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (std::int64_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::int64_t p = 0; p < k; ++p) {
                s += arow[p] * brow[p];
            }
            c[i * n + j] += s;
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
void mm_acc_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
               std::int64_t n) {
    for (std::int64_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::int64_t i = 0; i < m; ++i) {
            const double api = arow[i];
            double* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] += api * brow[j];
            }
        }
    }
}

struct BatchMap {
    Shape out_batch;
    std::int64_t batches = 1;
    // strides (in units of matrices) into a and b for each out batch dim
    std::vector<std::int64_t> a_strides, b_strides;

    std::pair<std::int64_t, std::int64_t> offsets(std::int64_t flat) const {
        std::int64_t ao = 0, bo = 0;
        for (std::int64_t d = static_cast<std::int64_t>(out_batch.size()) - 1; d >= 0; --d) {
            const std::int64_t coord = flat % out_batch[static_cast<std::size_t>(d)];
            flat /= out_batch[static_cast<std::size_t>(d)];
            ao += coord * a_strides[static_cast<std::size_t>(d)];
            bo += coord * b_strides[static_cast<std::size_t>(d)];
        }
        return {ao, bo};
    }
};

BatchMap broadcast_batches(const Shape& a, const Shape& b, const char* op) {
    const std::size_t ra = a.size() - 2, rb = b.size() - 2;
    const std::size_t r = std::max(ra, rb);
    BatchMap map;
    map.out_batch.assign(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        const std::int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
        const std::int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1) {
            throw std::invalid_argument(std::string(op) + ": batch dimensions not broadcastable: " +
                                        shape_str(a) + " vs " + shape_str(b));
        }
        map.out_batch[i] = std::max(da, db);
        map.batches *= map.out_batch[i];
    }
    // row-major strides over each input's own batch dims, zeroed where broadcast
    auto strides_for = [&](const Shape& s, std::size_t rs) {
        std::vector<std::int64_t> st(r, 0);
        std::int64_t acc = 1;
        for (std::size_t i = rs; i-- > 0;) {
            const std::size_t oi = i + (r - rs);
            if (s[i] != 1) {
                st[oi] = acc;
            }
            acc *= s[i];
        }
        return st;
    };
    map.a_strides = strides_for(a, ra);
    map.b_strides = strides_for(b, rb);
    return map;
}

}  // namespace

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    if (a.rank() < 2 || b.rank() < 2) {
        throw std::invalid_argument("matmul: operands must have rank >= 2, got " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::int64_t m = a.dim(-2), k = a.dim(-1);
    const std::int64_t kb = b.dim(-2), n = b.dim(-1);
    if (k != kb) {
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
    const BatchMap map = broadcast_batches(a.shape(), b.shape(), "matmul");
    Shape out_shape = map.out_batch;
    out_shape.push_back(m);
    out_shape.push_back(n);

    std::vector<double> out(static_cast<std::size_t>(map.batches * m * n), 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::int64_t bi = 0; bi < map.batches; ++bi) {
        const auto [ao, bo] = map.offsets(bi);
        mm_acc(ad + ao * m * k, bd + bo * k * n, out.data() + bi * m * n, m, k, n);
    }
    const bool rg = want_grad({&a, &b});
    Tensor result = make_output(std::move(out_shape), std::move(out), rg);
    if (rg) {
        Tensor ac = a, bc = b, rc = result;
        TapeAccess::record(result, [ac, bc, rc, map, m, k, n]() mutable {
            const auto go = rc.grad();
            if (ac.requires_grad()) {
                ac.ensure_grad();
                double* ga = ac.raw_grad().data();
                const double* bd2 = bc.data().data();
                for (std::int64_t bi = 0; bi < map.batches; ++bi) {
                    const auto [ao, bo] = map.offsets(bi);
                    // dA += dC * B^T
                    mm_acc_nt(go.data() + bi * m * n, bd2 + bo * k * n, ga + ao * m * k, m, n, k);
                }
            }
            if (bc.requires_grad()) {
                bc.ensure_grad();
                double* gb = bc.raw_grad().data();
                const double* ad2 = ac.data().data();
                for (std::int64_t bi = 0; bi < map.batches; ++bi) {
                    const auto [ao, bo] = map.offsets(bi);
                    // dB += A^T * dC
                    mm_acc_tn(ad2 + ao * m * k, go.data() + bi * m * n, gb + bo * k * n, k, m, n);
                }
            }
        });
    }
    return result;
}

Tensor transpose(const Tensor& x) {
    check_defined(x, "transpose");
    if (x.rank() != 2) {
        throw std::invalid_argument("transpose: expected rank 2, got " + shape_str(x.shape()));
    }
    const std::int64_t r = x.dim(0), c = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(r * c));
    const auto xd = x.data();
    for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
            out[static_cast<std::size_t>(j * r + i)] = xd[static_cast<std::size_t>(i * c + j)];
        }
    }
    const bool rg = want_grad({&x});
    Tensor result = make_output({c, r}, std::move(out), rg);
    if (rg) {
        Tensor xc = x, rc = result;
        TapeAccess::record(result, [xc, rc, r, c]() mutable {
            xc.ensure_grad();
            const auto go = rc.grad();
            auto gx = xc.raw_grad();
            for (std::int64_t j = 0; j < c; ++j) {
                for (std::int64_t i = 0; i < r; ++i) {
                    gx[static_cast<std::size_t>(i * c + j)] += go[static_cast<std::size_t>(j * r + i)];
                }
            }
        });
    }
    return result;
}

namespace {

// add/sub support: same shape, scalar b, or b a suffix of a's shape.
enum class BroadcastKind { same, scalar, suffix };

BroadcastKind broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return BroadcastKind::same;
    if (b.size() == 1 && b.rank() == 0) return BroadcastKind::scalar;
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (bs.size() < as.size() &&
        std::equal(bs.begin(), bs.end(), as.end() - static_cast<std::ptrdiff_t>(bs.size()))) {
        return BroadcastKind::suffix;
    }
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(as) + " and " +
                                shape_str(bs));
}

Tensor add_like(const Tensor& a, const Tensor& b, double sign, const char* op) {
    check_defined(a, op);
    check_defined(b, op);
    const BroadcastKind kind = broadcast_kind(a, b, op);
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(ad.begin(), ad.end());
    const std::int64_t bn = b.size();
    switch (kind) {
        case BroadcastKind::scalar: {
            const double v = sign * bd[0];
            for (auto& o : out) o += v;
            break;
        }
        default: {
            for (std::size_t i = 0; i < out.size(); ++i) {
                out[i] += sign * bd[i % static_cast<std::size_t>(bn)];
            }
            break;
        }
    }
    const bool rg = want_grad({&a, &b});
    Tensor result = make_output(a.shape(), std::move(out), rg);
    if (rg) {
        Tensor ac = a, bc = b, rc = result;
        TapeAccess::record(result, [ac, bc, rc, sign, bn]() mutable {
            const auto go = rc.grad();
            if (ac.requires_grad()) {
                ac.accumulate_grad(go);
            }
            if (bc.requires_grad()) {
                bc.ensure_grad();
                auto gb = bc.raw_grad();
                for (std::size_t i = 0; i < go.size(); ++i) {
                    gb[i % static_cast<std::size_t>(bn)] += sign * go[i];
                }
            }
        });
    }
    return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_like(a, b, 1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_like(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
    check_defined(a, "mul");
    check_defined(b, "mul");
    const bool scalar_b = b.size() == 1 && b.rank() == 0;
    if (!scalar_b && a.shape() != b.shape()) {
        throw std::invalid_argument("mul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    }
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ad[i] * (scalar_b ? bd[0] : bd[i]);
    }
    const bool rg = want_grad({&a, &b});
    Tensor result = make_output(a.shape(), std::move(out), rg);
    if (rg) {
        Tensor ac = a, bc = b, rc = result;
        TapeAccess::record(result, [ac, bc, rc, scalar_b]() mutable {
            const auto go = rc.grad();
            const auto ad2 = ac.data();
            const auto bd2 = bc.data();
            if (ac.requires_grad()) {
                ac.ensure_grad();
                auto ga = ac.raw_grad();
                for (std::size_t i = 0; i < go.size(); ++i) {
                    ga[i] += go[i] * (scalar_b ? bd2[0] : bd2[i]);
                }
            }
            if (bc.requires_grad()) {
                bc.ensure_grad();
                auto gb = bc.raw_grad();
                if (scalar_b) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < go.size(); ++i) s += go[i] * ad2[i];
                    gb[0] += s;
                } else {
                    for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ad2[i];
                }
            }
        });
    }
    return result;
}

Tensor scale(const Tensor& a, double c) {
    check_defined(a, "scale");
    const auto ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * c;
    const bool rg = want_grad({&a});
    Tensor result = make_output(a.shape(), std::move(out), rg);
    if (rg) {
        Tensor ac = a, rc = result;
        TapeAccess::record(result, [ac, rc, c]() mutable {
            ac.ensure_grad();
            const auto go = rc.grad();
            auto ga = ac.raw_grad();
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += c * go[i];
        });
    }
    return result;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor sum(const Tensor& a) {
    check_defined(a, "sum");
    double s = 0.0;
    for (double v : a.data()) s += v;
    const bool rg = want_grad({&a});
    Tensor result = Tensor::from_data({}, {s}, rg);
    if (rg) {
        Tensor ac = a, rc = result;
        TapeAccess::record(result, [ac, rc]() mutable {
            ac.ensure_grad();
            const double g = rc.grad()[0];
            auto ga = ac.raw_grad();
            for (auto& v : ga) v += g;
        });
    }
    return result;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor softmax(const Tensor& x, int axis) {
    check_defined(x, "softmax");
    const auto& s = x.shape();
    int r = x.rank();
    if (r == 0) {
        throw std::invalid_argument("softmax: rank-0 tensor has no axis");
    }
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) {
        throw std::invalid_argument("softmax: axis out of range for shape " + shape_str(s));
    }
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < r; ++i) inner *= s[static_cast<std::size_t>(i)];
    const std::int64_t n = s[static_cast<std::size_t>(axis)];

    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            double mx = -HUGE_VAL;
            for (std::int64_t i = 0; i < n; ++i) {
                mx = std::max(mx, xd[static_cast<std::size_t>(base + i * inner)]);
            }
            double z = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                const double e = std::exp(xd[static_cast<std::size_t>(base + i * inner)] - mx);
                out[static_cast<std::size_t>(base + i * inner)] = e;
                z += e;
            }
            for (std::int64_t i = 0; i < n; ++i) {
                out[static_cast<std::size_t>(base + i * inner)] /= z;
            }
        }
    }
    const bool rg = want_grad({&x});
    Tensor result = make_output(s, std::move(out), rg);
    if (rg) {
        Tensor xc = x, rc = result;
        TapeAccess::record(result, [xc, rc, outer, inner, n]() mutable {
            xc.ensure_grad();
            const auto go = rc.grad();
            const auto yd = rc.data();
            auto gx = xc.raw_grad();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (std::int64_t i = 0; i < n; ++i) {
                        const auto k = static_cast<std::size_t>(base + i * inner);
                        dot += go[k] * yd[k];
                    }
                    for (std::int64_t i = 0; i < n; ++i) {
                        const auto k = static_cast<std::size_t>(base + i * inner);
                        gx[k] += yd[k] * (go[k] - dot);
                    }
                }
            }
        });
    }
    return result;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
    check_defined(x, "gelu");
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = xd[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
    }
    const bool rg = want_grad({&x});
    Tensor result = make_output(x.shape(), std::move(out), rg);
    if (rg) {
        Tensor xc = x, rc = result;
        TapeAccess::record(result, [xc, rc]() mutable {
            xc.ensure_grad();
            const auto go = rc.grad();
            const auto xd2 = xc.data();
            auto gx = xc.raw_grad();
            for (std::size_t i = 0; i < go.size(); ++i) {
                const double v = xd2[i];
                const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
                const double d = 0.5 * (1.0 + t) +
                                 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
                gx[i] += go[i] * d;
            }
        });
    }
    return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    check_defined(x, "layer_norm");
    check_defined(gain, "layer_norm");
    check_defined(bias, "layer_norm");
    if (x.rank() == 0) {
        throw std::invalid_argument("layer_norm: rank-0 input");
    }
    const std::int64_t n = x.dim(-1);
    if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != n || bias.dim(0) != n) {
        throw std::invalid_argument("layer_norm: gain/bias must be rank-1 of length " +
                                    std::to_string(n) + ", got " + shape_str(gain.shape()) + " and " +
                                    shape_str(bias.shape()));
    }
    const std::int64_t rows_n = x.size() / n;
    const auto xd = x.data();
    const auto gd = gain.data();
    const auto bd = bias.data();
    std::vector<double> out(xd.size());
    std::vector<double> inv_std(static_cast<std::size_t>(rows_n));
    std::vector<double> xhat(xd.size());
    for (std::int64_t rix = 0; rix < rows_n; ++rix) {
        const double* row = xd.data() + rix * n;
        double mu = 0.0;
        for (std::int64_t i = 0; i < n; ++i) mu += row[i];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            const double d = row[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(rix)] = is;
        for (std::int64_t i = 0; i < n; ++i) {
            const double h = (row[i] - mu) * is;
            xhat[static_cast<std::size_t>(rix * n + i)] = h;
            out[static_cast<std::size_t>(rix * n + i)] = gd[static_cast<std::size_t>(i)] * h +
                                                          bd[static_cast<std::size_t>(i)];
        }
    }
    const bool rg = want_grad({&x, &gain, &bias});
    Tensor result = make_output(x.shape(), std::move(out), rg);
    if (rg) {
        Tensor xc = x, gc = gain, bc = bias, rc = result;
        auto xhat_sp = std::make_shared<std::vector<double>>(std::move(xhat));
        auto inv_sp = std::make_shared<std::vector<double>>(std::move(inv_std));
        TapeAccess::record(result, [xc, gc, bc, rc, xhat_sp, inv_sp, n, rows_n]() mutable {
            const auto go = rc.grad();
            const auto gd2 = gc.data();
            const auto& xh = *xhat_sp;
            const auto& is = *inv_sp;
            if (gc.requires_grad()) {
                gc.ensure_grad();
                auto gg = gc.raw_grad();
                for (std::int64_t rix = 0; rix < rows_n; ++rix) {
                    for (std::int64_t i = 0; i < n; ++i) {
                        gg[static_cast<std::size_t>(i)] +=
                            go[static_cast<std::size_t>(rix * n + i)] *
                            xh[static_cast<std::size_t>(rix * n + i)];
                    }
                }
            }
            if (bc.requires_grad()) {
                bc.ensure_grad();
                auto gb = bc.raw_grad();
                for (std::int64_t rix = 0; rix < rows_n; ++rix) {
                    for (std::int64_t i = 0; i < n; ++i) {
                        gb[static_cast<std::size_t>(i)] += go[static_cast<std::size_t>(rix * n + i)];
                    }
                }
            }
            if (xc.requires_grad()) {
                xc.ensure_grad();
                auto gx = xc.raw_grad();
                for (std::int64_t rix = 0; rix < rows_n; ++rix) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::int64_t i = 0; i < n; ++i) {
                        const auto k = static_cast<std::size_t>(rix * n + i);
                        const double dh = go[k] * gd2[static_cast<std::size_t>(i)];
                        m1 += dh;
                        m2 += dh * xh[k];
                    }
                    m1 /= static_cast<double>(n);
                    m2 /= static_cast<double>(n);
                    const double s = is[static_cast<std::size_t>(rix)];
                    for (std::int64_t i = 0; i < n; ++i) {
                        const auto k = static_cast<std::size_t>(rix * n + i);
                        const double dh = go[k] * gd2[static_cast<std::size_t>(i)];
                        gx[k] += s * (dh - m1 - xh[k] * m2);
                    }
                }
            }
        });
    }
    return result;
}

namespace {

Tensor cross_entropy_impl(const Tensor& logits, std::vector<std::int64_t> targets,
                          std::vector<double> weights) {
    const std::int64_t classes = logits.dim(-1);
    const std::int64_t n_rows = logits.size() / classes;
    if (static_cast<std::int64_t>(targets.size()) != n_rows) {
        throw std::invalid_argument("cross_entropy: expected " + std::to_string(n_rows) +
                                    " targets, got " + std::to_string(targets.size()));
    }
    for (std::int64_t t : targets) {
        if (t < 0 || t >= classes) {
            throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                                    " out of range for " + std::to_string(classes) + " classes");
        }
    }
    if (weights.empty()) {
        weights.assign(targets.size(), 1.0);
    } else if (weights.size() != targets.size()) {
        throw std::invalid_argument("cross_entropy: weights/targets length mismatch");
    }

    const auto xd = logits.data();
    std::vector<double> row_losses(static_cast<std::size_t>(n_rows));
    for (std::int64_t rix = 0; rix < n_rows; ++rix) {
        const double* row = xd.data() + rix * classes;
        double mx = -HUGE_VAL;
        for (std::int64_t i = 0; i < classes; ++i) mx = std::max(mx, row[i]);
        double z = 0.0;
        for (std::int64_t i = 0; i < classes; ++i) z += std::exp(row[i] - mx);
        const double lse = mx + std::log(z);
        row_losses[static_cast<std::size_t>(rix)] =
            weights[static_cast<std::size_t>(rix)] *
            (lse - row[targets[static_cast<std::size_t>(rix)]]);
    }
    // summed in sorted order so the value is bit-identical under row
    // permutations (set losses must not depend on slot order)
    std::sort(row_losses.begin(), row_losses.end());
    double total = 0.0;
    for (double v : row_losses) total += v;
    const bool rg = want_grad({&logits});
    Tensor result = Tensor::from_data({}, {total}, rg);
    if (rg) {
        Tensor xc = logits, rc = result;
        auto tg = std::make_shared<std::vector<std::int64_t>>(std::move(targets));
        auto wt = std::make_shared<std::vector<double>>(std::move(weights));
        TapeAccess::record(result, [xc, rc, tg, wt, classes, n_rows]() mutable {
            xc.ensure_grad();
            const double g = rc.grad()[0];
            const auto xd2 = xc.data();
            auto gx = xc.raw_grad();
            for (std::int64_t rix = 0; rix < n_rows; ++rix) {
                const double* row = xd2.data() + rix * classes;
                double mx = -HUGE_VAL;
                for (std::int64_t i = 0; i < classes; ++i) mx = std::max(mx, row[i]);
                double z = 0.0;
                for (std::int64_t i = 0; i < classes; ++i) z += std::exp(row[i] - mx);
                const double w = (*wt)[static_cast<std::size_t>(rix)] * g;
                for (std::int64_t i = 0; i < classes; ++i) {
                    const double p = std::exp(row[i] - mx) / z;
                    const double delta = i == (*tg)[static_cast<std::size_t>(rix)] ? 1.0 : 0.0;
                    gx[static_cast<std::size_t>(rix * classes + i)] += w * (p - delta);
                }
            }
        });
    }
    return result;
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::int64_t target) {
    check_defined(logits, "cross_entropy");
    if (logits.rank() != 1) {
        throw std::invalid_argument("cross_entropy: expected rank-1 logits, got " +
                                    shape_str(logits.shape()));
    }
    return cross_entropy_impl(logits, {target}, {});
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::int64_t> targets,
                          std::span<const double> weights) {
    check_defined(logits, "cross_entropy_rows");
    if (logits.rank() != 2) {
        throw std::invalid_argument("cross_entropy_rows: expected rank-2 logits, got " +
                                    shape_str(logits.shape()));
    }
    return cross_entropy_impl(logits, std::vector<std::int64_t>(targets.begin(), targets.end()),
                              std::vector<double>(weights.begin(), weights.end()));
}

Tensor rows(const Tensor& table, std::span<const std::int64_t> indices) {
    check_defined(table, "rows");
    if (table.rank() != 2) {
        throw std::invalid_argument("rows: expected rank-2 table, got " + shape_str(table.shape()));
    }
    const std::int64_t v = table.dim(0), d = table.dim(1);
    for (std::int64_t i : indices) {
        if (i < 0 || i >= v) {
            throw std::out_of_range("rows: index " + std::to_string(i) + " out of range for table of " +
                                    std::to_string(v) + " rows");
        }
    }
    const std::int64_t n = static_cast<std::int64_t>(indices.size());
    std::vector<double> out(static_cast<std::size_t>(n * d));
    const auto td = table.data();
    for (std::int64_t r = 0; r < n; ++r) {
        std::memcpy(out.data() + r * d, td.data() + indices[static_cast<std::size_t>(r)] * d,
                    static_cast<std::size_t>(d) * sizeof(double));
    }
    const bool rg = want_grad({&table});
    Tensor result = make_output({n, d}, std::move(out), rg);
    if (rg) {
        Tensor tc = table, rc = result;
        auto idx = std::make_shared<std::vector<std::int64_t>>(indices.begin(), indices.end());
        TapeAccess::record(result, [tc, rc, idx, d]() mutable {
            tc.ensure_grad();
            const auto go = rc.grad();
            auto gt = tc.raw_grad();
            for (std::size_t r = 0; r < idx->size(); ++r) {
                const std::int64_t src = static_cast<std::int64_t>(r) * d;
                const std::int64_t dst = (*idx)[r] * d;
                for (std::int64_t i = 0; i < d; ++i) {
                    gt[static_cast<std::size_t>(dst + i)] += go[static_cast<std::size_t>(src + i)];
                }
            }
        });
    }
    return result;
}

Tensor slice_rows(const Tensor& x, std::int64_t start, std::int64_t count) {
    check_defined(x, "slice_rows");
    if (x.rank() != 2) {
        throw std::invalid_argument("slice_rows: expected rank 2, got " + shape_str(x.shape()));
    }
    const std::int64_t r = x.dim(0), c = x.dim(1);
    if (start < 0 || count <= 0 || start + count > r) {
        throw std::out_of_range("slice_rows: range [" + std::to_string(start) + "," +
                                std::to_string(start + count) + ") out of bounds for " +
                                shape_str(x.shape()));
    }
    const auto xd = x.data();
    std::vector<double> out(xd.begin() + start * c, xd.begin() + (start + count) * c);
    const bool rg = want_grad({&x});
    Tensor result = make_output({count, c}, std::move(out), rg);
    if (rg) {
        Tensor xc = x, rc = result;
        TapeAccess::record(result, [xc, rc, start, c]() mutable {
            xc.ensure_grad();
            const auto go = rc.grad();
            auto gx = xc.raw_grad();
            for (std::size_t i = 0; i < go.size(); ++i) {
                gx[static_cast<std::size_t>(start * c) + i] += go[i];
            }
        });
    }
    return result;
}

Tensor slice_cols(const Tensor& x, std::int64_t start, std::int64_t count) {
    check_defined(x, "slice_cols");
    if (x.rank() != 2) {
        throw std::invalid_argument("slice_cols: expected rank 2, got " + shape_str(x.shape()));
    }
    const std::int64_t r = x.dim(0), c = x.dim(1);
    if (start < 0 || count <= 0 || start + count > c) {
        throw std::out_of_range("slice_cols: range [" + std::to_string(start) + "," +
                                std::to_string(start + count) + ") out of bounds for " +
                                shape_str(x.shape()));
    }
    const auto xd = x.data();
    std::vector<double> out(static_cast<std::size_t>(r * count));
    for (std::int64_t i = 0; i < r; ++i) {
        std::memcpy(out.data() + i * count, xd.data() + i * c + start,
                    static_cast<std::size_t>(count) * sizeof(double));
    }
    const bool rg = want_grad({&x});
    Tensor result = make_output({r, count}, std::move(out), rg);
    if (rg) {
        Tensor xc = x, rc = result;
        TapeAccess::record(result, [xc, rc, start, count, r, c]() mutable {
            xc.ensure_grad();
            const auto go = rc.grad();
            auto gx = xc.raw_grad();
            for (std::int64_t i = 0; i < r; ++i) {
                for (std::int64_t j = 0; j < count; ++j) {
                    gx[static_cast<std::size_t>(i * c + start + j)] +=
                        go[static_cast<std::size_t>(i * count + j)];
                }
            }
        });
    }
    return result;
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_rows: no parts");
    }
    const std::int64_t c = parts[0].dim(1);
    std::int64_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(1) != c) {
            throw std::invalid_argument("concat_rows: incompatible part shape " + shape_str(p.shape()));
        }
        total += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total * c));
    for (const Tensor& p : parts) {
        const auto pd = p.data();
        out.insert(out.end(), pd.begin(), pd.end());
    }
    bool rg = false;
    if (g_grad_enabled) {
        for (const Tensor& p : parts) rg = rg || p.requires_grad();
    }
    Tensor result = make_output({total, c}, std::move(out), rg);
    if (rg) {
        auto held = std::make_shared<std::vector<Tensor>>(parts.begin(), parts.end());
        Tensor rc = result;
        TapeAccess::record(result, [held, rc]() mutable {
            const auto go = rc.grad();
            std::size_t off = 0;
            for (Tensor& p : *held) {
                const std::size_t n = static_cast<std::size_t>(p.size());
                if (p.requires_grad()) {
                    p.accumulate_grad(go.subspan(off, n));
                }
                off += n;
            }
        });
    }
    return result;
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_cols: no parts");
    }
    const std::int64_t r = parts[0].dim(0);
    std::int64_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(0) != r) {
            throw std::invalid_argument("concat_cols: incompatible part shape " + shape_str(p.shape()));
        }
        total += p.dim(1);
    }
    std::vector<double> out(static_cast<std::size_t>(r * total));
    std::int64_t off = 0;
    for (const Tensor& p : parts) {
        const std::int64_t pc = p.dim(1);
        const auto pd = p.data();
        for (std::int64_t i = 0; i < r; ++i) {
            std::memcpy(out.data() + i * total + off, pd.data() + i * pc,
                        static_cast<std::size_t>(pc) * sizeof(double));
        }
        off += pc;
    }
    bool rg = false;
    if (g_grad_enabled) {
        for (const Tensor& p : parts) rg = rg || p.requires_grad();
    }
    Tensor result = make_output({r, total}, std::move(out), rg);
    if (rg) {
        auto held = std::make_shared<std::vector<Tensor>>(parts.begin(), parts.end());
        Tensor rc = result;
        TapeAccess::record(result, [held, rc, r, total]() mutable {
            const auto go = rc.grad();
            std::int64_t off2 = 0;
            for (Tensor& p : *held) {
                const std::int64_t pc = p.dim(1);
                if (p.requires_grad()) {
                    p.ensure_grad();
                    auto gp = p.raw_grad();
                    for (std::int64_t i = 0; i < r; ++i) {
                        for (std::int64_t j = 0; j < pc; ++j) {
                            gp[static_cast<std::size_t>(i * pc + j)] +=
                                go[static_cast<std::size_t>(i * total + off2 + j)];
                        }
                    }
                }
                off2 += pc;
            }
        });
    }
    return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
    check_defined(x, "reshape");
    if (shape_size(shape) != x.size()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                    shape_str(shape));
    }
    const auto xd = x.data();
    const bool rg = want_grad({&x});
    Tensor result = make_output(std::move(shape), std::vector<double>(xd.begin(), xd.end()), rg);
    if (rg) {
        Tensor xc = x, rc = result;
        TapeAccess::record(result, [xc, rc]() mutable { xc.accumulate_grad(rc.grad()); });
    }
    return result;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    check_defined(x, "dropout");
    if (rate < 0.0 || rate >= 1.0) {
        throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
    }
    if (rate == 0.0) {
        return x;
    }
    const double keep_scale = 1.0 / (1.0 - rate);
    const auto xd = x.data();
    auto factors = std::make_shared<std::vector<double>>(xd.size());
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double f = rng.uniform() < rate ? 0.0 : keep_scale;
        (*factors)[i] = f;
        out[i] = xd[i] * f;
    }
    const bool rg = want_grad({&x});
    Tensor result = make_output(x.shape(), std::move(out), rg);
    if (rg) {
        Tensor xc = x, rc = result;
        TapeAccess::record(result, [xc, rc, factors]() mutable {
            xc.ensure_grad();
            const auto go = rc.grad();
            auto gx = xc.raw_grad();
            for (std::size_t i = 0; i < go.size(); ++i) {
                gx[i] += go[i] * (*factors)[i];
            }
        });
    }
    return result;
}

}  // namespace shgvqa
