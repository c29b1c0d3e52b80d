#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace shgvqa {

class Rng;

using Shape = std::vector<std::int64_t>;

std::int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense 64-bit float tensor with an optional gradient buffer. Copies are
// shallow handles onto shared storage; values are immutable once created
// except through raw_data() (used by the optimizer and initializers).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int rank() const;
    std::int64_t dim(int axis) const;  // negative axis counts from the back
    std::int64_t size() const;
    bool requires_grad() const;

    std::span<const double> data() const;
    std::span<double> raw_data();
    double item() const;
    double at(std::span<const std::int64_t> idx) const;
    double at(std::initializer_list<std::int64_t> idx) const;

    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> raw_grad();
    void ensure_grad();
    void zero_grad();
    void drop_grad();
    void accumulate_grad(std::span<const double> g);

    // Stable identity of the underlying storage.
    const void* id() const;

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;

    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
    friend struct TapeAccess;
};

namespace autograd {

bool enabled();

// Disables recording (and requires_grad propagation) while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Reverse sweep from a scalar recorded on the active tape. Gradients are
// accumulated (+=) into every reachable requires_grad tensor, then the tape
// is cleared; a second backward without a new forward is rejected.
void backward(const Tensor& loss);

std::size_t tape_size();
void clear_tape();

}  // namespace autograd

// ---- differentiable operations ------------------------------------------

// Batched matrix product. Both operands need rank >= 2; leading (batch)
// dimensions broadcast against each other.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);  // rank 2

// b must have the same shape as a, be a scalar, or be a suffix of a's shape
// (row-vector bias broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // same shape or scalar b
Tensor scale(const Tensor& a, double c);
Tensor neg(const Tensor& a);

Tensor sum(const Tensor& a);   // all elements -> rank-0
Tensor mean(const Tensor& a);  // all elements -> rank-0

Tensor softmax(const Tensor& x, int axis);
Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

Tensor cross_entropy(const Tensor& logits, std::int64_t target);  // logits rank 1
// Sum of per-row cross entropies; optional per-row weights.
Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::int64_t> targets,
                          std::span<const double> weights = {});

Tensor rows(const Tensor& table, std::span<const std::int64_t> indices);  // gather rows
Tensor slice_rows(const Tensor& x, std::int64_t start, std::int64_t count);
Tensor slice_cols(const Tensor& x, std::int64_t start, std::int64_t count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor reshape(const Tensor& x, Shape shape);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace shgvqa
