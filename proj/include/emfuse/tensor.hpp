#pragma once

// Dense row-major f64 tensor with taped reverse-mode autodiff.
// Tensors are cheap handles onto a shared node; ops in ops.hpp record
// parents and an adjoint closure on the node they produce.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace emfuse {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline void check_shape_valid(const Shape& s) {
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor shape has non-positive dim " + shape_str(s));
    }
}

class Tensor;

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;   // sized like values iff requires_grad
    std::vector<Tensor> parents;
    std::function<void(TensorNode&)> backward_fn;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        check_shape_valid(shape);
        auto node = std::make_shared<TensorNode>();
        node->values.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
        node->shape = std::move(shape);
        return Tensor(std::move(node));
    }

    static Tensor full(Shape shape, double value) {
        Tensor t = zeros(std::move(shape));
        for (double& v : t.values()) v = value;
        return t;
    }

    static Tensor scalar(double value) { return full({}, value); }

    static Tensor from(Shape shape, std::vector<double> data) {
        check_shape_valid(shape);
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
            throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        }
        auto node = std::make_shared<TensorNode>();
        node->shape = std::move(shape);
        node->values = std::move(data);
        return Tensor(std::move(node));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->values.size()); }
    int dim(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }

    std::vector<double>& values() { return node_->values; }
    const std::vector<double>& values() const { return node_->values; }
    double* data() { return node_->values.data(); }
    const double* data() const { return node_->values.data(); }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
        return node_->values[0];
    }

    double at(const std::vector<int>& idx) const { return node_->values[flat_index(idx)]; }
    double& at(const std::vector<int>& idx) { return node_->values[flat_index(idx)]; }

    bool requires_grad() const { return node_->requires_grad; }

    Tensor& set_requires_grad(bool on = true) {
        if (on && !node_->parents.empty()) {
            throw std::invalid_argument("requires_grad can only be toggled on leaf tensors");
        }
        node_->requires_grad = on;
        if (on) node_->grad.assign(node_->values.size(), 0.0);
        else node_->grad.clear();
        return *this;
    }

    const std::vector<double>& grad() const {
        if (!node_->requires_grad) throw std::invalid_argument("grad() on tensor without requires_grad");
        return node_->grad;
    }

    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    Tensor detached() const {
        auto node = std::make_shared<TensorNode>();
        node->shape = node_->shape;
        node->values = node_->values;
        return Tensor(std::move(node));
    }

    Tensor clone_values() const { return detached(); }

    std::shared_ptr<TensorNode> node() const { return node_; }

    // Identity of the underlying storage; used as a stable key by the optimizer.
    const TensorNode* key() const { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    std::size_t flat_index(const std::vector<int>& idx) const {
        const Shape& s = node_->shape;
        if (idx.size() != s.size()) throw std::invalid_argument("index rank mismatch for " + shape_str(s));
        std::size_t flat = 0;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] < 0 || idx[i] >= s[i]) throw std::out_of_range("tensor index out of range");
            flat = flat * static_cast<std::size_t>(s[i]) + static_cast<std::size_t>(idx[i]);
        }
        return flat;
    }

    friend Tensor make_op_output(Shape shape, std::vector<double> values,
                                 std::vector<Tensor> inputs,
                                 std::function<void(TensorNode&)> backward_fn,
                                 const char* op_name);

    std::shared_ptr<TensorNode> node_;
};

inline void check_finite(const char* op_name, const std::vector<double>& values) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string(op_name) + ": non-finite result");
        }
    }
}

// Every op funnels through here: finiteness guard plus adjoint registration.
inline Tensor make_op_output(Shape shape, std::vector<double> values,
                             std::vector<Tensor> inputs,
                             std::function<void(TensorNode&)> backward_fn,
                             const char* op_name) {
    check_finite(op_name, values);
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    bool needs_grad = false;
    for (const Tensor& t : inputs) {
        if (t.requires_grad() || (t.node() && t.node()->backward_fn)) needs_grad = true;
    }
    if (needs_grad) {
        node->requires_grad = true;
        node->grad.assign(node->values.size(), 0.0);
        node->parents = std::move(inputs);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

// Reverse-mode sweep from a scalar loss. Intermediate grads are cleared and
// recomputed; leaf grads (parameters, inputs) accumulate across calls.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw std::invalid_argument("backward requires a scalar loss tensor");
    }
    TensorNode* root = loss.node().get();
    if (!root->requires_grad) return;  // constant graph, nothing to do

    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            TensorNode* parent = node->parents[next_child].node().get();
            ++next_child;
            if (parent->requires_grad && !seen.count(parent)) {
                seen.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // order is a post-order: parents before children, so iterate in reverse.
    for (TensorNode* node : order) {
        if (!node->parents.empty()) std::fill(node->grad.begin(), node->grad.end(), 0.0);
    }
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
    }
}

// ---------------------------------------------------------------------------
// Deterministic RNG: xoshiro256** seeded through splitmix64. Same seed gives
// the same draw sequence on every platform.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& word : state_) word = splitmix64(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        // Box-Muller; u1 kept away from zero so log stays finite.
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("uniform_int(0)");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    // K distinct indices in [0,n), ordered by draw (rejection of repeats).
    std::vector<int> sample_distinct(int n, int k) {
        if (k > n) throw std::invalid_argument("sample_distinct: k > n");
        std::vector<int> out;
        std::unordered_set<int> used;
        out.reserve(static_cast<std::size_t>(k));
        while (static_cast<int>(out.size()) < k) {
            int idx = static_cast<int>(uniform_int(static_cast<std::uint64_t>(n)));
            if (used.insert(idx).second) out.push_back(idx);
        }
        return out;
    }

    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL + stream * 0xbf58476d1ce4e5b9ULL);
        return splitmix64(x);
    }

private:
    static std::uint64_t splitmix64(std::uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t state_[4];
};

inline Tensor random_normal(Shape shape, double stddev, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (double& x : v) x = rng.normal(0.0, stddev);
    return Tensor::from(std::move(shape), std::move(v));
}

// FNV-1a over the raw little-endian bytes; used for frozen-parameter audits.
inline std::uint64_t checksum_bits(const std::vector<double>& values, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (double v : values) {
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(v));
        std::memcpy(&bits, &v, sizeof(bits));
        for (int byte = 0; byte < 8; ++byte) {
            h ^= (bits >> (8 * byte)) & 0xffULL;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

inline std::uint64_t checksum_string(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace emfuse
