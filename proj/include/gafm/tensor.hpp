#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gafm/error.hpp"

namespace gafm {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
class Tape;

// Dense row-major value. Immutable after construction; ops return new
// tensors. The data block is shared between copies, and its address doubles
// as the identity under which the active tape tracks leaf gradients.
template <typename T>
class Tensor {
public:
    Tensor() : data_(std::make_shared<std::vector<T>>()) {}

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(check_extents(shape_), T(0))) {}

    Tensor(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
        if (static_cast<int64_t>(data_->size()) != check_extents(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        for (T& v : *t.data_) v = value;
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    const Shape& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    int64_t numel() const { return static_cast<int64_t>(data_->size()); }

    std::span<const T> data() const { return {data_->data(), data_->size()}; }
    T operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    T value() const {
        if (numel() != 1) {
            throw ShapeError("value() requires a scalar tensor, got shape " + shape_str(shape_));
        }
        return (*data_)[0];
    }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool v) {
        requires_grad_ = v;
        return *this;
    }

    // Identity of the underlying storage; shared by copies of this tensor.
    const void* id() const { return static_cast<const void*>(data_.get()); }

private:
    static int64_t check_extents(const Shape& s) {
        for (int64_t d : s) {
            if (d < 0) throw ShapeError("negative extent in shape " + shape_str(s));
        }
        return shape_numel(s);
    }

    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
    bool requires_grad_ = false;
    // Cache of the node this value holds on the recording tape; valid only
    // while node_gen_ matches the active tape's generation.
    mutable int32_t node_ = -1;
    mutable uint64_t node_gen_ = 0;

    friend class Tape<T>;
};

// Reverse-mode tape. Construction activates recording (one active tape per
// scalar type at a time); destruction deactivates it. Ops append themselves
// in execution order, and backward() replays the list strictly in reverse.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&)>;

    Tape() {
        if (active_ != nullptr) {
            throw TapeError("a recording tape is already active; only one recording context may exist at a time");
        }
        gen_ = ++gen_counter_;
        active_ = this;
    }

    ~Tape() {
        if (active_ == this) active_ = nullptr;
    }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    uint64_t generation() const { return gen_; }
    size_t op_count() const { return ops_.size(); }

    // Returns the node carried by `t` on this tape, or -1.
    int node_of(const Tensor<T>& t) const {
        if (t.node_gen_ == gen_ && t.node_ >= 0) return t.node_;
        auto it = leaves_.find(t.id());
        if (it != leaves_.end()) return it->second;
        return -1;
    }

    // Registers `t` as a leaf (idempotent per storage identity).
    int ensure_leaf(const Tensor<T>& t) {
        auto it = leaves_.find(t.id());
        if (it != leaves_.end()) return it->second;
        const int idx = add_node(t.numel(), /*leaf=*/true);
        leaves_.emplace(t.id(), idx);
        return idx;
    }

    void watch(Tensor<T>& t) {
        t.set_requires_grad(true);
        ensure_leaf(t);
    }

    int add_interior(int64_t numel) { return add_node(numel, /*leaf=*/false); }

    void record(const char* name, std::vector<int> inputs, int output, BackwardFn backward) {
        for (int in : inputs) {
            if (in >= output) {
                throw TapeError(std::string("tape order violated while recording ") + name);
            }
        }
        ops_.push_back(OpRec{name, std::move(inputs), output, std::move(backward)});
    }

    void attach(const Tensor<T>& t, int node) const {
        t.node_ = node;
        t.node_gen_ = gen_;
    }

    std::vector<T>& grad_buf(int node) { return nodes_[static_cast<size_t>(node)].grad; }
    const std::vector<T>& grad_buf(int node) const { return nodes_[static_cast<size_t>(node)].grad; }

    // Accumulates d(loss)/d(leaf) for every leaf. Interior buffers reset per
    // call; leaf buffers persist, so repeated calls accumulate additively.
    void backward(const Tensor<T>& loss) {
        const int loss_node = node_of(loss);
        if (loss_node < 0) {
            throw TapeError("backward: loss tensor is not recorded on the active tape");
        }
        if (loss.numel() != 1) {
            throw TapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        }
        for (Node& n : nodes_) {
            if (!n.leaf) std::fill(n.grad.begin(), n.grad.end(), T(0));
        }
        grad_buf(loss_node)[0] += T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            it->backward(*this);
        }
    }

    bool has_grad(const Tensor<T>& t) const { return leaves_.count(t.id()) > 0; }

    Tensor<T> grad(const Tensor<T>& t) const {
        auto it = leaves_.find(t.id());
        if (it == leaves_.end()) {
            throw TapeError("grad: tensor was never watched on this tape");
        }
        return Tensor<T>(t.shape(), nodes_[static_cast<size_t>(it->second)].grad);
    }

    void zero_grad() {
        for (auto& [id, node] : leaves_) {
            (void)id;
            auto& g = nodes_[static_cast<size_t>(node)].grad;
            std::fill(g.begin(), g.end(), T(0));
        }
    }

private:
    struct Node {
        bool leaf;
        std::vector<T> grad;
    };

    struct OpRec {
        const char* name;
        std::vector<int> inputs;
        int output;
        BackwardFn backward;
    };

    int add_node(int64_t numel, bool leaf) {
        nodes_.push_back(Node{leaf, std::vector<T>(static_cast<size_t>(numel), T(0))});
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::vector<Node> nodes_;
    std::vector<OpRec> ops_;
    std::unordered_map<const void*, int> leaves_;
    uint64_t gen_ = 0;

    static inline Tape* active_ = nullptr;
    static inline uint64_t gen_counter_ = 0;
};

namespace detail {

// Resolves whether an op must record itself, and under which input nodes.
template <typename T>
struct GradCtx {
    Tape<T>* tape = nullptr;
    std::vector<int> in_nodes;
    bool recording = false;

    explicit GradCtx(std::initializer_list<const Tensor<T>*> inputs) {
        tape = Tape<T>::active();
        if (tape == nullptr) return;
        in_nodes.reserve(inputs.size());
        for (const Tensor<T>* t : inputs) {
            int node = tape->node_of(*t);
            if (node < 0 && t->requires_grad()) node = tape->ensure_leaf(*t);
            in_nodes.push_back(node);
            if (node >= 0) recording = true;
        }
    }

    // Finishes recording: allocates the output node, attaches it to `out`.
    int finish(const char* name, const Tensor<T>& out,
               typename Tape<T>::BackwardFn backward) {
        const int out_node = tape->add_interior(out.numel());
        tape->record(name, in_nodes, out_node, std::move(backward));
        tape->attach(out, out_node);
        return out_node;
    }
};

// Adds src into the node buffer if that input participates in the graph.
template <typename T>
inline void add_grad(Tape<T>& tape, int node, const std::vector<T>& src) {
    if (node < 0) return;
    auto& dst = tape.grad_buf(node);
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

}  // namespace gafm
