#pragma once
#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pretext/errors.hpp"
#include "pretext/rng.hpp"

namespace pretext {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

class Tape;

// Lightweight handle into a Tape node. Valid while the tape lives.
struct Tensor {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Matrix& value() const;
    const Matrix& grad() const;
    double item() const;  // value of a 1x1 tensor
    Index rows() const;
    Index cols() const;
};

// Reverse-mode autodiff tape. Nodes are recorded in creation order; backward()
// sweeps them in reverse. One tape per training step; cleared by destruction.
class Tape {
public:
    Tensor leaf(Matrix value, bool requires_grad = true);
    Tensor constant(Matrix value) { return leaf(std::move(value), false); }
    Tensor scalar_constant(double v);

    // root must be 1x1; seeds d(root)/d(root) = 1 and accumulates into all
    // reachable grads. May be called once per tape.
    void backward(const Tensor& root);

    size_t size() const { return nodes_.size(); }

    const Matrix& value_of(int id) const;
    const Matrix& grad_of(int id) const;
    Matrix& grad_ref(int id);
    bool requires_grad(int id) const;

    // op construction (used by the free functions below)
    Tensor make(Matrix value, std::vector<int> parents, std::function<void(Tape&, int)> backprop);

private:
    struct Node {
        Matrix value;
        Matrix grad;  // allocated during backward()
        std::vector<int> parents;
        std::function<void(Tape&, int)> backprop;  // adds this node's grad into parents
        bool requires_grad = false;
    };
    std::vector<Node> nodes_;
    bool swept_ = false;
};

// --- elementwise / scalar ----------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor scale_by(const Tensor& a, const Tensor& s);  // s is 1x1
Tensor exp_elem(const Tensor& a);
Tensor log_elem(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);

// --- linear algebra ------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add_rowvec(const Tensor& x, const Tensor& row);       // row is 1xC
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// --- shape ---------------------------------------------------------------
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, Index start, Index n);
Tensor slice_cols(const Tensor& a, Index start, Index n);
Tensor flatten_to_row(const Tensor& a);                      // RxC -> 1x(R*C), row-major
Tensor gather_rows(const Tensor& a, const std::vector<Index>& rows);
Tensor gather_entries(const Tensor& a, const std::vector<std::pair<Index, Index>>& coords);

// --- normalization / reductions ------------------------------------------
Tensor rowwise_softmax(const Tensor& a);
Tensor rowwise_log_softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12);
Tensor masked_colmax(const Tensor& a, const std::vector<char>& keep);  // 1xC over kept rows
Tensor mean_all(const Tensor& a);
Tensor sum_all(const Tensor& a);

// --- parameters ------------------------------------------------------------
struct OptimConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Named parameter bank with Adam moments. Values persist across tapes; each
// step binds every parameter once onto a fresh tape.
class ParamStore {
public:
    Matrix& create(const std::string& name, Index rows, Index cols);
    Matrix& create_gaussian(const std::string& name, Index rows, Index cols, Rng& rng,
                            double stddev);
    Matrix& create_xavier(const std::string& name, Index rows, Index cols, Rng& rng);

    bool has(const std::string& name) const { return slots_.count(name) > 0; }
    Matrix& at(const std::string& name);
    const Matrix& at(const std::string& name) const;
    void erase_prefix(const std::string& prefix);

    std::vector<std::string> names() const;
    size_t count() const { return slots_.size(); }

    // bind every parameter as a grad-requiring leaf on the tape
    std::map<std::string, Tensor> bind(Tape& tape) const;

    // AdamW update from the grads accumulated on the bound leaves. lr_mult, if
    // given, scales the learning rate per parameter name (parameter groups).
    void adam_step(const std::map<std::string, Tensor>& bound, const OptimConfig& cfg,
                   const std::function<double(const std::string&)>& lr_mult = nullptr);

    int64_t step_count() const { return step_count_; }

    struct Slot {
        Matrix value;
        Matrix m;
        Matrix v;
    };
    const std::map<std::string, Slot>& slots() const { return slots_; }
    std::map<std::string, Slot>& slots_mutable() { return slots_; }
    void set_step_count(int64_t n) { step_count_ = n; }

private:
    std::map<std::string, Slot> slots_;
    int64_t step_count_ = 0;
};

// Central finite-difference check of d(loss)/d(param) at sampled coordinates.
// loss_fn must rebuild the full forward graph from the store each call.
struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_coord;
    size_t checked = 0;
};
GradCheckResult gradient_check(ParamStore& params,
                               const std::function<Tensor(Tape&, std::map<std::string, Tensor>&)>& loss_fn,
                               size_t samples, Rng& rng, double h = 1e-5);

}  // namespace pretext
