#include "pretext/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace pretext {

namespace {

void check_same_shape(const char* op, const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ContractError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) +
                            "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                            "x" + std::to_string(b.cols()));
}

void check_same_tape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.tape != b.tape) throw ContractError(std::string(op) + ": tensors from different tapes");
}

}  // namespace

// --- Tensor accessors -----------------------------------------------------

const Matrix& Tensor::value() const {
    if (!valid()) throw ContractError("Tensor::value on invalid tensor");
    return tape->value_of(id);
}

const Matrix& Tensor::grad() const {
    if (!valid()) throw ContractError("Tensor::grad on invalid tensor");
    return tape->grad_of(id);
}

double Tensor::item() const {
    const Matrix& v = value();
    if (v.rows() != 1 || v.cols() != 1) throw ContractError("Tensor::item: tensor is not 1x1");
    return v(0, 0);
}

Index Tensor::rows() const { return value().rows(); }
Index Tensor::cols() const { return value().cols(); }

// --- Tape -------------------------------------------------------------------

Tensor Tape::leaf(Matrix value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Tensor{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor Tape::scalar_constant(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
}

Tensor Tape::make(Matrix value, std::vector<int> parents,
                  std::function<void(Tape&, int)> backprop) {
    bool rg = false;
    for (int p : parents) rg = rg || nodes_[static_cast<size_t>(p)].requires_grad;
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    if (rg) {
        n.parents = std::move(parents);
        n.backprop = std::move(backprop);
    }
    nodes_.push_back(std::move(n));
    return Tensor{this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Tape::value_of(int id) const { return nodes_[static_cast<size_t>(id)].value; }

const Matrix& Tape::grad_of(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0)
        throw ContractError("Tensor::grad read before backward() or on a non-grad node");
    return n.grad;
}

Matrix& Tape::grad_ref(int id) { return nodes_[static_cast<size_t>(id)].grad; }

bool Tape::requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

void Tape::backward(const Tensor& root) {
    if (root.tape != this) throw ContractError("backward: root from another tape");
    if (swept_) throw ContractError("backward: tape already swept");
    const Node& r = nodes_[static_cast<size_t>(root.id)];
    if (r.value.rows() != 1 || r.value.cols() != 1)
        throw ContractError("backward: root must be 1x1");
    swept_ = true;
    for (Node& n : nodes_)
        if (n.requires_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    if (!r.requires_grad) return;  // constant graph: nothing to do
    nodes_[static_cast<size_t>(root.id)].grad(0, 0) = 1.0;
    for (int i = root.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.requires_grad && n.backprop) n.backprop(*this, i);
    }
}

// --- op helpers ------------------------------------------------------------

namespace {

// fetch matrices inside backprop closures by id so vector reallocation is safe
const Matrix& val(Tape& t, int id) { return t.value_of(id); }
Matrix& grd(Tape& t, int id) { return t.grad_ref(id); }

void add_grad(Tape& t, int id, const Matrix& g) {
    if (t.requires_grad(id)) grd(t, id) += g;
}

}  // namespace

// --- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_tape("add", a, b);
    check_same_shape("add", a.value(), b.value());
    int ia = a.id, ib = b.id;
    return a.tape->make(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
        add_grad(t, ia, grd(t, self));
        add_grad(t, ib, grd(t, self));
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_tape("sub", a, b);
    check_same_shape("sub", a.value(), b.value());
    int ia = a.id, ib = b.id;
    return a.tape->make(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
        add_grad(t, ia, grd(t, self));
        if (t.requires_grad(ib)) grd(t, ib) -= grd(t, self);
    });
}

Tensor neg(const Tensor& a) {
    int ia = a.id;
    return a.tape->make(-a.value(), {ia}, [ia](Tape& t, int self) {
        if (t.requires_grad(ia)) grd(t, ia) -= grd(t, self);
    });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    check_same_tape("hadamard", a, b);
    check_same_shape("hadamard", a.value(), b.value());
    int ia = a.id, ib = b.id;
    return a.tape->make(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, int self) {
        add_grad(t, ia, grd(t, self).cwiseProduct(val(t, ib)));
        add_grad(t, ib, grd(t, self).cwiseProduct(val(t, ia)));
    });
}

Tensor scale(const Tensor& a, double s) {
    int ia = a.id;
    return a.tape->make(a.value() * s, {ia}, [ia, s](Tape& t, int self) {
        add_grad(t, ia, grd(t, self) * s);
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    int ia = a.id;
    return a.tape->make((a.value().array() + s).matrix(), {ia}, [ia](Tape& t, int self) {
        add_grad(t, ia, grd(t, self));
    });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
    check_same_tape("scale_by", a, s);
    if (s.rows() != 1 || s.cols() != 1) throw ContractError("scale_by: scale must be 1x1");
    int ia = a.id, is = s.id;
    return a.tape->make(a.value() * s.item(), {ia, is}, [ia, is](Tape& t, int self) {
        add_grad(t, ia, grd(t, self) * val(t, is)(0, 0));
        if (t.requires_grad(is)) grd(t, is)(0, 0) += grd(t, self).cwiseProduct(val(t, ia)).sum();
    });
}

Tensor exp_elem(const Tensor& a) {
    int ia = a.id;
    Matrix y = a.value().array().exp().matrix();
    return a.tape->make(std::move(y), {ia}, [ia](Tape& t, int self) {
        add_grad(t, ia, grd(t, self).cwiseProduct(val(t, self)));
    });
}

Tensor log_elem(const Tensor& a) {
    int ia = a.id;
    if ((a.value().array() <= 0.0).any()) throw NumericError("log_elem: non-positive entry");
    Matrix y = a.value().array().log().matrix();
    return a.tape->make(std::move(y), {ia}, [ia](Tape& t, int self) {
        add_grad(t, ia, grd(t, self).cwiseQuotient(val(t, ia)));
    });
}

Tensor relu(const Tensor& a) {
    int ia = a.id;
    Matrix y = a.value().cwiseMax(0.0);
    return a.tape->make(std::move(y), {ia}, [ia](Tape& t, int self) {
        Matrix mask = (val(t, ia).array() > 0.0).cast<double>().matrix();
        add_grad(t, ia, grd(t, self).cwiseProduct(mask));
    });
}

Tensor gelu(const Tensor& a) {
    int ia = a.id;
    const double inv_sqrt2 = 0.7071067811865475244;
    Matrix y = a.value().unaryExpr(
        [inv_sqrt2](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
    return a.tape->make(std::move(y), {ia}, [ia, inv_sqrt2](Tape& t, int self) {
        const double inv_sqrt2pi = 0.3989422804014326779;
        Matrix d = val(t, ia).unaryExpr([inv_sqrt2, inv_sqrt2pi](double x) {
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * std::exp(-0.5 * x * x) * inv_sqrt2pi;
        });
        add_grad(t, ia, grd(t, self).cwiseProduct(d));
    });
}

// --- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_same_tape("matmul", a, b);
    if (a.cols() != b.rows())
        throw ContractError("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                            std::to_string(b.rows()));
    int ia = a.id, ib = b.id;
    return a.tape->make(a.value() * b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
        add_grad(t, ia, grd(t, self) * val(t, ib).transpose());
        add_grad(t, ib, val(t, ia).transpose() * grd(t, self));
    });
}

Tensor transpose(const Tensor& a) {
    int ia = a.id;
    return a.tape->make(a.value().transpose(), {ia}, [ia](Tape& t, int self) {
        add_grad(t, ia, grd(t, self).transpose());
    });
}

Tensor add_rowvec(const Tensor& x, const Tensor& row) {
    check_same_tape("add_rowvec", x, row);
    if (row.rows() != 1 || row.cols() != x.cols())
        throw ContractError("add_rowvec: row must be 1x" + std::to_string(x.cols()));
    int ix = x.id, ir = row.id;
    Matrix y = x.value().rowwise() + Eigen::RowVectorXd(row.value().row(0));
    return x.tape->make(std::move(y), {ix, ir}, [ix, ir](Tape& t, int self) {
        add_grad(t, ix, grd(t, self));
        if (t.requires_grad(ir)) grd(t, ir).row(0) += grd(t, self).colwise().sum();
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(x, w), b);
}

// --- shape -------------------------------------------------------------------

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty input");
    Tape* tape = parts[0].tape;
    Index cols = parts[0].cols();
    Index rows = 0;
    std::vector<int> ids;
    for (const auto& p : parts) {
        if (p.tape != tape) throw ContractError("concat_rows: tensors from different tapes");
        if (p.cols() != cols) throw ContractError("concat_rows: column mismatch");
        rows += p.rows();
        ids.push_back(p.id);
    }
    Matrix y(rows, cols);
    Index at = 0;
    for (const auto& p : parts) {
        y.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    return tape->make(std::move(y), ids, [ids](Tape& t, int self) {
        Index at = 0;
        for (int id : ids) {
            const Index r = val(t, id).rows();
            add_grad(t, id, grd(t, self).middleRows(at, r));
            at += r;
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty input");
    Tape* tape = parts[0].tape;
    Index rows = parts[0].rows();
    Index cols = 0;
    std::vector<int> ids;
    for (const auto& p : parts) {
        if (p.tape != tape) throw ContractError("concat_cols: tensors from different tapes");
        if (p.rows() != rows) throw ContractError("concat_cols: row mismatch");
        cols += p.cols();
        ids.push_back(p.id);
    }
    Matrix y(rows, cols);
    Index at = 0;
    for (const auto& p : parts) {
        y.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return tape->make(std::move(y), ids, [ids](Tape& t, int self) {
        Index at = 0;
        for (int id : ids) {
            const Index c = val(t, id).cols();
            add_grad(t, id, grd(t, self).middleCols(at, c));
            at += c;
        }
    });
}

Tensor slice_rows(const Tensor& a, Index start, Index n) {
    if (start < 0 || n < 1 || start + n > a.rows()) throw ContractError("slice_rows: out of range");
    int ia = a.id;
    return a.tape->make(a.value().middleRows(start, n), {ia}, [ia, start, n](Tape& t, int self) {
        if (t.requires_grad(ia)) grd(t, ia).middleRows(start, n) += grd(t, self);
    });
}

Tensor slice_cols(const Tensor& a, Index start, Index n) {
    if (start < 0 || n < 1 || start + n > a.cols()) throw ContractError("slice_cols: out of range");
    int ia = a.id;
    return a.tape->make(a.value().middleCols(start, n), {ia}, [ia, start, n](Tape& t, int self) {
        if (t.requires_grad(ia)) grd(t, ia).middleCols(start, n) += grd(t, self);
    });
}

Tensor flatten_to_row(const Tensor& a) {
    int ia = a.id;
    const Index r = a.rows(), c = a.cols();
    Matrix y(1, r * c);
    for (Index i = 0; i < r; ++i) y.block(0, i * c, 1, c) = a.value().row(i);
    return a.tape->make(std::move(y), {ia}, [ia, r, c](Tape& t, int self) {
        if (!t.requires_grad(ia)) return;
        for (Index i = 0; i < r; ++i) grd(t, ia).row(i) += grd(t, self).block(0, i * c, 1, c);
    });
}

Tensor gather_rows(const Tensor& a, const std::vector<Index>& rows) {
    if (rows.empty()) throw ContractError("gather_rows: empty index list");
    for (Index r : rows)
        if (r < 0 || r >= a.rows()) throw ContractError("gather_rows: index out of range");
    int ia = a.id;
    Matrix y(static_cast<Index>(rows.size()), a.cols());
    for (size_t i = 0; i < rows.size(); ++i) y.row(static_cast<Index>(i)) = a.value().row(rows[i]);
    return a.tape->make(std::move(y), {ia}, [ia, rows](Tape& t, int self) {
        if (!t.requires_grad(ia)) return;
        for (size_t i = 0; i < rows.size(); ++i)
            grd(t, ia).row(rows[i]) += grd(t, self).row(static_cast<Index>(i));
    });
}

Tensor gather_entries(const Tensor& a, const std::vector<std::pair<Index, Index>>& coords) {
    if (coords.empty()) throw ContractError("gather_entries: empty coordinate list");
    for (const auto& [r, c] : coords)
        if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols())
            throw ContractError("gather_entries: coordinate out of range");
    int ia = a.id;
    Matrix y(static_cast<Index>(coords.size()), 1);
    for (size_t i = 0; i < coords.size(); ++i)
        y(static_cast<Index>(i), 0) = a.value()(coords[i].first, coords[i].second);
    return a.tape->make(std::move(y), {ia}, [ia, coords](Tape& t, int self) {
        if (!t.requires_grad(ia)) return;
        for (size_t i = 0; i < coords.size(); ++i)
            grd(t, ia)(coords[i].first, coords[i].second) += grd(t, self)(static_cast<Index>(i), 0);
    });
}

// --- normalization / reductions ------------------------------------------------

Tensor rowwise_softmax(const Tensor& a) {
    int ia = a.id;
    Matrix y = a.value();
    for (Index i = 0; i < y.rows(); ++i) {
        const double mx = y.row(i).maxCoeff();
        y.row(i) = (y.row(i).array() - mx).exp();
        y.row(i) /= y.row(i).sum();
    }
    return a.tape->make(std::move(y), {ia}, [ia](Tape& t, int self) {
        if (!t.requires_grad(ia)) return;
        const Matrix& y = val(t, self);
        const Matrix& g = grd(t, self);
        Matrix dx(y.rows(), y.cols());
        for (Index i = 0; i < y.rows(); ++i) {
            const double dot = g.row(i).cwiseProduct(y.row(i)).sum();
            dx.row(i) = (y.row(i).array() * (g.row(i).array() - dot)).matrix();
        }
        grd(t, ia) += dx;
    });
}

Tensor rowwise_log_softmax(const Tensor& a) {
    int ia = a.id;
    Matrix y = a.value();
    for (Index i = 0; i < y.rows(); ++i) {
        const double mx = y.row(i).maxCoeff();
        const double lse = mx + std::log((y.row(i).array() - mx).exp().sum());
        y.row(i).array() -= lse;
    }
    return a.tape->make(std::move(y), {ia}, [ia](Tape& t, int self) {
        if (!t.requires_grad(ia)) return;
        const Matrix& y = val(t, self);
        const Matrix& g = grd(t, self);
        Matrix dx(y.rows(), y.cols());
        for (Index i = 0; i < y.rows(); ++i) {
            const double gsum = g.row(i).sum();
            dx.row(i) = g.row(i) - gsum * y.row(i).array().exp().matrix();
        }
        grd(t, ia) += dx;
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    check_same_tape("layer_norm", x, gain);
    check_same_tape("layer_norm", x, bias);
    const Index d = x.cols();
    if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
        throw ContractError("layer_norm: gain/bias must be 1x" + std::to_string(d));
    int ix = x.id, ig = gain.id, ib = bias.id;
    const Matrix& xv = x.value();
    Matrix out(xv.rows(), d);
    for (Index i = 0; i < xv.rows(); ++i) {
        const double mu = xv.row(i).mean();
        const double var = (xv.row(i).array() - mu).square().mean();
        Eigen::RowVectorXd xhat =
            ((xv.row(i).array() - mu) / std::sqrt(var + eps)).matrix();
        out.row(i) = xhat.cwiseProduct(gain.value().row(0)) + bias.value().row(0);
    }
    return x.tape->make(std::move(out), {ix, ig, ib}, [ix, ig, ib, eps](Tape& t, int self) {
        using RowArray = Eigen::Array<double, 1, Eigen::Dynamic>;
        const Matrix& xv = val(t, ix);
        const Matrix& g = grd(t, self);
        const Index rows = xv.rows(), d = xv.cols();
        const RowArray gains = val(t, ig).row(0).array();
        Matrix dx(rows, d);
        Eigen::RowVectorXd dgain = Eigen::RowVectorXd::Zero(d);
        Eigen::RowVectorXd dbias = Eigen::RowVectorXd::Zero(d);
        for (Index i = 0; i < rows; ++i) {
            const double mu = xv.row(i).mean();
            const double var = (xv.row(i).array() - mu).square().mean();
            const double inv_sd = 1.0 / std::sqrt(var + eps);
            const RowArray xhat = (xv.row(i).array() - mu) * inv_sd;
            const RowArray dy = g.row(i).array();
            dgain.array() += dy * xhat;
            dbias.array() += dy;
            const RowArray dxhat = dy * gains;
            const double m_dxhat = dxhat.mean();
            const double m_dxhat_xhat = (dxhat * xhat).mean();
            dx.row(i) = (inv_sd * (dxhat - m_dxhat - xhat * m_dxhat_xhat)).matrix();
        }
        add_grad(t, ix, dx);
        if (t.requires_grad(ig)) grd(t, ig).row(0) += dgain;
        if (t.requires_grad(ib)) grd(t, ib).row(0) += dbias;
    });
}

Tensor l2_normalize_rows(const Tensor& a, double eps) {
    int ia = a.id;
    const Matrix& av = a.value();
    Matrix y(av.rows(), av.cols());
    for (Index i = 0; i < av.rows(); ++i) {
        const double n = std::max(av.row(i).norm(), eps);
        y.row(i) = av.row(i) / n;
    }
    return a.tape->make(std::move(y), {ia}, [ia, eps](Tape& t, int self) {
        if (!t.requires_grad(ia)) return;
        const Matrix& av = val(t, ia);
        const Matrix& y = val(t, self);
        const Matrix& g = grd(t, self);
        Matrix dx(av.rows(), av.cols());
        for (Index i = 0; i < av.rows(); ++i) {
            const double n = std::max(av.row(i).norm(), eps);
            const double dot = g.row(i).cwiseProduct(y.row(i)).sum();
            dx.row(i) = (g.row(i) - dot * y.row(i)) / n;
        }
        grd(t, ia) += dx;
    });
}

Tensor masked_colmax(const Tensor& a, const std::vector<char>& keep) {
    if (static_cast<Index>(keep.size()) != a.rows())
        throw ContractError("masked_colmax: mask length != rows");
    std::vector<Index> rows;
    for (size_t i = 0; i < keep.size(); ++i)
        if (keep[i]) rows.push_back(static_cast<Index>(i));
    if (rows.empty()) throw ContractError("masked_colmax: all rows masked out");
    int ia = a.id;
    const Matrix& av = a.value();
    Matrix y(1, av.cols());
    std::vector<Index> arg(static_cast<size_t>(av.cols()));
    for (Index j = 0; j < av.cols(); ++j) {
        Index best = rows[0];
        for (Index r : rows)
            if (av(r, j) > av(best, j)) best = r;  // ties keep the lowest row
        y(0, j) = av(best, j);
        arg[static_cast<size_t>(j)] = best;
    }
    return a.tape->make(std::move(y), {ia}, [ia, arg](Tape& t, int self) {
        if (!t.requires_grad(ia)) return;
        const Matrix& g = grd(t, self);
        for (Index j = 0; j < g.cols(); ++j)
            grd(t, ia)(arg[static_cast<size_t>(j)], j) += g(0, j);
    });
}

Tensor mean_all(const Tensor& a) {
    int ia = a.id;
    const double n = static_cast<double>(a.rows() * a.cols());
    Matrix y(1, 1);
    y(0, 0) = a.value().sum() / n;
    return a.tape->make(std::move(y), {ia}, [ia, n](Tape& t, int self) {
        if (!t.requires_grad(ia)) return;
        grd(t, ia).array() += grd(t, self)(0, 0) / n;
    });
}

Tensor sum_all(const Tensor& a) {
    int ia = a.id;
    Matrix y(1, 1);
    y(0, 0) = a.value().sum();
    return a.tape->make(std::move(y), {ia}, [ia](Tape& t, int self) {
        if (!t.requires_grad(ia)) return;
        grd(t, ia).array() += grd(t, self)(0, 0);
    });
}

// --- ParamStore -----------------------------------------------------------------

Matrix& ParamStore::create(const std::string& name, Index rows, Index cols) {
    if (slots_.count(name)) throw ContractError("parameter already exists: " + name);
    Slot s;
    s.value = Matrix::Zero(rows, cols);
    s.m = Matrix::Zero(rows, cols);
    s.v = Matrix::Zero(rows, cols);
    return slots_.emplace(name, std::move(s)).first->second.value;
}

Matrix& ParamStore::create_gaussian(const std::string& name, Index rows, Index cols, Rng& rng,
                                    double stddev) {
    Matrix& m = create(name, rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = stddev * rng.gaussian();
    return m;
}

Matrix& ParamStore::create_xavier(const std::string& name, Index rows, Index cols, Rng& rng) {
    return create_gaussian(name, rows, cols, rng,
                           std::sqrt(2.0 / static_cast<double>(rows + cols)));
}

Matrix& ParamStore::at(const std::string& name) {
    auto it = slots_.find(name);
    if (it == slots_.end()) throw ContractError("unknown parameter: " + name);
    return it->second.value;
}

const Matrix& ParamStore::at(const std::string& name) const {
    auto it = slots_.find(name);
    if (it == slots_.end()) throw ContractError("unknown parameter: " + name);
    return it->second.value;
}

void ParamStore::erase_prefix(const std::string& prefix) {
    for (auto it = slots_.begin(); it != slots_.end();) {
        if (it->first.rfind(prefix, 0) == 0)
            it = slots_.erase(it);
        else
            ++it;
    }
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(slots_.size());
    for (const auto& [name, slot] : slots_) {
        (void)slot;
        out.push_back(name);
    }
    return out;
}

std::map<std::string, Tensor> ParamStore::bind(Tape& tape) const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, slot] : slots_) out.emplace(name, tape.leaf(slot.value, true));
    return out;
}

void ParamStore::adam_step(const std::map<std::string, Tensor>& bound, const OptimConfig& cfg,
                           const std::function<double(const std::string&)>& lr_mult) {
    ++step_count_;
    const double t = static_cast<double>(step_count_);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& [name, slot] : slots_) {
        auto it = bound.find(name);
        if (it == bound.end()) throw ContractError("adam_step: parameter not bound: " + name);
        const Matrix& g = it->second.grad();
        if (!g.allFinite()) throw NumericError("non-finite gradient for parameter " + name);
        const double lr = cfg.lr * (lr_mult ? lr_mult(name) : 1.0);
        slot.m = cfg.beta1 * slot.m + (1.0 - cfg.beta1) * g;
        slot.v = cfg.beta2 * slot.v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
        const Matrix mhat = slot.m / bc1;
        const Matrix vhat = slot.v / bc2;
        slot.value -=
            lr * (mhat.array() / (vhat.array().sqrt() + cfg.eps)).matrix();
        if (cfg.weight_decay > 0.0) slot.value -= lr * cfg.weight_decay * slot.value;
    }
}

// --- gradient check -----------------------------------------------------------

GradCheckResult gradient_check(
    ParamStore& params,
    const std::function<Tensor(Tape&, std::map<std::string, Tensor>&)>& loss_fn, size_t samples,
    Rng& rng, double h) {
    // analytic gradients
    std::map<std::string, Matrix> analytic;
    {
        Tape tape;
        auto bound = params.bind(tape);
        Tensor loss = loss_fn(tape, bound);
        tape.backward(loss);
        for (const auto& [name, tensor] : bound) analytic.emplace(name, tensor.grad());
    }
    auto eval_loss = [&]() {
        Tape tape;
        auto bound = params.bind(tape);
        return loss_fn(tape, bound).item();
    };
    const auto names = params.names();
    GradCheckResult res;
    for (size_t s = 0; s < samples; ++s) {
        const std::string& name = names[rng.uniform_int(names.size())];
        Matrix& value = params.at(name);
        const Index i = static_cast<Index>(rng.uniform_int(static_cast<size_t>(value.rows())));
        const Index j = static_cast<Index>(rng.uniform_int(static_cast<size_t>(value.cols())));
        const double orig = value(i, j);
        const double step = h * std::max(1.0, std::abs(orig));
        value(i, j) = orig + step;
        const double up = eval_loss();
        value(i, j) = orig - step;
        const double down = eval_loss();
        value(i, j) = orig;
        const double numeric = (up - down) / (2.0 * step);
        const double analytic_g = analytic.at(name)(i, j);
        double rel = 0.0;
        if (std::abs(numeric) > 1e-7 || std::abs(analytic_g) > 1e-7)
            rel = std::abs(numeric - analytic_g) /
                  std::max(std::abs(numeric), std::abs(analytic_g));
        if (rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_coord = name + "(" + std::to_string(i) + "," + std::to_string(j) + ")";
        }
        ++res.checked;
    }
    return res;
}

}  // namespace pretext
