#include "occ/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace occ::num {

namespace {

constexpr double kLayerNormEps = 1e-5;

struct RC {
    int rows;
    int cols;
};

RC rc(const Shape& s) {
    if (s.size() == 1) return {1, s[0]};
    if (s.size() == 2) return {s[0], s[1]};
    throw DimensionError("rank-1 or rank-2 tensor expected, got shape " + shape_str(s));
}

// C[m,n] = A[m,k] * B[k,n]
void mm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
    std::fill(c, c + static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,k] += A[m,n] * B[k,n]^T
void mm_nt_acc(const double* a, const double* b, double* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * n;
        double* ci = c + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double* bp = b + static_cast<size_t>(p) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += ai[j] * bp[j];
            ci[p] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
void mm_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        const double* bi = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

}  // namespace

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

const Shape& Tensor::shape() const { return tape->shape_of(id); }
const std::vector<double>& Tensor::values() const { return tape->values_of(id); }
bool Tensor::grad_enabled() const { return tape->grad_enabled_of(id); }
int Tensor::rows() const { return rc(shape()).rows; }
int Tensor::cols() const { return rc(shape()).cols; }

double Tensor::scalar() const {
    const auto& v = values();
    if (v.size() != 1)
        throw DimensionError("scalar() on tensor of shape " + shape_str(shape()));
    return v[0];
}

void Tape::check(Tensor t) const {
    if (t.tape != this || t.id < 0 || static_cast<size_t>(t.id) >= nodes_.size())
        throw DomainError("tensor does not belong to this tape");
}

Tensor Tape::leaf(Shape shape, std::vector<double> values, std::string name) {
    if (numel(shape) != static_cast<int64_t>(values.size()))
        throw DimensionError("leaf shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    Node n;
    n.op = Op::Leaf;
    n.shape = std::move(shape);
    n.value = std::move(values);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    int id = static_cast<int>(nodes_.size()) - 1;
    if (!name.empty()) named_leaves_.emplace_back(std::move(name), id);
    return {this, id};
}

Tensor Tape::input(Shape shape, std::vector<double> values) {
    if (numel(shape) != static_cast<int64_t>(values.size()))
        throw DimensionError("input shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    Node n;
    n.op = Op::Input;
    n.shape = std::move(shape);
    n.value = std::move(values);
    n.requires_grad = false;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Tensor Tape::emit(Op op, Shape shape, std::vector<int> parents, std::vector<int> iaux,
                  std::vector<double> daux) {
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    n.parents = std::move(parents);
    n.iaux = std::move(iaux);
    n.daux = std::move(daux);
    for (int p : n.parents) n.requires_grad = n.requires_grad || nodes_[static_cast<size_t>(p)].requires_grad;
    n.value = eval_node(n);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Tensor Tape::reshape(Tensor a, Shape s) {
    check(a);
    if (numel(s) != numel(a.shape()))
        throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(s) +
                             " changes element count");
    return emit(Op::Reshape, std::move(s), {a.id});
}

Tensor Tape::add(Tensor a, Tensor b) {
    check(a); check(b);
    if (a.shape() != b.shape())
        throw DimensionError("add shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    return emit(Op::Add, a.shape(), {a.id, b.id});
}

Tensor Tape::sub(Tensor a, Tensor b) {
    check(a); check(b);
    if (a.shape() != b.shape())
        throw DimensionError("sub shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    return emit(Op::Sub, a.shape(), {a.id, b.id});
}

Tensor Tape::mul(Tensor a, Tensor b) {
    check(a); check(b);
    if (a.shape() != b.shape())
        throw DimensionError("mul shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    return emit(Op::Mul, a.shape(), {a.id, b.id});
}

Tensor Tape::neg(Tensor a) { check(a); return emit(Op::Neg, a.shape(), {a.id}); }
Tensor Tape::abs(Tensor a) { check(a); return emit(Op::Abs, a.shape(), {a.id}); }

Tensor Tape::scale(Tensor a, double c) {
    check(a);
    return emit(Op::Scale, a.shape(), {a.id}, {}, {c});
}

Tensor Tape::add_const(Tensor a, double c) {
    check(a);
    return emit(Op::AddConst, a.shape(), {a.id}, {}, {c});
}

Tensor Tape::add_row_broadcast(Tensor a, Tensor bias) {
    check(a); check(bias);
    auto [m, n] = rc(a.shape());
    if (numel(bias.shape()) != n)
        throw DimensionError("row-broadcast bias " + shape_str(bias.shape()) + " does not match " +
                             shape_str(a.shape()));
    return emit(Op::AddRowBroadcast, a.shape(), {a.id, bias.id});
}

Tensor Tape::mul_scalar_t(Tensor a, Tensor s) {
    check(a); check(s);
    if (numel(s.shape()) != 1)
        throw DimensionError("scalar factor has shape " + shape_str(s.shape()));
    return emit(Op::MulScalarT, a.shape(), {a.id, s.id});
}

Tensor Tape::matmul(Tensor a, Tensor b) {
    check(a); check(b);
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw DimensionError("matmul shapes incompatible: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    return emit(Op::MatMul, {a.shape()[0], b.shape()[1]}, {a.id, b.id});
}

Tensor Tape::transpose(Tensor a) {
    check(a);
    auto [m, n] = rc(a.shape());
    return emit(Op::Transpose, {n, m}, {a.id});
}

Tensor Tape::repeat_rows(Tensor v, int m) {
    check(v);
    if (m < 1) throw DomainError("repeat_rows count must be positive");
    auto [r, n] = rc(v.shape());
    if (r != 1) throw DimensionError("repeat_rows expects a single row, got " + shape_str(v.shape()));
    return emit(Op::RepeatRows, {m, n}, {v.id});
}

Tensor Tape::relu(Tensor a) { check(a); return emit(Op::Relu, a.shape(), {a.id}); }
Tensor Tape::tanh(Tensor a) { check(a); return emit(Op::Tanh, a.shape(), {a.id}); }
Tensor Tape::exp(Tensor a) { check(a); return emit(Op::Exp, a.shape(), {a.id}); }

Tensor Tape::sigmoid(Tensor a) {
    return add_const(scale(tanh(scale(a, 0.5)), 0.5), 0.5);
}

Tensor Tape::softmax(Tensor a) {
    check(a);
    if (numel(a.shape()) == 0) throw DomainError("softmax of empty tensor");
    return emit(Op::Softmax, a.shape(), {a.id});
}

Tensor Tape::log_softmax(Tensor a) {
    check(a);
    if (numel(a.shape()) == 0) throw DomainError("log_softmax of empty tensor");
    return emit(Op::LogSoftmax, a.shape(), {a.id});
}

Tensor Tape::layer_norm(Tensor x, Tensor gamma, Tensor beta) {
    check(x); check(gamma); check(beta);
    auto [m, n] = rc(x.shape());
    if (numel(gamma.shape()) != n || numel(beta.shape()) != n)
        throw DimensionError("layer_norm affine params do not match " + shape_str(x.shape()));
    return emit(Op::LayerNorm, x.shape(), {x.id, gamma.id, beta.id}, {}, {kLayerNormEps});
}

Tensor Tape::l2_normalize_rows(Tensor a) {
    check(a);
    return emit(Op::L2NormRows, a.shape(), {a.id});
}

Tensor Tape::embed_gather(Tensor table, const std::vector<int>& ids) {
    check(table);
    if (table.shape().size() != 2)
        throw DimensionError("embedding table must be rank-2, got " + shape_str(table.shape()));
    if (ids.empty()) throw DomainError("embed_gather with no ids");
    int v = table.shape()[0];
    for (int id : ids)
        if (id < 0 || id >= v)
            throw DomainError("embedding id " + std::to_string(id) + " outside table of " +
                              std::to_string(v) + " rows");
    return emit(Op::EmbedGather, {static_cast<int>(ids.size()), table.shape()[1]}, {table.id}, ids);
}

Tensor Tape::gather_elems(Tensor a, const std::vector<int>& row_ids, const std::vector<int>& col_ids) {
    check(a);
    if (row_ids.size() != col_ids.size() || row_ids.empty())
        throw DomainError("gather_elems needs equal non-empty index lists");
    auto [m, n] = rc(a.shape());
    std::vector<int> iaux;
    iaux.reserve(row_ids.size() * 2);
    for (size_t i = 0; i < row_ids.size(); ++i) {
        if (row_ids[i] < 0 || row_ids[i] >= m || col_ids[i] < 0 || col_ids[i] >= n)
            throw DomainError("gather_elems index (" + std::to_string(row_ids[i]) + "," +
                              std::to_string(col_ids[i]) + ") outside " + shape_str(a.shape()));
        iaux.push_back(row_ids[i]);
        iaux.push_back(col_ids[i]);
    }
    return emit(Op::GatherElems, {static_cast<int>(row_ids.size())}, {a.id}, std::move(iaux));
}

Tensor Tape::concat_rows(Tensor a, Tensor b) {
    check(a); check(b);
    auto [ma, na] = rc(a.shape());
    auto [mb, nb] = rc(b.shape());
    if (na != nb)
        throw DimensionError("concat_rows widths differ: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    return emit(Op::ConcatRows, {ma + mb, na}, {a.id, b.id});
}

Tensor Tape::concat_cols(Tensor a, Tensor b) {
    check(a); check(b);
    auto [ma, na] = rc(a.shape());
    auto [mb, nb] = rc(b.shape());
    if (ma != mb)
        throw DimensionError("concat_cols heights differ: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    return emit(Op::ConcatCols, {ma, na + nb}, {a.id, b.id});
}

Tensor Tape::slice_rows(Tensor a, int r0, int count) {
    check(a);
    auto [m, n] = rc(a.shape());
    if (r0 < 0 || count < 1 || r0 + count > m)
        throw DimensionError("slice_rows [" + std::to_string(r0) + "," + std::to_string(r0 + count) +
                             ") outside " + shape_str(a.shape()));
    return emit(Op::SliceRows, {count, n}, {a.id}, {r0, count});
}

Tensor Tape::slice_cols(Tensor a, int c0, int count) {
    check(a);
    auto [m, n] = rc(a.shape());
    if (c0 < 0 || count < 1 || c0 + count > n)
        throw DimensionError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c0 + count) +
                             ") outside " + shape_str(a.shape()));
    return emit(Op::SliceCols, {m, count}, {a.id}, {c0, count});
}

Tensor Tape::sum_all(Tensor a) { check(a); return emit(Op::SumAll, {1}, {a.id}); }
Tensor Tape::mean_all(Tensor a) { check(a); return emit(Op::MeanAll, {1}, {a.id}); }

Tensor Tape::mean_rows(Tensor a) {
    check(a);
    auto [m, n] = rc(a.shape());
    return emit(Op::MeanRows, {1, n}, {a.id});
}

std::vector<double> Tape::eval_node(const Node& n) const {
    auto pv = [&](int k) -> const std::vector<double>& {
        return nodes_[static_cast<size_t>(n.parents[static_cast<size_t>(k)])].value;
    };
    auto pshape = [&](int k) -> const Shape& {
        return nodes_[static_cast<size_t>(n.parents[static_cast<size_t>(k)])].shape;
    };
    std::vector<double> out(static_cast<size_t>(numel(n.shape)));

    switch (n.op) {
        case Op::Leaf:
        case Op::Input:
            return n.value;
        case Op::Reshape:
            return pv(0);
        case Op::Add: {
            const auto& a = pv(0); const auto& b = pv(1);
            for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
            return out;
        }
        case Op::Sub: {
            const auto& a = pv(0); const auto& b = pv(1);
            for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
            return out;
        }
        case Op::Mul: {
            const auto& a = pv(0); const auto& b = pv(1);
            for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
            return out;
        }
        case Op::Neg: {
            const auto& a = pv(0);
            for (size_t i = 0; i < out.size(); ++i) out[i] = -a[i];
            return out;
        }
        case Op::Abs: {
            const auto& a = pv(0);
            for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(a[i]);
            return out;
        }
        case Op::Scale: {
            const auto& a = pv(0);
            for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] * n.daux[0];
            return out;
        }
        case Op::AddConst: {
            const auto& a = pv(0);
            for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] + n.daux[0];
            return out;
        }
        case Op::AddRowBroadcast: {
            const auto& a = pv(0); const auto& b = pv(1);
            auto [m, c] = rc(n.shape);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c; ++j)
                    out[static_cast<size_t>(i) * c + j] = a[static_cast<size_t>(i) * c + j] + b[static_cast<size_t>(j)];
            return out;
        }
        case Op::MulScalarT: {
            const auto& a = pv(0); double s = pv(1)[0];
            for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
            return out;
        }
        case Op::MatMul: {
            int m = pshape(0)[0], k = pshape(0)[1], c = pshape(1)[1];
            mm_nn(pv(0).data(), pv(1).data(), out.data(), m, k, c);
            return out;
        }
        case Op::Transpose: {
            auto [m, c] = rc(pshape(0));
            const auto& a = pv(0);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c; ++j)
                    out[static_cast<size_t>(j) * m + i] = a[static_cast<size_t>(i) * c + j];
            return out;
        }
        case Op::RepeatRows: {
            const auto& a = pv(0);
            auto [m, c] = rc(n.shape);
            for (int i = 0; i < m; ++i)
                std::copy(a.begin(), a.end(), out.begin() + static_cast<size_t>(i) * c);
            return out;
        }
        case Op::Relu: {
            const auto& a = pv(0);
            for (size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
            return out;
        }
        case Op::Tanh: {
            const auto& a = pv(0);
            for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a[i]);
            return out;
        }
        case Op::Exp: {
            const auto& a = pv(0);
            for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
            return out;
        }
        case Op::Softmax: {
            const auto& a = pv(0);
            auto [m, c] = rc(n.shape);
            for (int i = 0; i < m; ++i) {
                const double* row = a.data() + static_cast<size_t>(i) * c;
                double* orow = out.data() + static_cast<size_t>(i) * c;
                double mx = row[0];
                for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                double s = 0.0;
                for (int j = 0; j < c; ++j) {
                    orow[j] = std::exp(row[j] - mx);
                    s += orow[j];
                }
                for (int j = 0; j < c; ++j) orow[j] /= s;
            }
            return out;
        }
        case Op::LogSoftmax: {
            const auto& a = pv(0);
            auto [m, c] = rc(n.shape);
            for (int i = 0; i < m; ++i) {
                const double* row = a.data() + static_cast<size_t>(i) * c;
                double* orow = out.data() + static_cast<size_t>(i) * c;
                double mx = row[0];
                for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                double s = 0.0;
                for (int j = 0; j < c; ++j) s += std::exp(row[j] - mx);
                double lse = mx + std::log(s);
                for (int j = 0; j < c; ++j) orow[j] = row[j] - lse;
            }
            return out;
        }
        case Op::LayerNorm: {
            const auto& x = pv(0); const auto& g = pv(1); const auto& b = pv(2);
            auto [m, c] = rc(n.shape);
            double eps = n.daux[0];
            for (int i = 0; i < m; ++i) {
                const double* row = x.data() + static_cast<size_t>(i) * c;
                double* orow = out.data() + static_cast<size_t>(i) * c;
                double mu = 0.0;
                for (int j = 0; j < c; ++j) mu += row[j];
                mu /= c;
                double var = 0.0;
                for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
                var /= c;
                double inv = 1.0 / std::sqrt(var + eps);
                for (int j = 0; j < c; ++j) orow[j] = (row[j] - mu) * inv * g[static_cast<size_t>(j)] + b[static_cast<size_t>(j)];
            }
            return out;
        }
        case Op::L2NormRows: {
            const auto& a = pv(0);
            auto [m, c] = rc(n.shape);
            for (int i = 0; i < m; ++i) {
                const double* row = a.data() + static_cast<size_t>(i) * c;
                double* orow = out.data() + static_cast<size_t>(i) * c;
                double r2 = 0.0;
                for (int j = 0; j < c; ++j) r2 += row[j] * row[j];
                double r = std::sqrt(r2);
                double denom = r > 0.0 ? r : 1.0;
                for (int j = 0; j < c; ++j) orow[j] = row[j] / denom;
            }
            return out;
        }
        case Op::EmbedGather: {
            const auto& t = pv(0);
            int d = pshape(0)[1];
            for (size_t i = 0; i < n.iaux.size(); ++i)
                std::copy(t.begin() + static_cast<size_t>(n.iaux[i]) * d,
                          t.begin() + static_cast<size_t>(n.iaux[i] + 1) * d,
                          out.begin() + i * static_cast<size_t>(d));
            return out;
        }
        case Op::GatherElems: {
            const auto& a = pv(0);
            auto [m, c] = rc(pshape(0));
            (void)m;
            for (size_t i = 0; i < out.size(); ++i)
                out[i] = a[static_cast<size_t>(n.iaux[2 * i]) * c + n.iaux[2 * i + 1]];
            return out;
        }
        case Op::ConcatRows: {
            const auto& a = pv(0); const auto& b = pv(1);
            std::copy(a.begin(), a.end(), out.begin());
            std::copy(b.begin(), b.end(), out.begin() + static_cast<ptrdiff_t>(a.size()));
            return out;
        }
        case Op::ConcatCols: {
            const auto& a = pv(0); const auto& b = pv(1);
            auto [m, na] = rc(pshape(0));
            int nb = rc(pshape(1)).cols;
            for (int i = 0; i < m; ++i) {
                std::copy(a.begin() + static_cast<size_t>(i) * na, a.begin() + static_cast<size_t>(i + 1) * na,
                          out.begin() + static_cast<size_t>(i) * (na + nb));
                std::copy(b.begin() + static_cast<size_t>(i) * nb, b.begin() + static_cast<size_t>(i + 1) * nb,
                          out.begin() + static_cast<size_t>(i) * (na + nb) + na);
            }
            return out;
        }
        case Op::SliceRows: {
            const auto& a = pv(0);
            int c = rc(pshape(0)).cols;
            int r0 = n.iaux[0], cnt = n.iaux[1];
            std::copy(a.begin() + static_cast<size_t>(r0) * c, a.begin() + static_cast<size_t>(r0 + cnt) * c,
                      out.begin());
            return out;
        }
        case Op::SliceCols: {
            const auto& a = pv(0);
            auto [m, c] = rc(pshape(0));
            int c0 = n.iaux[0], cnt = n.iaux[1];
            for (int i = 0; i < m; ++i)
                std::copy(a.begin() + static_cast<size_t>(i) * c + c0,
                          a.begin() + static_cast<size_t>(i) * c + c0 + cnt,
                          out.begin() + static_cast<size_t>(i) * cnt);
            return out;
        }
        case Op::SumAll: {
            const auto& a = pv(0);
            double s = 0.0;
            for (double v : a) s += v;
            out[0] = s;
            return out;
        }
        case Op::MeanAll: {
            const auto& a = pv(0);
            double s = 0.0;
            for (double v : a) s += v;
            out[0] = s / static_cast<double>(a.size());
            return out;
        }
        case Op::MeanRows: {
            const auto& a = pv(0);
            auto [m, c] = rc(pshape(0));
            for (int j = 0; j < c; ++j) {
                double s = 0.0;
                for (int i = 0; i < m; ++i) s += a[static_cast<size_t>(i) * c + j];
                out[static_cast<size_t>(j)] = s / m;
            }
            return out;
        }
    }
    throw DomainError("unhandled op");
}

std::vector<double>& Tape::grad_buf(int id) {
    auto& g = grads_[static_cast<size_t>(id)];
    if (g.empty()) g.assign(static_cast<size_t>(numel(nodes_[static_cast<size_t>(id)].shape)), 0.0);
    return g;
}

void Tape::backward(Tensor root, const std::vector<double>& seed) {
    check(root);
    const Node& rn = nodes_[static_cast<size_t>(root.id)];
    if (static_cast<int64_t>(seed.size()) != numel(rn.shape))
        throw DimensionError("backward seed of " + std::to_string(seed.size()) +
                             " values does not match root shape " + shape_str(rn.shape));
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<size_t>(root.id)] = seed;
    for (int id = root.id; id >= 0; --id) {
        if (grads_[static_cast<size_t>(id)].empty()) continue;
        if (!nodes_[static_cast<size_t>(id)].requires_grad) continue;
        backward_node(id);
    }
}

void Tape::backward_node(int id) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    const std::vector<double>& g = grads_[static_cast<size_t>(id)];
    auto pv = [&](int k) -> const std::vector<double>& {
        return nodes_[static_cast<size_t>(n.parents[static_cast<size_t>(k)])].value;
    };
    auto pshape = [&](int k) -> const Shape& {
        return nodes_[static_cast<size_t>(n.parents[static_cast<size_t>(k)])].shape;
    };
    auto pneeds = [&](int k) {
        return nodes_[static_cast<size_t>(n.parents[static_cast<size_t>(k)])].requires_grad;
    };
    auto pg = [&](int k) -> std::vector<double>& { return grad_buf(n.parents[static_cast<size_t>(k)]); };

    switch (n.op) {
        case Op::Leaf:
        case Op::Input:
            return;
        case Op::Reshape: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            return;
        }
        case Op::Add: {
            for (int k = 0; k < 2; ++k) {
                if (!pneeds(k)) continue;
                auto& gp = pg(k);
                for (size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
            }
            return;
        }
        case Op::Sub: {
            if (pneeds(0)) {
                auto& ga = pg(0);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (pneeds(1)) {
                auto& gb = pg(1);
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
            return;
        }
        case Op::Mul: {
            if (pneeds(0)) {
                auto& ga = pg(0); const auto& b = pv(1);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
            }
            if (pneeds(1)) {
                auto& gb = pg(1); const auto& a = pv(0);
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
            }
            return;
        }
        case Op::Neg: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            for (size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
            return;
        }
        case Op::Abs: {
            if (!pneeds(0)) return;
            auto& ga = pg(0); const auto& a = pv(0);
            for (size_t i = 0; i < g.size(); ++i)
                ga[i] += g[i] * (a[i] > 0.0 ? 1.0 : (a[i] < 0.0 ? -1.0 : 0.0));
            return;
        }
        case Op::Scale: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.daux[0];
            return;
        }
        case Op::AddConst: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            return;
        }
        case Op::AddRowBroadcast: {
            auto [m, c] = rc(n.shape);
            if (pneeds(0)) {
                auto& ga = pg(0);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (pneeds(1)) {
                auto& gb = pg(1);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < c; ++j) gb[static_cast<size_t>(j)] += g[static_cast<size_t>(i) * c + j];
            }
            return;
        }
        case Op::MulScalarT: {
            if (pneeds(0)) {
                auto& ga = pg(0); double s = pv(1)[0];
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
            }
            if (pneeds(1)) {
                auto& gs = pg(1); const auto& a = pv(0);
                double acc = 0.0;
                for (size_t i = 0; i < g.size(); ++i) acc += g[i] * a[i];
                gs[0] += acc;
            }
            return;
        }
        case Op::MatMul: {
            int m = pshape(0)[0], k = pshape(0)[1], c = pshape(1)[1];
            if (pneeds(0)) mm_nt_acc(g.data(), pv(1).data(), pg(0).data(), m, c, k);
            if (pneeds(1)) mm_tn_acc(pv(0).data(), g.data(), pg(1).data(), m, k, c);
            return;
        }
        case Op::Transpose: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            auto [m, c] = rc(pshape(0));
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c; ++j)
                    ga[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(j) * m + i];
            return;
        }
        case Op::RepeatRows: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            auto [m, c] = rc(n.shape);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c; ++j) ga[static_cast<size_t>(j)] += g[static_cast<size_t>(i) * c + j];
            return;
        }
        case Op::Relu: {
            if (!pneeds(0)) return;
            auto& ga = pg(0); const auto& a = pv(0);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += a[i] > 0.0 ? g[i] : 0.0;
            return;
        }
        case Op::Tanh: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
            return;
        }
        case Op::Exp: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.value[i];
            return;
        }
        case Op::Softmax: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            auto [m, c] = rc(n.shape);
            for (int i = 0; i < m; ++i) {
                const double* y = n.value.data() + static_cast<size_t>(i) * c;
                const double* gr = g.data() + static_cast<size_t>(i) * c;
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += gr[j] * y[j];
                for (int j = 0; j < c; ++j) ga[static_cast<size_t>(i) * c + j] += y[j] * (gr[j] - dot);
            }
            return;
        }
        case Op::LogSoftmax: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            auto [m, c] = rc(n.shape);
            for (int i = 0; i < m; ++i) {
                const double* y = n.value.data() + static_cast<size_t>(i) * c;
                const double* gr = g.data() + static_cast<size_t>(i) * c;
                double s = 0.0;
                for (int j = 0; j < c; ++j) s += gr[j];
                for (int j = 0; j < c; ++j)
                    ga[static_cast<size_t>(i) * c + j] += gr[j] - std::exp(y[j]) * s;
            }
            return;
        }
        case Op::LayerNorm: {
            auto [m, c] = rc(n.shape);
            const auto& x = pv(0); const auto& gam = pv(1);
            double eps = n.daux[0];
            std::vector<double> xhat(static_cast<size_t>(c));
            for (int i = 0; i < m; ++i) {
                const double* row = x.data() + static_cast<size_t>(i) * c;
                const double* gr = g.data() + static_cast<size_t>(i) * c;
                double mu = 0.0;
                for (int j = 0; j < c; ++j) mu += row[j];
                mu /= c;
                double var = 0.0;
                for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
                var /= c;
                double inv = 1.0 / std::sqrt(var + eps);
                for (int j = 0; j < c; ++j) xhat[static_cast<size_t>(j)] = (row[j] - mu) * inv;
                if (pneeds(0)) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < c; ++j) {
                        double gh = gr[j] * gam[static_cast<size_t>(j)];
                        m1 += gh;
                        m2 += gh * xhat[static_cast<size_t>(j)];
                    }
                    m1 /= c;
                    m2 /= c;
                    auto& gx = pg(0);
                    for (int j = 0; j < c; ++j) {
                        double gh = gr[j] * gam[static_cast<size_t>(j)];
                        gx[static_cast<size_t>(i) * c + j] += (gh - m1 - xhat[static_cast<size_t>(j)] * m2) * inv;
                    }
                }
                if (pneeds(1)) {
                    auto& gg = pg(1);
                    for (int j = 0; j < c; ++j) gg[static_cast<size_t>(j)] += gr[j] * xhat[static_cast<size_t>(j)];
                }
                if (pneeds(2)) {
                    auto& gb = pg(2);
                    for (int j = 0; j < c; ++j) gb[static_cast<size_t>(j)] += gr[j];
                }
            }
            return;
        }
        case Op::L2NormRows: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            auto [m, c] = rc(n.shape);
            const auto& x = pv(0);
            for (int i = 0; i < m; ++i) {
                const double* row = x.data() + static_cast<size_t>(i) * c;
                const double* y = n.value.data() + static_cast<size_t>(i) * c;
                const double* gr = g.data() + static_cast<size_t>(i) * c;
                double r2 = 0.0;
                for (int j = 0; j < c; ++j) r2 += row[j] * row[j];
                double r = std::sqrt(r2);
                double denom = r > 0.0 ? r : 1.0;
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += gr[j] * y[j];
                for (int j = 0; j < c; ++j)
                    ga[static_cast<size_t>(i) * c + j] += (gr[j] - y[j] * dot) / denom;
            }
            return;
        }
        case Op::EmbedGather: {
            if (!pneeds(0)) return;
            auto& gt = pg(0);
            int d = pshape(0)[1];
            for (size_t i = 0; i < n.iaux.size(); ++i)
                for (int j = 0; j < d; ++j)
                    gt[static_cast<size_t>(n.iaux[i]) * d + j] += g[i * static_cast<size_t>(d) + j];
            return;
        }
        case Op::GatherElems: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            int c = rc(pshape(0)).cols;
            for (size_t i = 0; i < g.size(); ++i)
                ga[static_cast<size_t>(n.iaux[2 * i]) * c + n.iaux[2 * i + 1]] += g[i];
            return;
        }
        case Op::ConcatRows: {
            size_t na = pv(0).size();
            if (pneeds(0)) {
                auto& ga = pg(0);
                for (size_t i = 0; i < na; ++i) ga[i] += g[i];
            }
            if (pneeds(1)) {
                auto& gb = pg(1);
                for (size_t i = 0; i < pv(1).size(); ++i) gb[i] += g[na + i];
            }
            return;
        }
        case Op::ConcatCols: {
            auto [m, na] = rc(pshape(0));
            int nb = rc(pshape(1)).cols;
            if (pneeds(0)) {
                auto& ga = pg(0);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < na; ++j)
                        ga[static_cast<size_t>(i) * na + j] += g[static_cast<size_t>(i) * (na + nb) + j];
            }
            if (pneeds(1)) {
                auto& gb = pg(1);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < nb; ++j)
                        gb[static_cast<size_t>(i) * nb + j] += g[static_cast<size_t>(i) * (na + nb) + na + j];
            }
            return;
        }
        case Op::SliceRows: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            int c = rc(pshape(0)).cols;
            int r0 = n.iaux[0];
            for (size_t i = 0; i < g.size(); ++i) ga[static_cast<size_t>(r0) * c + i] += g[i];
            return;
        }
        case Op::SliceCols: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            auto [m, c] = rc(pshape(0));
            int c0 = n.iaux[0], cnt = n.iaux[1];
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < cnt; ++j)
                    ga[static_cast<size_t>(i) * c + c0 + j] += g[static_cast<size_t>(i) * cnt + j];
            return;
        }
        case Op::SumAll: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
            return;
        }
        case Op::MeanAll: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            double s = g[0] / static_cast<double>(ga.size());
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += s;
            return;
        }
        case Op::MeanRows: {
            if (!pneeds(0)) return;
            auto& ga = pg(0);
            auto [m, c] = rc(pshape(0));
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c; ++j) ga[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(j)] / m;
            return;
        }
    }
}

const std::vector<double>& Tape::grad(Tensor t) const {
    check(t);
    if (grads_.size() != nodes_.size())
        throw DomainError("grad() before backward()");
    const auto& g = grads_[static_cast<size_t>(t.id)];
    if (g.empty()) throw DomainError("no gradient recorded for this tensor");
    return g;
}

bool Tape::has_grad(Tensor t) const {
    check(t);
    return grads_.size() == nodes_.size() && !grads_[static_cast<size_t>(t.id)].empty();
}

bool Tape::replay_check() const {
    for (const Node& n : nodes_) {
        std::vector<double> v = eval_node(n);
        if (v.size() != n.value.size()) return false;
        for (size_t i = 0; i < v.size(); ++i) {
            // bit comparison; distinguishes 0.0 from -0.0 and matches NaN payloads
            if (std::memcmp(&v[i], &n.value[i], sizeof(double)) != 0) return false;
        }
    }
    return true;
}

}  // namespace occ::num
