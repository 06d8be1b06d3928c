#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "occ/error.hpp"

namespace occ::num {

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Handle to a node on a tape. Cheap to copy; values live on the tape.
struct Tensor {
    Tape* tape = nullptr;
    int id = -1;

    const Shape& shape() const;
    const std::vector<double>& values() const;
    bool grad_enabled() const;
    int rows() const;
    int cols() const;
    double scalar() const;  // single-element tensors
};

enum class Op : uint8_t {
    Leaf,
    Input,
    Reshape,
    Add,
    Sub,
    Mul,
    Neg,
    Abs,
    Scale,
    AddConst,
    AddRowBroadcast,
    MulScalarT,
    MatMul,
    Transpose,
    RepeatRows,
    Relu,
    Tanh,
    Exp,
    Softmax,
    LogSoftmax,
    LayerNorm,
    L2NormRows,
    EmbedGather,
    GatherElems,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    SumAll,
    MeanAll,
    MeanRows,
};

// Ordered record of primitive operations. Node i only consumes nodes j < i, so a
// single reverse sweep propagates gradients and a forward sweep replays values.
// A tape is confined to one thread; independent tapes may run concurrently.
class Tape {
public:
    // Grad-enabled leaf (a parameter). `name` keys the gradient after backward().
    Tensor leaf(Shape shape, std::vector<double> values, std::string name = "");
    // Constant input; no gradient flows into it.
    Tensor input(Shape shape, std::vector<double> values);
    Tensor scalar_input(double v) { return input({1}, {v}); }

    Tensor reshape(Tensor a, Shape s);
    Tensor add(Tensor a, Tensor b);
    Tensor sub(Tensor a, Tensor b);
    Tensor mul(Tensor a, Tensor b);
    Tensor neg(Tensor a);
    Tensor abs(Tensor a);
    Tensor scale(Tensor a, double c);
    Tensor add_const(Tensor a, double c);
    Tensor add_row_broadcast(Tensor a, Tensor bias);  // a:[m,n] + bias:[n] per row
    Tensor mul_scalar_t(Tensor a, Tensor s);          // s: single element
    Tensor matmul(Tensor a, Tensor b);
    Tensor transpose(Tensor a);
    Tensor repeat_rows(Tensor v, int m);              // v:[n] -> [m,n]
    Tensor relu(Tensor a);
    Tensor tanh(Tensor a);
    Tensor exp(Tensor a);
    Tensor sigmoid(Tensor a);                         // composed from tanh
    Tensor softmax(Tensor a);                         // over last dim, max-subtracted
    Tensor log_softmax(Tensor a);
    Tensor layer_norm(Tensor x, Tensor gamma, Tensor beta);
    Tensor l2_normalize_rows(Tensor a);
    Tensor embed_gather(Tensor table, const std::vector<int>& ids);
    Tensor gather_elems(Tensor a, const std::vector<int>& row_ids, const std::vector<int>& col_ids);
    Tensor concat_rows(Tensor a, Tensor b);
    Tensor concat_cols(Tensor a, Tensor b);
    Tensor slice_rows(Tensor a, int r0, int count);
    Tensor slice_cols(Tensor a, int c0, int count);
    Tensor sum_all(Tensor a);
    Tensor mean_all(Tensor a);
    Tensor mean_rows(Tensor a);                       // [m,n] -> [1,n]

    // Reverse sweep from `root` seeded with d(objective)/d(root). Seed length must
    // match the root's element count. Gradients of earlier backward calls are cleared.
    void backward(Tensor root, const std::vector<double>& seed);
    void backward_scalar(Tensor root) { backward(root, {1.0}); }

    const std::vector<double>& grad(Tensor t) const;
    bool has_grad(Tensor t) const;

    // Named grad-enabled leaves in creation order.
    const std::vector<std::pair<std::string, int>>& named_leaves() const { return named_leaves_; }

    // Recomputes every node from its parents and verifies bit-exact agreement with
    // the recorded values.
    bool replay_check() const;

    size_t size() const { return nodes_.size(); }
    const Shape& shape_of(int id) const { return nodes_[static_cast<size_t>(id)].shape; }
    const std::vector<double>& values_of(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool grad_enabled_of(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

private:
    struct Node {
        Op op;
        Shape shape;
        std::vector<double> value;
        std::vector<int> parents;
        std::vector<int> iaux;
        std::vector<double> daux;
        bool requires_grad = false;
    };

    // deque: node references remain valid while later ops are emitted
    std::deque<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    std::vector<std::pair<std::string, int>> named_leaves_;

    Tensor emit(Op op, Shape shape, std::vector<int> parents, std::vector<int> iaux = {},
                std::vector<double> daux = {});
    std::vector<double> eval_node(const Node& n) const;
    void backward_node(int id);
    void check(Tensor t) const;
    std::vector<double>& grad_buf(int id);
};

}  // namespace occ::num
