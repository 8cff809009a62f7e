#ifndef LEBA_AUTOGRAD_HPP
#define LEBA_AUTOGRAD_HPP

#include <memory>
#include <vector>

#include "leba/tensor.hpp"

namespace leba {

// Reverse-mode autodiff over a retained DAG. Every derivative rule is itself
// expressed with graph primitives, so a gradient produced by grad_as_node is
// an ordinary node and can be differentiated again (the mixed second-order
// derivatives the surrogate update needs).

enum class Op {
    kLeaf,
    kAdd,
    kSub,
    kMul,
    kDiv,
    kNeg,
    kAddScalar,
    kMulScalar,
    kMatmul,
    kTranspose,
    kReshape,
    kConv2d,
    kConv2dDInput,
    kConv2dDWeight,
    kBroadcastHw,
    kSumHw,
    kRelu,
    kReluMask,
    kLog,
    kExp,
    kLogSoftmax,
    kSumAll,
    kMeanAll,
    kGather1d,
};

struct GraphNode;
using NodeRef = std::shared_ptr<GraphNode>;

struct GraphNode {
    Op op = Op::kLeaf;
    std::vector<NodeRef> parents;
    Tensor value;
    bool requires_grad = false;
    // op attributes
    double scalar_arg = 0.0;                 // kAddScalar / kMulScalar
    std::size_t index_arg = 0;               // kGather1d
    std::vector<std::size_t> shape_arg;      // kReshape (original), kConv2dDInput (x shape)
    std::size_t k_arg = 0;                   // kConv2dDWeight kernel size
};

// Leaf construction. `constant` never takes gradients.
NodeRef variable(Tensor value);
NodeRef constant(Tensor value);

// Forward primitives. Shapes follow the tensor-kernel semantics.
NodeRef add(const NodeRef& a, const NodeRef& b);
NodeRef sub(const NodeRef& a, const NodeRef& b);
NodeRef mul(const NodeRef& a, const NodeRef& b);
NodeRef div(const NodeRef& a, const NodeRef& b);
NodeRef neg(const NodeRef& a);
NodeRef add_scalar(const NodeRef& a, double c);
NodeRef mul_scalar(const NodeRef& a, double c);
NodeRef matmul(const NodeRef& a, const NodeRef& b);
NodeRef transpose(const NodeRef& a);
NodeRef reshape(const NodeRef& a, std::vector<std::size_t> shape);
NodeRef conv2d(const NodeRef& x, const NodeRef& w);
NodeRef conv2d_dinput(const NodeRef& g, const NodeRef& w, std::vector<std::size_t> x_shape);
NodeRef conv2d_dweight(const NodeRef& g, const NodeRef& x, std::size_t k);
NodeRef broadcast_hw(const NodeRef& b, std::size_t H, std::size_t W);
NodeRef sum_hw(const NodeRef& a);
NodeRef relu(const NodeRef& a);
NodeRef relu_mask(const NodeRef& a);
NodeRef log_(const NodeRef& a);
NodeRef exp_(const NodeRef& a);
NodeRef log_softmax(const NodeRef& a);
NodeRef sum_all(const NodeRef& a);
NodeRef mean_all(const NodeRef& a);
NodeRef gather1d(const NodeRef& a, std::size_t index);

// Composites.
NodeRef dot(const NodeRef& a, const NodeRef& b);          // sum(a*b) -> scalar
NodeRef mse(const NodeRef& a, const NodeRef& b);          // mean((a-b)^2) -> scalar
NodeRef squared_error(const NodeRef& a, const NodeRef& b);  // sum((a-b)^2) -> scalar

// dRoot/dWrt for each wrt node. root must be scalar-valued; a wrt that is not
// an ancestor of root yields a zero tensor of its shape. Contributions from
// multiple use sites sum. The graph is retained.
std::vector<Tensor> backward(const NodeRef& root, const std::vector<NodeRef>& wrts);

// Same, but the gradients come back as graph nodes that participate in
// further differentiation. A non-ancestor wrt yields a constant zero node.
std::vector<NodeRef> grad_as_node(const NodeRef& root, const std::vector<NodeRef>& wrts);

// Detach: a fresh leaf sharing only the value (drops graph history).
NodeRef detach(const NodeRef& a);

}  // namespace leba

#endif  // LEBA_AUTOGRAD_HPP
