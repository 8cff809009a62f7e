#include "leba/autograd.hpp"

#include <unordered_map>

namespace leba {

namespace {

NodeRef make_node(Op op, std::vector<NodeRef> parents, Tensor value) {
    auto n = std::make_shared<GraphNode>();
    n->op = op;
    n->parents = std::move(parents);
    n->value = std::move(value);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    return n;
}

}  // namespace

NodeRef variable(Tensor value) {
    auto n = std::make_shared<GraphNode>();
    n->value = std::move(value);
    n->requires_grad = true;
    return n;
}

NodeRef constant(Tensor value) {
    auto n = std::make_shared<GraphNode>();
    n->value = std::move(value);
    return n;
}

NodeRef add(const NodeRef& a, const NodeRef& b) { return make_node(Op::kAdd, {a, b}, k_add(a->value, b->value)); }
NodeRef sub(const NodeRef& a, const NodeRef& b) { return make_node(Op::kSub, {a, b}, k_sub(a->value, b->value)); }
NodeRef mul(const NodeRef& a, const NodeRef& b) { return make_node(Op::kMul, {a, b}, k_mul(a->value, b->value)); }
NodeRef div(const NodeRef& a, const NodeRef& b) { return make_node(Op::kDiv, {a, b}, k_div(a->value, b->value)); }
NodeRef neg(const NodeRef& a) { return make_node(Op::kNeg, {a}, k_neg(a->value)); }

NodeRef add_scalar(const NodeRef& a, double c) {
    auto n = make_node(Op::kAddScalar, {a}, k_add_scalar(a->value, c));
    n->scalar_arg = c;
    return n;
}

NodeRef mul_scalar(const NodeRef& a, double c) {
    auto n = make_node(Op::kMulScalar, {a}, k_mul_scalar(a->value, c));
    n->scalar_arg = c;
    return n;
}

NodeRef matmul(const NodeRef& a, const NodeRef& b) { return make_node(Op::kMatmul, {a, b}, k_matmul(a->value, b->value)); }
NodeRef transpose(const NodeRef& a) { return make_node(Op::kTranspose, {a}, k_transpose(a->value)); }

NodeRef reshape(const NodeRef& a, std::vector<std::size_t> shape) {
    auto n = make_node(Op::kReshape, {a}, k_reshape(a->value, shape));
    n->shape_arg = a->value.shape;
    return n;
}

NodeRef conv2d(const NodeRef& x, const NodeRef& w) { return make_node(Op::kConv2d, {x, w}, k_conv2d(x->value, w->value)); }

NodeRef conv2d_dinput(const NodeRef& g, const NodeRef& w, std::vector<std::size_t> x_shape) {
    if (x_shape.size() != 3) throw ShapeError("conv2d_dinput: x_shape must be {C,H,W}");
    auto n = make_node(Op::kConv2dDInput, {g, w},
                       k_conv2d_dinput(g->value, w->value, x_shape[0], x_shape[1], x_shape[2]));
    n->shape_arg = std::move(x_shape);
    return n;
}

NodeRef conv2d_dweight(const NodeRef& g, const NodeRef& x, std::size_t k) {
    auto n = make_node(Op::kConv2dDWeight, {g, x}, k_conv2d_dweight(g->value, x->value, k));
    n->k_arg = k;
    return n;
}

NodeRef broadcast_hw(const NodeRef& b, std::size_t H, std::size_t W) {
    return make_node(Op::kBroadcastHw, {b}, k_broadcast_hw(b->value, H, W));
}

NodeRef sum_hw(const NodeRef& a) { return make_node(Op::kSumHw, {a}, k_sum_hw(a->value)); }
NodeRef relu(const NodeRef& a) { return make_node(Op::kRelu, {a}, k_relu(a->value)); }

NodeRef relu_mask(const NodeRef& a) {
    // The mask is piecewise constant in its input: it never passes gradient.
    // This is the subgradient convention for relu's second derivative.
    auto n = std::make_shared<GraphNode>();
    n->op = Op::kReluMask;
    n->parents = {a};
    n->value = k_relu_mask(a->value);
    n->requires_grad = false;
    return n;
}

NodeRef log_(const NodeRef& a) { return make_node(Op::kLog, {a}, k_log(a->value)); }
NodeRef exp_(const NodeRef& a) { return make_node(Op::kExp, {a}, k_exp(a->value)); }
NodeRef log_softmax(const NodeRef& a) { return make_node(Op::kLogSoftmax, {a}, k_log_softmax(a->value)); }
NodeRef sum_all(const NodeRef& a) { return make_node(Op::kSumAll, {a}, k_sum_all(a->value)); }
NodeRef mean_all(const NodeRef& a) { return make_node(Op::kMeanAll, {a}, k_mean_all(a->value)); }

NodeRef gather1d(const NodeRef& a, std::size_t index) {
    auto n = make_node(Op::kGather1d, {a}, k_gather1d(a->value, index));
    n->index_arg = index;
    return n;
}

NodeRef dot(const NodeRef& a, const NodeRef& b) { return sum_all(mul(a, b)); }

NodeRef mse(const NodeRef& a, const NodeRef& b) {
    auto d = sub(a, b);
    return mean_all(mul(d, d));
}

NodeRef squared_error(const NodeRef& a, const NodeRef& b) {
    auto d = sub(a, b);
    return sum_all(mul(d, d));
}

NodeRef detach(const NodeRef& a) { return constant(a->value); }

namespace {

// Gradient of `node` w.r.t. its parents[slot], given upstream grad `g`,
// expressed as graph nodes so higher-order differentiation works.
NodeRef vjp(const NodeRef& node, std::size_t slot, const NodeRef& g) {
    const auto& ps = node->parents;
    auto reduce_if_scalar_slot = [&](NodeRef grad, const NodeRef& parent) -> NodeRef {
        // Elementwise op broadcast a scalar operand; fold the grad back down.
        if (parent->value.is_scalar() && !grad->value.is_scalar()) return sum_all(grad);
        return grad;
    };
    switch (node->op) {
        case Op::kAdd:
            return reduce_if_scalar_slot(g, ps[slot]);
        case Op::kSub:
            return reduce_if_scalar_slot(slot == 0 ? g : neg(g), ps[slot]);
        case Op::kMul:
            return reduce_if_scalar_slot(mul(g, ps[1 - slot]), ps[slot]);
        case Op::kDiv:
            if (slot == 0) return reduce_if_scalar_slot(div(g, ps[1]), ps[0]);
            return reduce_if_scalar_slot(neg(div(mul(g, ps[0]), mul(ps[1], ps[1]))), ps[1]);
        case Op::kNeg:
            return neg(g);
        case Op::kAddScalar:
            return g;
        case Op::kMulScalar:
            return mul_scalar(g, node->scalar_arg);
        case Op::kMatmul:
            return slot == 0 ? matmul(g, transpose(ps[1])) : matmul(transpose(ps[0]), g);
        case Op::kTranspose:
            return transpose(g);
        case Op::kReshape:
            return reshape(g, node->shape_arg);
        case Op::kConv2d:
            // y = conv(x, w): dx via the input-grad op, dw via the weight-grad op.
            return slot == 0 ? conv2d_dinput(g, ps[1], ps[0]->value.shape)
                             : conv2d_dweight(g, ps[0], ps[1]->value.shape[2]);
        case Op::kConv2dDInput:
            // z = Cx(g0, w): dg0 = conv(s, w), dw = Cw(g0, s).
            return slot == 0 ? conv2d(g, ps[1]) : conv2d_dweight(ps[0], g, ps[1]->value.shape[2]);
        case Op::kConv2dDWeight:
            // r = Cw(g0, x): dg0 = conv(x, t), dx = Cx(g0, t).
            return slot == 0 ? conv2d(ps[1], g) : conv2d_dinput(ps[0], g, ps[1]->value.shape);
        case Op::kBroadcastHw:
            return sum_hw(g);
        case Op::kSumHw:
            return broadcast_hw(g, ps[0]->value.shape[1], ps[0]->value.shape[2]);
        case Op::kRelu:
            return mul(g, relu_mask(ps[0]));
        case Op::kLog:
            return div(g, ps[0]);
        case Op::kExp:
            return mul(g, node);  // d exp = exp, reuse the node itself
        case Op::kLogSoftmax:
            // dx = g - softmax(x) * sum(g); softmax(x) = exp(node value).
            return sub(g, mul(exp_(node), sum_all(g)));
        case Op::kSumAll:
            return mul(constant(Tensor::full(ps[0]->value.shape, 1.0)), g);
        case Op::kMeanAll:
            return mul(constant(Tensor::full(ps[0]->value.shape,
                                             1.0 / static_cast<double>(ps[0]->value.numel()))),
                       g);
        case Op::kGather1d: {
            Tensor onehot(ps[0]->value.shape);
            onehot.data[node->index_arg] = 1.0;
            return mul(constant(std::move(onehot)), g);
        }
        case Op::kLeaf:
        case Op::kReluMask:
            break;
    }
    throw UnsupportedOpError("vjp: no derivative rule for op tag " +
                             std::to_string(static_cast<int>(node->op)));
}

// Post-order over grad-requiring ancestors of root, iterative.
std::vector<GraphNode*> topo_order(const NodeRef& root) {
    std::vector<GraphNode*> order;
    std::unordered_map<GraphNode*, int> state;  // 0 new, 1 open, 2 done
    std::vector<GraphNode*> stack{root.get()};
    while (!stack.empty()) {
        GraphNode* n = stack.back();
        int& st = state[n];
        if (st == 0) {
            st = 1;
            for (const auto& p : n->parents)
                if (p->requires_grad && state[p.get()] != 2) stack.push_back(p.get());
        } else {
            stack.pop_back();
            if (st == 1) {
                st = 2;
                order.push_back(n);
            }
        }
    }
    return order;  // parents before children
}

std::vector<NodeRef> grad_nodes_impl(const NodeRef& root, const std::vector<NodeRef>& wrts) {
    if (!root->value.is_scalar())
        throw ContractError("backward: root must be scalar-valued, got shape " +
                            shape_str(root->value.shape));
    std::unordered_map<GraphNode*, NodeRef> node_by_ptr;  // keeps parents alive during walk
    std::unordered_map<GraphNode*, NodeRef> grads;
    if (root->requires_grad) {
        auto order = topo_order(root);
        // Map raw pointers back to shared refs so vjps can reference parents.
        for (GraphNode* n : order)
            for (const auto& p : n->parents) node_by_ptr[p.get()] = p;
        node_by_ptr[root.get()] = root;
        grads[root.get()] = constant(Tensor::scalar(1.0));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            GraphNode* n = *it;
            auto git = grads.find(n);
            if (git == grads.end()) continue;
            const NodeRef& g = git->second;
            const NodeRef& nref = node_by_ptr[n];
            for (std::size_t s = 0; s < n->parents.size(); ++s) {
                const NodeRef& p = n->parents[s];
                if (!p->requires_grad) continue;
                NodeRef contrib = vjp(nref, s, g);
                auto pit = grads.find(p.get());
                if (pit == grads.end())
                    grads[p.get()] = contrib;
                else
                    pit->second = add(pit->second, contrib);
            }
        }
    }
    std::vector<NodeRef> out;
    out.reserve(wrts.size());
    for (const auto& w : wrts) {
        auto it = grads.find(w.get());
        if (it != grads.end())
            out.push_back(it->second);
        else
            out.push_back(constant(Tensor::zeros(w->value.shape)));
    }
    return out;
}

}  // namespace

std::vector<Tensor> backward(const NodeRef& root, const std::vector<NodeRef>& wrts) {
    auto nodes = grad_nodes_impl(root, wrts);
    std::vector<Tensor> out;
    out.reserve(nodes.size());
    for (auto& n : nodes) out.push_back(n->value);
    return out;
}

std::vector<NodeRef> grad_as_node(const NodeRef& root, const std::vector<NodeRef>& wrts) {
    return grad_nodes_impl(root, wrts);
}

}  // namespace leba
