#include "marnet/tensor.hpp"

#include <cmath>
#include <unordered_set>

namespace marnet {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return shape.empty() ? 0 : n;
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace memory {
namespace {
std::atomic<std::size_t> g_current{0};
std::atomic<std::size_t> g_peak{0};
}  // namespace

Stats stats() { return {g_current.load(), g_peak.load()}; }

void reset_peak() { g_peak.store(g_current.load()); }

void on_allocate(std::size_t bytes) {
  const std::size_t now = g_current.fetch_add(bytes) + bytes;
  std::size_t peak = g_peak.load();
  while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
  }
}

void on_release(std::size_t bytes) { g_current.fetch_sub(bytes); }

}  // namespace memory

namespace {
thread_local bool t_grad_enabled = true;
}

bool GradMode::enabled() { return t_grad_enabled; }
void GradMode::set_enabled(bool on) { t_grad_enabled = on; }

template <class T>
void check_finite(std::span<const T> values, const char* where) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string("non-finite value produced by ") + where + " at element " +
                         std::to_string(i));
    }
  }
}

template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, const char* op,
                   std::function<void(Node<T>&)> backward) {
  check_finite<T>(value.data(), op);
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  bool needs_grad = false;
  if (GradMode::enabled()) {
    for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
  }
  if (needs_grad) {
    node->value.set_requires_grad(true);
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.shared());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

namespace {

// Parents precede children.
template <class T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    Node<T>* node = stack.back().first;
    const std::size_t next = stack.back().second;
    if (next < node->parents.size()) {
      ++stack.back().second;
      Node<T>* parent = node->parents[next].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

template <class T>
void backward(const Var<T>& root, std::span<const T> seed) {
  if (!root.defined()) throw Error("backward on an undefined variable");
  if (seed.size() != root.size()) {
    throw ShapeError("backward seed has " + std::to_string(seed.size()) + " values for a result of " +
                     std::to_string(root.size()));
  }
  if (!root.requires_grad()) return;
  auto order = topological_order(root.node());
  auto g = root.node()->value.grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->backward || !node->value.has_grad()) continue;
    node->backward(*node);
    if (!node->retain_grad) node->value.release_grad();
  }
}

template <class T>
void backward(const Var<T>& root) {
  if (root.size() != 1) {
    throw ShapeError("backward without a seed needs a scalar result, got " + to_string(root.shape()));
  }
  const T one[1] = {T{1}};
  backward(root, std::span<const T>(one, 1));
}

template <class T>
GraphStats graph_stats(const Var<T>& root) {
  GraphStats s;
  if (!root.defined()) return s;
  for (Node<T>* n : topological_order(root.node())) {
    ++s.nodes;
    s.edges += n->parents.size();
  }
  return s;
}

#define MARNET_INSTANTIATE(T)                                                                  \
  template void check_finite<T>(std::span<const T>, const char*);                              \
  template Var<T> make_result<T>(Tensor<T>, std::vector<Var<T>>, const char*,                  \
                                 std::function<void(Node<T>&)>);                               \
  template void backward<T>(const Var<T>&);                                                    \
  template void backward<T>(const Var<T>&, std::span<const T>);                                \
  template GraphStats graph_stats<T>(const Var<T>&);

MARNET_INSTANTIATE(float)
MARNET_INSTANTIATE(double)
#undef MARNET_INSTANTIATE

}  // namespace marnet
