#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace duet {

// Dense row-major double tensors with reverse-mode autodiff. Ops record
// parents and a backprop closure on the node itself; backward() collects the
// nodes reachable from a scalar loss and replays them in reverse creation
// order, which is a valid reverse topological order because an op's output
// is always created after its inputs. The graph is rebuilt from scratch on
// every forward pass.

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;
    bool tracked = false;  // participates in the current tape
    std::uint64_t id = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;
  };

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return node_->data.size(); }
  double item() const;

  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& data() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad() { node_->grad.clear(); }

  std::uint64_t node_id() const { return node_->id; }

  /// Deep copy of shape+data; the copy is a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Scoped switch that disables tape recording; forward values only.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// --- ops -----------------------------------------------------------------
// 2-d matrices unless noted; reductions and row-wise ops treat the last
// dimension as the row axis.

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k]x[k,n]
Tensor transpose(const Tensor& a);                        // [r,c] -> [c,r]
Tensor add(const Tensor& a, const Tensor& b);             // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);             // elementwise
Tensor add_row(const Tensor& m, const Tensor& row);       // [r,c] + [c]
Tensor scale(const Tensor& a, double k);
Tensor add_scalar(const Tensor& a, double c);
Tensor take_rows(const Tensor& table, std::span<const int> rows);
Tensor slice_rows(const Tensor& a, int r0, int r1);       // rows [r0,r1)
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor gather_last(const Tensor& a, std::span<const int> idx);  // [r,c]->[r]
Tensor log_softmax(const Tensor& a);                      // last dim, stable
Tensor softmax(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor mean_all(const Tensor& a);                         // -> scalar
Tensor sum_all(const Tensor& a);                          // -> scalar

/// Populates grads of every tracked tensor reachable from a scalar loss.
/// Gradients accumulate; call zero_grad between steps.
void backward(const Tensor& loss);

}  // namespace duet
