#include "duet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace duet {

namespace {

thread_local std::uint64_t g_next_id = 1;
thread_local int g_no_grad_depth = 0;

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor: nonpositive dimension in " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::shared_ptr<Tensor::Node> new_node(Shape shape, std::vector<double> data) {
  auto n = std::make_shared<Tensor::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->id = g_next_id++;
  return n;
}

void ensure_grad(Tensor::Node& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
}

bool track(std::initializer_list<const Tensor*> parents) {
  if (g_no_grad_depth > 0) return false;
  for (const Tensor* t : parents)
    if (t->node()->tracked) return true;
  return false;
}

void attach(const std::shared_ptr<Tensor::Node>& out,
            std::initializer_list<const Tensor*> parents,
            std::function<void(Tensor::Node&)> fn) {
  out->tracked = true;
  out->parents.reserve(parents.size());
  for (const Tensor* t : parents) out->parents.push_back(t->node_ptr());
  out->backprop = std::move(fn);
}

// c += a.b, all row-major
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

std::vector<double> transpose_data(const std::vector<double>& a, int r, int c) {
  std::vector<double> t(a.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      t[static_cast<std::size_t>(j) * r + i] = a[static_cast<std::size_t>(i) * c + j];
  return t;
}

void require_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2)
    throw std::invalid_argument(std::string(op) + ": expected 2-d tensor, got " + shape_str(t.shape()));
}

// rows/cols view of the last dimension for row-wise ops
std::pair<int, int> as_rows(const Tensor& t, const char* op) {
  const Shape& s = t.shape();
  if (s.empty()) throw std::invalid_argument(std::string(op) + ": empty shape");
  const int cols = s.back();
  const int rows = static_cast<int>(t.size()) / cols;
  return {rows, cols};
}

double sigmoid_neg(double x) {
  // sigma(-x), stable for large |x|
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(x));
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  auto node = new_node(std::move(shape), std::vector<double>(n, 0.0));
  node->requires_grad = requires_grad;
  node->tracked = requires_grad;
  return Tensor(node);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  auto node = new_node(std::move(shape), std::vector<double>(n, value));
  node->requires_grad = requires_grad;
  node->tracked = requires_grad;
  return Tensor(node);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw std::invalid_argument("from_data: shape " + shape_str(shape) + " does not match data length " +
                                std::to_string(data.size()));
  auto node = new_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  node->tracked = requires_grad;
  return Tensor(node);
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

double Tensor::item() const {
  if (size() != 1) throw std::logic_error("item: tensor of shape " + shape_str(shape()) + " is not scalar");
  return node_->data[0];
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty()) throw std::logic_error("grad: no gradient present");
  return node_->grad;
}

Tensor Tensor::clone(bool requires_grad) const {
  return from_data(node_->shape, node_->data, requires_grad);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  auto out = new_node({m, n}, std::vector<double>(static_cast<std::size_t>(m) * n, 0.0));
  matmul_acc(a.data().data(), b.data().data(), out->data.data(), m, k, n);
  if (track({&a, &b})) {
    Tensor::Node* an = a.node();
    Tensor::Node* bn = b.node();
    attach(out, {&a, &b}, [an, bn, m, k, n](Tensor::Node& self) {
      if (an->tracked) {
        ensure_grad(*an);
        const auto bt = transpose_data(bn->data, k, n);  // [n,k]
        matmul_acc(self.grad.data(), bt.data(), an->grad.data(), m, n, k);
      }
      if (bn->tracked) {
        ensure_grad(*bn);
        const auto at = transpose_data(an->data, m, k);  // [k,m]
        matmul_acc(at.data(), self.grad.data(), bn->grad.data(), k, m, n);
      }
    });
  }
  return Tensor(out);
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const int r = a.dim(0), c = a.dim(1);
  auto out = new_node({c, r}, transpose_data(a.data(), r, c));
  if (track({&a})) {
    Tensor::Node* an = a.node();
    attach(out, {&a}, [an, r, c](Tensor::Node& self) {
      ensure_grad(*an);
      for (int i = 0; i < c; ++i)
        for (int j = 0; j < r; ++j)
          an->grad[static_cast<std::size_t>(j) * c + i] += self.grad[static_cast<std::size_t>(i) * r + j];
    });
  }
  return Tensor(out);
}

namespace {

Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name, double sign_b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(name) + ": shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] + sign_b * b.data()[i];
  auto out = new_node(a.shape(), std::move(d));
  if (track({&a, &b})) {
    Tensor::Node* an = a.node();
    Tensor::Node* bn = b.node();
    attach(out, {&a, &b}, [an, bn, sign_b](Tensor::Node& self) {
      if (an->tracked) {
        ensure_grad(*an);
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
      }
      if (bn->tracked) {
        ensure_grad(*bn);
        for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += sign_b * self.grad[i];
      }
    });
  }
  return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, "add", 1.0); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, "sub", -1.0); }

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] * b.data()[i];
  auto out = new_node(a.shape(), std::move(d));
  if (track({&a, &b})) {
    Tensor::Node* an = a.node();
    Tensor::Node* bn = b.node();
    attach(out, {&a, &b}, [an, bn](Tensor::Node& self) {
      if (an->tracked) {
        ensure_grad(*an);
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->data[i];
      }
      if (bn->tracked) {
        ensure_grad(*bn);
        for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->data[i];
      }
    });
  }
  return Tensor(out);
}

Tensor add_row(const Tensor& m, const Tensor& row) {
  require_2d(m, "add_row");
  if (row.shape().size() != 1 || row.dim(0) != m.dim(1))
    throw std::invalid_argument("add_row: row shape " + shape_str(row.shape()) + " does not broadcast over " +
                                shape_str(m.shape()));
  const int r = m.dim(0), c = m.dim(1);
  std::vector<double> d(m.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      d[static_cast<std::size_t>(i) * c + j] = m.data()[static_cast<std::size_t>(i) * c + j] + row.data()[j];
  auto out = new_node(m.shape(), std::move(d));
  if (track({&m, &row})) {
    Tensor::Node* mn = m.node();
    Tensor::Node* rn = row.node();
    attach(out, {&m, &row}, [mn, rn, r, c](Tensor::Node& self) {
      if (mn->tracked) {
        ensure_grad(*mn);
        for (std::size_t i = 0; i < self.grad.size(); ++i) mn->grad[i] += self.grad[i];
      }
      if (rn->tracked) {
        ensure_grad(*rn);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) rn->grad[j] += self.grad[static_cast<std::size_t>(i) * c + j];
      }
    });
  }
  return Tensor(out);
}

Tensor scale(const Tensor& a, double k) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] * k;
  auto out = new_node(a.shape(), std::move(d));
  if (track({&a})) {
    Tensor::Node* an = a.node();
    attach(out, {&a}, [an, k](Tensor::Node& self) {
      ensure_grad(*an);
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += k * self.grad[i];
    });
  }
  return Tensor(out);
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] + c;
  auto out = new_node(a.shape(), std::move(d));
  if (track({&a})) {
    Tensor::Node* an = a.node();
    attach(out, {&a}, [an](Tensor::Node& self) {
      ensure_grad(*an);
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
  }
  return Tensor(out);
}

Tensor take_rows(const Tensor& table, std::span<const int> rows) {
  require_2d(table, "take_rows");
  const int r = table.dim(0), c = table.dim(1);
  std::vector<double> d(rows.size() * static_cast<std::size_t>(c));
  for (std::size_t t = 0; t < rows.size(); ++t) {
    const int src = rows[t];
    if (src < 0 || src >= r)
      throw std::out_of_range("take_rows: index " + std::to_string(src) + " outside table " +
                              shape_str(table.shape()));
    std::copy_n(table.data().begin() + static_cast<std::size_t>(src) * c, c,
                d.begin() + static_cast<std::ptrdiff_t>(t * static_cast<std::size_t>(c)));
  }
  auto out = new_node({static_cast<int>(rows.size()), c}, std::move(d));
  if (track({&table})) {
    Tensor::Node* tn = table.node();
    std::vector<int> idx(rows.begin(), rows.end());
    attach(out, {&table}, [tn, idx = std::move(idx), c](Tensor::Node& self) {
      ensure_grad(*tn);
      for (std::size_t t = 0; t < idx.size(); ++t)
        for (int j = 0; j < c; ++j)
          tn->grad[static_cast<std::size_t>(idx[t]) * c + j] += self.grad[t * static_cast<std::size_t>(c) + j];
    });
  }
  return Tensor(out);
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
  require_2d(a, "slice_rows");
  const int r = a.dim(0), c = a.dim(1);
  if (r0 < 0 || r1 > r || r0 >= r1)
    throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                                ") invalid for " + shape_str(a.shape()));
  std::vector<double> d(a.data().begin() + static_cast<std::size_t>(r0) * c,
                        a.data().begin() + static_cast<std::size_t>(r1) * c);
  auto out = new_node({r1 - r0, c}, std::move(d));
  if (track({&a})) {
    Tensor::Node* an = a.node();
    attach(out, {&a}, [an, r0, c](Tensor::Node& self) {
      ensure_grad(*an);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        an->grad[static_cast<std::size_t>(r0) * c + i] += self.grad[i];
    });
  }
  return Tensor(out);
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  require_2d(a, "slice_cols");
  const int r = a.dim(0), c = a.dim(1);
  if (c0 < 0 || c1 > c || c0 >= c1)
    throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                ") invalid for " + shape_str(a.shape()));
  const int w = c1 - c0;
  std::vector<double> d(static_cast<std::size_t>(r) * w);
  for (int i = 0; i < r; ++i)
    std::copy_n(a.data().begin() + static_cast<std::size_t>(i) * c + c0, w,
                d.begin() + static_cast<std::size_t>(i) * w);
  auto out = new_node({r, w}, std::move(d));
  if (track({&a})) {
    Tensor::Node* an = a.node();
    attach(out, {&a}, [an, r, c, c0, w](Tensor::Node& self) {
      ensure_grad(*an);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
          an->grad[static_cast<std::size_t>(i) * c + c0 + j] += self.grad[static_cast<std::size_t>(i) * w + j];
    });
  }
  return Tensor(out);
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require_2d(a, "concat_rows");
  require_2d(b, "concat_rows");
  if (a.dim(1) != b.dim(1))
    throw std::invalid_argument("concat_rows: column counts differ: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  std::vector<double> d;
  d.reserve(a.size() + b.size());
  d.insert(d.end(), a.data().begin(), a.data().end());
  d.insert(d.end(), b.data().begin(), b.data().end());
  auto out = new_node({a.dim(0) + b.dim(0), a.dim(1)}, std::move(d));
  if (track({&a, &b})) {
    Tensor::Node* an = a.node();
    Tensor::Node* bn = b.node();
    const std::size_t na = a.size();
    attach(out, {&a, &b}, [an, bn, na](Tensor::Node& self) {
      if (an->tracked) {
        ensure_grad(*an);
        for (std::size_t i = 0; i < na; ++i) an->grad[i] += self.grad[i];
      }
      if (bn->tracked) {
        ensure_grad(*bn);
        for (std::size_t i = na; i < self.grad.size(); ++i) bn->grad[i - na] += self.grad[i];
      }
    });
  }
  return Tensor(out);
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_2d(a, "concat_cols");
  require_2d(b, "concat_cols");
  if (a.dim(0) != b.dim(0))
    throw std::invalid_argument("concat_cols: row counts differ: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const int r = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  std::vector<double> d(static_cast<std::size_t>(r) * (ca + cb));
  for (int i = 0; i < r; ++i) {
    std::copy_n(a.data().begin() + static_cast<std::size_t>(i) * ca, ca,
                d.begin() + static_cast<std::size_t>(i) * (ca + cb));
    std::copy_n(b.data().begin() + static_cast<std::size_t>(i) * cb, cb,
                d.begin() + static_cast<std::size_t>(i) * (ca + cb) + ca);
  }
  auto out = new_node({r, ca + cb}, std::move(d));
  if (track({&a, &b})) {
    Tensor::Node* an = a.node();
    Tensor::Node* bn = b.node();
    attach(out, {&a, &b}, [an, bn, r, ca, cb](Tensor::Node& self) {
      const int cc = ca + cb;
      if (an->tracked) {
        ensure_grad(*an);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < ca; ++j)
            an->grad[static_cast<std::size_t>(i) * ca + j] += self.grad[static_cast<std::size_t>(i) * cc + j];
      }
      if (bn->tracked) {
        ensure_grad(*bn);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < cb; ++j)
            bn->grad[static_cast<std::size_t>(i) * cb + j] +=
                self.grad[static_cast<std::size_t>(i) * cc + ca + j];
      }
    });
  }
  return Tensor(out);
}

Tensor gather_last(const Tensor& a, std::span<const int> idx) {
  require_2d(a, "gather_last");
  const int r = a.dim(0), c = a.dim(1);
  if (static_cast<int>(idx.size()) != r)
    throw std::invalid_argument("gather_last: need one index per row, got " + std::to_string(idx.size()) +
                                " for " + shape_str(a.shape()));
  std::vector<double> d(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int j = idx[static_cast<std::size_t>(i)];
    if (j < 0 || j >= c)
      throw std::out_of_range("gather_last: index " + std::to_string(j) + " outside row of width " +
                              std::to_string(c));
    d[static_cast<std::size_t>(i)] = a.data()[static_cast<std::size_t>(i) * c + j];
  }
  auto out = new_node({r}, std::move(d));
  if (track({&a})) {
    Tensor::Node* an = a.node();
    std::vector<int> ix(idx.begin(), idx.end());
    attach(out, {&a}, [an, ix = std::move(ix), c](Tensor::Node& self) {
      ensure_grad(*an);
      for (std::size_t i = 0; i < ix.size(); ++i)
        an->grad[i * static_cast<std::size_t>(c) + static_cast<std::size_t>(ix[i])] += self.grad[i];
    });
  }
  return Tensor(out);
}

Tensor log_softmax(const Tensor& a) {
  const auto [rows, cols] = as_rows(a, "log_softmax");
  std::vector<double> d(a.size());
  for (int i = 0; i < rows; ++i) {
    const double* x = a.data().data() + static_cast<std::size_t>(i) * cols;
    double* y = d.data() + static_cast<std::size_t>(i) * cols;
    double mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double se = 0.0;
    for (int j = 0; j < cols; ++j) se += std::exp(x[j] - mx);
    const double lse = mx + std::log(se);
    for (int j = 0; j < cols; ++j) y[j] = x[j] - lse;
  }
  auto out = new_node(a.shape(), std::move(d));
  if (track({&a})) {
    Tensor::Node* an = a.node();
    attach(out, {&a}, [an, rows = rows, cols = cols](Tensor::Node& self) {
      ensure_grad(*an);
      for (int i = 0; i < rows; ++i) {
        const double* y = self.data.data() + static_cast<std::size_t>(i) * cols;
        const double* g = self.grad.data() + static_cast<std::size_t>(i) * cols;
        double* ga = an->grad.data() + static_cast<std::size_t>(i) * cols;
        double gsum = 0.0;
        for (int j = 0; j < cols; ++j) gsum += g[j];
        for (int j = 0; j < cols; ++j) ga[j] += g[j] - std::exp(y[j]) * gsum;
      }
    });
  }
  return Tensor(out);
}

Tensor softmax(const Tensor& a) {
  const auto [rows, cols] = as_rows(a, "softmax");
  std::vector<double> d(a.size());
  for (int i = 0; i < rows; ++i) {
    const double* x = a.data().data() + static_cast<std::size_t>(i) * cols;
    double* y = d.data() + static_cast<std::size_t>(i) * cols;
    double mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double se = 0.0;
    for (int j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      se += y[j];
    }
    const double inv = 1.0 / se;
    for (int j = 0; j < cols; ++j) y[j] *= inv;
  }
  auto out = new_node(a.shape(), std::move(d));
  if (track({&a})) {
    Tensor::Node* an = a.node();
    attach(out, {&a}, [an, rows = rows, cols = cols](Tensor::Node& self) {
      ensure_grad(*an);
      for (int i = 0; i < rows; ++i) {
        const double* p = self.data.data() + static_cast<std::size_t>(i) * cols;
        const double* g = self.grad.data() + static_cast<std::size_t>(i) * cols;
        double* ga = an->grad.data() + static_cast<std::size_t>(i) * cols;
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += g[j] * p[j];
        for (int j = 0; j < cols; ++j) ga[j] += p[j] * (g[j] - dot);
      }
    });
  }
  return Tensor(out);
}

Tensor log_sigmoid(const Tensor& a) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x = a.data()[i];
    // -softplus(-x)
    d[i] = x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
  }
  auto out = new_node(a.shape(), std::move(d));
  if (track({&a})) {
    Tensor::Node* an = a.node();
    attach(out, {&a}, [an](Tensor::Node& self) {
      ensure_grad(*an);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * sigmoid_neg(an->data[i]);
    });
  }
  return Tensor(out);
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x = a.data()[i];
    d[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  auto out = new_node(a.shape(), std::move(d));
  if (track({&a})) {
    Tensor::Node* an = a.node();
    attach(out, {&a}, [an](Tensor::Node& self) {
      ensure_grad(*an);
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double x = an->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        an->grad[i] += self.grad[i] * (cdf + x * pdf);
      }
    });
  }
  return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const auto [rows, cols] = as_rows(x, "layer_norm");
  if (gain.shape() != Shape{cols} || bias.shape() != Shape{cols})
    throw std::invalid_argument("layer_norm: gain/bias must have shape [" + std::to_string(cols) + "], got " +
                                shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  std::vector<double> d(x.size());
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  std::vector<double> mean(static_cast<std::size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    const double* xi = x.data().data() + static_cast<std::size_t>(i) * cols;
    double mu = 0.0;
    for (int j = 0; j < cols; ++j) mu += xi[j];
    mu /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= cols;
    const double is = 1.0 / std::sqrt(var + eps);
    mean[static_cast<std::size_t>(i)] = mu;
    inv_std[static_cast<std::size_t>(i)] = is;
    double* y = d.data() + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) y[j] = (xi[j] - mu) * is * gain.data()[j] + bias.data()[j];
  }
  auto out = new_node(x.shape(), std::move(d));
  if (track({&x, &gain, &bias})) {
    Tensor::Node* xn = x.node();
    Tensor::Node* gn = gain.node();
    Tensor::Node* bn = bias.node();
    attach(out, {&x, &gain, &bias},
           [xn, gn, bn, rows = rows, cols = cols, mean = std::move(mean),
            inv_std = std::move(inv_std)](Tensor::Node& self) {
             for (int i = 0; i < rows; ++i) {
               const double* xi = xn->data.data() + static_cast<std::size_t>(i) * cols;
               const double* g = self.grad.data() + static_cast<std::size_t>(i) * cols;
               const double mu = mean[static_cast<std::size_t>(i)];
               const double is = inv_std[static_cast<std::size_t>(i)];
               if (gn->tracked || bn->tracked) {
                 if (gn->tracked) ensure_grad(*gn);
                 if (bn->tracked) ensure_grad(*bn);
                 for (int j = 0; j < cols; ++j) {
                   const double xhat = (xi[j] - mu) * is;
                   if (gn->tracked) gn->grad[j] += g[j] * xhat;
                   if (bn->tracked) bn->grad[j] += g[j];
                 }
               }
               if (xn->tracked) {
                 ensure_grad(*xn);
                 double m1 = 0.0, m2 = 0.0;  // mean(g*gain), mean(g*gain*xhat)
                 for (int j = 0; j < cols; ++j) {
                   const double gg = g[j] * gn->data[j];
                   m1 += gg;
                   m2 += gg * (xi[j] - mu) * is;
                 }
                 m1 /= cols;
                 m2 /= cols;
                 double* gx = xn->grad.data() + static_cast<std::size_t>(i) * cols;
                 for (int j = 0; j < cols; ++j) {
                   const double gg = g[j] * gn->data[j];
                   const double xhat = (xi[j] - mu) * is;
                   gx[j] += is * (gg - m1 - xhat * m2);
                 }
               }
             }
           });
  }
  return Tensor(out);
}

namespace {

Tensor reduce_all(const Tensor& a, bool take_mean) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double denom = take_mean ? static_cast<double>(a.size()) : 1.0;
  auto out = new_node({1}, {s / denom});
  if (track({&a})) {
    Tensor::Node* an = a.node();
    attach(out, {&a}, [an, denom](Tensor::Node& self) {
      ensure_grad(*an);
      const double g = self.grad[0] / denom;
      for (double& v : an->grad) v += g;
    });
  }
  return Tensor(out);
}

}  // namespace

Tensor mean_all(const Tensor& a) { return reduce_all(a, true); }
Tensor sum_all(const Tensor& a) { return reduce_all(a, false); }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  Tensor::Node* root = loss.node();
  if (!root->tracked) return;  // nothing on the tape requires gradients

  std::vector<Tensor::Node*> order;
  std::unordered_set<Tensor::Node*> seen;
  std::vector<Tensor::Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Tensor::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p->tracked && seen.insert(p.get()).second) stack.push_back(p.get());
  }
  // creation order is a topological order: an op exists after its inputs
  std::sort(order.begin(), order.end(),
            [](const Tensor::Node* a, const Tensor::Node* b) { return a->id > b->id; });

  ensure_grad(*root);
  root->grad[0] += 1.0;
  for (Tensor::Node* n : order)
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
}

}  // namespace duet
