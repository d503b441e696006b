// Dense f64 tensors with reverse-mode autodiff (define-by-run tape).
#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace edetr {

using Shape = std::vector<int>;

int shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode;

/// Value-semantics handle to a tensor node. Copying a Tensor shares the
/// underlying node; all ops produce fresh nodes and never mutate inputs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  int dim(int i) const;
  int numel() const;
  bool requires_grad() const;

  const std::vector<double>& data() const;
  /// Mutable storage access for optimizers and initializers. Must not be
  /// called on tensors that already participate in a live graph section.
  std::vector<double>& mutable_data();

  double value() const;  // scalar tensors only
  double at(std::initializer_list<int> idx) const;

  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();

  /// Same data, detached from the graph, requires_grad=false.
  Tensor detach() const;

  /// Reverse-mode sweep from a scalar. Gradients accumulate additively
  /// across repeated calls until zero_grad.
  void backward() const;

  TensorNode* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<TensorNode> node_;
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(TensorNode&)>);
  friend struct TensorNode;
};

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first accumulation
  std::vector<Tensor> parents;
  std::function<void(TensorNode&)> backward_fn;
  std::uint64_t id = 0;

  std::vector<double>& grad_buf();
};

/// RAII guard disabling graph construction (evaluation-only forward).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);
Tensor maximum(const Tensor& a, const Tensor& b);  // ties route grad to a
Tensor minimum(const Tensor& a, const Tensor& b);

// ---- linear algebra / shape ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, int start, int len);
Tensor slice_cols(const Tensor& a, int start, int len);
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor add_rowvec(const Tensor& a, const Tensor& v);  // [N,D] + [D]
Tensor select(const Tensor& a, int flat_index);       // -> scalar

// ---- reductions / activations ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);

// ---- normalization ----
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);  // x: [N,D], per-row
Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    double eps = 1e-5);  // x: [C,H,W], per-channel

// ---- spatial ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int padding);  // x:[Cin,H,W] w:[Cout,Cin,kh,kw] b:[Cout] or undefined
Tensor bilinear_sample(const Tensor& map, const Tensor& xy);  // -> [C]
Tensor grid_sample(const Tensor& map, const Tensor& pts);     // [P,2] -> [P,C]

/// Multi-scale deformable sampling core. For each of N queries and M heads,
/// averages bilinear samples of per-level value maps at the given locations
/// with the given weights. levels: L tensors [D,H_l,W_l]; locs: [N, M*L*K, 2]
/// normalized coords; weights: [N, M*L*K]. Head m reads channels
/// [m*D/M, (m+1)*D/M). Returns [N, D].
Tensor ms_deform_sample(const std::vector<Tensor>& levels, const Tensor& locs,
                        const Tensor& weights, int num_heads, int points_per_level);

/// Permute token-major rows [H*W, C] into a channel-major map [C,H,W].
Tensor rows_to_chw(const Tensor& rows, int h, int w);

/// Zero-pad a [C,H,W] map at the bottom/right up to [C,h,w].
Tensor pad_to(const Tensor& x, int h, int w);

}  // namespace edetr
