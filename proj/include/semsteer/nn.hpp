#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace semsteer::nn {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major tensor of doubles.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape_, double fill = 0.0);
  Tensor(std::vector<int> shape_, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? (shape.empty() ? 1 : shape[0]) : shape[1]; }
  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }
  std::span<double> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols(), static_cast<std::size_t>(cols())}; }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols(), static_cast<std::size_t>(cols())};
  }
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

std::size_t shape_size(const std::vector<int>& shape);
std::string shape_string(const std::vector<int>& shape);

/// Named parameters with a gradient buffer of identical shape per entry.
/// Iteration order is insertion order, which keeps serialization stable.
class ParamSet {
 public:
  int add(const std::string& name, Tensor value);
  int index_of(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& value(int i) { return values_[static_cast<std::size_t>(i)]; }
  const Tensor& value(int i) const { return values_[static_cast<std::size_t>(i)]; }
  Tensor& grad(int i) { return grads_[static_cast<std::size_t>(i)]; }
  const Tensor& grad(int i) const { return grads_[static_cast<std::size_t>(i)]; }
  Tensor& value(const std::string& name) { return value(index_of(name)); }
  const Tensor& value(const std::string& name) const { return value(index_of(name)); }
  Tensor& grad(const std::string& name) { return grad(index_of(name)); }
  const Tensor& grad(const std::string& name) const { return grad(index_of(name)); }

  int count() const { return static_cast<int>(values_.size()); }
  const std::string& name(int i) const { return names_[static_cast<std::size_t>(i)]; }
  std::size_t scalar_count() const;

  void zero_grad();
  bool same_layout(const ParamSet& other) const;

  nlohmann::json to_json() const;
  /// Replaces values in place; names and shapes must match this set's layout.
  void load_json(const nlohmann::json& j);

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Fixed-topology networks
// ---------------------------------------------------------------------------

enum class Activation { Identity, Relu, Tanh };

/// One affine layer followed by an activation. Weight is (in x out), bias (out).
struct LayerSpec {
  std::string name;
  int in = 0;
  int out = 0;
  Activation activation = Activation::Identity;
};

/// Layer activations saved by forward for the matching backward call.
struct MlpCache {
  std::vector<Tensor> inputs;       // input to each layer, (B x in)
  std::vector<Tensor> activations;  // output of each layer after the activation
  bool valid = false;
};

/// A stack of dense layers. An empty stack is the identity map.
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<LayerSpec> layers);

  /// Registers "<name>.w" and "<name>.b" for each layer in `params`.
  /// Weights ~ N(0, scale^2 / in); biases zero. scale=0 gives an all-zero net.
  void init(ParamSet& params, std::uint64_t seed, double scale = 1.0) const;
  /// Resolves parameter indices; call once after init or after loading.
  void bind(const ParamSet& params);

  int in_width() const;
  int out_width() const;
  const std::vector<LayerSpec>& layers() const { return layers_; }

  Tensor forward(const ParamSet& params, const Tensor& input, MlpCache& cache) const;
  /// Accumulates parameter gradients; returns d loss / d input.
  Tensor backward(ParamSet& params, const MlpCache& cache, const Tensor& upstream) const;

 private:
  std::vector<LayerSpec> layers_;
  std::vector<int> weight_index_;
  std::vector<int> bias_index_;
};

// Elementwise pieces exposed for tests.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor apply_activation(Activation act, const Tensor& pre);
/// Given the activation output and upstream gradient, gradient w.r.t. the pre-activation.
Tensor activation_backward(Activation act, const Tensor& output, const Tensor& upstream);

/// Mean softmax cross-entropy over rows; fills d loss / d logits.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> targets, Tensor* dlogits);
/// Mean over rows of the row-wise squared error sum (1/B) * sum ||pred - target||^2.
double squared_error(const Tensor& pred, const Tensor& target, Tensor* dpred);

std::vector<double> softmax(std::span<const double> logits);

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct ScheduleConfig {
  int warmup_steps = 200;
  double peak_lr = 3e-3;
  double final_lr = 3e-4;
  int total_steps = 5000;

  void validate() const;
  /// Linear warmup from 0 to peak, then cosine decay to final at total_steps.
  double lr(int step) const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip; <= 0 disables.
  double clip_norm = 0.0;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  int t = 0;
};

/// One adaptive-moment update using the gradients stored in `params`.
/// Throws NonFiniteError on a non-finite gradient before touching any value.
void opt_step(ParamSet& params, int step_index, const ScheduleConfig& schedule, AdamState& state,
              const AdamConfig& adam = {});

inline constexpr double kDefaultEmaDecay = 0.999;

/// ema <- decay * ema + (1 - decay) * params.
void ema_update(ParamSet& ema, const ParamSet& params, double decay = kDefaultEmaDecay);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Loss that writes its analytic gradient into params' gradient buffers.
using LossFn = std::function<double(ParamSet&)>;

struct FdReport {
  double max_relative_error = 0.0;
  int probes = 0;
  std::string worst_param;
};

/// Central differences on `n_probes` randomly chosen scalar parameters,
/// error |g_an - g_fd| / (|g_an| + |g_fd| + 1e-12).
FdReport fd_check(ParamSet& params, const LossFn& loss, double epsilon, int n_probes, std::uint64_t seed);

}  // namespace semsteer::nn
