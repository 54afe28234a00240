#include "semsteer/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "semsteer/rng.hpp"

namespace semsteer::nn {

std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int> shape_, double fill) : shape(std::move(shape_)), data(shape_size(shape), fill) {}

Tensor::Tensor(std::vector<int> shape_, std::vector<double> values) : shape(std::move(shape_)), data(std::move(values)) {
  if (data.size() != shape_size(shape)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_string(shape));
  }
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------

int ParamSet::add(const std::string& name, Tensor value) {
  if (index_.count(name)) throw std::invalid_argument("parameter '" + name + "' already registered");
  const int i = static_cast<int>(values_.size());
  names_.push_back(name);
  grads_.emplace_back(value.shape);
  values_.push_back(std::move(value));
  index_.emplace(name, i);
  return i;
}

int ParamSet::index_of(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& g : grads_) std::fill(g.data.begin(), g.data.end(), 0.0);
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (values_[i].shape != other.values_[i].shape) return false;
  }
  return true;
}

nlohmann::json ParamSet::to_json() const {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t i = 0; i < values_.size(); ++i) {
    out.push_back({{"name", names_[i]}, {"shape", values_[i].shape}, {"data", values_[i].data}});
  }
  return out;
}

void ParamSet::load_json(const nlohmann::json& j) {
  if (j.size() != values_.size()) {
    throw ShapeError("checkpoint holds " + std::to_string(j.size()) + " tensors, model expects " +
                     std::to_string(values_.size()));
  }
  for (const auto& entry : j) {
    const std::string name = entry.at("name").get<std::string>();
    Tensor t(entry.at("shape").get<std::vector<int>>(), entry.at("data").get<std::vector<double>>());
    Tensor& dst = value(name);
    if (dst.shape != t.shape) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_string(t.shape) + ", expected " +
                       shape_string(dst.shape));
    }
    dst = std::move(t);
  }
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_string(a.shape) + " x " + shape_string(b.shape));
  }
  const int n = a.rows(), k = a.cols(), m = b.cols();
  Tensor out({n, m});
  for (int i = 0; i < n; ++i) {
    double* o = out.data.data() + static_cast<std::size_t>(i) * m;
    const double* ar = a.data.data() + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      const double* br = b.data.data() + static_cast<std::size_t>(p) * m;
      for (int j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

Tensor apply_activation(Activation act, const Tensor& pre) {
  Tensor out = pre;
  switch (act) {
    case Activation::Identity: break;
    case Activation::Relu:
      for (auto& x : out.data) x = x > 0.0 ? x : 0.0;
      break;
    case Activation::Tanh:
      for (auto& x : out.data) x = std::tanh(x);
      break;
  }
  return out;
}

Tensor activation_backward(Activation act, const Tensor& output, const Tensor& upstream) {
  Tensor g = upstream;
  switch (act) {
    case Activation::Identity: break;
    case Activation::Relu:
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        if (!(output.data[i] > 0.0)) g.data[i] = 0.0;
      }
      break;
    case Activation::Tanh:
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] *= 1.0 - output.data[i] * output.data[i];
      break;
  }
  return g;
}

Mlp::Mlp(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    if (layers_[i].in != layers_[i - 1].out) {
      throw ShapeError("layer '" + layers_[i].name + "' expects width " + std::to_string(layers_[i].in) +
                       " but '" + layers_[i - 1].name + "' produces " + std::to_string(layers_[i - 1].out));
    }
  }
}

void Mlp::init(ParamSet& params, std::uint64_t seed, double scale) const {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& spec = layers_[l];
    Rng rng(derive_seed(seed, l));
    Tensor w({spec.in, spec.out});
    const double sd = scale / std::sqrt(static_cast<double>(std::max(spec.in, 1)));
    for (auto& x : w.data) x = scale == 0.0 ? 0.0 : sd * rng.normal();
    params.add(spec.name + ".w", std::move(w));
    params.add(spec.name + ".b", Tensor({spec.out}));
  }
}

void Mlp::bind(const ParamSet& params) {
  weight_index_.clear();
  bias_index_.clear();
  for (const auto& spec : layers_) {
    const int wi = params.index_of(spec.name + ".w");
    const int bi = params.index_of(spec.name + ".b");
    if (params.value(wi).shape != std::vector<int>{spec.in, spec.out} ||
        params.value(bi).shape != std::vector<int>{spec.out}) {
      throw ShapeError("layer '" + spec.name + "': parameter shapes do not match the layer spec");
    }
    weight_index_.push_back(wi);
    bias_index_.push_back(bi);
  }
}

int Mlp::in_width() const { return layers_.empty() ? -1 : layers_.front().in; }
int Mlp::out_width() const { return layers_.empty() ? -1 : layers_.back().out; }

Tensor Mlp::forward(const ParamSet& params, const Tensor& input, MlpCache& cache) const {
  if (weight_index_.size() != layers_.size()) throw std::logic_error("Mlp::forward before bind");
  cache.inputs.clear();
  cache.activations.clear();
  Tensor x = input;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& spec = layers_[l];
    if (x.cols() != spec.in || x.shape.size() != 2) {
      throw ShapeError("layer '" + spec.name + "': input " + shape_string(x.shape) + ", expected [B," +
                       std::to_string(spec.in) + "]");
    }
    Tensor pre = matmul(x, params.value(weight_index_[l]));
    const auto& b = params.value(bias_index_[l]).data;
    for (int r = 0; r < pre.rows(); ++r) {
      auto row = pre.row(r);
      for (int c = 0; c < spec.out; ++c) row[static_cast<std::size_t>(c)] += b[static_cast<std::size_t>(c)];
    }
    cache.inputs.push_back(std::move(x));
    x = apply_activation(spec.activation, pre);
    cache.activations.push_back(x);
  }
  cache.valid = true;
  return x;
}

Tensor Mlp::backward(ParamSet& params, const MlpCache& cache, const Tensor& upstream) const {
  if (!cache.valid || cache.inputs.size() != layers_.size()) throw std::logic_error("Mlp::backward: missing cache");
  Tensor g = upstream;
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const auto& spec = layers_[li];
    const Tensor& x = cache.inputs[li];
    if (g.shape != cache.activations[li].shape) {
      throw ShapeError("layer '" + spec.name + "': upstream gradient " + shape_string(g.shape) +
                       " does not match output " + shape_string(cache.activations[li].shape));
    }
    g = activation_backward(spec.activation, cache.activations[li], g);
    Tensor& dw = params.grad(weight_index_[li]);
    Tensor& db = params.grad(bias_index_[li]);
    const Tensor& w = params.value(weight_index_[li]);
    const int batch = g.rows();
    Tensor dx({batch, spec.in});
    for (int r = 0; r < batch; ++r) {
      const double* gr = g.data.data() + static_cast<std::size_t>(r) * spec.out;
      const double* xr = x.data.data() + static_cast<std::size_t>(r) * spec.in;
      double* dxr = dx.data.data() + static_cast<std::size_t>(r) * spec.in;
      for (int c = 0; c < spec.out; ++c) db.data[static_cast<std::size_t>(c)] += gr[c];
      for (int i = 0; i < spec.in; ++i) {
        const double xi = xr[i];
        double* dwr = dw.data.data() + static_cast<std::size_t>(i) * spec.out;
        const double* wr = w.data.data() + static_cast<std::size_t>(i) * spec.out;
        double acc = 0.0;
        for (int c = 0; c < spec.out; ++c) {
          dwr[c] += xi * gr[c];
          acc += wr[c] * gr[c];
        }
        dxr[i] = acc;
      }
    }
    g = std::move(dx);
  }
  return g;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (auto& x : p) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto& x : p) x /= sum;
  return p;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> targets, Tensor* dlogits) {
  const int batch = logits.rows();
  const int k = logits.cols();
  if (static_cast<int>(targets.size()) != batch) throw ShapeError("cross-entropy: target count mismatch");
  if (dlogits != nullptr) *dlogits = Tensor({batch, k});
  double loss = 0.0;
  for (int r = 0; r < batch; ++r) {
    const auto row = logits.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double x : row) sum += std::exp(x - mx);
    const double log_z = mx + std::log(sum);
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= k) throw ShapeError("cross-entropy: target index out of range");
    loss += log_z - row[static_cast<std::size_t>(t)];
    if (dlogits != nullptr) {
      auto d = dlogits->row(r);
      for (int c = 0; c < k; ++c) {
        d[static_cast<std::size_t>(c)] = std::exp(row[static_cast<std::size_t>(c)] - log_z) / batch;
      }
      d[static_cast<std::size_t>(t)] -= 1.0 / batch;
    }
  }
  return loss / batch;
}

double squared_error(const Tensor& pred, const Tensor& target, Tensor* dpred) {
  if (pred.shape != target.shape) throw ShapeError("squared_error: shape mismatch");
  const int batch = pred.rows();
  if (dpred != nullptr) *dpred = Tensor(pred.shape);
  double loss = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double d = pred.data[i] - target.data[i];
    loss += d * d;
    if (dpred != nullptr) dpred->data[i] = 2.0 * d / batch;
  }
  return loss / batch;
}

// ---------------------------------------------------------------------------

void ScheduleConfig::validate() const {
  if (warmup_steps < 0 || total_steps < 1 || warmup_steps > total_steps) {
    throw std::invalid_argument("schedule: need 0 <= warmup_steps <= total_steps and total_steps >= 1");
  }
  if (!(peak_lr > 0.0) || !(final_lr > 0.0)) throw std::invalid_argument("schedule: learning rates must be positive");
}

double ScheduleConfig::lr(int step) const {
  if (step < warmup_steps) return peak_lr * static_cast<double>(step) / warmup_steps;
  if (total_steps == warmup_steps) return peak_lr;
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / (total_steps - warmup_steps));
  return final_lr + (peak_lr - final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void opt_step(ParamSet& params, int step_index, const ScheduleConfig& schedule, AdamState& state,
              const AdamConfig& adam) {
  if (step_index < 0 || step_index >= schedule.total_steps) {
    throw std::out_of_range("opt_step: step " + std::to_string(step_index) + " outside schedule of " +
                            std::to_string(schedule.total_steps));
  }
  double norm_sq = 0.0;
  for (int i = 0; i < params.count(); ++i) {
    for (double g : params.grad(i).data) {
      if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in '" + params.name(i) + "'");
      norm_sq += g * g;
    }
  }
  double scale = 1.0;
  if (adam.clip_norm > 0.0 && norm_sq > adam.clip_norm * adam.clip_norm) scale = adam.clip_norm / std::sqrt(norm_sq);

  if (state.m.empty()) {
    for (int i = 0; i < params.count(); ++i) {
      state.m.emplace_back(params.value(i).size(), 0.0);
      state.v.emplace_back(params.value(i).size(), 0.0);
    }
  }
  state.t += 1;
  const double lr = schedule.lr(step_index);
  const double bc1 = 1.0 - std::pow(adam.beta1, state.t);
  const double bc2 = 1.0 - std::pow(adam.beta2, state.t);
  for (int i = 0; i < params.count(); ++i) {
    auto& w = params.value(i).data;
    const auto& g = params.grad(i).data;
    auto& m = state.m[static_cast<std::size_t>(i)];
    auto& v = state.v[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * scale;
      m[j] = adam.beta1 * m[j] + (1.0 - adam.beta1) * gj;
      v[j] = adam.beta2 * v[j] + (1.0 - adam.beta2) * gj * gj;
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + adam.eps);
    }
  }
}

void ema_update(ParamSet& ema, const ParamSet& params, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("ema decay must lie in [0, 1)");
  if (!ema.same_layout(params)) throw ShapeError("ema_update: parameter layouts differ");
  for (int i = 0; i < params.count(); ++i) {
    auto& e = ema.value(i).data;
    const auto& p = params.value(i).data;
    for (std::size_t j = 0; j < e.size(); ++j) e[j] = decay * e[j] + (1.0 - decay) * p[j];
  }
}

FdReport fd_check(ParamSet& params, const LossFn& loss, double epsilon, int n_probes, std::uint64_t seed) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) throw std::invalid_argument("fd_check: epsilon must lie in [1e-7, 1e-3]");
  params.zero_grad();
  loss(params);
  std::vector<Tensor> analytic;
  for (int i = 0; i < params.count(); ++i) analytic.push_back(params.grad(i));

  const std::size_t total = params.scalar_count();
  FdReport report;
  if (total == 0) return report;
  Rng rng(seed);
  for (int probe = 0; probe < n_probes; ++probe) {
    std::size_t flat = rng.below(total);
    int pi = 0;
    while (flat >= params.value(pi).size()) {
      flat -= params.value(pi).size();
      ++pi;
    }
    double& w = params.value(pi).data[flat];
    const double saved = w;
    w = saved + epsilon;
    const double up = loss(params);
    w = saved - epsilon;
    const double down = loss(params);
    w = saved;
    const double fd = (up - down) / (2.0 * epsilon);
    const double an = analytic[static_cast<std::size_t>(pi)].data[flat];
    const double err = std::abs(an - fd) / (std::abs(an) + std::abs(fd) + 1e-12);
    if (err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_param = params.name(pi) + "[" + std::to_string(flat) + "]";
    }
    ++report.probes;
  }
  // Leave the analytic gradient in place for callers.
  for (int i = 0; i < params.count(); ++i) params.grad(i) = analytic[static_cast<std::size_t>(i)];
  return report;
}

}  // namespace semsteer::nn
