#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "kinesoft/random.hpp"

// Small dense-network engine: feed-forward MLPs with hand-written reverse
// accumulation, set max-pooling and Adam. Batches are matrix rows.
namespace kinesoft::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Activation { kIdentity, kReLU, kTanh };

struct MlpSpec {
  std::vector<int> widths;                // input, hidden..., output
  std::vector<Activation> activations;    // one per layer

  /// Hidden layers use `hidden`, the last layer `output`.
  static MlpSpec make(std::vector<int> widths, Activation hidden, Activation output = Activation::kIdentity);

  int layers() const { return static_cast<int>(activations.size()); }
  int input_width() const { return widths.front(); }
  int output_width() const { return widths.back(); }
  std::size_t parameter_count() const;
  std::uint64_t hash() const;
  void validate() const;

  nlohmann::json to_json() const;
  static MlpSpec from_json(const nlohmann::json& j);
  bool operator==(const MlpSpec&) const = default;
};

struct Mlp {
  MlpSpec spec;
  std::vector<Matrix> weights;  // out x in
  std::vector<Matrix> biases;   // 1 x out

  /// He init for ReLU layers, Xavier otherwise; biases zero. With
  /// zero_output_layer the last weight matrix is zero too.
  static Mlp init(const MlpSpec& spec, Rng& rng, bool zero_output_layer = false);
  /// Same shapes, all zero (gradient accumulator).
  static Mlp zeros_like(const Mlp& other);

  std::vector<Matrix*> tensors();
  std::vector<const Matrix*> tensors() const;
  void set_zero();
};

/// Activations kept by forward for the backward pass.
struct MlpCache {
  std::vector<Matrix> activations;  // [0] = input, [l + 1] = output of layer l
  Matrix condition;                 // conditioned variant only
  int group = 0;
};

/// y = MLP(x). Throws NumericError on non-finite output.
Matrix forward(const Mlp& mlp, const Matrix& x, MlpCache* cache = nullptr);

/// Accumulates parameter gradients into `grads` and returns dL/dx.
Matrix backward(const Mlp& mlp, const MlpCache& cache, const Matrix& dy, Mlp& grads);

/// Conditioned MLP: the first layer sees [rows | condition of the row's group]
/// where every `group` consecutive rows share one condition row. Equivalent
/// to concatenating explicitly, without materializing the broadcast.
Matrix forward_conditioned(const Mlp& mlp, const Matrix& rows, const Matrix& condition, int group,
                           MlpCache* cache = nullptr);

/// Returns dL/d(condition); optionally writes dL/d(rows).
Matrix backward_conditioned(const Mlp& mlp, const MlpCache& cache, const Matrix& dy, Mlp& grads,
                            Matrix* drows = nullptr);

struct MaxPoolCache {
  std::vector<int> argmax;  // flat row index per (set, column)
  int rows = 0;
};

/// Column-wise max over each set of `group` consecutive rows.
Matrix max_pool(const Matrix& x, int group, MaxPoolCache* cache = nullptr);
Matrix max_pool_backward(const MaxPoolCache& cache, const Matrix& dy);

/// Sinusoidal embedding of a scalar step (DDPM-style), width must be even.
Eigen::RowVectorXd sinusoidal_embedding(double t, int width);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(AdamConfig cfg, std::span<Matrix* const> params);

  /// One bias-corrected update. Shapes must match the registered params.
  void step(std::span<Matrix* const> params, std::span<const Matrix* const> grads);

  long steps() const { return step_; }
  AdamConfig& config() { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<Matrix> m_, v_;
  long step_ = 0;
};

/// Largest relative error between backward() and central differences
/// (h = 1e-5) for a random network of the given spec on random inputs.
/// Relative error per entry is |a - n| / max(|a|, |n|, 1e-6).
double grad_check(const MlpSpec& spec, std::uint64_t seed);

/// Binary checkpoint: "KSNN", u32 version, u64 hash of all specs, then every
/// tensor in declaration order (row-major f64 little-endian). A JSON sidecar
/// `<path>.json` carries the specs and `meta`.
void save_checkpoint(const std::filesystem::path& path, std::span<const Mlp* const> nets,
                     const nlohmann::json& meta = nlohmann::json::object());
std::vector<Mlp> load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

/// Throws NumericError if any entry is NaN/Inf.
void require_finite(const Matrix& m, const char* what);

}  // namespace kinesoft::nn
