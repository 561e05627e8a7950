#include "kinesoft/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

#include "kinesoft/errors.hpp"

namespace kinesoft::nn {
namespace {

constexpr char kMagic[4] = {'K', 'S', 'N', 'N'};
constexpr std::uint32_t kVersion = 1;

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::kIdentity: return "identity";
    case Activation::kReLU: return "relu";
    case Activation::kTanh: return "tanh";
  }
  return "?";
}

Activation activation_from_name(const std::string& s) {
  if (s == "identity") return Activation::kIdentity;
  if (s == "relu") return Activation::kReLU;
  if (s == "tanh") return Activation::kTanh;
  throw InvalidArgument("unknown activation '" + s + "'");
}

void activate(Matrix& m, Activation a) {
  switch (a) {
    case Activation::kIdentity: break;
    case Activation::kReLU: m = m.cwiseMax(0.0); break;
    case Activation::kTanh: m = m.array().tanh().matrix(); break;
  }
}

// dpre = dout * act'(pre), written in terms of the activated output.
// ReLU'(0) is taken as 0.
void activation_backward(Matrix& d, const Matrix& out, Activation a) {
  switch (a) {
    case Activation::kIdentity: break;
    case Activation::kReLU: d = (out.array() > 0.0).select(d.array(), 0.0).matrix(); break;
    case Activation::kTanh: d = (d.array() * (1.0 - out.array().square())).matrix(); break;
  }
}

void add_bias(Matrix& m, const Matrix& b) { m.rowwise() += b.row(0); }

// Runs layers [first, L) on an already computed pre-activation of `first`.
Matrix finish_forward(const Mlp& mlp, Matrix h, int first, MlpCache* cache) {
  for (int l = first; l < mlp.spec.layers(); ++l) {
    if (l > first) {
      Matrix pre = h * mlp.weights[l].transpose();
      add_bias(pre, mlp.biases[l]);
      h = std::move(pre);
    }
    activate(h, mlp.spec.activations[l]);
    require_finite(h, "mlp forward");
    if (cache) cache->activations.push_back(h);
  }
  return h;
}

// Backpropagates through layers L-1 .. 1 and returns dL/d(pre-activation of
// layer 0), having applied layer 0's activation derivative.
Matrix backward_to_first(const Mlp& mlp, const MlpCache& cache, const Matrix& dy, Mlp& grads) {
  const int layers = mlp.spec.layers();
  if (static_cast<int>(cache.activations.size()) != layers + 1) throw InvalidArgument("cache does not match network");
  if (dy.rows() != cache.activations.back().rows() || dy.cols() != mlp.spec.output_width())
    throw InvalidArgument("upstream gradient has wrong shape");
  Matrix d = dy;
  for (int l = layers - 1; l >= 0; --l) {
    activation_backward(d, cache.activations[l + 1], mlp.spec.activations[l]);
    if (l == 0) break;
    const Matrix& x = cache.activations[l];
    grads.weights[l].noalias() += d.transpose() * x;
    grads.biases[l].row(0) += d.colwise().sum();
    Matrix dx = d * mlp.weights[l];
    d = std::move(dx);
  }
  return d;
}

}  // namespace

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite values in ") + what);
}

MlpSpec MlpSpec::make(std::vector<int> widths, Activation hidden, Activation output) {
  MlpSpec s;
  s.widths = std::move(widths);
  const int layers = static_cast<int>(s.widths.size()) - 1;
  for (int l = 0; l < layers; ++l) s.activations.push_back(l + 1 == layers ? output : hidden);
  s.validate();
  return s;
}

void MlpSpec::validate() const {
  if (widths.size() < 2) throw InvalidArgument("MLP needs at least one layer");
  if (activations.size() + 1 != widths.size()) throw InvalidArgument("one activation per layer required");
  for (int w : widths)
    if (w <= 0) throw InvalidArgument("layer widths must be positive");
}

std::size_t MlpSpec::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += static_cast<std::size_t>(widths[l] + 1) * widths[l + 1];
  return n;
}

std::uint64_t MlpSpec::hash() const { return fnv1a64(to_json().dump()); }

nlohmann::json MlpSpec::to_json() const {
  nlohmann::json acts = nlohmann::json::array();
  for (auto a : activations) acts.push_back(activation_name(a));
  return {{"widths", widths}, {"activations", acts}};
}

MlpSpec MlpSpec::from_json(const nlohmann::json& j) {
  MlpSpec s;
  s.widths = j.at("widths").get<std::vector<int>>();
  for (const auto& a : j.at("activations")) s.activations.push_back(activation_from_name(a.get<std::string>()));
  s.validate();
  return s;
}

Mlp Mlp::init(const MlpSpec& spec, Rng& rng, bool zero_output_layer) {
  spec.validate();
  Mlp m;
  m.spec = spec;
  for (int l = 0; l < spec.layers(); ++l) {
    const int in = spec.widths[l], out = spec.widths[l + 1];
    const double fan = spec.activations[l] == Activation::kReLU ? 6.0 / in : 6.0 / (in + out);
    const double bound = std::sqrt(fan);
    Matrix w(out, in);
    for (int i = 0; i < out; ++i)
      for (int j = 0; j < in; ++j) w(i, j) = rng.uniform(-bound, bound);
    if (zero_output_layer && l + 1 == spec.layers()) w.setZero();
    m.weights.push_back(std::move(w));
    m.biases.push_back(Matrix::Zero(1, out));
  }
  return m;
}

Mlp Mlp::zeros_like(const Mlp& other) {
  Mlp m;
  m.spec = other.spec;
  for (const auto& w : other.weights) m.weights.push_back(Matrix::Zero(w.rows(), w.cols()));
  for (const auto& b : other.biases) m.biases.push_back(Matrix::Zero(b.rows(), b.cols()));
  return m;
}

std::vector<Matrix*> Mlp::tensors() {
  std::vector<Matrix*> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(&weights[l]);
    out.push_back(&biases[l]);
  }
  return out;
}

std::vector<const Matrix*> Mlp::tensors() const {
  std::vector<const Matrix*> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(&weights[l]);
    out.push_back(&biases[l]);
  }
  return out;
}

void Mlp::set_zero() {
  for (auto* t : tensors()) t->setZero();
}

Matrix forward(const Mlp& mlp, const Matrix& x, MlpCache* cache) {
  if (x.cols() != mlp.spec.input_width() || x.rows() == 0) throw InvalidArgument("mlp input has wrong shape");
  require_finite(x, "mlp input");
  if (cache) {
    cache->activations.clear();
    cache->activations.push_back(x);
    cache->group = 0;
  }
  Matrix pre = x * mlp.weights[0].transpose();
  add_bias(pre, mlp.biases[0]);
  return finish_forward(mlp, std::move(pre), 0, cache);
}

Matrix backward(const Mlp& mlp, const MlpCache& cache, const Matrix& dy, Mlp& grads) {
  if (cache.group != 0) throw InvalidArgument("cache was produced by forward_conditioned");
  Matrix d = backward_to_first(mlp, cache, dy, grads);
  const Matrix& x = cache.activations[0];
  grads.weights[0].noalias() += d.transpose() * x;
  grads.biases[0].row(0) += d.colwise().sum();
  return d * mlp.weights[0];
}

Matrix forward_conditioned(const Mlp& mlp, const Matrix& rows, const Matrix& condition, int group,
                           MlpCache* cache) {
  const int a = static_cast<int>(rows.cols());
  const int c = static_cast<int>(condition.cols());
  if (group <= 0 || rows.rows() != condition.rows() * group) throw InvalidArgument("rows/condition grouping mismatch");
  if (a + c != mlp.spec.input_width()) throw InvalidArgument("conditioned input width mismatch");
  require_finite(rows, "mlp input");
  require_finite(condition, "mlp condition");
  const auto& w = mlp.weights[0];
  Matrix pre = rows * w.leftCols(a).transpose();
  const Matrix cond_part = condition * w.rightCols(c).transpose();
  for (Eigen::Index g = 0; g < condition.rows(); ++g) {
    Eigen::RowVectorXd shift = cond_part.row(g) + mlp.biases[0].row(0);
    pre.middleRows(g * group, group).rowwise() += shift;
  }
  if (cache) {
    cache->activations.clear();
    cache->activations.push_back(rows);
    cache->condition = condition;
    cache->group = group;
  }
  return finish_forward(mlp, std::move(pre), 0, cache);
}

Matrix backward_conditioned(const Mlp& mlp, const MlpCache& cache, const Matrix& dy, Mlp& grads, Matrix* drows) {
  if (cache.group <= 0) throw InvalidArgument("cache was not produced by forward_conditioned");
  Matrix d = backward_to_first(mlp, cache, dy, grads);
  const Matrix& rows = cache.activations[0];
  const int a = static_cast<int>(rows.cols());
  const int c = static_cast<int>(cache.condition.cols());
  const Eigen::Index groups = cache.condition.rows();
  Matrix gsum(groups, d.cols());
  for (Eigen::Index g = 0; g < groups; ++g) gsum.row(g) = d.middleRows(g * cache.group, cache.group).colwise().sum();
  grads.weights[0].leftCols(a).noalias() += d.transpose() * rows;
  grads.weights[0].rightCols(c).noalias() += gsum.transpose() * cache.condition;
  grads.biases[0].row(0) += gsum.colwise().sum();
  if (drows) *drows = d * mlp.weights[0].leftCols(a);
  return gsum * mlp.weights[0].rightCols(c);
}

Matrix max_pool(const Matrix& x, int group, MaxPoolCache* cache) {
  if (group <= 0 || x.rows() % group != 0) throw InvalidArgument("max_pool rows not divisible by group");
  const Eigen::Index sets = x.rows() / group;
  Matrix out(sets, x.cols());
  if (cache) {
    cache->argmax.assign(static_cast<std::size_t>(sets * x.cols()), 0);
    cache->rows = static_cast<int>(x.rows());
  }
  for (Eigen::Index s = 0; s < sets; ++s) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      Eigen::Index best = s * group;
      for (Eigen::Index r = s * group + 1; r < (s + 1) * group; ++r)
        if (x(r, c) > x(best, c)) best = r;
      out(s, c) = x(best, c);
      if (cache) cache->argmax[static_cast<std::size_t>(s * x.cols() + c)] = static_cast<int>(best);
    }
  }
  return out;
}

Matrix max_pool_backward(const MaxPoolCache& cache, const Matrix& dy) {
  Matrix dx = Matrix::Zero(cache.rows, dy.cols());
  if (static_cast<std::size_t>(dy.size()) != cache.argmax.size()) throw InvalidArgument("max_pool gradient shape");
  for (Eigen::Index s = 0; s < dy.rows(); ++s)
    for (Eigen::Index c = 0; c < dy.cols(); ++c)
      dx(cache.argmax[static_cast<std::size_t>(s * dy.cols() + c)], c) += dy(s, c);
  return dx;
}

Eigen::RowVectorXd sinusoidal_embedding(double t, int width) {
  if (width <= 0 || width % 2) throw InvalidArgument("embedding width must be positive and even");
  Eigen::RowVectorXd e(width);
  const int half = width / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
    e[i] = std::sin(t * freq);
    e[half + i] = std::cos(t * freq);
  }
  return e;
}

Adam::Adam(AdamConfig cfg, std::span<Matrix* const> params) : cfg_(cfg) {
  for (auto* p : params) {
    m_.push_back(Matrix::Zero(p->rows(), p->cols()));
    v_.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
}

void Adam::step(std::span<Matrix* const> params, std::span<const Matrix* const> grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) throw InvalidArgument("adam tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->rows() != m_[i].rows() || params[i]->cols() != m_[i].cols() ||
        grads[i]->rows() != m_[i].rows() || grads[i]->cols() != m_[i].cols())
      throw InvalidArgument("adam tensor shape mismatch");
  }
  ++step_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = *grads[i];
    require_finite(g, "adam gradient");
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    params[i]->array() -= cfg_.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.epsilon);
  }
}

double grad_check(const MlpSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  Mlp net = Mlp::init(spec, rng);
  // Non-zero biases so every layer's bias path is exercised.
  for (auto& b : net.biases)
    for (Eigen::Index j = 0; j < b.cols(); ++j) b(0, j) = rng.uniform(-0.1, 0.1);
  const int batch = 3;
  Matrix x(batch, spec.input_width());
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1.0, 1.0);
  Matrix r(batch, spec.output_width());
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.uniform(-1.0, 1.0);

  // L = sum(y .* r)
  auto loss = [&](const Mlp& m, const Matrix& in) { return forward(m, in).cwiseProduct(r).sum(); };

  MlpCache cache;
  forward(net, x, &cache);
  Mlp grads = Mlp::zeros_like(net);
  const Matrix dx = backward(net, cache, r, grads);

  constexpr double h = 1e-5;
  double worst = 0.0;
  auto compare = [&](double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  };
  auto params = net.tensors();
  auto gparams = grads.tensors();
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (Eigen::Index i = 0; i < params[t]->size(); ++i) {
      double& p = params[t]->data()[i];
      const double saved = p;
      p = saved + h;
      const double up = loss(net, x);
      p = saved - h;
      const double down = loss(net, x);
      p = saved;
      compare(gparams[t]->data()[i], (up - down) / (2.0 * h));
    }
  }
  Matrix xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = xp.data()[i];
    xp.data()[i] = saved + h;
    const double up = loss(net, xp);
    xp.data()[i] = saved - h;
    const double down = loss(net, xp);
    xp.data()[i] = saved;
    compare(dx.data()[i], (up - down) / (2.0 * h));
  }
  return worst;
}

namespace {

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ArtifactError("truncated checkpoint");
  return v;
}

std::uint64_t combined_hash(std::span<const MlpSpec> specs) {
  std::uint64_t h = 0;
  for (const auto& s : specs) h = mix64(h ^ s.hash());
  return h;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, std::span<const Mlp* const> nets, const nlohmann::json& meta) {
  std::vector<MlpSpec> specs;
  nlohmann::json jspecs = nlohmann::json::array();
  for (const auto* n : nets) {
    specs.push_back(n->spec);
    jspecs.push_back(n->spec.to_json());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  write_pod(out, combined_hash(specs));
  for (const auto* n : nets)
    for (const auto* t : n->tensors()) out.write(reinterpret_cast<const char*>(t->data()), t->size() * sizeof(double));
  std::ofstream side(path.string() + ".json");
  side << nlohmann::json{{"specs", jspecs}, {"spec_hash", combined_hash(specs)}, {"meta", meta}}.dump(2) << '\n';
}

std::vector<Mlp> load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta) {
  std::ifstream side(path.string() + ".json");
  std::ifstream in(path, std::ios::binary);
  if (!in || !side) throw ArtifactError("missing checkpoint " + path.string());
  const auto j = nlohmann::json::parse(side);
  std::vector<MlpSpec> specs;
  for (const auto& s : j.at("specs")) specs.push_back(MlpSpec::from_json(s));
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw ArtifactError("bad checkpoint magic in " + path.string());
  if (read_pod<std::uint32_t>(in) != kVersion) throw ArtifactError("unsupported checkpoint version");
  if (read_pod<std::uint64_t>(in) != combined_hash(specs)) throw ArtifactError("checkpoint spec hash mismatch");
  std::vector<Mlp> nets;
  for (const auto& s : specs) {
    Rng rng(0);
    Mlp m = Mlp::init(s, rng);
    for (auto* t : m.tensors()) {
      in.read(reinterpret_cast<char*>(t->data()), t->size() * sizeof(double));
      if (!in) throw ArtifactError("truncated checkpoint " + path.string());
    }
    nets.push_back(std::move(m));
  }
  if (meta) *meta = j.value("meta", nlohmann::json::object());
  return nets;
}

}  // namespace kinesoft::nn
