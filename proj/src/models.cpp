#include "metamd/models.hpp"

#include <cmath>
#include <sstream>

#include "metamd/errors.hpp"

namespace metamd {

namespace {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstWeights = Eigen::Map<const RowMajorMatrix>;
using Weights = Eigen::Map<RowMajorMatrix>;

struct LayerShape {
  Eigen::Index in;
  Eigen::Index out;
  Eigen::Index w_offset;
  Eigen::Index b_offset;
};

std::vector<LayerShape> layer_shapes(const BaseModel::Mlp& m) {
  std::vector<LayerShape> shapes;
  Eigen::Index offset = 0;
  for (std::size_t l = 0; l + 1 < m.layer_sizes.size(); ++l) {
    const Eigen::Index in = m.layer_sizes[l];
    const Eigen::Index out = m.layer_sizes[l + 1];
    shapes.push_back({in, out, offset, offset + in * out});
    offset += in * out + out;
  }
  return shapes;
}

Eigen::Index mlp_param_count(const BaseModel::Mlp& m) {
  Eigen::Index n = 0;
  for (const auto& s : layer_shapes(m)) n += s.in * s.out + s.out;
  return n;
}

Matrix activate(const Matrix& z, Activation a) {
  return a == Activation::kTanh ? Matrix(z.array().tanh()) : Matrix(z.cwiseMax(0.0));
}

// First derivative expressed through the activation output (tanh) or the
// pre-activation (relu).
Matrix activation_d1(const Matrix& z, const Matrix& act, Activation a) {
  if (a == Activation::kTanh) return (1.0 - act.array().square()).matrix();
  return (z.array() > 0.0).cast<double>().matrix();
}

Matrix activation_d2(const Matrix& act, Activation a) {
  if (a == Activation::kTanh) return (-2.0 * act.array() * (1.0 - act.array().square())).matrix();
  return Matrix::Zero(act.rows(), act.cols());
}

// Forward-pass cache for a softmax MLP.
struct Forward {
  std::vector<Matrix> acts;  // acts[0] = inputs, acts[l] = output of hidden layer l
  std::vector<Matrix> pre;   // pre[l] = pre-activation of layer l (last is logits)
  Matrix probs;
};

Forward forward(const BaseModel::Mlp& m, const std::vector<LayerShape>& shapes,
                const Vector& theta, const Matrix& x) {
  Forward f;
  f.acts.push_back(x);
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto& s = shapes[l];
    ConstWeights w(theta.data() + s.w_offset, s.out, s.in);
    Eigen::Map<const Eigen::RowVectorXd> bias(theta.data() + s.b_offset, s.out);
    Matrix z = f.acts.back() * w.transpose();
    z.rowwise() += bias;
    f.pre.push_back(z);
    if (l + 1 < shapes.size()) f.acts.push_back(activate(z, m.activation));
  }
  const Matrix& logits = f.pre.back();
  Eigen::VectorXd row_max = logits.rowwise().maxCoeff();
  Matrix e = (logits.colwise() - row_max).array().exp().matrix();
  Eigen::VectorXd sums = e.rowwise().sum();
  f.probs = e.array().colwise() / sums.array();
  return f;
}

double cross_entropy(const Forward& f, const std::vector<int>& labels) {
  const Matrix& logits = f.pre.back();
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    total += lse - logits(r, labels[static_cast<std::size_t>(r)]);
  }
  return total / static_cast<double>(logits.rows());
}

Matrix output_delta(const Forward& f, const std::vector<int>& labels) {
  Matrix delta = f.probs;
  for (Eigen::Index r = 0; r < delta.rows(); ++r) delta(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
  return delta / static_cast<double>(delta.rows());
}

Vector mlp_grad(const BaseModel::Mlp& m, const std::vector<LayerShape>& shapes, const Vector& theta,
                const Forward& f, const std::vector<int>& labels) {
  Vector g = Vector::Zero(theta.size());
  Matrix delta = output_delta(f, labels);
  for (std::size_t li = shapes.size(); li-- > 0;) {
    const auto& s = shapes[li];
    Weights gw(g.data() + s.w_offset, s.out, s.in);
    gw = delta.transpose() * f.acts[li];
    g.segment(s.b_offset, s.out) = delta.colwise().sum().transpose();
    if (li > 0) {
      ConstWeights w(theta.data() + s.w_offset, s.out, s.in);
      const Matrix back = delta * w;
      delta = back.cwiseProduct(activation_d1(f.pre[li - 1], f.acts[li], m.activation));
    }
  }
  return g;
}

// Pearlmutter R-operator: the directional derivative of the gradient along v.
Vector mlp_hvp(const BaseModel::Mlp& m, const std::vector<LayerShape>& shapes, const Forward& f,
               const Vector& theta, const Batch& batch, const Vector& v) {
  const std::size_t layers = shapes.size();

  std::vector<Matrix> r_acts(layers);  // r_acts[l] is R(acts[l])
  std::vector<Matrix> r_pre(layers);
  r_acts[0] = Matrix::Zero(batch.inputs.rows(), batch.inputs.cols());
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& s = shapes[l];
    ConstWeights w(theta.data() + s.w_offset, s.out, s.in);
    ConstWeights vw(v.data() + s.w_offset, s.out, s.in);
    Eigen::Map<const Eigen::RowVectorXd> vb(v.data() + s.b_offset, s.out);
    Matrix rz = r_acts[l] * w.transpose() + f.acts[l] * vw.transpose();
    rz.rowwise() += vb;
    r_pre[l] = rz;
    if (l + 1 < layers) {
      r_acts[l + 1] = activation_d1(f.pre[l], f.acts[l + 1], m.activation).cwiseProduct(rz);
    }
  }

  const Matrix& p = f.probs;
  const Eigen::VectorXd pr = (p.cwiseProduct(r_pre.back())).rowwise().sum();
  Matrix r_probs = p.cwiseProduct((r_pre.back().colwise() - pr));

  Vector hv = Vector::Zero(theta.size());
  Matrix delta = output_delta(f, batch.labels);
  Matrix r_delta = r_probs / static_cast<double>(p.rows());
  for (std::size_t li = layers; li-- > 0;) {
    const auto& s = shapes[li];
    Weights hw(hv.data() + s.w_offset, s.out, s.in);
    hw = r_delta.transpose() * f.acts[li] + delta.transpose() * r_acts[li];
    hv.segment(s.b_offset, s.out) = r_delta.colwise().sum().transpose();
    if (li > 0) {
      ConstWeights w(theta.data() + s.w_offset, s.out, s.in);
      ConstWeights vw(v.data() + s.w_offset, s.out, s.in);
      const Matrix d1 = activation_d1(f.pre[li - 1], f.acts[li], m.activation);
      const Matrix d2 = activation_d2(f.acts[li], m.activation);
      const Matrix back = delta * w;
      Matrix r_back = r_delta * w + delta * vw;
      r_delta = r_back.cwiseProduct(d1) + back.cwiseProduct(d2).cwiseProduct(r_pre[li - 1]);
      delta = back.cwiseProduct(d1);
    }
  }
  return hv;
}

}  // namespace

std::string to_string(Activation a) { return a == Activation::kTanh ? "tanh" : "relu"; }

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  throw ArgumentError("unknown activation '" + name + "' (expected tanh or relu)");
}

BaseModel::BaseModel(Descriptor d) : descriptor_(std::move(d)) {
  if (const auto* q = std::get_if<Quadratic>(&descriptor_)) {
    kappa_ = q->b.size();
  } else if (std::holds_alternative<Rosenbrock>(descriptor_)) {
    kappa_ = 2;
  } else {
    kappa_ = mlp_param_count(std::get<Mlp>(descriptor_));
  }
}

BaseModel BaseModel::quadratic(Matrix q, Vector b) {
  if (q.rows() != q.cols() || q.rows() != b.size() || b.size() == 0) {
    throw ArgumentError("quadratic model: Q must be square and match b");
  }
  if (!is_symmetric(q)) throw ArgumentError("quadratic model: Q must be symmetric");
  return BaseModel(Quadratic{std::move(q), std::move(b)});
}

BaseModel BaseModel::rosenbrock() { return BaseModel(Rosenbrock{}); }

BaseModel BaseModel::linear(int in_dim, int classes) { return mlp({in_dim, classes}); }

BaseModel BaseModel::mlp(std::vector<int> layer_sizes, Activation activation) {
  if (layer_sizes.size() < 2) throw ArgumentError("mlp: need at least input and output sizes");
  for (int s : layer_sizes) {
    if (s < 1) throw ArgumentError("mlp: layer sizes must be positive");
  }
  if (layer_sizes.back() < 2) throw ArgumentError("mlp: need at least two classes");
  return BaseModel(Mlp{std::move(layer_sizes), activation});
}

int BaseModel::class_count() const {
  if (const auto* m = std::get_if<Mlp>(&descriptor_)) return m->layer_sizes.back();
  return 0;
}

std::string BaseModel::describe() const {
  std::ostringstream os;
  if (std::holds_alternative<Quadratic>(descriptor_)) {
    os << "quadratic(" << kappa_ << ")";
  } else if (std::holds_alternative<Rosenbrock>(descriptor_)) {
    os << "rosenbrock";
  } else {
    const auto& m = std::get<Mlp>(descriptor_);
    os << (m.layer_sizes.size() == 2 ? "linear(" : "mlp(");
    for (std::size_t i = 0; i < m.layer_sizes.size(); ++i) os << (i ? "-" : "") << m.layer_sizes[i];
    if (m.layer_sizes.size() > 2) os << "," << to_string(m.activation);
    os << ")";
  }
  return os.str();
}

void BaseModel::check_theta(const Vector& theta, const char* op) const {
  if (theta.size() != kappa_) {
    throw ArgumentError(std::string(op) + ": theta has length " + std::to_string(theta.size()) +
                        " but model has " + std::to_string(kappa_) + " parameters");
  }
}

void BaseModel::check_batch(const Batch& batch, const char* op) const {
  const auto* m = std::get_if<Mlp>(&descriptor_);
  if (m == nullptr) return;
  if (batch.inputs.rows() == 0) throw ArgumentError(std::string(op) + ": empty batch");
  if (batch.inputs.cols() != m->layer_sizes.front()) {
    throw ArgumentError(std::string(op) + ": batch has " + std::to_string(batch.inputs.cols()) +
                        " features, model expects " + std::to_string(m->layer_sizes.front()));
  }
  if (static_cast<Eigen::Index>(batch.labels.size()) != batch.inputs.rows()) {
    throw ArgumentError(std::string(op) + ": label count does not match input rows");
  }
  for (int y : batch.labels) {
    if (y < 0 || y >= m->layer_sizes.back()) throw ArgumentError(std::string(op) + ": label out of range");
  }
}

double BaseModel::loss(const Vector& theta, const Batch& batch) const {
  check_theta(theta, "loss");
  if (const auto* q = std::get_if<Quadratic>(&descriptor_)) {
    return theta.dot(q->q * theta) - q->b.dot(theta);
  }
  if (std::holds_alternative<Rosenbrock>(descriptor_)) {
    const double x = theta[0], y = theta[1];
    return (1.0 - x) * (1.0 - x) + 100.0 * (y - x * x) * (y - x * x);
  }
  check_batch(batch, "loss");
  const auto& m = std::get<Mlp>(descriptor_);
  return cross_entropy(forward(m, layer_shapes(m), theta, batch.inputs), batch.labels);
}

double BaseModel::loss_and_grad(const Vector& theta, const Batch& batch, Vector& grad_out) const {
  check_theta(theta, "grad");
  if (const auto* q = std::get_if<Quadratic>(&descriptor_)) {
    const Vector qt = q->q * theta;
    grad_out = 2.0 * qt - q->b;
    return theta.dot(qt) - q->b.dot(theta);
  }
  if (std::holds_alternative<Rosenbrock>(descriptor_)) {
    const double x = theta[0], y = theta[1];
    const double r = y - x * x;
    grad_out.resize(2);
    grad_out[0] = -2.0 * (1.0 - x) - 400.0 * x * r;
    grad_out[1] = 200.0 * r;
    return (1.0 - x) * (1.0 - x) + 100.0 * r * r;
  }
  check_batch(batch, "grad");
  const auto& m = std::get<Mlp>(descriptor_);
  const auto shapes = layer_shapes(m);
  const Forward f = forward(m, shapes, theta, batch.inputs);
  grad_out = mlp_grad(m, shapes, theta, f, batch.labels);
  return cross_entropy(f, batch.labels);
}

Vector BaseModel::grad(const Vector& theta, const Batch& batch) const {
  Vector g;
  loss_and_grad(theta, batch, g);
  return g;
}

Vector BaseModel::hvp(const Vector& theta, const Batch& batch, const Vector& v) const {
  check_theta(theta, "hvp");
  if (v.size() != kappa_) throw ArgumentError("hvp: direction length does not match parameter count");
  if (const auto* q = std::get_if<Quadratic>(&descriptor_)) return 2.0 * (q->q * v);
  if (std::holds_alternative<Rosenbrock>(descriptor_)) {
    const double x = theta[0], y = theta[1];
    const double hxx = 2.0 - 400.0 * y + 1200.0 * x * x;
    const double hxy = -400.0 * x;
    Vector out(2);
    out[0] = hxx * v[0] + hxy * v[1];
    out[1] = hxy * v[0] + 200.0 * v[1];
    return out;
  }
  check_batch(batch, "hvp");
  const auto& m = std::get<Mlp>(descriptor_);
  const auto shapes = layer_shapes(m);
  return mlp_hvp(m, shapes, forward(m, shapes, theta, batch.inputs), theta, batch, v);
}

Matrix BaseModel::hessian_dense(const Vector& theta, const Batch& batch, Eigen::Index cap) const {
  if (kappa_ > cap) {
    throw CapacityError("hessian_dense: " + std::to_string(kappa_) + " parameters exceeds cap " +
                        std::to_string(cap));
  }
  Matrix h(kappa_, kappa_);
  Vector e = Vector::Zero(kappa_);
  const auto* m = std::get_if<Mlp>(&descriptor_);
  if (m == nullptr) {
    for (Eigen::Index j = 0; j < kappa_; ++j) {
      e[j] = 1.0;
      h.col(j) = hvp(theta, batch, e);
      e[j] = 0.0;
    }
    return h;
  }
  check_theta(theta, "hessian_dense");
  check_batch(batch, "hessian_dense");
  const auto shapes = layer_shapes(*m);
  const Forward f = forward(*m, shapes, theta, batch.inputs);
  for (Eigen::Index j = 0; j < kappa_; ++j) {
    e[j] = 1.0;
    h.col(j) = mlp_hvp(*m, shapes, f, theta, batch, e);
    e[j] = 0.0;
  }
  return h;
}

double BaseModel::accuracy(const Vector& theta, const Batch& batch) const {
  check_theta(theta, "accuracy");
  const auto* m = std::get_if<Mlp>(&descriptor_);
  if (m == nullptr) throw ArgumentError("accuracy: model is not a classifier");
  check_batch(batch, "accuracy");
  const Forward f = forward(*m, layer_shapes(*m), theta, batch.inputs);
  Eigen::Index correct = 0;
  for (Eigen::Index r = 0; r < f.probs.rows(); ++r) {
    Eigen::Index arg = 0;
    f.probs.row(r).maxCoeff(&arg);
    if (arg == batch.labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(f.probs.rows());
}

Vector BaseModel::init_params(RngStream& rng) const {
  Vector theta = Vector::Zero(kappa_);
  const auto* m = std::get_if<Mlp>(&descriptor_);
  if (m == nullptr) {
    for (Eigen::Index i = 0; i < kappa_; ++i) theta[i] = rng.normal();
    return theta;
  }
  for (const auto& s : layer_shapes(*m)) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(s.in));
    for (Eigen::Index i = 0; i < s.in * s.out; ++i) theta[s.w_offset + i] = scale * rng.normal();
  }
  return theta;
}

}  // namespace metamd
