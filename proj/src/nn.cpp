#include "rpg/nn.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace rpg::nn {

// --- ParamVector -------------------------------------------------------------

int ParamVector::AddSlice(std::string name, int rows, int cols) {
  if (rows <= 0 || cols <= 0) throw std::invalid_argument("empty slice " + name);
  if (FindSlice(name) >= 0) throw std::invalid_argument("duplicate slice " + name);
  SliceInfo info{std::move(name), data_.size(), rows, cols};
  const Eigen::Index old = data_.size();
  Vector grown = Vector::Zero(old + info.size());
  grown.head(old) = data_;
  data_ = std::move(grown);
  slices_.push_back(std::move(info));
  return static_cast<int>(slices_.size()) - 1;
}

int ParamVector::FindSlice(std::string_view name) const {
  for (size_t i = 0; i < slices_.size(); ++i) {
    if (slices_[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

Eigen::Map<Matrix> ParamVector::Mat(int slice) {
  const SliceInfo& s = slices_.at(slice);
  return Eigen::Map<Matrix>(data_.data() + s.offset, s.rows, s.cols);
}

Eigen::Map<const Matrix> ParamVector::Mat(int slice) const {
  const SliceInfo& s = slices_.at(slice);
  return Eigen::Map<const Matrix>(data_.data() + s.offset, s.rows, s.cols);
}

ParamVector ParamVector::ZerosLike() const {
  ParamVector z;
  z.slices_ = slices_;
  z.data_ = Vector::Zero(data_.size());
  return z;
}

bool ParamVector::SameLayout(const ParamVector& other) const {
  if (slices_.size() != other.slices_.size()) return false;
  for (size_t i = 0; i < slices_.size(); ++i) {
    const auto& a = slices_[i];
    const auto& b = other.slices_[i];
    if (a.name != b.name || a.rows != b.rows || a.cols != b.cols ||
        a.offset != b.offset) {
      return false;
    }
  }
  return true;
}

std::map<std::string, Matrix> ParamVector::Unpack() const {
  std::map<std::string, Matrix> out;
  for (size_t i = 0; i < slices_.size(); ++i) {
    out.emplace(slices_[i].name, Mat(static_cast<int>(i)));
  }
  return out;
}

ParamVector ParamVector::Pack(const ParamVector& layout,
                              const std::map<std::string, Matrix>& named) {
  ParamVector p = layout.ZerosLike();
  for (size_t i = 0; i < p.slices_.size(); ++i) {
    const SliceInfo& s = p.slices_[i];
    auto it = named.find(s.name);
    if (it == named.end()) throw std::invalid_argument("missing slice " + s.name);
    if (it->second.rows() != s.rows || it->second.cols() != s.cols) {
      throw std::invalid_argument("shape mismatch for slice " + s.name);
    }
    p.Mat(static_cast<int>(i)) = it->second;
  }
  return p;
}

uint64_t ParamVector::Hash(std::string_view prefix) const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const SliceInfo& s : slices_) {
    if (s.name.compare(0, prefix.size(), prefix) != 0) continue;
    const auto* bytes = reinterpret_cast<const unsigned char*>(data_.data() + s.offset);
    const size_t n = static_cast<size_t>(s.size()) * sizeof(double);
    for (size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

// --- activations ---------------------------------------------------------------

std::string ActivationName(Activation a) {
  return a == Activation::kTanh ? "tanh" : "relu";
}

Activation ParseActivation(std::string_view name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  throw std::invalid_argument("unknown activation " + std::string(name));
}

namespace {

Matrix Sigmoid(const Matrix& x) {
  return (1.0 + (-x.array()).exp()).inverse().matrix();
}

void OrthogonalInit(Eigen::Map<Matrix> w, double gain, Rng& rng) {
  const Eigen::Index rows = w.rows();
  const Eigen::Index cols = w.cols();
  const bool tall = rows >= cols;
  const Eigen::Index big = tall ? rows : cols;
  const Eigen::Index small = tall ? cols : rows;
  Matrix g(big, small);
  for (Eigen::Index j = 0; j < small; ++j) {
    for (Eigen::Index i = 0; i < big; ++i) g(i, j) = rng.Normal();
  }
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(big, small);
  const Matrix r = qr.matrixQR().topLeftCorner(small, small);
  for (Eigen::Index j = 0; j < small; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  if (tall) {
    w = gain * q;
  } else {
    w = gain * q.transpose();
  }
}

}  // namespace

// --- Network -------------------------------------------------------------------

Network::Network(ParamVector& params, std::string prefix,
                 const Architecture& arch)
    : arch_(arch), prefix_(std::move(prefix)) {
  if (arch.input_dim <= 0 || arch.output_dim <= 0 || arch.hidden <= 0 ||
      arch.hidden_layers < 0) {
    throw std::invalid_argument("invalid architecture");
  }
  if (arch.recurrent && arch.hidden_layers == 0) {
    throw std::invalid_argument("recurrent networks need a torso layer");
  }
  int width = arch.input_dim;
  for (int l = 0; l < arch.hidden_layers; ++l) {
    const std::string base = prefix_ + "/fc" + std::to_string(l);
    torso_w_.push_back(params.AddSlice(base + "/W", arch.hidden, width));
    torso_b_.push_back(params.AddSlice(base + "/b", arch.hidden, 1));
    width = arch.hidden;
  }
  if (arch.recurrent) {
    const int h = arch.hidden;
    gru_wih_ = params.AddSlice(prefix_ + "/gru/W_ih", 3 * h, width);
    gru_whh_ = params.AddSlice(prefix_ + "/gru/W_hh", 3 * h, h);
    gru_bih_ = params.AddSlice(prefix_ + "/gru/b_ih", 3 * h, 1);
    gru_bhh_ = params.AddSlice(prefix_ + "/gru/b_hh", 3 * h, 1);
    width = h;
  }
  head_w_ = params.AddSlice(prefix_ + "/head/W", arch.output_dim, width);
  head_b_ = params.AddSlice(prefix_ + "/head/b", arch.output_dim, 1);
}

void Network::Initialize(ParamVector& params, Rng& rng) const {
  for (size_t l = 0; l < torso_w_.size(); ++l) {
    OrthogonalInit(params.Mat(torso_w_[l]), 1.0, rng);
    params.Mat(torso_b_[l]).setZero();
  }
  if (arch_.recurrent) {
    const int h = arch_.hidden;
    auto wih = params.Mat(gru_wih_);
    auto whh = params.Mat(gru_whh_);
    for (int g = 0; g < 3; ++g) {
      Matrix block(h, wih.cols());
      OrthogonalInit(Eigen::Map<Matrix>(block.data(), h, wih.cols()), 1.0, rng);
      wih.middleRows(g * h, h) = block;
      Matrix rec(h, h);
      OrthogonalInit(Eigen::Map<Matrix>(rec.data(), h, h), 1.0, rng);
      whh.middleRows(g * h, h) = rec;
    }
    params.Mat(gru_bih_).setZero();
    params.Mat(gru_bhh_).setZero();
  }
  OrthogonalInit(params.Mat(head_w_), arch_.output_gain, rng);
  params.Mat(head_b_).setZero();
}

Matrix Network::Activate(const Matrix& pre) const {
  if (arch_.activation == Activation::kTanh) return pre.array().tanh().matrix();
  return pre.cwiseMax(0.0);
}

ForwardPass Network::Forward(const ParamVector& params, const Matrix& inputs,
                             int steps, int batch, const Matrix* h0,
                             const Array* reset) const {
  if (steps < 1 || batch < 1) throw std::invalid_argument("empty batch");
  const Eigen::Index tb = static_cast<Eigen::Index>(steps) * batch;
  if (inputs.rows() != arch_.input_dim || inputs.cols() != tb) {
    throw std::invalid_argument("input shape mismatch: expected " +
                                std::to_string(arch_.input_dim) + "x" +
                                std::to_string(tb));
  }
  ForwardPass pass;
  pass.steps = steps;
  pass.batch = batch;
  pass.input = arch_.input_scale == 1.0 ? inputs : Matrix(inputs * arch_.input_scale);

  const Matrix* x = &pass.input;
  pass.hidden.reserve(torso_w_.size());
  for (size_t l = 0; l < torso_w_.size(); ++l) {
    Matrix pre = params.Mat(torso_w_[l]) * (*x);
    pre.colwise() += params.Mat(torso_b_[l]).col(0);
    pass.hidden.push_back(Activate(pre));
    x = &pass.hidden.back();
  }

  if (arch_.recurrent) {
    const int h = arch_.hidden;
    if (h0 && (h0->rows() != h || h0->cols() != batch)) {
      throw std::invalid_argument("initial hidden state shape mismatch");
    }
    if (reset && (reset->rows() != steps || reset->cols() != batch)) {
      throw std::invalid_argument("reset mask shape mismatch");
    }
    Matrix gi = params.Mat(gru_wih_) * (*x);
    gi.colwise() += params.Mat(gru_bih_).col(0);
    const auto whh = params.Mat(gru_whh_);
    const auto bhh = params.Mat(gru_bhh_).col(0);
    pass.h_prev.resize(h, tb);
    pass.r.resize(h, tb);
    pass.z.resize(h, tb);
    pass.n.resize(h, tb);
    pass.hn.resize(h, tb);
    pass.features.resize(h, tb);
    Matrix state = h0 ? *h0 : Matrix::Zero(h, batch);
    Matrix gh(3 * h, batch);
    for (int t = 0; t < steps; ++t) {
      const Eigen::Index c0 = static_cast<Eigen::Index>(t) * batch;
      if (reset) {
        for (int b = 0; b < batch; ++b) {
          if ((*reset)(t, b) != 0.0) state.col(b).setZero();
        }
      }
      pass.h_prev.middleCols(c0, batch) = state;
      gh.noalias() = whh * state;
      gh.colwise() += bhh;
      auto r = pass.r.middleCols(c0, batch);
      auto z = pass.z.middleCols(c0, batch);
      auto n = pass.n.middleCols(c0, batch);
      r = Sigmoid(gi.block(0, c0, h, batch) + gh.topRows(h));
      z = Sigmoid(gi.block(h, c0, h, batch) + gh.middleRows(h, h));
      pass.hn.middleCols(c0, batch) = gh.bottomRows(h);
      n = (gi.block(2 * h, c0, h, batch).array() +
           r.array() * gh.bottomRows(h).array())
              .tanh()
              .matrix();
      state = ((1.0 - z.array()) * n.array() + z.array() * state.array()).matrix();
      pass.features.middleCols(c0, batch) = state;
    }
    pass.final_hidden = std::move(state);
    if (reset) pass.reset = *reset;
  } else {
    pass.features = *x;
  }

  pass.output = params.Mat(head_w_) * pass.features;
  pass.output.colwise() += params.Mat(head_b_).col(0);
  pass.recorded = true;
  return pass;
}

void Network::Backward(const ParamVector& params, const ForwardPass& pass,
                       const Matrix& d_output, ParamVector& grad) const {
  if (!pass.recorded) throw std::logic_error("backward without forward");
  if (!grad.SameLayout(params)) throw std::invalid_argument("gradient layout mismatch");
  if (d_output.rows() != pass.output.rows() || d_output.cols() != pass.output.cols()) {
    throw std::invalid_argument("upstream gradient shape mismatch");
  }
  grad.Mat(head_w_).noalias() += d_output * pass.features.transpose();
  grad.Mat(head_b_) += d_output.rowwise().sum();
  Matrix dx = params.Mat(head_w_).transpose() * d_output;

  if (arch_.recurrent) {
    const int h = arch_.hidden;
    const int batch = pass.batch;
    const Eigen::Index tb = pass.output.cols();
    const Matrix& gru_in = pass.hidden.back();
    const auto whh = params.Mat(gru_whh_);
    Matrix da_ih(3 * h, tb);
    Matrix da_hh(3 * h, tb);
    Matrix dh_next = Matrix::Zero(h, batch);
    for (int t = pass.steps - 1; t >= 0; --t) {
      const Eigen::Index c0 = static_cast<Eigen::Index>(t) * batch;
      const Eigen::ArrayXXd dh = (dx.middleCols(c0, batch) + dh_next).array();
      const auto z = pass.z.middleCols(c0, batch).array();
      const auto r = pass.r.middleCols(c0, batch).array();
      const auto n = pass.n.middleCols(c0, batch).array();
      const auto hn = pass.hn.middleCols(c0, batch).array();
      const auto hp = pass.h_prev.middleCols(c0, batch).array();

      const Eigen::ArrayXXd dan = dh * (1.0 - z) * (1.0 - n * n);
      const Eigen::ArrayXXd daz = dh * (hp - n) * z * (1.0 - z);
      const Eigen::ArrayXXd dar = dan * hn * r * (1.0 - r);
      da_ih.block(0, c0, h, batch) = dar.matrix();
      da_ih.block(h, c0, h, batch) = daz.matrix();
      da_ih.block(2 * h, c0, h, batch) = dan.matrix();
      da_hh.block(0, c0, h, batch) = dar.matrix();
      da_hh.block(h, c0, h, batch) = daz.matrix();
      da_hh.block(2 * h, c0, h, batch) = (dan * r).matrix();

      dh_next = (dh * z).matrix();
      dh_next.noalias() += whh.transpose() * da_hh.middleCols(c0, batch);
      // Zeroing the state before step t also cuts its gradient.
      if (pass.reset.size() > 0) {
        for (int b = 0; b < batch; ++b) {
          if (pass.reset(t, b) != 0.0) dh_next.col(b).setZero();
        }
      }
    }
    grad.Mat(gru_wih_).noalias() += da_ih * gru_in.transpose();
    grad.Mat(gru_bih_) += da_ih.rowwise().sum();
    grad.Mat(gru_whh_).noalias() += da_hh * pass.h_prev.transpose();
    grad.Mat(gru_bhh_) += da_hh.rowwise().sum();
    dx = params.Mat(gru_wih_).transpose() * da_ih;
  }

  for (int l = static_cast<int>(torso_w_.size()) - 1; l >= 0; --l) {
    const Matrix& a = pass.hidden[l];
    Matrix d_pre;
    if (arch_.activation == Activation::kTanh) {
      d_pre = (dx.array() * (1.0 - a.array().square())).matrix();
    } else {
      d_pre = (dx.array() * (a.array() > 0.0).cast<double>()).matrix();
    }
    const Matrix& in = l == 0 ? pass.input : pass.hidden[l - 1];
    grad.Mat(torso_w_[l]).noalias() += d_pre * in.transpose();
    grad.Mat(torso_b_[l]) += d_pre.rowwise().sum();
    if (l > 0) dx = params.Mat(torso_w_[l]).transpose() * d_pre;
  }
}

Matrix LogSoftmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double mx = logits.col(j).maxCoeff();
    const double lse = mx + std::log((logits.col(j).array() - mx).exp().sum());
    out.col(j) = logits.col(j).array() - lse;
  }
  return out;
}

// --- LossGraph -------------------------------------------------------------------

void LossGraph::AddNetworkTerm(const Network& net, ForwardPass pass,
                               Matrix d_output, double value) {
  if (!pass.recorded) throw std::logic_error("term without a forward pass");
  terms_.push_back(Term{&net, std::move(pass), std::move(d_output)});
  value_ += value;
  ++recorded_;
}

void LossGraph::AddParamSum(double coeff) {
  param_sum_ += coeff;
  value_ += coeff * params_->flat().sum();
  ++recorded_;
}

void LossGraph::AddHalfSquaredNorm(double coeff) {
  half_sq_ += coeff;
  value_ += 0.5 * coeff * params_->flat().squaredNorm();
  ++recorded_;
}

ParamVector LossGraph::Backward() const {
  if (empty()) throw std::logic_error("backward without forward");
  ParamVector grad = params_->ZerosLike();
  for (const Term& t : terms_) t.net->Backward(*params_, t.pass, t.d_output, grad);
  if (param_sum_ != 0.0) grad.flat().array() += param_sum_;
  if (half_sq_ != 0.0) grad.flat() += half_sq_ * params_->flat();
  return grad;
}

// --- optimizer -------------------------------------------------------------------

namespace {

bool Matches(const SliceInfo& s, std::string_view prefix) {
  return s.name.compare(0, prefix.size(), prefix) == 0;
}

}  // namespace

double ClipGradNorm(ParamVector& grad, double max_norm, std::string_view prefix) {
  double sq = 0.0;
  for (const SliceInfo& s : grad.slices()) {
    if (Matches(s, prefix)) sq += grad.flat().segment(s.offset, s.size()).squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-6);
    for (const SliceInfo& s : grad.slices()) {
      if (Matches(s, prefix)) grad.flat().segment(s.offset, s.size()) *= scale;
    }
  }
  return norm;
}

void AdamStep(ParamVector& params, const ParamVector& grad, AdamState& state,
              double learning_rate, const AdamConfig& cfg,
              std::string_view prefix) {
  if (!grad.SameLayout(params)) throw std::invalid_argument("gradient layout mismatch");
  if (state.m.size() != params.size()) {
    state.m = Vector::Zero(params.size());
    state.v = Vector::Zero(params.size());
    state.t = 0;
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const double step = learning_rate * std::sqrt(bc2) / bc1;
  for (const SliceInfo& s : params.slices()) {
    if (!Matches(s, prefix)) continue;
    auto g = grad.flat().segment(s.offset, s.size()).array();
    auto m = state.m.segment(s.offset, s.size()).array();
    auto v = state.v.segment(s.offset, s.size()).array();
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.square();
    params.flat().segment(s.offset, s.size()).array() -=
        step * m / (v.sqrt() + cfg.epsilon * std::sqrt(bc2));
  }
}

// --- Checkpoint ---------------------------------------------------------------------

namespace {

std::string Hex(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%a", x);
  return buf;
}

double ParseDouble(const std::string& tok) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0') {
    throw std::runtime_error("checkpoint: bad number '" + tok + "'");
  }
  return v;
}

void Expect(std::istream& in, const std::string& word) {
  std::string tok;
  if (!(in >> tok) || tok != word) {
    throw std::runtime_error("checkpoint: expected '" + word + "', got '" + tok + "'");
  }
}

}  // namespace

std::string Checkpoint::Serialize() const {
  std::ostringstream out;
  out << "rpg-checkpoint 1\n";
  out << "networks " << networks.size() << '\n';
  for (const auto& [prefix, a] : networks) {
    out << "net " << prefix << ' ' << a.input_dim << ' ' << a.hidden << ' '
        << a.hidden_layers << ' ' << (a.recurrent ? 1 : 0) << ' ' << a.output_dim
        << ' ' << ActivationName(a.activation) << ' ' << Hex(a.input_scale) << ' '
        << Hex(a.output_gain) << '\n';
  }
  out << "slices " << params.slices().size() << '\n';
  for (size_t i = 0; i < params.slices().size(); ++i) {
    const SliceInfo& s = params.slices()[i];
    out << "slice " << s.name << ' ' << s.rows << ' ' << s.cols;
    const auto seg = params.flat().segment(s.offset, s.size());
    for (Eigen::Index k = 0; k < seg.size(); ++k) out << ' ' << Hex(seg[k]);
    out << '\n';
  }
  const bool has_opt = optimizer.m.size() == params.size() && params.size() > 0;
  out << "adam " << (has_opt ? optimizer.t : -1) << '\n';
  if (has_opt) {
    out << "m";
    for (Eigen::Index k = 0; k < optimizer.m.size(); ++k) out << ' ' << Hex(optimizer.m[k]);
    out << "\nv";
    for (Eigen::Index k = 0; k < optimizer.v.size(); ++k) out << ' ' << Hex(optimizer.v[k]);
    out << '\n';
  }
  out << "rng " << (rng_state.empty() ? 0 : 1) << '\n';
  if (!rng_state.empty()) out << rng_state << '\n';
  out << "meta " << meta.size() << '\n';
  for (const auto& [k, v] : meta) out << k << ' ' << v << '\n';
  out << "end\n";
  return out.str();
}

Checkpoint Checkpoint::Deserialize(const std::string& text) {
  std::istringstream in(text);
  Checkpoint ck;
  Expect(in, "rpg-checkpoint");
  int version = 0;
  in >> version;
  if (version != 1) throw std::runtime_error("checkpoint: unsupported version");
  Expect(in, "networks");
  size_t n_nets = 0;
  in >> n_nets;
  for (size_t i = 0; i < n_nets; ++i) {
    Expect(in, "net");
    std::string prefix, act, scale, gain;
    Architecture a;
    int rec = 0;
    in >> prefix >> a.input_dim >> a.hidden >> a.hidden_layers >> rec >> a.output_dim >>
        act >> scale >> gain;
    a.recurrent = rec != 0;
    a.activation = ParseActivation(act);
    a.input_scale = ParseDouble(scale);
    a.output_gain = ParseDouble(gain);
    ck.networks[prefix] = a;
  }
  Expect(in, "slices");
  size_t n_slices = 0;
  in >> n_slices;
  std::vector<std::pair<std::string, std::vector<double>>> raw;
  for (size_t i = 0; i < n_slices; ++i) {
    Expect(in, "slice");
    std::string name;
    int rows = 0, cols = 0;
    in >> name >> rows >> cols;
    const int idx = ck.params.AddSlice(name, rows, cols);
    auto seg = ck.params.flat().segment(ck.params.slices()[idx].offset,
                                        static_cast<Eigen::Index>(rows) * cols);
    for (Eigen::Index k = 0; k < seg.size(); ++k) {
      std::string tok;
      in >> tok;
      seg[k] = ParseDouble(tok);
    }
  }
  Expect(in, "adam");
  int64_t t = -1;
  in >> t;
  if (t >= 0) {
    ck.optimizer.t = t;
    ck.optimizer.m.resize(ck.params.size());
    ck.optimizer.v.resize(ck.params.size());
    Expect(in, "m");
    for (Eigen::Index k = 0; k < ck.params.size(); ++k) {
      std::string tok;
      in >> tok;
      ck.optimizer.m[k] = ParseDouble(tok);
    }
    Expect(in, "v");
    for (Eigen::Index k = 0; k < ck.params.size(); ++k) {
      std::string tok;
      in >> tok;
      ck.optimizer.v[k] = ParseDouble(tok);
    }
  }
  Expect(in, "rng");
  int has_rng = 0;
  in >> has_rng;
  if (has_rng) {
    in >> std::ws;
    std::getline(in, ck.rng_state);
  }
  Expect(in, "meta");
  size_t n_meta = 0;
  in >> n_meta;
  for (size_t i = 0; i < n_meta; ++i) {
    std::string k, v;
    in >> k >> std::ws;
    std::getline(in, v);
    ck.meta[k] = v;
  }
  Expect(in, "end");
  if (!in) throw std::runtime_error("checkpoint: truncated");
  return ck;
}

void Checkpoint::Save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << Serialize();
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

Checkpoint Checkpoint::Load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return Deserialize(buf.str());
}

}  // namespace rpg::nn
