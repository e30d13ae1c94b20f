#ifndef RPG_NN_HPP_
#define RPG_NN_HPP_

// Fixed-architecture networks with hand-written reverse-mode gradients:
// MLP torso (tanh or ReLU), optional GRU cell, linear output head. Batches
// are column-major: one column per sample, time-major for sequences
// (column t * batch + b).

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "rpg/rng.hpp"

namespace rpg::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Array = Eigen::ArrayXXd;

struct SliceInfo {
  std::string name;
  Eigen::Index offset = 0;
  int rows = 0;
  int cols = 0;
  Eigen::Index size() const { return static_cast<Eigen::Index>(rows) * cols; }
};

// Flat parameter storage with named, column-major matrix slices.
class ParamVector {
 public:
  int AddSlice(std::string name, int rows, int cols);
  // -1 when absent.
  int FindSlice(std::string_view name) const;

  Eigen::Map<Matrix> Mat(int slice);
  Eigen::Map<const Matrix> Mat(int slice) const;

  Vector& flat() { return data_; }
  const Vector& flat() const { return data_; }
  Eigen::Index size() const { return data_.size(); }
  const std::vector<SliceInfo>& slices() const { return slices_; }

  ParamVector ZerosLike() const;
  bool SameLayout(const ParamVector& other) const;

  std::map<std::string, Matrix> Unpack() const;
  // Rebuilds a vector with `layout`'s slices from named matrices. Throws
  // std::invalid_argument on a missing name or a shape mismatch.
  static ParamVector Pack(const ParamVector& layout,
                          const std::map<std::string, Matrix>& named);

  // FNV-1a over the raw bytes of every slice whose name starts with prefix.
  uint64_t Hash(std::string_view prefix = "") const;

 private:
  std::vector<SliceInfo> slices_;
  Vector data_;
};

enum class Activation { kTanh, kRelu };

std::string ActivationName(Activation a);
Activation ParseActivation(std::string_view name);

struct Architecture {
  int input_dim = 0;
  int hidden = 64;
  int hidden_layers = 2;
  bool recurrent = false;  // GRU(hidden, hidden) between torso and head
  int output_dim = 1;
  Activation activation = Activation::kTanh;
  double input_scale = 1.0;
  double output_gain = 1.0;  // init gain of the head

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

// Everything the backward pass needs from a forward pass.
struct ForwardPass {
  int steps = 0;
  int batch = 0;
  Matrix input;                   // scaled inputs, in x T*B
  std::vector<Matrix> hidden;     // post-activation torso layers
  // GRU caches, H x T*B each (gate order r, z, n).
  Matrix h_prev, r, z, n, hn;
  Matrix features;                // head input, H x T*B
  Matrix output;                  // out x T*B
  Matrix final_hidden;            // H x B (recurrent only)
  Array reset;                    // T x B, empty when no mask was given
  bool recorded = false;
};

class Network {
 public:
  Network() = default;
  // Registers this network's slices in `params` under `prefix`.
  Network(ParamVector& params, std::string prefix, const Architecture& arch);

  // Orthogonal init with unit gain for hidden layers and arch.output_gain for
  // the head; zero biases.
  void Initialize(ParamVector& params, Rng& rng) const;

  // inputs: input_dim x (steps * batch). h0: hidden x batch (zeros when
  // null). reset: steps x batch, 1 where the hidden state is zeroed before
  // that step (episode start inside a sequence).
  ForwardPass Forward(const ParamVector& params, const Matrix& inputs,
                      int steps, int batch, const Matrix* h0 = nullptr,
                      const Array* reset = nullptr) const;

  // Accumulates d(loss)/d(params) into grad given d(loss)/d(output).
  // Throws std::logic_error when `pass` was never recorded.
  void Backward(const ParamVector& params, const ForwardPass& pass,
                const Matrix& d_output, ParamVector& grad) const;

  const Architecture& arch() const { return arch_; }
  const std::string& prefix() const { return prefix_; }
  bool recurrent() const { return arch_.recurrent; }
  int hidden_size() const { return arch_.hidden; }

 private:
  Matrix Activate(const Matrix& pre) const;

  Architecture arch_;
  std::string prefix_;
  std::vector<int> torso_w_, torso_b_;
  int gru_wih_ = -1, gru_whh_ = -1, gru_bih_ = -1, gru_bhh_ = -1;
  int head_w_ = -1, head_b_ = -1;
};

// Column-wise log-softmax.
Matrix LogSoftmax(const Matrix& logits);

// A scalar loss assembled from network terms (each with a precomputed
// upstream gradient) and parameter-level terms. Backward() returns the exact
// gradient of the recorded total.
class LossGraph {
 public:
  explicit LossGraph(const ParamVector& params) : params_(&params) {}

  void AddNetworkTerm(const Network& net, ForwardPass pass, Matrix d_output,
                      double value);
  // coeff * sum(p)
  void AddParamSum(double coeff);
  // coeff * |p|^2 / 2
  void AddHalfSquaredNorm(double coeff);

  double value() const { return value_; }
  bool empty() const { return recorded_ == 0; }
  // Throws std::logic_error when nothing was recorded.
  ParamVector Backward() const;

 private:
  struct Term {
    const Network* net;
    ForwardPass pass;
    Matrix d_output;
  };
  const ParamVector* params_;
  std::vector<Term> terms_;
  double param_sum_ = 0.0;
  double half_sq_ = 0.0;
  int recorded_ = 0;
  double value_ = 0.0;
};

struct AdamState {
  Vector m;
  Vector v;
  int64_t t = 0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-5;
};

// Global L2 norm of grad over slices with the prefix; rescales them in place
// when it exceeds max_norm. Returns the pre-clip norm.
double ClipGradNorm(ParamVector& grad, double max_norm,
                    std::string_view prefix = "");

// One Adam step on slices whose name starts with `prefix`; other slices and
// their moments are left bit-identical.
void AdamStep(ParamVector& params, const ParamVector& grad, AdamState& state,
              double learning_rate, const AdamConfig& cfg = AdamConfig{},
              std::string_view prefix = "");

// Text checkpoint: architectures, named slices, optimizer moments and an RNG
// state. Doubles are written as hex floats so a reload is bit-exact.
struct Checkpoint {
  std::map<std::string, Architecture> networks;  // prefix -> architecture
  ParamVector params;
  AdamState optimizer;
  std::string rng_state;
  std::map<std::string, std::string> meta;

  void Save(const std::string& path) const;
  static Checkpoint Load(const std::string& path);
  std::string Serialize() const;
  static Checkpoint Deserialize(const std::string& text);
};

}  // namespace rpg::nn

#endif  // RPG_NN_HPP_
