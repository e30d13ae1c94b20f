#ifndef RPG_MATRIX_CORE_HPP_
#define RPG_MATRIX_CORE_HPP_

// Closed-form analysis of projected self-play gradient ascent on 2x2
// stag-hunt games, plus Monte Carlo checks of the convergence bounds.

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rpg::matrix {

// Raised when a+d-b-c <= 0, i.e. there is no interior critical point.
class DegenerateGameError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Payoffs in the (row = own action, column = other's action) layout:
//            Stag   Hare
//   Stag     a, a   c, b
//   Hare     b, c   d, d
class PayoffMatrix {
 public:
  enum class Ordering { kStagHunt, kUnordered };

  // Throws std::invalid_argument unless a > b >= d > c, or `ordering` is
  // kUnordered (used for reward-randomized samples).
  PayoffMatrix(double a, double b, double c, double d,
               Ordering ordering = Ordering::kStagHunt);

  double a() const { return a_; }
  double b() const { return b_; }
  double c() const { return c_; }
  double d() const { return d_; }

  // a + d - b - c; the slope of each agent's gradient in the other's theta.
  double curvature() const { return a_ + d_ - b_ - c_; }
  bool is_stag_hunt() const;

  // (a - b) / (d - c). Theorem-1 style risk ratio.
  double epsilon() const;

 private:
  double a_, b_, c_, d_;
};

struct MixedProfile {
  double theta1 = 0.5;  // P(agent 1 plays Stag)
  double theta2 = 0.5;  // P(agent 2 plays Stag)

  // Throws std::invalid_argument if either theta is outside [0, 1].
  void Validate() const;
};

struct DynamicsConfig {
  double learning_rate = 0.01;
  int64_t max_steps = 100000;
  double convergence_tol = 1e-3;

  void Validate() const;
};

enum class Outcome { kStagNE, kHareNE, kNonConverged };

const char* OutcomeName(Outcome outcome);

struct DynamicsResult {
  MixedProfile profile;
  Outcome outcome = Outcome::kNonConverged;
  int64_t steps = 0;
};

struct BoundReport {
  std::string kind;              // "theorem1" or "theorem2"
  double epsilon = 0.0;          // theorem1 only
  int population_size = 0;       // theorem2 only
  double theoretical_bound = 0;  // upper (theorem1) or lower (theorem2) bound
  double empirical_rate = 0;
  int64_t trials = 0;
  int64_t successes = 0;
  double ci_halfwidth = 0;
  bool passed = false;

  // Single-line JSON object.
  std::string ToJson() const;
};

// Agent is 1 or 2.
double utility(const MixedProfile& profile, const PayoffMatrix& payoff,
               int agent);

// d U_agent / d theta_agent.
double exact_gradient(const MixedProfile& profile, const PayoffMatrix& payoff,
                      int agent);

// theta* = (d - c) / (a + d - b - c). Throws DegenerateGameError when the
// denominator is not positive.
double critical_threshold(const PayoffMatrix& payoff);

// Simultaneous projected gradient ascent with exact gradients. The visitor
// overload sees every intermediate profile.
DynamicsResult run_dynamics(const MixedProfile& init,
                            const PayoffMatrix& payoff,
                            const DynamicsConfig& cfg);

template <typename Visitor>
DynamicsResult run_dynamics(const MixedProfile& init,
                            const PayoffMatrix& payoff,
                            const DynamicsConfig& cfg, Visitor&& on_step);

// (2e + e^2) / (1 + 2e + e^2) for e in (0, 1].
double theorem1_bound(double epsilon);

// 1 - 0.6^N.
double theorem2_bound(int population_size);

// 1.96 * sqrt(p (1 - p) / n).
double wald_halfwidth(double rate, int64_t trials);

BoundReport verify_theorem1(const PayoffMatrix& payoff, int64_t trials,
                            const DynamicsConfig& cfg, uint64_t seed);

// Reward randomization with payoff entries ~ Unif[-1, 1]. A trial succeeds if
// any of the N perturbed runs ends with both thetas in the Stag band, i.e. the
// profile that is the Stag NE of the original game.
BoundReport verify_theorem2(int population_size, int64_t trials,
                            uint64_t seed,
                            const DynamicsConfig& cfg = DynamicsConfig{});

// ---------------------------------------------------------------------------

namespace internal {

inline double Clamp01(double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); }

Outcome Classify(const MixedProfile& p, double tol);

}  // namespace internal

template <typename Visitor>
DynamicsResult run_dynamics(const MixedProfile& init,
                            const PayoffMatrix& payoff,
                            const DynamicsConfig& cfg, Visitor&& on_step) {
  init.Validate();
  cfg.Validate();
  DynamicsResult result;
  result.profile = init;
  Outcome label = internal::Classify(result.profile, cfg.convergence_tol);
  while (label == Outcome::kNonConverged && result.steps < cfg.max_steps) {
    const MixedProfile& cur = result.profile;
    const double g1 = exact_gradient(cur, payoff, 1);
    const double g2 = exact_gradient(cur, payoff, 2);
    const MixedProfile next{
        internal::Clamp01(cur.theta1 + cfg.learning_rate * g1),
        internal::Clamp01(cur.theta2 + cfg.learning_rate * g2)};
    ++result.steps;
    on_step(next);
    // A projected step that changes nothing is a fixed point of the map.
    if (next.theta1 == cur.theta1 && next.theta2 == cur.theta2) break;
    result.profile = next;
    label = internal::Classify(result.profile, cfg.convergence_tol);
  }
  result.outcome = label;
  return result;
}

}  // namespace rpg::matrix

#endif  // RPG_MATRIX_CORE_HPP_
