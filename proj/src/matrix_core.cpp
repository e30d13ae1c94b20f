#include "rpg/matrix_core.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <vector>

#include "rpg/parallel.hpp"
#include "rpg/rng.hpp"

namespace rpg::matrix {

PayoffMatrix::PayoffMatrix(double a, double b, double c, double d,
                           Ordering ordering)
    : a_(a), b_(b), c_(c), d_(d) {
  if (!std::isfinite(a) || !std::isfinite(b) || !std::isfinite(c) ||
      !std::isfinite(d)) {
    throw std::invalid_argument("payoff entries must be finite");
  }
  if (ordering == Ordering::kStagHunt && !is_stag_hunt()) {
    throw std::invalid_argument("stag-hunt ordering a > b >= d > c violated");
  }
}

bool PayoffMatrix::is_stag_hunt() const {
  return a_ > b_ && b_ >= d_ && d_ > c_;
}

double PayoffMatrix::epsilon() const {
  if (d_ - c_ == 0.0) throw DegenerateGameError("d - c is zero");
  return (a_ - b_) / (d_ - c_);
}

void MixedProfile::Validate() const {
  if (!(theta1 >= 0.0 && theta1 <= 1.0 && theta2 >= 0.0 && theta2 <= 1.0)) {
    throw std::invalid_argument("profile thetas must lie in [0, 1]");
  }
}

void DynamicsConfig::Validate() const {
  if (!(learning_rate > 0.0)) {
    throw std::invalid_argument("learning_rate must be positive");
  }
  if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  if (!(convergence_tol >= 0.0)) {
    throw std::invalid_argument("convergence_tol must be nonnegative");
  }
}

const char* OutcomeName(Outcome outcome) {
  switch (outcome) {
    case Outcome::kStagNE:
      return "StagNE";
    case Outcome::kHareNE:
      return "HareNE";
    case Outcome::kNonConverged:
      return "NonConverged";
  }
  return "?";
}

std::string BoundReport::ToJson() const {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "{\"kind\":\"%s\",\"epsilon\":%.17g,\"population_size\":%d,"
                "\"theoretical_bound\":%.17g,\"empirical_rate\":%.17g,"
                "\"trials\":%lld,\"successes\":%lld,\"ci_halfwidth\":%.17g,"
                "\"passed\":%s}",
                kind.c_str(), epsilon, population_size, theoretical_bound,
                empirical_rate, static_cast<long long>(trials),
                static_cast<long long>(successes), ci_halfwidth,
                passed ? "true" : "false");
  return buf;
}

namespace {

void CheckAgent(int agent) {
  if (agent != 1 && agent != 2) {
    throw std::invalid_argument("agent index must be 1 or 2");
  }
}

}  // namespace

double utility(const MixedProfile& profile, const PayoffMatrix& payoff,
               int agent) {
  CheckAgent(agent);
  // Each agent's payoff is symmetric: swapping the roles of the two thetas
  // turns U1 into U2.
  const double own = agent == 1 ? profile.theta1 : profile.theta2;
  const double other = agent == 1 ? profile.theta2 : profile.theta1;
  return payoff.a() * own * other + payoff.c() * own * (1.0 - other) +
         payoff.b() * (1.0 - own) * other +
         payoff.d() * (1.0 - own) * (1.0 - other);
}

double exact_gradient(const MixedProfile& profile, const PayoffMatrix& payoff,
                      int agent) {
  CheckAgent(agent);
  const double other = agent == 1 ? profile.theta2 : profile.theta1;
  return payoff.curvature() * other + payoff.c() - payoff.d();
}

double critical_threshold(const PayoffMatrix& payoff) {
  const double k = payoff.curvature();
  if (!(k > 0.0)) {
    throw DegenerateGameError("a + d - b - c must be positive");
  }
  return (payoff.d() - payoff.c()) / k;
}

namespace internal {

Outcome Classify(const MixedProfile& p, double tol) {
  if (p.theta1 >= 1.0 - tol && p.theta2 >= 1.0 - tol) return Outcome::kStagNE;
  if (p.theta1 <= tol && p.theta2 <= tol) return Outcome::kHareNE;
  return Outcome::kNonConverged;
}

}  // namespace internal

DynamicsResult run_dynamics(const MixedProfile& init,
                            const PayoffMatrix& payoff,
                            const DynamicsConfig& cfg) {
  return run_dynamics(init, payoff, cfg, [](const MixedProfile&) {});
}

double theorem1_bound(double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1.0)) {
    throw std::domain_error("epsilon must lie in (0, 1]");
  }
  const double num = 2.0 * epsilon + epsilon * epsilon;
  return num / (1.0 + num);
}

double theorem2_bound(int population_size) {
  if (population_size < 1) {
    throw std::invalid_argument("population size must be >= 1");
  }
  return 1.0 - std::pow(0.6, population_size);
}

double wald_halfwidth(double rate, int64_t trials) {
  if (trials <= 0) throw std::invalid_argument("insufficient trials");
  return 1.96 * std::sqrt(rate * (1.0 - rate) / static_cast<double>(trials));
}

namespace {

// Counts successes over independent trials; trial i draws from its own
// stream, so the total does not depend on the worker count.
template <typename Trial>
int64_t CountSuccesses(int64_t trials, Trial&& trial) {
  std::vector<uint8_t> hits(trials, 0);
  ParallelFor(trials, WorkerCount(), [&](int64_t i) { hits[i] = trial(i) ? 1 : 0; });
  int64_t total = 0;
  for (uint8_t h : hits) total += h;
  return total;
}

}  // namespace

BoundReport verify_theorem1(const PayoffMatrix& payoff, int64_t trials,
                            const DynamicsConfig& cfg, uint64_t seed) {
  if (trials <= 0) throw std::invalid_argument("insufficient trials");
  cfg.Validate();
  if (!payoff.is_stag_hunt()) {
    throw std::invalid_argument("payoff must satisfy the stag-hunt ordering");
  }
  critical_threshold(payoff);  // surfaces DegenerateGameError
  const double eps = payoff.epsilon();
  if (!(eps > 0.0 && eps < 1.0)) {
    throw std::domain_error("epsilon = (a-b)/(d-c) must lie in (0, 1)");
  }

  const int64_t successes = CountSuccesses(trials, [&](int64_t i) {
    Rng rng(seed, static_cast<uint64_t>(i));
    MixedProfile init;
    init.theta1 = rng.Uniform();
    init.theta2 = rng.Uniform();
    // NonConverged counts as a failure.
    return run_dynamics(init, payoff, cfg).outcome == Outcome::kStagNE;
  });

  BoundReport report;
  report.kind = "theorem1";
  report.epsilon = eps;
  report.theoretical_bound = theorem1_bound(eps);
  report.trials = trials;
  report.successes = successes;
  report.empirical_rate =
      static_cast<double>(successes) / static_cast<double>(trials);
  report.ci_halfwidth = wald_halfwidth(report.empirical_rate, trials);
  report.passed =
      report.empirical_rate <= report.theoretical_bound + report.ci_halfwidth;
  return report;
}

BoundReport verify_theorem2(int population_size, int64_t trials,
                            uint64_t seed, const DynamicsConfig& cfg) {
  if (population_size < 1) {
    throw std::invalid_argument("population size must be >= 1");
  }
  if (trials <= 0) throw std::invalid_argument("insufficient trials");
  cfg.Validate();

  const int64_t successes = CountSuccesses(trials, [&](int64_t i) {
    Rng rng(seed, static_cast<uint64_t>(i));
    bool found = false;
    // All N members are simulated even after a hit so the stream layout of
    // trial i is independent of the outcome.
    for (int member = 0; member < population_size; ++member) {
      const double a = rng.Uniform(-1.0, 1.0);
      const double b = rng.Uniform(-1.0, 1.0);
      const double c = rng.Uniform(-1.0, 1.0);
      const double d = rng.Uniform(-1.0, 1.0);
      const PayoffMatrix perturbed(a, b, c, d,
                                   PayoffMatrix::Ordering::kUnordered);
      MixedProfile init;
      init.theta1 = rng.Uniform();
      init.theta2 = rng.Uniform();
      const DynamicsResult run = run_dynamics(init, perturbed, cfg);
      // Judged on the original game: the converged profile must be the
      // (Stag, Stag) profile.
      if (internal::Classify(run.profile, cfg.convergence_tol) ==
          Outcome::kStagNE) {
        found = true;
      }
    }
    return found;
  });

  BoundReport report;
  report.kind = "theorem2";
  report.population_size = population_size;
  report.theoretical_bound = theorem2_bound(population_size);
  report.trials = trials;
  report.successes = successes;
  report.empirical_rate =
      static_cast<double>(successes) / static_cast<double>(trials);
  report.ci_halfwidth = wald_halfwidth(report.empirical_rate, trials);
  report.passed =
      report.empirical_rate >= report.theoretical_bound - report.ci_halfwidth;
  return report;
}

}  // namespace rpg::matrix
