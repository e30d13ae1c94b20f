#include "rpg/rng.hpp"

#include <sstream>

namespace rpg {

std::string Rng::SerializeState() const {
  std::ostringstream out;
  out << engine_;
  return out.str();
}

void Rng::RestoreState(const std::string& state) {
  std::istringstream in(state);
  in >> engine_;
}

}  // namespace rpg
