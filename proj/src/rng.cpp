#include "vloop/rng.hpp"

#include <cmath>

namespace vloop {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller; u1 in (0,1] so log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

void Rng::fill_normal(std::vector<double>& out, double scale) {
  for (double& x : out) x = scale * normal();
}

std::uint64_t Rng::derive(std::uint64_t base, std::uint64_t a, std::uint64_t b,
                          std::uint64_t c) {
  auto mix = [](std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(base + 0x9e3779b97f4a7c15ull);
  h = mix(h ^ (a + 0xa0761d6478bd642full));
  h = mix(h ^ (b + 0xe7037ed1a0b428dbull));
  h = mix(h ^ (c + 0x8ebc6af09c88c6e3ull));
  return h;
}

std::uint64_t Rng::hash_name(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace vloop
