#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mfvi/rng.hpp"
#include "mfvi/vi_core.hpp"

namespace mfvi {

struct Datum {
  Vector x;
  double y = 0.0;
};

/// Toy regression law: x ~ U([-1, 1]^d), y = tanh(<x, teacher>) + noise_std * eps.
struct DataModel {
  std::size_t dim = 5;
  Vector teacher;
  double noise_std = 0.01;

  /// Teacher drawn from a standard normal and scaled to unit norm.
  static DataModel toy(std::size_t dim = 5, std::uint64_t teacher_seed = 0,
                       double noise_std = 0.01) {
    if (dim == 0) throw std::invalid_argument("data model dimension must be positive");
    CounterRng rng(teacher_seed, 0, 0, Stream::teacher);
    Vector t(dim);
    double n = 0.0;
    while (n == 0.0) {
      rng.fill_normal(t);
      n = norm(t);
    }
    for (double& v : t) v /= n;
    return DataModel{dim, std::move(t), noise_std};
  }

  void validate() const {
    if (teacher.size() != dim) throw std::invalid_argument("teacher length must equal dim");
    if (std::abs(norm(teacher) - 1.0) > 1e-12) throw std::invalid_argument("teacher must have unit norm");
    if (!(noise_std >= 0.0)) throw std::invalid_argument("noise_std must be nonnegative");
  }
};

inline Datum gen_datum(const DataModel& model, CounterRng& rng) {
  Datum d;
  d.x.resize(model.dim);
  for (double& v : d.x) v = rng.uniform(-1.0, 1.0);
  const double eps = rng.normal();
  d.y = std::tanh(dot(d.x, model.teacher)) + model.noise_std * eps;
  return d;
}

inline std::vector<Datum> sample_data(const DataModel& model, std::size_t count, CounterRng& rng) {
  std::vector<Datum> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_datum(model, rng));
  return out;
}

/// Fixed i.i.d. sample from the data law, deterministic in (seed, realization).
inline std::vector<Datum> sample_data(const DataModel& model, std::size_t count,
                                      std::uint64_t seed, std::uint64_t realization,
                                      Stream stream = Stream::pi_sample) {
  CounterRng rng(seed, realization, 0, stream);
  return sample_data(model, count, rng);
}

}  // namespace mfvi
