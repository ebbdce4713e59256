#pragma once

#include <filesystem>
#include <random>

#include "astra/model.hpp"
#include "astra/toy_task.hpp"

namespace astra::testing {

inline ModelConfig trained_config() {
  ModelConfig c;
  c.seed = 3;
  return c;
}

// One trained model per test process; training takes ~10 s.
inline const ToyVLM& trained_model() {
  static const ToyVLM model = [] {
    const ModelConfig c = trained_config();
    ToyVLM m = init_model(c);
    const ToyTask task(c, TaskConfig{});
    train_toy(m, task, TrainConfig{});
    return m;
  }();
  return model;
}

inline const ToyTask& trained_task() {
  static const ToyTask task(trained_config(), TaskConfig{});
  return task;
}

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Vector random_vector(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
  return v;
}

inline std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "astra_toy_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace astra::testing
