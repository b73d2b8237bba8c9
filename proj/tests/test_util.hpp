#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "seriex/error.hpp"
#include "seriex/tensor.hpp"
#include "seriex/tensorio.hpp"

namespace testutil {

inline std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("seriex_test_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::vector<double> gaussian(std::size_t n, std::mt19937_64& rng, double sigma = 1.0) {
  std::normal_distribution<double> d(0.0, sigma);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

inline std::vector<double> uniform(std::size_t n, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <typename F>
seriex::ErrorKind error_kind_of(F&& f) {
  try {
    f();
  } catch (const seriex::Error& e) {
    return e.kind();
  }
  throw std::runtime_error("expected a seriex::Error");
}

/// Model made of one linear layer (weights out x in), optionally followed by
/// the given element-wise layers.
inline seriex::ModelManifest linear_model(std::size_t out, std::size_t in, const std::vector<double>& w,
                                          const std::vector<double>& bias,
                                          std::vector<seriex::LayerKind> tail = {}) {
  using namespace seriex;
  ModelManifest m;
  m.name = "linear";
  m.input_shape = {in};
  LayerDesc l;
  l.kind = LayerKind::Linear;
  l.name = "fc";
  l.params["weight"] = "fc.weight";
  m.blobs["fc.weight"] = Tensor::from_f64({out, in}, w);
  if (!bias.empty()) {
    l.params["bias"] = "fc.bias";
    m.blobs["fc.bias"] = Tensor::from_f64({out}, bias);
  }
  m.layers.push_back(l);
  for (std::size_t i = 0; i < tail.size(); ++i) {
    LayerDesc e;
    e.kind = tail[i];
    e.name = "tail" + std::to_string(i);
    m.layers.push_back(e);
  }
  return m;
}

inline seriex::Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double sigma = 1.0) {
  return seriex::Matrix(r, c, gaussian(r * c, rng, sigma));
}

}  // namespace testutil
