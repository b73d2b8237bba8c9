#pragma once

#include "seriex/runtime.hpp"

namespace fixture {

/// Three Gaussian blobs in the plane and the 2-16-16-3 MLP trained on them.
inline const seriex::Dataset& blobs() {
  static const seriex::Dataset d = seriex::make_blobs(3, 2, 3000, 7);
  return d;
}

inline const seriex::ModelManifest& mlp() {
  static const seriex::ModelManifest m = [] {
    seriex::TrainOptions o;
    o.epochs = 50;
    o.seed = 1;
    return seriex::train_fixture(seriex::ArchSpec::mlp({2, 16, 16, 3}), blobs(), o);
  }();
  return m;
}

}  // namespace fixture
