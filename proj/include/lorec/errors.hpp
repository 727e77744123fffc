#pragma once

#include <stdexcept>
#include <string>

namespace lorec {

// Invalid or inconsistent input data (files, datasets, catalogs).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid experiment or model configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Embedding provider failures (remote fetch, cache corruption).
class ProviderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite losses or parameters during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lorec
