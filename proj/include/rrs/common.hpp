#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rrs {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Scalar type used for training and inference. Tests instantiate the
/// numeric kernels with double for finite-difference checks.
using Real = float;

/// Base class for recoverable errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated artifact on disk.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A training run failed to reach its gate or produced a non-finite loss.
class TrainingFailure : public Error {
 public:
  using Error::Error;
};

inline constexpr int kNumCategories = 14;

enum class Label : std::uint8_t { harmful, benign };

inline const char* to_string(Label l) { return l == Label::harmful ? "harmful" : "benign"; }

inline Label label_from_string(const std::string& s) {
  if (s == "harmful") return Label::harmful;
  if (s == "benign") return Label::benign;
  throw std::invalid_argument("unknown label: " + s);
}

enum class Mode : std::uint8_t { audio_text, text_only, audio_only };

inline constexpr Mode kAllModes[] = {Mode::audio_text, Mode::text_only, Mode::audio_only};

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::audio_text: return "audio-text";
    case Mode::text_only: return "text-only";
    case Mode::audio_only: return "audio-only";
  }
  return "?";
}

inline Mode mode_from_string(const std::string& s) {
  if (s == "audio-text") return Mode::audio_text;
  if (s == "text-only") return Mode::text_only;
  if (s == "audio-only") return Mode::audio_only;
  throw std::invalid_argument("unknown modality mode: " + s);
}

}  // namespace rrs
