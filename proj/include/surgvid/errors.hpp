// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace surgvid {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// A required exact-divisibility constraint failed; `axis` names the offender.
class NonDivisibleError : public Error {
 public:
  NonDivisibleError(const std::string& axis, const std::string& msg)
      : Error("NonDivisible(" + axis + "): " + msg), axis_(axis) {}
  const std::string& axis() const { return axis_; }

 private:
  std::string axis_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error("shape mismatch: " + msg) {}
};

// An op produced NaN/Inf; surfaced immediately instead of propagating.
class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& msg) : Error("non-finite value: " + msg) {}
};

// Reconstruction was requested but the mask plan left nothing masked.
class NoTargetError : public Error {
 public:
  explicit NoTargetError(const std::string& msg) : Error("NoTarget: " + msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config: " + msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io: " + msg) {}
};

// A QA task kind the given annotation cannot answer.
class UnsupportedTaskError : public Error {
 public:
  explicit UnsupportedTaskError(const std::string& msg) : Error("unsupported task: " + msg) {}
};

// Training loss went non-finite; records where.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& stage, long step)
      : Error("divergence in stage '" + stage + "' at step " + std::to_string(step)),
        stage_(stage),
        step_(step) {}
  const std::string& stage() const { return stage_; }
  long step() const { return step_; }

 private:
  std::string stage_;
  long step_;
};

class MissingCheckpointError : public Error {
 public:
  explicit MissingCheckpointError(const std::string& stage)
      : Error("MissingCheckpoint: stage '" + stage + "' has no checkpoint on disk"), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

}  // namespace surgvid
