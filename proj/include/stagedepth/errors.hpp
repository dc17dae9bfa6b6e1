#pragma once

#include <stdexcept>
#include <string>

namespace stagedepth {

// Every library failure derives from Error so callers (the CLI in particular)
// can separate runtime failures from programming errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidSpec : public Error {
 public:
  explicit InvalidSpec(const std::string& what) : Error("invalid spec: " + what) {}
};

class InvalidConfig : public Error {
 public:
  explicit InvalidConfig(const std::string& what) : Error("invalid config: " + what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what) {}
};

class Infeasible : public Error {
 public:
  explicit Infeasible(const std::string& what) : Error("infeasible: " + what) {}
};

class Undefined : public Error {
 public:
  explicit Undefined(const std::string& what) : Error("undefined: " + what) {}
};

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what) : Error("checkpoint: " + what) {}
};

class NonFiniteLoss : public Error {
 public:
  explicit NonFiniteLoss(const std::string& what) : Error("non-finite loss: " + what) {}
};

}  // namespace stagedepth
