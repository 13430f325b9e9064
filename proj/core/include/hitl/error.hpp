#pragma once

#include <stdexcept>
#include <string>

namespace hitl {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad or inconsistent configuration (track files, run configs, model setup).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller passed a value outside an operation's domain.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// The simulator produced or received a non-finite state.
class SimulatorFault : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss/target during optimization. Carries batch diagnostics in what().
class TrainingFault : public Error {
 public:
  using Error::Error;
};

/// A transition violates the Transition invariants.
class RejectedTransition : public Error {
 public:
  using Error::Error;
};

/// Replay buffer holds fewer transitions than requested.
class NotReady : public Error {
 public:
  using Error::Error;
};

/// Internal invariant broken (bad tree index etc.).
class InternalFault : public Error {
 public:
  using Error::Error;
};

/// File-system failure; message includes the path.
class StorageError : public Error {
 public:
  using Error::Error;
};

/// A recorded trace no longer matches the run replaying it.
class ReplayDivergence : public Error {
 public:
  using Error::Error;
};

/// Demonstration data unfit for training (e.g. expert crashing too often).
class DatasetQualityError : public Error {
 public:
  using Error::Error;
};

}  // namespace hitl
