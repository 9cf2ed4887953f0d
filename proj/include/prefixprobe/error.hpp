#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

namespace prefixprobe {

// Base for every operational failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class InvariantError : public Error {
 public:
  using Error::Error;
};

class BackendError : public Error {
 public:
  using Error::Error;
};

class TransportError : public BackendError {
 public:
  using BackendError::BackendError;
};

class InvalidTokenError : public BackendError {
 public:
  using BackendError::BackendError;
};

// Positional outcome of one element in a batched call: either a value or the
// message of the error that element raised.
template <typename T>
class Outcome {
 public:
  static Outcome success(T value) {
    Outcome o;
    o.value_ = std::move(value);
    return o;
  }
  static Outcome failure(std::string message) {
    Outcome o;
    o.error_ = std::move(message);
    return o;
  }

  bool ok() const { return value_.has_value(); }
  explicit operator bool() const { return ok(); }

  const T& value() const {
    if (!value_) throw Error("outcome holds an error: " + error_);
    return *value_;
  }
  T& value() {
    if (!value_) throw Error("outcome holds an error: " + error_);
    return *value_;
  }
  const T& operator*() const { return value(); }
  const T* operator->() const { return &value(); }

  const std::string& error() const { return error_; }

 private:
  std::optional<T> value_;
  std::string error_;
};

}  // namespace prefixprobe
