#pragma once

#include <stdexcept>
#include <string>

namespace digitsum {

// Base of every error the library throws.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed file contents (bad magic, truncated data).
class format_error : public error {
 public:
  using error::error;
};

// Two inputs that must agree do not (lengths, ids, hashes).
class consistency_error : public error {
 public:
  using error::error;
};

class argument_error : public error {
 public:
  using error::error;
};

class shape_error : public error {
 public:
  using error::error;
};

class insufficient_data_error : public error {
 public:
  using error::error;
};

class query_error : public error {
 public:
  using error::error;
};

class precondition_error : public error {
 public:
  using error::error;
};

// Training produced a non-finite loss.
class divergence_error : public error {
 public:
  divergence_error(const std::string& what, int epoch)
      : error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}

  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace digitsum
