#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace vampvae {

/// Tensor shapes or vector lengths that do not conform.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller violated a precondition (bad count, non-scalar root, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// An input value lies outside the support of a distribution or transform.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Malformed file contents. Carries the byte offset at which parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace vampvae
