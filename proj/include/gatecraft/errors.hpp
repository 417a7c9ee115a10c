#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gatecraft {

/// Invalid configuration or descriptor document; `field` is a dotted JSON path.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& message)
        : std::runtime_error(field.empty() ? message : field + ": " + message),
          field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// A forward pass produced NaN/Inf; `layer` indexes the block where it appeared.
class NonFiniteError : public std::runtime_error {
public:
    NonFiniteError(std::string block, std::size_t layer)
        : std::runtime_error("non-finite activation in " + block + " " + std::to_string(layer)),
          block_(std::move(block)),
          layer_(layer) {}

    const std::string& block() const noexcept { return block_; }
    std::size_t layer() const noexcept { return layer_; }

private:
    std::string block_;
    std::size_t layer_;
};

/// Non-finite gradient detected before an optimizer update; the step is skipped.
class NonFiniteGradientError : public std::runtime_error {
public:
    explicit NonFiniteGradientError(const std::string& what) : std::runtime_error(what) {}
};

class CheckpointError : public std::runtime_error {
public:
    explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

/// Mask does not fit the model it is applied to; `tensor` names the offending weight.
class MaskError : public std::runtime_error {
public:
    MaskError(std::string tensor, const std::string& message)
        : std::runtime_error(tensor + ": " + message), tensor_(std::move(tensor)) {}

    const std::string& tensor() const noexcept { return tensor_; }

private:
    std::string tensor_;
};

}  // namespace gatecraft
