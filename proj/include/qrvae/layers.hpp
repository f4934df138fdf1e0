#pragma once

// Neural-network layers recorded onto a Tape.
//
// Layout conventions: dense inputs are [batch, features]; image inputs are
// [batch, channels, height, width]. Convolution is cross-correlation (the
// kernel is not flipped). Output extents:
//   conv2d:   out = (in + 2*padding - kernel) / stride + 1   (floor)
//   deconv2d: out = (in - 1) * stride - 2*padding + kernel
// so a deconv with the same kernel/stride/padding inverts the conv geometry
// whenever the conv division is exact.

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "qrvae/autodiff.hpp"

namespace qrvae {

enum class Mode { Train, Eval };

/// Non-trainable state saved with a model (batchnorm running statistics).
struct Buffer {
    std::string name;
    Tensor* tensor;
};

class Layer {
public:
    virtual ~Layer() = default;

    virtual Var forward(const Var& x, Mode mode) = 0;
    virtual std::string kind() const = 0;
    /// Per-sample output shape (batch axis excluded); throws ShapeError on a bad input shape.
    virtual Shape output_shape(const Shape& input) const = 0;
    virtual std::vector<Parameter*> parameters() { return {}; }
    virtual std::vector<Buffer> buffers() { return {}; }
    /// Hyperparameters as "key=value" text for checkpoint manifests.
    virtual std::string describe() const { return kind(); }
};

using LayerPtr = std::unique_ptr<Layer>;

class Dense final : public Layer {
public:
    Dense(std::size_t in, std::size_t out, std::mt19937_64& rng);

    Var forward(const Var& x, Mode mode) override;
    std::string kind() const override { return "dense"; }
    Shape output_shape(const Shape& input) const override;
    std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
    std::string describe() const override;

    Parameter& weight() { return weight_; }  // [in, out]
    Parameter& bias() { return bias_; }      // [out]

private:
    std::size_t in_, out_;
    Parameter weight_;
    Parameter bias_;
};

struct ConvGeometry {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;
};

class Conv2d final : public Layer {
public:
    Conv2d(ConvGeometry g, std::mt19937_64& rng);

    Var forward(const Var& x, Mode mode) override;
    std::string kind() const override { return "conv2d"; }
    Shape output_shape(const Shape& input) const override;
    std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
    std::string describe() const override;

    Parameter& weight() { return weight_; }  // [out, in, k, k]
    Parameter& bias() { return bias_; }      // [out]

private:
    ConvGeometry g_;
    Parameter weight_;
    Parameter bias_;
};

class Deconv2d final : public Layer {
public:
    Deconv2d(ConvGeometry g, std::mt19937_64& rng);

    Var forward(const Var& x, Mode mode) override;
    std::string kind() const override { return "deconv2d"; }
    Shape output_shape(const Shape& input) const override;
    std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
    std::string describe() const override;

    Parameter& weight() { return weight_; }  // [in, out, k, k]
    Parameter& bias() { return bias_; }      // [out]

private:
    ConvGeometry g_;
    Parameter weight_;
    Parameter bias_;
};

/// Per-channel normalization (axis 1) over batch and spatial axes.
/// Train mode uses biased batch statistics and updates the running ones as
/// running = momentum * running + (1 - momentum) * batch.
class BatchNorm final : public Layer {
public:
    explicit BatchNorm(std::size_t channels, double eps = 1e-5, double momentum = 0.9);

    Var forward(const Var& x, Mode mode) override;
    std::string kind() const override { return "batchnorm"; }
    Shape output_shape(const Shape& input) const override;
    std::vector<Parameter*> parameters() override { return {&gamma_, &beta_}; }
    std::vector<Buffer> buffers() override { return {{"running_mean", &running_mean_}, {"running_var", &running_var_}}; }
    std::string describe() const override;

    Parameter& gamma() { return gamma_; }
    Parameter& beta() { return beta_; }
    const Tensor& running_mean() const { return running_mean_; }
    const Tensor& running_var() const { return running_var_; }

private:
    std::size_t channels_;
    double eps_, momentum_;
    Parameter gamma_;
    Parameter beta_;
    Tensor running_mean_;
    Tensor running_var_;
};

class Relu final : public Layer {
public:
    Var forward(const Var& x, Mode) override { return relu(x); }
    std::string kind() const override { return "relu"; }
    Shape output_shape(const Shape& input) const override { return input; }
};

class Sigmoid final : public Layer {
public:
    Var forward(const Var& x, Mode) override { return sigmoid(x); }
    std::string kind() const override { return "sigmoid"; }
    Shape output_shape(const Shape& input) const override { return input; }
};

/// Changes the per-sample shape, keeping the batch axis.
class Reshape final : public Layer {
public:
    explicit Reshape(Shape per_sample) : shape_(std::move(per_sample)) {}
    Var forward(const Var& x, Mode) override;
    std::string kind() const override { return "reshape"; }
    Shape output_shape(const Shape& input) const override;
    std::string describe() const override;

private:
    Shape shape_;
};

/// Ordered layer stack with optional named heads fanning out of the trunk output.
class Sequential {
public:
    Sequential() = default;
    explicit Sequential(Shape input_shape) : input_shape_(std::move(input_shape)) {}

    /// Appends a layer after checking it accepts the current output shape.
    Sequential& add(LayerPtr layer);
    template <class L, class... Args>
    L& emplace(Args&&... args) {
        auto p = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *p;
        add(std::move(p));
        return ref;
    }
    /// Attaches a head whose input is the trunk output; the head's input shape must match it.
    Sequential& add_head(std::string name, Sequential head);

    Var forward(const Var& x, Mode mode);
    /// Trunk once, then every head on its output (head order = insertion order).
    std::vector<Var> forward_heads(const Var& x, Mode mode);

    const Shape& input_shape() const { return input_shape_; }
    Shape output_shape() const;
    std::size_t size() const { return layers_.size(); }
    Layer& layer(std::size_t i) { return *layers_.at(i); }
    std::size_t head_count() const { return heads_.size(); }
    Sequential& head(std::size_t i) { return heads_.at(i).second; }
    const std::string& head_name(std::size_t i) const { return heads_.at(i).first; }

    /// Parameters with qualified names ("0.weight", "head.mu.0.bias", ...), trunk first.
    std::vector<std::pair<std::string, Parameter*>> named_parameters(const std::string& prefix = "");
    std::vector<std::pair<std::string, Tensor*>> named_buffers(const std::string& prefix = "");
    std::vector<std::string> describe(const std::string& prefix = "") const;

private:
    Shape input_shape_;
    std::vector<LayerPtr> layers_;
    std::vector<std::pair<std::string, Sequential>> heads_;
};

}  // namespace qrvae
