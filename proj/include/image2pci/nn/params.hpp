#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "image2pci/nn/tensor.hpp"

namespace i2p::nn {
inline namespace I2P_NN_ABI {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// Ordered store of trainable parameters and non-trainable buffers (batchnorm
// running statistics). Insertion order is the checkpoint order.
class ParamStore {
public:
    Tensor add_parameter(const std::string& name, Shape shape);
    Tensor add_buffer(const std::string& name, Shape shape, Real fill);

    std::vector<Tensor> parameters() const;
    std::vector<NamedTensor> named_parameters() const;
    // Parameters followed by buffers, each in insertion order.
    std::vector<NamedTensor> state() const;
    // Copies values by name; every entry must exist with an identical shape.
    void load_state(const std::vector<NamedTensor>& entries);

    std::size_t parameter_count() const;
    Tensor find(const std::string& name) const;

private:
    std::vector<NamedTensor> params_;
    std::vector<NamedTensor> buffers_;
};

// Binary layout: "I2PC", version u16, count u32, then per tensor name length u16,
// UTF-8 name, rank u8, dims u32[rank], float32 payload. All little-endian.
inline constexpr std::uint16_t kCheckpointVersion = 1;

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& file, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& file);

} // namespace I2P_NN_ABI
} // namespace i2p::nn
