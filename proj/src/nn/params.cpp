#include "image2pci/nn/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace i2p::nn {
inline namespace I2P_NN_ABI {

Tensor ParamStore::add_parameter(const std::string& name, Shape shape) {
    if (find(name).defined()) throw std::invalid_argument("duplicate parameter name " + name);
    Tensor t = Tensor::zeros(std::move(shape), true);
    params_.push_back({name, t});
    return t;
}

Tensor ParamStore::add_buffer(const std::string& name, Shape shape, Real fill) {
    if (find(name).defined()) throw std::invalid_argument("duplicate buffer name " + name);
    Tensor t = Tensor::full(std::move(shape), fill, false);
    buffers_.push_back({name, t});
    return t;
}

std::vector<Tensor> ParamStore::parameters() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.tensor);
    return out;
}

std::vector<NamedTensor> ParamStore::named_parameters() const { return params_; }

std::vector<NamedTensor> ParamStore::state() const {
    std::vector<NamedTensor> out = params_;
    out.insert(out.end(), buffers_.begin(), buffers_.end());
    return out;
}

void ParamStore::load_state(const std::vector<NamedTensor>& entries) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e.tensor;
    for (const auto& own : state()) {
        auto it = by_name.find(own.name);
        if (it == by_name.end()) throw std::runtime_error("checkpoint lacks tensor " + own.name);
        if (it->second->shape() != own.tensor.shape()) {
            throw ShapeError("checkpoint tensor " + own.name + " has shape " + shape_str(it->second->shape()) +
                             ", model expects " + shape_str(own.tensor.shape()));
        }
        Tensor dst = own.tensor;
        std::copy(it->second->data().begin(), it->second->data().end(), dst.data().begin());
    }
    if (by_name.size() != state().size()) throw std::runtime_error("checkpoint holds tensors the model does not know");
}

std::size_t ParamStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

Tensor ParamStore::find(const std::string& name) const {
    for (const auto* list : {&params_, &buffers_}) {
        for (const auto& e : *list) {
            if (e.name == name) return e.tensor;
        }
    }
    return Tensor();
}

namespace {

template <typename T>
void put_le(std::string& out, T value) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    template <typename T>
    T get_le() {
        need(sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }
    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint truncated");
    }
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
    std::string out = "I2PC";
    put_le<std::uint16_t>(out, kCheckpointVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xFFFF) throw std::invalid_argument("tensor name too long");
        put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
        for (int d : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (Real f : t.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(f)));
    }
    return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    if (r.get_bytes(4) != "I2PC") throw std::runtime_error("not a checkpoint (bad magic)");
    const auto version = r.get_le<std::uint16_t>();
    if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    const auto count = r.get_le<std::uint32_t>();
    std::vector<NamedTensor> out;
    for (std::uint32_t k = 0; k < count; ++k) {
        const auto len = r.get_le<std::uint16_t>();
        std::string name = r.get_bytes(len);
        const auto rank = r.get_le<std::uint8_t>();
        Shape shape;
        for (std::uint8_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(r.get_le<std::uint32_t>()));
        std::vector<Real> values(numel(shape));
        for (Real& f : values) f = static_cast<Real>(std::bit_cast<float>(r.get_le<std::uint32_t>()));
        out.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
    }
    if (!r.done()) throw std::runtime_error("checkpoint has trailing bytes");
    return out;
}

void save_checkpoint(const std::filesystem::path& file, const std::vector<NamedTensor>& tensors) {
    const std::string bytes = encode_checkpoint(tensors);
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + file.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return decode_checkpoint(ss.str());
}

} // namespace I2P_NN_ABI
} // namespace i2p::nn
