#include "shgvqa/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "shgvqa/errors.hpp"

namespace shgvqa {

namespace {

template <typename T>
void write_pod(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) {
        throw ValidationError("checkpoint: truncated while reading " + what);
    }
    return value;
}

}  // namespace

void save_checkpoint(const NamedParams& params, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw ValidationError("cannot write checkpoint '" + path + "'");
        }
        out.write(kCheckpointMagic, 4);
        write_pod(out, kCheckpointVersion);
        write_pod(out, static_cast<std::uint32_t>(params.size()));
        for (const auto& [name, tensor] : params) {
            write_pod(out, static_cast<std::uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            const Shape& shape = tensor.shape();
            write_pod(out, static_cast<std::uint32_t>(shape.size()));
            for (std::int64_t d : shape) {
                write_pod(out, static_cast<std::int64_t>(d));
            }
            const auto data = tensor.data();
            out.write(reinterpret_cast<const char*>(data.data()),
                      static_cast<std::streamsize>(data.size() * sizeof(double)));
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw ValidationError("cannot move temporary checkpoint onto '" + path + "'");
    }
}

void load_checkpoint(NamedParams& params, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValidationError("cannot open checkpoint '" + path + "'");
    }
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw ValidationError("checkpoint '" + path + "' has the wrong magic bytes");
    }
    const auto version = read_pod<std::uint8_t>(in, "version");
    if (version != kCheckpointVersion) {
        throw ValidationError("checkpoint '" + path + "' has unsupported format version " +
                              std::to_string(version));
    }
    const auto count = read_pod<std::uint32_t>(in, "tensor count");

    std::map<std::string, Tensor*> by_name;
    for (auto& [name, tensor] : params) {
        by_name.emplace(name, &tensor);
    }
    std::map<std::string, bool> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<std::uint32_t>(in, "name length");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) {
            throw ValidationError("checkpoint: truncated while reading a tensor name");
        }
        const auto rank = read_pod<std::uint32_t>(in, "rank");
        Shape shape(rank);
        std::int64_t total = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape[d] = read_pod<std::int64_t>(in, "dimension");
            total *= shape[d];
        }
        std::vector<double> data(static_cast<std::size_t>(total));
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!in) {
            throw ValidationError("checkpoint: truncated while reading tensor '" + name + "'");
        }
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw ValidationError("checkpoint contains unknown tensor '" + name + "'");
        }
        if (it->second->shape() != shape) {
            throw ValidationError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                                  ", model expects " + shape_str(it->second->shape()));
        }
        auto dst = it->second->raw_data();
        std::copy(data.begin(), data.end(), dst.begin());
        seen[name] = true;
    }
    for (const auto& [name, tensor] : params) {
        (void)tensor;
        if (!seen.count(name)) {
            throw ValidationError("checkpoint is missing tensor '" + name + "'");
        }
    }
}

}  // namespace shgvqa
