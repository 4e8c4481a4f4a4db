#include "hitrans/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hitrans {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'H', 'I', 'T', 'R', 'A', 'N', 'S', '1'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 1099511628211ull;
    }
    return h;
}

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
  public:
    Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string take(std::size_t n, const char* what) {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void read_into(char* dst, std::size_t n, const char* what) {
        need(n, what);
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }
    bool done() const { return pos_ == end_; }

  private:
    void need(std::size_t n, const char* what) const {
        if (n > end_ - pos_) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    }
    const std::string& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const CheckpointData& data) {
    std::string out(kMagic, sizeof(kMagic));
    const std::string header = data.header.dump();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
    out += header;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(data.tensors.size()));
    for (const auto& [name, t] : data.tensors) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (Index d : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
        out.append(reinterpret_cast<const char*>(t.data()), sizeof(float) * static_cast<std::size_t>(t.size()));
    }
    put<std::uint64_t>(out, fnv1a(out.data(), out.size()));
    return out;
}

CheckpointData decode_checkpoint(const std::string& bytes) {
    if (bytes.size() < sizeof(kMagic) + sizeof(std::uint64_t)) throw CheckpointError("checkpoint truncated");
    if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw CheckpointError("not a checkpoint (bad magic)");
    const std::size_t body = bytes.size() - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body, sizeof(stored));
    if (stored != fnv1a(bytes.data(), body)) throw CheckpointError("checkpoint checksum mismatch (truncated or corrupt)");

    Reader r(bytes, body);
    r.take(sizeof(kMagic), "magic");
    CheckpointData data;
    const auto header_len = r.get<std::uint32_t>("header length");
    try {
        data.header = nlohmann::json::parse(r.take(header_len, "header"));
    } catch (const nlohmann::json::parse_error& e) {
        throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    const auto count = r.get<std::uint32_t>("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.take(r.get<std::uint32_t>("name length"), "tensor name");
        const auto rank = r.get<std::uint32_t>("rank");
        if (rank > 8) throw CheckpointError("tensor " + name + " has implausible rank " + std::to_string(rank));
        std::vector<Index> shape(rank);
        std::uint64_t numel = 1;
        for (auto& d : shape) {
            const auto v = r.get<std::uint64_t>("dims");
            if (v > (std::uint64_t(1) << 40)) throw CheckpointError("tensor " + name + " has implausible size");
            d = static_cast<Index>(v);
            numel *= v;
        }
        if (numel > body / sizeof(float)) throw CheckpointError("checkpoint truncated in tensor " + name);
        Tensor<float> t(shape);
        r.read_into(reinterpret_cast<char*>(t.data()), sizeof(float) * numel, "tensor data");
        if (!data.tensors.emplace(std::move(name), std::move(t)).second) {
            throw CheckpointError("duplicate tensor in checkpoint");
        }
    }
    if (!r.done()) throw CheckpointError("trailing bytes before checkpoint checksum");
    return data;
}

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointData& data) {
    const std::string bytes = encode_checkpoint(data);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out.flush()) throw CheckpointError("failed writing " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw CheckpointError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

CheckpointData read_checkpoint_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return decode_checkpoint(ss.str());
}

template <typename Scalar>
CheckpointData model_checkpoint(const Model<Scalar>& model) {
    CheckpointData data;
    data.header["model_config"] = model.config();
    data.header["variant"] = std::string(variant_name(model.variant()));
    for (const auto& p : model.parameters()) data.tensors.emplace(p.name, p.value.template cast<float>());
    return data;
}

namespace {

template <typename Scalar>
void copy_parameters(ParameterStore<Scalar>& params, const CheckpointData& data, bool backbone_only) {
    std::vector<std::string> problems;
    for (const auto& p : params) {
        if (backbone_only && p.component != Component::backbone) continue;
        auto it = data.tensors.find(p.name);
        if (it == data.tensors.end()) {
            problems.push_back(p.name + " (missing)");
        } else if (it->second.shape() != p.value.shape()) {
            problems.push_back(p.name + " (shape " + shape_to_string(it->second.shape()) + ", expected " +
                               shape_to_string(p.value.shape()) + ")");
        }
    }
    if (!problems.empty()) {
        std::string msg = "checkpoint does not match model:";
        for (const auto& s : problems) msg += " " + s + ";";
        msg.pop_back();
        throw CheckpointError(msg);
    }
    for (auto& p : params) {
        if (backbone_only && p.component != Component::backbone) continue;
        p.value = data.tensors.at(p.name).template cast<Scalar>();
    }
}

}  // namespace

template <typename Scalar>
Model<Scalar> model_from_checkpoint(const CheckpointData& data) {
    if (!data.header.contains("model_config") || !data.header.contains("variant")) {
        throw CheckpointError("checkpoint header lacks model_config or variant");
    }
    ModelConfig config;
    VariantKind kind;
    try {
        config = data.header.at("model_config").get<ModelConfig>();
        kind = parse_variant(data.header.at("variant").get<std::string>());
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
    }
    auto model = Model<Scalar>::build(config, 0, kind);
    copy_parameters(model.parameters(), data, false);
    return model;
}

template <typename Scalar>
void save_model(const Model<Scalar>& model, const std::filesystem::path& path) {
    write_checkpoint_file(path, model_checkpoint(model));
}

template <typename Scalar>
Model<Scalar> load_model(const std::filesystem::path& path) {
    return model_from_checkpoint<Scalar>(read_checkpoint_file(path));
}

template <typename Scalar>
void load_backbone_weights(Model<Scalar>& model, const std::filesystem::path& path) {
    copy_parameters(model.parameters(), read_checkpoint_file(path), true);
}

#define HITRANS_INSTANTIATE(S)                                                           \
    template CheckpointData model_checkpoint<S>(const Model<S>&);                        \
    template Model<S> model_from_checkpoint<S>(const CheckpointData&);                   \
    template void save_model<S>(const Model<S>&, const std::filesystem::path&);          \
    template Model<S> load_model<S>(const std::filesystem::path&);                       \
    template void load_backbone_weights<S>(Model<S>&, const std::filesystem::path&);

HITRANS_INSTANTIATE(float)
HITRANS_INSTANTIATE(double)

}  // namespace hitrans
