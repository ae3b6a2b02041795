#include "dtr/checkpoint.hpp"

#include <fstream>
#include <map>

#include "binary_io.hpp"
#include "dtr/errors.hpp"
#include "dtr/rng.hpp"

namespace dtr {

namespace {

constexpr char kMagic[4] = {'D', 'T', 'M', 'W'};

void put_header(detail::ByteWriter& w, CheckpointKind kind, const ModelConfig& c) {
    w.put_bytes(kMagic, 4);
    w.put(static_cast<std::uint16_t>(kind));
    for (std::uint32_t v : {c.n_layers, c.hidden, c.heads, c.ffn, c.vocab, c.max_positions, c.n_segments}) w.put(v);
    w.put(std::bit_cast<std::uint32_t>(c.dropout));
    w.put(std::bit_cast<std::uint32_t>(c.attention_dropout));
}

template <typename Model>
void put_blocks(detail::ByteWriter& w, const Model& model) {
    visit_parameters(model, [&](const std::string& name, const Tensor<float>& t, std::uint32_t) {
        w.put(static_cast<std::uint16_t>(name.size()));
        w.put_string(name);
        w.put(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t e : t.shape()) w.put(static_cast<std::uint32_t>(e));
        w.put_bytes(t.data(), t.size() * sizeof(float));
    });
}

CheckpointKind get_header(detail::ByteReader& r, ModelConfig& c) {
    const std::string magic = r.get_string(4);
    if (magic != std::string(kMagic, 4)) throw DataError("checkpoint: bad magic (not a model file)");
    const auto version = r.get<std::uint16_t>();
    if (version != 1 && version != 2) throw DataError("checkpoint: unsupported version " + std::to_string(version));
    c.n_layers = r.get<std::uint32_t>();
    c.hidden = r.get<std::uint32_t>();
    c.heads = r.get<std::uint32_t>();
    c.ffn = r.get<std::uint32_t>();
    c.vocab = r.get<std::uint32_t>();
    c.max_positions = r.get<std::uint32_t>();
    c.n_segments = r.get<std::uint32_t>();
    c.dropout = std::bit_cast<float>(r.get<std::uint32_t>());
    c.attention_dropout = std::bit_cast<float>(r.get<std::uint32_t>());
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw DataError(std::string("checkpoint: stored config invalid: ") + e.what());
    }
    return static_cast<CheckpointKind>(version);
}

std::map<std::string, Tensor<float>> get_blocks(detail::ByteReader& r) {
    std::map<std::string, Tensor<float>> blocks;
    while (!r.at_end()) {
        const auto len = r.get<std::uint16_t>();
        std::string name = r.get_string(len);
        const auto rank = r.get<std::uint8_t>();
        Shape shape(rank);
        for (auto& e : shape) e = r.get<std::uint32_t>();
        const std::size_t n = shape_size(shape);
        std::vector<float> values(n);
        std::memcpy(values.data(), r.take(n * sizeof(float)), n * sizeof(float));
        if (!blocks.emplace(name, Tensor<float>(std::move(shape), std::move(values))).second) {
            throw DataError("checkpoint: duplicate block " + name);
        }
    }
    return blocks;
}

template <typename Model>
void fill_parameters(Model& model, std::map<std::string, Tensor<float>>& blocks) {
    visit_parameters(model, [&](const std::string& name, Tensor<float>& t, std::uint32_t) {
        auto it = blocks.find(name);
        if (it == blocks.end()) throw DataError("checkpoint: missing block " + name);
        if (it->second.shape() != t.shape()) {
            throw DataError("checkpoint: block " + name + " has shape " + shape_string(it->second.shape()) +
                            ", expected " + shape_string(t.shape()));
        }
        t = std::move(it->second);
        blocks.erase(it);
    });
    if (!blocks.empty()) throw DataError("checkpoint: unexpected block " + blocks.begin()->first);
}

}  // namespace

std::vector<std::uint8_t> serialize(const StandardModel& model) {
    detail::ByteWriter w;
    put_header(w, CheckpointKind::standard, model.config);
    put_blocks(w, model);
    return std::move(w.bytes());
}

std::vector<std::uint8_t> serialize(const DecoupledModel& model) {
    detail::ByteWriter w;
    put_header(w, CheckpointKind::decoupled, model.config);
    w.put(static_cast<std::uint8_t>(model.split.input_layers));
    w.put(static_cast<std::uint8_t>(model.split.cross_layers));
    w.put(static_cast<std::uint32_t>(model.compression ? model.compression->dim() : 0));
    put_blocks(w, model);
    return std::move(w.bytes());
}

StandardModel deserialize_standard(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes, "checkpoint");
    ModelConfig config;
    if (get_header(r, config) != CheckpointKind::standard) {
        throw DataError("checkpoint: expected a standard model, found a decoupled one");
    }
    StandardModel model = init_standard(config, 0);
    auto blocks = get_blocks(r);
    fill_parameters(model, blocks);
    return model;
}

DecoupledModel deserialize_decoupled(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes, "checkpoint");
    ModelConfig config;
    if (get_header(r, config) != CheckpointKind::decoupled) {
        throw DataError("checkpoint: expected a decoupled model, found a standard one");
    }
    SplitSpec split{r.get<std::uint8_t>(), r.get<std::uint8_t>()};
    const auto c = r.get<std::uint32_t>();
    try {
        split.validate(config.n_layers);
    } catch (const ConfigError& e) {
        throw DataError(std::string("checkpoint: stored split invalid: ") + e.what());
    }
    if (c > config.hidden) throw DataError("checkpoint: bottleneck width exceeds hidden size");
    DecoupledModel model = split_model(init_standard(config, 0), split);
    if (c > 0) {
        const std::size_t d = config.hidden;
        model.compression = CompressionWeights<float>{Tensor<float>({d, c}), Tensor<float>({c}),
                                                      Tensor<float>({c, d}), Tensor<float>({d})};
    }
    auto blocks = get_blocks(r);
    fill_parameters(model, blocks);
    return model;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (out) out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            std::error_code ignored;
            std::filesystem::remove(tmp, ignored);
            throw DataError("cannot write " + path.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw DataError("cannot write " + path.string());
    }
}

void save_checkpoint(const std::filesystem::path& path, const StandardModel& model) {
    write_file_atomic(path, serialize(model));
}

void save_checkpoint(const std::filesystem::path& path, const DecoupledModel& model) {
    write_file_atomic(path, serialize(model));
}

CheckpointKind checkpoint_kind(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    detail::ByteReader r(bytes, "checkpoint " + path.string());
    ModelConfig config;
    return get_header(r, config);
}

StandardModel load_standard(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return deserialize_standard(bytes);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

DecoupledModel load_decoupled(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return deserialize_decoupled(bytes);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

namespace {
std::uint64_t hash_bytes(const std::vector<std::uint8_t>& bytes) {
    return fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}
}  // namespace

std::uint64_t model_hash(const StandardModel& model) { return hash_bytes(serialize(model)); }
std::uint64_t model_hash(const DecoupledModel& model) { return hash_bytes(serialize(model)); }

}  // namespace dtr
