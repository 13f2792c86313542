#include "knnattn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "knnattn/config_json.hpp"

namespace knnattn::vit {

namespace {

constexpr char kMagic[8] = {'K', 'N', 'N', 'V', 'I', 'T', '0', '1'};

void put_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void put_doubles_le(std::ostream& os, const double* data, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
        put_u64_le(os, std::bit_cast<std::uint64_t>(data[i]));
    }
}

void get_doubles_le(std::istream& is, double* data, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
        data[i] = std::bit_cast<double>(get_u64_le(is));
    }
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const AdamState* adam,
                     std::size_t epochs_done) {
    nlohmann::json header;
    header["format_version"] = 1;
    header["model"] = model.config();
    header["epochs_done"] = epochs_done;
    header["adam"] = {{"present", adam != nullptr},
                      {"step", adam != nullptr ? adam->step : 0}};

    nlohmann::json manifest = nlohmann::json::array();
    std::size_t offset = 0;
    std::vector<const Matrix*> order;
    auto record = [&](const std::string& name, const Matrix& m) {
        manifest.push_back({{"name", name},
                            {"rows", m.rows()},
                            {"cols", m.cols()},
                            {"offset", offset}});
        order.push_back(&m);
        offset += m.size();
    };
    model.params().for_each(
        [&](const std::string& name, const Matrix& m) { record("model/" + name, m); });
    if (adam != nullptr) {
        adam->m.for_each(
            [&](const std::string& name, const Matrix& m) { record("adam_m/" + name, m); });
        adam->v.for_each(
            [&](const std::string& name, const Matrix& m) { record("adam_v/" + name, m); });
    }
    header["tensors"] = std::move(manifest);

    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);
    const std::string header_str = header.dump();
    os.write(kMagic, sizeof(kMagic));
    put_u64_le(os, header_str.size());
    os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const Matrix* m : order) put_doubles_le(os, m->data(), m->size());
    if (!os) throw CheckpointError("short write: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw CheckpointError("bad checkpoint magic: " + path);
    }
    const std::uint64_t header_len = get_u64_le(is);
    std::string header_str(header_len, '\0');
    is.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!is) throw CheckpointError("truncated checkpoint header: " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("unparseable checkpoint header: ") + e.what());
    }
    if (header.at("format_version").get<int>() != 1) {
        throw CheckpointError("unsupported checkpoint format version");
    }
    const ModelConfig cfg = header.at("model").get<ModelConfig>();

    LoadedCheckpoint loaded{Model(cfg), AdamState::shaped(cfg), false,
                            header.at("epochs_done").get<std::size_t>()};
    loaded.has_adam = header.at("adam").at("present").get<bool>();
    loaded.adam.step = header.at("adam").at("step").get<std::size_t>();

    // Index the expected tensors, then read the raw block in manifest order.
    std::vector<std::pair<std::string, Matrix*>> expected;
    loaded.model.params().for_each([&](const std::string& name, Matrix& m) {
        expected.emplace_back("model/" + name, &m);
    });
    if (loaded.has_adam) {
        loaded.adam.m.for_each([&](const std::string& name, Matrix& m) {
            expected.emplace_back("adam_m/" + name, &m);
        });
        loaded.adam.v.for_each([&](const std::string& name, Matrix& m) {
            expected.emplace_back("adam_v/" + name, &m);
        });
    }
    const auto& manifest = header.at("tensors");
    if (manifest.size() != expected.size()) {
        throw CheckpointError("tensor manifest size " + std::to_string(manifest.size()) +
                              " does not match the model (" + std::to_string(expected.size()) +
                              ")");
    }
    std::size_t offset = 0;
    for (std::size_t t = 0; t < expected.size(); ++t) {
        const auto& entry = manifest[t];
        Matrix* m = expected[t].second;
        if (entry.at("name").get<std::string>() != expected[t].first ||
            entry.at("rows").get<std::size_t>() != m->rows() ||
            entry.at("cols").get<std::size_t>() != m->cols() ||
            entry.at("offset").get<std::size_t>() != offset) {
            throw CheckpointError("tensor manifest mismatch at '" + expected[t].first + "'");
        }
        get_doubles_le(is, m->data(), m->size());
        offset += m->size();
    }
    if (!is) throw CheckpointError("truncated checkpoint data: " + path);
    return loaded;
}

}  // namespace knnattn::vit
