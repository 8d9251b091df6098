#include "capscl/checkpoint.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <map>

namespace capscl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kFormat = "capscl-checkpoint-1";

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(path.string() + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw CheckpointError(path.string() + ": write failed");
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(path.string() + ": cannot open");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::uint8_t> encode_f32(std::span<const Scalar> values) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(values.size() * 4);
    for (Scalar v : values) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        for (int k = 0; k < 4; ++k) bytes.push_back(std::uint8_t(bits >> (8 * k)));
    }
    return bytes;
}

void decode_f32(const std::vector<std::uint8_t>& bytes, std::span<Scalar> out, const std::string& where) {
    if (bytes.size() != out.size() * 4) {
        throw CheckpointError(where + ": expected " + std::to_string(out.size() * 4) + " bytes, found " +
                              std::to_string(bytes.size()));
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits = 0;
        for (int k = 0; k < 4; ++k) bits |= std::uint32_t(bytes[4 * i + std::size_t(k)]) << (8 * k);
        out[i] = Scalar(std::bit_cast<float>(bits));
    }
}

std::string mask_file(std::size_t slot, std::size_t task, std::size_t layer) {
    return "masks/plugin" + std::to_string(slot) + ".task" + std::to_string(task) + ".layer" +
           std::to_string(layer) + ".bits";
}

}  // namespace

std::vector<std::uint8_t> pack_bits(const std::vector<std::uint8_t>& bits) {
    std::vector<std::uint8_t> bytes((bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < bits.size(); ++i) {
        if (bits[i] > 1) throw CheckpointError("pack_bits: mask value other than 0 or 1");
        bytes[i / 8] |= std::uint8_t(bits[i] << (i % 8));
    }
    return bytes;
}

std::vector<std::uint8_t> unpack_bits(const std::vector<std::uint8_t>& bytes, std::size_t count) {
    if (bytes.size() != (count + 7) / 8) throw CheckpointError("unpack_bits: byte count does not match mask width");
    std::vector<std::uint8_t> bits(count);
    for (std::size_t i = 0; i < count; ++i) bits[i] = (bytes[i / 8] >> (i % 8)) & 1U;
    return bits;
}

void save_checkpoint(const fs::path& dir, const ContinualModel& model, const CheckpointInfo& info) {
    fs::create_directories(dir / "tensors");
    fs::create_directories(dir / "masks");

    json tensors = json::array();
    for (const auto& [name, t] : model.named_parameters()) {
        const std::string file = "tensors/" + name + ".f32";
        write_bytes(dir / file, encode_f32(t.data()));
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"file", file}});
    }

    json tasks = json::array();
    for (std::size_t t = 0; t < model.num_tasks(); ++t) {
        tasks.push_back({{"index", t},
                         {"name", t < info.task_names.size() ? info.task_names[t] : ""},
                         {"suite_index", t < info.order.size() ? info.order[t] : t},
                         {"num_classes", model.head(t).num_classes},
                         {"finished", model.finished(t)}});
    }

    json masks = json::array();
    if (model.variant().masks) {
        for (std::size_t s = 0; s < model.plugins().size(); ++s) {
            const auto& tsm = model.plugins()[s].tsm();
            for (std::size_t t = 0; t < tsm.num_tasks(); ++t) {
                if (!tsm.finished(t)) continue;
                for (std::size_t l = 0; l < tsm::TaskSpecificModule::kLayers; ++l) {
                    const auto& m = tsm.stored_mask(t, l);
                    const std::string file = mask_file(s, t, l);
                    write_bytes(dir / file, pack_bits(m));
                    masks.push_back({{"slot", s}, {"task", t}, {"layer", l}, {"width", m.size()}, {"file", file}});
                }
            }
        }
    }

    json manifest = {{"format", kFormat},
                     {"config", config_to_json(info.config)},
                     {"seed", info.seed},
                     {"mode", to_string(info.config.trainer.mode)},
                     {"tasks", tasks},
                     {"tensors", tensors},
                     {"masks", masks}};
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw CheckpointError((dir / "manifest.json").string() + ": cannot open for writing");
    out << manifest.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw CheckpointError(manifest_path.string() + ": cannot open");
    json m;
    try {
        m = json::parse(in);
        if (m.value("format", "") != kFormat)
            throw CheckpointError(manifest_path.string() + ": unsupported format '" + m.value("format", "") + "'");

        CheckpointInfo info;
        info.config = config_from_json(m.at("config"));
        info.seed = m.at("seed").get<std::uint64_t>();
        const json& tasks = m.at("tasks");

        Rng rng(info.seed);
        ContinualModel model(info.config.model, PluginVariant::for_mode(info.config.trainer.mode), rng);
        std::vector<bool> finished;
        for (const auto& t : tasks) {
            model.add_task(t.at("num_classes").get<std::size_t>(), rng);
            finished.push_back(t.at("finished").get<bool>());
            info.task_names.push_back(t.at("name").get<std::string>());
            info.order.push_back(t.at("suite_index").get<std::size_t>());
        }

        std::map<std::string, const json*> entries;
        for (const auto& e : m.at("tensors")) entries[e.at("name").get<std::string>()] = &e;
        const NamedTensors named = model.named_parameters();
        if (entries.size() != named.size()) {
            throw CheckpointError(manifest_path.string() + ": holds " + std::to_string(entries.size()) +
                                  " tensors, model expects " + std::to_string(named.size()));
        }
        for (const auto& [name, t] : named) {
            auto it = entries.find(name);
            if (it == entries.end()) throw CheckpointError(manifest_path.string() + ": missing tensor '" + name + "'");
            if (it->second->at("shape").get<ad::Shape>() != t.shape())
                throw CheckpointError(manifest_path.string() + ": shape mismatch for '" + name + "'");
            Tensor target = t;
            const std::string file = it->second->at("file").get<std::string>();
            decode_f32(read_bytes(dir / file), target.data(), file);
        }

        const std::size_t slots = model.plugins().size();
        using Stored = std::vector<std::array<tsm::BinaryMask, tsm::TaskSpecificModule::kLayers>>;
        std::vector<Stored> stored(slots, Stored(tasks.size()));
        for (const auto& e : m.at("masks")) {
            const auto s = e.at("slot").get<std::size_t>(), t = e.at("task").get<std::size_t>(),
                       l = e.at("layer").get<std::size_t>(), w = e.at("width").get<std::size_t>();
            if (s >= slots || t >= tasks.size() || l >= tsm::TaskSpecificModule::kLayers)
                throw CheckpointError(manifest_path.string() + ": mask entry out of range");
            if (w != model.plugins()[s].tsm().layer_width(l))
                throw CheckpointError(manifest_path.string() + ": mask width mismatch");
            stored[s][t][l] = unpack_bits(read_bytes(dir / e.at("file").get<std::string>()), w);
        }
        for (std::size_t s = 0; s < slots; ++s) {
            if (model.variant().masks) {
                for (std::size_t t = 0; t < tasks.size(); ++t)
                    for (const auto& layer : stored[s][t])
                        if (finished[t] && layer.empty())
                            throw CheckpointError(manifest_path.string() + ": missing stored mask for task " +
                                                  std::to_string(t));
            }
            model.plugins()[s].tsm().restore_masks(std::move(stored[s]), finished);
        }
        model.restore_finished(finished);
        return {std::move(info), std::move(model)};
    } catch (const json::exception& e) {
        throw CheckpointError(manifest_path.string() + ": " + e.what());
    }
}

}  // namespace capscl
