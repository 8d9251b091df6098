#include "capscl/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "capscl/backbone.hpp"
#include "capscl/rng.hpp"

namespace capscl::data {

using nlohmann::json;

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        case Split::test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "validation") return Split::validation;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + s + "'");
}

const std::vector<Example>& TaskDataset::split(Split s) const {
    switch (s) {
        case Split::train: return train;
        case Split::validation: return validation;
        case Split::test: return test;
    }
    return train;
}

std::string to_string(SuiteKind k) {
    switch (k) {
        case SuiteKind::similar: return "similar";
        case SuiteKind::dissimilar: return "dissimilar";
        case SuiteKind::mixed: return "mixed";
    }
    return "similar";
}

SuiteKind suite_kind_from_string(const std::string& s) {
    if (s == "similar") return SuiteKind::similar;
    if (s == "dissimilar") return SuiteKind::dissimilar;
    if (s == "mixed") return SuiteKind::mixed;
    throw std::invalid_argument("unknown suite kind '" + s + "' (expected similar, dissimilar or mixed)");
}

namespace {

struct TaskVocabulary {
    std::vector<std::int32_t> keywords[2];
    std::vector<std::int32_t> background;
    std::vector<std::int32_t> noise;
};

std::vector<std::int32_t> id_range(std::int32_t begin, std::size_t count) {
    std::vector<std::int32_t> ids(count);
    for (std::size_t i = 0; i < count; ++i) ids[i] = begin + std::int32_t(i);
    return ids;
}

void shuffle(std::vector<std::int32_t>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[std::size_t(rng.integer(0, std::int64_t(i) - 1))]);
}

/// Splits a region into two keyword classes and a background pool.
TaskVocabulary carve_region(std::vector<std::int32_t> region, std::size_t keywords, Rng& rng) {
    if (region.size() < 2 * keywords + 8) {
        throw std::invalid_argument("synthetic suite: vocabulary region of " + std::to_string(region.size()) +
                                    " tokens cannot hold 2x" + std::to_string(keywords) +
                                    " keywords plus background");
    }
    shuffle(region, rng);
    TaskVocabulary v;
    v.keywords[0].assign(region.begin(), region.begin() + std::ptrdiff_t(keywords));
    v.keywords[1].assign(region.begin() + std::ptrdiff_t(keywords), region.begin() + std::ptrdiff_t(2 * keywords));
    v.background.assign(region.begin() + std::ptrdiff_t(2 * keywords), region.end());
    std::sort(v.background.begin(), v.background.end());
    return v;
}

/// Shared keyword table, each task keeping a random three-quarter subset of
/// each class plus its own noise words.
std::vector<TaskVocabulary> similar_group(std::vector<std::int32_t> region, std::size_t tasks,
                                          std::size_t keywords, Rng& rng) {
    const std::size_t noise = region.size() / (4 * tasks);
    if (noise == 0) throw std::invalid_argument("synthetic suite: vocabulary too small for per-task noise words");
    std::vector<std::vector<std::int32_t>> noise_sets;
    for (std::size_t t = 0; t < tasks; ++t) {
        noise_sets.emplace_back(region.end() - std::ptrdiff_t(noise), region.end());
        region.resize(region.size() - noise);
    }
    const TaskVocabulary shared = carve_region(std::move(region), keywords, rng);
    const std::size_t keep = std::max<std::size_t>(1, (3 * keywords + 3) / 4);
    std::vector<TaskVocabulary> out;
    for (std::size_t t = 0; t < tasks; ++t) {
        TaskVocabulary v;
        for (int c = 0; c < 2; ++c) {
            auto kw = shared.keywords[c];
            shuffle(kw, rng);
            kw.resize(keep);
            v.keywords[c] = std::move(kw);
        }
        v.background = shared.background;
        v.noise = noise_sets[t];
        out.push_back(std::move(v));
    }
    return out;
}

Example make_example(const TaskVocabulary& vocab, int label, std::size_t max_tokens, Rng& rng) {
    const std::size_t lo = std::max<std::size_t>(2, max_tokens / 2);
    const std::size_t length = std::size_t(rng.integer(std::int64_t(std::min(lo, max_tokens)), std::int64_t(max_tokens)));
    const std::size_t content = length - 1;
    Example ex;
    ex.label = label;
    ex.tokens.reserve(length);
    ex.tokens.push_back(kClsId);
    for (std::size_t i = 0; i < content; ++i) {
        const bool use_noise = !vocab.noise.empty() && rng.bernoulli(0.3);
        const auto& pool = use_noise ? vocab.noise : vocab.background;
        ex.tokens.push_back(pool[std::size_t(rng.integer(0, std::int64_t(pool.size()) - 1))]);
    }
    std::size_t major = std::size_t(rng.integer(2, 4));
    std::size_t minor = std::size_t(rng.integer(0, std::int64_t(major) - 2));
    major = std::min(major, content);
    minor = std::min(minor, content - major);
    if (minor >= major) minor = major - 1;
    std::vector<std::size_t> positions(content);
    for (std::size_t i = 0; i < content; ++i) positions[i] = i + 1;
    for (std::size_t i = 0; i < major + minor; ++i) {
        std::swap(positions[i], positions[i + std::size_t(rng.integer(0, std::int64_t(content - i) - 1))]);
        const int cls = i < major ? label : 1 - label;
        const auto& kw = vocab.keywords[cls];
        ex.tokens[positions[i]] = kw[std::size_t(rng.integer(0, std::int64_t(kw.size()) - 1))];
    }
    return ex;
}

std::vector<Example> make_split(const TaskVocabulary& vocab, std::size_t count, std::size_t max_tokens,
                                std::set<std::vector<std::int32_t>>& seen, Rng& rng) {
    std::vector<Example> out;
    out.reserve(count);
    std::size_t attempts = 0;
    while (out.size() < count) {
        if (++attempts > 100 * (count + 10))
            throw std::invalid_argument("synthetic suite: cannot draw enough distinct examples");
        Example ex = make_example(vocab, int(out.size() % 2), max_tokens, rng);
        if (seen.insert(ex.tokens).second) out.push_back(std::move(ex));
    }
    for (std::size_t i = out.size(); i > 1; --i)
        std::swap(out[i - 1], out[std::size_t(rng.integer(0, std::int64_t(i) - 1))]);
    return out;
}

}  // namespace

std::vector<TaskDataset> gen_synthetic_suite(const SuiteSpec& spec) {
    if (spec.num_tasks == 0) throw std::invalid_argument("synthetic suite: need at least one task");
    if (spec.max_tokens < 2) throw std::invalid_argument("synthetic suite: max_tokens must be >= 2");
    if (spec.keywords_per_class == 0) throw std::invalid_argument("synthetic suite: need keywords");
    if (spec.vocab_size <= std::size_t(kFirstContentId))
        throw std::invalid_argument("synthetic suite: vocabulary holds only reserved ids");
    Rng rng(spec.seed);
    const std::size_t content = spec.vocab_size - std::size_t(kFirstContentId);
    const std::size_t n = spec.num_tasks;

    std::vector<TaskVocabulary> vocabs;
    auto dissimilar_regions = [&](std::size_t first_id_offset, std::size_t count, std::size_t size) {
        for (std::size_t t = 0; t < count; ++t) {
            auto region = id_range(kFirstContentId + std::int32_t(first_id_offset + t * size), size);
            vocabs.push_back(carve_region(std::move(region), spec.keywords_per_class, rng));
        }
    };
    switch (spec.kind) {
        case SuiteKind::similar:
            vocabs = similar_group(id_range(kFirstContentId, content), n, spec.keywords_per_class, rng);
            break;
        case SuiteKind::dissimilar:
            dissimilar_regions(0, n, content / n);
            break;
        case SuiteKind::mixed: {
            const std::size_t n_similar = (n + 1) / 2, n_dissimilar = n - n_similar;
            const std::size_t region = content / n;
            const std::size_t shared = content - n_dissimilar * region;
            vocabs = similar_group(id_range(kFirstContentId, shared), n_similar, spec.keywords_per_class, rng);
            dissimilar_regions(shared, n_dissimilar, region);
            break;
        }
    }

    std::vector<TaskDataset> tasks;
    for (std::size_t t = 0; t < n; ++t) {
        Rng task_rng = rng.split();
        TaskDataset d;
        d.task_id = t;
        d.name = to_string(spec.kind) + "_" + std::to_string(t);
        d.num_classes = 2;
        std::set<std::vector<std::int32_t>> seen;
        d.train = make_split(vocabs[t], spec.train_per_task, spec.max_tokens, seen, task_rng);
        d.validation = make_split(vocabs[t], spec.validation_per_task, spec.max_tokens, seen, task_rng);
        d.test = make_split(vocabs[t], spec.test_per_task, spec.max_tokens, seen, task_rng);
        tasks.push_back(std::move(d));
    }
    return tasks;
}

DatasetError::DatasetError(const std::string& message, std::size_t line)
    : std::runtime_error(line ? "line " + std::to_string(line) + ": " + message : message), line_(line) {}

void write_dataset(const TaskDataset& dataset, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DatasetError("cannot open " + path.string() + " for writing");
    for (Split s : {Split::train, Split::validation, Split::test}) {
        for (const auto& ex : dataset.split(s)) {
            json j;
            j["tokens"] = ex.tokens;
            j["label"] = ex.label;
            j["split"] = to_string(s);
            out << j.dump() << '\n';
        }
    }
    if (!out) throw DatasetError("write failed for " + path.string());
}

TaskDataset load_dataset(const std::filesystem::path& path, const DatasetLimits& limits) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError("cannot open dataset " + path.string());
    TaskDataset d;
    d.name = path.stem().string();
    std::string line;
    std::size_t line_no = 0;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DatasetError(std::string("malformed JSON: ") + e.what(), line_no);
        }
        if (!j.is_object()) throw DatasetError("expected a JSON object", line_no);
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() != "tokens" && it.key() != "label" && it.key() != "split")
                throw DatasetError("unknown field '" + it.key() + "'", line_no);
        }
        if (!j.contains("tokens") || !j["tokens"].is_array())
            throw DatasetError("missing array field 'tokens'", line_no);
        if (!j.contains("label") || !j["label"].is_number_integer())
            throw DatasetError("missing integer field 'label'", line_no);
        Example ex;
        for (const auto& tok : j["tokens"]) {
            if (!tok.is_number_integer() || tok.get<std::int64_t>() < 0)
                throw DatasetError("tokens must be non-negative integers", line_no);
            const auto id = tok.get<std::int64_t>();
            if (limits.vocab_size && std::uint64_t(id) >= limits.vocab_size)
                throw DatasetError("token id " + std::to_string(id) + " outside vocabulary of " +
                                       std::to_string(limits.vocab_size), line_no);
            ex.tokens.push_back(std::int32_t(id));
        }
        if (ex.tokens.empty()) throw DatasetError("empty token sequence", line_no);
        if (limits.max_tokens && ex.tokens.size() > limits.max_tokens)
            throw DatasetError("sequence longer than max_tokens " + std::to_string(limits.max_tokens), line_no);
        const auto label = j["label"].get<std::int64_t>();
        if (label < 0) throw DatasetError("label must be non-negative", line_no);
        if (limits.num_classes && std::uint64_t(label) >= limits.num_classes)
            throw DatasetError("label " + std::to_string(label) + " outside [0, " +
                                   std::to_string(limits.num_classes) + ")", line_no);
        ex.label = int(label);
        max_label = std::max(max_label, ex.label);
        Split split = Split::train;
        if (j.contains("split")) {
            if (!j["split"].is_string()) throw DatasetError("field 'split' must be a string", line_no);
            try {
                split = split_from_string(j["split"].get<std::string>());
            } catch (const std::invalid_argument& e) {
                throw DatasetError(e.what(), line_no);
            }
        }
        switch (split) {
            case Split::train: d.train.push_back(std::move(ex)); break;
            case Split::validation: d.validation.push_back(std::move(ex)); break;
            case Split::test: d.test.push_back(std::move(ex)); break;
        }
    }
    if (line_no == 0 || max_label < 0) throw DatasetError("dataset " + path.string() + " is empty");
    d.num_classes = limits.num_classes ? limits.num_classes : std::size_t(std::max(2, max_label + 1));
    return d;
}

SuiteManifest write_suite(const std::vector<TaskDataset>& tasks, const SuiteSpec& spec,
                          const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    SuiteManifest m;
    m.spec = spec;
    json j;
    j["kind"] = to_string(spec.kind);
    j["seed"] = spec.seed;
    j["vocab_size"] = spec.vocab_size;
    j["max_tokens"] = spec.max_tokens;
    j["num_tasks"] = tasks.size();
    j["train_per_task"] = spec.train_per_task;
    j["validation_per_task"] = spec.validation_per_task;
    j["test_per_task"] = spec.test_per_task;
    j["keywords_per_class"] = spec.keywords_per_class;
    j["tasks"] = json::array();
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const std::string file = "task_" + std::to_string(t) + ".jsonl";
        write_dataset(tasks[t], dir / file);
        m.tasks.push_back({file, tasks[t].name, tasks[t].num_classes});
        j["tasks"].push_back({{"file", file}, {"name", tasks[t].name}, {"num_classes", tasks[t].num_classes}});
    }
    std::ofstream out(dir / "suite.json", std::ios::binary);
    out << j.dump(2) << '\n';
    if (!out) throw DatasetError("cannot write suite manifest in " + dir.string());
    return m;
}

std::vector<TaskDataset> load_suite(const std::filesystem::path& path, SuiteManifest* manifest) {
    const auto file = std::filesystem::is_directory(path) ? path / "suite.json" : path;
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DatasetError("cannot open suite manifest " + file.string());
    json j;
    try {
        j = json::parse(in);
        SuiteManifest m;
        m.spec.kind = suite_kind_from_string(j.at("kind").get<std::string>());
        m.spec.seed = j.at("seed").get<std::uint64_t>();
        m.spec.vocab_size = j.at("vocab_size").get<std::size_t>();
        m.spec.max_tokens = j.at("max_tokens").get<std::size_t>();
        m.spec.num_tasks = j.at("tasks").size();
        m.spec.train_per_task = j.value("train_per_task", std::size_t(0));
        m.spec.validation_per_task = j.value("validation_per_task", std::size_t(0));
        m.spec.test_per_task = j.value("test_per_task", std::size_t(0));
        m.spec.keywords_per_class = j.value("keywords_per_class", std::size_t(0));
        std::vector<TaskDataset> tasks;
        const auto dir = file.parent_path();
        for (const auto& t : j.at("tasks")) {
            SuiteManifest::Entry e{t.at("file").get<std::string>(), t.at("name").get<std::string>(),
                                   t.at("num_classes").get<std::size_t>()};
            TaskDataset d = load_dataset(dir / e.file, {m.spec.vocab_size, e.num_classes, m.spec.max_tokens});
            d.task_id = tasks.size();
            d.name = e.name;
            tasks.push_back(std::move(d));
            m.tasks.push_back(std::move(e));
        }
        if (manifest) *manifest = std::move(m);
        return tasks;
    } catch (const json::exception& e) {
        throw DatasetError("invalid suite manifest " + file.string() + ": " + e.what());
    }
}

}  // namespace capscl::data
