#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace capscl::data {

struct Example {
    std::vector<std::int32_t> tokens;  ///< starts with the CLS id
    int label = 0;

    bool operator==(const Example&) const = default;
};

enum class Split { train, validation, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct TaskDataset {
    std::size_t task_id = 0;
    std::string name;
    std::size_t num_classes = 2;
    std::vector<Example> train;
    std::vector<Example> validation;
    std::vector<Example> test;

    const std::vector<Example>& split(Split s) const;
    bool operator==(const TaskDataset&) const = default;
};

enum class SuiteKind { similar, dissimilar, mixed };

std::string to_string(SuiteKind k);
SuiteKind suite_kind_from_string(const std::string& s);

struct SuiteSpec {
    SuiteKind kind = SuiteKind::similar;
    std::size_t num_tasks = 5;
    std::size_t train_per_task = 200;
    std::size_t validation_per_task = 50;
    std::size_t test_per_task = 200;
    std::size_t vocab_size = 512;
    std::size_t max_tokens = 32;
    std::size_t keywords_per_class = 6;
    std::uint64_t seed = 1;
};

/// Keyword-planting generator.
///
/// Every example is CLS followed by background tokens with a handful of
/// planted class keywords; the label is the class with the most keywords.
/// similar: all tasks draw keywords from one shared keyword->label table and
/// background pool, plus task-private noise words. dissimilar: each task owns
/// a disjoint vocabulary region with its own keywords. mixed: the first half
/// of the tasks are similar, the rest dissimilar.
std::vector<TaskDataset> gen_synthetic_suite(const SuiteSpec& spec);

/// Raised for unreadable or invalid dataset files; `line` is 1-based, 0 if n/a.
class DatasetError : public std::runtime_error {
public:
    DatasetError(const std::string& message, std::size_t line = 0);
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

struct DatasetLimits {
    std::size_t vocab_size = 0;   ///< 0: unchecked
    std::size_t num_classes = 0;  ///< 0: inferred as max label + 1
    std::size_t max_tokens = 0;   ///< 0: unchecked
};

/// One JSON object per line: {"tokens": [...], "label": n, "split": "train"}.
/// A missing "split" field means train.
void write_dataset(const TaskDataset& dataset, const std::filesystem::path& path);
TaskDataset load_dataset(const std::filesystem::path& path, const DatasetLimits& limits = {});

struct SuiteManifest {
    SuiteSpec spec;
    struct Entry {
        std::string file;
        std::string name;
        std::size_t num_classes = 2;
    };
    std::vector<Entry> tasks;
};

/// Writes task_<k>.jsonl files and suite.json into `dir`.
SuiteManifest write_suite(const std::vector<TaskDataset>& tasks, const SuiteSpec& spec,
                          const std::filesystem::path& dir);
/// Accepts the suite directory or the path of its suite.json.
std::vector<TaskDataset> load_suite(const std::filesystem::path& path, SuiteManifest* manifest = nullptr);

}  // namespace capscl::data
