#include "capscl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <stdexcept>

#include "capscl/tsm.hpp"

namespace capscl {

void TrainerConfig::validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("trainer: lr must be > 0");
    if (batch_size == 0) throw std::invalid_argument("trainer: batch_size must be >= 1");
    if (epochs == 0) throw std::invalid_argument("trainer: epochs must be >= 1");
    if (patience == 0) throw std::invalid_argument("trainer: patience must be >= 1");
    if (seeds.empty()) throw std::invalid_argument("trainer: need at least one seed");
}

TokenBatch make_batch(const std::vector<data::Example>& examples, std::span<const std::size_t> order,
                      std::size_t max_tokens) {
    std::vector<const std::vector<std::int32_t>*> seqs;
    seqs.reserve(order.size());
    for (auto i : order) seqs.push_back(&examples.at(i).tokens);
    return TokenBatch::pack(seqs, max_tokens);
}

EvalResult evaluate(const ContinualModel& model, std::size_t task, const std::vector<data::Example>& examples,
                    std::size_t batch_size) {
    if (task >= model.num_tasks()) throw std::out_of_range("evaluate: unknown task " + std::to_string(task));
    if (examples.empty()) throw std::invalid_argument("evaluate: no examples");
    const std::size_t classes = model.head(task).num_classes;
    const ForwardContext ctx{false, model.config().tsm.s_max, nullptr};
    EvalResult r;
    std::vector<int> labels;
    double loss_sum = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < examples.size(); start += batch_size) {
        const std::size_t end = std::min(examples.size(), start + batch_size);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        Tape tape(false);
        Tensor logits = model.forward(tape, make_batch(examples, idx, model.config().backbone.max_tokens), task, ctx);
        std::vector<int> batch_labels;
        for (std::size_t i = start; i < end; ++i) batch_labels.push_back(examples[i].label);
        loss_sum += double(ad::cross_entropy(tape, logits, batch_labels).item()) * double(end - start);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < classes; ++c)
                if (logits.at(b, c) > logits.at(b, best)) best = c;
            r.predictions.push_back(int(best));
        }
        labels.insert(labels.end(), batch_labels.begin(), batch_labels.end());
    }
    r.loss = loss_sum / double(examples.size());
    r.accuracy = metrics::accuracy(r.predictions, labels);
    r.macro_f1 = metrics::macro_f1(r.predictions, labels, classes);
    r.confusion = metrics::confusion_matrix(r.predictions, labels, classes);
    return r;
}

namespace {

using Snapshot = std::vector<std::vector<Scalar>>;

Snapshot snapshot(const std::vector<Tensor>& params) {
    Snapshot s;
    s.reserve(params.size());
    for (const auto& p : params) s.emplace_back(p.data().begin(), p.data().end());
    return s;
}

void restore(std::vector<Tensor>& params, const Snapshot& s) {
    for (std::size_t i = 0; i < params.size(); ++i) std::copy(s[i].begin(), s[i].end(), params[i].data().begin());
}

void check_labels(const data::TaskDataset& d, std::size_t classes) {
    if (d.num_classes != classes) {
        throw std::invalid_argument("train: dataset '" + d.name + "' has " + std::to_string(d.num_classes) +
                                    " classes, task head has " + std::to_string(classes));
    }
    for (auto split : {&d.train, &d.validation, &d.test})
        for (const auto& ex : *split)
            if (ex.label < 0 || std::size_t(ex.label) >= classes)
                throw std::invalid_argument("train: label " + std::to_string(ex.label) + " outside [0, " +
                                            std::to_string(classes) + ") in '" + d.name + "'");
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[std::size_t(rng.integer(0, std::int64_t(i) - 1))]);
    return idx;
}

std::vector<int> labels_of(const std::vector<data::Example>& ex, std::span<const std::size_t> idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(ex[i].label);
    return out;
}

/// Contiguous batch slices of `order`.
std::vector<std::span<const std::size_t>> batches_of(const std::vector<std::size_t>& order, std::size_t size) {
    std::vector<std::span<const std::size_t>> out;
    for (std::size_t s = 0; s < order.size(); s += size)
        out.emplace_back(order.data() + s, std::min(size, order.size() - s));
    return out;
}

}  // namespace

Trainer::Trainer(ContinualModel& model, const TrainerConfig& config, Rng& rng)
    : model_(model), config_(config), rng_(rng) {
    config_.validate();
}

void Trainer::reset_optimizer() { optimizer_ = ad::Adam(model_.trainable_parameters()); }

double Trainer::train_step(std::size_t task, const TokenBatch& batch, std::span<const int> labels, double s) {
    Tape tape;
    const ForwardContext ctx{true, s, &rng_};
    Tensor logits = model_.forward(tape, batch, task, ctx);
    Tensor loss = ad::cross_entropy(tape, logits, labels);
    optimizer_.zero_grad();
    tape.backward(loss);
    model_.compensate_embedding_gradients(task, s);
    model_.apply_gradient_masks();
    optimizer_.step(config_.lr);
    model_.clamp_embeddings(task);
    model_.round_to_storage();
    return double(loss.item());
}

TaskLog Trainer::train_task(std::size_t task, const data::TaskDataset& dataset) {
    if (task >= model_.num_tasks()) throw std::out_of_range("train: task " + std::to_string(task) + " not added");
    if (model_.finished(task)) throw std::logic_error("train: task " + std::to_string(task) + " already finalized");
    check_labels(dataset, model_.head(task).num_classes);
    if (dataset.train.empty()) throw std::invalid_argument("train: empty training split");
    if (model_.variant().masks && dataset.train.size() <= config_.batch_size) {
        throw std::invalid_argument("train: task '" + dataset.name + "' has " + std::to_string(dataset.train.size()) +
                                    " training examples, which is a single batch of size " +
                                    std::to_string(config_.batch_size) +
                                    "; annealing the mask scale needs at least 2 batches per epoch");
    }

    reset_optimizer();
    auto params = model_.trainable_parameters();
    const std::size_t max_tokens = model_.config().backbone.max_tokens;
    const double s_max = model_.config().tsm.s_max;
    const bool annealed = model_.variant().masks;

    TaskLog log;
    log.task = task;
    double best = std::numeric_limits<double>::infinity();
    Snapshot best_state = snapshot(params);
    std::size_t stale = 0;
    for (std::size_t epoch = 1; epoch <= config_.epochs; ++epoch) {
        const auto order = shuffled(dataset.train.size(), rng_);
        const auto batches = batches_of(order, config_.batch_size);
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const double s = annealed ? tsm::anneal_s({s_max, batches.size(), b + 1}) : s_max;
            const auto labels = labels_of(dataset.train, batches[b]);
            loss_sum += train_step(task, make_batch(dataset.train, batches[b], max_tokens), labels, s) *
                        double(batches[b].size());
        }
        EpochLog e;
        e.epoch = epoch;
        e.train_loss = loss_sum / double(dataset.train.size());
        const auto& val = dataset.validation.empty() ? dataset.train : dataset.validation;
        const EvalResult v = evaluate(model_, task, val);
        e.validation_loss = v.loss;
        e.validation_accuracy = v.accuracy;
        log.epochs.push_back(e);
        if (v.loss < best) {
            best = v.loss;
            best_state = snapshot(params);
            log.best_epoch = epoch;
            stale = 0;
        } else if (++stale >= config_.patience) {
            break;
        }
    }
    restore(params, best_state);
    return log;
}

void Trainer::finalize_task(std::size_t task) {
    model_.finalize_task(task);
    optimizer_.reset();
}

namespace {

void record_row(const ContinualModel& model, const std::vector<data::TaskDataset>& tasks,
                const std::vector<std::size_t>& order, std::size_t after, RunResult& r) {
    for (std::size_t j = 0; j <= after; ++j) {
        const EvalResult e = evaluate(model, j, tasks[order[j]].test);
        r.accuracy.set(after, j, e.accuracy);
        r.macro_f1.set(after, j, e.macro_f1);
    }
}

void record_final(const ContinualModel& model, const std::vector<data::TaskDataset>& tasks,
                  const std::vector<std::size_t>& order, RunResult& r) {
    r.free_fraction.clear();
    for (const auto& p : model.plugins())
        r.free_fraction.push_back({p.tsm().free_fraction(0), p.tsm().free_fraction(1)});
    r.final_predictions.clear();
    for (std::size_t j = 0; j < model.num_tasks(); ++j)
        r.final_predictions.push_back(evaluate(model, j, tasks[order[j]].test).predictions);
}

TaskLog train_joint(ContinualModel& model, Trainer& trainer, const TrainerConfig& config,
                    const std::vector<data::TaskDataset>& tasks, const std::vector<std::size_t>& order, Rng& rng) {
    trainer.reset_optimizer();
    auto params = model.trainable_parameters();
    const std::size_t max_tokens = model.config().backbone.max_tokens;
    const double s_max = model.config().tsm.s_max;
    TaskLog log;
    log.task = tasks.size() - 1;
    double best = std::numeric_limits<double>::infinity();
    Snapshot best_state = snapshot(params);
    std::size_t stale = 0;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<std::vector<std::size_t>> orders;
        std::vector<std::vector<std::span<const std::size_t>>> batches;
        for (std::size_t k = 0; k < order.size(); ++k) {
            orders.push_back(shuffled(tasks[order[k]].train.size(), rng));
        }
        std::size_t rounds = 0;
        for (std::size_t k = 0; k < order.size(); ++k) {
            batches.push_back(batches_of(orders[k], config.batch_size));
            rounds = std::max(rounds, batches.back().size());
        }
        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t b = 0; b < rounds; ++b)
            for (std::size_t k = 0; k < order.size(); ++k) {
                if (b >= batches[k].size()) continue;
                const auto& ex = tasks[order[k]].train;
                const auto labels = labels_of(ex, batches[k][b]);
                loss_sum += trainer.train_step(k, make_batch(ex, batches[k][b], max_tokens), labels, s_max) *
                            double(labels.size());
                seen += labels.size();
            }
        EpochLog e;
        e.epoch = epoch;
        e.train_loss = loss_sum / double(seen);
        double val_loss = 0.0, val_acc = 0.0;
        for (std::size_t k = 0; k < order.size(); ++k) {
            const auto& d = tasks[order[k]];
            const EvalResult v = evaluate(model, k, d.validation.empty() ? d.train : d.validation);
            val_loss += v.loss / double(order.size());
            val_acc += v.accuracy / double(order.size());
        }
        e.validation_loss = val_loss;
        e.validation_accuracy = val_acc;
        log.epochs.push_back(e);
        if (val_loss < best) {
            best = val_loss;
            best_state = snapshot(params);
            log.best_epoch = epoch;
            stale = 0;
        } else if (++stale >= config.patience) {
            break;
        }
    }
    restore(params, best_state);
    return log;
}

}  // namespace

RunResult run_sequence(const ModelConfig& model_config, const TrainerConfig& trainer_config,
                       const std::vector<data::TaskDataset>& tasks, std::uint64_t seed,
                       std::vector<std::size_t> order, std::optional<ContinualModel>* model_out) {
    trainer_config.validate();
    if (tasks.empty()) throw std::invalid_argument("run: no tasks");
    if (order.empty()) {
        order.resize(tasks.size());
        std::iota(order.begin(), order.end(), 0);
    }
    {
        auto sorted = order;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size(); ++i)
            if (sorted[i] != i || sorted.size() != tasks.size())
                throw std::invalid_argument("run: task order must be a permutation of 0.." +
                                            std::to_string(tasks.size() - 1));
    }

    const Mode mode = trainer_config.mode;
    const PluginVariant variant = PluginVariant::for_mode(mode);
    const std::size_t n = tasks.size();
    RunResult r;
    r.mode = mode;
    r.seed = seed;
    r.order = order;
    for (auto i : order) r.task_names.push_back(tasks[i].name);
    r.accuracy = metrics::AccuracyMatrix(n);
    r.macro_f1 = metrics::AccuracyMatrix(n);
    Rng root(seed);

    if (mode == Mode::sdl) {
        r.standalone_accuracy.resize(n);
        r.standalone_macro_f1.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            Rng model_rng = root.split();
            Rng train_rng = root.split();
            ContinualModel model(model_config, variant, model_rng);
            Trainer trainer(model, trainer_config, train_rng);
            model.add_task(tasks[order[k]].num_classes, model_rng);
            r.logs.push_back(trainer.train_task(0, tasks[order[k]]));
            trainer.finalize_task(0);
            const EvalResult e = evaluate(model, 0, tasks[order[k]].test);
            r.accuracy.set(k, k, e.accuracy);
            r.macro_f1.set(k, k, e.macro_f1);
            r.standalone_accuracy[k] = e.accuracy;
            r.standalone_macro_f1[k] = e.macro_f1;
            r.final_predictions.push_back(e.predictions);
        }
        return r;
    }

    Rng model_rng = root.split();
    Rng train_rng = root.split();
    ContinualModel model(model_config, variant, model_rng);
    Trainer trainer(model, trainer_config, train_rng);

    if (mode == Mode::joint) {
        for (std::size_t k = 0; k < n; ++k) model.add_task(tasks[order[k]].num_classes, model_rng);
        for (std::size_t k = 0; k < n; ++k) check_labels(tasks[order[k]], tasks[order[k]].num_classes);
        r.logs.push_back(train_joint(model, trainer, trainer_config, tasks, order, train_rng));
        for (std::size_t k = 0; k < n; ++k) trainer.finalize_task(k);
        record_row(model, tasks, order, n - 1, r);
        record_final(model, tasks, order, r);
    } else {
        for (std::size_t k = 0; k < n; ++k) {
            model.add_task(tasks[order[k]].num_classes, model_rng);
            r.logs.push_back(trainer.train_task(k, tasks[order[k]]));
            trainer.finalize_task(k);
            record_row(model, tasks, order, k, r);
        }
        record_final(model, tasks, order, r);
    }
    if (model_out) model_out->emplace(std::move(model));
    return r;
}

}  // namespace capscl
