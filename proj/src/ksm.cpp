#include "capscl/ksm.hpp"

#include <stdexcept>
#include <string>

namespace capscl::ksm {

void KsmConfig::validate(std::size_t max_tokens) const {
    if (num_transfer_capsules == 0) throw std::invalid_argument("ksm: need at least one transfer capsule");
    if (capsule_dim == 0 || route_dim == 0) throw std::invalid_argument("ksm: dimensions must be positive");
    if (window == 0 || window > max_tokens)
        throw std::invalid_argument("ksm: window must be in [1, max_tokens]");
    if (!(temperature > 0.0)) throw std::invalid_argument("ksm: temperature must be > 0");
}

void TaskCapsuleBank::add(std::size_t task_id, Rng& rng) {
    if (task_id != capsules_.size()) {
        throw std::logic_error("task capsule bank: task " + std::to_string(task_id) +
                               (task_id < capsules_.size() ? " already has a capsule"
                                                          : " added out of order"));
    }
    capsules_.push_back({Linear(input_dim_, capsule_dim_, rng), Linear(capsule_dim_, capsule_dim_, rng)});
}

std::size_t TaskCapsuleBank::capsule_parameter_count() const {
    return input_dim_ * capsule_dim_ + capsule_dim_ + capsule_dim_ * capsule_dim_ + capsule_dim_;
}

std::vector<Tensor> task_capsule_forward(Tape& tape, const TaskCapsuleBank& bank, const Tensor& h,
                                         std::size_t task_count) {
    if (task_count > bank.size()) {
        throw std::out_of_range("task capsules: requested " + std::to_string(task_count) +
                                " capsules, bank holds " + std::to_string(bank.size()));
    }
    std::vector<Tensor> out;
    out.reserve(task_count);
    for (std::size_t i = 0; i < task_count; ++i) {
        const auto& cap = bank[i];
        out.push_back(cap.fc2(tape, ad::relu(tape, cap.fc1(tape, h))));
    }
    return out;
}

SharedRoute::SharedRoute(const KsmConfig& c, Rng& rng) {
    const std::size_t n_w = c.route_dim, w = c.window, ch = c.route_dim;
    query_filters = glorot_uniform({n_w, w, ch}, w * ch, n_w * w, rng);
    query_bias = Tensor::zeros({n_w}, true);
    sim_filters = glorot_uniform({n_w, w, ch}, w * ch, n_w * w, rng);
    sim_bias = Tensor::zeros({n_w}, true);
    match = Linear(n_w, n_w, rng);
    router = Linear(1, 2, rng);
}

std::size_t SharedRoute::parameter_count() const {
    return query_filters.numel() + query_bias.numel() + sim_filters.numel() + sim_bias.numel() +
           match.parameter_count() + router.parameter_count();
}

void SharedRoute::collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".query_filters", query_filters);
    out.emplace_back(prefix + ".query_bias", query_bias);
    out.emplace_back(prefix + ".sim_filters", sim_filters);
    out.emplace_back(prefix + ".sim_bias", sim_bias);
    match.collect(prefix + ".match", out);
    router.collect(prefix + ".router", out);
}

Tensor pre_route(Tape& tape, const Tensor& pre_route_matrix, const Tensor& capsule) {
    return ad::matmul_nt(tape, capsule, pre_route_matrix);
}

Tensor current_features(Tape& tape, const SharedRoute& route, const Tensor& u_current,
                        std::size_t tokens) {
    const std::size_t out_tokens = tokens - route.query_filters.shape()[1] + 1;
    Tensor conv = ad::conv1d(tape, u_current, tokens, route.query_filters, route.query_bias);
    return ad::maxpool_over_time(tape, ad::relu(tape, conv), out_tokens);
}

Tensor similarity_from_features(Tape& tape, const SharedRoute& route, const Tensor& q,
                                const Tensor& u_source, std::size_t tokens) {
    const std::size_t window = route.sim_filters.shape()[1];
    if (window > tokens) {
        throw ad::DimensionError("similarity: window " + std::to_string(window) +
                                 " larger than token count " + std::to_string(tokens));
    }
    const std::size_t out_tokens = tokens - window + 1;
    Tensor conv = ad::conv1d(tape, u_source, tokens, route.sim_filters, route.sim_bias);
    Tensor lifted = ad::linear(tape, q, route.match.weight, route.match.bias);
    conv = ad::add_segment(tape, conv, out_tokens, lifted);
    return ad::maxpool_over_time(tape, ad::relu(tape, conv), out_tokens);
}

Tensor similarity(Tape& tape, const SharedRoute& route, const Tensor& u_current,
                  const Tensor& u_source, std::size_t tokens) {
    if (u_current.shape() != u_source.shape()) {
        throw ad::DimensionError("similarity: representations differ in shape " +
                                 ad::shape_string(u_current.shape()) + " vs " +
                                 ad::shape_string(u_source.shape()));
    }
    if (route.query_filters.shape()[1] > tokens) {
        throw ad::DimensionError("similarity: window larger than token count");
    }
    Tensor q = current_features(tape, route, u_current, tokens);
    return similarity_from_features(tape, route, q, u_source, tokens);
}

RouteDecision route_decision(Tape& tape, const SharedRoute& route, const Tensor& a,
                             const RoutingMode& mode) {
    RouteDecision d;
    d.similarity = a;
    Tensor pooled = ad::row_mean(tape, ad::stop_gradient(a));
    d.logits = route.router(tape, pooled);
    if (mode.training) {
        if (!mode.rng) throw std::invalid_argument("route_decision: training mode needs an rng");
        auto sample = ad::gumbel_softmax(tape, d.logits, mode.temperature, *mode.rng);
        d.gate = ad::column(tape, sample.hard, 1);
        d.soft = ad::column(tape, sample.soft, 1);
    } else {
        if (!(mode.temperature > 0.0))
            throw std::invalid_argument("route_decision: temperature must be > 0");
        d.gate = ad::column(tape, ad::argmax_onehot(d.logits), 1);
        d.soft = ad::column(tape, ad::softmax_rows(tape, d.logits), 1);
    }
    return d;
}

Tensor aggregate_transfer(Tape& tape, const std::vector<Tensor>& similarities,
                          const std::vector<Tensor>& gates,
                          const std::vector<Tensor>& pre_route_vectors, std::size_t tokens) {
    if (similarities.empty() || similarities.size() != pre_route_vectors.size() ||
        (!gates.empty() && gates.size() != similarities.size())) {
        throw std::invalid_argument("aggregate_transfer: inconsistent route counts (" +
                                    std::to_string(similarities.size()) + " similarities, " +
                                    std::to_string(gates.size()) + " gates, " +
                                    std::to_string(pre_route_vectors.size()) + " pre-route vectors)");
    }
    Tensor total;
    for (std::size_t i = 0; i < similarities.size(); ++i) {
        Tensor factor = similarities[i];
        if (!gates.empty()) factor = ad::mul_segment(tape, factor, 1, gates[i]);
        Tensor term = ad::mul_segment(tape, pre_route_vectors[i], tokens, factor);
        total = total.defined() ? ad::add(tape, total, term) : term;
    }
    return total;
}

KnowledgeSharingModule::KnowledgeSharingModule(std::size_t input_dim, std::size_t max_tokens,
                                               const KsmConfig& config, Rng& rng)
    : input_dim_(input_dim), config_(config), bank_(input_dim, config.capsule_dim) {
    config_.validate(max_tokens);
    for (std::size_t j = 0; j < config_.num_transfer_capsules; ++j) shared_.emplace_back(config_, rng);
}

void KnowledgeSharingModule::add_task_capsule(std::size_t task_id, Rng& rng) {
    bank_.add(task_id, rng);
    std::vector<Tensor> routes;
    for (std::size_t j = 0; j < config_.num_transfer_capsules; ++j) {
        routes.push_back(glorot_uniform({config_.route_dim, config_.capsule_dim}, config_.capsule_dim,
                                        config_.route_dim, rng));
    }
    pre_route_.push_back(std::move(routes));
}

KsmOutput KnowledgeSharingModule::forward(Tape& tape, const Tensor& h, std::size_t tokens,
                                          std::size_t task, const RoutingMode& mode) const {
    if (task >= bank_.size()) {
        throw std::out_of_range("ksm: no task capsule for task " + std::to_string(task));
    }
    const std::size_t count = task + 1;
    const std::size_t batch = h.rows() / tokens;
    auto capsules = task_capsule_forward(tape, bank_, h, count);

    KsmOutput out;
    out.gates.resize(config_.num_transfer_capsules);
    for (std::size_t j = 0; j < config_.num_transfer_capsules; ++j) {
        const SharedRoute& route = shared_[j];
        std::vector<Tensor> u(count);
        for (std::size_t i = 0; i < count; ++i) u[i] = pre_route(tape, pre_route_[i][j], capsules[i]);
        Tensor q = current_features(tape, route, u[task], tokens);

        std::vector<Tensor> sims, gates;
        out.gates[j].assign(count, std::vector<std::uint8_t>(batch, 1));
        for (std::size_t i = 0; i < count; ++i) {
            Tensor a = similarity_from_features(tape, route, q, u[i], tokens);
            if (config_.use_router) {
                RouteDecision d = route_decision(tape, route, a, mode);
                for (std::size_t b = 0; b < batch; ++b) out.gates[j][i][b] = d.gate[b] != 0 ? 1 : 0;
                gates.push_back(d.gate);
            }
            sims.push_back(a);
        }
        out.transfer_capsules.push_back(aggregate_transfer(tape, sims, gates, u, tokens));
    }
    return out;
}

std::size_t KnowledgeSharingModule::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.numel();
    return n;
}

NamedTensors KnowledgeSharingModule::named_parameters() const {
    NamedTensors out;
    for (std::size_t i = 0; i < bank_.size(); ++i) {
        const auto p = "capsule" + std::to_string(i);
        bank_[i].fc1.collect(p + ".fc1", out);
        bank_[i].fc2.collect(p + ".fc2", out);
        for (std::size_t j = 0; j < pre_route_[i].size(); ++j)
            out.emplace_back(p + ".pre_route" + std::to_string(j), pre_route_[i][j]);
    }
    for (std::size_t j = 0; j < shared_.size(); ++j) shared_[j].collect("route" + std::to_string(j), out);
    return out;
}

}  // namespace capscl::ksm
