#pragma once

#include <cstdint>
#include <vector>

#include "capscl/layers.hpp"

namespace capscl::ksm {

struct KsmConfig {
    std::size_t num_transfer_capsules = 3;  ///< n_j
    std::size_t capsule_dim = 64;           ///< task capsule width
    std::size_t route_dim = 64;             ///< pre-route width; also the conv filter count
    std::size_t window = 3;                 ///< similarity conv window
    double temperature = 1.0;               ///< Gumbel-Softmax temperature
    bool use_router = true;                 ///< false: every route is connected

    void validate(std::size_t max_tokens) const;
};

/// Per-task 2-layer feature network: d_e -> capsule_dim -> capsule_dim.
struct TaskCapsule {
    Linear fc1;
    Linear fc2;
};

class TaskCapsuleBank {
public:
    TaskCapsuleBank() = default;
    TaskCapsuleBank(std::size_t input_dim, std::size_t capsule_dim)
        : input_dim_(input_dim), capsule_dim_(capsule_dim) {}

    /// Appends the capsule for `task_id`, which must equal size().
    void add(std::size_t task_id, Rng& rng);
    std::size_t size() const { return capsules_.size(); }
    const TaskCapsule& operator[](std::size_t i) const { return capsules_.at(i); }
    std::size_t capsule_parameter_count() const;

private:
    std::size_t input_dim_ = 0;
    std::size_t capsule_dim_ = 0;
    std::vector<TaskCapsule> capsules_;
};

/// p_i = f_i(h) for i < task_count, applied per token.
std::vector<Tensor> task_capsule_forward(Tape& tape, const TaskCapsuleBank& bank, const Tensor& h,
                                         std::size_t task_count);

/// Similarity estimator and router of one transfer capsule, shared by every
/// source task routed into it.
struct SharedRoute {
    Tensor query_filters;  ///< [n_w x window x route_dim]
    Tensor query_bias;     ///< [n_w]
    Tensor sim_filters;    ///< [n_w x window x route_dim]
    Tensor sim_bias;       ///< [n_w]
    Linear match;          ///< n_w -> n_w, lifts the current-task features
    Linear router;         ///< 1 -> 2 (1x1 conv over n_w positions, mean-reduced)

    SharedRoute() = default;
    SharedRoute(const KsmConfig& config, Rng& rng);
    std::size_t parameter_count() const;
    void collect(const std::string& prefix, NamedTensors& out) const;
};

/// u = p W^T per token; W [route_dim x capsule_dim].
Tensor pre_route(Tape& tape, const Tensor& pre_route_matrix, const Tensor& capsule);

/// MaxPool(ReLU(conv(u_current, W_q) + b_q)): [B x n_w].
Tensor current_features(Tape& tape, const SharedRoute& route, const Tensor& u_current,
                        std::size_t tokens);
/// MaxPool(ReLU(conv(u_source, W_a) + f_a(q) + b_a)) given q from current_features.
Tensor similarity_from_features(Tape& tape, const SharedRoute& route, const Tensor& q,
                                const Tensor& u_source, std::size_t tokens);
/// Both stages for one source task: [B x n_w], elementwise >= 0.
Tensor similarity(Tape& tape, const SharedRoute& route, const Tensor& u_current,
                  const Tensor& u_source, std::size_t tokens);

struct RoutingMode {
    bool training = false;  ///< true: Gumbel noise; false: argmax of router logits
    double temperature = 1.0;
    Rng* rng = nullptr;
};

struct RouteDecision {
    Tensor similarity;  ///< a, [B x n_w]
    Tensor logits;      ///< [B x 2], column 1 = connect
    Tensor gate;        ///< [B x 1], exactly 0 or 1 in value
    Tensor soft;        ///< [B x 1] relaxed connect probability
};

/// Router logits from mean(a) through a 1x1 two-channel conv, then a
/// straight-through Gumbel-Softmax (training) or argmax (evaluation).
/// The router reads a through stop_gradient, so a closed gate passes no
/// gradient back into the source capsule.
RouteDecision route_decision(Tape& tape, const SharedRoute& route, const Tensor& a,
                             const RoutingMode& mode);

/// v = sum over routes with gate 1 of broadcast(a) * u.
/// `gates` may be empty, meaning every route is connected.
Tensor aggregate_transfer(Tape& tape, const std::vector<Tensor>& similarities,
                          const std::vector<Tensor>& gates,
                          const std::vector<Tensor>& pre_route_vectors, std::size_t tokens);

struct KsmOutput {
    std::vector<Tensor> transfer_capsules;  ///< n_j tensors of [B*T x route_dim]
    /// gates[j][i][b]: route from task capsule i into transfer capsule j for example b.
    std::vector<std::vector<std::vector<std::uint8_t>>> gates;
};

/// Task capsule layer, transfer routing and transfer capsule layer.
class KnowledgeSharingModule {
public:
    KnowledgeSharingModule() = default;
    KnowledgeSharingModule(std::size_t input_dim, std::size_t max_tokens, const KsmConfig& config,
                           Rng& rng);

    const KsmConfig& config() const { return config_; }
    std::size_t num_tasks() const { return bank_.size(); }
    const TaskCapsuleBank& bank() const { return bank_; }
    const SharedRoute& shared_route(std::size_t j) const { return shared_.at(j); }
    const Tensor& pre_route_matrix(std::size_t task, std::size_t j) const { return pre_route_.at(task).at(j); }

    /// Adds one task capsule and its n_j pre-route matrices.
    void add_task_capsule(std::size_t task_id, Rng& rng);

    /// Transfer capsules for `task` (0-based); capsules 0..task take part.
    KsmOutput forward(Tape& tape, const Tensor& h, std::size_t tokens, std::size_t task,
                      const RoutingMode& mode) const;

    std::size_t parameter_count() const;
    NamedTensors named_parameters() const;

private:
    std::size_t input_dim_ = 0;
    KsmConfig config_;
    TaskCapsuleBank bank_;
    std::vector<std::vector<Tensor>> pre_route_;  ///< [task][j]
    std::vector<SharedRoute> shared_;
};

}  // namespace capscl::ksm
