#ifndef FEDRIR_FEDERATION_HPP
#define FEDRIR_FEDERATION_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "fedrir/data.hpp"
#include "fedrir/learning.hpp"

namespace fedrir {

enum class Algorithm { kFedRir, kFedAvg, kLocal };

struct JoinRatio {
    double lo = 1.0;
    double hi = 1.0;
    bool is_range() const { return hi > lo; }
};

struct DataSpec {
    enum class Kind { kSynthetic, kIdx } kind = Kind::kSynthetic;
    int classes = 6;
    int per_class = 200;
    int dim = 64;
    double blob_spread = 0.155;
    std::string images_path;
    std::string labels_path;
};

struct FederationConfig {
    int clients = 20;
    JoinRatio rho;
    int rounds = 50;
    Algorithm algorithm = Algorithm::kFedRir;
    Ablation ablation = Ablation::kNone;
    IdmMode idm_mode = IdmMode::kAlternating;
    bool reset_opt_on_broadcast = false;

    double lr = 5e-4;
    int batch_size = 100;
    int local_epochs = 1;
    MaskSpec mask;

    ModelDims dims;
    PartitionSpec partition;
    DataSpec data;
    uint64_t seed = 1;
    int jobs = 1;

    void validate() const {
        if (clients < 1) throw DataError("clients must be >= 1");
        if (rounds < 0) throw DataError("rounds must be >= 0");
        if (!(rho.lo > 0.0 && rho.lo <= 1.0 && rho.hi >= rho.lo && rho.hi <= 1.0))
            throw DataError("join ratio must satisfy 0 < lo <= hi <= 1");
        if (batch_size < 1) throw DataError("batch_size must be >= 1");
        if (local_epochs < 1) throw DataError("local_epochs must be >= 1");
        if (mask.ratio < 0.0 || mask.ratio >= 1.0)
            throw DataError("mask_ratio must be in [0, 1)");
    }
};

// ---------------------------------------------------------------------------
// Reporting

struct ClientRoundMetrics {
    int client_id = -1;
    bool participated = false;
    double loss_recon = std::numeric_limits<double>::quiet_NaN();
    double loss_id = std::numeric_limits<double>::quiet_NaN();
    double loss_cls = std::numeric_limits<double>::quiet_NaN();
    double train_acc = std::numeric_limits<double>::quiet_NaN();
    double test_acc = std::numeric_limits<double>::quiet_NaN();
    int64_t comm_up = 0;
    int64_t comm_down = 0;
    int test_size = 0;
};

struct RoundReport {
    int round = 0;
    std::vector<int> participants;
    std::vector<ClientRoundMetrics> clients;
    double uniform_test_acc = 0.0;
    double weighted_test_acc = 0.0;
    int64_t uplink_params = 0;
    int64_t downlink_params = 0;
};

// ---------------------------------------------------------------------------
// Free operations

// max(1, round(rho*N)) distinct clients; rho drawn per round when a range
inline std::vector<int> sample_clients(int n_clients, const JoinRatio& rho,
                                       RngStream& rng) {
    const double r = rho.is_range() ? rng.uniform(rho.lo, rho.hi) : rho.lo;
    const int count = std::max<int>(
        1, static_cast<int>(std::llround(r * static_cast<double>(n_clients))));
    std::vector<int> ids = rng.permutation(n_clients);
    ids.resize(static_cast<std::size_t>(std::min(count, n_clients)));
    std::sort(ids.begin(), ids.end());
    return ids;
}

// Eq-style sample-count-weighted coordinate mean over the round's
// participants.
template <class S>
ParameterSet<S> aggregate(const std::vector<const ParameterSet<S>*>& sets,
                          const std::vector<int64_t>& weights) {
    if (sets.empty()) throw TensorError("aggregate: empty participant list");
    if (sets.size() != weights.size())
        throw TensorError("aggregate: weight count mismatch");
    int64_t total = 0;
    for (std::size_t i = 0; i < sets.size(); ++i) {
        if (weights[i] <= 0) throw TensorError("aggregate: weights must be positive");
        if (!sets[0]->same_manifest(*sets[i]))
            throw TensorError("aggregate: manifest mismatch");
        total += weights[i];
    }
    ParameterSet<S> out = sets[0]->zeros_like();
    for (std::size_t i = 0; i < sets.size(); ++i) {
        const S w = static_cast<S>(static_cast<double>(weights[i]) /
                                   static_cast<double>(total));
        for (std::size_t k = 0; k < out.size(); ++k)
            out.value(k) += w * sets[i]->value(k);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Clients and the orchestrator

template <class S>
struct Client {
    int id = -1;
    ClientDataset data;
    ClientModels<S> models;
    ParameterSet<S> avg_head;        // fedavg baseline head
    AdamState<S> avg_head_opt;
    Mat<S> train_x;                  // cached scalar-typed copies
    std::vector<int> train_y;
    Mat<S> test_x;
    std::vector<int> test_y;

    Client(int id_, ClientDataset d, const ModelDims& dims)
        : id(id_), data(std::move(d)), models(dims) {
        train_x = data.train_x.template cast<S>();
        train_y = data.train_y;
        test_x = data.test_x.template cast<S>();
        test_y = data.test_y;
    }
};

template <class S>
class Federation {
  public:
    explicit Federation(FederationConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Dataset pool = build_dataset(cfg_);
        if (cfg_.dims.input != pool.dim())
            throw DataError("model input dim " + std::to_string(cfg_.dims.input) +
                            " != dataset dim " + std::to_string(pool.dim()));
        if (cfg_.dims.classes != pool.classes)
            throw DataError("model class count " + std::to_string(cfg_.dims.classes) +
                            " != dataset classes " + std::to_string(pool.classes));
        auto splits = make_clients(pool, cfg_.partition, cfg_.seed);
        clients_.reserve(splits.size());
        RngStream shared = RngStream::derive(cfg_.seed, "init.global");
        // every client's F_g starts from the same stream state
        const uint64_t shared_seed = shared.next_u64();
        for (std::size_t i = 0; i < splits.size(); ++i) {
            clients_.emplace_back(static_cast<int>(i), std::move(splits[i]),
                                  cfg_.dims);
            RngStream priv = RngStream::derive(cfg_.seed, "init.client", i);
            RngStream shared_i(shared_seed);
            clients_.back().models.init(priv, shared_i);
            if (cfg_.algorithm == Algorithm::kFedAvg) {
                RngStream head_shared =
                    RngStream::derive(cfg_.seed, "init.avghead.shared");
                clients_.back().avg_head =
                    nets::baseline_head<S>(cfg_.dims).init(head_shared);
                clients_.back().avg_head_opt =
                    AdamState<S>::zeros_like(clients_.back().avg_head);
            }
        }
        global_fg_ = clients_.front().models.fg;
        if (cfg_.algorithm == Algorithm::kFedAvg)
            global_avg_head_ = clients_.front().avg_head;
    }

    static Dataset build_dataset(const FederationConfig& cfg) {
        if (cfg.data.kind == DataSpec::Kind::kIdx)
            return load_idx(cfg.data.images_path, cfg.data.labels_path);
        RngStream rng = RngStream::derive(cfg.seed, "data.synth");
        return synth_dataset(cfg.data.classes, cfg.data.per_class, cfg.data.dim,
                             cfg.data.blob_spread, rng);
    }

    const FederationConfig& config() const { return cfg_; }
    const std::vector<Client<S>>& clients() const { return clients_; }
    const ParameterSet<S>& global_fg() const { return global_fg_; }
    const std::vector<std::string>& transmitted_names() const {
        return transmitted_names_;
    }

    // scalars per direction per participant
    int64_t comm_params_per_participant() const {
        switch (cfg_.algorithm) {
            case Algorithm::kLocal:
                return 0;
            case Algorithm::kFedRir:
                return clients_.front().models.fg.scalar_count();
            case Algorithm::kFedAvg:
                return clients_.front().models.fg.scalar_count() +
                       clients_.front().avg_head.scalar_count();
        }
        return 0;
    }

    RoundReport run_round(int round) {
        RngStream sample_rng = RngStream::derive(cfg_.seed, "sample", static_cast<uint64_t>(round));
        std::vector<int> participants =
            cfg_.algorithm == Algorithm::kLocal
                ? all_ids()
                : sample_clients(cfg_.clients, cfg_.rho, sample_rng);

        if (cfg_.algorithm != Algorithm::kLocal) broadcast(participants);

        // local updates, one client per task; clients own their state
        // exclusively so execution order cannot change results
        std::vector<ClientRoundMetrics> metrics(clients_.size());
        run_parallel(participants, [&](int id) {
            metrics[static_cast<std::size_t>(id)] = update_client(id, round);
        });

        // evaluation covers every client
        run_parallel(all_ids(), [&](int id) {
            auto& c = clients_[static_cast<std::size_t>(id)];
            auto& m = metrics[static_cast<std::size_t>(id)];
            m.client_id = id;
            m.train_acc = accuracy(c, c.train_x, c.train_y);
            m.test_acc = accuracy(c, c.test_x, c.test_y);
            m.test_size = static_cast<int>(c.test_y.size());
        });

        RoundReport report;
        report.round = round;
        report.participants = participants;
        if (cfg_.algorithm != Algorithm::kLocal) collect_and_aggregate(participants);

        const int64_t per_dir = comm_params_per_participant();
        for (int id : participants) {
            metrics[static_cast<std::size_t>(id)].participated = true;
            metrics[static_cast<std::size_t>(id)].comm_up = per_dir;
            metrics[static_cast<std::size_t>(id)].comm_down = per_dir;
        }
        report.uplink_params = per_dir * static_cast<int64_t>(participants.size());
        report.downlink_params = report.uplink_params;

        double acc_sum = 0.0, weighted_sum = 0.0;
        int n_eval = 0;
        int64_t weight_total = 0;
        for (auto& m : metrics) {
            if (m.test_size > 0 && std::isfinite(m.test_acc)) {
                acc_sum += m.test_acc;
                weighted_sum += m.test_acc * m.test_size;
                weight_total += m.test_size;
                n_eval += 1;
            }
        }
        report.uniform_test_acc = n_eval ? acc_sum / n_eval : 0.0;
        report.weighted_test_acc =
            weight_total ? weighted_sum / static_cast<double>(weight_total) : 0.0;
        report.clients = std::move(metrics);
        return report;
    }

    std::vector<RoundReport> run_training() {
        std::vector<RoundReport> reports;
        reports.reserve(static_cast<std::size_t>(cfg_.rounds));
        for (int t = 0; t < cfg_.rounds; ++t) reports.push_back(run_round(t));
        return reports;
    }

  private:
    std::vector<int> all_ids() const {
        std::vector<int> ids(clients_.size());
        std::iota(ids.begin(), ids.end(), 0);
        return ids;
    }

    void broadcast(const std::vector<int>& participants) {
        for (int id : participants) {
            auto& c = clients_[static_cast<std::size_t>(id)];
            if (!c.models.fg.same_manifest(global_fg_))
                throw TensorError("broadcast: F_g manifest mismatch");
            c.models.fg = global_fg_;
            if (cfg_.reset_opt_on_broadcast)
                c.models.fg_opt = AdamState<S>::zeros_like(c.models.fg);
            if (cfg_.algorithm == Algorithm::kFedAvg) {
                c.avg_head = global_avg_head_;
                if (cfg_.reset_opt_on_broadcast)
                    c.avg_head_opt = AdamState<S>::zeros_like(c.avg_head);
            }
        }
    }

    void collect_and_aggregate(const std::vector<int>& participants) {
        // the wire message carries exactly the shared manifests; names are
        // recorded for the privacy audit
        std::vector<const ParameterSet<S>*> fg_sets;
        std::vector<const ParameterSet<S>*> head_sets;
        std::vector<int64_t> weights;
        for (int id : participants) {
            const auto& c = clients_[static_cast<std::size_t>(id)];
            fg_sets.push_back(&c.models.fg);
            weights.push_back(c.data.total);
            for (const auto& n : c.models.fg.names()) transmitted_names_.push_back(n);
            if (cfg_.algorithm == Algorithm::kFedAvg) {
                head_sets.push_back(&c.avg_head);
                for (const auto& n : c.avg_head.names())
                    transmitted_names_.push_back(n);
            }
        }
        global_fg_ = aggregate<S>(fg_sets, weights);
        if (cfg_.algorithm == Algorithm::kFedAvg)
            global_avg_head_ = aggregate<S>(head_sets, weights);
    }

    ClientRoundMetrics update_client(int id, int round) {
        auto& c = clients_[static_cast<std::size_t>(id)];
        ClientRoundMetrics m;
        m.client_id = id;
        if (c.train_x.rows() == 0) return m;
        RngStream rng = RngStream::derive(cfg_.seed, "client", static_cast<uint64_t>(round),
                                          static_cast<uint64_t>(id));
        const S lr = static_cast<S>(cfg_.lr);
        MaskSpec mask = cfg_.mask;
        if (cfg_.ablation == Ablation::kR0) mask.ratio = 0.0;

        if (cfg_.algorithm == Algorithm::kFedAvg) {
            double cls_sum = 0.0;
            int n_batches = 0;
            for (int e = 0; e < cfg_.local_epochs; ++e)
                for_each_batch(c, rng, [&](const Mat<S>& x, const std::vector<int>& y) {
                    cls_sum += fedavg_step(c, x, y, lr);
                    n_batches += 1;
                });
            m.loss_cls = cls_sum / std::max(1, n_batches);
            return m;
        }

        // FedRIR / local-only: MCSL stage over the local epochs, then ID
        const bool run_mcsl = cfg_.ablation != Ablation::kNoMcsl;
        if (run_mcsl) {
            double recon_sum = 0.0;
            int n_batches = 0;
            for (int e = 0; e < cfg_.local_epochs; ++e)
                for_each_batch(c, rng, [&](const Mat<S>& x, const std::vector<int>&) {
                    recon_sum += static_cast<double>(
                        local_update_mcsl(c.models, x, mask, lr, rng));
                    n_batches += 1;
                });
            m.loss_recon = recon_sum / std::max(1, n_batches);
        }
        double id_sum = 0.0, cls_sum = 0.0;
        int n_batches = 0;
        bool have_id = false;
        for (int e = 0; e < cfg_.local_epochs; ++e)
            for_each_batch(c, rng, [&](const Mat<S>& x, const std::vector<int>& y) {
                auto losses = local_update_id(c.models, x, y, cfg_.idm_mode,
                                              cfg_.ablation, lr, rng);
                if (std::isfinite(losses.l_id)) {
                    id_sum += losses.l_id;
                    have_id = true;
                }
                cls_sum += losses.l_cls;
                n_batches += 1;
            });
        if (have_id) m.loss_id = id_sum / std::max(1, n_batches);
        m.loss_cls = cls_sum / std::max(1, n_batches);
        return m;
    }

    template <class Fn>
    void for_each_batch(Client<S>& c, RngStream& rng, Fn&& fn) {
        const int n = static_cast<int>(c.train_x.rows());
        std::vector<int> order = rng.permutation(n);
        for (int start = 0; start < n; start += cfg_.batch_size) {
            const int b = std::min(cfg_.batch_size, n - start);
            if (b < 2 && n >= 2) continue;  // vCLUB needs pairs; drop the tail singleton
            Mat<S> x(b, c.train_x.cols());
            std::vector<int> y(static_cast<std::size_t>(b));
            for (int i = 0; i < b; ++i) {
                x.row(i) = c.train_x.row(order[static_cast<std::size_t>(start + i)]);
                y[static_cast<std::size_t>(i)] =
                    c.train_y[static_cast<std::size_t>(order[static_cast<std::size_t>(start + i)])];
            }
            fn(x, y);
        }
    }

    double fedavg_step(Client<S>& c, const Mat<S>& x, const std::vector<int>& y,
                       S lr) {
        Tape<S> tape;
        auto fg_p = BoundParams<S>::bind(tape, c.models.fg, true);
        auto head_p = BoundParams<S>::bind(tape, c.avg_head, true);
        auto f_g = c.models.fg_net.forward(tape, fg_p, tape.constant(x));
        auto head_net = nets::baseline_head<S>(cfg_.dims);
        auto loss = tape.softmax_cross_entropy(
            head_net.forward(tape, head_p, f_g), y);
        const double value = static_cast<double>(tape.value(loss)(0, 0));
        tape.backward(loss);
        adam_step_inplace(c.models.fg, fg_p.grads(tape), c.models.fg_opt, lr);
        adam_step_inplace(c.avg_head, head_p.grads(tape), c.avg_head_opt, lr);
        return value;
    }

    double accuracy(const Client<S>& c, const Mat<S>& x,
                    const std::vector<int>& y) const {
        if (x.rows() == 0) return std::numeric_limits<double>::quiet_NaN();
        if (cfg_.algorithm == Algorithm::kFedAvg) {
            auto head_net = nets::baseline_head<S>(cfg_.dims);
            const Mat<S> logits =
                head_net.eval(c.avg_head, c.models.fg_net.eval(c.models.fg, x));
            int correct = 0;
            for (Eigen::Index i = 0; i < logits.rows(); ++i) {
                Eigen::Index best;
                logits.row(i).maxCoeff(&best);
                if (static_cast<int>(best) == y[static_cast<std::size_t>(i)]) ++correct;
            }
            return static_cast<double>(correct) / static_cast<double>(logits.rows());
        }
        return personalized_accuracy(c.models, x, y);
    }

    template <class Fn>
    void run_parallel(const std::vector<int>& ids, Fn&& fn) {
        const int workers = std::max(1, std::min<int>(cfg_.jobs, static_cast<int>(ids.size())));
        if (workers == 1) {
            for (int id : ids) fn(id);
            return;
        }
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (;;) {
                        const std::size_t i = next.fetch_add(1);
                        if (i >= ids.size()) break;
                        fn(ids[i]);
                    }
                } catch (...) {
                    errors[static_cast<std::size_t>(w)] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    FederationConfig cfg_;
    std::vector<Client<S>> clients_;
    ParameterSet<S> global_fg_;
    ParameterSet<S> global_avg_head_;
    std::vector<std::string> transmitted_names_;
};

// analytic scalar count of the transmitted manifest
inline int64_t count_comm_params(const ModelDims& dims, Algorithm alg) {
    auto mlp_count = [](const std::vector<int>& d) {
        int64_t n = 0;
        for (std::size_t l = 0; l + 1 < d.size(); ++l)
            n += static_cast<int64_t>(d[l]) * d[l + 1] + d[l + 1];
        return n;
    };
    switch (alg) {
        case Algorithm::kLocal:
            return 0;
        case Algorithm::kFedRir:
            return mlp_count(nets::chain(dims.input, dims.hidden, dims.k_g));
        case Algorithm::kFedAvg:
            return mlp_count(nets::chain(dims.input, dims.hidden, dims.k_g)) +
                   mlp_count({dims.k_g, dims.classes});
    }
    return 0;
}

}  // namespace fedrir

#endif  // FEDRIR_FEDERATION_HPP
