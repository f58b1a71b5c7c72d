#ifndef FEDRIR_DATA_HPP
#define FEDRIR_DATA_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "fedrir/rng.hpp"
#include "fedrir/tensor.hpp"

namespace fedrir {

class DataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Pre-partition sample pool; values normalized to [0, 1].
struct Dataset {
    Eigen::MatrixXd samples;  // B x d
    std::vector<int> labels;  // in [0, classes)
    int classes = 0;
    std::string provenance;

    Eigen::Index size() const { return samples.rows(); }
    Eigen::Index dim() const { return samples.cols(); }
};

enum class PartitionKind { kPathological, kDirichlet };

struct PartitionSpec {
    PartitionKind kind = PartitionKind::kPathological;
    int classes_per_client = 2;
    double alpha = 0.1;
    int clients = 20;
    double train_fraction = 0.75;
};

struct ClientDataset {
    Eigen::MatrixXd train_x;
    std::vector<int> train_y;
    Eigen::MatrixXd test_x;
    std::vector<int> test_y;
    std::vector<int> histogram;  // per-class counts over train+test
    int total = 0;
    bool empty_test_warning = false;
};

// ---------------------------------------------------------------------------
// Synthetic class-conditional Gaussian blobs

// distance between the two means of a twin pair
inline constexpr double kPairGap = 0.44;

inline Dataset synth_dataset(int classes, int per_class, int dim,
                             double blob_spread, RngStream& rng) {
    if (classes < 2) throw DataError("synth_dataset: need at least 2 classes");
    if (per_class < 2) throw DataError("synth_dataset: need per_class >= 2");
    if (!(blob_spread > 0.0)) throw DataError("synth_dataset: spread must be > 0");
    if (classes > dim)
        throw DataError("synth_dataset: need dim >= classes for the simplex layout");
    // Classes come in twin pairs: pair centers sit on a randomly rotated
    // unit-edge simplex around 0.5 (every center pair equally far apart) and
    // the two classes of a pair are offset by kPairGap along an orthogonal
    // direction. Separating twins is the hard part of the task, so the
    // pooled difficulty is governed by spread against the fixed pair gap
    // while cross-pair confusion stays negligible. The centered layout keeps
    // the [0,1] clip below from binding often, so the blobs stay close to
    // true Gaussians. Odd class counts leave the last class unpaired at its
    // center.
    const int centers = (classes + 1) / 2;
    Eigen::MatrixXd basis(classes, dim);
    for (int c = 0; c < classes; ++c) {
        for (int j = 0; j < dim; ++j) basis(c, j) = rng.normal();
        for (int p = 0; p < c; ++p)
            basis.row(c) -= basis.row(c).dot(basis.row(p)) * basis.row(p);
        const double norm = basis.row(c).norm();
        if (norm < 1e-8) throw DataError("synth_dataset: degenerate mean basis");
        basis.row(c) /= norm;
    }
    Eigen::MatrixXd simplex =
        Eigen::MatrixXd::Identity(centers, centers) / std::numbers::sqrt2;
    simplex.array() -= 1.0 / (centers * std::numbers::sqrt2);
    Eigen::MatrixXd center_rows = simplex * basis.topRows(centers);
    Eigen::MatrixXd means(classes, dim);
    for (int c = 0; c < classes; ++c) {
        means.row(c) = 0.5 + center_rows.row(c / 2).array();
        if (c / 2 < classes / 2) {
            const double sign = (c % 2 == 0) ? -1.0 : 1.0;
            means.row(c) += sign * (kPairGap / 2.0) * basis.row(centers + c / 2);
        }
    }
    Dataset ds;
    ds.classes = classes;
    ds.provenance = "synthetic";
    ds.samples.resize(static_cast<Eigen::Index>(classes) * per_class, dim);
    ds.labels.resize(static_cast<std::size_t>(classes) * per_class);
    Eigen::Index row = 0;
    for (int c = 0; c < classes; ++c) {
        for (int k = 0; k < per_class; ++k, ++row) {
            for (int j = 0; j < dim; ++j) {
                const double v = means(c, j) + blob_spread * rng.normal();
                ds.samples(row, j) = std::clamp(v, 0.0, 1.0);
            }
            ds.labels[static_cast<std::size_t>(row)] = c;
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// IDX (big-endian) image/label files

namespace detail {

inline uint32_t read_be32(std::istream& is, const std::string& what,
                          std::streamoff offset) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is)
        throw DataError("truncated IDX file while reading " + what +
                        " at offset " + std::to_string(offset));
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) |
           (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

}  // namespace detail

inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw DataError("cannot open IDX image file: " + images_path);
    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw DataError("cannot open IDX label file: " + labels_path);

    const uint32_t img_magic = detail::read_be32(img, "image magic", 0);
    if (img_magic != 0x00000803)
        throw DataError("bad IDX image magic at offset 0 in " + images_path +
                        " (expected 0x00000803)");
    const uint32_t n_img = detail::read_be32(img, "image count", 4);
    const uint32_t rows = detail::read_be32(img, "row count", 8);
    const uint32_t cols = detail::read_be32(img, "column count", 12);

    const uint32_t lab_magic = detail::read_be32(lab, "label magic", 0);
    if (lab_magic != 0x00000801)
        throw DataError("bad IDX label magic at offset 0 in " + labels_path +
                        " (expected 0x00000801)");
    const uint32_t n_lab = detail::read_be32(lab, "label count", 4);
    if (n_img != n_lab)
        throw DataError("IDX count mismatch: " + std::to_string(n_img) +
                        " images vs " + std::to_string(n_lab) + " labels");

    const std::size_t d = static_cast<std::size_t>(rows) * cols;
    Dataset ds;
    ds.provenance = "idx:" + images_path;
    ds.samples.resize(n_img, static_cast<Eigen::Index>(d));
    ds.labels.resize(n_img);
    std::vector<unsigned char> buf(d);
    int max_label = 0;
    for (uint32_t i = 0; i < n_img; ++i) {
        img.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(d));
        if (!img)
            throw DataError("truncated IDX image payload at sample " +
                            std::to_string(i));
        for (std::size_t j = 0; j < d; ++j)
            ds.samples(i, static_cast<Eigen::Index>(j)) = buf[j] / 255.0;
        char y;
        lab.read(&y, 1);
        if (!lab)
            throw DataError("truncated IDX label payload at sample " +
                            std::to_string(i));
        ds.labels[i] = static_cast<unsigned char>(y);
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.classes = max_label + 1;
    return ds;
}

// ---------------------------------------------------------------------------
// Partitioners (return per-client index sets; sample materialization and
// the train/test split happen in make_clients)

namespace detail {

inline std::vector<std::vector<int>> class_indices(const Dataset& ds) {
    std::vector<std::vector<int>> by_class(ds.classes);
    for (Eigen::Index i = 0; i < ds.size(); ++i)
        by_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])]
            .push_back(static_cast<int>(i));
    return by_class;
}

// floor allocations plus leftovers by largest fractional remainder, ties to
// the lowest index; conserves the total exactly
inline std::vector<int> largest_remainder(const std::vector<double>& shares,
                                          int total) {
    const std::size_t n = shares.size();
    std::vector<int> counts(n);
    std::vector<std::pair<double, std::size_t>> rem(n);
    int assigned = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double q = shares[i] * total;
        counts[i] = static_cast<int>(std::floor(q));
        assigned += counts[i];
        rem[i] = {q - counts[i], i};
    }
    std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (int k = 0; k < total - assigned; ++k) counts[rem[static_cast<std::size_t>(k)].second] += 1;
    return counts;
}

}  // namespace detail

inline std::vector<std::vector<int>> partition_pathological(
    const Dataset& ds, const PartitionSpec& spec, RngStream& rng) {
    const int N = spec.clients;
    const int cpc = spec.classes_per_client;
    const int C = ds.classes;
    if (cpc < 1 || cpc > C)
        throw DataError("classes_per_client must be in [1, classes]");
    if (static_cast<int64_t>(cpc) * N < C)
        throw DataError("pathological partition infeasible: " +
                        std::to_string(cpc) + " classes/client x " +
                        std::to_string(N) + " clients cannot cover " +
                        std::to_string(C) + " classes");

    // shard budget per class: N*cpc slots spread as evenly as possible
    const int slots = N * cpc;
    std::vector<int> shards(static_cast<std::size_t>(C), slots / C);
    std::vector<int> order = rng.permutation(C);
    for (int k = 0; k < slots % C; ++k) shards[static_cast<std::size_t>(order[k])] += 1;

    // deal classes to clients: each client takes the cpc distinct classes
    // with the most remaining shards (ties by class id)
    std::vector<std::vector<int>> client_classes(static_cast<std::size_t>(N));
    std::vector<int> remaining = shards;
    std::vector<int> client_order = rng.permutation(N);
    for (int ci : client_order) {
        std::vector<int> cls(static_cast<std::size_t>(C));
        std::iota(cls.begin(), cls.end(), 0);
        std::stable_sort(cls.begin(), cls.end(), [&](int a, int b) {
            return remaining[static_cast<std::size_t>(a)] > remaining[static_cast<std::size_t>(b)];
        });
        for (int k = 0; k < cpc; ++k) {
            if (remaining[static_cast<std::size_t>(cls[static_cast<std::size_t>(k)])] <= 0)
                throw DataError("pathological partition: shard budget exhausted");
            client_classes[static_cast<std::size_t>(ci)].push_back(cls[static_cast<std::size_t>(k)]);
            remaining[static_cast<std::size_t>(cls[static_cast<std::size_t>(k)])] -= 1;
        }
    }

    // split each class's (shuffled) samples into its shard count and deal
    // the shards to the clients holding that class
    auto by_class = detail::class_indices(ds);
    std::vector<std::vector<int>> holders(static_cast<std::size_t>(C));
    for (int i = 0; i < N; ++i)
        for (int c : client_classes[static_cast<std::size_t>(i)])
            holders[static_cast<std::size_t>(c)].push_back(i);
    std::vector<std::vector<int>> result(static_cast<std::size_t>(N));
    for (int c = 0; c < C; ++c) {
        auto& pool = by_class[static_cast<std::size_t>(c)];
        rng.shuffle(pool);
        const auto& h = holders[static_cast<std::size_t>(c)];
        const int n_shards = static_cast<int>(h.size());
        std::vector<double> shares(static_cast<std::size_t>(n_shards),
                                   1.0 / n_shards);
        auto counts = detail::largest_remainder(shares, static_cast<int>(pool.size()));
        std::size_t pos = 0;
        for (int s = 0; s < n_shards; ++s) {
            auto& dst = result[static_cast<std::size_t>(h[static_cast<std::size_t>(s)])];
            dst.insert(dst.end(), pool.begin() + static_cast<std::ptrdiff_t>(pos),
                       pool.begin() + static_cast<std::ptrdiff_t>(pos + static_cast<std::size_t>(counts[static_cast<std::size_t>(s)])));
            pos += static_cast<std::size_t>(counts[static_cast<std::size_t>(s)]);
        }
    }
    return result;
}

inline std::vector<std::vector<int>> partition_dirichlet(
    const Dataset& ds, const PartitionSpec& spec, RngStream& rng,
    int max_retries = 200) {
    if (!(spec.alpha > 0.0)) throw DataError("dirichlet alpha must be > 0");
    const int N = spec.clients;
    const int C = ds.classes;
    auto by_class = detail::class_indices(ds);
    const int floor_samples = std::max(C, 8);

    for (int attempt = 0; attempt < max_retries; ++attempt) {
        std::vector<std::vector<int>> result(static_cast<std::size_t>(N));
        for (int c = 0; c < C; ++c) {
            auto pool = by_class[static_cast<std::size_t>(c)];
            rng.shuffle(pool);
            const auto shares = rng.dirichlet(spec.alpha, static_cast<std::size_t>(N));
            const auto counts = detail::largest_remainder(shares, static_cast<int>(pool.size()));
            std::size_t pos = 0;
            for (int i = 0; i < N; ++i) {
                auto& dst = result[static_cast<std::size_t>(i)];
                dst.insert(dst.end(), pool.begin() + static_cast<std::ptrdiff_t>(pos),
                           pool.begin() + static_cast<std::ptrdiff_t>(pos + static_cast<std::size_t>(counts[static_cast<std::size_t>(i)])));
                pos += static_cast<std::size_t>(counts[static_cast<std::size_t>(i)]);
            }
        }
        const bool ok = std::all_of(result.begin(), result.end(), [&](const auto& v) {
            return static_cast<int>(v.size()) >= floor_samples;
        });
        if (ok) return result;
    }
    throw DataError("dirichlet partition: retry budget exhausted (alpha too "
                    "small for " + std::to_string(N) + " clients)");
}

// Stratified train/test split with largest-remainder rounding; every held
// class keeps at least one training sample, a single-sample client goes
// entirely to train (warning surfaced on the result).
inline ClientDataset split_train_test(const Dataset& ds,
                                      const std::vector<int>& indices,
                                      double fraction, RngStream& rng) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw DataError("train fraction must be in (0, 1)");
    ClientDataset cd;
    cd.histogram.assign(static_cast<std::size_t>(ds.classes), 0);
    cd.total = static_cast<int>(indices.size());

    std::vector<std::vector<int>> per_class(static_cast<std::size_t>(ds.classes));
    for (int idx : indices) {
        per_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(idx)])].push_back(idx);
        cd.histogram[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(idx)])] += 1;
    }

    // largest-remainder over held classes so the train total hits
    // round(fraction * total)
    std::vector<int> held;
    std::vector<double> shares;
    int held_total = 0;
    for (int c = 0; c < ds.classes; ++c) {
        if (!per_class[static_cast<std::size_t>(c)].empty()) {
            held.push_back(c);
            held_total += static_cast<int>(per_class[static_cast<std::size_t>(c)].size());
        }
    }
    for (int c : held)
        shares.push_back(static_cast<double>(per_class[static_cast<std::size_t>(c)].size()) / held_total);
    const int train_total = static_cast<int>(std::llround(fraction * held_total));
    auto train_counts = detail::largest_remainder(shares, train_total);
    for (std::size_t k = 0; k < held.size(); ++k) {
        const int m = static_cast<int>(per_class[static_cast<std::size_t>(held[k])].size());
        train_counts[k] = std::clamp(train_counts[k], m > 0 ? 1 : 0, m);
    }

    std::vector<int> train_idx, test_idx;
    for (std::size_t k = 0; k < held.size(); ++k) {
        auto& pool = per_class[static_cast<std::size_t>(held[k])];
        rng.shuffle(pool);
        for (std::size_t j = 0; j < pool.size(); ++j)
            (static_cast<int>(j) < train_counts[k] ? train_idx : test_idx)
                .push_back(pool[j]);
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    cd.empty_test_warning = test_idx.empty();

    auto gather = [&](const std::vector<int>& idx, Eigen::MatrixXd& x,
                      std::vector<int>& y) {
        x.resize(static_cast<Eigen::Index>(idx.size()), ds.dim());
        y.resize(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            x.row(static_cast<Eigen::Index>(i)) = ds.samples.row(idx[i]);
            y[i] = ds.labels[static_cast<std::size_t>(idx[i])];
        }
    };
    gather(train_idx, cd.train_x, cd.train_y);
    gather(test_idx, cd.test_x, cd.test_y);
    return cd;
}

// Full pipeline: partition the pool and split every client, all streams
// derived from the master seed.
inline std::vector<ClientDataset> make_clients(const Dataset& ds,
                                               const PartitionSpec& spec,
                                               uint64_t master_seed) {
    RngStream part_rng = RngStream::derive(master_seed, "partition");
    std::vector<std::vector<int>> idx =
        spec.kind == PartitionKind::kPathological
            ? partition_pathological(ds, spec, part_rng)
            : partition_dirichlet(ds, spec, part_rng);
    std::vector<ClientDataset> out;
    out.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        RngStream split_rng = RngStream::derive(master_seed, "split", i);
        out.push_back(split_train_test(ds, idx[i], spec.train_fraction, split_rng));
    }
    return out;
}

}  // namespace fedrir

#endif  // FEDRIR_DATA_HPP
