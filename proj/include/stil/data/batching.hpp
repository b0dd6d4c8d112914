#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "stil/data/sample.hpp"
#include "stil/errors.hpp"

namespace stil::data {

// Serializable position of a BatchIterator.
struct BatchIteratorState {
    std::string rng;
    std::vector<int64_t> labeled_order;
    int64_t labeled_cursor = 0;
};

/// Pairs B labeled with mu*B unlabeled samples. One epoch visits every
/// unlabeled sample at most once (drop-last); the labeled stream is cycled and
/// reshuffled whenever fewer than B samples remain, independently of epochs.
class BatchIterator {
public:
    BatchIterator(const SampleSet& labeled, const SampleSet& unlabeled, int64_t batch_size, int64_t mu, uint64_t seed)
        : labeled_(&labeled), unlabeled_(&unlabeled), batch_size_(batch_size), mu_(mu), rng_(seed) {
        if (labeled.empty()) throw ConfigError("batch iterator: labeled set is empty");
        if (batch_size < 1) throw ConfigError("batch iterator: batch size must be >= 1");
        if (mu < 1) throw ConfigError("batch iterator: mu must be >= 1");
        if (batch_size > labeled.size()) {
            throw ConfigError("batch iterator: batch size " + std::to_string(batch_size) + " exceeds labeled set size " +
                              std::to_string(labeled.size()));
        }
        if (unlabeled.size() < mu * batch_size) {
            throw ConfigError("batch iterator: unlabeled set smaller than mu*B = " + std::to_string(mu * batch_size));
        }
        reshuffle_labeled();
    }

    int64_t batch_size() const { return batch_size_; }
    int64_t unlabeled_batch_size() const { return mu_ * batch_size_; }
    int64_t batches_per_epoch() const { return unlabeled_->size() / unlabeled_batch_size(); }

    /// Index pairs (into the labeled and unlabeled sets) for one epoch.
    std::vector<std::pair<std::vector<int64_t>, std::vector<int64_t>>> epoch_indices() {
        std::vector<int64_t> order(static_cast<size_t>(unlabeled_->size()));
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng_);
        std::vector<std::pair<std::vector<int64_t>, std::vector<int64_t>>> out;
        const auto ub = unlabeled_batch_size();
        for (int64_t b = 0; b < batches_per_epoch(); ++b) {
            std::vector<int64_t> u(order.begin() + b * ub, order.begin() + (b + 1) * ub);
            out.emplace_back(next_labeled(), std::move(u));
        }
        return out;
    }

    std::vector<BatchPair> epoch() {
        std::vector<BatchPair> out;
        for (const auto& [l, u] : epoch_indices()) {
            out.push_back(BatchPair{labeled_->select(l), unlabeled_->select(u)});
        }
        return out;
    }

    BatchIteratorState state() const {
        std::ostringstream os;
        os << rng_;
        return BatchIteratorState{os.str(), order_, cursor_};
    }

    void restore(const BatchIteratorState& s) {
        std::istringstream is(s.rng);
        is >> rng_;
        if (!is) throw DataError("batch iterator: corrupt RNG state");
        require(static_cast<int64_t>(s.labeled_order.size()) == labeled_->size(),
                "batch iterator: restored order does not match labeled set size");
        order_ = s.labeled_order;
        cursor_ = s.labeled_cursor;
    }

private:
    std::vector<int64_t> next_labeled() {
        if (cursor_ + batch_size_ > static_cast<int64_t>(order_.size())) reshuffle_labeled();
        std::vector<int64_t> out(order_.begin() + cursor_, order_.begin() + cursor_ + batch_size_);
        cursor_ += batch_size_;
        return out;
    }

    void reshuffle_labeled() {
        order_.resize(static_cast<size_t>(labeled_->size()));
        std::iota(order_.begin(), order_.end(), 0);
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
    }

    const SampleSet* labeled_;
    const SampleSet* unlabeled_;
    int64_t batch_size_;
    int64_t mu_;
    std::mt19937_64 rng_;
    std::vector<int64_t> order_;
    int64_t cursor_ = 0;
};

}  // namespace stil::data
