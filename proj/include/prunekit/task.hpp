#pragma once

// Synthetic sequence-classification tasks at desk scale. Labels are
// deterministic functions of the tokens, classes are quota-balanced, and
// train/dev are disjoint by construction (sequences are deduplicated).

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "prunekit/common.hpp"

namespace prunekit {

enum class TaskKind { parity_marked, majority_class, pattern_match };

inline const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::parity_marked: return "parity-marked";
        case TaskKind::majority_class: return "majority-class";
        case TaskKind::pattern_match: return "pattern-match";
    }
    return "?";
}

inline TaskKind task_kind_from_string(const std::string& s) {
    if (s == "parity-marked") return TaskKind::parity_marked;
    if (s == "majority-class") return TaskKind::majority_class;
    if (s == "pattern-match") return TaskKind::pattern_match;
    throw UsageError("unknown task kind '" + s + "'");
}

struct TaskSpec {
    TaskKind kind = TaskKind::parity_marked;
    int vocab = 64;
    int seq_len = 32;
    int classes = 2;
    int train_size = 4096;
    int dev_size = 512;
    std::uint64_t seed = 1;

    void validate() const {
        if (train_size < 1 || dev_size < 1) throw UsageError("task sizes must be >= 1");
        if (seq_len < 1 || vocab < 3 || classes < 2) throw UsageError("task dimensions too small");
        if (kind != TaskKind::majority_class && classes != 2)
            throw UsageError(std::string(to_string(kind)) + " is a binary task");
        if (kind == TaskKind::pattern_match && (vocab < 4 || seq_len < 3))
            throw UsageError("pattern-match needs vocab >= 4 and seq_len >= 3");
    }
};

struct Dataset {
    std::vector<std::vector<int>> tokens;
    std::vector<int> labels;
    size_t size() const { return labels.size(); }
};

struct TaskData {
    Dataset train, dev;
};

// Token id 1 marks; label = parity of the marker count, which is kept small
// (0..5) so the function is attainable by a tiny encoder.
inline constexpr int kMarkerToken = 1;
// pattern-match looks for the bigram (1, 2).
inline constexpr int kPatternA = 1;
inline constexpr int kPatternB = 2;

namespace detail {

inline int parity_label(const std::vector<int>& seq) {
    int n = 0;
    for (int t : seq) n += (t == kMarkerToken);
    return n % 2;
}

inline int majority_label(const std::vector<int>& seq, int classes) {
    std::vector<int> count(classes, 0);
    for (int t : seq) count[t % classes]++;
    int best = 0;
    for (int c = 1; c < classes; ++c)
        if (count[c] > count[best]) best = c;  // ties keep the lower class
    return best;
}

inline int pattern_label(const std::vector<int>& seq) {
    for (size_t i = 0; i + 1 < seq.size(); ++i)
        if (seq[i] == kPatternA && seq[i + 1] == kPatternB) return 1;
    return 0;
}

}  // namespace detail

inline int task_label(const TaskSpec& spec, const std::vector<int>& seq) {
    switch (spec.kind) {
        case TaskKind::parity_marked: return detail::parity_label(seq);
        case TaskKind::majority_class: return detail::majority_label(seq, spec.classes);
        case TaskKind::pattern_match: return detail::pattern_label(seq);
    }
    return 0;
}

inline TaskData generate_task(const TaskSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    std::uniform_int_distribution<int> any_tok(0, spec.vocab - 1);
    std::uniform_int_distribution<int> plain_tok(2, spec.vocab - 1);       // never a marker
    std::uniform_int_distribution<int> bg_tok(3, spec.vocab - 1);          // never part of the pattern
    std::uniform_int_distribution<int> marks(0, 5);
    std::uniform_int_distribution<int> pos(0, spec.seq_len - 1);

    auto propose = [&]() -> std::vector<int> {
        std::vector<int> seq(spec.seq_len);
        switch (spec.kind) {
            case TaskKind::parity_marked: {
                for (auto& t : seq) t = plain_tok(rng);
                const int k = std::min(marks(rng), spec.seq_len);
                std::vector<int> slots(spec.seq_len);
                for (int i = 0; i < spec.seq_len; ++i) slots[i] = i;
                std::shuffle(slots.begin(), slots.end(), rng);
                for (int i = 0; i < k; ++i) seq[slots[i]] = kMarkerToken;
                break;
            }
            case TaskKind::majority_class: {
                for (auto& t : seq) t = any_tok(rng);
                break;
            }
            case TaskKind::pattern_match: {
                for (auto& t : seq) t = bg_tok(rng);
                // Both marker tokens appear in every sequence so presence alone
                // carries no signal; only adjacency decides the label.
                const bool positive = (rng() & 1u) != 0;
                if (positive) {
                    const int p = std::uniform_int_distribution<int>(0, spec.seq_len - 2)(rng);
                    seq[p] = kPatternA;
                    seq[p + 1] = kPatternB;
                } else {
                    int pa = pos(rng);
                    int pb = pos(rng);
                    while (pb == pa + 1 || pa == pb) pb = pos(rng);
                    seq[pa] = kPatternA;
                    seq[pb] = kPatternB;
                }
                break;
            }
        }
        return seq;
    };

    const int total = spec.train_size + spec.dev_size;
    std::vector<long> quota(spec.classes, 0);
    for (int c = 0; c < spec.classes; ++c) quota[c] = total / spec.classes;
    for (int c = 0; c < total % spec.classes; ++c) quota[c]++;

    std::set<std::vector<int>> seen;
    std::vector<std::vector<int>> seqs;
    std::vector<int> labels;
    long attempts = 0;
    while (static_cast<int>(seqs.size()) < total) {
        if (++attempts > 1000L * total)
            throw NumericError("task generation stalled; class quotas unreachable for this spec");
        std::vector<int> seq = propose();
        const int label = task_label(spec, seq);
        if (quota[label] <= 0) continue;
        if (!seen.insert(seq).second) continue;
        quota[label]--;
        seqs.push_back(std::move(seq));
        labels.push_back(label);
    }

    // Round-robin over per-class buckets before splitting, so train and dev
    // each stay balanced within 5%.
    std::vector<std::vector<size_t>> buckets(spec.classes);
    for (size_t i = 0; i < seqs.size(); ++i) buckets[labels[i]].push_back(i);
    std::vector<size_t> order;
    order.reserve(seqs.size());
    for (size_t round = 0; order.size() < seqs.size(); ++round)
        for (int c = 0; c < spec.classes; ++c)
            if (round < buckets[c].size()) order.push_back(buckets[c][round]);

    TaskData data;
    for (size_t k = 0; k < order.size(); ++k) {
        Dataset& dst = (static_cast<int>(k) < spec.train_size) ? data.train : data.dev;
        dst.tokens.push_back(seqs[order[k]]);
        dst.labels.push_back(labels[order[k]]);
    }
    return data;
}

// Accuracy of always answering the most frequent label.
inline double majority_baseline(const Dataset& d) {
    std::vector<long> count;
    for (int l : d.labels) {
        if (l >= static_cast<int>(count.size())) count.resize(l + 1, 0);
        count[l]++;
    }
    long best = 0;
    for (long c : count) best = std::max(best, c);
    return d.size() ? double(best) / double(d.size()) : 0.0;
}

}  // namespace prunekit
