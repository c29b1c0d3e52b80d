#include "shgvqa/matching.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace shgvqa {

CostMatrix build_cost_matrix(std::span<const double> probs, std::int64_t q, std::int64_t n_classes,
                             const std::vector<std::int64_t>& gt_frame, std::int64_t phi_index) {
    if (static_cast<std::int64_t>(gt_frame.size()) > q) {
        throw std::invalid_argument("build_cost_matrix: ground-truth set of size " +
                                    std::to_string(gt_frame.size()) + " exceeds " +
                                    std::to_string(q) + " query slots");
    }
    if (static_cast<std::int64_t>(probs.size()) != q * n_classes) {
        throw std::invalid_argument("build_cost_matrix: probs size mismatch");
    }
    CostMatrix m;
    m.q = q;
    m.classes.assign(gt_frame.begin(), gt_frame.end());
    m.classes.resize(static_cast<std::size_t>(q), phi_index);
    m.cost.assign(static_cast<std::size_t>(q * q), 0.0);
    for (std::int64_t j = 0; j < q; ++j) {
        const std::int64_t c = m.classes[static_cast<std::size_t>(j)];
        if (c == phi_index) {
            continue;  // phi columns cost nothing regardless of the slot
        }
        if (c < 0 || c >= n_classes) {
            throw std::invalid_argument("build_cost_matrix: class " + std::to_string(c) +
                                        " outside the probability row of width " +
                                        std::to_string(n_classes));
        }
        for (std::int64_t i = 0; i < q; ++i) {
            m.cost[static_cast<std::size_t>(i * q + j)] =
                -probs[static_cast<std::size_t>(i * n_classes + c)];
        }
    }
    return m;
}

std::vector<std::int64_t> hungarian_solve(const std::vector<double>& cost, std::int64_t n) {
    if (n <= 0 || static_cast<std::int64_t>(cost.size()) != n * n) {
        throw std::invalid_argument("hungarian_solve: expected a square matrix");
    }
    for (double v : cost) {
        if (!std::isfinite(v)) {
            throw std::invalid_argument("hungarian_solve: non-finite cost entry");
        }
    }
    const double inf = std::numeric_limits<double>::infinity();
    // potentials over rows (u) and columns (v); p[j] = row matched to column j
    std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0);
    std::vector<double> v(static_cast<std::size_t>(n + 1), 0.0);
    std::vector<std::int64_t> p(static_cast<std::size_t>(n + 1), 0);
    std::vector<std::int64_t> way(static_cast<std::size_t>(n + 1), 0);
    for (std::int64_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::int64_t j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
        std::vector<char> used(static_cast<std::size_t>(n + 1), 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const std::int64_t i0 = p[static_cast<std::size_t>(j0)];
            double delta = inf;
            std::int64_t j1 = -1;
            for (std::int64_t j = 1; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = cost[static_cast<std::size_t>((i0 - 1) * n + (j - 1))] -
                                   u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (std::int64_t j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const std::int64_t j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::int64_t> row_to_col(static_cast<std::size_t>(n), -1);
    for (std::int64_t j = 1; j <= n; ++j) {
        row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    }
    return row_to_col;
}

FrameAssignment hungarian_match(const CostMatrix& matrix) {
    FrameAssignment a;
    a.slot_to_column = hungarian_solve(matrix.cost, matrix.q);
    a.matched_class.resize(static_cast<std::size_t>(matrix.q));
    a.cost = 0.0;
    for (std::int64_t i = 0; i < matrix.q; ++i) {
        const std::int64_t j = a.slot_to_column[static_cast<std::size_t>(i)];
        a.matched_class[static_cast<std::size_t>(i)] = matrix.classes[static_cast<std::size_t>(j)];
        a.cost += matrix.at(i, j);
    }
    return a;
}

SequenceAssignments match_sequence(const Tensor& probs,
                                   const std::vector<std::vector<std::int64_t>>& gt_frames,
                                   std::int64_t queries_per_frame, std::int64_t phi_index,
                                   MatchScope scope) {
    if (probs.rank() != 2) {
        throw std::invalid_argument("match_sequence: expected rank-2 probabilities, got " +
                                    shape_str(probs.shape()));
    }
    const std::int64_t frames = static_cast<std::int64_t>(gt_frames.size());
    const std::int64_t n_classes = probs.dim(1);
    if (probs.dim(0) != frames * queries_per_frame) {
        throw std::invalid_argument("match_sequence: probs rows " + std::to_string(probs.dim(0)) +
                                    " do not equal frames*Q = " +
                                    std::to_string(frames * queries_per_frame));
    }
    SequenceAssignments out;
    out.scope = scope;
    out.queries_per_frame = queries_per_frame;
    out.frames = frames;
    const auto pd = probs.data();

    if (scope == MatchScope::frame) {
        out.matched_class_per_slot.resize(static_cast<std::size_t>(frames * queries_per_frame));
        for (std::int64_t t = 0; t < frames; ++t) {
            const std::span<const double> rows =
                pd.subspan(static_cast<std::size_t>(t * queries_per_frame * n_classes),
                           static_cast<std::size_t>(queries_per_frame * n_classes));
            CostMatrix m = build_cost_matrix(rows, queries_per_frame, n_classes,
                                             gt_frames[static_cast<std::size_t>(t)], phi_index);
            FrameAssignment a = hungarian_match(m);
            for (std::int64_t i = 0; i < queries_per_frame; ++i) {
                out.matched_class_per_slot[static_cast<std::size_t>(t * queries_per_frame + i)] =
                    a.matched_class[static_cast<std::size_t>(i)];
            }
            out.total_cost += a.cost;
            out.per_frame.push_back(std::move(a));
        }
        return out;
    }

    // video scope: one global matching over all slots and all labels, the
    // baseline the per-timestep loss is compared against
    std::vector<std::int64_t> all_labels;
    for (const auto& frame : gt_frames) {
        all_labels.insert(all_labels.end(), frame.begin(), frame.end());
    }
    const std::int64_t q = frames * queries_per_frame;
    if (static_cast<std::int64_t>(all_labels.size()) > q) {
        throw std::invalid_argument("match_sequence: more ground-truth labels than query slots");
    }
    CostMatrix m = build_cost_matrix(pd, q, n_classes, all_labels, phi_index);
    FrameAssignment a = hungarian_match(m);
    out.matched_class_per_slot = a.matched_class;
    out.total_cost = a.cost;
    out.per_frame.push_back(std::move(a));
    return out;
}

Tensor hungarian_loss(const Tensor& logits, const SequenceAssignments& assignments,
                      std::int64_t phi_index, double phi_weight) {
    if (logits.rank() != 2 ||
        logits.dim(0) != static_cast<std::int64_t>(assignments.matched_class_per_slot.size())) {
        throw std::invalid_argument("hungarian_loss: logits shape " + shape_str(logits.shape()) +
                                    " does not match " +
                                    std::to_string(assignments.matched_class_per_slot.size()) +
                                    " assigned slots");
    }
    std::vector<double> weights(assignments.matched_class_per_slot.size(), 1.0);
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (assignments.matched_class_per_slot[i] == phi_index) {
            weights[i] = phi_weight;
        }
    }
    return cross_entropy_rows(logits, assignments.matched_class_per_slot, weights);
}

Tensor total_loss(const Tensor& l_act, const Tensor& l_rel, const Tensor& l_vqa) {
    return add(add(l_act, l_rel), l_vqa);
}

}  // namespace shgvqa
