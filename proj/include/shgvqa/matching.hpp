#pragma once

#include <cstdint>
#include <vector>

#include "shgvqa/tensor.hpp"

namespace shgvqa {

// Square pairwise matching cost for one frame. Rows are prediction slots,
// columns are ground-truth slots padded with phi; entry (i,j) is
// -1{c_j != phi} * p_i(c_j), so phi columns are all zeros and every entry
// lies in [-1, 0].
struct CostMatrix {
    std::int64_t q = 0;
    std::vector<double> cost;            // row-major q x q
    std::vector<std::int64_t> classes;   // padded ground-truth class per column

    double at(std::int64_t i, std::int64_t j) const {
        return cost[static_cast<std::size_t>(i * q + j)];
    }
};

CostMatrix build_cost_matrix(std::span<const double> probs, std::int64_t q, std::int64_t n_classes,
                             const std::vector<std::int64_t>& gt_frame, std::int64_t phi_index);

// Minimum-cost perfect matching per frame.
struct FrameAssignment {
    std::vector<std::int64_t> slot_to_column;  // permutation over [0, Q)
    std::vector<std::int64_t> matched_class;   // class each slot must predict (phi included)
    double cost = 0.0;
};

// O(n^3) Kuhn-Munkres with potentials; deterministic scan order breaks ties.
std::vector<std::int64_t> hungarian_solve(const std::vector<double>& cost, std::int64_t n);
FrameAssignment hungarian_match(const CostMatrix& matrix);

enum class MatchScope { frame, video };

// Per-frame (or whole-video) optimal assignments for a Q*T x (classes+1)
// probability matrix against per-frame ground-truth sets.
struct SequenceAssignments {
    MatchScope scope = MatchScope::frame;
    std::int64_t queries_per_frame = 0;
    std::int64_t frames = 0;
    std::vector<FrameAssignment> per_frame;            // frame scope: one per frame
    std::vector<std::int64_t> matched_class_per_slot;  // always Q*T entries
    double total_cost = 0.0;
};

SequenceAssignments match_sequence(const Tensor& probs,
                                   const std::vector<std::vector<std::int64_t>>& gt_frames,
                                   std::int64_t queries_per_frame, std::int64_t phi_index,
                                   MatchScope scope = MatchScope::frame);

// Sum over all Q*T slots of cross entropy against the matched class. phi
// targets weigh phi_weight (1.0 unless configured otherwise); the assignment
// itself is a constant with respect to gradients.
Tensor hungarian_loss(const Tensor& logits, const SequenceAssignments& assignments,
                      std::int64_t phi_index, double phi_weight = 1.0);

Tensor total_loss(const Tensor& l_act, const Tensor& l_rel, const Tensor& l_vqa);

}  // namespace shgvqa
