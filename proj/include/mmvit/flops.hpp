#pragma once

#include <string>
#include <vector>

#include "mmvit/model.hpp"

namespace mmvit {

// Analytic compute accounting. Costs shared by every variant — the q/k/v and
// output projections and the MLP — are counted once per layer as common
// costs; the per-stage entries then carry only what actually differs between
// variants: attention interactions (score products plus weighted sums over
// each query's true key set, CLS included) and the inter-window convolution
// kernels. One multiply-accumulate is two FLOPs.
struct StageCost {
    std::string name;          // embed | proj | <stage> | conv_* | mlp | head
    long long keys_per_query;  // field keys per field query; 0 for non-attention rows
    long long mas;             // multiply-accumulates across all layers
};

struct FlopsReport {
    std::string variant;
    std::string mca;                     // "-" for the unfactorized variants
    std::string complexity;              // per-query key-count terms, symbolic
    std::vector<long long> stage_cards;  // per-query cardinality per stage, execution order
    std::vector<StageCost> stages;
    long long total_mas = 0;
    long long total_flops = 0;  // 2 * total_mas
    long long params = 0;
};

FlopsReport count_flops(const ModelConfig& cfg);

// Closed-form parameter count; equals MmvitModel(cfg).params().scalar_count().
long long count_params(const ModelConfig& cfg);

// Serializes reports as CSV with a fixed header.
std::string flops_csv(const std::vector<FlopsReport>& reports);

}  // namespace mmvit
