#pragma once

#include "adaseg/infer.hpp"

namespace adaseg {

struct TentConfig {
    long shots = 1;  // adaptation epochs over the test distribution
    real lr = 1e-3;
    long batch_size = 8;

    void validate() const;
    nlohmann::json to_json() const;
    static TentConfig from_json(const nlohmann::json& j);
};

// Mean Shannon entropy -sum p log p per pixel. probs is (B, K, *spatial) with
// rows summing to 1 over K; a single channel is read as binary p vs 1-p.
real entropy_loss(const Tensor& probs);

// Entropy of softmax(logits) and its gradient (what TENT minimizes).
real entropy_of_logits(const Tensor& logits);
Tensor entropy_of_logits_grad(const Tensor& logits);

// Source-trained plain-BN model evaluated on the target with frozen running
// statistics; no adaptation of any kind.
DiceReport direct_test(const Checkpoint& plain_model, const std::vector<TestInstance>& test_set);

// Same scoring pass but with current-batch statistics (the lr=0 reduction of
// TENT, and TENT's own final scoring pass).
DiceReport batchstats_test(const Checkpoint& plain_model,
                           const std::vector<TestInstance>& test_set, long batch_size);

// TENT-style adaptation: `shots` epochs over the full test set minimizing
// prediction entropy with batch statistics, updating only BN gamma/beta.
// Deliberately violates the on-the-fly constraints; exists as the comparison
// condition.
std::pair<Checkpoint, DiceReport> tent_adapt(const Checkpoint& plain_model,
                                             const std::vector<TestInstance>& test_set,
                                             const TentConfig& cfg);

// Mean prediction entropy over the test set under batch statistics (used to
// verify that adaptation actually lowered the objective).
real mean_test_entropy(const Checkpoint& plain_model, const std::vector<TestInstance>& test_set,
                       long batch_size);

}  // namespace adaseg
