#pragma once

#include <optional>
#include <string>
#include <vector>

#include "adaseg/checkpoint.hpp"
#include "adaseg/dpg.hpp"
#include "adaseg/metrics.hpp"
#include "adaseg/model.hpp"

namespace adaseg {

struct TestInstance {
    Tensor image;  // (C, *spatial)
    std::string instance_id;
    std::optional<ByteTensor> mask;  // scoring only; never read on the adaptation path
};

struct EpisodeResult {
    std::string instance_id;
    ByteTensor mask;  // predicted integer labels, (*spatial)
    Tensor probs;     // per-class probabilities, (K, *spatial)
    double wall_time_sec = 0;
    std::string code_fingerprint;
};

// One zero-shot episode: encode the instance's domain code with the frozen
// DPG, run a single adapted feed-forward (instance statistics), threshold.
// Neither checkpoint is modified; no gradient machinery is touched.
EpisodeResult adapt_and_segment(const Checkpoint& model, const Checkpoint& dpg,
                                const TestInstance& instance);

// Episodic evaluation: independent episodes over the test set (all instances
// must carry ground truth), scored through the shared eval path. The result
// is invariant to instance ordering.
DiceReport episodic_eval(const Checkpoint& model, const Checkpoint& dpg,
                         const std::vector<TestInstance>& test_set);

// Long-lived episode runner for callers amortizing network construction.
class EpisodicRunner {
public:
    EpisodicRunner(const Checkpoint& model, const Checkpoint& dpg);
    EpisodeResult run(const Tensor& image, const std::string& instance_id);

private:
    UNet net_;
    AutoEncoder dpg_;
    std::string dpg_fp_;
};

}  // namespace adaseg
