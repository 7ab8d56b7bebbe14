#include "sfms/sampler.hpp"

#include <algorithm>

namespace sfms::sampler {

// P(unordered set S) = sum over the K! orderings of S of the product of
// sequential softmax-without-replacement factors.
std::map<std::vector<int>, double> topk_set_probabilities(const std::vector<double>& logits,
                                                          int K) {
    int T = static_cast<int>(logits.size());
    if (K < 1 || K > T) throw ValidationError("topk_set_probabilities: need 1 <= K <= T");
    if (T > 12 || K > 4)
        throw CapacityError("topk_set_probabilities: enumeration guard is T <= 12, K <= 4");

    double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> e(T);
    double Z = 0;
    for (int i = 0; i < T; ++i) {
        e[i] = std::exp(logits[i] - mx);
        Z += e[i];
    }

    std::map<std::vector<int>, double> probs;
    std::vector<int> subset(K);
    // Iterate K-combinations of {0..T-1} in lexicographic order.
    for (int i = 0; i < K; ++i) subset[i] = i;
    while (true) {
        std::vector<int> perm = subset;
        double p_set = 0;
        do {
            double p = 1, rem = Z;
            for (int idx : perm) {
                p *= e[idx] / rem;
                rem -= e[idx];
            }
            p_set += p;
        } while (std::next_permutation(perm.begin(), perm.end()));
        probs[subset] = p_set;

        int i = K - 1;
        while (i >= 0 && subset[i] == T - K + i) --i;
        if (i < 0) break;
        ++subset[i];
        for (int j = i + 1; j < K; ++j) subset[j] = subset[j - 1] + 1;
    }
    return probs;
}

}  // namespace sfms::sampler
