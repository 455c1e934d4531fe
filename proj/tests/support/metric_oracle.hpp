#pragma once

#include <cmath>
#include <vector>

namespace dconn::support {

/// Brute-force scores: one pass over the items per class, integer counts,
/// no confusion matrix.
struct OracleScores {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::vector<double> f1;
    std::vector<std::vector<long>> confusion;
};

inline OracleScores oracle_scores(const std::vector<int> &pred, const std::vector<int> &gold, int k) {
    OracleScores s;
    long correct = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        correct += pred[i] == gold[i] ? 1 : 0;
    }
    s.accuracy = gold.empty() ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(gold.size());
    double sum = 0.0;
    for (int c = 0; c < k; ++c) {
        long tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < gold.size(); ++i) {
            tp += (pred[i] == c && gold[i] == c) ? 1 : 0;
            fp += (pred[i] == c && gold[i] != c) ? 1 : 0;
            fn += (pred[i] != c && gold[i] == c) ? 1 : 0;
        }
        const long denom = 2 * tp + fp + fn;
        const double f = denom == 0 ? 0.0 : 100.0 * 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
        s.f1.push_back(f);
        sum += f;
    }
    s.macro_f1 = k > 0 ? sum / k : 0.0;
    s.confusion.assign(static_cast<std::size_t>(k), std::vector<long>(static_cast<std::size_t>(k), 0));
    for (int g = 0; g < k; ++g) {
        for (int p = 0; p < k; ++p) {
            for (std::size_t i = 0; i < gold.size(); ++i) {
                s.confusion[static_cast<std::size_t>(g)][static_cast<std::size_t>(p)] +=
                    (gold[i] == g && pred[i] == p) ? 1 : 0;
            }
        }
    }
    return s;
}

/// Two decimals, exact halves to the even neighbour.
inline double oracle_round(double v) {
    const double x = v * 100.0;
    const double lo = std::floor(x);
    const double frac = x - lo;
    double r = lo;
    if (frac > 0.5 || (frac == 0.5 && std::fmod(lo, 2.0) != 0.0)) {
        r = lo + 1.0;
    }
    return r / 100.0;
}

} // namespace dconn::support
