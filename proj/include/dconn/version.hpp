#pragma once

namespace dconn {

inline constexpr const char *kToolVersion = "1.0.0";
inline constexpr int kLexiconFormatVersion = 1;
inline constexpr int kDatasetFormatVersion = 1;
inline constexpr int kDaCheckpointFormatVersion = 1; // DANN1
inline constexpr int kWordPairsFormatVersion = 1;    // WPOVR

} // namespace dconn
