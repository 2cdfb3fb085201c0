#pragma once

#include <string>
#include <vector>

namespace fastadapt {

struct BleuOptions {
  std::size_t max_n = 4;
  // Add-one smoothing of the n >= 2 precisions. Without it, orders that no
  // hypothesis is long enough to contain are left out of the mean.
  bool smoothing = true;
};

struct BleuStats {
  std::vector<std::size_t> matches;  // clipped n-gram matches per order
  std::vector<std::size_t> totals;   // hypothesis n-grams per order
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

// Corpus-level BLEU in [0, 100] with brevity penalty.
double bleu(const std::vector<std::vector<std::string>>& hypotheses,
            const std::vector<std::vector<std::string>>& references, const BleuOptions& opts = {});
double bleu(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references,
            const BleuOptions& opts = {});

BleuStats bleu_stats(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references,
                     std::size_t max_n);
double bleu_from_stats(const BleuStats& s, const BleuOptions& opts);

}  // namespace fastadapt
