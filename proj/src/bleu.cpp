#include "fastadapt/bleu.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <unordered_map>

namespace fastadapt {

namespace {

using NgramCounts = std::map<std::vector<int>, std::size_t>;

NgramCounts count_ngrams(const std::vector<int>& s, std::size_t n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[std::vector<int>(s.begin() + i, s.begin() + i + n)];
  return counts;
}

void check_sizes(std::size_t hyps, std::size_t refs, std::size_t max_n) {
  if (hyps == 0) throw std::invalid_argument("bleu: no hypotheses");
  if (hyps != refs) {
    throw std::invalid_argument("bleu: " + std::to_string(hyps) + " hypotheses vs " + std::to_string(refs) +
                                " references");
  }
  if (max_n == 0) throw std::invalid_argument("bleu: max_n must be >= 1");
}

}  // namespace

BleuStats bleu_stats(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references,
                     std::size_t max_n) {
  check_sizes(hypotheses.size(), references.size(), max_n);
  BleuStats s;
  s.matches.assign(max_n, 0);
  s.totals.assign(max_n, 0);
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto& h = hypotheses[i];
    const auto& r = references[i];
    s.hyp_length += h.size();
    s.ref_length += r.size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      NgramCounts hc = count_ngrams(h, n), rc = count_ngrams(r, n);
      for (const auto& [gram, c] : hc) {
        auto it = rc.find(gram);
        if (it != rc.end()) s.matches[n - 1] += std::min(c, it->second);
        s.totals[n - 1] += c;
      }
    }
  }
  return s;
}

double bleu_from_stats(const BleuStats& s, const BleuOptions& opts) {
  if (s.hyp_length == 0) return 0.0;
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 1; n <= s.matches.size(); ++n) {
    double m = static_cast<double>(s.matches[n - 1]);
    double c = static_cast<double>(s.totals[n - 1]);
    if (opts.smoothing && n >= 2) {
      m += 1.0;
      c += 1.0;
    } else if (c == 0.0) {
      continue;
    }
    if (m == 0.0) return 0.0;
    log_sum += std::log(m / c);
    ++orders;
  }
  double bp = 1.0;
  if (s.hyp_length < s.ref_length) {
    bp = std::exp(1.0 - static_cast<double>(s.ref_length) / static_cast<double>(s.hyp_length));
  }
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(orders));
}

double bleu(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references,
            const BleuOptions& opts) {
  return bleu_from_stats(bleu_stats(hypotheses, references, opts.max_n), opts);
}

double bleu(const std::vector<std::vector<std::string>>& hypotheses,
            const std::vector<std::vector<std::string>>& references, const BleuOptions& opts) {
  check_sizes(hypotheses.size(), references.size(), opts.max_n);
  std::unordered_map<std::string, int> ids;
  auto encode = [&](const std::vector<std::vector<std::string>>& in) {
    std::vector<std::vector<int>> out;
    out.reserve(in.size());
    for (const auto& sent : in) {
      std::vector<int> row;
      row.reserve(sent.size());
      for (const auto& tok : sent) row.push_back(ids.emplace(tok, static_cast<int>(ids.size())).first->second);
      out.push_back(std::move(row));
    }
    return out;
  };
  auto h = encode(hypotheses);
  auto r = encode(references);
  return bleu(h, r, opts);
}

}  // namespace fastadapt
