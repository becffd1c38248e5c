#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "treebias/errors.hpp"
#include "treebias/rng.hpp"

namespace treebias {

enum class EditOp { Match, Substitute, Delete, Insert };

// One alignment step; ref_index / hyp_index is -1 on the side the op skips.
struct EditStep {
  EditOp op;
  int ref_index = -1;
  int hyp_index = -1;
};

struct EditAlignment {
  std::vector<EditStep> steps;
  int cost = 0;
};

using Words = std::vector<std::string>;

// Minimal-cost word alignment (unit costs). Among minimal alignments the
// backtrace from the end prefers Match > Substitute > Delete > Insert at
// every cell; this tie-break is normative because rare-word attribution
// depends on which minimal alignment is chosen.
inline EditAlignment align_words(const Words& ref, const Words& hyp) {
  const int nr = static_cast<int>(ref.size());
  const int nh = static_cast<int>(hyp.size());
  std::vector<std::vector<int>> dp(nr + 1, std::vector<int>(nh + 1, 0));
  for (int i = 0; i <= nr; ++i) dp[i][0] = i;
  for (int j = 0; j <= nh; ++j) dp[0][j] = j;
  for (int i = 1; i <= nr; ++i) {
    for (int j = 1; j <= nh; ++j) {
      const int diag = dp[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      dp[i][j] = std::min({diag, dp[i - 1][j] + 1, dp[i][j - 1] + 1});
    }
  }

  EditAlignment out;
  out.cost = dp[nr][nh];
  int i = nr, j = nh;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && ref[i - 1] == hyp[j - 1] && dp[i][j] == dp[i - 1][j - 1]) {
      out.steps.push_back({EditOp::Match, i - 1, j - 1});
      --i, --j;
    } else if (i > 0 && j > 0 && dp[i][j] == dp[i - 1][j - 1] + 1) {
      out.steps.push_back({EditOp::Substitute, i - 1, j - 1});
      --i, --j;
    } else if (i > 0 && dp[i][j] == dp[i - 1][j] + 1) {
      out.steps.push_back({EditOp::Delete, i - 1, -1});
      --i;
    } else {
      out.steps.push_back({EditOp::Insert, -1, j - 1});
      --j;
    }
  }
  std::reverse(out.steps.begin(), out.steps.end());
  return out;
}

struct ErrorCounts {
  int matches = 0;
  int substitutions = 0;
  int deletions = 0;
  int insertions = 0;

  int errors() const { return substitutions + deletions + insertions; }
};

// Rate plus counts; `defined` is false when the denominator is zero while
// errors exist (rate then reads +inf and must not be averaged).
struct ScoreResult {
  ErrorCounts counts;
  int denominator = 0;
  double rate = 0.0;
  bool defined = true;
};

inline ErrorCounts count_ops(const EditAlignment& a) {
  ErrorCounts c;
  for (const auto& s : a.steps) {
    switch (s.op) {
      case EditOp::Match: ++c.matches; break;
      case EditOp::Substitute: ++c.substitutions; break;
      case EditOp::Delete: ++c.deletions; break;
      case EditOp::Insert: ++c.insertions; break;
    }
  }
  return c;
}

inline ScoreResult rate_from(const ErrorCounts& c, int denominator) {
  ScoreResult r;
  r.counts = c;
  r.denominator = denominator;
  if (denominator > 0) {
    r.rate = static_cast<double>(c.errors()) / denominator;
  } else if (c.errors() == 0) {
    r.rate = 0.0;
  } else {
    r.rate = std::numeric_limits<double>::infinity();
    r.defined = false;
  }
  return r;
}

inline ScoreResult wer(const Words& ref, const Words& hyp) {
  return rate_from(count_ops(align_words(ref, hyp)), static_cast<int>(ref.size()));
}

// Rare-word error rate over the same minimal alignment as wer: substitutions
// and deletions count when the reference word is in the biasing set,
// insertions when the inserted hypothesis word is; the denominator is the
// number of reference words in the set. A zero denominator always yields an
// undefined rate, even when no rare errors occurred.
inline ScoreResult rwer(const Words& ref, const Words& hyp,
                        const std::set<std::string>& biasing_words) {
  const EditAlignment a = align_words(ref, hyp);
  ErrorCounts c;
  for (const auto& s : a.steps) {
    switch (s.op) {
      case EditOp::Match:
        if (biasing_words.count(ref[s.ref_index])) ++c.matches;
        break;
      case EditOp::Substitute:
        if (biasing_words.count(ref[s.ref_index])) ++c.substitutions;
        break;
      case EditOp::Delete:
        if (biasing_words.count(ref[s.ref_index])) ++c.deletions;
        break;
      case EditOp::Insert:
        if (biasing_words.count(hyp[s.hyp_index])) ++c.insertions;
        break;
    }
  }
  int denom = 0;
  for (const auto& w : ref) {
    if (biasing_words.count(w)) ++denom;
  }
  ScoreResult r = rate_from(c, denom);
  if (denom == 0) r.defined = false;
  return r;
}

// Aggregate scoring over a corpus: counts and denominators pool across
// utterances before the division.
struct CorpusScore {
  ScoreResult word;
  ScoreResult rare;
};

inline CorpusScore score_corpus(const std::vector<Words>& refs, const std::vector<Words>& hyps,
                                const std::set<std::string>& biasing_words) {
  if (refs.size() != hyps.size()) throw ShapeError("reference/hypothesis utterance counts differ");
  ErrorCounts wc, rc;
  int wden = 0, rden = 0;
  for (size_t u = 0; u < refs.size(); ++u) {
    const ScoreResult w = wer(refs[u], hyps[u]);
    const ScoreResult r = rwer(refs[u], hyps[u], biasing_words);
    wc.matches += w.counts.matches;
    wc.substitutions += w.counts.substitutions;
    wc.deletions += w.counts.deletions;
    wc.insertions += w.counts.insertions;
    wden += w.denominator;
    rc.matches += r.counts.matches;
    rc.substitutions += r.counts.substitutions;
    rc.deletions += r.counts.deletions;
    rc.insertions += r.counts.insertions;
    rden += r.denominator;
  }
  CorpusScore s;
  s.word = rate_from(wc, wden);
  s.rare = rate_from(rc, rden);
  if (rden == 0) s.rare.defined = false;
  return s;
}

struct BiasingListBuild {
  std::vector<std::string> words;  // sorted, unique
  bool pool_exhausted = false;     // pool had fewer candidates than requested
};

// Biasing list for one utterance: its rare reference words (those outside the
// top_k most common) plus n_distractors sampled from the pool, seeded. The
// result is a sorted set, so reference word order never matters.
inline BiasingListBuild build_biasing_list(const Words& reference,
                                           const std::vector<std::string>& common_ranked,
                                           int top_k, const std::vector<std::string>& pool,
                                           int n_distractors, uint64_t seed) {
  std::set<std::string> common;
  for (int i = 0; i < top_k && i < static_cast<int>(common_ranked.size()); ++i) {
    common.insert(common_ranked[i]);
  }
  std::set<std::string> rare;
  for (const auto& w : reference) {
    if (!common.count(w)) rare.insert(w);
  }
  std::set<std::string> candidates(pool.begin(), pool.end());
  for (const auto& w : rare) candidates.erase(w);
  std::vector<std::string> cand_sorted(candidates.begin(), candidates.end());

  BiasingListBuild out;
  std::set<std::string> list = rare;
  if (static_cast<int>(cand_sorted.size()) <= n_distractors) {
    out.pool_exhausted = static_cast<int>(cand_sorted.size()) < n_distractors;
    list.insert(cand_sorted.begin(), cand_sorted.end());
  } else {
    Rng rng(seed);
    for (int idx : rng.sample_indices(static_cast<int>(cand_sorted.size()), n_distractors)) {
      list.insert(cand_sorted[idx]);
    }
  }
  out.words.assign(list.begin(), list.end());
  return out;
}

}  // namespace treebias
