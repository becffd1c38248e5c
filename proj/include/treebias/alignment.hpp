#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "treebias/errors.hpp"
#include "treebias/io.hpp"
#include "treebias/lexicon.hpp"
#include "treebias/linalg.hpp"
#include "treebias/text.hpp"
#include "treebias/tokenizer.hpp"

namespace treebias {

enum class AlignKind { Soft, Hard };

// Character-to-phoneme alignment A_c2p, shape l_c x l_p. Every phoneme
// column distributes its unit mass over characters; hard alignments are
// binary with one character per phoneme and monotone column-to-row order.
struct AlignmentMatrix {
  Matrix weights;
  AlignKind kind = AlignKind::Soft;

  int rows() const { return static_cast<int>(weights.rows()); }
  int cols() const { return static_cast<int>(weights.cols()); }
};

inline void validate_alignment(const AlignmentMatrix& a, double col_tol = 1e-6) {
  int prev_row = -1;
  for (int j = 0; j < a.cols(); ++j) {
    double sum = 0.0;
    int assigned_row = -1;
    int ones = 0;
    for (int i = 0; i < a.rows(); ++i) {
      const double v = a.weights(i, j);
      if (!std::isfinite(v) || v < 0.0 || v > 1.0 + 1e-12) {
        throw NotColumnStochastic("alignment entry out of [0,1] at (" +
                                  std::to_string(i) + "," + std::to_string(j) + ")");
      }
      sum += v;
      if (a.kind == AlignKind::Hard && v != 0.0) {
        if (v != 1.0) throw InvariantBreach("hard alignment entry not in {0,1}");
        ++ones;
        assigned_row = i;
      }
    }
    if (std::abs(sum - 1.0) > col_tol) {
      throw NotColumnStochastic("alignment column " + std::to_string(j) +
                                " sums to " + std::to_string(sum));
    }
    if (a.kind == AlignKind::Hard) {
      if (ones != 1) throw InvariantBreach("hard alignment column without unique 1");
      if (assigned_row < prev_row) throw InvariantBreach("hard alignment not monotonic");
      prev_row = assigned_row;
    }
  }
}

// A paired grapheme/phoneme chunk of the joint multigram model.
// The phoneme side may be empty (silent letters); the grapheme side may not.
struct ChunkPair {
  std::u32string graphemes;
  std::vector<int> phonemes;

  bool operator<(const ChunkPair& o) const {
    if (graphemes != o.graphemes) return graphemes < o.graphemes;
    return phonemes < o.phonemes;
  }
  bool operator==(const ChunkPair& o) const {
    return graphemes == o.graphemes && phonemes == o.phonemes;
  }
};

struct MultigramModel {
  std::map<ChunkPair, double> chunk_probs;
  int max_g = 2;
  int max_p = 2;

  double prob(const ChunkPair& c) const {
    auto it = chunk_probs.find(c);
    return it == chunk_probs.end() ? 0.0 : it->second;
  }
};

namespace detail {

constexpr double kProbFloor = 1e-12;
constexpr double kPruneThreshold = 1e-6;

// Structural reachability over the segmentation lattice of one entry:
// node (i, j) = i characters and j phonemes consumed. Edges consume
// 1..max_g graphemes and 0..max_p phonemes.
struct Lattice {
  int lc = 0, lp = 0;
  std::vector<char> fwd, bwd;  // (lc+1) x (lp+1), complete-path reachability

  bool at(const std::vector<char>& m, int i, int j) const {
    return m[static_cast<size_t>(i) * (lp + 1) + j] != 0;
  }
  bool on_path(int i, int j) const { return at(fwd, i, j) && at(bwd, i, j); }
};

inline Lattice build_lattice(const LexiconEntry& e, int max_g, int max_p) {
  Lattice lat;
  lat.lc = e.num_chars();
  lat.lp = e.num_phonemes();
  const int W = lat.lp + 1;
  lat.fwd.assign(static_cast<size_t>(lat.lc + 1) * W, 0);
  lat.bwd.assign(static_cast<size_t>(lat.lc + 1) * W, 0);
  lat.fwd[0] = 1;
  for (int i = 0; i <= lat.lc; ++i) {
    for (int j = 0; j <= lat.lp; ++j) {
      if (!lat.fwd[static_cast<size_t>(i) * W + j]) continue;
      for (int g = 1; g <= max_g && i + g <= lat.lc; ++g) {
        for (int p = 0; p <= max_p && j + p <= lat.lp; ++p) {
          lat.fwd[static_cast<size_t>(i + g) * W + (j + p)] = 1;
        }
      }
    }
  }
  lat.bwd[static_cast<size_t>(lat.lc) * W + lat.lp] = 1;
  for (int i = lat.lc; i >= 0; --i) {
    for (int j = lat.lp; j >= 0; --j) {
      if (lat.bwd[static_cast<size_t>(i) * W + j]) continue;
      bool ok = false;
      for (int g = 1; g <= max_g && i + g <= lat.lc && !ok; ++g) {
        for (int p = 0; p <= max_p && j + p <= lat.lp && !ok; ++p) {
          if (lat.bwd[static_cast<size_t>(i + g) * W + (j + p)]) ok = true;
        }
      }
      if (ok) lat.bwd[static_cast<size_t>(i) * W + j] = 1;
    }
  }
  return lat;
}

inline ChunkPair make_chunk(const LexiconEntry& e, int i, int j, int g, int p) {
  ChunkPair c;
  c.graphemes = e.chars.substr(i, g);
  c.phonemes.assign(e.phonemes.begin() + j, e.phonemes.begin() + j + p);
  return c;
}

}  // namespace detail

// Uniform model over all chunk pairs appearing on some complete lattice path
// of some entry. Deterministic and seed-free.
inline MultigramModel init_multigram(const Lexicon& lexicon, int max_g, int max_p) {
  if (lexicon.empty()) throw EmptyInput("cannot train aligner on empty lexicon");
  if (max_g < 1 || max_p < 1) throw Error("chunk limits must be at least 1");
  MultigramModel model;
  model.max_g = max_g;
  model.max_p = max_p;
  for (const auto& [word, entry] : lexicon) {
    const auto lat = detail::build_lattice(entry, max_g, max_p);
    if (!lat.on_path(0, 0)) {
      throw UnalignableEntry("no alignment lattice path for word: " + word);
    }
    for (int i = 0; i < lat.lc; ++i) {
      for (int j = 0; j <= lat.lp; ++j) {
        if (!lat.at(lat.fwd, i, j)) continue;
        for (int g = 1; g <= max_g && i + g <= lat.lc; ++g) {
          for (int p = 0; p <= max_p && j + p <= lat.lp; ++p) {
            if (lat.at(lat.bwd, i + g, j + p)) {
              model.chunk_probs[detail::make_chunk(entry, i, j, g, p)] = 1.0;
            }
          }
        }
      }
    }
  }
  const double uniform = 1.0 / static_cast<double>(model.chunk_probs.size());
  for (auto& [chunk, prob] : model.chunk_probs) prob = uniform;
  return model;
}

struct EmTrainResult {
  MultigramModel model;
  std::vector<double> loglik_trace;  // one entry per E-step
  int iterations = 0;
};

// EM over monotonic segmentation lattices. The E-step runs forwardbackward
// per entry with the current chunk probabilities; the M-step renormalizes
// expected counts into a joint chunk distribution. Chunks falling below the
// prune threshold are dropped between iterations.
inline EmTrainResult train_em_aligner(const Lexicon& lexicon, int max_g, int max_p,
                                      int max_iters, double tol) {
  EmTrainResult result;
  result.model = init_multigram(lexicon, max_g, max_p);
  MultigramModel& model = result.model;

  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_iters; ++iter) {
    std::map<ChunkPair, double> counts;
    double ll = 0.0;
    for (const auto& [word, entry] : lexicon) {
      const int lc = entry.num_chars();
      const int lp = entry.num_phonemes();
      const int W = lp + 1;
      std::vector<double> alpha(static_cast<size_t>(lc + 1) * W, 0.0);
      std::vector<double> beta(static_cast<size_t>(lc + 1) * W, 0.0);
      alpha[0] = 1.0;
      for (int i = 0; i <= lc; ++i) {
        for (int j = 0; j <= lp; ++j) {
          const double a = alpha[static_cast<size_t>(i) * W + j];
          if (a == 0.0) continue;
          for (int g = 1; g <= max_g && i + g <= lc; ++g) {
            for (int p = 0; p <= max_p && j + p <= lp; ++p) {
              const double w = model.prob(detail::make_chunk(entry, i, j, g, p));
              if (w > 0.0) {
                alpha[static_cast<size_t>(i + g) * W + (j + p)] += a * w;
              }
            }
          }
        }
      }
      const double z = alpha[static_cast<size_t>(lc) * W + lp];
      if (!std::isfinite(z)) throw NumericalError("non-finite lattice sum for: " + word);
      if (z <= 0.0) throw NumericalError("vanished lattice sum for: " + word);
      ll += std::log(std::max(z, detail::kProbFloor));

      beta[static_cast<size_t>(lc) * W + lp] = 1.0;
      for (int i = lc; i >= 0; --i) {
        for (int j = lp; j >= 0; --j) {
          for (int g = 1; g <= max_g && i + g <= lc; ++g) {
            for (int p = 0; p <= max_p && j + p <= lp; ++p) {
              const auto chunk = detail::make_chunk(entry, i, j, g, p);
              const double w = model.prob(chunk);
              if (w == 0.0) continue;
              beta[static_cast<size_t>(i) * W + j] +=
                  w * beta[static_cast<size_t>(i + g) * W + (j + p)];
            }
          }
        }
      }
      // expected chunk counts: alpha(i,j) * w * beta(i+g,j+p) / Z
      for (int i = 0; i <= lc; ++i) {
        for (int j = 0; j <= lp; ++j) {
          const double a = alpha[static_cast<size_t>(i) * W + j];
          if (a == 0.0) continue;
          for (int g = 1; g <= max_g && i + g <= lc; ++g) {
            for (int p = 0; p <= max_p && j + p <= lp; ++p) {
              const auto chunk = detail::make_chunk(entry, i, j, g, p);
              const double w = model.prob(chunk);
              if (w == 0.0) continue;
              const double occ = a * w * beta[static_cast<size_t>(i + g) * W + (j + p)] / z;
              if (occ > 0.0) counts[chunk] += occ;
            }
          }
        }
      }
    }
    if (!std::isfinite(ll)) throw NumericalError("non-finite log-likelihood");
    result.loglik_trace.push_back(ll);
    result.iterations = iter + 1;

    double total = 0.0;
    for (const auto& [chunk, c] : counts) total += c;
    if (total <= 0.0) throw NumericalError("vanished expected counts");
    std::map<ChunkPair, double> next;
    double kept = 0.0;
    for (const auto& [chunk, c] : counts) {
      const double p = c / total;
      if (p >= detail::kPruneThreshold) {
        next[chunk] = p;
        kept += p;
      }
    }
    if (next.empty() || kept <= 0.0) throw NumericalError("all chunks pruned");
    for (auto& [chunk, p] : next) p /= kept;
    model.chunk_probs = std::move(next);

    if (ll - prev_ll < tol && iter > 0) break;
    prev_ll = ll;
  }
  return result;
}

struct ViterbiStep {
  ChunkPair chunk;
  int char_offset = 0;
  int phoneme_offset = 0;
};

struct ViterbiPath {
  std::vector<ViterbiStep> steps;
  double log_score = 0.0;
};

// Best-scoring monotonic chunk path. Ties prefer the path whose first
// differing chunk has the shorter grapheme side (then shorter phoneme side).
inline ViterbiPath viterbi_path(const MultigramModel& model, const LexiconEntry& entry) {
  const int lc = entry.num_chars();
  const int lp = entry.num_phonemes();
  const int W = lp + 1;
  const double neg_inf = -std::numeric_limits<double>::infinity();
  std::vector<double> score(static_cast<size_t>(lc + 1) * W, neg_inf);
  std::vector<std::pair<int, int>> choice(static_cast<size_t>(lc + 1) * W, {-1, -1});
  score[static_cast<size_t>(lc) * W + lp] = 0.0;

  // Suffix DP so that path reconstruction from (0,0) realizes the
  // first-differing-chunk tie-break.
  for (int i = lc; i >= 0; --i) {
    for (int j = lp; j >= 0; --j) {
      if (i == lc && j == lp) continue;
      double best = neg_inf;
      std::pair<int, int> best_edge{-1, -1};
      for (int g = 1; g <= model.max_g && i + g <= lc; ++g) {
        for (int p = 0; p <= model.max_p && j + p <= lp; ++p) {
          const double w = model.prob(detail::make_chunk(entry, i, j, g, p));
          if (w <= 0.0) continue;
          const double s = std::log(w) + score[static_cast<size_t>(i + g) * W + (j + p)];
          if (s > best) {
            best = s;
            best_edge = {g, p};
          }
        }
      }
      score[static_cast<size_t>(i) * W + j] = best;
      choice[static_cast<size_t>(i) * W + j] = best_edge;
    }
  }
  if (score[0] == neg_inf) {
    throw UnalignableEntry("no Viterbi path for word: " + entry.word);
  }

  ViterbiPath path;
  path.log_score = score[0];
  int i = 0, j = 0;
  while (i != lc || j != lp) {
    const auto [g, p] = choice[static_cast<size_t>(i) * W + j];
    if (g < 0) throw InvariantBreach("broken Viterbi backpointer");
    path.steps.push_back({detail::make_chunk(entry, i, j, g, p), i, j});
    i += g;
    j += p;
  }
  return path;
}

// Expands a chunk path into a binary l_c x l_p matrix. Within a chunk of
// g characters and p phonemes, phoneme q maps to chunk character min(q, g-1).
inline AlignmentMatrix viterbi_align(const MultigramModel& model, const LexiconEntry& entry) {
  const auto path = viterbi_path(model, entry);
  AlignmentMatrix a;
  a.kind = AlignKind::Hard;
  a.weights = Matrix::Zero(entry.num_chars(), entry.num_phonemes());
  for (const auto& step : path.steps) {
    const int g = static_cast<int>(step.chunk.graphemes.size());
    const int p = static_cast<int>(step.chunk.phonemes.size());
    for (int q = 0; q < p; ++q) {
      a.weights(step.char_offset + std::min(q, g - 1), step.phoneme_offset + q) = 1.0;
    }
  }
  validate_alignment(a);
  return a;
}

// --- alignment file I/O -----------------------------------------------------
//
// Alignment file: JSON object or array of objects
//   {"word": str, "rows": l_c, "cols": l_p, "data": row-major reals,
//    "kind": "soft"|"hard" (optional, default soft)}

inline AlignmentMatrix alignment_from_json(const nlohmann::json& obj,
                                           const LexiconEntry& entry) {
  if (!obj.contains("rows") || !obj.contains("cols") || !obj.contains("data")) {
    throw ParseError("alignment object missing rows/cols/data");
  }
  const int rows = obj["rows"].get<int>();
  const int cols = obj["cols"].get<int>();
  if (rows != entry.num_chars() || cols != entry.num_phonemes()) {
    throw ShapeError("alignment for '" + entry.word + "' has shape " +
                     std::to_string(rows) + "x" + std::to_string(cols) + ", expected " +
                     std::to_string(entry.num_chars()) + "x" +
                     std::to_string(entry.num_phonemes()));
  }
  const auto& data = obj["data"];
  if (static_cast<int>(data.size()) != rows * cols) {
    throw ShapeError("alignment data length mismatch for '" + entry.word + "'");
  }
  AlignmentMatrix a;
  a.kind = (obj.value("kind", "soft") == "hard") ? AlignKind::Hard : AlignKind::Soft;
  a.weights.resize(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      a.weights(i, j) = data[static_cast<size_t>(i) * cols + j].get<double>();
    }
  }
  if (a.kind == AlignKind::Soft) {
    for (int j = 0; j < cols; ++j) {
      double sum = 0.0;
      for (int i = 0; i < rows; ++i) {
        const double v = a.weights(i, j);
        if (!std::isfinite(v) || v < 0.0 || v > 1.0 + 1e-3) {
          throw NotColumnStochastic("entry out of range in column " + std::to_string(j) +
                                    " for '" + entry.word + "'");
        }
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-3) {
        throw NotColumnStochastic("column " + std::to_string(j) + " of '" + entry.word +
                                  "' sums to " + std::to_string(sum));
      }
      for (int i = 0; i < rows; ++i) a.weights(i, j) /= sum;
    }
  }
  validate_alignment(a);
  return a;
}

inline nlohmann::json alignment_to_json(const std::string& word, const AlignmentMatrix& a) {
  nlohmann::json obj;
  obj["word"] = word;
  obj["rows"] = a.rows();
  obj["cols"] = a.cols();
  obj["kind"] = (a.kind == AlignKind::Hard) ? "hard" : "soft";
  std::vector<double> data;
  data.reserve(static_cast<size_t>(a.rows()) * a.cols());
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < a.cols(); ++j) data.push_back(a.weights(i, j));
  }
  obj["data"] = data;
  return obj;
}

// Loads the soft alignment for one entry from a file holding one object or
// an array of objects keyed by "word".
inline AlignmentMatrix load_soft_alignment(const std::string& path,
                                           const LexiconEntry& entry) {
  const auto j = load_json_file(path);
  if (j.is_object()) {
    if (j.value("word", "") != entry.word) {
      throw MissingAlignment("file " + path + " has no alignment for '" + entry.word + "'");
    }
    return alignment_from_json(j, entry);
  }
  if (j.is_array()) {
    for (const auto& obj : j) {
      if (obj.value("word", "") == entry.word) return alignment_from_json(obj, entry);
    }
  }
  throw MissingAlignment("file " + path + " has no alignment for '" + entry.word + "'");
}

// --- subword-to-character matrices -------------------------------------------

// Binary l_s x l_c matrix from a segmentation's character spans.
inline Matrix subword_char_matrix(const LexiconEntry& entry, const Segmentation& seg) {
  const int lc = entry.num_chars();
  const int ls = seg.length();
  if (ls == 0) throw InvalidSegmentation("empty segmentation for '" + entry.word + "'");
  Matrix m = Matrix::Zero(ls, lc);
  int expected = 0;
  for (int s = 0; s < ls; ++s) {
    const auto [lo, hi] = seg.char_spans[s];
    if (lo != expected || hi <= lo || hi > lc) {
      throw InvalidSegmentation("spans do not partition characters of '" + entry.word +
                                "' (span " + std::to_string(s) + ")");
    }
    for (int c = lo; c < hi; ++c) m(s, c) = 1.0;
    expected = hi;
  }
  if (expected != lc) {
    throw InvalidSegmentation("spans leave a gap at the end of '" + entry.word + "'");
  }
  return m;
}

// --- multigram model I/O ------------------------------------------------------
//
// Model file: {"max_g": int, "max_p": int,
//              "chunks": {"<graphemes>|<ph1 ph2>": prob, ...}}

inline std::string chunk_key(const ChunkPair& c, const PhonemeInventory& inv) {
  std::string key = utf8_encode(c.graphemes);
  key.push_back('|');
  for (size_t i = 0; i < c.phonemes.size(); ++i) {
    if (i) key.push_back(' ');
    key += inv.symbols[c.phonemes[i]];
  }
  return key;
}

inline void save_multigram(const std::string& path, const MultigramModel& model,
                           const PhonemeInventory& inv) {
  nlohmann::json j;
  j["max_g"] = model.max_g;
  j["max_p"] = model.max_p;
  nlohmann::json chunks = nlohmann::json::object();
  for (const auto& [chunk, prob] : model.chunk_probs) {
    chunks[chunk_key(chunk, inv)] = prob;
  }
  j["chunks"] = std::move(chunks);
  save_json_file(path, j);
}

inline MultigramModel load_multigram(const std::string& path, const PhonemeInventory& inv) {
  const auto j = load_json_file(path);
  MultigramModel model;
  model.max_g = j.at("max_g").get<int>();
  model.max_p = j.at("max_p").get<int>();
  for (const auto& [key, prob] : j.at("chunks").items()) {
    const auto bar = key.find('|');
    if (bar == std::string::npos) throw ParseError("bad chunk key: " + key);
    ChunkPair c;
    c.graphemes = utf8_decode(key.substr(0, bar));
    for (const auto& sym : detail::split_ws(key.substr(bar + 1))) {
      const int id = inv.id_of(sym);
      if (id <= 0) throw UnknownPhoneme("chunk key has unknown phoneme: " + sym);
      c.phonemes.push_back(id);
    }
    model.chunk_probs[c] = prob.get<double>();
  }
  return model;
}

}  // namespace treebias
