#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "treebias/alignment.hpp"
#include "treebias/encoder.hpp"
#include "treebias/errors.hpp"
#include "treebias/gradients.hpp"
#include "treebias/head.hpp"
#include "treebias/lexicon.hpp"
#include "treebias/linalg.hpp"
#include "treebias/params.hpp"
#include "treebias/rng.hpp"
#include "treebias/tokenizer.hpp"
#include "treebias/trie.hpp"

namespace treebias {

// Stand-in for the acoustic encoder and joint network: fixed random feature
// tables keyed by subword id (row V = blank/non-emission). Shared across all
// utterances of a suite, so the head can learn consistent mappings from
// features to pieces.
struct MockWorld {
  int vocab_size = 0;
  Matrix sym_enc;    // (V+1) x d_enc
  Matrix sym_joint;  // (V+1) x d_joint
  uint64_t seed = 0;

  static MockWorld make(int vocab_size, int d_enc, int d_joint, uint64_t seed) {
    MockWorld w;
    w.vocab_size = vocab_size;
    w.seed = seed;
    Rng rng(seed);
    w.sym_enc.resize(vocab_size + 1, d_enc);
    detail::fill_uniform(w.sym_enc, rng, 1.0);
    w.sym_joint.resize(vocab_size + 1, d_joint);
    detail::fill_uniform(w.sym_joint, rng, 1.0);
    return w;
  }
};

// One reference word with everything synthesis needs: its segmentation,
// phoneme string and hard character-phoneme alignment.
struct RefWord {
  std::string word;
  Segmentation seg;
  std::vector<int> phonemes;
  AlignmentMatrix char_phon;
};

// Directed substitution noise: piece -> pieces that absorb its noise mass.
// Pieces absent from the map take uniform noise over all other pieces.
using ConfusionMap = std::map<int, std::vector<int>>;

// Synthetic utterance, one frame per reference piece. The mock model
// distribution at (t, u) depends only on the frame and on whether a symbol
// was already emitted in it, so there are two joint/posterior rows per frame:
// the emission slot (nothing emitted yet) and the continuation slot.
struct MockUtterance {
  std::vector<std::string> ref_words;
  std::vector<int> reference_pieces;  // length T
  std::vector<int> frame_word;        // word index per frame
  Matrix h_enc;                       // T x d_enc
  Matrix h_joint_emit;                // T x d_joint
  Matrix h_joint_cont;                // T x d_joint
  Matrix rnnt_emit;                   // T x (V+1), blank column = V
  Matrix rnnt_cont;                   // T x (V+1)
  Matrix ctc;                         // T x inventory, blank column = 0
  uint64_t seed = 0;

  int frames() const { return static_cast<int>(reference_pieces.size()); }
};

namespace detail {

// Phoneme aligned to piece j of a word: the first phoneme whose assigned
// character (from the hard alignment) lies in the piece's span; uniform
// stretch over the word's pieces as fallback.
inline int piece_phoneme(const RefWord& w, int j) {
  const int l_p = static_cast<int>(w.phonemes.size());
  if (l_p == 0) return -1;
  const auto [lo, hi] = w.seg.char_spans[j];
  for (int q = 0; q < l_p; ++q) {
    int row;
    w.char_phon.weights.col(q).maxCoeff(&row);
    if (row >= lo && row < hi) return w.phonemes[q];
  }
  return w.phonemes[(j * l_p) / w.seg.length()];
}

}  // namespace detail

inline MockUtterance synthesize_utterance(const MockWorld& world,
                                          const std::vector<RefWord>& words, int inventory_size,
                                          double noise, const ConfusionMap& confusion,
                                          uint64_t seed, double feature_jitter = 0.1) {
  if (words.empty()) throw EmptyInput("utterance has no words");
  if (!(noise >= 0.0 && noise < 1.0)) throw ParseError("noise level must lie in [0, 1)");
  const int v = world.vocab_size;
  for (const auto& [piece, alts] : confusion) {
    if (alts.empty()) throw InvalidConfusion("empty confusion set for piece " + std::to_string(piece));
    for (int a : alts) {
      if (a == piece) {
        throw InvalidConfusion("piece " + std::to_string(piece) + " confused with itself");
      }
      if (a < 0 || a >= v) throw InvalidConfusion("confusion target out of vocabulary");
    }
  }

  MockUtterance u;
  u.seed = seed;
  for (size_t w = 0; w < words.size(); ++w) {
    u.ref_words.push_back(words[w].word);
    for (int piece : words[w].seg.piece_ids) {
      u.reference_pieces.push_back(piece);
      u.frame_word.push_back(static_cast<int>(w));
    }
  }
  const int t_total = u.frames();
  const int d_enc = static_cast<int>(world.sym_enc.cols());
  const int d_joint = static_cast<int>(world.sym_joint.cols());
  u.h_enc.resize(t_total, d_enc);
  u.h_joint_emit.resize(t_total, d_joint);
  u.h_joint_cont.resize(t_total, d_joint);
  u.rnnt_emit = Matrix::Zero(t_total, v + 1);
  u.rnnt_cont = Matrix::Zero(t_total, v + 1);
  u.ctc = Matrix::Zero(t_total, inventory_size);

  Rng rng(seed);
  auto jitter_row = [&](Matrix& m, int row, const Matrix& table, int sym) {
    for (int c = 0; c < static_cast<int>(m.cols()); ++c) {
      m(row, c) = table(sym, c) + feature_jitter * rng.uniform(-1.0, 1.0);
    }
  };

  int frame = 0;
  for (const auto& word : words) {
    for (int j = 0; j < word.seg.length(); ++j, ++frame) {
      const int y = word.seg.piece_ids[j];
      jitter_row(u.h_enc, frame, world.sym_enc, y);
      jitter_row(u.h_joint_emit, frame, world.sym_joint, y);
      jitter_row(u.h_joint_cont, frame, world.sym_joint, v);

      // Emission slot: truth gets 1 - noise, the confusion set splits the rest.
      u.rnnt_emit(frame, y) = 1.0 - noise;
      if (noise > 0.0) {
        auto it = confusion.find(y);
        if (it != confusion.end()) {
          for (int a : it->second) {
            u.rnnt_emit(frame, a) += noise / static_cast<double>(it->second.size());
          }
        } else {
          for (int p = 0; p < v; ++p) {
            if (p != y) u.rnnt_emit(frame, p) += noise / static_cast<double>(v - 1);
          }
        }
      }
      u.rnnt_emit.row(frame) /= u.rnnt_emit.row(frame).sum();

      // Continuation slot: blank gets 1 - noise, the rest spreads uniformly.
      u.rnnt_cont(frame, v) = 1.0 - noise;
      if (noise > 0.0) {
        for (int p = 0; p < v; ++p) u.rnnt_cont(frame, p) = noise / static_cast<double>(v);
      }
      u.rnnt_cont.row(frame) /= u.rnnt_cont.row(frame).sum();

      // CTC posterior: mass on the frame's aligned phoneme, noise elsewhere.
      const int q = detail::piece_phoneme(word, j);
      if (q < 0) {
        u.ctc.row(frame).setConstant(1.0 / inventory_size);
      } else {
        u.ctc(frame, q) = 1.0 - noise;
        if (noise > 0.0) {
          for (int s = 0; s < inventory_size; ++s) {
            if (s != q) u.ctc(frame, s) = noise / static_cast<double>(inventory_size - 1);
          }
        }
        u.ctc.row(frame) /= u.ctc.row(frame).sum();
      }
    }
  }
  return u;
}

// Partial-word prefix update shared by decoding and teacher forcing: a
// boundary piece completes the word; a piece that walks off the tree resets
// the prefix so the next emission starts from the root again.
inline std::vector<int> advance_prefix(const PrefixTree& tree, const SubwordVocab& vocab,
                                       const std::vector<int>& prefix, int piece) {
  if (vocab.is_boundary_piece(piece)) return {};
  std::vector<int> next = prefix;
  next.push_back(piece);
  int cur = 0;
  for (int p : next) {
    cur = tree.step(cur, p);
    if (cur < 0) return {};
  }
  return next;
}

// Teacher-forced step sequence of an utterance: an emission step (target =
// the reference piece) then a continuation step (target = blank) per frame.
inline TrainUtterance make_train_utterance(const MockUtterance& utt, const PrefixTree& tree,
                                           const SubwordVocab& vocab, bool phoneme_query) {
  TrainUtterance tu;
  const int v = static_cast<int>(utt.rnnt_emit.cols()) - 1;
  std::vector<int> prefix;
  int prev = kStartOfSequence;
  for (int t = 0; t < utt.frames(); ++t) {
    const int y = utt.reference_pieces[t];
    TrainStep emit;
    emit.h_enc = utt.h_enc.row(t).transpose();
    emit.h_joint = utt.h_joint_emit.row(t).transpose();
    emit.model_probs = utt.rnnt_emit.row(t).transpose();
    if (phoneme_query) emit.ctc_posterior = utt.ctc.row(t).transpose();
    emit.prefix = prefix;
    emit.prev_piece = prev;
    emit.target = y;
    tu.steps.push_back(std::move(emit));

    prefix = advance_prefix(tree, vocab, prefix, y);
    prev = y;

    TrainStep cont;
    cont.h_enc = utt.h_enc.row(t).transpose();
    cont.h_joint = utt.h_joint_cont.row(t).transpose();
    cont.model_probs = utt.rnnt_cont.row(t).transpose();
    if (phoneme_query) cont.ctc_posterior = utt.ctc.row(t).transpose();
    cont.prefix = prefix;
    cont.prev_piece = prev;
    cont.target = v;  // blank
    tu.steps.push_back(std::move(cont));
  }
  return tu;
}

struct DecodeConfig {
  int beam = 4;
  int max_symbols_per_frame = 4;
  bool biasing_enabled = true;
  bool phoneme_query_enabled = false;
  // Test hook: run the full pointer path but gate it to zero; the output must
  // then match the unbiased decode bit for bit.
  bool force_pgen_zero = false;
};

struct DecodeResult {
  std::vector<int> pieces;
  double log_prob = 0.0;
};

namespace detail {

struct Hypothesis {
  std::vector<int> pieces;
  std::vector<int> prefix;
  int prev = kStartOfSequence;
  double logp = 0.0;
};

inline double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  if (m == -std::numeric_limits<double>::infinity()) return m;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// Merge identical piece sequences (summing probability over alignments),
// then keep the k best by log-probability; ties break on the lexicographically
// smaller piece sequence so decoding is deterministic.
inline std::vector<Hypothesis> prune_merge(std::vector<Hypothesis> cands, int k) {
  std::sort(cands.begin(), cands.end(),
            [](const Hypothesis& a, const Hypothesis& b) { return a.pieces < b.pieces; });
  std::vector<Hypothesis> merged;
  for (auto& h : cands) {
    if (!merged.empty() && merged.back().pieces == h.pieces) {
      merged.back().logp = log_sum_exp(merged.back().logp, h.logp);
    } else {
      merged.push_back(std::move(h));
    }
  }
  std::sort(merged.begin(), merged.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.logp != b.logp) return a.logp > b.logp;
    return a.pieces < b.pieces;
  });
  if (static_cast<int>(merged.size()) > k) merged.resize(k);
  return merged;
}

}  // namespace detail

// Frame-synchronous beam decode over the mock model, with the pointer branch
// interpolated in when biasing is enabled. Per frame, hypotheses emit pieces
// until they take blank or hit the per-frame symbol cap.
inline DecodeResult decode(const ModelParams& params, const TreeEncodings& enc,
                           const PrefixTree& tree, const SubwordVocab& vocab,
                           const MockUtterance& utt, const DecodeConfig& cfg) {
  if (cfg.beam < 1 || cfg.max_symbols_per_frame < 1) {
    throw ParseError("beam and symbol cap must be at least 1");
  }
  const int v = static_cast<int>(utt.rnnt_emit.cols()) - 1;

  // Model distribution for one hypothesis at (frame, slot); exact passthrough
  // of the mock posterior whenever the pointer contributes nothing.
  auto step_probs = [&](int t, int slot, const detail::Hypothesis& hyp) -> Vector {
    Vector pm =
        (slot == 0 ? utt.rnnt_emit.row(t) : utt.rnnt_cont.row(t)).transpose();
    if (!cfg.biasing_enabled) return pm;
    const std::vector<int> active = active_set(tree, hyp.prefix);
    if (active.empty()) return pm;
    Vector h_enc_t = utt.h_enc.row(t).transpose();
    Vector h_ctc;
    if (cfg.phoneme_query_enabled) {
      h_ctc = ctc_phoneme_embedding(params, utt.ctc.row(t).transpose());
    }
    Vector query = compute_query(params, h_enc_t, hyp.prev,
                                 cfg.phoneme_query_enabled ? &h_ctc : nullptr);
    KeyValueSet kv;
    PtrDistribution ptr = ptr_distribution(params, query, enc, tree, active, &kv);
    Vector h_ptr = pointer_context(ptr, kv);
    Vector h_joint_t =
        (slot == 0 ? utt.h_joint_emit.row(t) : utt.h_joint_cont.row(t)).transpose();
    double p_gen = generation_prob(params, h_joint_t, h_ptr);
    if (cfg.force_pgen_zero) p_gen = 0.0;
    return interpolate(pm, ptr, p_gen, v);
  };

  std::vector<detail::Hypothesis> beam{detail::Hypothesis{}};
  for (int t = 0; t < utt.frames(); ++t) {
    std::vector<detail::Hypothesis> active_hyps = beam;
    std::vector<detail::Hypothesis> finished;
    for (int c = 0; c <= cfg.max_symbols_per_frame && !active_hyps.empty(); ++c) {
      std::vector<detail::Hypothesis> expansions;
      for (const auto& hyp : active_hyps) {
        const Vector p = step_probs(t, c == 0 ? 0 : 1, hyp);
        if (p[v] > 0.0) {
          detail::Hypothesis done = hyp;
          done.logp += std::log(p[v]);
          finished.push_back(std::move(done));
        }
        if (c == cfg.max_symbols_per_frame) continue;
        for (int y = 0; y < v; ++y) {
          if (p[y] <= 0.0) continue;
          detail::Hypothesis ext = hyp;
          ext.pieces.push_back(y);
          ext.prefix = advance_prefix(tree, vocab, hyp.prefix, y);
          ext.prev = y;
          ext.logp += std::log(p[y]);
          expansions.push_back(std::move(ext));
        }
      }
      active_hyps = detail::prune_merge(std::move(expansions), cfg.beam);
    }
    beam = detail::prune_merge(std::move(finished), cfg.beam);
    if (beam.empty()) break;  // unreachable with positive blank mass
  }

  DecodeResult out;
  if (!beam.empty()) {
    out.pieces = beam.front().pieces;
    out.log_prob = beam.front().logp;
  }
  return out;
}

// Lenient piece-to-word conversion for scoring decoder output: a boundary
// piece flushes the current word; a trailing unfinished word flushes as-is.
inline std::vector<std::string> pieces_to_words(const SubwordVocab& vocab,
                                                const std::vector<int>& pieces) {
  std::vector<std::string> out;
  std::u32string cur;
  for (int id : pieces) {
    cur += vocab.stem(id);
    if (vocab.is_boundary_piece(id)) {
      out.push_back(utf8_encode(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(utf8_encode(cur));
  return out;
}

// Generation probabilities along a teacher-forced path, for inspecting where
// the gate opens. Steps with an empty active set report 0.
inline std::vector<double> step_pgens(const ModelParams& params, const PrefixTree& tree,
                                      const TreeEncodings& enc, const TrainUtterance& tu) {
  std::vector<double> out;
  out.reserve(tu.steps.size());
  for (const auto& step : tu.steps) {
    const std::vector<int> active = active_set(tree, step.prefix);
    if (active.empty()) {
      out.push_back(0.0);
      continue;
    }
    Vector h_ctc;
    const bool use_ctc = step.ctc_posterior.size() > 0;
    if (use_ctc) h_ctc = ctc_phoneme_embedding(params, step.ctc_posterior);
    StepOutput s = biased_step(params, enc, tree, active, step.h_enc, step.h_joint,
                               step.model_probs, step.prev_piece, use_ctc ? &h_ctc : nullptr);
    out.push_back(s.p_gen);
  }
  return out;
}

struct TrainReport {
  std::vector<double> loss_trace;  // loss at the parameters before each update
};

// Full-batch adaptive-moment descent on the teacher-forced mean NLL, in two
// stages. A freshly initialized pointer spreads mass over the active
// branches, so at first nearly every step votes to close the gate — and once
// the gate saturates shut, the attention gradients vanish with it. Stage one
// (the first quarter of the run) therefore trains only the attention with
// the gate pinned to its constant initial bias: the gate weights are set to
// zero and held there, so no gradient can reach the gate through the pointer
// context either. Stage two trains everything jointly, growing the gate
// weights from zero like a logistic separator — by then sharp attention on
// the biasing branches gives the gate a reason to open on exactly those
// steps. A zero learning rate keeps the run a pure no-op.
inline TrainReport toy_train(ModelParams& params, const PrefixTree& tree,
                             const WordAlignments& aligns, const EncodingOptions& enc_opts,
                             const std::vector<TrainUtterance>& batch, double lr, int steps) {
  if (lr < 0.0) throw ParseError("learning rate must be non-negative");
  TrainReport report;
  AdamState opt = AdamState::zeros_like(params);
  opt.weight_decay = 0.01;
  const int gate_warmup = steps / 4;
  if (gate_warmup > 0 && lr > 0.0) params.head.wgen.setZero();
  for (int k = 0; k < steps; ++k) {
    Gradients grads = Gradients::zeros_like(params);
    double loss = 0.0;
    try {
      loss = loss_and_gradients(params, tree, aligns, enc_opts, batch, &grads);
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at step " + std::to_string(k) + ": " + e.what());
    }
    report.loss_trace.push_back(loss);
    if (k < gate_warmup) {
      grads.wgen.setZero();
      grads.bgen = 0.0;
    }
    opt.update(params, grads, lr);
  }
  return report;
}

// --- scenario files -----------------------------------------------------------
//
// JSON suite: noise level, world seed, confusion sets (keyed by piece text),
// and per-utterance word lists with seeds.

struct ScenarioUtterance {
  std::vector<std::string> words;
  uint64_t seed = 0;
};

struct ScenarioSuite {
  double noise = 0.0;
  double feature_jitter = 0.1;
  uint64_t world_seed = 0;
  ConfusionMap confusion;
  std::vector<ScenarioUtterance> utterances;
};

inline nlohmann::json scenarios_to_json(const ScenarioSuite& s, const SubwordVocab& vocab) {
  nlohmann::json j;
  j["format"] = "treebias-scenarios";
  j["noise"] = s.noise;
  j["feature_jitter"] = s.feature_jitter;
  j["world_seed"] = s.world_seed;
  nlohmann::json conf = nlohmann::json::object();
  for (const auto& [piece, alts] : s.confusion) {
    nlohmann::json arr = nlohmann::json::array();
    for (int a : alts) arr.push_back(vocab.piece(a));
    conf[vocab.piece(piece)] = std::move(arr);
  }
  j["confusion"] = std::move(conf);
  nlohmann::json utts = nlohmann::json::array();
  for (const auto& u : s.utterances) {
    utts.push_back({{"words", u.words}, {"seed", u.seed}});
  }
  j["utterances"] = std::move(utts);
  return j;
}

inline ScenarioSuite scenarios_from_json(const nlohmann::json& j, const SubwordVocab& vocab) {
  if (j.value("format", "") != "treebias-scenarios") {
    throw ParseError("not a scenario suite");
  }
  ScenarioSuite s;
  s.noise = j.at("noise").get<double>();
  s.feature_jitter = j.value("feature_jitter", 0.1);
  s.world_seed = j.at("world_seed").get<uint64_t>();
  if (j.contains("confusion")) {
    for (const auto& [piece_text, arr] : j.at("confusion").items()) {
      const int piece = vocab.id_of(piece_text);
      if (piece < 0) throw ParseError("confusion references unknown piece: " + piece_text);
      std::vector<int> alts;
      for (const auto& alt : arr) {
        const int a = vocab.id_of(alt.get<std::string>());
        if (a < 0) throw ParseError("confusion references unknown piece: " + alt.get<std::string>());
        alts.push_back(a);
      }
      s.confusion[piece] = std::move(alts);
    }
  }
  for (const auto& ju : j.at("utterances")) {
    ScenarioUtterance u;
    u.words = ju.at("words").get<std::vector<std::string>>();
    u.seed = ju.at("seed").get<uint64_t>();
    if (u.words.empty()) throw EmptyInput("scenario utterance has no words");
    s.utterances.push_back(std::move(u));
  }
  return s;
}

// Reference words resolved against lexicon, vocabulary and hard alignments.
inline std::vector<RefWord> resolve_words(const std::vector<std::string>& words,
                                          const Lexicon& lexicon, const SubwordVocab& vocab,
                                          const std::map<std::string, AlignmentMatrix>& aligns) {
  std::vector<RefWord> out;
  for (const auto& w : words) {
    auto lit = lexicon.find(w);
    if (lit == lexicon.end()) throw MissingPronunciation("word not in lexicon: " + w);
    auto ait = aligns.find(w);
    if (ait == aligns.end()) throw MissingAlignment("no alignment for word: " + w);
    RefWord rw;
    rw.word = w;
    rw.seg = tokenize_word(vocab, w);
    rw.phonemes = lit->second.phonemes;
    rw.char_phon = ait->second;
    out.push_back(std::move(rw));
  }
  return out;
}

inline std::vector<MockUtterance> build_utterances(const ScenarioSuite& suite,
                                                   const Lexicon& lexicon,
                                                   const SubwordVocab& vocab,
                                                   const std::map<std::string, AlignmentMatrix>& aligns,
                                                   const MockWorld& world, int inventory_size) {
  std::vector<MockUtterance> out;
  out.reserve(suite.utterances.size());
  for (const auto& su : suite.utterances) {
    out.push_back(synthesize_utterance(world, resolve_words(su.words, lexicon, vocab, aligns),
                                       inventory_size, suite.noise, suite.confusion, su.seed,
                                       suite.feature_jitter));
  }
  return out;
}

}  // namespace treebias
