#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "treebias/alignment.hpp"
#include "treebias/encoder.hpp"
#include "treebias/errors.hpp"
#include "treebias/lexicon.hpp"
#include "treebias/metrics.hpp"
#include "treebias/params.hpp"
#include "treebias/simulate.hpp"
#include "treebias/text.hpp"
#include "treebias/tokenizer.hpp"
#include "treebias/trie.hpp"

namespace treebias {

// Self-contained synthetic task: a letter-phoneme lexicon, a subword
// vocabulary where common words are single pieces and rare words split into
// stem + marked suffix, a biasing list of the rare words plus distractors,
// and a 20-utterance scenario suite whose noise is aimed at rare-word pieces.
// The same construction backs the CLI demo and the end-to-end tests.
struct DemoSetup {
  PhonemeInventory inventory;
  Lexicon lexicon;
  SubwordVocab vocab;
  BiasingList list;
  std::vector<Segmentation> list_segs;
  PrefixTree tree;
  std::map<std::string, AlignmentMatrix> hard_aligns;
  MultigramModel multigram;
  ScenarioSuite suite;
  ModelDims dims;
  ModelOptions model_opts;
  std::set<std::string> biasing_set;
  std::vector<std::string> common_words, rare_words, distractors;
};

namespace demo_detail {

inline std::vector<std::string> common_word_list() {
  return {"THE", "A", "OF", "TO", "IN", "IS", "ON", "AT", "BY", "WE", "HE", "IT"};
}

inline std::vector<std::string> rare_word_list() {
  return {"BRIDAL", "BRISKLY", "QUIXOTIC", "ZEPHYR", "GLACIER", "KRYPTON", "FJORD", "SPHINX"};
}

// The first eight distractors pair off with the rare words (similar stems or
// suffixes), so the directed noise can confuse a rare word with a distractor
// that is also on the biasing list.
inline std::vector<std::string> distractor_list() {
  return {"BRIDLE", "BRUSQUE", "QUARTZ",  "ZENITH", "GLIMPSE", "KUDZU",  "FLUX",
          "SPHERE", "WALTZ",   "NYMPH",   "VORTEX", "JUNGLE",  "KHAKI",  "PIXEL",
          "QUORUM", "RHYTHM",  "SYNTAX",  "WIZARD", "YONDER",  "XENON"};
}

inline std::string stem_of(const std::string& word) {
  return word.substr(0, (word.size() + 1) / 2);
}

inline std::string suffix_of(const std::string& word) {
  return word.substr((word.size() + 1) / 2) + "_";
}

}  // namespace demo_detail

inline DemoSetup make_demo_setup(uint64_t seed) {
  DemoSetup d;
  d.common_words = demo_detail::common_word_list();
  d.rare_words = demo_detail::rare_word_list();
  d.distractors = demo_detail::distractor_list();

  // Inventory: one phoneme per letter, lowercase.
  std::vector<std::string> phonemes;
  for (char c = 'a'; c <= 'z'; ++c) phonemes.emplace_back(1, c);
  d.inventory = PhonemeInventory::from_symbols(phonemes);

  // Lexicon: letter-to-phoneme spelling for every word.
  auto add_word = [&](const std::string& w) {
    std::vector<std::string> syms;
    for (char c : w) syms.emplace_back(1, static_cast<char>(c - 'A' + 'a'));
    d.lexicon[w] = make_entry(w, syms, d.inventory);
  };
  for (const auto& w : d.common_words) add_word(w);
  for (const auto& w : d.rare_words) add_word(w);
  for (const auto& w : d.distractors) add_word(w);

  // Vocabulary: single letters (plain and word-final), whole common words,
  // then stem + suffix pieces of every rare and distractor word.
  std::vector<std::string> pieces;
  std::set<std::string> seen;
  auto add_piece = [&](const std::string& p) {
    if (seen.insert(p).second) pieces.push_back(p);
  };
  for (char c = 'A'; c <= 'Z'; ++c) add_piece(std::string(1, c));
  for (char c = 'A'; c <= 'Z'; ++c) add_piece(std::string(1, c) + "_");
  for (const auto& w : d.common_words) add_piece(w + "_");
  for (const auto& w : d.rare_words) {
    add_piece(demo_detail::stem_of(w));
    add_piece(demo_detail::suffix_of(w));
  }
  for (const auto& w : d.distractors) {
    add_piece(demo_detail::stem_of(w));
    add_piece(demo_detail::suffix_of(w));
  }
  d.vocab = SubwordVocab::from_pieces(pieces);

  // Joint chunk model at 1:1 granularity: this lexicon is deterministic
  // letter-for-phoneme, so the hard alignments come out as identities.
  EmTrainResult em = train_em_aligner(d.lexicon, 1, 1, 10, 1e-9);
  d.multigram = em.model;
  for (const auto& [word, entry] : d.lexicon) {
    d.hard_aligns[word] = viterbi_align(d.multigram, entry);
  }

  // Biasing list: rare words plus distractors, sorted for stable indices.
  std::vector<std::string> bias_words = d.rare_words;
  bias_words.insert(bias_words.end(), d.distractors.begin(), d.distractors.end());
  std::sort(bias_words.begin(), bias_words.end());
  d.list = make_biasing_list(bias_words, d.lexicon, "demo");
  d.biasing_set.insert(bias_words.begin(), bias_words.end());
  for (const auto& e : d.list.entries) d.list_segs.push_back(tokenize_word(d.vocab, e.word));
  d.tree = build_tree(d.list_segs);

  // Directed confusion: each rare stem/suffix piece dumps its noise mass on
  // the paired distractor's piece (or the next rare word's piece when the
  // pair shares it), so the unbiased decoder misreads exactly the rare words.
  auto word_pieces = [&](const std::string& w) { return tokenize_word(d.vocab, w).piece_ids; };
  for (size_t i = 0; i < d.rare_words.size(); ++i) {
    const auto own = word_pieces(d.rare_words[i]);
    const auto partner = word_pieces(d.distractors[i]);
    const auto fallback = word_pieces(d.rare_words[(i + 1) % d.rare_words.size()]);
    for (size_t k = 0; k < own.size(); ++k) {
      int alt = partner[k];
      if (alt == own[k]) alt = fallback[k];
      d.suite.confusion[own[k]] = {alt};
    }
  }

  // Twenty utterances cycling through the rare words in three templates.
  // Rare words outnumber common ones per utterance so the teacher-forced
  // batch is roughly class-balanced between steps the pointer can serve and
  // steps it cannot (common words and blanks).
  d.suite.noise = 0.6;
  d.suite.feature_jitter = 0.1;
  d.suite.world_seed = seed * 7919 + 1;
  for (int i = 0; i < 20; ++i) {
    ScenarioUtterance u;
    const std::string& r1 = d.rare_words[i % d.rare_words.size()];
    const std::string& r2 = d.rare_words[(i + 3) % d.rare_words.size()];
    const std::string& c1 = d.common_words[i % d.common_words.size()];
    const std::string& c2 = d.common_words[(i + 5) % d.common_words.size()];
    switch (i % 3) {
      case 0: u.words = {c1, r1, r2}; break;
      case 1: {
        const std::string& r3 = d.rare_words[(i + 5) % d.rare_words.size()];
        u.words = {r1, r2, c1, r3};
        break;
      }
      default: u.words = {r2, c2, r1}; break;
    }
    u.seed = seed + 17 * i + 1;
    d.suite.utterances.push_back(std::move(u));
  }

  d.dims.vocab_size = d.vocab.size();
  // Node encodings and attention need room to give the ~28 first-piece
  // branches nearly orthogonal keys; cramped dimensions cap how sharp the
  // branch attention can get.
  d.dims.d = 48;
  d.dims.d_enc = 16;
  d.dims.d_att = 40;
  d.dims.d_joint = 16;
  d.dims.gcn_layers = 2;
  d.dims.inventory_size = d.inventory.size();
  d.model_opts.phoneme_embed_mode = PhonemeEmbedMode::OneHotLinear;
  d.model_opts.tied_embeddings = true;
  d.model_opts.tied_phoneme_proj = false;
  return d;
}

struct DemoConfig {
  int train_steps = 200;
  double lr = 0.008;
  int beam = 4;
  bool phoneme_query = true;
  uint64_t seed = 7;
};

struct DemoResult {
  CorpusScore biased;
  CorpusScore unbiased;
  std::vector<double> loss_trace;
  double mean_pgen_rare = 0.0;
  double mean_pgen_common = 0.0;
  std::vector<std::vector<std::string>> refs, hyps_biased, hyps_unbiased;
  ModelParams params;
};

// Full pipeline run: train the head on teacher-forced scenarios, then decode
// the suite with and without biasing and score both against the references.
inline DemoResult run_demo(const DemoSetup& d, const DemoConfig& cfg) {
  DemoResult r;
  r.params = init_model(d.dims, d.model_opts, cfg.seed);

  WordAlignments aligns;
  for (size_t w = 0; w < d.list.entries.size(); ++w) {
    const auto& entry = d.list.entries[w];
    aligns.push_back(make_word_phoneme_data(entry, d.list_segs[w], d.hard_aligns.at(entry.word),
                                            r.params.phoneme_embed));
  }
  EncodingOptions enc_opts;  // grapheme + phoneme encodings, root row included

  const MockWorld world =
      MockWorld::make(d.dims.vocab_size, d.dims.d_enc, d.dims.d_joint, d.suite.world_seed);
  const std::vector<MockUtterance> utts =
      build_utterances(d.suite, d.lexicon, d.vocab, d.hard_aligns, world, d.dims.inventory_size);

  std::vector<TrainUtterance> batch;
  for (const auto& u : utts) {
    batch.push_back(make_train_utterance(u, d.tree, d.vocab, cfg.phoneme_query));
  }
  r.loss_trace =
      toy_train(r.params, d.tree, aligns, enc_opts, batch, cfg.lr, cfg.train_steps).loss_trace;

  const TreeEncodings enc = encode_tree(d.tree, r.params.enc, aligns, enc_opts);

  DecodeConfig on;
  on.beam = cfg.beam;
  on.biasing_enabled = true;
  on.phoneme_query_enabled = cfg.phoneme_query;
  DecodeConfig off = on;
  off.biasing_enabled = false;

  for (const auto& u : utts) {
    r.refs.push_back(u.ref_words);
    r.hyps_biased.push_back(pieces_to_words(d.vocab, decode(r.params, enc, d.tree, d.vocab, u, on).pieces));
    r.hyps_unbiased.push_back(
        pieces_to_words(d.vocab, decode(r.params, enc, d.tree, d.vocab, u, off).pieces));
  }
  r.biased = score_corpus(r.refs, r.hyps_biased, d.biasing_set);
  r.unbiased = score_corpus(r.refs, r.hyps_unbiased, d.biasing_set);

  // Gate behavior: mean p_gen on rare-word emission steps vs common-word ones.
  double sum_rare = 0.0, sum_common = 0.0;
  int n_rare = 0, n_common = 0;
  for (size_t ui = 0; ui < utts.size(); ++ui) {
    const std::vector<double> pg = step_pgens(r.params, d.tree, enc, batch[ui]);
    for (int t = 0; t < utts[ui].frames(); ++t) {
      const bool rare = d.biasing_set.count(utts[ui].ref_words[utts[ui].frame_word[t]]) > 0;
      const double g = pg[2 * t];  // emission step of frame t
      if (rare) {
        sum_rare += g;
        ++n_rare;
      } else {
        sum_common += g;
        ++n_common;
      }
    }
  }
  r.mean_pgen_rare = n_rare ? sum_rare / n_rare : 0.0;
  r.mean_pgen_common = n_common ? sum_common / n_common : 0.0;
  return r;
}

}  // namespace treebias
