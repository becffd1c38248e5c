#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "treebias/alignment.hpp"
#include "treebias/errors.hpp"
#include "treebias/lexicon.hpp"
#include "treebias/rng.hpp"
#include "treebias/tokenizer.hpp"

using namespace treebias;

namespace {

LexiconEntry entry_of(const std::string& word, std::u32string chars,
                        std::vector<int> phonemes) {
  LexiconEntry e;
  e.word = word;
  e.chars = std::move(chars);
  e.phonemes = std::move(phonemes);
  return e;
}

// One complete lattice path: the chunk sequence with its offsets.
struct BrutePath {
  std::vector<ViterbiStep> steps;
  double log_score = 0.0;  // suffix-accumulated, matching the DP's order
};

void enumerate_paths(const MultigramModel& model, const LexiconEntry& entry, int i, int j,
                     std::vector<ViterbiStep>& prefix, std::vector<BrutePath>& out) {
  const int lc = entry.num_chars();
  const int lp = entry.num_phonemes();
  if (i == lc && j == lp) {
    BrutePath path;
    path.steps = prefix;
    double score = 0.0;
    for (auto it = path.steps.rbegin(); it != path.steps.rend(); ++it) {
      score = std::log(model.prob(it->chunk)) + score;
    }
    path.log_score = score;
    out.push_back(std::move(path));
    return;
  }
  for (int g = 1; g <= model.max_g && i + g <= lc; ++g) {
    for (int p = 0; p <= model.max_p && j + p <= lp; ++p) {
      ChunkPair chunk;
      chunk.graphemes = entry.chars.substr(i, g);
      chunk.phonemes.assign(entry.phonemes.begin() + j, entry.phonemes.begin() + j + p);
      if (model.prob(chunk) <= 0.0) continue;
      prefix.push_back({chunk, i, j});
      enumerate_paths(model, entry, i + g, j + p, prefix, out);
      prefix.pop_back();
    }
  }
}

std::vector<BrutePath> all_paths(const MultigramModel& model, const LexiconEntry& entry) {
  std::vector<ViterbiStep> prefix;
  std::vector<BrutePath> out;
  enumerate_paths(model, entry, 0, 0, prefix, out);
  return out;
}

// Tie-break order: first differing chunk with the shorter grapheme side wins,
// then the shorter phoneme side.
bool tie_break_less(const BrutePath& a, const BrutePath& b) {
  const size_t n = std::min(a.steps.size(), b.steps.size());
  for (size_t k = 0; k < n; ++k) {
    const auto ga = a.steps[k].chunk.graphemes.size();
    const auto gb = b.steps[k].chunk.graphemes.size();
    if (ga != gb) return ga < gb;
    const auto pa = a.steps[k].chunk.phonemes.size();
    const auto pb = b.steps[k].chunk.phonemes.size();
    if (pa != pb) return pa < pb;
  }
  return a.steps.size() < b.steps.size();
}

struct TempFile {
  std::filesystem::path path;

  explicit TempFile(const std::string& name) {
    path = std::filesystem::temp_directory_path() / name;
  }
  ~TempFile() { std::filesystem::remove(path); }

  void write(const std::string& text) const {
    std::ofstream out(path);
    out << text;
  }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("single-entry lattice has exactly the reachable chunks") {
  Lexicon lex;
  lex["AB"] = entry_of("AB", U"AB", {1});

  const auto model = init_multigram(lex, 2, 1);
  const std::set<ChunkPair> expected = {
      {U"A", {1}}, {U"B", {1}}, {U"AB", {1}}, {U"A", {}}, {U"B", {}}};
  std::set<ChunkPair> got;
  for (const auto& [chunk, prob] : model.chunk_probs) {
    got.insert(chunk);
    CHECK(prob == Catch::Approx(0.2));
  }
  CHECK(got == expected);

  const auto paths = all_paths(model, lex["AB"]);
  REQUIRE(paths.size() == 3);

  // Normalized path posterior sums to one over the lattice.
  double z = 0.0;
  for (const auto& p : paths) z += std::exp(p.log_score);
  double posterior = 0.0;
  for (const auto& p : paths) posterior += std::exp(p.log_score) / z;
  CHECK(posterior == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("one EM iteration matches hand-computed expected counts") {
  Lexicon lex;
  lex["AB"] = entry_of("AB", U"AB", {1});

  // Uniform 1/5 start. Paths (A,[x])(B,[]) and (A,[])(B,[x]) have prob 1/25,
  // (AB,[x]) has 1/5; posteriors 1/7, 1/7, 5/7; normalized counts 1/9 x4, 5/9.
  const auto result = train_em_aligner(lex, 2, 1, 1, 0.0);
  REQUIRE(result.iterations == 1);
  REQUIRE(result.loglik_trace.size() == 1);
  CHECK(result.loglik_trace[0] == Catch::Approx(std::log(7.0 / 25.0)).epsilon(1e-12));

  const auto& probs = result.model.chunk_probs;
  REQUIRE(probs.size() == 5);
  CHECK(probs.at({U"AB", {1}}) == Catch::Approx(5.0 / 9.0).epsilon(1e-12));
  CHECK(probs.at({U"A", {1}}) == Catch::Approx(1.0 / 9.0).epsilon(1e-12));
  CHECK(probs.at({U"B", {1}}) == Catch::Approx(1.0 / 9.0).epsilon(1e-12));
  CHECK(probs.at({U"A", {}}) == Catch::Approx(1.0 / 9.0).epsilon(1e-12));
  CHECK(probs.at({U"B", {}}) == Catch::Approx(1.0 / 9.0).epsilon(1e-12));
}

TEST_CASE("EM concentrates on the dominant chunk and likelihood never drops") {
  Lexicon lex;
  lex["AB"] = entry_of("AB", U"AB", {1});

  const auto result = train_em_aligner(lex, 2, 1, 10, 0.0);
  CHECK(result.model.prob({U"AB", {1}}) >= 0.99);
  for (size_t i = 1; i < result.loglik_trace.size(); ++i) {
    CHECK(result.loglik_trace[i] >= result.loglik_trace[i - 1] - 1e-9);
  }
}

TEST_CASE("empty lexicon is rejected") {
  Lexicon lex;
  CHECK_THROWS_AS(train_em_aligner(lex, 2, 2, 5, 1e-6), EmptyInput);
  CHECK_THROWS_AS(init_multigram(lex, 2, 2), EmptyInput);
}

TEST_CASE("entries with no lattice path are rejected") {
  Lexicon lex;
  lex["A"] = entry_of("A", U"A", {1, 2, 3});
  CHECK_THROWS_AS(train_em_aligner(lex, 2, 2, 5, 1e-6), UnalignableEntry);
}

TEST_CASE("EM learns a deterministic one-to-one mapping") {
  // 50 words over 10 letters; letter k always pronounces as phoneme k+1.
  const std::u32string letters = U"abcdefghij";
  Rng rng(401);
  Lexicon lex;
  int made = 0;
  while (made < 50) {
    const int len = 4 + static_cast<int>(rng.next_below(3));
    std::u32string chars;
    std::vector<int> phonemes;
    for (int i = 0; i < len; ++i) {
      const int k = static_cast<int>(rng.next_below(letters.size()));
      chars.push_back(letters[k]);
      phonemes.push_back(k + 1);
    }
    const std::string word = utf8_encode(chars) + std::to_string(made);
    if (lex.count(word)) continue;
    auto entry = entry_of(word, chars, phonemes);
    lex[word] = std::move(entry);
    ++made;
  }

  const auto result = train_em_aligner(lex, 2, 2, 10, 1e-9);

  for (size_t i = 1; i < result.loglik_trace.size(); ++i) {
    CHECK(result.loglik_trace[i] >= result.loglik_trace[i - 1] - 1e-9);
  }

  // EM is free to settle on one- or two-letter chunks (short segmentations
  // score higher), so judge the mapping itself: a chunk is true iff its
  // phoneme side is the per-character image of its grapheme side.
  const auto is_true_chunk = [&](const ChunkPair& chunk) {
    if (chunk.phonemes.size() != chunk.graphemes.size()) return false;
    for (size_t i = 0; i < chunk.graphemes.size(); ++i) {
      const auto pos = letters.find(chunk.graphemes[i]);
      if (pos == std::u32string::npos) return false;
      if (chunk.phonemes[i] != static_cast<int>(pos) + 1) return false;
    }
    return true;
  };

  // Aggregate mass on the true mapping, and per grapheme side the
  // conditional mass on its true phoneme image, both concentrate.
  std::map<std::u32string, std::pair<double, double>> by_graphemes;
  double total = 0.0, true_total = 0.0;
  for (const auto& [chunk, prob] : result.model.chunk_probs) {
    auto& [mass, true_mass] = by_graphemes[chunk.graphemes];
    mass += prob;
    total += prob;
    if (is_true_chunk(chunk)) {
      true_mass += prob;
      true_total += prob;
    }
  }
  CHECK(true_total / total >= 0.99);
  for (const auto& [g, masses] : by_graphemes) {
    CAPTURE(utf8_encode(g));
    CHECK(masses.second / masses.first >= 0.99);
  }

  // Viterbi alignment of every entry is the identity matrix.
  for (const auto& [word, entry] : lex) {
    const auto a = viterbi_align(result.model, entry);
    REQUIRE(a.kind == AlignKind::Hard);
    REQUIRE(a.rows() == entry.num_chars());
    REQUIRE(a.cols() == entry.num_phonemes());
    CHECK(a.weights.isApprox(Matrix::Identity(a.rows(), a.cols())));
  }
}

TEST_CASE("viterbi expansion assigns chunk phonemes in order") {
  // CHAT -> [ch ae t] with a model that only offers the CH digraph chunk:
  // the ch column lands on C, the first character of the chunk.
  MultigramModel model;
  model.max_g = 2;
  model.max_p = 2;
  model.chunk_probs[{U"CH", {1}}] = 0.5;
  model.chunk_probs[{U"A", {2}}] = 0.3;
  model.chunk_probs[{U"T", {3}}] = 0.2;

  const auto entry = entry_of("CHAT", U"CHAT", {1, 2, 3});
  const auto a = viterbi_align(model, entry);
  Matrix expected = Matrix::Zero(4, 3);
  expected(0, 0) = 1.0;  // ch on C
  expected(2, 1) = 1.0;  // ae on A
  expected(3, 2) = 1.0;  // t on T
  CHECK(a.weights == expected);
}

TEST_CASE("single char takes all phonemes of its chunk") {
  MultigramModel model;
  model.max_g = 1;
  model.max_p = 2;
  model.chunk_probs[{U"A", {1, 2}}] = 1.0;

  const auto entry = entry_of("A", U"A", {1, 2});
  const auto a = viterbi_align(model, entry);
  REQUIRE(a.rows() == 1);
  REQUIRE(a.cols() == 2);
  CHECK(a.weights(0, 0) == 1.0);
  CHECK(a.weights(0, 1) == 1.0);
}

TEST_CASE("viterbi tie-break prefers the shorter first chunk") {
  // Uniform model over the AB->[x] lattice: the two two-chunk paths tie.
  // The deletion-first path wins because its first chunk has the shorter
  // phoneme side, placing the single 1 on B.
  Lexicon lex;
  lex["AB"] = entry_of("AB", U"AB", {1});
  const auto model = init_multigram(lex, 2, 1);

  MultigramModel no_big = model;
  no_big.chunk_probs.erase({U"AB", {1}});
  const auto a = viterbi_align(no_big, lex["AB"]);
  CHECK(a.weights(0, 0) == 0.0);
  CHECK(a.weights(1, 0) == 1.0);
}

TEST_CASE("viterbi is missing-path safe") {
  MultigramModel model;
  model.max_g = 1;
  model.max_p = 1;
  model.chunk_probs[{U"A", {1}}] = 1.0;
  const auto entry = entry_of("AB", U"AB", {1, 1});
  CHECK_THROWS_AS(viterbi_align(model, entry), UnalignableEntry);
}

TEST_CASE("viterbi equals exhaustive search on small words") {
  const std::u32string letters = U"abcd";
  for (int lc = 1; lc <= 6; ++lc) {
    for (int lp = 1; lp <= 6; ++lp) {
      if (lp > 2 * lc) continue;  // unalignable with max_p = 2
      std::u32string chars;
      std::vector<int> phonemes;
      for (int i = 0; i < lc; ++i) chars.push_back(letters[i % letters.size()]);
      for (int j = 0; j < lp; ++j) phonemes.push_back(1 + (j % 3));
      Lexicon lex;
      const std::string word = "w" + std::to_string(lc) + "_" + std::to_string(lp);
      lex[word] = entry_of(word, chars, phonemes);

      // Uniform probabilities produce genuine ties; the jittered variant
      // checks generic scores.
      MultigramModel uniform = init_multigram(lex, 2, 2);
      MultigramModel jittered = uniform;
      Rng rng(1000 + static_cast<uint64_t>(lc) * 7 + lp);
      for (auto& [chunk, prob] : jittered.chunk_probs) prob = rng.uniform(0.1, 1.0);

      for (const auto* model : {&uniform, &jittered}) {
        const auto paths = all_paths(*model, lex[word]);
        REQUIRE(!paths.empty());
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& p : paths) best = std::max(best, p.log_score);

        const auto got = viterbi_path(*model, lex[word]);
        CHECK(got.log_score == best);

        std::vector<BrutePath> winners;
        for (const auto& p : paths) {
          if (p.log_score == best) winners.push_back(p);
        }
        std::sort(winners.begin(), winners.end(), tie_break_less);
        REQUIRE(got.steps.size() == winners.front().steps.size());
        for (size_t k = 0; k < got.steps.size(); ++k) {
          CHECK(got.steps[k].chunk == winners.front().steps[k].chunk);
          CHECK(got.steps[k].char_offset == winners.front().steps[k].char_offset);
          CHECK(got.steps[k].phoneme_offset == winners.front().steps[k].phoneme_offset);
        }

        // Expanded matrix satisfies the hard-alignment invariants.
        const auto a = viterbi_align(*model, lex[word]);
        CHECK_NOTHROW(validate_alignment(a));
      }
    }
  }
}

TEST_CASE("soft alignment files validate and renormalize") {
  const auto entry = entry_of("GO", U"GO", {1, 2});

  SECTION("uniform columns pass through unchanged") {
    const auto e4 = entry_of("ABCD", U"ABCD", {1, 2});
    TempFile f("tb_align_uniform.json");
    f.write(R"({"word":"ABCD","rows":4,"cols":2,"data":[0.25,0.25,0.25,0.25,0.25,0.25,0.25,0.25]})");
    const auto a = load_soft_alignment(f.str(), e4);
    REQUIRE(a.kind == AlignKind::Soft);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 2; ++j) CHECK(a.weights(i, j) == 0.25);
    }
  }

  SECTION("columns within tolerance renormalize to one") {
    TempFile f("tb_align_renorm.json");
    f.write(R"({"word":"GO","rows":2,"cols":2,"data":[0.5,1.0005,0.5005,0.0]})");
    const auto a = load_soft_alignment(f.str(), entry);
    CHECK(a.weights.col(0).sum() == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(a.weights.col(1).sum() == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(a.weights(0, 0) == Catch::Approx(0.5 / 1.0005));
  }

  SECTION("columns outside tolerance are rejected") {
    TempFile f("tb_align_bad.json");
    f.write(R"({"word":"GO","rows":2,"cols":2,"data":[0.5,0.5,0.502,0.5]})");
    CHECK_THROWS_AS(load_soft_alignment(f.str(), entry), NotColumnStochastic);
  }

  SECTION("shape mismatch is rejected") {
    TempFile f("tb_align_shape.json");
    f.write(R"({"word":"GO","rows":2,"cols":3,"data":[0.5,0.5,0.5,0.5,0.5,0.5]})");
    CHECK_THROWS_AS(load_soft_alignment(f.str(), entry), ShapeError);
  }

  SECTION("missing word is reported") {
    TempFile f("tb_align_missing.json");
    f.write(R"([{"word":"OTHER","rows":1,"cols":1,"data":[1.0]}])");
    CHECK_THROWS_AS(load_soft_alignment(f.str(), entry), MissingAlignment);
  }

  SECTION("arrays of alignments are searched by word") {
    TempFile f("tb_align_array.json");
    f.write(R"([{"word":"OTHER","rows":1,"cols":1,"data":[1.0]},)"
            R"({"word":"GO","rows":2,"cols":2,"data":[1.0,0.0,0.0,1.0]}])");
    const auto a = load_soft_alignment(f.str(), entry);
    CHECK(a.weights(0, 0) == 1.0);
    CHECK(a.weights(1, 1) == 1.0);
  }
}

TEST_CASE("alignment json round trip preserves hard matrices") {
  MultigramModel model;
  model.max_g = 1;
  model.max_p = 1;
  model.chunk_probs[{U"G", {1}}] = 0.5;
  model.chunk_probs[{U"O", {2}}] = 0.5;
  const auto entry = entry_of("GO", U"GO", {1, 2});
  const auto a = viterbi_align(model, entry);

  const auto j = alignment_to_json("GO", a);
  const auto back = alignment_from_json(j, entry);
  REQUIRE(back.kind == AlignKind::Hard);
  CHECK(back.weights == a.weights);
}

TEST_CASE("subword spans expand to contiguous row blocks") {
  const auto entry = entry_of("BRIDAL", U"BRIDAL", {1, 2, 3, 4, 5, 6});
  Segmentation seg;
  seg.piece_ids = {0, 1, 2};
  seg.char_spans = {{0, 1}, {1, 3}, {3, 6}};

  const auto m = subword_char_matrix(entry, seg);
  REQUIRE(m.rows() == 3);
  REQUIRE(m.cols() == 6);
  Matrix expected = Matrix::Zero(3, 6);
  expected(0, 0) = 1.0;
  expected(1, 1) = expected(1, 2) = 1.0;
  expected(2, 3) = expected(2, 4) = expected(2, 5) = 1.0;
  CHECK(m == expected);

  // Each column sums to exactly one.
  for (int c = 0; c < 6; ++c) CHECK(m.col(c).sum() == 1.0);
}

TEST_CASE("single-subword word maps to a row of ones") {
  const auto entry = entry_of("THE", U"THE", {1, 2});
  Segmentation seg;
  seg.piece_ids = {0};
  seg.char_spans = {{0, 3}};
  const auto m = subword_char_matrix(entry, seg);
  REQUIRE(m.rows() == 1);
  CHECK(m == Matrix::Ones(1, 3));
}

TEST_CASE("broken segmentations are rejected") {
  const auto entry = entry_of("ABC", U"ABC", {1});
  Segmentation gap;
  gap.piece_ids = {0, 1};
  gap.char_spans = {{0, 1}, {2, 3}};
  CHECK_THROWS_AS(subword_char_matrix(entry, gap), InvalidSegmentation);

  Segmentation overlap;
  overlap.piece_ids = {0, 1};
  overlap.char_spans = {{0, 2}, {1, 3}};
  CHECK_THROWS_AS(subword_char_matrix(entry, overlap), InvalidSegmentation);

  Segmentation short_end;
  short_end.piece_ids = {0};
  short_end.char_spans = {{0, 2}};
  CHECK_THROWS_AS(subword_char_matrix(entry, short_end), InvalidSegmentation);
}

TEST_CASE("composed subword-to-phoneme matrices stay column stochastic") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const int lc = 1 + static_cast<int>(rng.next_below(8));
    const int lp = 1 + static_cast<int>(rng.next_below(8));

    // Random column-stochastic soft alignment.
    Matrix c2p(lc, lp);
    for (int j = 0; j < lp; ++j) {
      double sum = 0.0;
      for (int i = 0; i < lc; ++i) {
        c2p(i, j) = rng.uniform(0.01, 1.0);
        sum += c2p(i, j);
      }
      for (int i = 0; i < lc; ++i) c2p(i, j) /= sum;
    }

    // Random partition of [0, lc) into contiguous spans.
    Segmentation seg;
    int pos = 0;
    while (pos < lc) {
      const int len = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(lc - pos)));
      seg.piece_ids.push_back(seg.length());
      seg.char_spans.emplace_back(pos, pos + len);
      pos += len;
    }
    std::u32string chars(static_cast<size_t>(lc), U'a');
    std::vector<int> phonemes(static_cast<size_t>(lp), 1);
    const auto entry = entry_of("w", chars, phonemes);
    const auto s2c = subword_char_matrix(entry, seg);

    const Matrix prod = s2c * c2p;
    for (int j = 0; j < lp; ++j) {
      CHECK(std::abs(prod.col(j).sum() - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("multigram models round trip through json") {
  TempFile inv_file("tb_align_inv.txt");
  inv_file.write("aa\nbb\ncc\n");
  const auto inv = load_inventory(inv_file.str());

  Lexicon lex;
  lex["AB"] = entry_of("AB", U"AB", {1, 2});
  const auto trained = train_em_aligner(lex, 2, 2, 5, 1e-9);

  TempFile model_file("tb_align_model.json");
  save_multigram(model_file.str(), trained.model, inv);
  const auto loaded = load_multigram(model_file.str(), inv);

  REQUIRE(loaded.max_g == trained.model.max_g);
  REQUIRE(loaded.max_p == trained.model.max_p);
  REQUIRE(loaded.chunk_probs.size() == trained.model.chunk_probs.size());
  for (const auto& [chunk, prob] : trained.model.chunk_probs) {
    CHECK(loaded.prob(chunk) == Catch::Approx(prob).epsilon(1e-12));
  }
}
