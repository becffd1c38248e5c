#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "treebias/tokenizer.hpp"

using namespace treebias;

namespace {

SubwordVocab demo_vocab() {
  return SubwordVocab::from_pieces(
      {"B", "RI", "DAL_", "THE_", "A_", "B_", "R", "I", "D", "A", "L", "SKLY_",
       "T", "H", "E", "T_", "H_", "E_", "RI_", "DAL", "S", "K", "Y", "S_", "K_", "Y_", "L_",
       "I_", "D_", "R_"});
}

}  // namespace

TEST_CASE("whole word with boundary marker tokenizes to one piece") {
  const SubwordVocab v = demo_vocab();
  const Segmentation s = tokenize_word(v, "THE");
  REQUIRE(s.piece_ids == std::vector<int>{v.id_of("THE_")});
  REQUIRE(s.char_spans == std::vector<std::pair<int, int>>{{0, 3}});
}

TEST_CASE("greedy longest match uses marker form at the word end") {
  const SubwordVocab v = demo_vocab();
  const Segmentation s = tokenize_word(v, "BRIDAL");
  REQUIRE(s.piece_ids == std::vector<int>{v.id_of("B"), v.id_of("RI"), v.id_of("DAL_")});
  REQUIRE(s.char_spans ==
          std::vector<std::pair<int, int>>{{0, 1}, {1, 3}, {3, 6}});
}

TEST_CASE("single character word takes the marker piece") {
  const SubwordVocab v = demo_vocab();
  const Segmentation s = tokenize_word(v, "A");
  REQUIRE(s.piece_ids == std::vector<int>{v.id_of("A_")});
  REQUIRE(s.char_spans == std::vector<std::pair<int, int>>{{0, 1}});
}

TEST_CASE("uncovered character is an error naming the position") {
  const SubwordVocab v = SubwordVocab::from_pieces({"A", "A_"});
  REQUIRE_THROWS_AS(tokenize_word(v, "AXA"), UnknownCharacter);
}

TEST_CASE("empty word cannot be tokenized") {
  const SubwordVocab v = demo_vocab();
  REQUIRE_THROWS(tokenize_word(v, ""));
}

TEST_CASE("detokenize inverts tokenize and validates marker placement") {
  const SubwordVocab v = demo_vocab();
  REQUIRE(detokenize(v, {v.id_of("B"), v.id_of("RI"), v.id_of("DAL_")}) == "BRIDAL");
  REQUIRE(detokenize(v, {v.id_of("THE_")}) == "THE");
  REQUIRE_THROWS_AS(detokenize(v, {v.id_of("THE_"), v.id_of("B")}), MalformedSequence);
  REQUIRE_THROWS_AS(detokenize(v, {v.id_of("B"), v.id_of("RI")}), MalformedSequence);
}

TEST_CASE("round trip holds over a word list and spans partition the word") {
  const SubwordVocab v = demo_vocab();
  for (const std::string w : {"BRIDAL", "THE", "A", "BRISKLY", "RIDAL", "ABRIDAL", "HEAT"}) {
    const Segmentation s = tokenize_word(v, w);
    REQUIRE(detokenize(v, s.piece_ids) == w);
    // spans form a partition of [0, l_c)
    int pos = 0;
    for (size_t i = 0; i < s.char_spans.size(); ++i) {
      REQUIRE(s.char_spans[i].first == pos);
      REQUIRE(s.char_spans[i].second > pos);
      pos = s.char_spans[i].second;
      // only the last piece carries the marker
      REQUIRE(v.is_boundary_piece(s.piece_ids[i]) == (i + 1 == s.char_spans.size()));
    }
    REQUIRE(pos == static_cast<int>(utf8_decode(w).size()));
    // determinism
    const Segmentation s2 = tokenize_word(v, w);
    REQUIRE(s2.piece_ids == s.piece_ids);
    REQUIRE(s2.char_spans == s.char_spans);
  }
}

TEST_CASE("vocabulary rejects duplicates, empties and bare markers") {
  REQUIRE_THROWS_AS(SubwordVocab::from_pieces({"A", "A"}), ParseError);
  REQUIRE_THROWS_AS(SubwordVocab::from_pieces({""}), ParseError);
  REQUIRE_THROWS_AS(SubwordVocab::from_pieces({"_"}), ParseError);
}

TEST_CASE("vocab file assigns ids by line number") {
  const auto path = std::filesystem::temp_directory_path() / "vocab_ids.txt";
  {
    std::ofstream out(path);
    out << "B\nRI\nDAL_\n";
  }
  const SubwordVocab v = load_vocab(path.string());
  REQUIRE(v.size() == 3);
  REQUIRE(v.id_of("B") == 0);
  REQUIRE(v.id_of("RI") == 1);
  REQUIRE(v.id_of("DAL_") == 2);
  std::filesystem::remove(path);
}

TEST_CASE("pre-segmented input must spell the word and use known pieces") {
  const SubwordVocab v = demo_vocab();
  const auto path = std::filesystem::temp_directory_path() / "preseg.txt";
  {
    std::ofstream out(path);
    out << "BRIDAL\tB RI DAL_\n";
  }
  const auto segs = load_presegmented(path.string(), v);
  REQUIRE(segs.at("BRIDAL").piece_ids ==
          std::vector<int>{v.id_of("B"), v.id_of("RI"), v.id_of("DAL_")});
  {
    std::ofstream out(path);
    out << "BRIDAL\tB RI RI_\n";  // pieces do not spell the word
  }
  REQUIRE_THROWS_AS(load_presegmented(path.string(), v), ParseError);
  std::filesystem::remove(path);
}
