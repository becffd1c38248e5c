#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "treebias/errors.hpp"
#include "treebias/lexicon.hpp"
#include "treebias/text.hpp"

namespace treebias {

// Previous-token id for the first decoding step. Not a vocabulary entry;
// its embedding is the zero vector.
constexpr int kStartOfSequence = -1;

// Explicit subword vocabulary with the suffix word-boundary convention:
// word-final pieces carry a trailing marker ("THE_"), non-final pieces do not.
struct SubwordVocab {
  std::vector<std::string> id_to_piece;  // piece id == position
  char32_t marker = U'_';

  int size() const { return static_cast<int>(id_to_piece.size()); }

  int id_of(const std::string& piece) const {
    auto it = index_.find(piece);
    return it == index_.end() ? -1 : it->second;
  }

  const std::string& piece(int id) const { return id_to_piece.at(id); }

  bool is_boundary_piece(int id) const {
    const auto& cps = piece_chars_.at(id);
    return !cps.empty() && cps.back() == marker;
  }

  // Piece characters with the boundary marker stripped.
  const std::u32string& stem(int id) const { return stems_.at(id); }

  size_t max_stem_len() const { return max_stem_len_; }

  static SubwordVocab from_pieces(const std::vector<std::string>& pieces,
                                  char32_t marker = U'_') {
    SubwordVocab v;
    v.marker = marker;
    for (const auto& p : pieces) {
      if (p.empty()) throw ParseError("empty vocabulary piece");
      if (v.index_.count(p)) throw ParseError("duplicate vocabulary piece: " + p);
      const int id = static_cast<int>(v.id_to_piece.size());
      v.index_[p] = id;
      v.id_to_piece.push_back(p);
      v.piece_chars_.push_back(utf8_decode(p));
      std::u32string stem = v.piece_chars_.back();
      if (!stem.empty() && stem.back() == marker) stem.pop_back();
      if (stem.empty()) {
        throw ParseError("piece is only the boundary marker: " + p);
      }
      v.stems_.push_back(stem);
      v.max_stem_len_ = std::max(v.max_stem_len_, stem.size());
    }
    return v;
  }

 private:
  std::unordered_map<std::string, int> index_;
  std::vector<std::u32string> piece_chars_;
  std::vector<std::u32string> stems_;
  size_t max_stem_len_ = 0;
};

// One piece per line, id = line index starting at 0.
inline SubwordVocab load_vocab(const std::string& path, char32_t marker = U'_') {
  std::vector<std::string> pieces;
  for (const auto& line : detail::read_lines(path)) {
    if (!line.empty()) pieces.push_back(line);
  }
  if (pieces.empty()) throw ParseError("empty vocabulary file: " + path);
  return SubwordVocab::from_pieces(pieces, marker);
}

struct Segmentation {
  std::vector<int> piece_ids;
  std::vector<std::pair<int, int>> char_spans;  // half-open, partition [0, l_c)

  int length() const { return static_cast<int>(piece_ids.size()); }
};

// Greedy longest-match from the left. A match consuming the final character
// must use the marker-suffixed piece, so the last emitted piece always
// carries the boundary marker.
inline Segmentation tokenize_word(const SubwordVocab& vocab, const std::string& word) {
  const std::u32string chars = utf8_decode(word);
  if (chars.empty()) throw ParseError("cannot tokenize empty word");
  const size_t n = chars.size();

  Segmentation seg;
  size_t pos = 0;
  while (pos < n) {
    const size_t remaining = n - pos;
    int matched = -1;
    size_t matched_len = 0;
    for (size_t len = std::min(remaining, vocab.max_stem_len()); len >= 1; --len) {
      std::string candidate = utf8_encode(chars.substr(pos, len));
      if (pos + len == n) {
        utf8_append(candidate, vocab.marker);
      }
      const int id = vocab.id_of(candidate);
      if (id >= 0) {
        matched = id;
        matched_len = len;
        break;
      }
    }
    if (matched < 0) {
      throw UnknownCharacter("word '" + word + "': no piece covers position " +
                             std::to_string(pos));
    }
    seg.piece_ids.push_back(matched);
    seg.char_spans.emplace_back(static_cast<int>(pos), static_cast<int>(pos + matched_len));
    pos += matched_len;
  }
  return seg;
}

inline std::string detokenize(const SubwordVocab& vocab, const std::vector<int>& piece_ids) {
  if (piece_ids.empty()) throw MalformedSequence("empty piece sequence");
  std::u32string out;
  for (size_t i = 0; i < piece_ids.size(); ++i) {
    const bool last = (i + 1 == piece_ids.size());
    if (vocab.is_boundary_piece(piece_ids[i]) != last) {
      throw MalformedSequence("boundary marker " +
                              std::string(last ? "missing on final" : "on non-final") +
                              " piece at position " + std::to_string(i));
    }
    out += vocab.stem(piece_ids[i]);
  }
  return utf8_encode(out);
}

// Pre-segmented input: word <TAB> space-separated pieces (last one marked).
// Gives exact parity with an external BPE tool.
inline std::map<std::string, Segmentation> load_presegmented(const std::string& path,
                                                             const SubwordVocab& vocab) {
  std::map<std::string, Segmentation> out;
  const auto lines = detail::read_lines(path);
  for (size_t i = 0; i < lines.size(); ++i) {
    const auto& line = lines[i];
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw ParseError("line " + std::to_string(i + 1) + ": expected word<TAB>pieces");
    }
    const std::string word = line.substr(0, tab);
    Segmentation seg;
    int pos = 0;
    for (const auto& piece : detail::split_ws(line.substr(tab + 1))) {
      const int id = vocab.id_of(piece);
      if (id < 0) {
        throw ParseError("line " + std::to_string(i + 1) + ": piece not in vocab: " + piece);
      }
      const int len = static_cast<int>(vocab.stem(id).size());
      seg.piece_ids.push_back(id);
      seg.char_spans.emplace_back(pos, pos + len);
      pos += len;
    }
    if (seg.piece_ids.empty()) {
      throw ParseError("line " + std::to_string(i + 1) + ": no pieces for '" + word + "'");
    }
    if (detokenize(vocab, seg.piece_ids) != word) {
      throw ParseError("line " + std::to_string(i + 1) +
                       ": pieces do not spell the word '" + word + "'");
    }
    out[word] = std::move(seg);
  }
  return out;
}

}  // namespace treebias
