#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "treebias/errors.hpp"
#include "treebias/io.hpp"
#include "treebias/text.hpp"

namespace treebias {

// Phoneme inventory with the CTC blank reserved at index 0. Real phonemes
// occupy indices 1..size-1 in file order.
struct PhonemeInventory {
  static constexpr const char* kBlankSymbol = "<blk>";

  std::vector<std::string> symbols;  // symbols[0] == kBlankSymbol

  int blank_id() const { return 0; }
  int size() const { return static_cast<int>(symbols.size()); }

  // Index of a symbol, or -1 if absent.
  int id_of(const std::string& sym) const {
    auto it = index_.find(sym);
    return it == index_.end() ? -1 : it->second;
  }

  static PhonemeInventory from_symbols(const std::vector<std::string>& phonemes) {
    PhonemeInventory inv;
    inv.symbols.push_back(kBlankSymbol);
    for (const auto& s : phonemes) {
      if (s.empty()) throw ParseError("empty phoneme symbol");
      if (inv.index_.count(s) || s == kBlankSymbol) {
        throw DuplicatePhoneme("duplicate phoneme symbol: " + s);
      }
      inv.index_[s] = static_cast<int>(inv.symbols.size());
      inv.symbols.push_back(s);
    }
    if (inv.symbols.size() < 2) throw EmptyInventory("inventory has no phonemes");
    inv.index_[kBlankSymbol] = 0;
    return inv;
  }

 private:
  std::unordered_map<std::string, int> index_;
};

// One word with its character decomposition and phoneme ids.
struct LexiconEntry {
  std::string word;
  std::u32string chars;       // Unicode scalar values of word
  std::vector<int> phonemes;  // non-blank inventory ids

  int num_chars() const { return static_cast<int>(chars.size()); }
  int num_phonemes() const { return static_cast<int>(phonemes.size()); }
};

using Lexicon = std::map<std::string, LexiconEntry>;

struct BiasingList {
  std::string name;
  std::vector<LexiconEntry> entries;  // unique words, file order

  bool empty() const { return entries.empty(); }
  size_t size() const { return entries.size(); }
};

// One symbol per line; blank gets prepended at index 0.
inline PhonemeInventory load_inventory(const std::string& path) {
  std::vector<std::string> syms;
  for (const auto& line : detail::read_lines(path)) {
    if (!line.empty()) syms.push_back(line);
  }
  if (syms.empty()) throw EmptyInventory("empty inventory file: " + path);
  return PhonemeInventory::from_symbols(syms);
}

inline LexiconEntry make_entry(const std::string& word,
                               const std::vector<std::string>& phoneme_syms,
                               const PhonemeInventory& inv) {
  LexiconEntry e;
  e.word = word;
  e.chars = utf8_decode(word);
  if (e.chars.empty()) throw ParseError("empty word");
  if (phoneme_syms.empty()) {
    throw ParseError("entry has no phonemes: " + word);
  }
  for (const auto& sym : phoneme_syms) {
    const int id = inv.id_of(sym);
    if (id <= 0) {  // unknown or blank
      throw UnknownPhoneme("word '" + word + "': unknown phoneme '" + sym + "'");
    }
    e.phonemes.push_back(id);
  }
  return e;
}

struct LexiconLoadResult {
  Lexicon lexicon;
  int overridden = 0;  // duplicate words where a later line replaced an earlier one
};

// TSV: word <TAB> space-separated phoneme symbols. Later duplicates win.
inline LexiconLoadResult load_lexicon(const std::string& path,
                                      const PhonemeInventory& inv) {
  LexiconLoadResult result;
  const auto lines = detail::read_lines(path);
  for (size_t i = 0; i < lines.size(); ++i) {
    const auto& line = lines[i];
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw ParseError("line " + std::to_string(i + 1) + ": expected word<TAB>phonemes");
    }
    const std::string word = line.substr(0, tab);
    const auto syms = detail::split_ws(line.substr(tab + 1));
    if (syms.empty()) {
      throw ParseError("line " + std::to_string(i + 1) + ": no phonemes for '" + word + "'");
    }
    LexiconEntry entry = make_entry(word, syms, inv);
    auto [it, inserted] = result.lexicon.insert_or_assign(word, std::move(entry));
    (void)it;
    if (!inserted) ++result.overridden;
  }
  return result;
}

inline void save_lexicon(const std::string& path, const Lexicon& lex,
                         const PhonemeInventory& inv) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  for (const auto& [word, entry] : lex) {
    out << word << '\t';
    for (size_t i = 0; i < entry.phonemes.size(); ++i) {
      if (i) out << ' ';
      out << inv.symbols[entry.phonemes[i]];
    }
    out << '\n';
  }
}

inline BiasingList make_biasing_list(const std::vector<std::string>& words,
                                     const Lexicon& lexicon,
                                     const std::string& name = "") {
  BiasingList list;
  list.name = name;
  std::set<std::string> seen;
  for (const auto& w : words) {
    if (w.empty() || !seen.insert(w).second) continue;
    auto it = lexicon.find(w);
    if (it == lexicon.end()) {
      throw MissingPronunciation("biasing word not in lexicon: " + w);
    }
    list.entries.push_back(it->second);
  }
  return list;
}

// One word per line; duplicates collapse to the first occurrence.
inline BiasingList load_biasing_list(const std::string& path, const Lexicon& lexicon,
                                     const std::string& name = "") {
  std::vector<std::string> words;
  for (const auto& line : detail::read_lines(path)) {
    if (!line.empty()) words.push_back(line);
  }
  return make_biasing_list(words, lexicon, name.empty() ? path : name);
}

}  // namespace treebias
