#pragma once

#include <optional>
#include <string>
#include <vector>

#include "treebias/alignment.hpp"
#include "treebias/errors.hpp"
#include "treebias/linalg.hpp"
#include "treebias/params.hpp"
#include "treebias/trie.hpp"

namespace treebias {

// Per-word alignment inputs of the phoneme feature: the subword-to-character
// matrix, the character-to-phoneme matrix, and the phoneme embedding rows
// P^(w) gathered from the fixed table.
struct WordPhonemeData {
  Matrix sub_char;            // l_s x l_c, binary
  AlignmentMatrix char_phon;  // l_c x l_p
  Matrix phon_embed;          // l_p x d_p

  bool valid() const { return sub_char.size() > 0; }
};

inline WordPhonemeData make_word_phoneme_data(const LexiconEntry& entry,
                                              const Segmentation& seg,
                                              const AlignmentMatrix& char_phon,
                                              const Matrix& phoneme_table) {
  WordPhonemeData w;
  w.sub_char = subword_char_matrix(entry, seg);
  if (char_phon.rows() != entry.num_chars() || char_phon.cols() != entry.num_phonemes()) {
    throw ShapeError("alignment shape mismatch for '" + entry.word + "'");
  }
  w.char_phon = char_phon;
  w.phon_embed.resize(entry.num_phonemes(), phoneme_table.cols());
  for (int j = 0; j < entry.num_phonemes(); ++j) {
    w.phon_embed.row(j) = phoneme_table.row(entry.phonemes[j]);
  }
  return w;
}

// Indexed by biasing-word position; a default-constructed slot means the
// word has no alignment data.
using WordAlignments = std::vector<WordPhonemeData>;

// Raw phoneme feature of node n before the linear map:
//   sum over w in W(n) of row i_n of (A_s2c * A_c2p * P).
inline Vector node_phoneme_feature(const PrefixTree& tree, int n,
                                   const WordAlignments& aligns, int d_p) {
  const TrieNode& node = tree.node(n);
  Vector phi = Vector::Zero(d_p);
  for (int w : node.words) {
    if (w >= static_cast<int>(aligns.size()) || !aligns[w].valid()) {
      throw MissingAlignment("no alignment data for biasing word index " + std::to_string(w));
    }
    const auto& wd = aligns[w];
    if (node.depth > wd.sub_char.rows()) {
      throw InvariantBreach("node depth exceeds subword count of a member word");
    }
    // row (depth-1) of A_s2c * (A_c2p * P), computed without forming the full product
    phi += (wd.sub_char.row(node.depth - 1) * (wd.char_phon.weights * wd.phon_embed)).transpose();
  }
  return phi;
}

// e(n): phoneme feature mapped into the encoding space.
inline Vector phoneme_node_encoding(const PrefixTree& tree, int n,
                                    const WordAlignments& aligns,
                                    const EncoderParams& enc) {
  return enc.phoneme_proj * node_phoneme_feature(tree, n, aligns, enc.d_p);
}

struct EncodingOptions {
  EncodingMode mode = EncodingMode::Both;
  // The virtual root row anchors depth-1 nodes in the graph; disable for the
  // ablation where depth-1 nodes only see themselves.
  bool include_root = true;
};

// Node encodings H with an optional root row; row_of maps node ids to rows.
struct TreeEncodings {
  Matrix h;
  bool has_root = true;

  int row_of(int node_id) const { return has_root ? node_id : node_id - 1; }
};

// H^(0): grapheme embeddings, phoneme encodings, or their sum per node.
inline TreeEncodings init_node_encodings(const PrefixTree& tree, const EncoderParams& enc,
                                         const WordAlignments& aligns,
                                         const EncodingOptions& opts = {}) {
  const int n_rows = tree.size() + (opts.include_root ? 1 : 0);
  TreeEncodings out;
  out.has_root = opts.include_root;
  out.h = Matrix::Zero(n_rows, enc.d);
  if (opts.include_root) out.h.row(0) = enc.root_embed.transpose();
  for (int n = 1; n <= tree.size(); ++n) {
    const int row = out.row_of(n);
    const int piece = tree.node(n).piece_id;
    if (opts.mode != EncodingMode::Phoneme) {
      out.h.row(row) += enc.piece_embed.row(piece);
    }
    if (opts.mode != EncodingMode::Grapheme) {
      out.h.row(row) += phoneme_node_encoding(tree, n, aligns, enc).transpose();
    }
  }
  return out;
}

inline TreeEncodings init_node_encodings(const PrefixTree& tree, const EncoderParams& enc) {
  EncodingOptions opts;
  opts.mode = EncodingMode::Grapheme;
  return init_node_encodings(tree, enc, {}, opts);
}

// Normalization matrix matching the encodings' root choice.
inline Matrix gcn_norm_for(const PrefixTree& tree, bool include_root) {
  const auto adj = adjacency(tree);
  if (include_root) return gcn_normalization(adj);
  const int n = tree.size();
  TreeAdjacency sub;
  sub.a_tilde = adj.a_tilde.bottomRightCorner(n, n);
  sub.degrees = sub.a_tilde.rowwise().sum();
  return gcn_normalization(sub);
}

// Pre-activation inputs of each layer, kept for the backward pass.
struct GcnCache {
  std::vector<Matrix> h;  // h[0] = H^(0), h[l] = H^(l)
  std::vector<Matrix> z;  // z[l] = S * H^(l) * W^(l), pre-ReLU
};

// L applications of H <- ReLU(S H W). L = 0 returns H^(0) unchanged.
inline Matrix gcn_forward(const Matrix& h0, const Matrix& s_norm, const EncoderParams& enc,
                          GcnCache* cache = nullptr) {
  Matrix h = h0;
  if (cache) {
    cache->h.clear();
    cache->z.clear();
    cache->h.push_back(h);
  }
  for (int l = 0; l < enc.gcn_layers; ++l) {
    Matrix z = s_norm * h * enc.gcn_weights[l];
    if (!z.allFinite()) throw NumericalError("non-finite GCN activation at layer " + std::to_string(l));
    h = z.cwiseMax(0.0);
    if (cache) {
      cache->z.push_back(std::move(z));
      cache->h.push_back(h);
    }
  }
  return h;
}

// Full tree-side forward: H^(0) then the GCN stack.
inline TreeEncodings encode_tree(const PrefixTree& tree, const EncoderParams& enc,
                                 const WordAlignments& aligns,
                                 const EncodingOptions& opts = {},
                                 GcnCache* cache = nullptr) {
  TreeEncodings h0 = init_node_encodings(tree, enc, aligns, opts);
  const Matrix s = gcn_norm_for(tree, opts.include_root);
  TreeEncodings out;
  out.has_root = h0.has_root;
  out.h = gcn_forward(h0.h, s, enc, cache);
  return out;
}

}  // namespace treebias
