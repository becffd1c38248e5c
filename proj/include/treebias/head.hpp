#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "treebias/encoder.hpp"
#include "treebias/errors.hpp"
#include "treebias/linalg.hpp"
#include "treebias/params.hpp"
#include "treebias/trie.hpp"

namespace treebias {

// Embedding of the previously emitted piece; the start-of-sequence sentinel
// embeds as the zero vector.
inline Vector prev_piece_embedding(const ModelParams& params, int prev_piece) {
  const Matrix& emb = params.decoder_embedding();
  if (prev_piece == kStartOfSequence) return Vector::Zero(emb.cols());
  if (prev_piece < 0 || prev_piece >= emb.rows()) {
    throw ShapeError("previous piece id out of range: " + std::to_string(prev_piece));
  }
  return emb.row(prev_piece).transpose();
}

// Embedding of the most probable non-blank phoneme under a CTC posterior
// column (index 0 = blank). Ties resolve to the lowest phoneme index.
inline Vector ctc_phoneme_embedding(const ModelParams& params, const Vector& ctc_posterior) {
  if (ctc_posterior.size() != params.phoneme_embed.rows()) {
    throw ShapeError("CTC posterior length does not match phoneme inventory");
  }
  int best = 1;
  for (int i = 2; i < ctc_posterior.size(); ++i) {
    if (ctc_posterior[i] > ctc_posterior[best]) best = i;
  }
  return params.phoneme_embed.row(best).transpose();
}

// q = Wq * h_enc + Wq' * Emb(prev). With an acoustic phoneme cue h_ctc the
// encoder input becomes h_enc + W^p_q * h_ctc before the same projection.
inline Vector compute_query(const ModelParams& params, const Vector& h_enc, int prev_piece,
                            const Vector* h_ctc = nullptr) {
  Vector enc_in = h_enc;
  if (h_ctc) enc_in += params.query_phoneme_projection() * (*h_ctc);
  return params.head.wq * enc_in + params.head.wq_prev * prev_piece_embedding(params, prev_piece);
}

// Attention keys/values per active branch: k/v columns for active node n are
// projections of the tree encoding of n.
struct KeyValueSet {
  Matrix keys;    // d_att x n_active
  Matrix values;  // d_att x n_active
};

inline KeyValueSet project_keys_values(const ModelParams& params, const TreeEncodings& enc,
                                       const std::vector<int>& active_nodes) {
  KeyValueSet kv;
  kv.keys.resize(params.dims.d_att, static_cast<int>(active_nodes.size()));
  kv.values.resize(params.dims.d_att, static_cast<int>(active_nodes.size()));
  for (int j = 0; j < static_cast<int>(active_nodes.size()); ++j) {
    Vector h = enc.h.row(enc.row_of(active_nodes[j])).transpose();
    kv.keys.col(j) = params.head.wk * h;
    kv.values.col(j) = params.head.wv * h;
  }
  return kv;
}

// Pointer distribution over subword pieces: softmax of scaled dot products
// restricted to the pieces on active tree branches; every other piece has
// probability exactly zero.
struct PtrDistribution {
  std::vector<int> active_pieces;  // ascending piece ids
  std::vector<int> active_nodes;   // node reached by each active piece
  Vector probs;                    // aligned with active_pieces

  double prob_of(int piece) const {
    auto it = std::lower_bound(active_pieces.begin(), active_pieces.end(), piece);
    if (it == active_pieces.end() || *it != piece) return 0.0;
    return probs[static_cast<int>(it - active_pieces.begin())];
  }
};

inline PtrDistribution ptr_distribution(const ModelParams& params, const Vector& query,
                                        const TreeEncodings& enc, const PrefixTree& tree,
                                        const std::vector<int>& active_nodes,
                                        KeyValueSet* kv_out = nullptr) {
  PtrDistribution out;
  out.active_nodes = active_nodes;
  out.active_pieces.reserve(active_nodes.size());
  for (int n : active_nodes) {
    const int piece = tree.node(n).piece_id;
    if (!out.active_pieces.empty() && piece <= out.active_pieces.back()) {
      throw DuplicateActivePiece("active branches must carry distinct ascending piece ids");
    }
    out.active_pieces.push_back(piece);
  }
  KeyValueSet kv = project_keys_values(params, enc, active_nodes);
  const double scale = 1.0 / std::sqrt(static_cast<double>(params.dims.d_att));
  Vector logits = (kv.keys.transpose() * query) * scale;
  const double m = logits.maxCoeff();
  Vector e = (logits.array() - m).exp();
  out.probs = e / e.sum();
  if (kv_out) *kv_out = std::move(kv);
  return out;
}

// h_ptr = sum_j P^ptr(j) v_j over the active branches.
inline Vector pointer_context(const PtrDistribution& ptr, const KeyValueSet& kv) {
  return kv.values * ptr.probs;
}

// p_gen = sigmoid(w_gen . [h_joint; h_ptr] + b_gen), computed stably.
inline double generation_prob(const ModelParams& params, const Vector& h_joint,
                              const Vector& h_ptr) {
  if (h_joint.size() + h_ptr.size() != params.head.wgen.size()) {
    throw ShapeError("gate input does not match w_gen size");
  }
  double z = params.head.bgen;
  z += params.head.wgen.head(h_joint.size()).dot(h_joint);
  z += params.head.wgen.tail(h_ptr.size()).dot(h_ptr);
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Final output distribution over V pieces plus blank (index V):
//   P(y) = (1 - p_gen) P_model(y) + p_gen P_ptr(y),
// where P_ptr's blank mass is zero. Both inputs must already be normalized.
inline Vector interpolate(const Vector& model_probs, const PtrDistribution& ptr, double p_gen,
                          int vocab_size) {
  if (model_probs.size() != vocab_size + 1) {
    throw ShapeError("model distribution must cover all pieces plus blank");
  }
  if (std::abs(model_probs.sum() - 1.0) > 1e-9) {
    throw NotNormalized("model distribution does not sum to 1");
  }
  if (std::abs(ptr.probs.sum() - 1.0) > 1e-9) {
    throw NotNormalized("pointer distribution does not sum to 1");
  }
  Vector out = (1.0 - p_gen) * model_probs;
  for (int j = 0; j < static_cast<int>(ptr.active_pieces.size()); ++j) {
    out[ptr.active_pieces[j]] += p_gen * ptr.probs[j];
  }
  return out;
}

// One biased step bundled: everything downstream needs for scoring and for
// the backward pass.
struct StepOutput {
  Vector query;
  std::vector<int> active_nodes;
  KeyValueSet kv;
  PtrDistribution ptr;
  Vector h_ptr;
  double p_gen = 0.0;
  Vector probs;  // V+1, final interpolated distribution
};

inline StepOutput biased_step(const ModelParams& params, const TreeEncodings& enc,
                              const PrefixTree& tree, const std::vector<int>& active_nodes,
                              const Vector& h_enc, const Vector& h_joint,
                              const Vector& model_probs, int prev_piece,
                              const Vector* h_ctc = nullptr) {
  StepOutput s;
  s.query = compute_query(params, h_enc, prev_piece, h_ctc);
  s.active_nodes = active_nodes;
  s.ptr = ptr_distribution(params, s.query, enc, tree, active_nodes, &s.kv);
  s.h_ptr = pointer_context(s.ptr, s.kv);
  s.p_gen = generation_prob(params, h_joint, s.h_ptr);
  s.probs = interpolate(model_probs, s.ptr, s.p_gen, params.dims.vocab_size);
  return s;
}

}  // namespace treebias
