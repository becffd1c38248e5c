#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "treebias/encoder.hpp"
#include "treebias/errors.hpp"
#include "treebias/head.hpp"
#include "treebias/linalg.hpp"
#include "treebias/params.hpp"
#include "treebias/trie.hpp"

namespace treebias {

// One teacher-forced decoding step. The prefix is the in-word piece history
// that selects the active branches; prev_piece feeds the query (the last
// non-blank emission, start-of-sequence at utterance start). target may be
// any piece id or vocab_size for blank. An empty ctc_posterior disables the
// acoustic phoneme cue for this step.
struct TrainStep {
  Vector h_enc;
  Vector h_joint;
  Vector model_probs;     // V+1, normalized
  Vector ctc_posterior;   // inventory-sized, or empty
  std::vector<int> prefix;
  int prev_piece = kStartOfSequence;
  int target = 0;
};

struct TrainUtterance {
  std::vector<TrainStep> steps;
};

// Gradient accumulator mirroring every learned tensor. Fixed tensors
// (phoneme table, identity projections) have no slot or stay zero.
struct Gradients {
  Matrix piece_embed;
  Vector root_embed;
  std::vector<Matrix> gcn_weights;
  Matrix phoneme_proj;
  Matrix wq, wq_prev, wk, wv;
  Vector wgen;
  double bgen = 0.0;
  Matrix query_phoneme_proj;
  Matrix decoder_embed;

  static Gradients zeros_like(const ModelParams& p) {
    Gradients g;
    g.piece_embed = Matrix::Zero(p.enc.piece_embed.rows(), p.enc.piece_embed.cols());
    g.root_embed = Vector::Zero(p.enc.root_embed.size());
    g.gcn_weights.resize(p.enc.gcn_weights.size());
    for (size_t l = 0; l < g.gcn_weights.size(); ++l) {
      g.gcn_weights[l] = Matrix::Zero(p.enc.gcn_weights[l].rows(), p.enc.gcn_weights[l].cols());
    }
    g.phoneme_proj = Matrix::Zero(p.enc.phoneme_proj.rows(), p.enc.phoneme_proj.cols());
    g.wq = Matrix::Zero(p.head.wq.rows(), p.head.wq.cols());
    g.wq_prev = Matrix::Zero(p.head.wq_prev.rows(), p.head.wq_prev.cols());
    g.wk = Matrix::Zero(p.head.wk.rows(), p.head.wk.cols());
    g.wv = Matrix::Zero(p.head.wv.rows(), p.head.wv.cols());
    g.wgen = Vector::Zero(p.head.wgen.size());
    g.bgen = 0.0;
    g.query_phoneme_proj =
        Matrix::Zero(p.head.query_phoneme_proj.rows(), p.head.query_phoneme_proj.cols());
    if (!p.head.tied_embeddings) {
      g.decoder_embed = Matrix::Zero(p.head.decoder_embed.rows(), p.head.decoder_embed.cols());
    }
    return g;
  }
};

// Plain gradient descent on every learned tensor; fixed tensors are left
// untouched so identity projections stay identities.
inline void sgd_step(ModelParams& p, const Gradients& g, double lr) {
  p.enc.piece_embed -= lr * g.piece_embed;
  p.enc.root_embed -= lr * g.root_embed;
  for (size_t l = 0; l < p.enc.gcn_weights.size(); ++l) {
    p.enc.gcn_weights[l] -= lr * g.gcn_weights[l];
  }
  if (p.enc.proj_learned()) p.enc.phoneme_proj -= lr * g.phoneme_proj;
  p.head.wq -= lr * g.wq;
  p.head.wq_prev -= lr * g.wq_prev;
  p.head.wk -= lr * g.wk;
  p.head.wv -= lr * g.wv;
  p.head.wgen -= lr * g.wgen;
  p.head.bgen -= lr * g.bgen;
  if (!p.head.tied_phoneme_proj) p.head.query_phoneme_proj -= lr * g.query_phoneme_proj;
  if (!p.head.tied_embeddings) p.head.decoder_embed -= lr * g.decoder_embed;
}

// Adam-style moment estimates over every learned tensor. The toy trainer
// needs per-parameter step sizes: embeddings, GCN weights, attention maps,
// and the scalar gate bias sit at very different gradient scales.
struct AdamState {
  Gradients m, v;  // first and second moments, same shapes as the gradients
  int t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled weight decay on all weight tensors (never the gate bias). It
  // bounds the attention logit scale — otherwise nothing stops the softmax
  // from sharpening by inflating encodings without limit — and it makes gate
  // saturation recoverable by pulling the weights back until gradients flow.
  double weight_decay = 0.0;

  static AdamState zeros_like(const ModelParams& p) {
    AdamState s;
    s.m = Gradients::zeros_like(p);
    s.v = Gradients::zeros_like(p);
    return s;
  }

  void update(ModelParams& p, const Gradients& g, double lr) {
    ++t;
    const double c1 = 1.0 / (1.0 - std::pow(beta1, t));
    const double c2 = 1.0 / (1.0 - std::pow(beta2, t));
    auto step = [&](auto& theta, auto& gm, auto& gv, const auto& grad) {
      gm = beta1 * gm + (1.0 - beta1) * grad;
      gv = (beta2 * gv.array() + (1.0 - beta2) * grad.array().square()).matrix();
      theta *= (1.0 - lr * weight_decay);
      theta.array() -= lr * (gm.array() * c1) / ((gv.array() * c2).sqrt() + eps);
    };
    step(p.enc.piece_embed, m.piece_embed, v.piece_embed, g.piece_embed);
    step(p.enc.root_embed, m.root_embed, v.root_embed, g.root_embed);
    for (size_t l = 0; l < p.enc.gcn_weights.size(); ++l) {
      step(p.enc.gcn_weights[l], m.gcn_weights[l], v.gcn_weights[l], g.gcn_weights[l]);
    }
    if (p.enc.proj_learned()) {
      step(p.enc.phoneme_proj, m.phoneme_proj, v.phoneme_proj, g.phoneme_proj);
    }
    step(p.head.wq, m.wq, v.wq, g.wq);
    step(p.head.wq_prev, m.wq_prev, v.wq_prev, g.wq_prev);
    step(p.head.wk, m.wk, v.wk, g.wk);
    step(p.head.wv, m.wv, v.wv, g.wv);
    step(p.head.wgen, m.wgen, v.wgen, g.wgen);
    m.bgen = beta1 * m.bgen + (1.0 - beta1) * g.bgen;
    v.bgen = beta2 * v.bgen + (1.0 - beta2) * g.bgen * g.bgen;
    p.head.bgen -= lr * (m.bgen * c1) / (std::sqrt(v.bgen * c2) + eps);
    if (!p.head.tied_phoneme_proj) {
      step(p.head.query_phoneme_proj, m.query_phoneme_proj, v.query_phoneme_proj,
           g.query_phoneme_proj);
    }
    if (!p.head.tied_embeddings) {
      step(p.head.decoder_embed, m.decoder_embed, v.decoder_embed, g.decoder_embed);
    }
  }
};

// Mean negative log-likelihood of the teacher-forced targets under the
// biased distribution, with analytic gradients for every learned tensor.
// The tree is encoded once per call; step gradients accumulate into the
// final node encodings and flow back through the GCN stack in one pass.
inline double loss_and_gradients(const ModelParams& params, const PrefixTree& tree,
                                 const WordAlignments& aligns, const EncodingOptions& enc_opts,
                                 const std::vector<TrainUtterance>& batch,
                                 Gradients* grads = nullptr) {
  int n_steps = 0;
  for (const auto& u : batch) n_steps += static_cast<int>(u.steps.size());
  if (n_steps == 0) throw EmptyInput("training batch has no steps");

  GcnCache cache;
  TreeEncodings h0 = init_node_encodings(tree, params.enc, aligns, enc_opts);
  const Matrix s_norm = gcn_norm_for(tree, enc_opts.include_root);
  TreeEncodings enc;
  enc.has_root = h0.has_root;
  enc.h = gcn_forward(h0.h, s_norm, params.enc, &cache);

  Matrix d_hl;
  if (grads) d_hl = Matrix::Zero(enc.h.rows(), enc.h.cols());

  const int vsize = params.dims.vocab_size;
  const double inv_steps = 1.0 / static_cast<double>(n_steps);
  double loss = 0.0;

  for (const auto& utt : batch) {
    for (const auto& step : utt.steps) {
      if (step.target < 0 || step.target > vsize) {
        throw ShapeError("target id out of range: " + std::to_string(step.target));
      }
      const std::vector<int> active = active_set(tree, step.prefix);
      if (active.empty()) {
        // Nothing to point at: the step reduces to the unbiased model and
        // touches no learned parameter.
        const double p_plain = step.model_probs[step.target];
        if (!(p_plain > 0.0)) {
          throw InfiniteLoss("target has zero probability at a teacher-forced step");
        }
        loss -= std::log(p_plain) * inv_steps;
        continue;
      }
      Vector h_ctc;
      const bool use_ctc = step.ctc_posterior.size() > 0;
      if (use_ctc) h_ctc = ctc_phoneme_embedding(params, step.ctc_posterior);
      StepOutput out = biased_step(params, enc, tree, active, step.h_enc, step.h_joint,
                                   step.model_probs, step.prev_piece,
                                   use_ctc ? &h_ctc : nullptr);
      const double p_y = out.probs[step.target];
      if (!(p_y > 0.0)) {
        throw InfiniteLoss("target has zero probability at a teacher-forced step");
      }
      loss -= std::log(p_y) * inv_steps;

      if (!grads) continue;

      // d loss / d P[y]
      const double g_py = -inv_steps / p_y;

      // Interpolation: P[y] = (1-p_gen) Pm[y] + p_gen ptr(y).
      double ptr_mass_y = 0.0;
      int y_active_idx = -1;
      if (step.target < vsize) {
        const auto& ap = out.ptr.active_pieces;
        auto it = std::lower_bound(ap.begin(), ap.end(), step.target);
        if (it != ap.end() && *it == step.target) {
          y_active_idx = static_cast<int>(it - ap.begin());
          ptr_mass_y = out.ptr.probs[y_active_idx];
        }
      }
      const double d_pgen_from_interp = g_py * (ptr_mass_y - step.model_probs[step.target]);

      Vector d_phat = Vector::Zero(out.ptr.probs.size());
      if (y_active_idx >= 0) d_phat[y_active_idx] += g_py * out.p_gen;

      // Gate: p_gen = sigmoid(wgen . [h_joint; h_ptr] + bgen).
      const double sig_d = out.p_gen * (1.0 - out.p_gen);
      const double d_z = d_pgen_from_interp * sig_d;
      grads->wgen.head(step.h_joint.size()) += d_z * step.h_joint;
      grads->wgen.tail(out.h_ptr.size()) += d_z * out.h_ptr;
      grads->bgen += d_z;
      Vector d_hptr = d_z * params.head.wgen.tail(out.h_ptr.size());

      // Context: h_ptr = sum_j phat_j v_j.
      d_phat += out.kv.values.transpose() * d_hptr;

      // Softmax over active branches.
      const double dot = out.ptr.probs.dot(d_phat);
      Vector d_logits = (out.ptr.probs.array() * (d_phat.array() - dot)).matrix();

      // Scores: logit_j = q . k_j / sqrt(d_att).
      const double scale = 1.0 / std::sqrt(static_cast<double>(params.dims.d_att));
      Vector d_q = scale * (out.kv.keys * d_logits);

      // Per-branch keys/values back to projections and node encodings.
      const int n_active = static_cast<int>(active.size());
      for (int j = 0; j < n_active; ++j) {
        const int row = enc.row_of(active[j]);
        Vector h_node = enc.h.row(row).transpose();
        Vector d_kj = scale * d_logits[j] * out.query;
        Vector d_vj = out.ptr.probs[j] * d_hptr;
        grads->wk += d_kj * h_node.transpose();
        grads->wv += d_vj * h_node.transpose();
        d_hl.row(row) +=
            (params.head.wk.transpose() * d_kj + params.head.wv.transpose() * d_vj).transpose();
      }

      // Query: q = wq (h_enc + Wpq h_ctc) + wq_prev Emb(prev).
      Vector enc_in = step.h_enc;
      if (use_ctc) enc_in += params.query_phoneme_projection() * h_ctc;
      grads->wq += d_q * enc_in.transpose();
      if (use_ctc) {
        Matrix d_proj = (params.head.wq.transpose() * d_q) * h_ctc.transpose();
        if (params.head.tied_phoneme_proj) {
          grads->phoneme_proj += d_proj;
        } else {
          grads->query_phoneme_proj += d_proj;
        }
      }
      Vector emb_prev = prev_piece_embedding(params, step.prev_piece);
      grads->wq_prev += d_q * emb_prev.transpose();
      if (step.prev_piece != kStartOfSequence) {
        Vector d_emb = params.head.wq_prev.transpose() * d_q;
        if (params.head.tied_embeddings) {
          grads->piece_embed.row(step.prev_piece) += d_emb.transpose();
        } else {
          grads->decoder_embed.row(step.prev_piece) += d_emb.transpose();
        }
      }
    }
  }

  if (!std::isfinite(loss)) throw NumericalError("non-finite training loss");
  if (!grads) return loss;

  // GCN backward: H^(l+1) = ReLU(S H^(l) W^(l)).
  Matrix d_h = d_hl;
  for (int l = params.enc.gcn_layers - 1; l >= 0; --l) {
    Matrix d_zl = (cache.z[l].array() > 0.0).select(d_h, Matrix::Zero(d_h.rows(), d_h.cols()));
    grads->gcn_weights[l] += (s_norm * cache.h[l]).transpose() * d_zl;
    d_h = s_norm.transpose() * d_zl * params.enc.gcn_weights[l].transpose();
  }

  // H^(0) rows back to embeddings and the phoneme projection.
  if (enc_opts.include_root) grads->root_embed += d_h.row(0).transpose();
  for (int n = 1; n <= tree.size(); ++n) {
    const int row = h0.row_of(n);
    if (enc_opts.mode != EncodingMode::Phoneme) {
      grads->piece_embed.row(tree.node(n).piece_id) += d_h.row(row);
    }
    if (enc_opts.mode != EncodingMode::Grapheme && params.enc.proj_learned()) {
      Vector phi = node_phoneme_feature(tree, n, aligns, params.enc.d_p);
      grads->phoneme_proj += d_h.row(row).transpose() * phi.transpose();
    }
  }
  return loss;
}

}  // namespace treebias
