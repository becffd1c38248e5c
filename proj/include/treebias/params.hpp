#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treebias/errors.hpp"
#include "treebias/io.hpp"
#include "treebias/linalg.hpp"
#include "treebias/rng.hpp"

namespace treebias {

// Phoneme embedding source: one-hot rows, one-hot rows followed by a learned
// linear map, or fixed vectors ingested from a file.
enum class PhonemeEmbedMode { OneHot, OneHotLinear, External };

// Node encoding composition: grapheme embeddings only, phoneme features only
// (ablation), or their sum.
enum class EncodingMode { Grapheme, Phoneme, Both };

inline std::string to_string(PhonemeEmbedMode m) {
  switch (m) {
    case PhonemeEmbedMode::OneHot: return "oh";
    case PhonemeEmbedMode::OneHotLinear: return "oh+";
    case PhonemeEmbedMode::External: return "external";
  }
  return "?";
}

inline PhonemeEmbedMode parse_phoneme_embed_mode(const std::string& s) {
  if (s == "oh") return PhonemeEmbedMode::OneHot;
  if (s == "oh+") return PhonemeEmbedMode::OneHotLinear;
  if (s == "external") return PhonemeEmbedMode::External;
  throw ParseError("unknown phoneme embedding mode: " + s);
}

inline std::string to_string(EncodingMode m) {
  switch (m) {
    case EncodingMode::Grapheme: return "grapheme";
    case EncodingMode::Phoneme: return "phoneme";
    case EncodingMode::Both: return "both";
  }
  return "?";
}

inline EncodingMode parse_encoding_mode(const std::string& s) {
  if (s == "grapheme") return EncodingMode::Grapheme;
  if (s == "phoneme") return EncodingMode::Phoneme;
  if (s == "both") return EncodingMode::Both;
  throw ParseError("unknown encoding mode: " + s);
}

struct ModelDims {
  int vocab_size = 0;      // V
  int d = 16;              // node encoding size
  int d_enc = 16;          // acoustic encoder output size
  int d_att = 16;          // attention size (defaults to d)
  int d_joint = 16;        // joint network output size
  int d_p = 0;             // phoneme feature size
  int gcn_layers = 2;      // L
  int inventory_size = 0;  // phonemes incl. blank
};

struct EncoderParams {
  Matrix piece_embed;                // V x d, shared with the query side when tied
  Vector root_embed;                 // d
  std::vector<Matrix> gcn_weights;   // L matrices, d x d, applied on the right
  Matrix phoneme_proj;               // d x d_p (identity when not learned)
  PhonemeEmbedMode phoneme_embed_mode = PhonemeEmbedMode::OneHotLinear;
  int d = 0;
  int d_p = 0;
  int gcn_layers = 0;

  // The linear map of the phoneme feature is a parameter only in oh+ mode;
  // oh and external modes fix it to the identity.
  bool proj_learned() const { return phoneme_embed_mode == PhonemeEmbedMode::OneHotLinear; }
};

struct PointerHead {
  Matrix wq;                  // d_att x d_enc
  Matrix wq_prev;             // d_att x d, applied to Emb(y_prev)
  Matrix wk;                  // d_att x d
  Matrix wv;                  // d_att x d
  Vector wgen;                // d_joint + d_att
  double bgen = 0.0;
  Matrix query_phoneme_proj;  // d_enc x d_p (unused when tied_phoneme_proj)
  Matrix decoder_embed;       // V x d, used only when !tied_embeddings
  bool tied_embeddings = true;
  bool tied_phoneme_proj = false;
  int d_att = 0;
  int d_enc = 0;
  int d_joint = 0;
};

// All model state: learned encoder + head parameters plus the fixed phoneme
// embedding table. Immutable during forward passes.
struct ModelParams {
  ModelDims dims;
  EncoderParams enc;
  PointerHead head;
  Matrix phoneme_embed;  // inventory_size x d_p, row 0 (blank) all zero, fixed
  uint64_t seed = 0;

  const Matrix& decoder_embedding() const {
    return head.tied_embeddings ? enc.piece_embed : head.decoder_embed;
  }
  // The query-side phoneme projection of the phoneme-aware query. Kept
  // separate from the encoder's map unless explicitly tied.
  const Matrix& query_phoneme_projection() const {
    return head.tied_phoneme_proj ? enc.phoneme_proj : head.query_phoneme_proj;
  }
};

namespace detail {

inline void fill_uniform(Matrix& m, Rng& rng, double bound) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-bound, bound);
  }
}

inline void fill_uniform(Vector& v, Rng& rng, double bound) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.uniform(-bound, bound);
}

}  // namespace detail

struct ModelOptions {
  PhonemeEmbedMode phoneme_embed_mode = PhonemeEmbedMode::OneHotLinear;
  bool tied_embeddings = true;
  bool tied_phoneme_proj = false;
  // External phoneme vectors (inventory_size x d_p); required in External mode.
  Matrix external_phoneme_embed;
};

// One-hot phoneme table over the inventory; row 0 (blank) stays zero and is
// never selected by the non-blank argmax.
inline Matrix one_hot_phoneme_table(int inventory_size) {
  Matrix t = Matrix::Identity(inventory_size, inventory_size);
  t(0, 0) = 0.0;
  return t;
}

// Deterministic parameter initialization: every learned tensor is filled
// entry-by-entry, row-major, in manifest order, uniform(-1/sqrt(d), 1/sqrt(d)).
// The generation-gate bias starts at -2 so untrained biasing is weak.
inline ModelParams init_model(ModelDims dims, const ModelOptions& opts, uint64_t seed) {
  if (dims.vocab_size <= 0 || dims.d <= 0 || dims.d_enc <= 0 || dims.d_joint <= 0 ||
      dims.gcn_layers < 0 || dims.inventory_size < 2) {
    throw ShapeError("invalid model dimensions");
  }
  if (dims.d_att <= 0) dims.d_att = dims.d;

  ModelParams p;
  p.seed = seed;
  switch (opts.phoneme_embed_mode) {
    case PhonemeEmbedMode::OneHot:
      dims.d_p = dims.inventory_size;
      if (dims.d_p != dims.d) {
        throw ShapeError("one-hot phoneme mode requires d == inventory size");
      }
      p.phoneme_embed = one_hot_phoneme_table(dims.inventory_size);
      break;
    case PhonemeEmbedMode::OneHotLinear:
      dims.d_p = dims.inventory_size;
      p.phoneme_embed = one_hot_phoneme_table(dims.inventory_size);
      break;
    case PhonemeEmbedMode::External:
      if (opts.external_phoneme_embed.rows() != dims.inventory_size) {
        throw ShapeError("external phoneme table must have one row per inventory symbol");
      }
      dims.d_p = static_cast<int>(opts.external_phoneme_embed.cols());
      if (dims.d_p != dims.d) {
        throw ShapeError("external phoneme mode requires embedding dim == d");
      }
      p.phoneme_embed = opts.external_phoneme_embed;
      p.phoneme_embed.row(0).setZero();
      break;
  }
  p.dims = dims;

  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(dims.d));

  EncoderParams& enc = p.enc;
  enc.phoneme_embed_mode = opts.phoneme_embed_mode;
  enc.d = dims.d;
  enc.d_p = dims.d_p;
  enc.gcn_layers = dims.gcn_layers;
  enc.piece_embed.resize(dims.vocab_size, dims.d);
  detail::fill_uniform(enc.piece_embed, rng, bound);
  enc.root_embed.resize(dims.d);
  detail::fill_uniform(enc.root_embed, rng, bound);
  enc.gcn_weights.resize(dims.gcn_layers);
  for (auto& w : enc.gcn_weights) {
    w.resize(dims.d, dims.d);
    detail::fill_uniform(w, rng, bound);
  }
  if (enc.proj_learned()) {
    enc.phoneme_proj.resize(dims.d, dims.d_p);
    detail::fill_uniform(enc.phoneme_proj, rng, bound);
  } else {
    enc.phoneme_proj = Matrix::Identity(dims.d, dims.d_p);
  }

  PointerHead& head = p.head;
  head.tied_embeddings = opts.tied_embeddings;
  head.tied_phoneme_proj = opts.tied_phoneme_proj;
  head.d_att = dims.d_att;
  head.d_enc = dims.d_enc;
  head.d_joint = dims.d_joint;
  head.wq.resize(dims.d_att, dims.d_enc);
  detail::fill_uniform(head.wq, rng, bound);
  head.wq_prev.resize(dims.d_att, dims.d);
  detail::fill_uniform(head.wq_prev, rng, bound);
  head.wk.resize(dims.d_att, dims.d);
  detail::fill_uniform(head.wk, rng, bound);
  head.wv.resize(dims.d_att, dims.d);
  detail::fill_uniform(head.wv, rng, bound);
  head.wgen.resize(dims.d_joint + dims.d_att);
  detail::fill_uniform(head.wgen, rng, bound);
  head.bgen = -2.0;
  if (head.tied_phoneme_proj) {
    if (dims.d_enc != dims.d) {
      throw ShapeError("tying the phoneme projections requires d_enc == d");
    }
    head.query_phoneme_proj = Matrix::Zero(dims.d_enc, dims.d_p);
  } else {
    head.query_phoneme_proj.resize(dims.d_enc, dims.d_p);
    detail::fill_uniform(head.query_phoneme_proj, rng, bound);
  }
  if (!head.tied_embeddings) {
    head.decoder_embed.resize(dims.vocab_size, dims.d);
    detail::fill_uniform(head.decoder_embed, rng, bound);
  }
  return p;
}

// --- serialization ------------------------------------------------------------
//
// <path>: little-endian doubles, row-major, tensors in manifest order.
// <path>.json: manifest with dims, modes, seed and the tensor list.

namespace detail {

struct TensorRef {
  std::string name;
  double* data;
  int rows, cols;
};

inline std::vector<TensorRef> tensor_list(ModelParams& p) {
  std::vector<TensorRef> ts;
  auto add_m = [&](const std::string& name, Matrix& m) {
    ts.push_back({name, m.data(), static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  };
  auto add_v = [&](const std::string& name, Vector& v) {
    ts.push_back({name, v.data(), static_cast<int>(v.size()), 1});
  };
  add_m("piece_embed", p.enc.piece_embed);
  add_v("root_embed", p.enc.root_embed);
  for (size_t l = 0; l < p.enc.gcn_weights.size(); ++l) {
    add_m("gcn_w" + std::to_string(l), p.enc.gcn_weights[l]);
  }
  add_m("phoneme_proj", p.enc.phoneme_proj);
  add_m("wq", p.head.wq);
  add_m("wq_prev", p.head.wq_prev);
  add_m("wk", p.head.wk);
  add_m("wv", p.head.wv);
  add_v("wgen", p.head.wgen);
  add_m("query_phoneme_proj", p.head.query_phoneme_proj);
  if (!p.head.tied_embeddings) add_m("decoder_embed", p.head.decoder_embed);
  add_m("phoneme_embed", p.phoneme_embed);
  return ts;
}

}  // namespace detail

inline void save_params(const std::string& path, const ModelParams& params) {
  ModelParams& p = const_cast<ModelParams&>(params);  // tensor_list needs non-const access
  nlohmann::json manifest;
  manifest["format"] = "treebias-params";
  manifest["version"] = 1;
  manifest["seed"] = p.seed;
  manifest["dims"] = {{"vocab_size", p.dims.vocab_size},
                      {"d", p.dims.d},
                      {"d_enc", p.dims.d_enc},
                      {"d_att", p.dims.d_att},
                      {"d_joint", p.dims.d_joint},
                      {"d_p", p.dims.d_p},
                      {"gcn_layers", p.dims.gcn_layers},
                      {"inventory_size", p.dims.inventory_size}};
  manifest["modes"] = {{"phoneme_embed", to_string(p.enc.phoneme_embed_mode)},
                       {"tied_embeddings", p.head.tied_embeddings},
                       {"tied_phoneme_proj", p.head.tied_phoneme_proj}};
  manifest["bgen"] = p.head.bgen;
  nlohmann::json tensors = nlohmann::json::array();
  std::ofstream blob(path, std::ios::binary);
  if (!blob) throw IoError("cannot write file: " + path);
  for (const auto& t : detail::tensor_list(p)) {
    tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
    // Eigen default storage is column-major; write row-major explicitly.
    Eigen::Map<Matrix> m(t.data, t.rows, t.cols);
    for (int i = 0; i < t.rows; ++i) {
      for (int j = 0; j < t.cols; ++j) {
        const double v = m(i, j);
        static_assert(sizeof(double) == 8);
        blob.write(reinterpret_cast<const char*>(&v), sizeof(v));
      }
    }
  }
  manifest["tensors"] = std::move(tensors);
  save_json_file(path + ".json", manifest);
}

inline ModelParams load_params(const std::string& path) {
  const auto manifest = load_json_file(path + ".json");
  if (manifest.value("format", "") != "treebias-params") {
    throw ParseError("not a parameter manifest: " + path + ".json");
  }
  ModelDims dims;
  const auto& jd = manifest.at("dims");
  dims.vocab_size = jd.at("vocab_size").get<int>();
  dims.d = jd.at("d").get<int>();
  dims.d_enc = jd.at("d_enc").get<int>();
  dims.d_att = jd.at("d_att").get<int>();
  dims.d_joint = jd.at("d_joint").get<int>();
  dims.d_p = jd.at("d_p").get<int>();
  dims.gcn_layers = jd.at("gcn_layers").get<int>();
  dims.inventory_size = jd.at("inventory_size").get<int>();

  const auto& jm = manifest.at("modes");
  ModelOptions opts;
  opts.phoneme_embed_mode = parse_phoneme_embed_mode(jm.at("phoneme_embed").get<std::string>());
  opts.tied_embeddings = jm.at("tied_embeddings").get<bool>();
  opts.tied_phoneme_proj = jm.at("tied_phoneme_proj").get<bool>();
  if (opts.phoneme_embed_mode == PhonemeEmbedMode::External) {
    opts.external_phoneme_embed = Matrix::Zero(dims.inventory_size, dims.d_p);
  }

  ModelParams p = init_model(dims, opts, manifest.value("seed", uint64_t{0}));
  p.head.bgen = manifest.value("bgen", -2.0);

  std::ifstream blob(path, std::ios::binary);
  if (!blob) throw IoError("cannot open file: " + path);
  const auto& jt = manifest.at("tensors");
  const auto tensors = detail::tensor_list(p);
  if (jt.size() != tensors.size()) throw ParseError("tensor list mismatch in " + path);
  for (size_t k = 0; k < tensors.size(); ++k) {
    const auto& t = tensors[k];
    if (jt[k].at("name") != t.name || jt[k].at("rows") != t.rows || jt[k].at("cols") != t.cols) {
      throw ShapeError("tensor " + t.name + " shape mismatch in " + path);
    }
    Eigen::Map<Matrix> m(t.data, t.rows, t.cols);
    for (int i = 0; i < t.rows; ++i) {
      for (int j = 0; j < t.cols; ++j) {
        double v;
        blob.read(reinterpret_cast<char*>(&v), sizeof(v));
        if (!blob) throw IoError("parameter blob truncated: " + path);
        m(i, j) = v;
      }
    }
  }
  return p;
}

}  // namespace treebias
