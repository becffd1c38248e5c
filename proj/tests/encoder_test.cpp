#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "treebias/encoder.hpp"
#include "treebias/lexicon.hpp"
#include "treebias/params.hpp"
#include "treebias/rng.hpp"
#include "treebias/tokenizer.hpp"
#include "treebias/trie.hpp"

using namespace treebias;

namespace {

bool same_bits(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

bool same_bits(const Vector& a, const Vector& b) {
  return a.size() == b.size() && (a.array() == b.array()).all();
}

bool close_rel(const Matrix& a, const Matrix& b, double tol) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (std::abs(a(i, j) - b(i, j)) > tol * std::max(1.0, std::abs(b(i, j)))) return false;
    }
  }
  return true;
}

LexiconEntry entry_of(const std::string& word, const std::u32string& chars,
                      const std::vector<int>& phonemes) {
  LexiconEntry e;
  e.word = word;
  e.chars = chars;
  e.phonemes = phonemes;
  return e;
}

AlignmentMatrix identity_alignment(int n) {
  AlignmentMatrix a;
  a.weights = Matrix::Identity(n, n);
  a.kind = AlignKind::Hard;
  return a;
}

// Layer-by-layer reference with explicit per-node message passing loops.
Matrix gcn_reference(Matrix h, const Matrix& s, const std::vector<Matrix>& weights) {
  for (const auto& w : weights) {
    const Matrix prev = h;
    Matrix msg = Matrix::Zero(prev.rows(), prev.cols());
    for (Eigen::Index i = 0; i < prev.rows(); ++i) {
      for (Eigen::Index j = 0; j < prev.rows(); ++j) {
        if (s(i, j) == 0.0) continue;
        for (Eigen::Index m = 0; m < prev.cols(); ++m) msg(i, m) += s(i, j) * prev(j, m);
      }
    }
    h = Matrix::Zero(prev.rows(), w.cols());
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
      for (Eigen::Index k = 0; k < h.cols(); ++k) {
        double acc = 0.0;
        for (Eigen::Index m = 0; m < w.rows(); ++m) acc += msg(i, m) * w(m, k);
        h(i, k) = std::max(0.0, acc);
      }
    }
  }
  return h;
}

std::vector<Segmentation> random_segmentations(Rng& rng, int max_words) {
  const int count = 1 + static_cast<int>(rng.next_below(max_words));
  std::vector<Segmentation> segs(count);
  for (auto& s : segs) {
    const int len = 1 + static_cast<int>(rng.next_below(4));
    for (int i = 0; i < len; ++i) s.piece_ids.push_back(static_cast<int>(rng.next_below(6)));
  }
  return segs;
}

// Two-word fixture sharing the RI stem, 1:1 char/phoneme alignments.
struct StemFixture {
  SubwordVocab vocab = SubwordVocab::from_pieces({"B", "RI", "DAL_", "SKLY_"});
  std::vector<Segmentation> segs;
  PrefixTree tree;
  ModelParams params;
  WordAlignments aligns;

  // Inventory: blank=0 b=1 r=2 ay=3 d=4 ah=5 l=6 ih=7 s=8 k=9 iy=10.
  StemFixture() {
    segs = {tokenize_word(vocab, "BRIDAL"), tokenize_word(vocab, "BRISKLY")};
    tree = build_tree(segs);
    ModelDims dims;
    dims.vocab_size = 4;
    dims.d = 5;
    dims.d_enc = 5;
    dims.d_joint = 5;
    dims.gcn_layers = 2;
    dims.inventory_size = 11;
    params = init_model(dims, ModelOptions{}, 21);
    const auto bridal = entry_of("BRIDAL", U"BRIDAL", {1, 2, 3, 4, 5, 6});
    const auto briskly = entry_of("BRISKLY", U"BRISKLY", {1, 2, 7, 8, 9, 6, 10});
    aligns.push_back(
        make_word_phoneme_data(bridal, segs[0], identity_alignment(6), params.phoneme_embed));
    aligns.push_back(
        make_word_phoneme_data(briskly, segs[1], identity_alignment(7), params.phoneme_embed));
  }
};

Vector one_hot(int size, int index) {
  Vector v = Vector::Zero(size);
  v(index) = 1.0;
  return v;
}

}  // namespace

TEST_CASE("shared-stem node sums its four char-word phoneme contributions") {
  StemFixture f;
  const int d_p = 11;

  // Node 2 is the shared RI stem at depth 2. Its raw feature is the sum of
  // the (R, word) and (I, word) phoneme one-hots over both member words.
  Vector expected = Vector::Zero(d_p);
  expected += one_hot(d_p, 2);  // R of the first word -> r
  expected += one_hot(d_p, 3);  // I of the first word -> ay
  expected += one_hot(d_p, 2);  // R of the second word -> r
  expected += one_hot(d_p, 7);  // I of the second word -> ih
  const Vector phi = node_phoneme_feature(f.tree, 2, f.aligns, d_p);
  CHECK(same_bits(phi, expected));

  // The encoding applies the linear map to exactly that feature.
  const Vector e_ri = phoneme_node_encoding(f.tree, 2, f.aligns, f.params.enc);
  CHECK(same_bits(e_ri, Vector(f.params.enc.phoneme_proj * expected)));

  SECTION("depth-1 and leaf nodes") {
    Vector b_expected = 2.0 * one_hot(d_p, 1);  // B of both words -> b
    CHECK(same_bits(node_phoneme_feature(f.tree, 1, f.aligns, d_p), b_expected));

    Vector dal(d_p);  // D, A, L of the first word
    dal = one_hot(d_p, 4) + one_hot(d_p, 5) + one_hot(d_p, 6);
    CHECK(same_bits(node_phoneme_feature(f.tree, 3, f.aligns, d_p), dal));

    Vector skly = one_hot(d_p, 8) + one_hot(d_p, 9) + one_hot(d_p, 6) + one_hot(d_p, 10);
    CHECK(same_bits(node_phoneme_feature(f.tree, 4, f.aligns, d_p), skly));
  }

  SECTION("missing alignment slot") {
    WordAlignments partial = {f.aligns[0]};  // second word absent
    CHECK_THROWS_AS(node_phoneme_feature(f.tree, 2, partial, d_p), MissingAlignment);
    WordAlignments holed = f.aligns;
    holed[1] = WordPhonemeData{};
    CHECK_THROWS_AS(node_phoneme_feature(f.tree, 1, holed, d_p), MissingAlignment);
  }
}

TEST_CASE("single-subword word with identity alignments picks phoneme row one") {
  // One word, one piece, one char, one phoneme: e(1) = W^p * P row 1.
  const auto vocab = SubwordVocab::from_pieces({"A_"});
  const auto seg = tokenize_word(vocab, "A");
  const auto tree = build_tree({seg});
  ModelDims dims;
  dims.vocab_size = 1;
  dims.d = 3;
  dims.d_enc = 3;
  dims.d_joint = 3;
  dims.gcn_layers = 0;
  dims.inventory_size = 4;
  const auto params = init_model(dims, ModelOptions{}, 33);
  const auto entry = entry_of("A", U"A", {2});
  WordAlignments aligns = {
      make_word_phoneme_data(entry, seg, identity_alignment(1), params.phoneme_embed)};

  const Vector e1 = phoneme_node_encoding(tree, 1, aligns, params.enc);
  const Vector want = params.enc.phoneme_proj * params.phoneme_embed.row(2).transpose();
  CHECK(same_bits(e1, want));
}

TEST_CASE("soft alignments match a dense matrix-product oracle") {
  // One two-piece word, soft column-stochastic char->phoneme alignment,
  // identity W^p: e(n) must equal row (depth-1) of A_s2c * A_c2p * P.
  const auto vocab = SubwordVocab::from_pieces({"AB", "C_"});
  const auto seg = tokenize_word(vocab, "ABC");
  const auto tree = build_tree({seg});

  Rng rng(55);
  const int l_c = 3, l_p = 2, d_p = 4;
  AlignmentMatrix soft;
  soft.kind = AlignKind::Soft;
  soft.weights.resize(l_c, l_p);
  for (int j = 0; j < l_p; ++j) {
    double total = 0.0;
    for (int i = 0; i < l_c; ++i) {
      soft.weights(i, j) = rng.uniform(0.05, 1.0);
      total += soft.weights(i, j);
    }
    soft.weights.col(j) /= total;
  }

  EncoderParams enc;
  enc.d = d_p;
  enc.d_p = d_p;
  enc.gcn_layers = 0;
  enc.phoneme_proj = Matrix::Identity(d_p, d_p);

  Matrix table(3, d_p);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < d_p; ++j) table(i, j) = rng.uniform(-1.0, 1.0);
  }
  const auto entry = entry_of("ABC", U"ABC", {1, 2});
  WordAlignments aligns = {make_word_phoneme_data(entry, seg, soft, table)};

  const Matrix dense = aligns[0].sub_char * soft.weights * aligns[0].phon_embed;
  for (int n = 1; n <= tree.size(); ++n) {
    const Vector got = phoneme_node_encoding(tree, n, aligns, enc);
    const Vector want = dense.row(tree.node(n).depth - 1).transpose();
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("constant phoneme vector reduces to subword-char row sums") {
    // With identity char->phoneme alignment and P rows all equal to v, the
    // raw feature is (sum over words of A_s2c row-sum at the node's depth)*v.
    const auto entry3 = entry_of("ABC", U"ABC", {1, 2, 3});
    Matrix const_table(4, d_p);
    Vector v(d_p);
    v << 0.5, -1.25, 2.0, 0.25;
    for (int i = 0; i < 4; ++i) const_table.row(i) = v.transpose();
    WordAlignments caligns = {
        make_word_phoneme_data(entry3, seg, identity_alignment(3), const_table)};
    for (int n = 1; n <= tree.size(); ++n) {
      const double row_sum =
          caligns[0].sub_char.row(tree.node(n).depth - 1).sum();
      const Vector got = node_phoneme_feature(tree, n, caligns, d_p);
      CHECK(same_bits(got, Vector(row_sum * v)));
    }
  }

  SECTION("alignment shape mismatch is rejected") {
    CHECK_THROWS_AS(make_word_phoneme_data(entry, seg, identity_alignment(3), table), ShapeError);
  }
}

TEST_CASE("node depth beyond a member word's subwords breaks an invariant") {
  // Tree claims word 0 has two pieces, but its alignment data has one.
  Segmentation two_pieces;
  two_pieces.piece_ids = {0, 1};
  const auto tree = build_tree({two_pieces});

  const auto vocab = SubwordVocab::from_pieces({"A_"});
  const auto seg = tokenize_word(vocab, "A");
  Matrix table = Matrix::Identity(3, 3);
  WordAlignments aligns = {
      make_word_phoneme_data(entry_of("A", U"A", {1}), seg, identity_alignment(1), table)};

  CHECK_NOTHROW(node_phoneme_feature(tree, 1, aligns, 3));
  CHECK_THROWS_AS(node_phoneme_feature(tree, 2, aligns, 3), InvariantBreach);
}

TEST_CASE("initial encodings compose grapheme and phoneme parts") {
  StemFixture f;

  EncodingOptions grapheme_only;
  grapheme_only.mode = EncodingMode::Grapheme;
  const auto hg = init_node_encodings(f.tree, f.params.enc, {}, grapheme_only);
  REQUIRE(hg.h.rows() == f.tree.size() + 1);
  CHECK(same_bits(Vector(hg.h.row(0).transpose()), f.params.enc.root_embed));
  for (int n = 1; n <= f.tree.size(); ++n) {
    const int piece = f.tree.node(n).piece_id;
    CHECK(same_bits(Vector(hg.h.row(n).transpose()),
                    Vector(f.params.enc.piece_embed.row(piece).transpose())));
  }

  // The grapheme-only convenience overload matches.
  CHECK(same_bits(init_node_encodings(f.tree, f.params.enc).h, hg.h));

  EncodingOptions both;
  both.mode = EncodingMode::Both;
  const auto hb = init_node_encodings(f.tree, f.params.enc, f.aligns, both);
  EncodingOptions phoneme_only;
  phoneme_only.mode = EncodingMode::Phoneme;
  const auto hp = init_node_encodings(f.tree, f.params.enc, f.aligns, phoneme_only);
  CHECK(same_bits(Vector(hp.h.row(0).transpose()), f.params.enc.root_embed));
  for (int n = 1; n <= f.tree.size(); ++n) {
    const Vector e_n = phoneme_node_encoding(f.tree, n, f.aligns, f.params.enc);
    CHECK(same_bits(Vector(hp.h.row(n).transpose()), e_n));
    CHECK(same_bits(Vector(hb.h.row(n).transpose()),
                    Vector((f.params.enc.piece_embed.row(f.tree.node(n).piece_id) +
                            e_n.transpose())
                               .transpose())));
  }

  SECTION("zero phoneme table collapses to grapheme-only") {
    WordAlignments zeroed = f.aligns;
    for (auto& w : zeroed) w.phon_embed.setZero();
    const auto hz = init_node_encodings(f.tree, f.params.enc, zeroed, both);
    CHECK(same_bits(hz.h, hg.h));
  }

  SECTION("phoneme modes demand alignments") {
    CHECK_THROWS_AS(init_node_encodings(f.tree, f.params.enc, {}, both), MissingAlignment);
  }
}

TEST_CASE("two-row propagation matches the hand-computed half matrix") {
  // Root plus one node: both degrees 2, S is the all-halves matrix.
  Segmentation seg;
  seg.piece_ids = {0};
  const auto tree = build_tree({seg});
  const Matrix s = gcn_norm_for(tree, true);
  CHECK(same_bits(s, Matrix::Constant(2, 2, 0.5)));

  EncoderParams enc;
  enc.d = 2;
  enc.gcn_layers = 1;
  enc.gcn_weights = {Matrix::Identity(2, 2)};

  Matrix h0(2, 2);
  h0 << 2, -4, 6, -8;
  Matrix expected(2, 2);
  expected << 4, 0, 4, 0;  // relu of the row-averaged input clamps column two
  CHECK(same_bits(gcn_forward(h0, s, enc), expected));

  SECTION("zero layers return the input unchanged") {
    enc.gcn_layers = 0;
    enc.gcn_weights.clear();
    CHECK(same_bits(gcn_forward(h0, s, enc), h0));
  }

  SECTION("non-finite activations are reported") {
    enc.gcn_layers = 1;
    enc.gcn_weights = {Matrix::Identity(2, 2)};
    h0(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(gcn_forward(h0, s, enc), NumericalError);
  }
}

TEST_CASE("propagation matches a per-node message-passing reference") {
  Rng rng(71);
  for (int trial = 0; trial < 40; ++trial) {
    const auto tree = build_tree(random_segmentations(rng, 10));
    const int m = tree.size() + 1;
    const int d = 2 + static_cast<int>(rng.next_below(7));
    const int layers = static_cast<int>(rng.next_below(7));

    EncoderParams enc;
    enc.d = d;
    enc.gcn_layers = layers;
    for (int l = 0; l < layers; ++l) {
      Matrix w(d, d);
      for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) w(i, j) = rng.uniform(-1.0, 1.0);
      }
      enc.gcn_weights.push_back(std::move(w));
    }
    Matrix h0(m, d);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < d; ++j) h0(i, j) = rng.uniform(-2.0, 2.0);
    }

    const Matrix s = gcn_norm_for(tree, true);
    const Matrix got = gcn_forward(h0, s, enc);
    const Matrix want = gcn_reference(h0, s, enc.gcn_weights);
    CHECK(close_rel(got, want, 1e-10));

    // Zero input stays exactly zero through ReLU and linear maps.
    const Matrix zeros = Matrix::Zero(m, d);
    CHECK(same_bits(gcn_forward(zeros, s, enc), zeros));
  }
}

TEST_CASE("relabeling nodes permutes the propagated encodings") {
  Rng rng(72);
  for (int trial = 0; trial < 20; ++trial) {
    const auto tree = build_tree(random_segmentations(rng, 8));
    const int m = tree.size() + 1;
    const int d = 3;

    EncoderParams enc;
    enc.d = d;
    enc.gcn_layers = 2;
    for (int l = 0; l < 2; ++l) {
      Matrix w(d, d);
      for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) w(i, j) = rng.uniform(-1.0, 1.0);
      }
      enc.gcn_weights.push_back(std::move(w));
    }
    Matrix h0(m, d);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < d; ++j) h0(i, j) = rng.uniform(-2.0, 2.0);
    }
    const Matrix s = gcn_norm_for(tree, true);

    std::vector<int> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = m - 1; i > 0; --i) {
      std::swap(perm[i], perm[rng.next_below(static_cast<size_t>(i) + 1)]);
    }
    Matrix s_perm(m, m), h0_perm(m, d);
    for (int i = 0; i < m; ++i) {
      h0_perm.row(i) = h0.row(perm[i]);
      for (int j = 0; j < m; ++j) s_perm(i, j) = s(perm[i], perm[j]);
    }

    const Matrix out = gcn_forward(h0, s, enc);
    const Matrix out_perm = gcn_forward(h0_perm, s_perm, enc);
    for (int i = 0; i < m; ++i) {
      CHECK((out_perm.row(i) - out.row(perm[i])).cwiseAbs().maxCoeff() < 1e-13);
    }
  }
}

TEST_CASE("full tree encoding with and without the root row") {
  StemFixture f;

  GcnCache cache;
  const auto with_root = encode_tree(f.tree, f.params.enc, f.aligns, {}, &cache);
  REQUIRE(with_root.has_root);
  REQUIRE(with_root.h.rows() == f.tree.size() + 1);
  CHECK(with_root.row_of(3) == 3);

  // encode_tree is exactly init + normalization + propagation.
  const auto h0 = init_node_encodings(f.tree, f.params.enc, f.aligns, {});
  const Matrix s = gcn_norm_for(f.tree, true);
  CHECK(same_bits(with_root.h, gcn_forward(h0.h, s, f.params.enc)));

  SECTION("cache records every layer") {
    REQUIRE(cache.h.size() == 3);
    REQUIRE(cache.z.size() == 2);
    CHECK(same_bits(cache.h[0], h0.h));
    CHECK(same_bits(cache.h[2], with_root.h));
    for (int l = 0; l < 2; ++l) {
      CHECK(same_bits(cache.z[l], Matrix(s * cache.h[l] * f.params.enc.gcn_weights[l])));
      CHECK(same_bits(cache.h[l + 1], Matrix(cache.z[l].cwiseMax(0.0))));
    }
  }

  SECTION("root ablation drops the row and the root links") {
    EncodingOptions no_root;
    no_root.include_root = false;
    const auto ablated = encode_tree(f.tree, f.params.enc, f.aligns, no_root);
    REQUIRE_FALSE(ablated.has_root);
    REQUIRE(ablated.h.rows() == f.tree.size());
    CHECK(ablated.row_of(1) == 0);

    // The sub-normalization recomputes degrees without the root: the depth-1
    // node keeps only itself and its child.
    const Matrix s_sub = gcn_norm_for(f.tree, false);
    REQUIRE(s_sub.rows() == f.tree.size());
    const auto adj = adjacency(f.tree);
    TreeAdjacency sub;
    sub.a_tilde = adj.a_tilde.bottomRightCorner(f.tree.size(), f.tree.size());
    sub.degrees = sub.a_tilde.rowwise().sum();
    CHECK(sub.degrees(0) == 2.0);  // node B: self + RI, root link gone
    CHECK(same_bits(s_sub, gcn_normalization(sub)));

    const auto h0_sub = init_node_encodings(f.tree, f.params.enc, f.aligns, no_root);
    CHECK(same_bits(ablated.h, gcn_forward(h0_sub.h, s_sub, f.params.enc)));
  }
}
