#pragma once

#include <deque>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treebias/errors.hpp"
#include "treebias/linalg.hpp"
#include "treebias/tokenizer.hpp"

namespace treebias {

struct TrieNode {
  int id = 0;
  int piece_id = -1;  // -1 on the virtual root
  int depth = 0;      // edges from root
  int parent = -1;
  std::map<int, int> children;  // piece id -> node id
  std::vector<int> words;       // W(n): indices into the biasing list, ascending
};

// Prefix tree over segmented biasing words. nodes[0] is the virtual root;
// real nodes are 1..N in breadth-first order, children visited by ascending
// piece id, so node numbering is deterministic for a given list.
struct PrefixTree {
  std::vector<TrieNode> nodes;

  PrefixTree() { nodes.emplace_back(); }

  int size() const { return static_cast<int>(nodes.size()) - 1; }  // N
  const TrieNode& root() const { return nodes[0]; }
  const TrieNode& node(int id) const { return nodes.at(id); }

  // Child of `id` along `piece_id`, or -1.
  int step(int id, int piece_id) const {
    const auto& ch = nodes[id].children;
    auto it = ch.find(piece_id);
    return it == ch.end() ? -1 : it->second;
  }
};

inline PrefixTree build_tree(const std::vector<Segmentation>& segmentations) {
  // Temporary linked trie, then breadth-first renumbering.
  struct TempNode {
    int piece_id = -1;
    int depth = 0;
    int parent = -1;
    std::map<int, int> children;
    std::vector<int> words;
  };
  // Repeated segmentations collapse onto their first occurrence so a word
  // listed twice contributes once to every node's word set.
  std::map<std::vector<int>, size_t> canonical;
  for (size_t w = 0; w < segmentations.size(); ++w) {
    canonical.try_emplace(segmentations[w].piece_ids, w);
  }

  std::vector<TempNode> tmp(1);
  for (size_t w = 0; w < segmentations.size(); ++w) {
    if (canonical.at(segmentations[w].piece_ids) != w) continue;
    int cur = 0;
    for (int piece : segmentations[w].piece_ids) {
      auto it = tmp[cur].children.find(piece);
      if (it == tmp[cur].children.end()) {
        const int id = static_cast<int>(tmp.size());
        tmp.push_back({piece, tmp[cur].depth + 1, cur, {}, {}});
        tmp[cur].children[piece] = id;
        cur = id;
      } else {
        cur = it->second;
      }
    }
  }
  // Word sets: every node on the path of word w contains w.
  for (size_t w = 0; w < segmentations.size(); ++w) {
    if (canonical.at(segmentations[w].piece_ids) != w) continue;
    int cur = 0;
    for (int piece : segmentations[w].piece_ids) {
      cur = tmp[cur].children.at(piece);
      auto& ws = tmp[cur].words;
      if (ws.empty() || ws.back() != static_cast<int>(w)) ws.push_back(static_cast<int>(w));
    }
  }

  std::vector<int> bfs_id(tmp.size(), -1);
  std::deque<int> queue{0};
  int next_id = 0;
  while (!queue.empty()) {
    const int t = queue.front();
    queue.pop_front();
    bfs_id[t] = next_id++;
    for (const auto& [piece, child] : tmp[t].children) queue.push_back(child);
  }

  PrefixTree tree;
  tree.nodes.resize(tmp.size());
  for (size_t t = 0; t < tmp.size(); ++t) {
    TrieNode& n = tree.nodes[bfs_id[t]];
    n.id = bfs_id[t];
    n.piece_id = tmp[t].piece_id;
    n.depth = tmp[t].depth;
    n.parent = tmp[t].parent < 0 ? -1 : bfs_id[tmp[t].parent];
    n.words = tmp[t].words;
    for (const auto& [piece, child] : tmp[t].children) n.children[piece] = bfs_id[child];
  }
  return tree;
}

// Active node set for a partial-word prefix: children of the node the prefix
// walks to, or children of the root if the walk falls off the tree. Total;
// an empty result means the pointer branch has nothing to offer.
inline std::vector<int> active_set(const PrefixTree& tree, std::span<const int> prefix) {
  int cur = 0;
  for (int piece : prefix) {
    cur = tree.step(cur, piece);
    if (cur < 0) {
      cur = 0;
      break;
    }
  }
  std::vector<int> out;
  out.reserve(tree.nodes[cur].children.size());
  for (const auto& [piece, child] : tree.nodes[cur].children) out.push_back(child);
  return out;
}

struct TreeAdjacency {
  Matrix a_tilde;   // (N+1)x(N+1), symmetric, self-loops on the diagonal
  Vector degrees;   // row sums of a_tilde
};

// Adjacency over root + real nodes with parent-child edges and self-loops.
inline TreeAdjacency adjacency(const PrefixTree& tree) {
  const int m = tree.size() + 1;
  TreeAdjacency adj;
  adj.a_tilde = Matrix::Identity(m, m);
  for (int n = 1; n < m; ++n) {
    const int p = tree.nodes[n].parent;
    adj.a_tilde(n, p) = 1.0;
    adj.a_tilde(p, n) = 1.0;
  }
  adj.degrees = adj.a_tilde.rowwise().sum();
  return adj;
}

// D^{-1/2} A D^{-1/2} for the GCN propagation rule. Entries are computed as
// 1/sqrt(d_i * d_j) so perfect-square degree products normalize exactly.
inline Matrix gcn_normalization(const TreeAdjacency& adj) {
  const Matrix outer = adj.degrees * adj.degrees.transpose();
  return (adj.a_tilde.array() / outer.array().sqrt()).matrix();
}

inline nlohmann::json dump_tree_json(const PrefixTree& tree, const SubwordVocab& vocab,
                                     const std::vector<std::string>& words) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : tree.nodes) {
    if (n.id == 0) continue;
    nlohmann::json jn;
    jn["id"] = n.id;
    jn["piece_id"] = n.piece_id;
    jn["piece"] = vocab.piece(n.piece_id);
    jn["depth"] = n.depth;
    jn["parent"] = n.parent;
    nlohmann::json ws = nlohmann::json::array();
    for (int w : n.words) {
      ws.push_back(w < static_cast<int>(words.size()) ? words[w] : std::to_string(w));
    }
    jn["words"] = std::move(ws);
    nodes.push_back(std::move(jn));
  }
  nlohmann::json j;
  j["num_nodes"] = tree.size();
  j["nodes"] = std::move(nodes);
  return j;
}

}  // namespace treebias
