// Pipeline driver: each stage of the biasing pipeline is a subcommand over a
// shared flat-JSON config (explicit flags win), and every artifact gets a
// manifest with content hashes beside it so identical config + seed can be
// checked for byte-identical outputs.
//
// Exit codes: 0 success, 1 runtime error, 2 usage/config error.
#include <openssl/evp.h>

#include <CLI11.hpp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "treebias/demo.hpp"
#include "treebias/gradients.hpp"

using namespace treebias;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr int kManifestVersion = 1;

// Config/usage problems exit 2; everything thrown past validation exits 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Hashing and manifests

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("sha256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

std::string file_sha256(const std::string& path) { return sha256_hex(read_text_file(path)); }

// One manifest per logical artifact, written beside it. No timestamps: the
// manifest must be byte-identical across reruns of the same config + seed.
void write_manifest(const std::string& stage, const std::vector<std::string>& outputs,
                    const std::vector<std::string>& inputs, uint64_t seed,
                    const nlohmann::json& options) {
  nlohmann::json m;
  m["format"] = "treebias-manifest";
  m["version"] = kManifestVersion;
  m["tool_version"] = kToolVersion;
  m["stage"] = stage;
  m["seed"] = seed;
  m["options"] = options;
  nlohmann::json in = nlohmann::json::object();
  for (const auto& p : inputs) in[p] = file_sha256(p);
  m["inputs"] = in;
  nlohmann::json out = nlohmann::json::object();
  for (const auto& p : outputs) out[p] = file_sha256(p);
  m["outputs"] = out;
  save_json_file(outputs.front() + ".manifest.json", m);
}

// ---------------------------------------------------------------------------
// Config merge and validation

// Flat JSON config; a key applies wherever a subcommand has the matching flag
// (key = long flag name with dashes turned into underscores). Explicitly
// given flags always win.
nlohmann::json load_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  if (!std::filesystem::exists(path)) throw ConfigError("config file does not exist: " + path);
  nlohmann::json j;
  try {
    j = load_json_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("cannot parse config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a flat JSON object: " + path);
  return j;
}

class Merge {
 public:
  Merge(const CLI::App* cmd, nlohmann::json cfg) : cmd_(cmd), cfg_(std::move(cfg)) {}

  template <typename T>
  void fill(const std::string& flag, T& value) const {
    std::string key = flag.substr(2);
    for (auto& c : key) {
      if (c == '-') c = '_';
    }
    if (cmd_->count(flag) > 0 || !cfg_.contains(key)) return;
    try {
      value = cfg_.at(key).get<T>();
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' has the wrong type");
    }
  }

 private:
  const CLI::App* cmd_;
  nlohmann::json cfg_;
};

void require_input(const std::string& flag, const std::string& path) {
  if (path.empty()) throw ConfigError("missing required input " + flag);
  if (!std::filesystem::exists(path)) {
    throw ConfigError(flag + " does not exist: " + path);
  }
}

void require_output(const std::string& flag, const std::string& path) {
  if (path.empty()) throw ConfigError("missing required output path " + flag);
}

void require_choice(const std::string& flag, const std::string& value,
                    const std::set<std::string>& allowed) {
  if (allowed.count(value)) return;
  std::string opts;
  for (const auto& a : allowed) opts += (opts.empty() ? "" : "|") + a;
  throw ConfigError(flag + " must be one of " + opts + ", got '" + value + "'");
}

void require_positive(const std::string& flag, double value) {
  if (!(value > 0)) throw ConfigError(flag + " must be positive");
}

// Params files are a binary blob plus a JSON sidecar; hash and load both.
std::vector<std::string> params_files(const std::string& path) { return {path, path + ".json"}; }

void require_params_input(const std::string& flag, const std::string& path) {
  require_input(flag, path);
  if (!std::filesystem::exists(path + ".json")) {
    throw ConfigError(flag + " sidecar does not exist: " + path + ".json");
  }
}

// ---------------------------------------------------------------------------
// Shared loading helpers

struct CorpusFiles {
  PhonemeInventory inventory;
  Lexicon lexicon;
  SubwordVocab vocab;
};

CorpusFiles load_corpus(const std::string& inv_path, const std::string& lex_path,
                        const std::string& vocab_path) {
  CorpusFiles c;
  c.inventory = load_inventory(inv_path);
  auto r = load_lexicon(lex_path, c.inventory);
  if (r.overridden > 0) {
    std::cerr << "note: " << r.overridden << " duplicate lexicon entr"
              << (r.overridden == 1 ? "y" : "ies") << " overridden by later lines\n";
  }
  c.lexicon = std::move(r.lexicon);
  if (!vocab_path.empty()) c.vocab = load_vocab(vocab_path);
  return c;
}

struct ListAndTree {
  BiasingList list;
  std::vector<Segmentation> segs;
  PrefixTree tree;
};

ListAndTree load_list_and_tree(const std::string& list_path, const Lexicon& lexicon,
                               const SubwordVocab& vocab) {
  ListAndTree lt;
  lt.list = load_biasing_list(list_path, lexicon,
                              std::filesystem::path(list_path).filename().string());
  for (const auto& e : lt.list.entries) lt.segs.push_back(tokenize_word(vocab, e.word));
  lt.tree = build_tree(lt.segs);
  return lt;
}

// Parse an alignment file (single object or array keyed by "word") once and
// materialize matrices for the requested words.
std::map<std::string, AlignmentMatrix> load_alignment_map(const std::string& path,
                                                          const Lexicon& lexicon,
                                                          const std::set<std::string>& words) {
  const auto j = load_json_file(path);
  std::map<std::string, AlignmentMatrix> out;
  auto take = [&](const nlohmann::json& obj) {
    const std::string w = obj.value("word", "");
    if (!words.count(w) || out.count(w)) return;
    auto it = lexicon.find(w);
    if (it == lexicon.end()) throw MissingPronunciation("aligned word not in lexicon: " + w);
    out.emplace(w, alignment_from_json(obj, it->second));
  };
  if (j.is_object()) {
    take(j);
  } else if (j.is_array()) {
    for (const auto& obj : j) take(obj);
  } else {
    throw ParseError("alignment file must be a JSON object or array: " + path);
  }
  for (const auto& w : words) {
    if (!out.count(w)) throw MissingAlignment("no alignment in " + path + " for word: " + w);
  }
  return out;
}

WordAlignments make_tree_alignments(const BiasingList& list, const std::vector<Segmentation>& segs,
                                    const std::map<std::string, AlignmentMatrix>& amap,
                                    const Matrix& phoneme_table) {
  WordAlignments a;
  for (size_t i = 0; i < list.entries.size(); ++i) {
    a.push_back(make_word_phoneme_data(list.entries[i], segs[i],
                                       amap.at(list.entries[i].word), phoneme_table));
  }
  return a;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string line;
  for (const auto& w : words) {
    if (!line.empty()) line += ' ';
    line += w;
  }
  return line;
}

std::string rate_str(const ScoreResult& r) {
  if (!r.defined) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", r.rate);
  return buf;
}

nlohmann::json score_json(const ScoreResult& r) {
  nlohmann::json j;
  j["rate"] = r.rate;
  j["defined"] = r.defined;
  j["denominator"] = r.denominator;
  j["matches"] = r.counts.matches;
  j["substitutions"] = r.counts.substitutions;
  j["deletions"] = r.counts.deletions;
  j["insertions"] = r.counts.insertions;
  j["errors"] = r.counts.errors();
  return j;
}

// ---------------------------------------------------------------------------
// align-train

struct AlignTrainOpts {
  std::string config, lexicon, inventory, out;
  int max_g = 2, max_p = 2, iters = 10;
  double tol = 1e-9;
};

void run_align_train(const AlignTrainOpts& raw, const CLI::App* cmd) {
  AlignTrainOpts o = raw;
  Merge m(cmd, load_config(o.config));
  m.fill("--lexicon", o.lexicon);
  m.fill("--inventory", o.inventory);
  m.fill("--out", o.out);
  m.fill("--max-g", o.max_g);
  m.fill("--max-p", o.max_p);
  m.fill("--iters", o.iters);
  m.fill("--tol", o.tol);
  require_input("--lexicon", o.lexicon);
  require_input("--inventory", o.inventory);
  require_output("--out", o.out);
  require_positive("--max-g", o.max_g);
  require_positive("--max-p", o.max_p);
  require_positive("--iters", o.iters);

  CorpusFiles c = load_corpus(o.inventory, o.lexicon, "");
  EmTrainResult r = train_em_aligner(c.lexicon, o.max_g, o.max_p, o.iters, o.tol);
  save_multigram(o.out, r.model, c.inventory);

  nlohmann::json opts{{"max_g", o.max_g},
                      {"max_p", o.max_p},
                      {"iters", o.iters},
                      {"tol", o.tol},
                      {"iterations_run", r.iterations}};
  write_manifest("align-train", {o.out}, {o.lexicon, o.inventory}, 0, opts);
  std::printf("trained %zu chunk probabilities on %zu words in %d iterations\n",
              r.model.chunk_probs.size(), c.lexicon.size(), r.iterations);
  if (!r.loglik_trace.empty()) {
    std::printf("log-likelihood %.6f -> %.6f\n", r.loglik_trace.front(), r.loglik_trace.back());
  }
  std::printf("wrote %s\n", o.out.c_str());
}

// ---------------------------------------------------------------------------
// align

struct AlignOpts {
  std::string config, lexicon, inventory, multigram, alignments, out;
  std::string alignment = "em";
};

void run_align(const AlignOpts& raw, const CLI::App* cmd) {
  AlignOpts o = raw;
  Merge m(cmd, load_config(o.config));
  m.fill("--lexicon", o.lexicon);
  m.fill("--inventory", o.inventory);
  m.fill("--multigram", o.multigram);
  m.fill("--alignments", o.alignments);
  m.fill("--out", o.out);
  m.fill("--alignment", o.alignment);
  require_choice("--alignment", o.alignment, {"em", "soft"});
  require_input("--lexicon", o.lexicon);
  require_input("--inventory", o.inventory);
  require_output("--out", o.out);
  std::vector<std::string> inputs{o.lexicon, o.inventory};
  if (o.alignment == "em") {
    require_input("--multigram", o.multigram);
    inputs.push_back(o.multigram);
  } else {
    require_input("--alignments", o.alignments);
    inputs.push_back(o.alignments);
  }

  CorpusFiles c = load_corpus(o.inventory, o.lexicon, "");
  nlohmann::json arr = nlohmann::json::array();
  if (o.alignment == "em") {
    // Hard monotonic alignments from the trained chunk model's best path.
    const MultigramModel model = load_multigram(o.multigram, c.inventory);
    for (const auto& [word, entry] : c.lexicon) {
      arr.push_back(alignment_to_json(word, viterbi_align(model, entry)));
    }
  } else {
    // Externally produced soft alignments: validate shapes and column sums,
    // renormalize, and re-emit in canonical form.
    std::set<std::string> words;
    for (const auto& [word, entry] : c.lexicon) words.insert(word);
    auto amap = load_alignment_map(o.alignments, c.lexicon, words);
    for (const auto& [word, a] : amap) arr.push_back(alignment_to_json(word, a));
  }
  save_json_file(o.out, arr);

  write_manifest("align", {o.out}, inputs, 0, {{"alignment", o.alignment}});
  std::printf("wrote %zu %s alignments to %s\n", arr.size(), o.alignment.c_str(), o.out.c_str());
}

// ---------------------------------------------------------------------------
// tokenize

struct TokenizeOpts {
  std::string config, vocab, words, out;
};

void run_tokenize(const TokenizeOpts& raw, const CLI::App* cmd) {
  TokenizeOpts o = raw;
  Merge m(cmd, load_config(o.config));
  m.fill("--vocab", o.vocab);
  m.fill("--words", o.words);
  m.fill("--out", o.out);
  require_input("--vocab", o.vocab);
  require_input("--words", o.words);
  require_output("--out", o.out);

  const SubwordVocab vocab = load_vocab(o.vocab);
  std::string out_text;
  int n = 0;
  for (const auto& line : detail::read_lines(o.words)) {
    if (line.empty()) continue;
    const Segmentation seg = tokenize_word(vocab, line);
    out_text += line;
    out_text += '\t';
    for (size_t i = 0; i < seg.piece_ids.size(); ++i) {
      if (i > 0) out_text += ' ';
      out_text += vocab.piece(seg.piece_ids[i]);
    }
    out_text += '\n';
    ++n;
  }
  write_text_file(o.out, out_text);

  write_manifest("tokenize", {o.out}, {o.vocab, o.words}, 0, nlohmann::json::object());
  std::printf("tokenized %d words into %s\n", n, o.out.c_str());
}

// ---------------------------------------------------------------------------
// build-trie

struct BuildTrieOpts {
  std::string config, vocab, lexicon, inventory, list, out;
};

void run_build_trie(const BuildTrieOpts& raw, const CLI::App* cmd) {
  BuildTrieOpts o = raw;
  Merge m(cmd, load_config(o.config));
  m.fill("--vocab", o.vocab);
  m.fill("--lexicon", o.lexicon);
  m.fill("--inventory", o.inventory);
  m.fill("--list", o.list);
  m.fill("--out", o.out);
  require_input("--vocab", o.vocab);
  require_input("--lexicon", o.lexicon);
  require_input("--inventory", o.inventory);
  require_input("--list", o.list);
  require_output("--out", o.out);

  CorpusFiles c = load_corpus(o.inventory, o.lexicon, o.vocab);
  ListAndTree lt = load_list_and_tree(o.list, c.lexicon, c.vocab);
  std::vector<std::string> words;
  for (const auto& e : lt.list.entries) words.push_back(e.word);
  save_json_file(o.out, dump_tree_json(lt.tree, c.vocab, words));

  write_manifest("build-trie", {o.out}, {o.vocab, o.lexicon, o.inventory, o.list}, 0,
                 nlohmann::json::object());
  std::printf("built prefix tree over %zu words: %d nodes -> %s\n", words.size(), lt.tree.size(),
              o.out.c_str());
}

// ---------------------------------------------------------------------------
// encode

struct EncodeOpts {
  std::string config, vocab, lexicon, inventory, list, alignments, params, out;
  std::string encoding = "both";
  bool no_root = false;
};

void run_encode(const EncodeOpts& raw, const CLI::App* cmd) {
  EncodeOpts o = raw;
  Merge m(cmd, load_config(o.config));
  m.fill("--vocab", o.vocab);
  m.fill("--lexicon", o.lexicon);
  m.fill("--inventory", o.inventory);
  m.fill("--list", o.list);
  m.fill("--alignments", o.alignments);
  m.fill("--params", o.params);
  m.fill("--out", o.out);
  m.fill("--encoding", o.encoding);
  m.fill("--no-root", o.no_root);
  require_choice("--encoding", o.encoding, {"grapheme", "phoneme", "both"});
  require_input("--vocab", o.vocab);
  require_input("--lexicon", o.lexicon);
  require_input("--inventory", o.inventory);
  require_input("--list", o.list);
  require_input("--alignments", o.alignments);
  require_params_input("--params", o.params);
  require_output("--out", o.out);

  CorpusFiles c = load_corpus(o.inventory, o.lexicon, o.vocab);
  ListAndTree lt = load_list_and_tree(o.list, c.lexicon, c.vocab);
  const ModelParams params = load_params(o.params);

  std::set<std::string> words;
  for (const auto& e : lt.list.entries) words.insert(e.word);
  auto amap = load_alignment_map(o.alignments, c.lexicon, words);
  const WordAlignments aligns = make_tree_alignments(lt.list, lt.segs, amap, params.phoneme_embed);

  EncodingOptions enc_opts;
  enc_opts.mode = parse_encoding_mode(o.encoding);
  enc_opts.include_root = !o.no_root;
  const TreeEncodings enc = encode_tree(lt.tree, params.enc, aligns, enc_opts);

  nlohmann::json j;
  j["format"] = "treebias-encodings";
  j["version"] = 1;
  j["encoding"] = o.encoding;
  j["has_root"] = enc.has_root;
  j["rows"] = enc.h.rows();
  j["cols"] = enc.h.cols();
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < enc.h.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index k = 0; k < enc.h.cols(); ++k) row.push_back(enc.h(r, k));
    rows.push_back(std::move(row));
  }
  j["h"] = std::move(rows);
  save_json_file(o.out, j);

  std::vector<std::string> inputs{o.vocab, o.lexicon, o.inventory, o.list, o.alignments};
  for (const auto& p : params_files(o.params)) inputs.push_back(p);
  write_manifest("encode", {o.out}, inputs, params.seed,
                 {{"encoding", o.encoding}, {"include_root", !o.no_root}});
  std::printf("encoded %d tree nodes (%s, d=%d) -> %s\n", lt.tree.size(), o.encoding.c_str(),
              static_cast<int>(enc.h.cols()), o.out.c_str());
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  std::string config, scenarios, vocab, lexicon, inventory, list, alignments, out, params_in;
  std::string encoding = "both";
  std::string phoneme_query = "on";
  std::string pemb = "oh+";
  int d = 16, d_enc = 16, d_att = 0, d_joint = 16, layers = 2;
  int steps = 100;
  double lr = 0.01;
  uint64_t seed = 1;
  bool no_root = false;
};

void run_train(const TrainOpts& raw, const CLI::App* cmd) {
  TrainOpts o = raw;
  Merge m(cmd, load_config(o.config));
  m.fill("--scenarios", o.scenarios);
  m.fill("--vocab", o.vocab);
  m.fill("--lexicon", o.lexicon);
  m.fill("--inventory", o.inventory);
  m.fill("--list", o.list);
  m.fill("--alignments", o.alignments);
  m.fill("--out", o.out);
  m.fill("--params-in", o.params_in);
  m.fill("--encoding", o.encoding);
  m.fill("--phoneme-query", o.phoneme_query);
  m.fill("--pemb", o.pemb);
  m.fill("--d", o.d);
  m.fill("--d-enc", o.d_enc);
  m.fill("--d-att", o.d_att);
  m.fill("--d-joint", o.d_joint);
  m.fill("--layers", o.layers);
  m.fill("--steps", o.steps);
  m.fill("--lr", o.lr);
  m.fill("--seed", o.seed);
  m.fill("--no-root", o.no_root);
  require_choice("--encoding", o.encoding, {"grapheme", "phoneme", "both"});
  require_choice("--phoneme-query", o.phoneme_query, {"on", "off"});
  require_choice("--pemb", o.pemb, {"oh", "oh+"});
  require_input("--scenarios", o.scenarios);
  require_input("--vocab", o.vocab);
  require_input("--lexicon", o.lexicon);
  require_input("--inventory", o.inventory);
  require_input("--list", o.list);
  require_input("--alignments", o.alignments);
  require_output("--out", o.out);
  if (!o.params_in.empty()) require_params_input("--params-in", o.params_in);
  if (o.params_in.empty()) {
    require_positive("--d", o.d);
    require_positive("--d-enc", o.d_enc);
    require_positive("--d-joint", o.d_joint);
    if (o.layers < 0) throw ConfigError("--layers must be non-negative");
  }
  if (o.steps < 0) throw ConfigError("--steps must be non-negative");
  if (o.lr < 0) throw ConfigError("--lr must be non-negative");

  CorpusFiles c = load_corpus(o.inventory, o.lexicon, o.vocab);
  ListAndTree lt = load_list_and_tree(o.list, c.lexicon, c.vocab);
  const ScenarioSuite suite = scenarios_from_json(load_json_file(o.scenarios), c.vocab);

  std::set<std::string> needed;
  for (const auto& u : suite.utterances) needed.insert(u.words.begin(), u.words.end());
  for (const auto& e : lt.list.entries) needed.insert(e.word);
  auto amap = load_alignment_map(o.alignments, c.lexicon, needed);

  ModelParams params;
  if (o.params_in.empty()) {
    ModelDims dims;
    dims.vocab_size = c.vocab.size();
    dims.d = o.d;
    dims.d_enc = o.d_enc;
    dims.d_att = o.d_att;
    dims.d_joint = o.d_joint;
    dims.gcn_layers = o.layers;
    dims.inventory_size = c.inventory.size();
    ModelOptions mopts;
    mopts.phoneme_embed_mode = parse_phoneme_embed_mode(o.pemb);
    params = init_model(dims, mopts, o.seed);
  } else {
    params = load_params(o.params_in);
    if (params.dims.vocab_size != c.vocab.size()) {
      throw ShapeError("params vocab size does not match the vocab file");
    }
  }

  const WordAlignments aligns = make_tree_alignments(lt.list, lt.segs, amap, params.phoneme_embed);
  EncodingOptions enc_opts;
  enc_opts.mode = parse_encoding_mode(o.encoding);
  enc_opts.include_root = !o.no_root;

  const MockWorld world =
      MockWorld::make(c.vocab.size(), params.dims.d_enc, params.dims.d_joint, suite.world_seed);
  const auto utts = build_utterances(suite, c.lexicon, c.vocab, amap, world, c.inventory.size());
  std::vector<TrainUtterance> batch;
  for (const auto& u : utts) {
    batch.push_back(make_train_utterance(u, lt.tree, c.vocab, o.phoneme_query == "on"));
  }
  const TrainReport report = toy_train(params, lt.tree, aligns, enc_opts, batch, o.lr, o.steps);
  save_params(o.out, params);

  std::vector<std::string> inputs{o.scenarios, o.vocab,        o.lexicon,
                                  o.inventory, o.list,         o.alignments};
  if (!o.params_in.empty()) {
    for (const auto& p : params_files(o.params_in)) inputs.push_back(p);
  }
  nlohmann::json opts{{"encoding", o.encoding},   {"phoneme_query", o.phoneme_query},
                      {"pemb", o.pemb},           {"lr", o.lr},
                      {"steps", o.steps},         {"include_root", !o.no_root},
                      {"resumed", !o.params_in.empty()}};
  write_manifest("train", params_files(o.out), inputs, params.seed, opts);
  if (!report.loss_trace.empty()) {
    std::printf("trained %d steps on %zu utterances: loss %.6f -> %.6f\n", o.steps, utts.size(),
                report.loss_trace.front(), report.loss_trace.back());
  } else {
    std::printf("no training steps requested; parameters passed through\n");
  }
  std::printf("wrote %s (+ sidecar %s.json)\n", o.out.c_str(), o.out.c_str());
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateOpts {
  std::string config, params, scenarios, vocab, lexicon, inventory, list, alignments;
  std::string hyp_out, ref_out;
  std::string bias = "on";
  std::string phoneme_query = "off";
  std::string encoding = "both";
  int beam = 4, max_symbols = 4;
  bool no_root = false;
};

void run_simulate(const SimulateOpts& raw, const CLI::App* cmd) {
  SimulateOpts o = raw;
  Merge m(cmd, load_config(o.config));
  m.fill("--params", o.params);
  m.fill("--scenarios", o.scenarios);
  m.fill("--vocab", o.vocab);
  m.fill("--lexicon", o.lexicon);
  m.fill("--inventory", o.inventory);
  m.fill("--list", o.list);
  m.fill("--alignments", o.alignments);
  m.fill("--hyp-out", o.hyp_out);
  m.fill("--ref-out", o.ref_out);
  m.fill("--bias", o.bias);
  m.fill("--phoneme-query", o.phoneme_query);
  m.fill("--encoding", o.encoding);
  m.fill("--beam", o.beam);
  m.fill("--max-symbols", o.max_symbols);
  m.fill("--no-root", o.no_root);
  require_choice("--bias", o.bias, {"on", "off"});
  require_choice("--phoneme-query", o.phoneme_query, {"on", "off"});
  require_choice("--encoding", o.encoding, {"grapheme", "phoneme", "both"});
  require_params_input("--params", o.params);
  require_input("--scenarios", o.scenarios);
  require_input("--vocab", o.vocab);
  require_input("--lexicon", o.lexicon);
  require_input("--inventory", o.inventory);
  require_input("--list", o.list);
  require_input("--alignments", o.alignments);
  require_output("--hyp-out", o.hyp_out);
  require_positive("--beam", o.beam);
  require_positive("--max-symbols", o.max_symbols);

  CorpusFiles c = load_corpus(o.inventory, o.lexicon, o.vocab);
  ListAndTree lt = load_list_and_tree(o.list, c.lexicon, c.vocab);
  const ModelParams params = load_params(o.params);
  const ScenarioSuite suite = scenarios_from_json(load_json_file(o.scenarios), c.vocab);

  std::set<std::string> needed;
  for (const auto& u : suite.utterances) needed.insert(u.words.begin(), u.words.end());
  for (const auto& e : lt.list.entries) needed.insert(e.word);
  auto amap = load_alignment_map(o.alignments, c.lexicon, needed);
  const WordAlignments aligns = make_tree_alignments(lt.list, lt.segs, amap, params.phoneme_embed);

  EncodingOptions enc_opts;
  enc_opts.mode = parse_encoding_mode(o.encoding);
  enc_opts.include_root = !o.no_root;
  const TreeEncodings enc = encode_tree(lt.tree, params.enc, aligns, enc_opts);

  const MockWorld world =
      MockWorld::make(c.vocab.size(), params.dims.d_enc, params.dims.d_joint, suite.world_seed);
  const auto utts = build_utterances(suite, c.lexicon, c.vocab, amap, world, c.inventory.size());

  DecodeConfig dc;
  dc.beam = o.beam;
  dc.max_symbols_per_frame = o.max_symbols;
  dc.biasing_enabled = o.bias == "on";
  dc.phoneme_query_enabled = o.phoneme_query == "on";

  std::string hyp_text, ref_text;
  for (const auto& u : utts) {
    const DecodeResult res = decode(params, enc, lt.tree, c.vocab, u, dc);
    hyp_text += join_words(pieces_to_words(c.vocab, res.pieces));
    hyp_text += '\n';
    ref_text += join_words(u.ref_words);
    ref_text += '\n';
  }
  write_text_file(o.hyp_out, hyp_text);

  std::vector<std::string> inputs{o.scenarios, o.vocab, o.lexicon, o.inventory, o.list,
                                  o.alignments};
  for (const auto& p : params_files(o.params)) inputs.push_back(p);
  nlohmann::json opts{{"bias", o.bias},
                      {"phoneme_query", o.phoneme_query},
                      {"encoding", o.encoding},
                      {"beam", o.beam},
                      {"max_symbols", o.max_symbols},
                      {"include_root", !o.no_root}};
  write_manifest("simulate", {o.hyp_out}, inputs, params.seed, opts);
  if (!o.ref_out.empty()) {
    write_text_file(o.ref_out, ref_text);
    write_manifest("simulate", {o.ref_out}, inputs, params.seed, opts);
  }
  std::printf("decoded %zu utterances (bias %s, phoneme query %s) -> %s\n", utts.size(),
              o.bias.c_str(), o.phoneme_query.c_str(), o.hyp_out.c_str());
}

// ---------------------------------------------------------------------------
// score

struct ScoreOpts {
  std::string config, ref, hyp, list, json_out;
};

void run_score(const ScoreOpts& raw, const CLI::App* cmd) {
  ScoreOpts o = raw;
  Merge m(cmd, load_config(o.config));
  m.fill("--ref", o.ref);
  m.fill("--hyp", o.hyp);
  m.fill("--list", o.list);
  m.fill("--json", o.json_out);
  require_input("--ref", o.ref);
  require_input("--hyp", o.hyp);
  require_input("--list", o.list);
  require_output("--json", o.json_out);

  std::vector<Words> refs, hyps;
  for (const auto& line : detail::read_lines(o.ref)) refs.push_back(detail::split_ws(line));
  for (const auto& line : detail::read_lines(o.hyp)) hyps.push_back(detail::split_ws(line));
  std::set<std::string> biasing;
  for (const auto& line : detail::read_lines(o.list)) {
    if (!line.empty()) biasing.insert(line);
  }

  const CorpusScore s = score_corpus(refs, hyps, biasing);
  nlohmann::json j;
  j["format"] = "treebias-score";
  j["version"] = 1;
  j["utterances"] = refs.size();
  j["biasing_words"] = biasing.size();
  j["wer"] = score_json(s.word);
  j["rwer"] = score_json(s.rare);
  save_json_file(o.json_out, j);

  write_manifest("score", {o.json_out}, {o.ref, o.hyp, o.list}, 0, nlohmann::json::object());
  std::printf("        rate    errors  denom\n");
  std::printf("WER     %-7s %-7d %d\n", rate_str(s.word).c_str(), s.word.counts.errors(),
              s.word.denominator);
  std::printf("R-WER   %-7s %-7d %d\n", rate_str(s.rare).c_str(), s.rare.counts.errors(),
              s.rare.denominator);
}

// ---------------------------------------------------------------------------
// head-gradcheck

struct GradcheckOpts {
  std::string config;
  int instances = 8;
  uint64_t seed = 1;
};

Vector gc_random_vector(Rng& rng, int n) {
  Vector v(n);
  for (int i = 0; i < n; ++i) v(i) = rng.uniform(-1.0, 1.0);
  return v;
}

Vector gc_random_distribution(Rng& rng, int n) {
  Vector v(n);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    v(i) = rng.uniform(0.05, 1.0);
    total += v(i);
  }
  return v / total;
}

struct GradProblem {
  ModelParams params;
  PrefixTree tree;
  WordAlignments aligns;
  EncodingOptions enc_opts;
  std::vector<TrainUtterance> batch;
};

// Small random biasing setup plus a synthetic teacher-forced batch; every
// learned tensor is then compared against central finite differences.
GradProblem make_grad_problem(uint64_t seed) {
  Rng rng(seed);
  GradProblem p;
  const int inventory = 5;

  ModelDims dims;
  dims.vocab_size = 6 + static_cast<int>(rng.next_below(6));
  dims.d = 3 + static_cast<int>(rng.next_below(3));
  dims.d_enc = dims.d + 1;
  dims.d_att = dims.d;
  dims.d_joint = dims.d;
  dims.gcn_layers = 1 + static_cast<int>(rng.next_below(2));
  dims.inventory_size = inventory;
  p.params = init_model(dims, ModelOptions{}, seed * 31 + 7);

  const int n_words = 2 + static_cast<int>(rng.next_below(4));
  std::vector<Segmentation> segs(n_words);
  for (auto& s : segs) {
    const int len = 1 + static_cast<int>(rng.next_below(3));
    for (int i = 0; i < len; ++i) {
      s.piece_ids.push_back(static_cast<int>(rng.next_below(dims.vocab_size)));
    }
  }
  p.tree = build_tree(segs);

  for (const auto& s : segs) {
    const int l = s.length();
    WordPhonemeData w;
    w.sub_char = Matrix::Identity(l, l);
    w.char_phon.kind = AlignKind::Soft;
    w.char_phon.weights.resize(l, l);
    for (int j = 0; j < l; ++j) {
      double total = 0.0;
      for (int i = 0; i < l; ++i) {
        w.char_phon.weights(i, j) = rng.uniform(0.05, 1.0);
        total += w.char_phon.weights(i, j);
      }
      w.char_phon.weights.col(j) /= total;
    }
    w.phon_embed.resize(l, p.params.dims.d_p);
    for (int i = 0; i < l; ++i) {
      const int ph = 1 + static_cast<int>(rng.next_below(inventory - 1));
      w.phon_embed.row(i) = p.params.phoneme_embed.row(ph);
    }
    p.aligns.push_back(std::move(w));
  }

  const int n_utts = 1 + static_cast<int>(rng.next_below(2));
  for (int u = 0; u < n_utts; ++u) {
    TrainUtterance utt;
    const int n_steps = 2 + static_cast<int>(rng.next_below(4));
    for (int t = 0; t < n_steps; ++t) {
      TrainStep step;
      step.h_enc = gc_random_vector(rng, dims.d_enc);
      step.h_joint = gc_random_vector(rng, dims.d_joint);
      step.model_probs = gc_random_distribution(rng, dims.vocab_size + 1);
      if (rng.next_below(2) == 0) step.ctc_posterior = gc_random_distribution(rng, inventory);
      const auto& w = segs[rng.next_below(segs.size())].piece_ids;
      step.prefix.assign(w.begin(), w.begin() + rng.next_below(w.size()));
      step.prev_piece = rng.next_below(4) == 0
                            ? kStartOfSequence
                            : static_cast<int>(rng.next_below(dims.vocab_size));
      step.target = static_cast<int>(rng.next_below(dims.vocab_size + 1));
      utt.steps.push_back(std::move(step));
    }
    p.batch.push_back(std::move(utt));
  }
  return p;
}

struct TensorView {
  std::string name;
  double* data;
  const double* grad;
  Eigen::Index count;
};

std::vector<TensorView> learned_tensors(ModelParams& p, const Gradients& g) {
  std::vector<TensorView> ts;
  auto add = [&](const std::string& name, double* d, const double* gr, Eigen::Index n) {
    ts.push_back({name, d, gr, n});
  };
  add("piece_embed", p.enc.piece_embed.data(), g.piece_embed.data(), p.enc.piece_embed.size());
  add("root_embed", p.enc.root_embed.data(), g.root_embed.data(), p.enc.root_embed.size());
  for (size_t l = 0; l < p.enc.gcn_weights.size(); ++l) {
    add("gcn_w" + std::to_string(l), p.enc.gcn_weights[l].data(), g.gcn_weights[l].data(),
        p.enc.gcn_weights[l].size());
  }
  if (p.enc.proj_learned()) {
    add("phoneme_proj", p.enc.phoneme_proj.data(), g.phoneme_proj.data(),
        p.enc.phoneme_proj.size());
  }
  add("wq", p.head.wq.data(), g.wq.data(), p.head.wq.size());
  add("wq_prev", p.head.wq_prev.data(), g.wq_prev.data(), p.head.wq_prev.size());
  add("wk", p.head.wk.data(), g.wk.data(), p.head.wk.size());
  add("wv", p.head.wv.data(), g.wv.data(), p.head.wv.size());
  add("wgen", p.head.wgen.data(), g.wgen.data(), p.head.wgen.size());
  if (!p.head.tied_phoneme_proj) {
    add("query_phoneme_proj", p.head.query_phoneme_proj.data(), g.query_phoneme_proj.data(),
        p.head.query_phoneme_proj.size());
  }
  if (!p.head.tied_embeddings) {
    add("decoder_embed", p.head.decoder_embed.data(), g.decoder_embed.data(),
        p.head.decoder_embed.size());
  }
  return ts;
}

int run_gradcheck(const GradcheckOpts& raw, const CLI::App* cmd) {
  GradcheckOpts o = raw;
  Merge m(cmd, load_config(o.config));
  m.fill("--instances", o.instances);
  m.fill("--seed", o.seed);
  require_positive("--instances", o.instances);

  const double h = 1e-6;
  double worst = 0.0;
  long entries = 0;
  for (int n = 0; n < o.instances; ++n) {
    GradProblem p = make_grad_problem(o.seed + static_cast<uint64_t>(n));
    Gradients g = Gradients::zeros_like(p.params);
    loss_and_gradients(p.params, p.tree, p.aligns, p.enc_opts, p.batch, &g);
    auto loss_at = [&]() {
      return loss_and_gradients(p.params, p.tree, p.aligns, p.enc_opts, p.batch);
    };
    auto ratio_of = [&](double analytic, double fd) {
      const double err = std::abs(analytic - fd);
      const double bound = std::max(1e-8, 1e-4 * std::max(std::abs(analytic), std::abs(fd)));
      return err / bound;
    };
    auto probe = [&](double* slot, double grad) {
      const double saved = *slot;
      *slot = saved + h;
      const double up = loss_at();
      *slot = saved - h;
      const double down = loss_at();
      *slot = saved;
      worst = std::max(worst, ratio_of(grad, (up - down) / (2.0 * h)));
      ++entries;
    };
    for (const auto& t : learned_tensors(p.params, g)) {
      for (Eigen::Index i = 0; i < t.count; ++i) probe(&t.data[i], t.grad[i]);
    }
    probe(&p.params.head.bgen, g.bgen);
  }
  const bool ok = worst <= 1.0;
  std::printf("%s: %ld gradient entries over %d instances, worst err/bound %.3f\n",
              ok ? "PASS" : "FAIL", entries, o.instances, worst);
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// demo

struct DemoOpts {
  std::string config, json_out;
  std::string phoneme_query = "on";
  int steps = 200, beam = 4;
  double lr = 0.008;
  uint64_t seed = 7;
};

void run_demo_cmd(const DemoOpts& raw, const CLI::App* cmd) {
  DemoOpts o = raw;
  Merge m(cmd, load_config(o.config));
  m.fill("--json", o.json_out);
  m.fill("--phoneme-query", o.phoneme_query);
  m.fill("--steps", o.steps);
  m.fill("--beam", o.beam);
  m.fill("--lr", o.lr);
  m.fill("--seed", o.seed);
  require_choice("--phoneme-query", o.phoneme_query, {"on", "off"});
  if (o.steps < 0) throw ConfigError("--steps must be non-negative");
  if (o.lr < 0) throw ConfigError("--lr must be non-negative");
  require_positive("--beam", o.beam);

  const DemoSetup setup = make_demo_setup(o.seed);
  DemoConfig dc;
  dc.train_steps = o.steps;
  dc.lr = o.lr;
  dc.beam = o.beam;
  dc.phoneme_query = o.phoneme_query == "on";
  dc.seed = o.seed;
  const DemoResult r = run_demo(setup, dc);

  std::printf("seeded pipeline: %zu utterances, %zu biasing words, %d training steps\n",
              setup.suite.utterances.size(), setup.list.entries.size(), o.steps);
  if (!r.loss_trace.empty()) {
    std::printf("training loss %.6f -> %.6f\n", r.loss_trace.front(), r.loss_trace.back());
  }
  std::printf("\n            WER      R-WER\n");
  std::printf("bias off    %-8s %s\n", rate_str(r.unbiased.word).c_str(),
              rate_str(r.unbiased.rare).c_str());
  std::printf("bias on     %-8s %s\n", rate_str(r.biased.word).c_str(),
              rate_str(r.biased.rare).c_str());
  if (r.unbiased.rare.defined && r.biased.rare.defined && r.unbiased.rare.rate > 0) {
    std::printf("\nrare-word error reduction: %.1f%%\n",
                100.0 * (r.unbiased.rare.rate - r.biased.rare.rate) / r.unbiased.rare.rate);
  }
  std::printf("mean p_gen on rare-word steps %.3f, on common-word steps %.3f\n", r.mean_pgen_rare,
              r.mean_pgen_common);

  if (!o.json_out.empty()) {
    nlohmann::json j;
    j["format"] = "treebias-demo";
    j["version"] = 1;
    j["seed"] = o.seed;
    j["utterances"] = setup.suite.utterances.size();
    j["biasing_words"] = setup.list.entries.size();
    j["biased"] = {{"wer", score_json(r.biased.word)}, {"rwer", score_json(r.biased.rare)}};
    j["unbiased"] = {{"wer", score_json(r.unbiased.word)}, {"rwer", score_json(r.unbiased.rare)}};
    j["mean_pgen_rare"] = r.mean_pgen_rare;
    j["mean_pgen_common"] = r.mean_pgen_common;
    if (!r.loss_trace.empty()) {
      j["loss_first"] = r.loss_trace.front();
      j["loss_last"] = r.loss_trace.back();
    }
    save_json_file(o.json_out, j);
    nlohmann::json opts{{"steps", o.steps},
                        {"lr", o.lr},
                        {"beam", o.beam},
                        {"phoneme_query", o.phoneme_query}};
    write_manifest("demo", {o.json_out}, {}, o.seed, opts);
    std::printf("wrote %s\n", o.json_out.c_str());
  }
}

void add_config_flag(CLI::App* sc, std::string& slot) {
  sc->add_option("--config", slot, "flat JSON config file; explicit flags override its keys");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tree-constrained pointer biasing pipeline"};
  app.require_subcommand(1);
  int rc = 0;

  auto at = std::make_shared<AlignTrainOpts>();
  auto* sc_align_train =
      app.add_subcommand("align-train", "train the grapheme-phoneme chunk model by EM");
  add_config_flag(sc_align_train, at->config);
  sc_align_train->add_option("--lexicon", at->lexicon, "lexicon TSV: word<TAB>phoneme symbols");
  sc_align_train->add_option("--inventory", at->inventory, "phoneme inventory, one symbol per line");
  sc_align_train->add_option("--out", at->out, "output chunk model JSON");
  sc_align_train->add_option("--max-g", at->max_g, "max graphemes per chunk")->capture_default_str();
  sc_align_train->add_option("--max-p", at->max_p, "max phonemes per chunk")->capture_default_str();
  sc_align_train->add_option("--iters", at->iters, "EM iteration cap")->capture_default_str();
  sc_align_train->add_option("--tol", at->tol, "log-likelihood convergence tolerance")
      ->capture_default_str();
  sc_align_train->callback([at, sc_align_train]() { run_align_train(*at, sc_align_train); });

  auto al = std::make_shared<AlignOpts>();
  auto* sc_align =
      app.add_subcommand("align", "emit per-word character-phoneme alignment matrices");
  add_config_flag(sc_align, al->config);
  sc_align->add_option("--lexicon", al->lexicon, "lexicon TSV");
  sc_align->add_option("--inventory", al->inventory, "phoneme inventory");
  sc_align->add_option("--alignment", al->alignment, "em (Viterbi from chunk model) or soft")
      ->capture_default_str();
  sc_align->add_option("--multigram", al->multigram, "trained chunk model JSON (em mode)");
  sc_align->add_option("--alignments", al->alignments, "existing soft alignment JSON (soft mode)");
  sc_align->add_option("--out", al->out, "output alignment JSON array");
  sc_align->callback([al, sc_align]() { run_align(*al, sc_align); });

  auto tk = std::make_shared<TokenizeOpts>();
  auto* sc_tokenize = app.add_subcommand("tokenize", "segment words into subword pieces");
  add_config_flag(sc_tokenize, tk->config);
  sc_tokenize->add_option("--vocab", tk->vocab, "subword vocabulary, one piece per line");
  sc_tokenize->add_option("--words", tk->words, "input words, one per line");
  sc_tokenize->add_option("--out", tk->out, "output TSV: word<TAB>pieces");
  sc_tokenize->callback([tk, sc_tokenize]() { run_tokenize(*tk, sc_tokenize); });

  auto bt = std::make_shared<BuildTrieOpts>();
  auto* sc_build_trie = app.add_subcommand("build-trie", "build the biasing-list prefix tree");
  add_config_flag(sc_build_trie, bt->config);
  sc_build_trie->add_option("--vocab", bt->vocab, "subword vocabulary");
  sc_build_trie->add_option("--lexicon", bt->lexicon, "lexicon TSV");
  sc_build_trie->add_option("--inventory", bt->inventory, "phoneme inventory");
  sc_build_trie->add_option("--list", bt->list, "biasing words, one per line");
  sc_build_trie->add_option("--out", bt->out, "output tree JSON");
  sc_build_trie->callback([bt, sc_build_trie]() { run_build_trie(*bt, sc_build_trie); });

  auto en = std::make_shared<EncodeOpts>();
  auto* sc_encode = app.add_subcommand("encode", "compute graph-convolved tree node encodings");
  add_config_flag(sc_encode, en->config);
  sc_encode->add_option("--vocab", en->vocab, "subword vocabulary");
  sc_encode->add_option("--lexicon", en->lexicon, "lexicon TSV");
  sc_encode->add_option("--inventory", en->inventory, "phoneme inventory");
  sc_encode->add_option("--list", en->list, "biasing words, one per line");
  sc_encode->add_option("--alignments", en->alignments, "per-word alignment JSON");
  sc_encode->add_option("--params", en->params, "model parameters (binary + .json sidecar)");
  sc_encode->add_option("--encoding", en->encoding, "grapheme|phoneme|both")
      ->capture_default_str();
  sc_encode->add_flag("--no-root", en->no_root, "drop the virtual root row");
  sc_encode->add_option("--out", en->out, "output encodings JSON");
  sc_encode->callback([en, sc_encode]() { run_encode(*en, sc_encode); });

  auto tr = std::make_shared<TrainOpts>();
  auto* sc_train = app.add_subcommand("train", "train the biasing head on a scenario suite");
  add_config_flag(sc_train, tr->config);
  sc_train->add_option("--scenarios", tr->scenarios, "scenario suite JSON");
  sc_train->add_option("--vocab", tr->vocab, "subword vocabulary");
  sc_train->add_option("--lexicon", tr->lexicon, "lexicon TSV");
  sc_train->add_option("--inventory", tr->inventory, "phoneme inventory");
  sc_train->add_option("--list", tr->list, "biasing words, one per line");
  sc_train->add_option("--alignments", tr->alignments, "per-word alignment JSON");
  sc_train->add_option("--params-in", tr->params_in, "resume from existing parameters");
  sc_train->add_option("--out", tr->out, "output parameters path");
  sc_train->add_option("--encoding", tr->encoding, "grapheme|phoneme|both")->capture_default_str();
  sc_train->add_option("--phoneme-query", tr->phoneme_query, "on|off")->capture_default_str();
  sc_train->add_option("--pemb", tr->pemb, "phoneme embedding mode: oh|oh+")
      ->capture_default_str();
  sc_train->add_option("--d", tr->d, "node encoding size")->capture_default_str();
  sc_train->add_option("--d-enc", tr->d_enc, "acoustic feature size")->capture_default_str();
  sc_train->add_option("--d-att", tr->d_att, "attention size (0 = same as --d)")
      ->capture_default_str();
  sc_train->add_option("--d-joint", tr->d_joint, "joint feature size")->capture_default_str();
  sc_train->add_option("--layers", tr->layers, "graph convolution layers")->capture_default_str();
  sc_train->add_option("--steps", tr->steps, "training steps")->capture_default_str();
  sc_train->add_option("--lr", tr->lr, "learning rate")->capture_default_str();
  sc_train->add_option("--seed", tr->seed, "initialization seed")->capture_default_str();
  sc_train->add_flag("--no-root", tr->no_root, "drop the virtual root row");
  sc_train->callback([tr, sc_train]() { run_train(*tr, sc_train); });

  auto si = std::make_shared<SimulateOpts>();
  auto* sc_simulate = app.add_subcommand("simulate", "decode a scenario suite to hypotheses");
  add_config_flag(sc_simulate, si->config);
  sc_simulate->add_option("--params", si->params, "model parameters");
  sc_simulate->add_option("--scenarios", si->scenarios, "scenario suite JSON");
  sc_simulate->add_option("--vocab", si->vocab, "subword vocabulary");
  sc_simulate->add_option("--lexicon", si->lexicon, "lexicon TSV");
  sc_simulate->add_option("--inventory", si->inventory, "phoneme inventory");
  sc_simulate->add_option("--list", si->list, "biasing words, one per line");
  sc_simulate->add_option("--alignments", si->alignments, "per-word alignment JSON");
  sc_simulate->add_option("--hyp-out", si->hyp_out, "output hypotheses, one utterance per line");
  sc_simulate->add_option("--ref-out", si->ref_out, "also write references, one per line");
  sc_simulate->add_option("--bias", si->bias, "on|off")->capture_default_str();
  sc_simulate->add_option("--phoneme-query", si->phoneme_query, "on|off")->capture_default_str();
  sc_simulate->add_option("--encoding", si->encoding, "grapheme|phoneme|both")
      ->capture_default_str();
  sc_simulate->add_option("--beam", si->beam, "beam width")->capture_default_str();
  sc_simulate->add_option("--max-symbols", si->max_symbols, "emission cap per frame")
      ->capture_default_str();
  sc_simulate->add_flag("--no-root", si->no_root, "drop the virtual root row");
  sc_simulate->callback([si, sc_simulate]() { run_simulate(*si, sc_simulate); });

  auto so = std::make_shared<ScoreOpts>();
  auto* sc_score = app.add_subcommand("score", "score hypotheses against references");
  add_config_flag(sc_score, so->config);
  sc_score->add_option("--ref", so->ref, "reference words, one utterance per line");
  sc_score->add_option("--hyp", so->hyp, "hypothesis words, one utterance per line");
  sc_score->add_option("--list", so->list, "biasing words, one per line");
  sc_score->add_option("--json", so->json_out, "output report JSON");
  sc_score->callback([so, sc_score]() { run_score(*so, sc_score); });

  auto gc = std::make_shared<GradcheckOpts>();
  auto* sc_gradcheck =
      app.add_subcommand("head-gradcheck", "verify analytic gradients by finite differences");
  add_config_flag(sc_gradcheck, gc->config);
  sc_gradcheck->add_option("--instances", gc->instances, "random problem instances")
      ->capture_default_str();
  sc_gradcheck->add_option("--seed", gc->seed, "base seed")->capture_default_str();
  sc_gradcheck->callback([gc, sc_gradcheck, &rc]() { rc = run_gradcheck(*gc, sc_gradcheck); });

  auto de = std::make_shared<DemoOpts>();
  auto* sc_demo =
      app.add_subcommand("demo", "full seeded pipeline: train, decode with and without biasing");
  add_config_flag(sc_demo, de->config);
  sc_demo->add_option("--seed", de->seed, "pipeline seed")->capture_default_str();
  sc_demo->add_option("--steps", de->steps, "training steps")->capture_default_str();
  sc_demo->add_option("--lr", de->lr, "learning rate")->capture_default_str();
  sc_demo->add_option("--beam", de->beam, "beam width")->capture_default_str();
  sc_demo->add_option("--phoneme-query", de->phoneme_query, "on|off")->capture_default_str();
  sc_demo->add_option("--json", de->json_out, "optional report JSON");
  sc_demo->callback([de, sc_demo]() { run_demo_cmd(*de, sc_demo); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
