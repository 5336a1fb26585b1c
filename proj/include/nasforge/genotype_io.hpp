#pragma once

// JSON text format and DOT export for genotypes.

#include "json.hpp"

#include <sstream>
#include <stdexcept>
#include <string>

#include "nasforge/search_space.hpp"

namespace nasforge {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string source_name(SourceId s) { return s == kRawSource ? "RAW" : "B" + std::to_string(s); }

inline nlohmann::json to_json(const Genotype& g) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : g.blocks) {
    nlohmann::json jb;
    jb["connections"] = nlohmann::json::array();
    for (SourceId s : b.connections) jb["connections"].push_back(source_name(s));
    jb["dense"] = nlohmann::json::array();
    for (const auto& [op, gene] : b.dense) jb["dense"].push_back({{"op", name_of(op)}, {"dim", gene.dim}, {"bits", gene.bits}});
    jb["sparse"] = nlohmann::json::array();
    for (const auto& [op, gene] : b.sparse)
      jb["sparse"].push_back({{"op", name_of(op)}, {"dim", gene.dim}, {"bits", gene.bits}});
    jb["d2s"] = b.d2s;
    jb["s2d"] = b.s2d;
    blocks.push_back(std::move(jb));
  }
  return nlohmann::json{{"blocks", std::move(blocks)}, {"head", {{"op", "FC"}, {"out", 1}}}};
}

inline std::string serialize(const Genotype& g) { return to_json(g).dump(2) + "\n"; }

namespace detail {
template <class T>
T field(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw ParseError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(where + "." + key + ": wrong type");
  }
}

inline SourceId parse_source(const std::string& s, const std::string& where) {
  if (s == "RAW") return kRawSource;
  if (s.size() >= 2 && s[0] == 'B') {
    try {
      std::size_t used = 0;
      const int v = std::stoi(s.substr(1), &used);
      if (used == s.size() - 1 && v >= 1) return v;
    } catch (const std::exception&) {
    }
  }
  throw ParseError(where + ": unknown connection source '" + s + "'");
}
}  // namespace detail

inline Genotype from_json(const nlohmann::json& j) {
  Genotype g;
  const auto blocks = detail::field<nlohmann::json>(j, "blocks", "genotype");
  if (!blocks.is_array()) throw ParseError("genotype.blocks: expected an array");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string where = "blocks[" + std::to_string(i) + "]";
    const auto& jb = blocks[i];
    BlockGene b;
    for (const auto& c : detail::field<std::vector<std::string>>(jb, "connections", where))
      b.connections.push_back(detail::parse_source(c, where + ".connections"));
    std::sort(b.connections.begin(), b.connections.end());
    auto ops_of = [&](const char* key, auto parse, auto& target) {
      const auto arr = detail::field<nlohmann::json>(jb, key, where);
      if (!arr.is_array()) throw ParseError(where + "." + key + ": expected an array");
      for (std::size_t k = 0; k < arr.size(); ++k) {
        const std::string at = where + "." + key + "[" + std::to_string(k) + "]";
        const auto name = detail::field<std::string>(arr[k], "op", at);
        auto op = parse(name);
        if (!op) throw ParseError(at + ".op: unknown operator '" + name + "'");
        if (target.count(*op)) throw ParseError(at + ".op: duplicate operator '" + name + "'");
        target[*op] = OpGene{detail::field<std::size_t>(arr[k], "dim", at), detail::field<int>(arr[k], "bits", at)};
      }
    };
    ops_of("dense", parse_dense_op, b.dense);
    ops_of("sparse", parse_sparse_op, b.sparse);
    b.d2s = detail::field<bool>(jb, "d2s", where);
    b.s2d = detail::field<bool>(jb, "s2d", where);
    g.blocks.push_back(std::move(b));
  }
  return g;
}

inline Genotype deserialize(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("genotype: ") + e.what());
  }
  return from_json(j);
}

/// Graphviz rendering: one node per block with its operators; blocks that do
/// not reach the head are dashed.
inline std::string to_dot(const Genotype& g) {
  const auto used = reachable_blocks(g);
  std::ostringstream os;
  os << "digraph genotype {\n  rankdir=TB;\n  node [shape=box, fontname=\"Helvetica\"];\n";
  os << "  RAW [label=\"RAW\", shape=ellipse];\n";
  for (std::size_t i = 0; i < g.blocks.size(); ++i) {
    const auto& b = g.blocks[i];
    os << "  B" << i + 1 << " [label=\"B" << i + 1 << "\\ndense:";
    for (const auto& [op, gene] : b.dense) os << ' ' << name_of(op) << '@' << gene.dim;
    os << "\\nsparse:";
    for (const auto& [op, gene] : b.sparse) os << ' ' << name_of(op) << '@' << gene.dim;
    if (b.d2s || b.s2d) os << "\\nmergers:" << (b.d2s ? " d2s" : "") << (b.s2d ? " s2d" : "");
    os << '"';
    if (!used[i + 1]) os << ", style=dashed";
    os << "];\n";
  }
  os << "  HEAD [label=\"FC head\", shape=ellipse];\n";
  for (std::size_t i = 0; i < g.blocks.size(); ++i)
    for (SourceId s : g.blocks[i].connections) os << "  " << source_name(s) << " -> B" << i + 1 << ";\n";
  os << "  " << (g.blocks.empty() ? std::string("RAW") : "B" + std::to_string(g.blocks.size())) << " -> HEAD;\n";
  os << "}\n";
  return os.str();
}

}  // namespace nasforge
